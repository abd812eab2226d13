"""Consensus-based PnP under increasing outlier contamination.

A minimal three-point solver is exact but fragile: one bad
correspondence in the sample ruins the pose.  RANSAC repeats the minimal
solve on random triples, keeps the hypothesis with the largest
chi-square consensus set, and polishes it on those inliers.  This sweep
shows the estimator holding a sub-degree grip on the pose until the
outlier fraction overwhelms the sampler.
"""

import numpy as np
from scipy.spatial.transform import Rotation

from kpslam.errors import NoConsensus
from kpslam.geometry import CameraModel, RigidTransform, log_map, project_points
from kpslam.pnp import ransac_pnp

rng = np.random.default_rng(11)
cam = CameraModel(fx=500.0, fy=500.0, cx=320.0, cy=240.0,
                  width=640, height=480)

n_pts, sigma, trials = 16, 1.0, 150

print("outliers   success   median rot err   median trans err   failures")
for rate in (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6):
    rot_errs, trans_errs, failures = [], [], 0
    for t in range(trials):
        trial_rng = np.random.default_rng((int(rate * 100), t))
        pts = trial_rng.uniform(-0.12, 0.12, (n_pts, 3))
        pose = RigidTransform(
            Rotation.random(random_state=trial_rng).as_matrix(),
            np.array([trial_rng.uniform(-0.15, 0.15),
                      trial_rng.uniform(-0.15, 0.15),
                      trial_rng.uniform(0.7, 1.5)]))
        uv, _ = project_points(cam, pose.apply(pts))
        uv += sigma * trial_rng.standard_normal(uv.shape)
        bad = trial_rng.random(n_pts) < rate
        uv[bad] += trial_rng.uniform(30, 120, (bad.sum(), 2)) * \
            np.sign(trial_rng.standard_normal((bad.sum(), 2)))
        covs = np.tile(sigma ** 2 * np.eye(2), (n_pts, 1, 1))
        try:
            res = ransac_pnp(pts, uv, covs, cam, rng=trial_rng)
        except NoConsensus:
            failures += 1
            continue
        rel = res.pose.compose(pose.inverse())
        rot_errs.append(np.linalg.norm(log_map(rel)[:3]))
        trans_errs.append(np.linalg.norm(res.pose.translation
                                         - pose.translation))
    ok = [r < np.deg2rad(2.0) and t < 0.02
          for r, t in zip(rot_errs, trans_errs)]
    print(f"  {rate:4.0%}     {np.mean(ok):6.1%}      "
          f"{np.degrees(np.median(rot_errs)):7.3f} deg      "
          f"{np.median(trans_errs) * 1000:7.2f} mm         {failures}")

print("\nthe chi-square consensus gate keeps gross correspondences out of")
print("the polish, so accuracy stays flat until samples of three clean")
print("points become rare.")
