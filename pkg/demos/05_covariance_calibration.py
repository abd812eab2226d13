"""What honest covariances buy, and what dishonest ones cost.

Part 1 scores the reported covariances themselves: residuals from a
calibrated detector pass the chi-square consistency test at the textbook
rate, while covariances mis-scaled to a quarter of the true sigma fail
it almost always -- the same gap a miscalibrated network shows.

Part 2 feeds a heteroscedastic scene (keypoint sigmas spanning 0.5 to
8 px) through the full pipeline twice: once weighting every residual by
its reported covariance, once pretending all pixels are equal.  The
gap in pose accuracy is the point of carrying covariances end to end.
"""

import numpy as np

from kpslam.detector import NoiseConfig, simulate_detection
from kpslam.geometry import CameraModel, RigidTransform
from kpslam.harness import RunConfig, run_pipeline
from kpslam.metrics import calibration_report
from kpslam.symmetry import ObjectModel

cam = CameraModel(fx=500.0, fy=500.0, cx=320.0, cy=240.0,
                  width=640, height=480)
rng = np.random.default_rng(3)

# -- part 1: are the reported covariances telling the truth? --------------
model = ObjectModel("probe", rng.uniform(-0.08, 0.08, (40, 3)), np.arange(40))
obj_pose = RigidTransform(np.eye(3), np.array([0.0, 0.0, 0.9]))
noise = NoiseConfig(pixel_sigma_range=(2.0, 2.0), aniso_ratio_max=1.0,
                    outlier_rate=0.0, mask_flip_rate=0.0)

for mode, manual_sigma, label in (
        ("calibrated", 2.0, "calibrated (reported = true sigma)"),
        ("manual", 0.5, "manual, mis-scaled to sigma/4      ")):
    errors, covs = [], []
    for i in range(500):
        dets = simulate_detection(
            model, RigidTransform.identity(), obj_pose, cam, noise,
            rng=np.random.default_rng((9, i)), cov_mode=mode,
            manual_sigma=manual_sigma)
        errors += [d.coord - d.true_coord for d in dets]
        covs += [d.cov for d in dets]
    rep = calibration_report(np.array(errors), np.array(covs))
    print(f"{label}: {rep.fraction_pass_chi2_99:6.1%} of "
          f"{rep.n_samples} residuals pass the 99% chi-square test")

print("\nchi-square gating, voting, and Huber weighting all read these")
print("covariances, so a 4x lie poisons every stage at once.\n")

# -- part 2: pose accuracy with and without covariance weighting ----------
base = dict(n_frames=30, n_asymmetric=3, n_twofold=1, n_fourfold=0,
            n_bowl=0, pixel_sigma_lo=0.5, pixel_sigma_hi=8.0,
            outlier_rate=0.05)
print("heteroscedastic scene (sigmas 0.5..8 px), mean ADD(-S) AUC:")
print("seed   calibrated weights   identity weights")
for seed in range(4):
    cal = run_pipeline(RunConfig(seed=seed, covariance_mode="calibrated",
                                 **base))
    ident = run_pipeline(RunConfig(seed=seed, covariance_mode="identity",
                                   **base))
    print(f"  {seed}        {cal.mean_auc:6.2f}             "
          f"{ident.mean_auc:6.2f}")

print("\nwith identity weights the gate can't tell an 8-pixel-sigma")
print("keypoint from an outlier, and precise keypoints get no extra say;")
print("tracking degrades or collapses outright.")
