"""Why symmetric objects need prior-conditioned detection.

A 12-fold symmetric ring looks identical after every 30-degree turn, so
a detector with no memory can only pick labels relative to the current
viewpoint ("canonical" labels).  As the camera orbits, that choice
rotates with it: the pixel tagged `rim point 0` belongs to a different
physical point each time.  Triangulating one label across the orbit then
smears over the whole rim -- the classic fly-away failure.

Conditioning the detector on a projection of the current estimate pins
the labels to physical points, and the same triangulation collapses to
millimetres.
"""

import numpy as np

from kpslam.detector import NoiseConfig, simulate_detection
from kpslam.geometry import CameraModel, RigidTransform
from kpslam.harness import look_at_pose
from kpslam.metrics import ray_spread
from kpslam.symmetry import (
    ObjectModel,
    build_prior,
    canonical_symmetry,
    discretize_axis_symmetry,
)

rng = np.random.default_rng(7)
cam = CameraModel(fx=500.0, fy=500.0, cx=320.0, cy=240.0,
                  width=640, height=480)

# -- a 12-fold ring: 12 rim points plus two axis points -------------------
count, radius = 12, 0.06
ang = 2 * np.pi * np.arange(count) / count
rim = np.column_stack([radius * np.cos(ang), radius * np.sin(ang),
                       np.zeros(count)])
pts = np.vstack([rim, [[0, 0, 0.0], [0, 0, 0.03]]])
model = ObjectModel("ring", pts, np.arange(len(pts)),
                    symmetries=discretize_axis_symmetry([0, 0, 1], count),
                    is_symmetric=True)
obj_pose = RigidTransform(np.eye(3), np.zeros(3))  # object at the origin

# -- orbit the camera and detect with and without a prior -----------------
noise = NoiseConfig(pixel_sigma_range=(0.5, 0.5), outlier_rate=0.0,
                    mask_flip_rate=0.0)
n_frames = 36
cam_poses, free_px, prior_px, chosen = [], [], [], []
for j in range(n_frames):
    theta = 2 * np.pi * j / n_frames
    cam_pose = look_at_pose([0.7 * np.cos(theta), 0.7 * np.sin(theta), 0.45],
                            [0.0, 0.0, 0.0])
    cam_poses.append(cam_pose)
    chosen.append(canonical_symmetry(model, cam_pose.rotation))

    free = simulate_detection(model, cam_pose, obj_pose, cam, noise,
                              rng=np.random.default_rng((1, j)))
    prior = build_prior(model, cam_pose, obj_pose, cam)
    cond = simulate_detection(model, cam_pose, obj_pose, cam, noise,
                              prior=prior, rng=np.random.default_rng((1, j)))
    free_px.append(next(d.coord for d in free if d.keypoint_id == 0))
    prior_px.append(next(d.coord for d in cond if d.keypoint_id == 0))

print("canonical hypothesis picked per frame (no prior):")
print("  " + " ".join(f"{m:2d}" for m in chosen))
print("the label assignment rotates with the viewpoint.\n")

# -- triangulate the pixels labelled `rim point 0` across the orbit -------
for name, pixels in (("no prior ", free_px), ("with prior", prior_px)):
    point, dists = ray_spread(cam_poses, np.array(pixels), cam)
    print(f"{name}: rays for label 0 miss their best-fit point by up to "
          f"{dists.max() * 100:6.2f} cm (rim diameter {2 * radius * 100:.0f} cm)")

print("\nwithout the prior the `same` label sweeps the rim, so its rays")
print("never meet; with it they agree on one physical point.")
