"""Shared builders for multi-view test scenes with known ground truth."""

import numpy as np

from kpslam.detector import NoiseConfig, detection_rng, simulate_bbox, simulate_detection
from kpslam.errors import NotVisible
from kpslam.frontend import FrameInput
from kpslam.geometry import CameraModel, RigidTransform, exp_map, log_map, project_points
from kpslam.scene import Measurement, SceneState
from kpslam.symmetry import ObjectModel, discretize_axis_symmetry


def make_camera():
    return CameraModel(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)


def random_box_model(rng, object_id, n_kp=8, id_offset=0, half=0.08):
    pts = rng.uniform(-half, half, size=(n_kp, 3))
    return ObjectModel(object_id, pts, np.arange(n_kp) + id_offset)


def symmetric_ring_model(object_id, count=4, radius=0.08, height=0.05, id_offset=0):
    """Two keypoint rings plus axis endpoints, invariant under 2pi/count."""
    ang = 2 * np.pi * np.arange(count) / count
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    pts = np.vstack([
        np.column_stack([ring, np.full(count, height)]),
        np.column_stack([ring, np.full(count, -height)]),
        [[0.0, 0.0, height * 1.5], [0.0, 0.0, -height * 1.5]],
    ])
    return ObjectModel(
        object_id, pts, np.arange(len(pts)) + id_offset,
        symmetries=discretize_axis_symmetry([0.0, 0.0, 1.0], count),
        is_symmetric=True,
    )


def clean_noise():
    """Noise model that is numerically quiet but structurally complete."""
    return NoiseConfig(pixel_sigma_range=(1e-12, 1e-12), outlier_rate=0.0,
                       mask_flip_rate=0.0, bbox_jitter=0.0)


def make_frame_input(frame_id, seed, camera, models, gt_cams, gt_objs, noise,
                     cov_mode="calibrated", external=None, only=None):
    """Simulate prior-free detections for every visible object in a frame."""
    dets, boxes = {}, {}
    for obj_id, model in models.items():
        if only is not None and obj_id not in only:
            continue
        try:
            bbox = simulate_bbox(model, gt_cams[frame_id], gt_objs[obj_id],
                                 camera, noise,
                                 detection_rng(seed, frame_id, obj_id, 0))
            d = simulate_detection(
                model, gt_cams[frame_id], gt_objs[obj_id], camera, noise,
                bbox=bbox, rng=detection_rng(seed, frame_id, obj_id, 1),
                cov_mode=cov_mode)
        except NotVisible:
            continue
        dets[obj_id] = d
        boxes[obj_id] = bbox
    return FrameInput(frame_id, dets, boxes, external_cam_pose=external)


def make_prior_detector(seed, camera, models, gt_cams, gt_objs, noise,
                        cov_mode="calibrated"):
    """Detector callback for the prior-conditioned second pass."""

    def fn(frame_id, obj_id, prior, bbox):
        try:
            return simulate_detection(
                models[obj_id], gt_cams[frame_id], gt_objs[obj_id], camera,
                noise, prior=prior, bbox=bbox,
                rng=detection_rng(seed, frame_id, obj_id, 2),
                cov_mode=cov_mode)
        except NotVisible:
            return []

    return fn


def pose_errors(est, gt):
    xi = log_map(est.compose(gt.inverse()))
    return (
        float(np.linalg.norm(xi[:3])),
        float(np.linalg.norm(est.translation - gt.translation)),
    )


def build_ba_scene(
    rng,
    n_frames=5,
    n_objects=2,
    n_kp=8,
    pixel_noise=0.0,
    cov_sigma=1.0,
    camera=None,
):
    """Scene whose stored poses ARE ground truth, with synthetic measurements.

    Cameras wobble around the origin looking down +z; objects sit ~1 m
    ahead.  Measurements are exact projections plus optional isotropic
    Gaussian noise with (cov_sigma^2 I) reported covariance.

    Returns (scene, gt_cam_poses, gt_obj_poses).
    """
    cam = camera or make_camera()
    models = {}
    gt_obj = {}
    for i in range(n_objects):
        name = f"obj{i}"
        models[name] = random_box_model(rng, name, n_kp=n_kp, id_offset=100 * i)
        spread = 0.25 * (i - (n_objects - 1) / 2.0)
        gt_obj[name] = RigidTransform(
            exp_map(np.concatenate([rng.normal(size=3) * 0.5, np.zeros(3)])).rotation,
            np.array([spread, rng.uniform(-0.05, 0.05), 1.0 + 0.1 * rng.uniform(-1, 1)]),
        )
    gt_cam = {}
    for j in range(n_frames):
        xi = np.concatenate([rng.normal(size=3) * 0.03, rng.normal(size=3) * 0.05])
        gt_cam[j] = exp_map(xi) if j else RigidTransform.identity()

    scene = SceneState(cam, models)
    scene.cam_poses = dict(gt_cam)
    scene.obj_poses = dict(gt_obj)
    for j in range(n_frames):
        for name, model in models.items():
            pose = gt_cam[j].compose(gt_obj[name])
            uv, valid = project_points(cam, pose.apply(model.keypoints))
            for k in range(model.n_keypoints):
                if not valid[k]:
                    continue
                coord = uv[k] + pixel_noise * rng.standard_normal(2)
                scene.add_measurement(
                    Measurement(
                        frame_id=j,
                        object_id=name,
                        keypoint_id=int(model.valid_indices[k]),
                        coord=coord,
                        cov=cov_sigma ** 2 * np.eye(2),
                        true_coord=uv[k],
                    )
                )
    return scene, gt_cam, gt_obj


def perturb_scene_poses(scene, rng, rot_rad, trans_m, skip_gauge=True):
    """Left-compose random perturbations of fixed magnitude onto all poses."""
    gauge = scene.gauge_frame
    for f in list(scene.cam_poses):
        if skip_gauge and f == gauge:
            continue
        scene.cam_poses[f] = _nudge(rng, rot_rad, trans_m).compose(scene.cam_poses[f])
    for o in list(scene.obj_poses):
        scene.obj_poses[o] = _nudge(rng, rot_rad, trans_m).compose(scene.obj_poses[o])


def _nudge(rng, rot_rad, trans_m):
    omega = rng.normal(size=3)
    omega *= rot_rad / max(np.linalg.norm(omega), 1e-12)
    rho = rng.normal(size=3)
    rho *= trans_m / max(np.linalg.norm(rho), 1e-12)
    return exp_map(np.concatenate([omega, rho]))
