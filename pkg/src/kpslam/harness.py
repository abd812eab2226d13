"""Scenario generation and end-to-end run orchestration.

The harness builds a synthetic tabletop world, simulates a keypoint
detector along a camera trajectory, feeds the stream through the front
end plus scheduled global optimization, and scores the estimates against
ground truth.  A run is fully determined by its RunConfig; every run can
write a detection dump and be replayed bit-for-bit from it.

Frames of reference: ground truth is generated in an internal world
frame and immediately re-expressed relative to the first camera, so the
global frame the estimator works in (gauge = first camera) coincides
with the ground-truth global frame and poses compare directly.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import dataclass, field, fields

import numpy as np

from .backend import BackendConfig, classify_inliers, optimize_global
from .config import dump_config_text
from .detector import (
    COV_MODES,
    NoiseConfig,
    _det_from_json,
    _det_to_json,
    detection_rng,
    dump_record,
    simulate_bbox,
    simulate_detection,
    write_detection_dump,
)
from .errors import (
    InfeasibleScene,
    NoConsensus,
    NotVisible,
    TooFewCorrespondences,
)
from .frontend import RANSAC_STREAM, FrameInput, FrontEnd, FrontEndConfig
from .geometry import (
    BoundingBox,
    CameraModel,
    RigidTransform,
    pose_from_json,
    pose_to_json,
    project_points,
    rotation_about_axis,
)
from .metrics import (
    PoseErrorSample,
    add_metric,
    add_s_metric,
    calibration_report,
    metric_rows,
    ray_spread,
    write_calibration_csv,
    write_metrics_csv,
)
from .pnp import ransac_pnp, refine_single_view
from .scene import SceneState
from .symmetry import ObjectModel, discretize_axis_symmetry

TRAJECTORIES = ("orbit", "arc", "random-walk")
DEFAULT_CAMERA = CameraModel(fx=500.0, fy=500.0, cx=320.0, cy=240.0,
                             width=640, height=480)
MIN_VISIBLE_KEYPOINTS = 4
VISIBILITY_FRACTION = 0.5
PLACEMENT_ATTEMPTS = 100
_GOLDEN_ANGLE = 2.399963229728653


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    """Everything one run needs, flat so it round-trips key=value files."""

    seed: int = 0
    out_dir: str | None = None

    # scene composition
    trajectory: str = "orbit"
    n_frames: int = 100
    n_asymmetric: int = 6
    n_twofold: int = 2
    n_fourfold: int = 1
    n_bowl: int = 1
    bowl_count: int = 64  # discretization of the near-continuous axis

    # detector noise
    pixel_sigma_lo: float = 1.0
    pixel_sigma_hi: float = 3.0
    aniso_ratio_max: float = 2.0
    outlier_rate: float = 0.05
    outlier_spread: float = 40.0
    mask_flip_rate: float = 0.02
    bbox_jitter: float = 2.0

    # ablation switches
    prior_enabled: bool = True
    covariance_mode: str = "calibrated"
    manual_sigma: float = 2.5
    single_view_only: bool = False
    external_poses: bool = False

    # optimization schedule
    backend_every: int = 10
    backend_max_iters: int = 50

    def __post_init__(self):
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        if self.trajectory not in TRAJECTORIES:
            raise ValueError(f"trajectory must be one of {TRAJECTORIES}")
        if self.covariance_mode not in COV_MODES:
            raise ValueError(f"covariance_mode must be one of {COV_MODES}")
        if self.manual_sigma <= 0.0:
            raise ValueError("manual_sigma must be > 0")
        for name in ("n_asymmetric", "n_twofold", "n_fourfold", "n_bowl"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.n_objects < 1:
            raise ValueError("the scene needs at least one object")
        if self.n_bowl > 0 and self.bowl_count < 2:
            raise ValueError("bowl_count must be >= 2")
        if self.backend_every < 1:
            raise ValueError("backend_every must be >= 1")

    @property
    def n_objects(self) -> int:
        return self.n_asymmetric + self.n_twofold + self.n_fourfold + self.n_bowl

    def noise_config(self) -> NoiseConfig:
        return NoiseConfig(
            pixel_sigma_range=(self.pixel_sigma_lo, self.pixel_sigma_hi),
            aniso_ratio_max=self.aniso_ratio_max,
            outlier_rate=self.outlier_rate,
            outlier_spread=self.outlier_spread,
            mask_flip_rate=self.mask_flip_rate,
            bbox_jitter=self.bbox_jitter,
        )

    def backend_config(self) -> BackendConfig:
        return BackendConfig(max_iters=self.backend_max_iters,
                             schedule_every=self.backend_every)

    def frontend_config(self) -> FrontEndConfig:
        return FrontEndConfig(seed=self.seed, prior_enabled=self.prior_enabled)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - names)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        for f in fields(cls):
            if f.name not in values:
                continue
            v = values[f.name]
            if f.type == "int" and (isinstance(v, bool) or not isinstance(v, int)):
                raise ValueError(f"{f.name} expects an integer, got {v!r}")
            if f.type == "float" and (isinstance(v, bool)
                                      or not isinstance(v, (int, float))):
                raise ValueError(f"{f.name} expects a number, got {v!r}")
            if f.type == "bool" and not isinstance(v, bool):
                raise ValueError(f"{f.name} expects true/false, got {v!r}")
        return cls(**values)

    def replaced(self, **overrides) -> "RunConfig":
        merged = self.to_dict()
        merged.update(overrides)
        return RunConfig.from_dict(merged)


# ---------------------------------------------------------------------------
# object library

def _box_keypoints(rng) -> np.ndarray:
    half = rng.uniform([0.025, 0.035, 0.02], [0.05, 0.07, 0.045])
    signs = np.array([[sx, sy, sz]
                      for sx in (-1.0, 1.0)
                      for sy in (-1.0, 1.0)
                      for sz in (-1.0, 1.0)])
    corners = signs * half
    # two off-center face markers keep the corner cloud unambiguous
    marks = np.array([
        [half[0], 0.35 * half[1], -0.2 * half[2]],
        [-0.4 * half[0], -half[1], 0.5 * half[2]],
    ])
    return np.vstack([corners, marks])


def _bottle_keypoints(rng) -> np.ndarray:
    r = rng.uniform(0.022, 0.035)
    h = rng.uniform(0.09, 0.14)
    spin = rng.uniform(0.0, 2.0 * np.pi)
    base_ang = np.array([0.0, 1.25, 2.3, 3.8, 5.1]) + spin
    base = np.stack([r * np.cos(base_ang), r * np.sin(base_ang),
                     np.zeros(5)], axis=1)
    neck_ang = np.array([0.7, 2.9, 4.4]) + spin
    neck = np.stack([0.45 * r * np.cos(neck_ang), 0.45 * r * np.sin(neck_ang),
                     np.full(3, 0.8 * h)], axis=1)
    cap = np.array([[0.2 * r, -0.1 * r, h]])
    label = np.array([[r, 0.0, 0.45 * h]])
    pts = np.vstack([base, neck, cap, label])
    return pts - pts.mean(axis=0)


def _tool_keypoints(rng) -> np.ndarray:
    length = rng.uniform(0.11, 0.16)
    xs = np.array([0.0, 0.3, 0.62, 1.0]) * length
    spine = np.stack([xs,
                      np.array([0.0, 0.008, -0.006, 0.004]),
                      np.array([0.0, -0.005, 0.007, 0.01])], axis=1)
    head = np.array([
        [1.05 * length, 0.03, 0.0],
        [1.08 * length, -0.024, 0.012],
        [0.98 * length, 0.012, -0.018],
    ])
    tail = np.array([[-0.012, -0.01, 0.006], [-0.01, 0.014, -0.008]])
    pts = np.vstack([spine, head, tail])
    return pts - pts.mean(axis=0)


def _twofold_keypoints(rng) -> np.ndarray:
    half = rng.uniform(0.03, 0.05)
    base = np.array([
        [half, 0.012, -0.01],
        [0.55 * half, -0.028, 0.012],
        [0.8 * half, 0.03, 0.03],
        [0.3 * half, 0.008, -0.028],
    ])
    base = base + rng.normal(0.0, 0.003, size=base.shape)
    flip = rotation_about_axis([0.0, 0.0, 1.0], np.pi)
    axis = np.array([[0.0, 0.0, 0.045], [0.0, 0.0, -0.04]])
    # base plus its half-turn image: the set maps onto itself exactly
    return np.vstack([base, base @ flip.T, axis])


def _fourfold_keypoints(rng) -> np.ndarray:
    r1 = rng.uniform(0.03, 0.045)
    r2 = rng.uniform(0.018, 0.03)
    phi = rng.uniform(0.0, 2.0 * np.pi)
    a1 = phi + np.arange(4) * (np.pi / 2.0)
    a2 = phi + 0.35 + np.arange(4) * (np.pi / 2.0)
    top = np.stack([r1 * np.cos(a1), r1 * np.sin(a1), np.full(4, 0.03)], axis=1)
    bot = np.stack([r2 * np.cos(a2), r2 * np.sin(a2), np.full(4, -0.025)], axis=1)
    axis = np.array([[0.0, 0.0, 0.05], [0.0, 0.0, -0.045]])
    return np.vstack([top, bot, axis])


def _bowl_keypoints(rng, count: int) -> np.ndarray:
    r = rng.uniform(0.05, 0.065)
    h = rng.uniform(0.03, 0.045)
    ang = rng.uniform(0.0, 2.0 * np.pi) + np.arange(count) * (2.0 * np.pi / count)
    rim = np.stack([r * np.cos(ang), r * np.sin(ang), np.full(count, h)], axis=1)
    axis = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 0.5 * h], [0.0, 0.0, 1.3 * h]])
    return np.vstack([rim, axis])


_ASYM_KINDS = ("box", "bottle", "tool")
_ASYM_BUILDERS = {"box": _box_keypoints, "bottle": _bottle_keypoints,
                  "tool": _tool_keypoints}


def build_object_library(cfg: RunConfig, rng) -> dict:
    """Deterministic object models; keypoint ids are globally unique."""
    specs = []
    for i in range(cfg.n_asymmetric):
        kind = _ASYM_KINDS[i % len(_ASYM_KINDS)]
        specs.append((f"{kind}{i}", kind, 1))
    for i in range(cfg.n_twofold):
        specs.append((f"clamp{i}", "twofold", 2))
    for i in range(cfg.n_fourfold):
        specs.append((f"block{i}", "fourfold", 4))
    for i in range(cfg.n_bowl):
        specs.append((f"bowl{i}", "bowl", cfg.bowl_count))

    models = {}
    for idx, (object_id, kind, order) in enumerate(specs):
        if kind in _ASYM_BUILDERS:
            kp = _ASYM_BUILDERS[kind](rng)
        elif kind == "twofold":
            kp = _twofold_keypoints(rng)
        elif kind == "fourfold":
            kp = _fourfold_keypoints(rng)
        else:
            kp = _bowl_keypoints(rng, order)
        ids = 1000 * idx + np.arange(kp.shape[0])
        if order > 1:
            syms = discretize_axis_symmetry([0.0, 0.0, 1.0], order)
            models[object_id] = ObjectModel(object_id, kp, ids, symmetries=syms,
                                            is_symmetric=True)
        else:
            models[object_id] = ObjectModel(object_id, kp, ids)
    return models


# ---------------------------------------------------------------------------
# scene generation


def _place_objects(models: dict, rng) -> dict:
    """Object->world poses scattered over a tabletop disc."""
    n = len(models)
    placed = {}
    for i, (object_id, model) in enumerate(models.items()):
        radius = 0.33 * math.sqrt((i + 0.7) / n)
        ang = i * _GOLDEN_ANGLE + rng.uniform(-0.2, 0.2)
        pos = np.array([radius * np.cos(ang), radius * np.sin(ang),
                        rng.uniform(0.0, 0.02)])
        yaw = rotation_about_axis([0.0, 0.0, 1.0], rng.uniform(0.0, 2.0 * np.pi))
        tilt_deg = 3.0 if model.is_symmetric else 8.0
        tilt_ang = rng.uniform(0.0, 2.0 * np.pi)
        tilt_axis = np.array([np.cos(tilt_ang), np.sin(tilt_ang), 0.0])
        tilt = rotation_about_axis(tilt_axis, np.deg2rad(rng.uniform(0.0, tilt_deg)))
        placed[object_id] = RigidTransform(tilt @ yaw, pos)
    return placed


def _camera_path(cfg: RunConfig, rng):
    """World-frame camera centres, look targets, and the yaw span in degrees."""
    n = cfg.n_frames
    theta0 = rng.uniform(0.0, 2.0 * np.pi)
    center = np.array([0.0, 0.0, 0.04])
    if cfg.trajectory == "orbit":
        # two full turns regardless of frame count, like a scan rig
        theta = theta0 + (4.0 * np.pi) * (np.arange(n) / max(n - 1, 1))
        pos = np.stack([0.82 * np.cos(theta), 0.82 * np.sin(theta),
                        np.full(n, 0.55)], axis=1)
        targets = np.tile(center, (n, 1))
        span = math.degrees(4.0 * np.pi) if n > 1 else 0.0
    elif cfg.trajectory == "arc":
        span_rad = 2.0 * np.pi / 3.0
        theta = theta0 + span_rad * (np.arange(n) / max(n - 1, 1))
        pos = np.stack([0.85 * np.cos(theta), 0.85 * np.sin(theta),
                        np.full(n, 0.5)], axis=1)
        targets = np.tile(center, (n, 1))
        span = math.degrees(span_rad) if n > 1 else 0.0
    else:  # random-walk
        pos = np.empty((n, 3))
        p = np.array([0.8 * np.cos(theta0), 0.8 * np.sin(theta0), 0.55])
        for j in range(n):
            pos[j] = p
            p = p + rng.normal(0.0, 0.035, size=3)
            rho = float(np.hypot(p[0], p[1]))
            if rho < 1e-9:
                p[:2] = [0.55, 0.0]
            else:
                p[:2] *= float(np.clip(rho, 0.55, 1.0)) / rho
            p[2] = float(np.clip(p[2], 0.35, 0.8))
        targets = center + rng.normal(0.0, 0.008, size=(n, 3))
        ang = np.unwrap(np.arctan2(pos[:, 1], pos[:, 0]))
        span = math.degrees(float(ang.max() - ang.min()))
    return pos, targets, span


def look_at_pose(position, target) -> RigidTransform:
    """World->camera pose looking from ``position`` toward ``target``.

    Camera convention: z forward, x right, y down (image row direction).
    """
    position = np.asarray(position, dtype=float)
    f = np.asarray(target, dtype=float) - position
    norm = float(np.linalg.norm(f))
    if norm < 1e-12:
        raise ValueError("camera position coincides with its target")
    f = f / norm
    up = np.array([0.0, 0.0, 1.0])
    x = np.cross(f, up)
    if float(np.linalg.norm(x)) < 1e-9:
        up = np.array([0.0, 1.0, 0.0])
        x = np.cross(f, up)
    x = x / float(np.linalg.norm(x))
    y = np.cross(f, x)
    r_wc = np.stack([x, y, f], axis=1)
    return RigidTransform(r_wc.T, -(r_wc.T @ position))


@dataclass
class GroundTruthScene:
    """Immutable-by-convention ground truth for one sequence.

    ``cam_poses[f]`` maps global coordinates into camera f; ``obj_poses``
    map object coordinates into the global frame, which is pinned to the
    first camera so it matches the estimator's gauge choice.
    """

    camera: CameraModel
    models: dict
    cam_poses: dict
    obj_poses: dict
    meta: dict = field(default_factory=dict)

    def frames(self) -> list:
        return sorted(self.cam_poses)

    def visible_count(self, frame_id: int, object_id: str) -> int:
        model = self.models[object_id]
        pose = self.cam_poses[frame_id].compose(self.obj_poses[object_id])
        uv, valid = project_points(self.camera, pose.apply(model.keypoints))
        uv = np.nan_to_num(uv, nan=-1.0)
        inside = ((uv[:, 0] >= 0.0) & (uv[:, 0] < self.camera.width)
                  & (uv[:, 1] >= 0.0) & (uv[:, 1] < self.camera.height))
        return int(np.count_nonzero(valid & inside))

    def is_visible(self, frame_id: int, object_id: str) -> bool:
        return self.visible_count(frame_id, object_id) >= MIN_VISIBLE_KEYPOINTS

    def to_json(self) -> dict:
        return {
            "camera": {
                "fx": self.camera.fx, "fy": self.camera.fy,
                "cx": self.camera.cx, "cy": self.camera.cy,
                "width": self.camera.width, "height": self.camera.height,
            },
            "models": [self.models[k].to_json() for k in sorted(self.models)],
            "cam_poses": {str(f): pose_to_json(p)
                          for f, p in sorted(self.cam_poses.items())},
            "obj_poses": {o: pose_to_json(p)
                          for o, p in sorted(self.obj_poses.items())},
            "meta": dict(self.meta),
        }

    @classmethod
    def from_json(cls, blob: dict) -> "GroundTruthScene":
        c = blob["camera"]
        camera = CameraModel(fx=c["fx"], fy=c["fy"], cx=c["cx"], cy=c["cy"],
                             width=int(c["width"]), height=int(c["height"]))
        models = {m["object_id"]: ObjectModel.from_json(m) for m in blob["models"]}
        cam_poses = {int(f): pose_from_json(p)
                     for f, p in blob["cam_poses"].items()}
        obj_poses = {o: pose_from_json(p) for o, p in blob["obj_poses"].items()}
        return cls(camera, models, cam_poses, obj_poses, dict(blob.get("meta", {})))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(json.dumps(self.to_json(), sort_keys=True, indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "GroundTruthScene":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def generate_scene(cfg: RunConfig, camera: CameraModel | None = None) -> GroundTruthScene:
    """Deterministic tabletop scene satisfying the visibility constraint.

    Every object must show at least MIN_VISIBLE_KEYPOINTS keypoints in at
    least half of the frames; placement is retried with fresh randomness
    until that holds.

    Raises:
        InfeasibleScene: no placement satisfied visibility within
            PLACEMENT_ATTEMPTS attempts.
    """
    camera = camera or DEFAULT_CAMERA
    need = math.ceil(VISIBILITY_FRACTION * cfg.n_frames)
    for attempt in range(PLACEMENT_ATTEMPTS):
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 7, attempt)))
        models = build_object_library(cfg, rng)
        world_obj = _place_objects(models, rng)
        positions, targets, yaw_span = _camera_path(cfg, rng)
        world_cam = [look_at_pose(positions[j], targets[j])
                     for j in range(cfg.n_frames)]
        inv0 = world_cam[0].inverse()
        cam_poses = {j: world_cam[j].compose(inv0) for j in range(cfg.n_frames)}
        obj_poses = {o: world_cam[0].compose(t) for o, t in world_obj.items()}
        gt = GroundTruthScene(
            camera, models, cam_poses, obj_poses,
            meta={"trajectory": cfg.trajectory, "seed": cfg.seed,
                  "n_frames": cfg.n_frames, "yaw_span_deg": yaw_span,
                  "attempt": attempt},
        )
        ok = all(
            sum(gt.is_visible(f, o) for f in range(cfg.n_frames)) >= need
            for o in models
        )
        if ok:
            return gt
    raise InfeasibleScene(
        f"no placement met the {VISIBILITY_FRACTION:.0%} visibility floor "
        f"in {PLACEMENT_ATTEMPTS} attempts"
    )


# ---------------------------------------------------------------------------
# detection sources


class SimulatedDetections:
    """Draws detector output from ground truth on demand, recording a dump."""

    def __init__(self, gt: GroundTruthScene, noise: NoiseConfig, seed: int,
                 cov_mode: str = "calibrated", manual_sigma: float = 2.5):
        self.gt = gt
        self.noise = noise
        self.seed = seed
        self.cov_mode = cov_mode
        self.manual_sigma = manual_sigma
        self.records: list = []

    def frame_input(self, frame_id: int, external_pose=None) -> FrameInput:
        cam_pose = self.gt.cam_poses[frame_id]
        detections, bboxes = {}, {}
        for object_id, model in self.gt.models.items():
            obj_pose = self.gt.obj_poses[object_id]
            try:
                bbox = simulate_bbox(
                    model, cam_pose, obj_pose, self.gt.camera, self.noise,
                    detection_rng(self.seed, frame_id, object_id, 0))
                dets = simulate_detection(
                    model, cam_pose, obj_pose, self.gt.camera, self.noise,
                    bbox=bbox,
                    rng=detection_rng(self.seed, frame_id, object_id, 1),
                    cov_mode=self.cov_mode, manual_sigma=self.manual_sigma)
            except NotVisible:
                continue
            detections[object_id] = dets
            bboxes[object_id] = bbox
            self.records.append(
                dump_record(frame_id, object_id, 1, bbox, False, dets))
        return FrameInput(frame_id, detections, bboxes,
                          external_cam_pose=external_pose)

    def prior_detector(self, frame_id: int, object_id: str, prior, bbox) -> list:
        model = self.gt.models[object_id]
        try:
            dets = simulate_detection(
                model, self.gt.cam_poses[frame_id], self.gt.obj_poses[object_id],
                self.gt.camera, self.noise, prior=prior, bbox=bbox,
                rng=detection_rng(self.seed, frame_id, object_id, 2),
                cov_mode=self.cov_mode, manual_sigma=self.manual_sigma)
        except NotVisible:
            dets = []
        self.records.append(
            dump_record(frame_id, object_id, 2, bbox, prior is not None, dets))
        return dets


class ReplayDetections:
    """Feeds a recorded dump back through the pipeline.

    Faithful replay assumes the same configuration as the recording run:
    prior-conditioned queries not present in the dump come back empty,
    and recorded covariances are used as-is regardless of cov settings.
    """

    def __init__(self, records):
        self.records = [self._parsed(rec) for rec in records]
        self._stream1: dict = {}
        self._stream2: dict = {}
        self._frames: dict = {}
        for rec in self.records:
            key = (int(rec["frame_id"]), rec["object_id"])
            if int(rec["stream"]) == 1:
                self._stream1[key] = rec
                self._frames.setdefault(key[0], []).append(rec["object_id"])
            else:
                self._stream2[key] = rec

    @staticmethod
    def _parsed(rec):
        dets = rec["detections"]
        if dets and isinstance(dets[0], dict):
            rec = dict(rec, detections=[_det_from_json(d) for d in dets])
        return rec

    @staticmethod
    def _bbox(rec):
        box = rec.get("bbox")
        if box is None or isinstance(box, BoundingBox):
            return box
        return BoundingBox(*box)

    def frame_input(self, frame_id: int, external_pose=None) -> FrameInput:
        detections, bboxes = {}, {}
        for object_id in self._frames.get(frame_id, []):
            rec = self._stream1[(frame_id, object_id)]
            detections[object_id] = list(rec["detections"])
            bboxes[object_id] = self._bbox(rec)
        return FrameInput(frame_id, detections, bboxes,
                          external_cam_pose=external_pose)

    def prior_detector(self, frame_id: int, object_id: str, prior, bbox) -> list:
        rec = self._stream2.get((frame_id, object_id))
        return [] if rec is None else list(rec["detections"])


# ---------------------------------------------------------------------------
# evaluation


def _relative_pose_samples(gt: GroundTruthScene, poses_of) -> list:
    """Per-(frame, object) pose errors in the camera frame.

    ``poses_of(frame_id, object_id)`` returns the estimated
    camera-from-object transform or None; objects are scored only on
    frames where ground truth says they are visible, and a missing
    estimate counts as an infinite-error sample.
    """
    samples = []
    for frame_id in gt.frames():
        for object_id, model in gt.models.items():
            if not gt.is_visible(frame_id, object_id):
                continue
            est = poses_of(frame_id, object_id)
            if est is None:
                samples.append(PoseErrorSample(object_id, math.inf, math.inf))
                continue
            truth = gt.cam_poses[frame_id].compose(gt.obj_poses[object_id])
            samples.append(PoseErrorSample(
                object_id,
                add_metric(model.keypoints, est, truth),
                add_s_metric(model.keypoints, est, truth),
            ))
    return samples


def evaluate_scene_estimate(gt: GroundTruthScene, scene: SceneState) -> list:
    def poses_of(frame_id, object_id):
        cam = scene.cam_poses.get(frame_id)
        obj = scene.obj_poses.get(object_id)
        if cam is None or obj is None:
            return None
        return cam.compose(obj)

    return _relative_pose_samples(gt, poses_of)


def evaluate_single_view(gt: GroundTruthScene, poses: dict) -> list:
    return _relative_pose_samples(gt, lambda f, o: poses.get((f, o)))


def scene_calibration(scene: SceneState):
    """Reported-covariance calibration over stored non-outlier residuals."""
    errors, covs = [], []
    for m in scene.measurements:
        if m.true_coord is None or m.is_outlier:
            continue
        errors.append(m.coord - m.true_coord)
        covs.append(m.cov)
    if not errors:
        return None
    return calibration_report(np.array(errors), np.array(covs))


def symmetry_spread(gt: GroundTruthScene, scene: SceneState) -> list:
    """Triangulation disagreement per symmetric object.

    For every keypoint label seen in at least two frames, back-project
    the stored pixels through the estimated camera poses and measure how
    far the rays are from meeting in one point.  Labels that silently
    hop between symmetry hypotheses make this blow past the physical
    object size.
    """
    out = []
    for object_id in sorted(gt.models):
        model = gt.models[object_id]
        if not model.is_symmetric:
            continue
        per_label: dict = {}
        for m in scene.measurements_of(object_id=object_id):
            if m.frame_id in scene.cam_poses:
                per_label.setdefault(m.keypoint_id, []).append(m)
        worst = 0.0
        worst_inlier = 0.0
        n_labels = 0
        for label, ms in per_label.items():
            if len(ms) < 2:
                continue
            poses = [scene.cam_poses[m.frame_id] for m in ms]
            pixels = np.array([m.coord for m in ms])
            _, dists = ray_spread(poses, pixels, scene.camera)
            worst = max(worst, float(dists.max()))
            n_labels += 1
            kept = [i for i, m in enumerate(ms) if m.inlier]
            if len(kept) >= 2:
                poses_in = [poses[i] for i in kept]
                _, dists_in = ray_spread(poses_in, pixels[kept], scene.camera)
                worst_inlier = max(worst_inlier, float(dists_in.max()))
        out.append({
            "object": object_id,
            "max_spread": worst,
            "max_spread_inliers": worst_inlier,
            "diameter": model.diameter,
            "n_labels": n_labels,
        })
    return out


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class RunResult:
    config: RunConfig
    gt: GroundTruthScene
    scene: SceneState | None
    summaries: list
    backend_results: list  # (frame_id, BackendResult)
    single_view_poses: dict | None
    samples: list
    rows: list
    calibration: object
    spread: list
    report: dict
    records: list
    paths: dict = field(default_factory=dict)

    @property
    def mean_auc(self) -> float:
        return float(self.report["mean_auc_add_of_s"])

    @property
    def report_json(self) -> str:
        return report_to_json(self.report)


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.bool_,)):
        return bool(value)
    return value


def report_to_json(report: dict) -> str:
    return json.dumps(_jsonable(report), sort_keys=True, indent=2) + "\n"


def _mean_auc_of(rows) -> float:
    for row in rows:
        if row["object"] == "MEAN":
            return float(row["auc_add_of_s"])
    return 0.0


def run_pipeline(cfg: RunConfig, gt: GroundTruthScene | None = None,
                 source=None) -> RunResult:
    """Simulate (or replay), track, optimize, and score one sequence.

    Frames whose camera pose cannot be established are counted as
    dropped rather than aborting the run.  Results are written to
    ``cfg.out_dir`` when set.
    """
    t_start = time.perf_counter()
    if gt is None:
        gt = generate_scene(cfg)
    t_scene = time.perf_counter()
    if source is None:
        source = SimulatedDetections(gt, cfg.noise_config(), cfg.seed,
                                     cfg.covariance_mode, cfg.manual_sigma)

    if cfg.single_view_only:
        result = _run_single_view(cfg, gt, source, t_start, t_scene)
    else:
        result = _run_slam(cfg, gt, source, t_start, t_scene)

    if cfg.out_dir:
        result.paths = write_run_outputs(result, cfg.out_dir)
    return result


def _run_slam(cfg, gt, source, t_start, t_scene) -> RunResult:
    bcfg = cfg.backend_config()
    fe = FrontEnd(gt.camera, gt.models, cfg.frontend_config(),
                  prior_detector=source.prior_detector)
    summaries = []
    backend_results = []
    t_optimize = 0.0
    n_accepted = 0
    for frame_id in gt.frames():
        ext = gt.cam_poses[frame_id] if cfg.external_poses else None
        summary = fe.process_frame(source.frame_input(frame_id, ext))
        summaries.append(summary)
        if not summary.accepted:
            continue
        n_accepted += 1
        if n_accepted % bcfg.schedule_every == 0 and fe.scene.measurements:
            t0 = time.perf_counter()
            backend_results.append((frame_id, optimize_global(fe.scene, bcfg)))
            t_optimize += time.perf_counter() - t0
    if fe.scene.measurements:
        t0 = time.perf_counter()
        backend_results.append(
            (max(fe.scene.cam_poses), optimize_global(fe.scene, bcfg)))
        t_optimize += time.perf_counter() - t0
    t_track = time.perf_counter()

    samples = evaluate_scene_estimate(gt, fe.scene)
    rows = metric_rows(samples, gt.models)
    calibration = scene_calibration(fe.scene)
    spread = symmetry_spread(gt, fe.scene)
    t_eval = time.perf_counter()

    timing = {
        "generate_s": t_scene - t_start,
        "track_s": (t_track - t_scene) - t_optimize,
        "optimize_s": t_optimize,
        "evaluate_s": t_eval - t_track,
        "total_s": t_eval - t_start,
    }
    report = _build_report(cfg, gt, summaries, backend_results, rows,
                           calibration, spread, timing,
                           n_measurements=len(fe.scene.measurements),
                           n_objects_tracked=len(fe.scene.obj_poses))
    return RunResult(cfg, gt, fe.scene, summaries, backend_results, None,
                     samples, rows, calibration, spread, report,
                     getattr(source, "records", []))


def _run_single_view(cfg, gt, source, t_start, t_scene) -> RunResult:
    """Independent per-frame PnP with no cross-frame state."""
    fcfg = cfg.frontend_config()
    poses: dict = {}
    failures = 0
    for frame_id in gt.frames():
        frame = source.frame_input(frame_id)
        for object_id, dets in frame.detections.items():
            usable = [d for d in dets if d.mask_score >= fcfg.mask_threshold]
            if len(usable) < 4:
                failures += 1
                continue
            model = gt.models[object_id]
            pts = np.array([model.point_for(d.keypoint_id) for d in usable])
            px = np.array([d.coord for d in usable])
            covs = np.array([d.cov for d in usable])
            rng = detection_rng(cfg.seed, frame_id, object_id, RANSAC_STREAM)
            try:
                res = ransac_pnp(pts, px, covs, gt.camera, fcfg.ransac, rng=rng)
            except (NoConsensus, TooFewCorrespondences):
                failures += 1
                continue
            keep = res.inlier_ids
            refined = refine_single_view(res.pose, pts[keep], px[keep],
                                         covs[keep], gt.camera, fcfg.refine)
            poses[(frame_id, object_id)] = refined.pose
    t_track = time.perf_counter()

    samples = evaluate_single_view(gt, poses)
    rows = metric_rows(samples, gt.models)
    records = getattr(source, "records", [])
    calibration = _records_calibration(records)
    t_eval = time.perf_counter()

    timing = {
        "generate_s": t_scene - t_start,
        "track_s": t_track - t_scene,
        "optimize_s": 0.0,
        "evaluate_s": t_eval - t_track,
        "total_s": t_eval - t_start,
    }
    report = _build_report(cfg, gt, [], [], rows, calibration, [], timing,
                           n_measurements=sum(len(r["detections"])
                                              for r in records),
                           n_objects_tracked=0,
                           single_view_failures=failures)
    return RunResult(cfg, gt, None, [], [], poses, samples, rows,
                     calibration, [], report, records)


def _det_fields(d):
    """(coord, cov, true_coord, is_outlier) whether d is parsed or raw JSON."""
    if isinstance(d, dict):
        return d["coord"], d["cov"], d.get("true_coord"), d.get("is_outlier", False)
    return d.coord, d.cov, d.true_coord, d.is_outlier


def _records_calibration(records):
    errors, covs = [], []
    for rec in records:
        for d in rec["detections"]:
            coord, cov, true_coord, is_outlier = _det_fields(d)
            if true_coord is None or is_outlier:
                continue
            errors.append(np.asarray(coord, dtype=float)
                          - np.asarray(true_coord, dtype=float))
            covs.append(np.asarray(cov, dtype=float).reshape(2, 2))
    if not errors:
        return None
    return calibration_report(np.array(errors), np.array(covs))


def _build_report(cfg, gt, summaries, backend_results, rows, calibration,
                  spread, timing, n_measurements=0, n_objects_tracked=0,
                  single_view_failures=None) -> dict:
    sources: dict = {}
    dropped = []
    reinit_events = 0
    pnp_failures = 0
    for s in summaries:
        sources[s.camera_source] = sources.get(s.camera_source, 0) + 1
        if not s.accepted:
            dropped.append(s.frame_id)
        reinit_events += len(s.reinitialized)
        pnp_failures += len(s.pnp_failures)
    # the output directory is an I/O choice, not an experiment parameter;
    # leaving it out keeps reports byte-comparable across destinations
    config_view = cfg.to_dict()
    config_view.pop("out_dir", None)
    report = {
        "config": config_view,
        "scene_meta": dict(gt.meta),
        "counts": {
            "frames": len(gt.cam_poses),
            "accepted": sum(1 for s in summaries if s.accepted),
            "dropped": len(dropped),
            "objects": len(gt.models),
            "objects_tracked": n_objects_tracked,
            "measurements": n_measurements,
            "reinit_events": reinit_events,
            "pnp_failures": pnp_failures,
            "backend_solves": len(backend_results),
        },
        "camera_sources": sources,
        "dropped_frames": dropped,
        "metrics": rows,
        "mean_auc_add_of_s": _mean_auc_of(rows),
        "calibration": None if calibration is None else {
            "fraction_in_3sigma": [float(x) for x in calibration.fraction_in_3sigma],
            "fraction_pass_chi2_99": float(calibration.fraction_pass_chi2_99),
            "n_samples": int(calibration.n_samples),
        },
        "symmetry_spread": spread,
        "backend": [
            {
                "frame_id": frame_id,
                "converged": res.converged,
                "n_iters": res.n_iters,
                "initial_cost": res.initial_cost,
                "final_cost": res.final_cost,
                "n_inliers": res.n_inliers,
            }
            for frame_id, res in backend_results
        ],
        "timing": timing,
    }
    if single_view_failures is not None:
        report["counts"]["single_view_failures"] = single_view_failures
    return _jsonable(report)


# ---------------------------------------------------------------------------
# oracle baseline and persistence


def run_oracle_ba(result: RunResult):
    """Best-case baseline: same measurements, poses initialized at truth.

    Clones the run's scene, resets every pose to ground truth, re-gates
    inliers there, and runs the global solve.  What it loses to noise is
    the floor any estimator on these measurements must pay.
    """
    if result.scene is None:
        raise ValueError("oracle baseline needs a full-SLAM run result")
    scene = result.scene.clone()
    for f in scene.cam_poses:
        scene.cam_poses[f] = result.gt.cam_poses[f]
    for o in scene.obj_poses:
        scene.obj_poses[o] = result.gt.obj_poses[o]
    bcfg = result.config.backend_config()
    backend = optimize_global(scene, bcfg)
    samples = evaluate_scene_estimate(result.gt, scene)
    rows = metric_rows(samples, result.gt.models)
    return {
        "scene": scene,
        "backend": backend,
        "samples": samples,
        "rows": rows,
        "mean_auc_add_of_s": _mean_auc_of(rows),
    }


def trace_rows(backend_results) -> list:
    rows = []
    for solve_idx, (frame_id, res) in enumerate(backend_results):
        for entry in res.trace:
            rows.append({"solve": solve_idx, "frame_id": frame_id, **entry})
    return rows


def write_trace_csv(path, backend_results) -> None:
    cols = ["solve", "frame_id", "iteration", "cost", "lambda", "step_norm",
            "accepted"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in trace_rows(backend_results):
            writer.writerow(row)


def write_run_outputs(result: RunResult, out_dir) -> dict:
    """Persist report.json, CSV tables, scene, dump, and resolved config."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "report": os.path.join(out_dir, "report.json"),
        "metrics": os.path.join(out_dir, "metrics.csv"),
        "calibration": os.path.join(out_dir, "calibration.csv"),
        "trace": os.path.join(out_dir, "trace.csv"),
        "scene": os.path.join(out_dir, "scene.json"),
        "config": os.path.join(out_dir, "config.txt"),
    }
    with open(paths["report"], "w") as fh:
        fh.write(result.report_json)
    write_metrics_csv(paths["metrics"], result.rows)
    if result.calibration is not None:
        write_calibration_csv(paths["calibration"], result.calibration)
    else:
        with open(paths["calibration"], "w") as fh:
            fh.write("quantity,value\n")
    write_trace_csv(paths["trace"], result.backend_results)
    result.gt.save(paths["scene"])
    with open(paths["config"], "w") as fh:
        fh.write(dump_config_text(result.config.to_dict()))
    if result.records:
        paths["detections"] = os.path.join(out_dir, "detections.jsonl")
        write_detection_dump(paths["detections"],
                             _serializable_records(result.records))
    return paths


def _serializable_records(records) -> list:
    out = []
    for rec in records:
        dets = rec["detections"]
        if dets and not isinstance(dets[0], dict):
            rec = dict(rec, detections=[_det_to_json(d) for d in dets])
        box = rec.get("bbox")
        if isinstance(box, BoundingBox):
            rec = dict(rec, bbox=[box.x0, box.y0, box.w, box.h])
        out.append(rec)
    return out


def aggregate_reports(report_paths) -> list:
    """One summary row per run report, for ablation-grid comparisons."""
    rows = []
    for path in report_paths:
        with open(path) as fh:
            blob = json.load(fh)
        cfg = blob.get("config", {})
        calib = blob.get("calibration") or {}
        rows.append({
            "run": os.path.basename(os.path.dirname(os.path.abspath(path))),
            "seed": cfg.get("seed"),
            "trajectory": cfg.get("trajectory"),
            "covariance_mode": cfg.get("covariance_mode"),
            "prior_enabled": cfg.get("prior_enabled"),
            "single_view_only": cfg.get("single_view_only"),
            "mean_auc_add_of_s": blob.get("mean_auc_add_of_s"),
            "chi2_pass": calib.get("fraction_pass_chi2_99"),
            "frames": blob.get("counts", {}).get("frames"),
            "dropped": blob.get("counts", {}).get("dropped"),
        })
    return rows


def write_aggregate_csv(path_or_file, rows) -> None:
    cols = ["run", "seed", "trajectory", "covariance_mode", "prior_enabled",
            "single_view_only", "mean_auc_add_of_s", "chi2_pass", "frames",
            "dropped"]

    def emit(fh):
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)

    if hasattr(path_or_file, "write"):
        emit(path_or_file)
    else:
        with open(path_or_file, "w", newline="") as fh:
            emit(fh)
