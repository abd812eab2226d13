"""Synthetic keypoint detector standing in for a trained detection head.

Detections are sampled around the exact projections of ground-truth
poses.  For symmetric objects the detector behaves like its learned
counterpart: without a prior it reports the symmetry hypothesis nearest
to a canonical view, and with a prior it follows whichever hypothesis
best explains the prior's expected pixels.  Reported covariances are the
true sampling covariances (mode "calibrated"), a fixed isotropic guess
("manual"), or the identity ("identity"); the underlying random draws
are identical across modes so ablations stay paired sample-by-sample.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import NotVisible
from .geometry import (
    BoundingBox,
    CameraModel,
    RigidTransform,
    exp_map,
    project_points,
)
from .symmetry import ObjectModel, PriorDetection, build_prior, canonical_symmetry

BBOX_DILATION = 0.1
BBOX_MIN_SIZE = 8.0
DEFAULT_MANUAL_SIGMA = 2.5
COV_MODES = ("calibrated", "manual", "identity")


@dataclass(frozen=True)
class NoiseConfig:
    """Detector noise model.

    pixel_sigma_range: per-axis standard deviations are drawn uniformly
        from this range (pixels).
    aniso_ratio_max: covariance axis ratio is clamped to this factor.
    outlier_rate: probability a keypoint is replaced by an outlier.
    outlier_spread: outlier offsets are uniform in direction with
        magnitude U(0, spread) pixels.
    mask_flip_rate: probability the visibility bit is reported wrong.
    bbox_jitter: detection-box corners move by U(-j, +j) pixels.
    prior_rot_sigma_deg / prior_trans_sigma: pose perturbation used when
        fabricating training-style priors.
    """

    pixel_sigma_range: tuple = (1.0, 3.0)
    aniso_ratio_max: float = 2.0
    outlier_rate: float = 0.05
    outlier_spread: float = 40.0
    mask_flip_rate: float = 0.02
    bbox_jitter: float = 2.0
    prior_rot_sigma_deg: float = 10.0
    prior_trans_sigma: float = 0.03

    def __post_init__(self):
        lo, hi = self.pixel_sigma_range
        if not (0.0 < lo <= hi):
            raise ValueError(f"bad pixel_sigma_range {self.pixel_sigma_range}")
        if self.aniso_ratio_max < 1.0:
            raise ValueError("aniso_ratio_max must be >= 1")
        for name in ("outlier_rate", "mask_flip_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


@dataclass(frozen=True)
class KeypointDetection:
    """One detected keypoint in full-image pixels."""

    keypoint_id: int
    coord: np.ndarray  # (2,)
    cov: np.ndarray  # (2, 2) reported covariance
    mask_score: float
    true_coord: np.ndarray | None = None  # debug: exact projection
    is_outlier: bool = False  # debug: injected outlier flag


def detection_rng(seed: int, frame_id: int, object_id: str, stream: int) -> np.random.Generator:
    """Deterministic per-(frame, object, stream) generator.

    Stream 0 is reserved for detection boxes, 1 for prior-free detection,
    2 for prior-conditioned detection.
    """
    key = zlib.crc32(object_id.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence((seed, frame_id, key, stream)))


def simulate_bbox(
    model: ObjectModel,
    gt_cam_pose: RigidTransform,
    gt_obj_pose: RigidTransform,
    cam: CameraModel,
    noise: NoiseConfig,
    rng: np.random.Generator,
) -> BoundingBox:
    """Jittered detection box around the true keypoint projections.

    Raises:
        NotVisible: no keypoint has positive depth.
    """
    pose = gt_cam_pose.compose(gt_obj_pose)
    uv, valid = project_points(cam, pose.apply(model.keypoints))
    if not valid.any():
        raise NotVisible(model.object_id)
    box = BoundingBox.from_points(uv[valid], dilate=BBOX_DILATION, min_size=BBOX_MIN_SIZE)
    j = noise.bbox_jitter
    lo = np.array([box.x0, box.y0]) + rng.uniform(-j, j, size=2)
    hi = np.array([box.x0 + box.w, box.y0 + box.h]) + rng.uniform(-j, j, size=2)
    center = (lo + hi) / 2.0
    size = np.maximum(hi - lo, BBOX_MIN_SIZE)
    lo = center - size / 2.0
    return BoundingBox(lo[0], lo[1], size[0], size[1])


def _select_hypothesis(model, pose_gt, cam, prior):
    """Symmetry index the detector commits to for this sighting."""
    if prior is None or not model.is_symmetric:
        if not model.is_symmetric:
            return 0
        return canonical_symmetry(model, pose_gt.rotation)
    best, best_cost = None, np.inf
    for m, s in enumerate(model.symmetries):
        uv, valid = project_points(cam, pose_gt.compose(s).apply(model.keypoints))
        shared = valid & prior.present
        if not shared.any():
            continue
        cost = float(np.linalg.norm(uv[shared] - prior.coords[shared], axis=1).mean())
        if cost < best_cost - 1e-12:
            best, best_cost = m, cost
    if best is None:
        return canonical_symmetry(model, pose_gt.rotation)
    return best


def simulate_detection(
    model: ObjectModel,
    gt_cam_pose: RigidTransform,
    gt_obj_pose: RigidTransform,
    cam: CameraModel,
    noise: NoiseConfig,
    *,
    prior: PriorDetection | None = None,
    bbox: BoundingBox | None = None,
    rng: np.random.Generator | None = None,
    cov_mode: str = "calibrated",
    manual_sigma: float = DEFAULT_MANUAL_SIGMA,
) -> list:
    """Sample keypoint detections for one object sighting.

    Every keypoint consumes the same random draws in a fixed order no
    matter which are visible and which covariance mode is reported, so
    paired runs differing only in configuration see identical noise.

    Returns a list of KeypointDetection for positive-depth keypoints
    (mask may still be 0); raises NotVisible if there are none.
    """
    if cov_mode not in COV_MODES:
        raise ValueError(f"cov_mode must be one of {COV_MODES}")
    rng = rng if rng is not None else np.random.default_rng(0)
    pose_gt = gt_cam_pose.compose(gt_obj_pose)
    hyp = _select_hypothesis(model, pose_gt, cam, prior)
    eff = pose_gt.compose(model.symmetries[hyp])
    uv, valid = project_points(cam, eff.apply(model.keypoints))
    if not valid.any():
        raise NotVisible(model.object_id)

    lo, hi = noise.pixel_sigma_range
    out = []
    for k in range(model.n_keypoints):
        # Fixed draw schedule: 3 covariance, 2 noise, 1 outlier gate,
        # 2 outlier offset, 1 mask flip.
        phi = rng.uniform(0.0, np.pi)
        s1 = rng.uniform(lo, hi)
        s2 = float(np.clip(rng.uniform(lo, hi), s1 / noise.aniso_ratio_max,
                           s1 * noise.aniso_ratio_max))
        n01 = rng.standard_normal(2)
        outlier_gate = rng.uniform()
        out_dir = rng.uniform(0.0, 2.0 * np.pi)
        out_mag = rng.uniform(0.0, noise.outlier_spread)
        flip_gate = rng.uniform()
        if not valid[k]:
            continue
        c, s = np.cos(phi), np.sin(phi)
        rot = np.array([[c, -s], [s, c]])
        cov_true = rot @ np.diag([s1 * s1, s2 * s2]) @ rot.T
        is_outlier = outlier_gate < noise.outlier_rate
        if is_outlier:
            coord = uv[k] + out_mag * np.array([np.cos(out_dir), np.sin(out_dir)])
        else:
            chol = np.linalg.cholesky(cov_true)
            coord = uv[k] + chol @ n01
        inside = bbox.contains(coord) if bbox is not None else cam.contains(coord)
        mask = float(inside)
        if flip_gate < noise.mask_flip_rate:
            mask = 1.0 - mask
        if cov_mode == "calibrated":
            cov_rep = cov_true
        elif cov_mode == "manual":
            cov_rep = manual_sigma * manual_sigma * np.eye(2)
        else:
            cov_rep = np.eye(2)
        out.append(
            KeypointDetection(
                keypoint_id=int(model.valid_indices[k]),
                coord=coord,
                cov=cov_rep,
                mask_score=mask,
                true_coord=uv[k].copy(),
                is_outlier=bool(is_outlier),
            )
        )
    return out


def make_training_prior(
    model: ObjectModel,
    gt_cam_pose: RigidTransform,
    gt_obj_pose: RigidTransform,
    cam: CameraModel,
    noise: NoiseConfig,
    rng: np.random.Generator,
    apply_random_symmetry: bool = True,
):
    """Training-style prior: perturbed true pose, random symmetry applied.

    Returns (prior, symmetry_index).
    """
    omega = np.deg2rad(noise.prior_rot_sigma_deg) * rng.standard_normal(3)
    rho = noise.prior_trans_sigma * rng.standard_normal(3)
    sym_idx = int(rng.integers(len(model.symmetries)))
    if not apply_random_symmetry:
        sym_idx = 0
    delta = exp_map(np.concatenate([omega, rho]))
    pose = delta.compose(gt_cam_pose.compose(gt_obj_pose)).compose(model.symmetries[sym_idx])
    prior = build_prior(model, pose, RigidTransform.identity(), cam)
    return prior, sym_idx


# ---------------------------------------------------------------------------
# Detection dumps (JSON lines, one record per object sighting)


def _det_to_json(d: KeypointDetection) -> dict:
    return {
        "keypoint_id": int(d.keypoint_id),
        "coord": [float(x) for x in d.coord],
        "cov": [float(x) for x in np.asarray(d.cov).reshape(4)],
        "mask_score": float(d.mask_score),
        "true_coord": None if d.true_coord is None else [float(x) for x in d.true_coord],
        "is_outlier": bool(d.is_outlier),
    }


def _det_from_json(obj: dict) -> KeypointDetection:
    return KeypointDetection(
        keypoint_id=int(obj["keypoint_id"]),
        coord=np.asarray(obj["coord"], dtype=float),
        cov=np.asarray(obj["cov"], dtype=float).reshape(2, 2),
        mask_score=float(obj["mask_score"]),
        true_coord=None if obj.get("true_coord") is None
        else np.asarray(obj["true_coord"], dtype=float),
        is_outlier=bool(obj.get("is_outlier", False)),
    )


def dump_record(frame_id, object_id, stream, bbox, prior_used, detections) -> dict:
    return {
        "frame_id": int(frame_id),
        "object_id": str(object_id),
        "stream": int(stream),
        "bbox": None if bbox is None else [bbox.x0, bbox.y0, bbox.w, bbox.h],
        "prior_used": bool(prior_used),
        "detections": [_det_to_json(d) for d in detections],
    }


def write_detection_dump(path, records) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_detection_dump(path) -> list:
    """Parse a JSONL dump; detections become KeypointDetection objects."""
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            rec["detections"] = [_det_from_json(d) for d in rec["detections"]]
            rec["bbox"] = None if rec["bbox"] is None else BoundingBox(*rec["bbox"])
            out.append(rec)
    return out
