"""Object models with discrete symmetries, and symmetry-aware pose priors.

A symmetric object is described by a finite set of rigid transforms S
under which its shape is (approximately) invariant; the set always
contains the identity.  Poses of such objects are only observable up to
right-multiplication by some S_m, so consumers either search over the
hypotheses ``pose @ S_m`` or condition a detector on a prior rendered
from one hypothesis.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import AllBehindCamera, ZeroAxis
from .geometry import (
    CameraModel,
    CropMapping,
    RigidTransform,
    project_points,
    rotation_about_axis,
)

SYMMETRY_TIE_TOL = 1e-12


@dataclass(frozen=True)
class ObjectModel:
    """Per-object 3D keypoints, global keypoint ids, and symmetry set.

    keypoints: (K, 3) object-frame positions, row k belongs to global
        keypoint id valid_indices[k].
    symmetries: rigid transforms leaving the shape invariant; the first
        entry is the identity.
    canonical_rotation: rotation defining the canonical viewing frame
        used when selecting the least-rotated symmetry hypothesis.
    """

    object_id: str
    keypoints: np.ndarray
    valid_indices: np.ndarray
    symmetries: tuple = (RigidTransform.identity(),)
    canonical_rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    is_symmetric: bool = False

    def __post_init__(self):
        kp = np.asarray(self.keypoints, dtype=float).reshape(-1, 3)
        ids = np.asarray(self.valid_indices, dtype=int).reshape(-1)
        if kp.shape[0] != ids.shape[0]:
            raise ValueError("keypoints and valid_indices disagree on K")
        if kp.shape[0] < 4:
            raise ValueError(f"need at least 4 keypoints, got {kp.shape[0]}")
        if len(np.unique(ids)) != len(ids):
            raise ValueError("valid_indices must be unique")
        syms = tuple(self.symmetries)
        if not syms:
            raise ValueError("symmetry set may not be empty")
        first = syms[0]
        if (
            np.abs(first.rotation - np.eye(3)).max() > 1e-9
            or np.abs(first.translation).max() > 1e-9
        ):
            raise ValueError("symmetry set must start with the identity")
        if self.is_symmetric != (len(syms) > 1):
            raise ValueError("is_symmetric must match len(symmetries) > 1")
        object.__setattr__(self, "keypoints", kp)
        object.__setattr__(self, "valid_indices", ids)
        object.__setattr__(self, "symmetries", syms)
        object.__setattr__(
            self, "canonical_rotation", np.asarray(self.canonical_rotation, dtype=float)
        )
        object.__setattr__(
            self, "_row_of", {int(g): k for k, g in enumerate(ids)}
        )

    @property
    def n_keypoints(self) -> int:
        return self.keypoints.shape[0]

    def point_for(self, keypoint_id: int) -> np.ndarray:
        """Object-frame 3D position of a global keypoint id."""
        return self.keypoints[self._row_of[int(keypoint_id)]]

    def rows_for(self, keypoint_ids) -> np.ndarray:
        return np.array([self._row_of[int(g)] for g in keypoint_ids], dtype=int)

    @property
    def diameter(self) -> float:
        """Largest pairwise keypoint distance; the model-scale yardstick."""
        d = self.keypoints[:, None, :] - self.keypoints[None, :, :]
        return float(np.sqrt((d * d).sum(-1)).max())

    def to_json(self) -> dict:
        return {
            "object_id": self.object_id,
            "keypoints": [[float(x) for x in p] for p in self.keypoints],
            "valid_indices": [int(i) for i in self.valid_indices],
            "symmetries": [
                {
                    "rotation": [float(x) for x in s.rotation.reshape(9)],
                    "translation": [float(x) for x in s.translation],
                }
                for s in self.symmetries
            ],
            "canonical_rotation": [float(x) for x in self.canonical_rotation.reshape(9)],
            "is_symmetric": self.is_symmetric,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ObjectModel":
        sym_field = obj.get("symmetries", [{"rotation": list(np.eye(3).reshape(9)),
                                            "translation": [0.0, 0.0, 0.0]}])
        if isinstance(sym_field, dict):
            syms = discretize_axis_symmetry(sym_field["axis"], int(sym_field["discretize"]))
        else:
            syms = tuple(
                RigidTransform(
                    np.asarray(s["rotation"], dtype=float).reshape(3, 3),
                    np.asarray(s["translation"], dtype=float),
                )
                for s in sym_field
            )
        return cls(
            object_id=obj["object_id"],
            keypoints=np.asarray(obj["keypoints"], dtype=float),
            valid_indices=np.asarray(obj["valid_indices"], dtype=int),
            symmetries=syms,
            canonical_rotation=np.asarray(
                obj.get("canonical_rotation", list(np.eye(3).reshape(9))), dtype=float
            ).reshape(3, 3),
            is_symmetric=bool(obj.get("is_symmetric", len(sym_field) > 1)),
        )


def save_object_models(path, models) -> None:
    blob = [m.to_json() for m in models]
    with open(path, "w") as f:
        json.dump(blob, f, sort_keys=True, indent=1)


def load_object_models(path) -> list:
    with open(path) as f:
        return [ObjectModel.from_json(o) for o in json.load(f)]


def discretize_axis_symmetry(axis, count: int):
    """``count`` rotations about an axis at angles 2 pi m / count.

    The first element (m = 0) is the exact identity.  Used to approximate
    a continuous rotational symmetry with a finite set.
    """
    axis = np.asarray(axis, dtype=float)
    if np.linalg.norm(axis) < 1e-9:
        raise ZeroAxis(f"axis {axis.tolist()} has near-zero norm")
    if count < 1:
        raise ValueError("count must be >= 1")
    out = [RigidTransform.identity()]
    for m in range(1, count):
        r = rotation_about_axis(axis, 2.0 * np.pi * m / count)
        out.append(RigidTransform(r, np.zeros(3)))
    return tuple(out)


def apply_symmetry(pose: RigidTransform, sym: RigidTransform) -> RigidTransform:
    """Effective pose under a symmetry hypothesis: pose is applied last."""
    return pose.compose(sym)


def symmetry_costs(model: ObjectModel, rot_cam_from_obj) -> np.ndarray:
    """Mean keypoint displacement between each hypothesis and the canonical view.

    For hypothesis m the camera-frame cloud is R_co (R_m p + t_m); it is
    compared, after removing each cloud's centroid, with the canonical
    cloud R_canonical p.
    """
    r_co = np.asarray(rot_cam_from_obj, dtype=float)
    p = model.keypoints
    canon = p @ model.canonical_rotation.T
    canon = canon - canon.mean(axis=0)
    costs = np.empty(len(model.symmetries))
    for m, s in enumerate(model.symmetries):
        cloud = (p @ s.rotation.T + s.translation) @ r_co.T
        cloud = cloud - cloud.mean(axis=0)
        costs[m] = np.linalg.norm(cloud - canon, axis=1).mean()
    return costs


def canonical_symmetry(model: ObjectModel, rot_cam_from_obj) -> int:
    """Index of the symmetry bringing the view closest to canonical.

    Ties within 1e-12 resolve to the lowest index.
    """
    costs = symmetry_costs(model, rot_cam_from_obj)
    return int(np.nonzero(costs <= costs.min() + SYMMETRY_TIE_TOL)[0][0])


# ---------------------------------------------------------------------------
# Pose priors


@dataclass(frozen=True)
class PriorDetection:
    """Expected keypoint pixels under a pose hypothesis.

    coords: (K, 2) full-image pixels, NaN where not present.
    present: (K,) bool, True for positive-depth keypoints.
    pose_used: the camera-from-object transform that was projected.
    """

    coords: np.ndarray
    present: np.ndarray
    pose_used: RigidTransform


def build_prior(
    model: ObjectModel,
    cam_from_global: RigidTransform,
    global_from_object: RigidTransform,
    cam: CameraModel,
) -> PriorDetection:
    """Project the model through estimated poses into expected pixels.

    Raises:
        AllBehindCamera: when no keypoint has positive depth.
    """
    pose = cam_from_global.compose(global_from_object)
    uv, valid = project_points(cam, pose.apply(model.keypoints))
    if not valid.any():
        raise AllBehindCamera(model.object_id)
    return PriorDetection(uv, valid, pose)


def render_prior_heatmaps(
    prior, n_channels: int, shape, sigma: float = 2.0, mapping: CropMapping | None = None
) -> np.ndarray:
    """Unit-peak Gaussian heatmaps at the prior coordinates.

    ``shape`` is (h, w) in grid cells; with a mapping the prior's pixel
    coordinates are first converted to grid coordinates.  Channels with
    no prior (absent keypoint, or prior None) are all zero.
    """
    h, w = shape
    out = np.zeros((n_channels, h, w))
    if prior is None:
        return out
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    for k in range(min(n_channels, prior.coords.shape[0])):
        if not prior.present[k]:
            continue
        c = prior.coords[k]
        if mapping is not None:
            c = mapping.pixel_to_grid(c)
        d2 = (xs - c[0]) ** 2 + (ys - c[1]) ** 2
        out[k] = np.exp(-d2 / (2.0 * sigma * sigma))
    return out
