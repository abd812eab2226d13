"""Mutable SLAM state: per-frame camera poses, object poses, measurements.

The camera pose of frame f maps global coordinates into that camera's
frame; an object pose maps object coordinates into the global frame.
The first stored frame is the gauge: its camera pose pins the global
frame and is never re-estimated.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DuplicateMeasurement, UnknownFrame, UnknownObject
from .geometry import CameraModel, pose_from_json, pose_to_json


@dataclass
class Measurement:
    """One keypoint observation in full-image pixels.

    ``inlier`` is the robust-classification flag maintained by the back
    end; ``stream`` records which detector pass produced it (1 =
    prior-free, 2 = prior-conditioned).  ``true_coord``/``is_outlier``
    are simulator debug fields carried along for diagnostics.
    """

    frame_id: int
    object_id: str
    keypoint_id: int
    coord: np.ndarray
    cov: np.ndarray
    inlier: bool = True
    stream: int = 1
    true_coord: np.ndarray | None = None
    is_outlier: bool = False

    def __post_init__(self):
        self.coord = np.asarray(self.coord, dtype=float).reshape(2)
        self.cov = np.asarray(self.cov, dtype=float).reshape(2, 2)

    @property
    def key(self):
        return (self.frame_id, self.object_id, self.keypoint_id)


class SceneState:
    """Estimated poses plus the measurement ledger for one sequence."""

    def __init__(self, camera: CameraModel, models: dict):
        self.camera = camera
        self.models = dict(models)
        self.cam_poses: dict = {}
        self.obj_poses: dict = {}
        self.measurements: list = []
        self._keys: set = set()

    @property
    def gauge_frame(self):
        return min(self.cam_poses) if self.cam_poses else None

    def frames(self) -> list:
        return sorted(self.cam_poses)

    def add_measurement(self, m: Measurement) -> None:
        """Store one measurement; poses it references must already exist.

        Raises:
            DuplicateMeasurement: the (frame, object, keypoint) triple
                was already stored.
            UnknownFrame / UnknownObject: dangling reference.
        """
        if m.frame_id not in self.cam_poses:
            raise UnknownFrame(str(m.frame_id))
        if m.object_id not in self.obj_poses:
            raise UnknownObject(m.object_id)
        if m.key in self._keys:
            raise DuplicateMeasurement(str(m.key))
        model = self.models[m.object_id]
        if int(m.keypoint_id) not in model._row_of:
            raise ValueError(
                f"keypoint {m.keypoint_id} is not part of object {m.object_id}"
            )
        self._keys.add(m.key)
        self.measurements.append(m)

    def measurements_of(self, object_id=None, frame_id=None, stream=None) -> list:
        out = self.measurements
        if object_id is not None:
            out = [m for m in out if m.object_id == object_id]
        if frame_id is not None:
            out = [m for m in out if m.frame_id == frame_id]
        if stream is not None:
            out = [m for m in out if m.stream == stream]
        return out

    def clone(self) -> "SceneState":
        """Independent copy: pose dicts and measurement flags detach."""
        out = SceneState(self.camera, self.models)
        out.cam_poses = dict(self.cam_poses)
        out.obj_poses = dict(self.obj_poses)
        out.measurements = [replace(m) for m in self.measurements]
        out._keys = set(self._keys)
        return out

    def to_json(self, include_measurements: bool = True) -> dict:
        blob = {
            "cam_poses": {str(f): pose_to_json(p) for f, p in self.cam_poses.items()},
            "obj_poses": {o: pose_to_json(p) for o, p in self.obj_poses.items()},
        }
        if include_measurements:
            blob["measurements"] = [
                {
                    "frame_id": m.frame_id,
                    "object_id": m.object_id,
                    "keypoint_id": m.keypoint_id,
                    "coord": [float(x) for x in m.coord],
                    "cov": [float(x) for x in m.cov.reshape(4)],
                    "inlier": bool(m.inlier),
                    "stream": int(m.stream),
                }
                for m in self.measurements
            ]
        return blob

    @classmethod
    def from_json(cls, blob: dict, camera: CameraModel, models: dict) -> "SceneState":
        out = cls(camera, models)
        out.cam_poses = {int(f): pose_from_json(p) for f, p in blob["cam_poses"].items()}
        out.obj_poses = {o: pose_from_json(p) for o, p in blob["obj_poses"].items()}
        for m in blob.get("measurements", []):
            out.add_measurement(
                Measurement(
                    frame_id=int(m["frame_id"]),
                    object_id=m["object_id"],
                    keypoint_id=int(m["keypoint_id"]),
                    coord=np.asarray(m["coord"], dtype=float),
                    cov=np.asarray(m["cov"], dtype=float).reshape(2, 2),
                    inlier=bool(m.get("inlier", True)),
                    stream=int(m.get("stream", 1)),
                )
            )
        return out
