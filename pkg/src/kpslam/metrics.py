"""Pose-accuracy metrics, uncertainty-calibration summaries, CSV tables.

ADD measures mean matched-point distance between two poses acting on the
same cloud; ADD-S replaces the match with a nearest-neighbour search so
shape-preserving symmetries score zero.  AUC integrates the empirical
accuracy-vs-threshold step curve from 0 to ``max_threshold`` metres and
scales it to [0, 100].
"""

import csv
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .backend import CHI2_2DOF_99
from .errors import EmptyCloud, EmptyList, LengthMismatch
from .geometry import CameraModel, RigidTransform

ADD_AUC_MAX_THRESHOLD = 0.10  # metres


@dataclass(frozen=True)
class PoseErrorSample:
    object_id: str
    add: float
    add_s: float

    def __post_init__(self):
        if self.add_s > self.add + 1e-12:
            raise ValueError(
                f"add_s {self.add_s} exceeds add {self.add}: nearest-neighbour "
                "distance cannot beat the matched distance")


@dataclass(frozen=True)
class CalibrationReport:
    fraction_in_3sigma: np.ndarray  # (2,) per residual axis
    fraction_pass_chi2_99: float
    n_samples: int


def _clouds(model_points, t_est: RigidTransform, t_gt: RigidTransform):
    pts = np.asarray(model_points, dtype=float).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise EmptyCloud("metric needs at least one model point")
    return t_est.apply(pts), t_gt.apply(pts)


def add_metric(model_points, t_est: RigidTransform, t_gt: RigidTransform) -> float:
    """Mean distance between matched points under the two poses."""
    est, gt = _clouds(model_points, t_est, t_gt)
    return float(np.linalg.norm(est - gt, axis=1).mean())


def add_s_metric(model_points, t_est: RigidTransform, t_gt: RigidTransform) -> float:
    """Mean distance from each ground-truth point to the nearest estimate."""
    est, gt = _clouds(model_points, t_est, t_gt)
    dist, _ = cKDTree(est).query(gt, k=1)
    return float(np.mean(dist))


def add_of_s(model, t_est: RigidTransform, t_gt: RigidTransform) -> float:
    """ADD for asymmetric objects, ADD-S for symmetric ones."""
    if model.is_symmetric:
        return add_s_metric(model.keypoints, t_est, t_gt)
    return add_metric(model.keypoints, t_est, t_gt)


def auc(errors, max_threshold: float = ADD_AUC_MAX_THRESHOLD) -> float:
    """Exact area under the accuracy-vs-threshold step curve, in [0, 100].

    Errors beyond ``max_threshold`` (including inf for missing estimates)
    count as failures at every threshold.
    """
    e = np.asarray(errors, dtype=float).reshape(-1)
    if e.size == 0:
        raise EmptyList("auc of an empty error list is undefined")
    clamped = np.minimum(np.nan_to_num(e, nan=np.inf), max_threshold)
    return float(100.0 * np.mean((max_threshold - clamped) / max_threshold))


def calibration_report(errors, covs) -> CalibrationReport:
    """Fraction of residuals inside per-axis 3-sigma and chi-square(2)@99%.

    A well-calibrated covariance puts ~99.7% of residuals inside the
    per-axis 3-sigma cone and ~99% under the chi-square threshold 9.210.
    """
    e = np.asarray(errors, dtype=float).reshape(-1, 2)
    c = np.asarray(covs, dtype=float).reshape(-1, 2, 2)
    if e.shape[0] != c.shape[0]:
        raise LengthMismatch(f"{e.shape[0]} errors vs {c.shape[0]} covariances")
    sigma = np.sqrt(np.stack([c[:, 0, 0], c[:, 1, 1]], axis=1))
    in_cone = (np.abs(e) < 3.0 * sigma).mean(axis=0)
    q = np.einsum("ni,nij,nj->n", e, np.linalg.inv(c), e)
    return CalibrationReport(
        fraction_in_3sigma=in_cone,
        fraction_pass_chi2_99=float((q < CHI2_2DOF_99).mean()),
        n_samples=int(e.shape[0]),
    )


def ray_spread(cam_poses, pixels, camera: CameraModel):
    """Best-fit 3D point for a bundle of pixel rays plus per-ray distances.

    Each (camera pose, pixel) pair defines a ray from the camera centre;
    the returned point minimizes the summed squared ray distances, and the
    distances expose how far the bundle is from intersecting in one point
    -- the measure of whether repeated sightings of one keypoint label
    describe one physical point.
    """
    if len(cam_poses) != len(pixels):
        raise LengthMismatch(f"{len(cam_poses)} poses vs {len(pixels)} pixels")
    if len(cam_poses) < 2:
        raise EmptyList("ray spread needs at least two sightings")
    origins, dirs = [], []
    for pose, uv in zip(cam_poses, pixels):
        bearing = np.array([(uv[0] - camera.cx) / camera.fx,
                            (uv[1] - camera.cy) / camera.fy, 1.0])
        bearing /= np.linalg.norm(bearing)
        origins.append(-pose.rotation.T @ pose.translation)
        dirs.append(pose.rotation.T @ bearing)
    origins = np.array(origins)
    dirs = np.array(dirs)
    proj = np.eye(3)[None] - np.einsum("ni,nj->nij", dirs, dirs)
    a = proj.sum(axis=0)
    b = np.einsum("nij,nj->i", proj, origins)
    point = np.linalg.lstsq(a, b, rcond=None)[0]
    resid = np.einsum("nij,nj->ni", proj, point[None] - origins)
    return point, np.linalg.norm(resid, axis=1)


def metric_rows(samples, models) -> list:
    """Per-object AUC table plus a trailing mean row.

    ``samples`` is an iterable of PoseErrorSample; ``models`` maps each
    object_id to its model so the symmetric-aware column can dispatch
    between the ADD and ADD-S error lists per object.
    """
    by_object = {}
    for s in samples:
        by_object.setdefault(s.object_id, []).append(s)
    rows = []
    for obj_id in sorted(by_object):
        group = by_object[obj_id]
        auc_add = auc([s.add for s in group])
        auc_add_s = auc([s.add_s for s in group])
        rows.append({
            "object": obj_id,
            "n": len(group),
            "symmetric": bool(models[obj_id].is_symmetric),
            "auc_add": auc_add,
            "auc_add_s": auc_add_s,
            "auc_add_of_s": auc_add_s if models[obj_id].is_symmetric else auc_add,
        })
    if rows:
        rows.append({
            "object": "MEAN",
            "n": sum(r["n"] for r in rows),
            "symmetric": "",
            "auc_add": float(np.mean([r["auc_add"] for r in rows])),
            "auc_add_s": float(np.mean([r["auc_add_s"] for r in rows])),
            "auc_add_of_s": float(np.mean([r["auc_add_of_s"] for r in rows])),
        })
    return rows


def write_metrics_csv(path, rows, extra_columns=()) -> None:
    cols = ["object", "n", "symmetric", "auc_add", "auc_add_s", "auc_add_of_s",
            *extra_columns]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def write_calibration_csv(path, report: CalibrationReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["quantity", "value"])
        writer.writerow(["fraction_in_3sigma_u", report.fraction_in_3sigma[0]])
        writer.writerow(["fraction_in_3sigma_v", report.fraction_in_3sigma[1]])
        writer.writerow(["fraction_pass_chi2_99", report.fraction_pass_chi2_99])
        writer.writerow(["n_samples", report.n_samples])
