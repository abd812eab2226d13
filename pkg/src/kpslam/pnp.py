"""Minimal-set pose solving (P3P) and covariance-aware RANSAC PnP.

The three-point solver follows the classical law-of-cosines reduction:
eliminating one depth ratio yields a quartic whose real positive roots
give candidate depth triples, each polished by a few Newton steps and
turned into a pose by absolute orientation.  RANSAC samples three points
plus a fourth for disambiguation, gates inliers with a chi-square test
on the squared Mahalanobis reprojection error, and optionally polishes
the winning pose on its consensus set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backend import CHI2_2DOF_95, RefineConfig, _chol_inv_2x2, refine_pose
from .errors import DegenerateConfiguration, NoConsensus, TooFewCorrespondences
from .geometry import MIN_DEPTH, CameraModel, RigidTransform

MIN_TRIANGLE_AREA = 1e-9  # m^2
MIN_BEARING_CROSS = 1e-9
P3P_REPROJ_TOL = 1e-6  # px


@dataclass(frozen=True)
class RansacConfig:
    max_iters: int = 200
    confidence: float = 0.99
    tau: float = CHI2_2DOF_95
    min_inliers: int = 4
    polish: bool = True


@dataclass(frozen=True)
class PnPResult:
    pose: RigidTransform  # camera_from_object
    inlier_ids: np.ndarray  # indices into the correspondence arrays

    @property
    def n_inliers(self) -> int:
        return int(self.inlier_ids.size)


def _bearings(cam: CameraModel, pixels) -> np.ndarray:
    px = np.asarray(pixels, dtype=float).reshape(-1, 2)
    f = np.stack(
        [(px[:, 0] - cam.cx) / cam.fx, (px[:, 1] - cam.cy) / cam.fy, np.ones(len(px))],
        axis=1,
    )
    return f / np.linalg.norm(f, axis=1, keepdims=True)


def _absolute_orientation(src, dst) -> RigidTransform:
    """Least-squares rigid transform with dst ~= R @ src + t (Kabsch)."""
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    h = (src - cs).T @ (dst - cd)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(r, cd - r @ cs)


def _polish_depths(s, cosines, sq_dists, iters: int = 10):
    """Newton iterations on the three law-of-cosines constraints."""
    cos_al, cos_be, cos_ga = cosines
    a2, b2, c2 = sq_dists
    s = np.asarray(s, dtype=float).copy()
    scale = max(a2, b2, c2)
    for _ in range(iters):
        s1, s2, s3 = s
        f = np.array(
            [
                s2 * s2 + s3 * s3 - 2.0 * s2 * s3 * cos_al - a2,
                s1 * s1 + s3 * s3 - 2.0 * s1 * s3 * cos_be - b2,
                s1 * s1 + s2 * s2 - 2.0 * s1 * s2 * cos_ga - c2,
            ]
        )
        if np.abs(f).max() < 1e-14 * scale:
            break
        jac = np.array(
            [
                [0.0, 2.0 * s2 - 2.0 * s3 * cos_al, 2.0 * s3 - 2.0 * s2 * cos_al],
                [2.0 * s1 - 2.0 * s3 * cos_be, 0.0, 2.0 * s3 - 2.0 * s1 * cos_be],
                [2.0 * s1 - 2.0 * s2 * cos_ga, 2.0 * s2 - 2.0 * s1 * cos_ga, 0.0],
            ]
        )
        try:
            step = np.linalg.solve(jac, f)
        except np.linalg.LinAlgError:
            break
        s = s - step
    return s


def solve_p3p(points, pixels, cam: CameraModel) -> list:
    """All camera-from-object poses fitting three 2D-3D correspondences.

    Each returned pose reprojects the three points to within 1e-6 px and
    places them at positive depth.  Zero, one, ..., up to four poses may
    come back.

    Raises:
        DegenerateConfiguration: collinear points (triangle area below
            1e-9 m^2) or coincident bearing directions.
    """
    p = np.asarray(points, dtype=float).reshape(3, 3)
    px = np.asarray(pixels, dtype=float).reshape(3, 2)
    area = 0.5 * np.linalg.norm(np.cross(p[1] - p[0], p[2] - p[0]))
    if area < MIN_TRIANGLE_AREA:
        raise DegenerateConfiguration(f"triangle area {area:.3g} m^2")
    f = _bearings(cam, px)
    for i in range(3):
        for j in range(i + 1, 3):
            if np.linalg.norm(np.cross(f[i], f[j])) < MIN_BEARING_CROSS:
                raise DegenerateConfiguration("coincident bearing directions")

    a2 = float(((p[1] - p[2]) ** 2).sum())
    b2 = float(((p[0] - p[2]) ** 2).sum())
    c2 = float(((p[0] - p[1]) ** 2).sum())
    cos_al = float(f[1] @ f[2])
    cos_be = float(f[0] @ f[2])
    cos_ga = float(f[0] @ f[1])
    big_a = a2 / b2
    big_b = c2 / b2

    # Quadratics in u with coefficients polynomial in v (descending):
    #   (i)  u^2 + c1(v) u + c0(v) = 0
    #   (ii) u^2 + d1    u + d0(v) = 0
    c0 = np.array([1.0 - big_a, 2.0 * big_a * cos_be, -big_a])
    d0 = np.array([-big_b, 2.0 * big_b * cos_be, 1.0 - big_b])
    n_poly = d0 - c0  # d0 - c0, degree 2
    dq = np.array([-2.0 * cos_al, 2.0 * cos_ga])  # c1 - d1, degree 1
    d1 = -2.0 * cos_ga
    # Substituting u = (d0 - c0)/(c1 - d1) into (ii):
    quartic = np.polyadd(
        np.polyadd(np.convolve(n_poly, n_poly), d1 * np.convolve(n_poly, dq)),
        np.convolve(d0, np.convolve(dq, dq)),
    )
    lead = np.abs(quartic).max()
    if lead < 1e-300:
        return []
    roots = np.roots(quartic / lead)

    poses = []
    for v in roots:
        if abs(v.imag) > 1e-6 * (1.0 + abs(v.real)) or v.real <= 0.0:
            continue
        v = float(v.real)
        den = np.polyval(dq, v)
        u_cands = []
        if abs(den) > 1e-9:
            u_cands.append(float(np.polyval(n_poly, v)) / den)
        else:
            disc = cos_ga * cos_ga - float(np.polyval(d0, v))
            if disc >= 0.0:
                u_cands.extend([cos_ga + np.sqrt(disc), cos_ga - np.sqrt(disc)])
        base = 1.0 + v * v - 2.0 * v * cos_be
        if base <= 0.0:
            continue
        s1 = np.sqrt(b2 / base)
        for u in u_cands:
            if u <= 0.0:
                continue
            s = _polish_depths(
                [s1, u * s1, v * s1], (cos_al, cos_be, cos_ga), (a2, b2, c2)
            )
            if np.any(s <= 0.0) or not np.all(np.isfinite(s)):
                continue
            pose = _absolute_orientation(p, s[:, None] * f)
            q = pose.apply(p)
            if np.any(q[:, 2] <= MIN_DEPTH):
                continue
            uv = np.stack(
                [cam.fx * q[:, 0] / q[:, 2] + cam.cx, cam.fy * q[:, 1] / q[:, 2] + cam.cy],
                axis=1,
            )
            if np.linalg.norm(uv - px, axis=1).max() > P3P_REPROJ_TOL:
                continue
            if any(
                np.abs(prev.rotation - pose.rotation).max() < 1e-6
                and np.abs(prev.translation - pose.translation).max() < 1e-6
                for prev in poses
            ):
                continue
            poses.append(pose)
    return poses


def mahalanobis_gate(pose, points, pixels, covs, cam, tau: float = CHI2_2DOF_95):
    """Chi-square inlier test of correspondences against a pose.

    Returns (mask, q): q is the squared Mahalanobis reprojection error,
    infinite for non-positive depth; mask is q < tau.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    px = np.asarray(pixels, dtype=float).reshape(-1, 2)
    linv = _chol_inv_2x2(np.asarray(covs, dtype=float).reshape(-1, 2, 2))
    q3 = pts @ pose.rotation.T + pose.translation
    z = q3[:, 2]
    pos = z > MIN_DEPTH
    zs = np.where(pos, z, 1.0)
    uv = np.stack([cam.fx * q3[:, 0] / zs + cam.cx, cam.fy * q3[:, 1] / zs + cam.cy], axis=1)
    r = px - uv
    white = np.einsum("nij,nj->ni", linv, r)
    q = np.einsum("ni,ni->n", white, white)
    q = np.where(pos, q, np.inf)
    return q < tau, q


def ransac_pnp(points, pixels, covs, cam, cfg: RansacConfig | None = None, rng=None):
    """Robust camera-from-object pose from noisy correspondences.

    Samples 3 points for P3P plus a 4th to pick among its solutions,
    scores candidates by chi-square inlier count, and stops early once
    the best consensus makes further improvement unlikely at the
    configured confidence.  A fixed seed makes the estimate
    deterministic.

    Raises:
        TooFewCorrespondences: fewer than 4 correspondences.
        NoConsensus: no model reached the minimum consensus size.
    """
    cfg = cfg or RansacConfig()
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    px = np.asarray(pixels, dtype=float).reshape(-1, 2)
    cv = np.asarray(covs, dtype=float).reshape(-1, 2, 2)
    k = pts.shape[0]
    if k < 4:
        raise TooFewCorrespondences(f"{k} < 4")
    rng = np.random.default_rng(rng)

    best_pose = None
    best_mask = None
    best_count = 0
    needed = cfg.max_iters
    it = 0
    while it < min(cfg.max_iters, needed):
        it += 1
        sel = rng.choice(k, size=4, replace=False)
        try:
            candidates = solve_p3p(pts[sel[:3]], px[sel[:3]], cam)
        except DegenerateConfiguration:
            continue
        if not candidates:
            continue
        errs = []
        for pose in candidates:
            q = pose.apply(pts[sel[3]])
            if q[2] <= MIN_DEPTH:
                errs.append(np.inf)
                continue
            uv = np.array([cam.fx * q[0] / q[2] + cam.cx, cam.fy * q[1] / q[2] + cam.cy])
            errs.append(float(np.linalg.norm(uv - px[sel[3]])))
        if not np.isfinite(min(errs)):
            continue
        pose = candidates[int(np.argmin(errs))]
        mask, _ = mahalanobis_gate(pose, pts, px, cv, cam, cfg.tau)
        count = int(mask.sum())
        if count > best_count:
            best_pose, best_mask, best_count = pose, mask, count
            w = count / k
            if w >= 1.0:
                needed = it
            else:
                needed = int(
                    np.ceil(np.log(1.0 - cfg.confidence) / np.log(1.0 - w ** 4))
                )
    if best_count < cfg.min_inliers:
        raise NoConsensus(f"best consensus {best_count} < {cfg.min_inliers}")

    if cfg.polish:
        res = refine_pose(
            best_pose, pts[best_mask], px[best_mask], cv[best_mask], cam,
            RefineConfig(huber_delta=np.inf, rel_tol=1e-12),
        )
        mask2, _ = mahalanobis_gate(res.pose, pts, px, cv, cam, cfg.tau)
        if int(mask2.sum()) >= best_count:
            best_pose, best_mask = res.pose, mask2
    return PnPResult(best_pose, np.nonzero(best_mask)[0])


def refine_single_view(pose, points, pixels, covs, cam, cfg: RefineConfig | None = None):
    """Huber-robust LM refinement of one object pose in one view.

    Every passed correspondence participates (use RANSAC's consensus
    set); the kernel still tempers stragglers.  Returns a RefineResult
    whose ``converged`` flag reports whether the tolerance was met
    within the iteration budget.
    """
    return refine_pose(pose, points, pixels, covs, cam, cfg or RefineConfig())
