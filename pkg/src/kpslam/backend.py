"""Robust global refinement of camera and object poses.

The cost is a Huber-robustified sum of squared Mahalanobis reprojection
errors over all measurements currently flagged as inliers:

    C = sum_i s_i * rho(r_i^T Sigma_i^-1 r_i),   r_i = z_i - pi(T_cam T_obj p_i)

with rho(q) = q for q <= delta and 2 sqrt(delta q) - delta beyond.  The
inlier flags s_i are recomputed (chi-square gate at tau) when a solve
starts and stay frozen during its iterations.  Minimization runs
Levenberg-Marquardt on the product of SE(3) manifolds with analytic
Jacobians; the first frame's camera is the gauge and is excluded from
the variables.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve

from .errors import NotConverged, SingularCovariance
from .geometry import MIN_DEPTH, RigidTransform, exp_map
from .scene import SceneState

CHI2_2DOF_95 = 5.991
CHI2_2DOF_99 = 9.210


@dataclass(frozen=True)
class BackendConfig:
    tau: float = CHI2_2DOF_95  # chi-square(2) inlier gate
    huber_delta: float = CHI2_2DOF_95  # kernel switch point (same scale)
    max_iters: int = 50
    rel_tol: float = 1e-8  # relative cost improvement at convergence
    lambda_init: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 0.5
    lambda_max: float = 1e12
    schedule_every: int = 10  # frames between global solves


@dataclass(frozen=True)
class RefineConfig:
    huber_delta: float = CHI2_2DOF_95  # np.inf disables the kernel
    max_iters: int = 50
    rel_tol: float = 1e-10
    lambda_init: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 0.5
    lambda_max: float = 1e12


def huber_rho(q, delta: float):
    """Robust kernel on the squared Mahalanobis distance q."""
    q = np.asarray(q, dtype=float)
    if not np.isfinite(delta):
        return q
    return np.where(q <= delta, q, 2.0 * np.sqrt(delta * np.maximum(q, 0.0)) - delta)


def huber_weight(q, delta: float):
    """IRLS weight rho'(q): 1 inside the kernel, sqrt(delta/q) outside."""
    q = np.asarray(q, dtype=float)
    if not np.isfinite(delta):
        return np.ones_like(q)
    return np.where(q <= delta, 1.0, np.sqrt(delta / np.maximum(q, 1e-300)))


@dataclass(frozen=True)
class Residual:
    """One evaluated reprojection residual; s marks participation."""

    frame_id: int
    object_id: str
    keypoint_id: int
    value: np.ndarray
    cov: np.ndarray
    s: bool


def evaluate_residual(meas, cam_pose, obj_pose, model, cam) -> Residual:
    """Residual of one measurement at given poses.

    A non-positive depth cannot be projected; the residual comes back
    NaN with s = False so the term drops out of any linearization.
    """
    p = model.point_for(meas.keypoint_id)
    q = cam_pose.apply(obj_pose.apply(p))
    if q[2] <= MIN_DEPTH:
        return Residual(meas.frame_id, meas.object_id, meas.keypoint_id,
                        np.full(2, np.nan), meas.cov, False)
    uv = np.array([cam.fx * q[0] / q[2] + cam.cx, cam.fy * q[1] / q[2] + cam.cy])
    return Residual(meas.frame_id, meas.object_id, meas.keypoint_id,
                    meas.coord - uv, meas.cov, bool(meas.inlier))


# ---------------------------------------------------------------------------
# Vectorized helpers


def _chol_inv_2x2(covs):
    """Inverse Cholesky factors of a (N, 2, 2) covariance stack."""
    a = covs[:, 0, 0]
    b = covs[:, 0, 1]
    c = covs[:, 1, 1]
    if np.any(a <= 0.0):
        raise SingularCovariance("non-positive variance")
    l11 = np.sqrt(a)
    l21 = b / l11
    d = c - l21 * l21
    if np.any(d <= 0.0):
        raise SingularCovariance("covariance not positive definite")
    l22 = np.sqrt(d)
    out = np.zeros_like(covs)
    out[:, 0, 0] = 1.0 / l11
    out[:, 1, 0] = -l21 / (l11 * l22)
    out[:, 1, 1] = 1.0 / l22
    return out


def _skew_stack(v):
    out = np.zeros((v.shape[0], 3, 3))
    out[:, 0, 1] = -v[:, 2]
    out[:, 0, 2] = v[:, 1]
    out[:, 1, 0] = v[:, 2]
    out[:, 1, 2] = -v[:, 0]
    out[:, 2, 0] = -v[:, 1]
    out[:, 2, 1] = v[:, 0]
    return out


class _Problem:
    """Frozen measurement arrays for one solve."""

    def __init__(self, scene: SceneState, only_inliers: bool = True):
        self.frames = scene.frames()
        self.objects = sorted(scene.obj_poses)
        f_index = {f: i for i, f in enumerate(self.frames)}
        o_index = {o: i for i, o in enumerate(self.objects)}
        meas = [m for m in scene.measurements if m.inlier or not only_inliers]
        self.meas = meas
        n = len(meas)
        self.n = n
        self.fi = np.array([f_index[m.frame_id] for m in meas], dtype=int)
        self.oi = np.array([o_index[m.object_id] for m in meas], dtype=int)
        self.pt = np.array(
            [scene.models[m.object_id].point_for(m.keypoint_id) for m in meas]
        ).reshape(n, 3)
        self.px = np.array([m.coord for m in meas]).reshape(n, 2)
        covs = np.array([m.cov for m in meas]).reshape(n, 2, 2)
        self.linv = _chol_inv_2x2(covs) if n else np.zeros((0, 2, 2))

    def stack_poses(self, cam_poses, obj_poses):
        r_c = np.array([cam_poses[f].rotation for f in self.frames])
        t_c = np.array([cam_poses[f].translation for f in self.frames])
        r_o = np.array([obj_poses[o].rotation for o in self.objects])
        t_o = np.array([obj_poses[o].translation for o in self.objects])
        return r_c, t_c, r_o, t_o

    def evaluate(self, cam, r_c, t_c, r_o, t_o):
        """Residuals and squared Mahalanobis distances at given poses.

        Returns (g, q3, r, mq, pos): global points, camera points,
        pixel residuals, Mahalanobis q, and the positive-depth row mask.
        """
        g = np.einsum("nij,nj->ni", r_o[self.oi], self.pt) + t_o[self.oi]
        q3 = np.einsum("nij,nj->ni", r_c[self.fi], g) + t_c[self.fi]
        z = q3[:, 2]
        pos = z > MIN_DEPTH
        zsafe = np.where(pos, z, 1.0)
        uv = np.stack(
            [cam.fx * q3[:, 0] / zsafe + cam.cx, cam.fy * q3[:, 1] / zsafe + cam.cy],
            axis=1,
        )
        r = self.px - uv
        white = np.einsum("nij,nj->ni", self.linv, r)
        mq = np.einsum("ni,ni->n", white, white)
        return g, q3, r, mq, pos

    def cost(self, cam, cam_poses, obj_poses, delta: float) -> float:
        if self.n == 0:
            return 0.0
        _, _, _, mq, pos = self.evaluate(cam, *self.stack_poses(cam_poses, obj_poses))
        return float(huber_rho(mq[pos], delta).sum())


def classify_inliers(scene: SceneState, cfg: BackendConfig | None = None) -> int:
    """Chi-square gate every measurement at the current poses.

    Sets each measurement's inlier flag (s) to True iff the point
    projects with positive depth and r^T Sigma^-1 r < tau.  Returns the
    inlier count.
    """
    cfg = cfg or BackendConfig()
    prob = _Problem(scene, only_inliers=False)
    if prob.n == 0:
        return 0
    _, _, _, mq, pos = prob.evaluate(
        scene.camera, *prob.stack_poses(scene.cam_poses, scene.obj_poses)
    )
    flags = pos & (mq < cfg.tau)
    for m, flag in zip(prob.meas, flags):
        m.inlier = bool(flag)
    return int(flags.sum())


def global_cost(scene: SceneState, cfg: BackendConfig | None = None) -> float:
    """Robust cost over the currently flagged inliers."""
    cfg = cfg or BackendConfig()
    return _Problem(scene, only_inliers=True).cost(
        scene.camera, scene.cam_poses, scene.obj_poses, cfg.huber_delta
    )


@dataclass
class BackendResult:
    converged: bool
    n_iters: int
    initial_cost: float
    final_cost: float
    n_inliers: int
    trace: list = field(default_factory=list)


def optimize_global(
    scene: SceneState, cfg: BackendConfig | None = None, reclassify: bool = True
) -> BackendResult:
    """Levenberg-Marquardt over all non-gauge camera poses and object poses.

    Inlier flags are recomputed at entry (unless ``reclassify`` is
    False) and then frozen.  Accepted steps strictly decrease the exact
    robust cost; the solve stops when the relative improvement drops
    below ``rel_tol``, the step stalls, or the iteration budget is hit.
    """
    cfg = cfg or BackendConfig()
    if reclassify:
        classify_inliers(scene, cfg)
    prob = _Problem(scene, only_inliers=True)
    frames, objects = prob.frames, prob.objects
    cam_cols = {f: 6 * i for i, f in enumerate(frames[1:])}
    obj_col0 = 6 * max(len(frames) - 1, 0)
    n_vars = obj_col0 + 6 * len(objects)
    n_inl = prob.n
    if prob.n == 0 or n_vars == 0:
        c0 = global_cost(scene, cfg)
        return BackendResult(True, 0, c0, c0, n_inl)

    cam = scene.camera
    cur_cam = dict(scene.cam_poses)
    cur_obj = dict(scene.obj_poses)
    initial_cost = prob.cost(cam, cur_cam, cur_obj, cfg.huber_delta)
    cost = initial_cost
    lam = cfg.lambda_init
    trace: list = []
    converged = initial_cost == 0.0
    it = 0
    h_mat = b_vec = None

    while it < cfg.max_iters and not converged:
        it += 1
        if h_mat is None:
            h_mat, b_vec = _linearize(prob, cam, cur_cam, cur_obj, cfg,
                                      cam_cols, obj_col0, n_vars)
        damping = np.maximum(np.diag(h_mat), 1e-12)
        a_mat = h_mat + lam * np.diag(damping)
        try:
            delta = cho_solve(cho_factor(a_mat), -b_vec)
        except np.linalg.LinAlgError:
            lam = min(lam * cfg.lambda_up, cfg.lambda_max)
            trace.append({"iteration": it, "cost": cost, "lambda": lam,
                          "step_norm": 0.0, "accepted": False})
            continue
        trial_cam = dict(cur_cam)
        for f, col in cam_cols.items():
            trial_cam[f] = exp_map(delta[col:col + 6]).compose(cur_cam[f])
        trial_obj = dict(cur_obj)
        for i, o in enumerate(objects):
            col = obj_col0 + 6 * i
            trial_obj[o] = exp_map(delta[col:col + 6]).compose(cur_obj[o])
        trial_cost = prob.cost(cam, trial_cam, trial_obj, cfg.huber_delta)
        step_norm = float(np.linalg.norm(delta))
        accepted = trial_cost < cost
        trace.append({"iteration": it, "cost": trial_cost if accepted else cost,
                      "lambda": lam, "step_norm": step_norm, "accepted": accepted})
        if accepted:
            improvement = cost - trial_cost
            cur_cam, cur_obj = trial_cam, trial_obj
            cost = trial_cost
            h_mat = None
            lam = max(lam * cfg.lambda_down, 1e-12)
            if improvement <= cfg.rel_tol * max(cost, 1e-300) or step_norm < 1e-14:
                converged = True
        else:
            # A rejected step of negligible length still means the normal
            # equations have no useful direction left: stationary point.
            if step_norm < 1e-14:
                converged = True
            lam = lam * cfg.lambda_up
            if lam > cfg.lambda_max:
                break

    for f in frames:
        scene.cam_poses[f] = cur_cam[f].orthonormalized()
    for o in objects:
        scene.obj_poses[o] = cur_obj[o].orthonormalized()
    final = global_cost(scene, cfg)
    return BackendResult(converged, it, initial_cost, final, n_inl, trace)


def _linearize(prob, cam, cam_poses, obj_poses, cfg, cam_cols, obj_col0, n_vars):
    """Whitened normal equations H, b at the given poses."""
    r_c, t_c, r_o, t_o = prob.stack_poses(cam_poses, obj_poses)
    g, q3, r, mq, pos = prob.evaluate(cam, r_c, t_c, r_o, t_o)
    idx = np.nonzero(pos)[0]
    n = idx.size
    if n == 0:
        return np.zeros((n_vars, n_vars)), np.zeros(n_vars)
    g, q3, r, mq = g[idx], q3[idx], r[idx], mq[idx]
    fi, oi = prob.fi[idx], prob.oi[idx]
    linv = prob.linv[idx]
    z = q3[:, 2]
    dpi = np.zeros((n, 2, 3))
    dpi[:, 0, 0] = cam.fx / z
    dpi[:, 0, 2] = -cam.fx * q3[:, 0] / (z * z)
    dpi[:, 1, 1] = cam.fy / z
    dpi[:, 1, 2] = -cam.fy * q3[:, 1] / (z * z)
    # d(residual)/d(xi) = -dpi @ [d q3 / d xi]; left-tangent blocks.
    j_cam = np.concatenate(
        [np.einsum("nij,njk->nik", dpi, _skew_stack(q3)),  # -dpi @ -skew = +
         -dpi], axis=2,
    )
    dpi_rc = np.einsum("nij,njk->nik", dpi, r_c[fi])
    j_obj = np.concatenate(
        [np.einsum("nij,njk->nik", dpi_rc, _skew_stack(g)), -dpi_rc], axis=2
    )
    w = np.sqrt(huber_weight(mq, cfg.huber_delta))
    m_white = w[:, None, None] * linv
    jw_cam = np.einsum("nij,njk->nik", m_white, j_cam)
    jw_obj = np.einsum("nij,njk->nik", m_white, j_obj)
    rw = np.einsum("nij,nj->ni", m_white, r)

    gauge = (fi == 0)
    rows2 = 2 * np.arange(n)
    row_idx = np.repeat(np.stack([rows2, rows2 + 1], axis=1).ravel(), 6)
    # camera block (skip gauge rows)
    cam_base = np.array([cam_cols.get(prob.frames[f], -1) for f in range(len(prob.frames))])
    cam_col_of = cam_base[fi]
    keep = np.repeat(~gauge, 12)
    cols_cam = (cam_col_of[:, None, None] + np.arange(6)[None, None, :])
    cols_cam = np.broadcast_to(cols_cam, (n, 2, 6)).ravel()
    data_cam = jw_cam.ravel()
    obj_col_of = obj_col0 + 6 * oi
    cols_obj = (obj_col_of[:, None, None] + np.arange(6)[None, None, :])
    cols_obj = np.broadcast_to(cols_obj, (n, 2, 6)).ravel()
    data_obj = jw_obj.ravel()
    rows = np.concatenate([row_idx[keep], row_idx])
    cols = np.concatenate([cols_cam[keep], cols_obj])
    data = np.concatenate([data_cam[keep], data_obj])
    jac = sp.coo_matrix((data, (rows, cols)), shape=(2 * n, n_vars)).tocsr()
    h_mat = (jac.T @ jac).toarray()
    b_vec = jac.T @ rw.ravel()
    return h_mat, b_vec


# ---------------------------------------------------------------------------
# Single-pose refinement (object-only or camera-only problems)


@dataclass(frozen=True)
class RefineResult:
    pose: RigidTransform
    converged: bool
    n_iters: int
    initial_cost: float
    final_cost: float


def refine_pose(initial, points, pixels, covs, cam, cfg: RefineConfig | None = None):
    """LM refinement of one pose from 2D-3D correspondences.

    ``points`` live in the frame the pose maps from (object points for
    an object pose, global points for a camera pose); every passed
    correspondence participates -- callers do their own gating.

    Raises:
        NotConverged: no correspondence has positive depth at the start.
    """
    cfg = cfg or RefineConfig()
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    px = np.asarray(pixels, dtype=float).reshape(-1, 2)
    covs = np.asarray(covs, dtype=float).reshape(-1, 2, 2)
    n = pts.shape[0]
    if n == 0:
        raise NotConverged("no correspondences to refine against")
    linv = _chol_inv_2x2(covs)

    def eval_at(pose):
        q3 = pts @ pose.rotation.T + pose.translation
        z = q3[:, 2]
        pos = z > MIN_DEPTH
        zs = np.where(pos, z, 1.0)
        uv = np.stack([cam.fx * q3[:, 0] / zs + cam.cx,
                       cam.fy * q3[:, 1] / zs + cam.cy], axis=1)
        r = px - uv
        white = np.einsum("nij,nj->ni", linv, r)
        mq = np.einsum("ni,ni->n", white, white)
        if not pos.any():
            return q3, r, mq, pos, np.inf
        return q3, r, mq, pos, float(huber_rho(mq[pos], cfg.huber_delta).sum())

    pose = initial
    q3, r, mq, pos, cost = eval_at(pose)
    if not np.isfinite(cost):
        raise NotConverged("all correspondences behind the camera")
    initial_cost = cost
    lam = cfg.lambda_init
    converged = cost == 0.0
    it = 0
    lin = None
    while it < cfg.max_iters and not converged:
        it += 1
        if lin is None:
            idx = np.nonzero(pos)[0]
            qi, ri, mqi = q3[idx], r[idx], mq[idx]
            z = qi[:, 2]
            dpi = np.zeros((idx.size, 2, 3))
            dpi[:, 0, 0] = cam.fx / z
            dpi[:, 0, 2] = -cam.fx * qi[:, 0] / (z * z)
            dpi[:, 1, 1] = cam.fy / z
            dpi[:, 1, 2] = -cam.fy * qi[:, 1] / (z * z)
            jac = np.concatenate(
                [np.einsum("nij,njk->nik", dpi, _skew_stack(qi)), -dpi], axis=2
            )
            w = np.sqrt(huber_weight(mqi, cfg.huber_delta))
            m_white = w[:, None, None] * linv[idx]
            jw = np.einsum("nij,njk->nik", m_white, jac).reshape(-1, 6)
            rw = np.einsum("nij,nj->ni", m_white, ri).ravel()
            h_mat = jw.T @ jw
            b_vec = jw.T @ rw
            lin = (h_mat, b_vec)
        h_mat, b_vec = lin
        damping = np.maximum(np.diag(h_mat), 1e-12)
        try:
            delta = cho_solve(cho_factor(h_mat + lam * np.diag(damping)), -b_vec)
        except np.linalg.LinAlgError:
            lam = min(lam * cfg.lambda_up, cfg.lambda_max)
            continue
        trial = exp_map(delta).compose(pose)
        t_q3, t_r, t_mq, t_pos, trial_cost = eval_at(trial)
        if trial_cost < cost:
            improvement = cost - trial_cost
            pose, cost = trial, trial_cost
            q3, r, mq, pos = t_q3, t_r, t_mq, t_pos
            lin = None
            lam = max(lam * cfg.lambda_down, 1e-12)
            if improvement <= cfg.rel_tol * max(cost, 1e-300) or \
                    float(np.linalg.norm(delta)) < 1e-14:
                converged = True
        else:
            if float(np.linalg.norm(delta)) < 1e-14:
                converged = True
            lam = lam * cfg.lambda_up
            if lam > cfg.lambda_max:
                break
    return RefineResult(pose.orthonormalized(), converged, it, initial_cost, cost)
