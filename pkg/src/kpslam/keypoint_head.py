"""Differentiable keypoint-head numerics on probability grids.

A detection head emits one logit grid per keypoint channel.  A spatial
softmax turns each grid into a probability mass; the keypoint coordinate
is the probability-weighted mean of the cell centers and its uncertainty
is the probability-weighted second central moment.  Training minimizes a
Gaussian negative log-likelihood on the valid channels plus a binary
cross-entropy on the visibility mask.

Grid coordinates are (x, y) = (column, row) with cell centers at integer
positions; covariances pick up a small isotropic floor so they stay
invertible even when all mass collapses onto one cell.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import EmptyValidSetWarning, SingularCovariance

COV_EPSILON = 1e-6
BCE_CLAMP = 1e-7
MAX_COV_CONDITION = 1e12


@dataclass(frozen=True)
class ProbGrid:
    """Per-channel logits of shape (n_channels, h, w) plus derived mass."""

    logits: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.logits, dtype=float)
        if z.ndim != 3:
            raise ValueError(f"logits must be (n, h, w), got shape {z.shape}")
        object.__setattr__(self, "logits", z)

    @cached_property
    def mass(self) -> np.ndarray:
        """Spatial softmax of the logits; each channel sums to one."""
        z = self.logits
        zmax = z.max(axis=(1, 2), keepdims=True)
        e = np.exp(z - zmax)
        return e / e.sum(axis=(1, 2), keepdims=True)

    @property
    def shape(self):
        return self.logits.shape


def spatial_softmax(logits) -> ProbGrid:
    return ProbGrid(np.asarray(logits, dtype=float))


def _cell_coords(h: int, w: int) -> np.ndarray:
    """(h*w, 2) array of (x, y) cell centers, row-major."""
    ys, xs = np.mgrid[0:h, 0:w]
    return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(float)


def expect_coords(mass) -> np.ndarray:
    """Probability-weighted mean coordinate of one (h, w) mass or a stack."""
    m = np.asarray(mass, dtype=float)
    single = m.ndim == 2
    if single:
        m = m[None]
    x = _cell_coords(m.shape[1], m.shape[2])
    coords = m.reshape(m.shape[0], -1) @ x
    return coords[0] if single else coords


def coord_covariance(mass, coords=None) -> np.ndarray:
    """Second central moment of the mass plus an isotropic 1e-6 floor."""
    m = np.asarray(mass, dtype=float)
    single = m.ndim == 2
    if single:
        m = m[None]
    if coords is None:
        coords = expect_coords(m)
    coords = np.atleast_2d(coords)
    x = _cell_coords(m.shape[1], m.shape[2])
    p = m.reshape(m.shape[0], -1)
    second = np.einsum("nc,ci,cj->nij", p, x, x)
    outer = np.einsum("ni,nj->nij", coords, coords)
    cov = second - outer + COV_EPSILON * np.eye(2)
    return cov[0] if single else cov


@dataclass(frozen=True)
class HeadPrediction:
    coords: np.ndarray  # (n, 2) grid coordinates
    covs: np.ndarray  # (n, 2, 2)
    mask: np.ndarray  # (n,) visibility scores in [0, 1]


@dataclass(frozen=True)
class HeadTarget:
    """Ground-truth coordinates plus the visible (valid) channel set."""

    gt_coords: np.ndarray  # (n, 2)
    gt_mask: np.ndarray  # (n,) in {0, 1}
    valid: np.ndarray = field(init=False)

    def __post_init__(self):
        coords = np.asarray(self.gt_coords, dtype=float)
        mask = np.asarray(self.gt_mask, dtype=float)
        if coords.shape[0] != mask.shape[0]:
            raise ValueError("gt_coords and gt_mask disagree on channel count")
        if not np.all((mask == 0.0) | (mask == 1.0)):
            raise ValueError("gt_mask entries must be 0 or 1")
        object.__setattr__(self, "gt_coords", coords)
        object.__setattr__(self, "gt_mask", mask)
        object.__setattr__(self, "valid", np.nonzero(mask == 1.0)[0])


def head_predict(grid: ProbGrid, mask) -> HeadPrediction:
    """Assemble coordinates/covariances from a grid plus mask scores."""
    mass = grid.mass
    coords = expect_coords(mass)
    covs = coord_covariance(mass, coords)
    return HeadPrediction(coords, covs, np.asarray(mask, dtype=float))


def mle_loss(coord, cov, target):
    """Gaussian negative log-likelihood for one keypoint channel.

    L = e^T Sigma^-1 e + log|Sigma| with e = target - coord.

    Returns:
        (loss, grad_coord, grad_cov) with grad_coord = -2 Sigma^-1 e and
        grad_cov = Sigma^-1 - Sigma^-1 e e^T Sigma^-1.

    Raises:
        SingularCovariance: condition number above 1e12 or |Sigma| <= 0.
    """
    coord = np.asarray(coord, dtype=float)
    cov = np.asarray(cov, dtype=float)
    e = np.asarray(target, dtype=float) - coord
    det = cov[0, 0] * cov[1, 1] - cov[0, 1] * cov[1, 0]
    if det <= 0.0 or np.linalg.cond(cov) > MAX_COV_CONDITION:
        raise SingularCovariance(f"covariance {cov.tolist()} is not invertible")
    inv = np.array([[cov[1, 1], -cov[0, 1]], [-cov[1, 0], cov[0, 0]]]) / det
    sie = inv @ e
    loss = float(e @ sie + np.log(det))
    grad_coord = -2.0 * sie
    grad_cov = inv - np.outer(sie, sie)
    return loss, grad_coord, grad_cov


def bce(mask_pred, mask_gt) -> float:
    """Binary cross-entropy averaged over all channels (probs clamped)."""
    p = np.clip(np.asarray(mask_pred, dtype=float), BCE_CLAMP, 1.0 - BCE_CLAMP)
    y = np.asarray(mask_gt, dtype=float)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def total_loss(pred: HeadPrediction, tgt: HeadTarget) -> float:
    """Mask BCE plus the mean keypoint NLL over the valid channel set."""
    loss = bce(pred.mask, tgt.gt_mask)
    if tgt.valid.size == 0:
        warnings.warn("no valid keypoint channels; loss is BCE only", EmptyValidSetWarning)
        return loss
    nll = 0.0
    for i in tgt.valid:
        nll += mle_loss(pred.coords[i], pred.covs[i], tgt.gt_coords[i])[0]
    return loss + nll / tgt.valid.size


def head_backward(logits, tgt: HeadTarget) -> np.ndarray:
    """Gradient of :func:`total_loss` w.r.t. the keypoint logits.

    Only the NLL term depends on the logits (the mask BCE does not), so
    channels outside the valid set get a zero gradient.  The chain runs
    through the softmax, the coordinate expectation u = sum_c p_c x_c and
    the covariance Sigma = sum_c p_c x_c x_c^T - u u^T + eps I.
    """
    grid = spatial_softmax(logits)
    mass = grid.mass
    n, h, w = mass.shape
    x = _cell_coords(h, w)
    grad = np.zeros_like(mass)
    if tgt.valid.size == 0:
        return grad
    scale = 1.0 / tgt.valid.size
    coords = expect_coords(mass)
    covs = coord_covariance(mass, coords)
    for i in tgt.valid:
        p = mass[i].ravel()
        u = coords[i]
        _, grad_u, grad_cov = mle_loss(u, covs[i], tgt.gt_coords[i])
        # dL/dp_c through u and Sigma(p) = sum_c p_c x_c x_c^T - u u^T.
        dldp = x @ grad_u
        dldp += np.einsum("ci,ij,cj->c", x, grad_cov, x)
        dldp -= 2.0 * x @ (grad_cov @ u)
        dldz = p * (dldp - float(p @ dldp))
        grad[i] = scale * dldz.reshape(h, w)
    return grad


# ---------------------------------------------------------------------------
# Binary snapshots: 3 little-endian uint32 (n, h, w) then float64 row-major


def save_prob_grid(path, grid: ProbGrid) -> None:
    n, h, w = grid.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<III", n, h, w))
        f.write(np.ascontiguousarray(grid.logits, dtype="<f8").tobytes())


def load_prob_grid(path) -> ProbGrid:
    with open(path, "rb") as f:
        header = f.read(12)
        if len(header) != 12:
            raise ValueError("truncated grid file header")
        n, h, w = struct.unpack("<III", header)
        payload = f.read()
    expected = n * h * w * 8
    if len(payload) != expected:
        raise ValueError(f"grid payload has {len(payload)} bytes, expected {expected}")
    logits = np.frombuffer(payload, dtype="<f8").reshape(n, h, w)
    return ProbGrid(logits.astype(float))
