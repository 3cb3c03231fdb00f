"""Training losses and their weighted total."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .deformation import TIME_TOL, DeformationEstimate
from .encoders import TriPlaneGrid

LAMBDA_TV = 1e-4


@dataclass
class LossReport:
    l_image: float
    l_kf: float
    l_co: float
    l_prop: float
    l_tv: float
    total: float
    lambda_tv: float = LAMBDA_TV

    def log_line(self, step: int) -> str:
        record = {"step": step, **{k: v for k, v in asdict(self).items() if k != "lambda_tv"}}
        return json.dumps(record)


def image_loss(pred, target) -> ad.Tensor:
    """Mean squared error over rays and channels."""
    target = np.asarray(target, dtype=np.float64)
    if ad.as_tensor(pred).shape != target.shape:
        raise ad.ShapeError(
            f"image_loss: prediction {ad.as_tensor(pred).shape} vs target {target.shape}"
        )
    return ad.mean(ad.square(pred - target))


def kf_loss(est: DeformationEstimate) -> ad.Tensor:
    """Mean over points of ||y - dx||^2 with the fused estimate held fixed."""
    if est.y.shape[0] == 0:
        raise ValueError("kf_loss needs a non-empty batch")
    resid = est.y - ad.stop_gradient(est.dx)
    return ad.mean(ad.sum_(ad.square(resid), axis=1))


def canonical_observation_loss(dx, times, norm: str = "l2sq") -> ad.Tensor:
    """Mean of ||dx|| over the points at t = 0; squared L2 by default, ``norm="l1"`` for L1.

    A mixed-frame batch is treated as if only its first-frame points had been
    drawn, so the term's weight does not shrink as more frames are released.
    """
    times = np.asarray(times, dtype=np.float64).reshape(-1)
    mask = (np.abs(times) <= TIME_TOL).astype(np.float64)
    if not mask.any():
        return ad.Tensor(0.0)
    if norm == "l2sq":
        per_point = ad.sum_(ad.square(dx), axis=1)
    elif norm == "l1":
        per_point = ad.sum_(ad.abs_(dx), axis=1)
    else:
        raise ValueError(f"unknown norm {norm!r}")
    return ad.sum_(per_point * mask) / float(mask.sum())


def _plane_tv(plane) -> ad.Tensor:
    # sum over grid neighbours of squared differences, averaged over features
    pv = ad.no_grad_value(plane)
    n_feat = pv.shape[-1]
    di = pv[1:] - pv[:-1]
    dj = pv[:, 1:] - pv[:, :-1]
    value = (np.sum(di * di) + np.sum(dj * dj)) / n_feat

    def backward(g, needs):
        grad = np.zeros_like(pv)
        grad[1:] += di
        grad[:-1] -= di
        grad[:, 1:] += dj
        grad[:, :-1] -= dj
        return (grad * (2.0 * float(g) / n_feat),)

    return ad._record("plane_tv", np.asarray(value), (plane,), backward)


def tv_loss(grid: TriPlaneGrid) -> ad.Tensor:
    """Per scale, the plane-averaged total variation; summed over scales."""
    total = None
    for scale in grid.planes:
        term = ad.sum_(ad.concat([ad.reshape(_plane_tv(p), (1,)) for p in scale])) / len(scale)
        total = term if total is None else total + term
    return total


def overlap_mask(final_edges, proposal_edges) -> np.ndarray:
    """(R, m, n) mask: final bin k overlaps proposal bin j."""
    fe = np.atleast_2d(final_edges)
    pe = np.atleast_2d(proposal_edges)
    f_lo, f_hi = fe[:, :-1, None], fe[:, 1:, None]
    p_lo, p_hi = pe[:, None, :-1], pe[:, None, 1:]
    return ((p_lo < f_hi) & (p_hi > f_lo)).astype(np.float64)


def proposal_loss(proposal_weights, proposal_edges, final_weights, final_edges) -> ad.Tensor:
    """Mean over rays of sum_k max(0, w_k - W_k)^2, W_k = proposal mass overlapping final bin k.

    Final weights are treated as constants so only the proposal receives gradient.
    """
    pw = ad.as_tensor(proposal_weights)
    fw = ad.no_grad_value(final_weights)
    mask = overlap_mask(final_edges, proposal_edges)
    n_rays, n_prop = pw.shape
    bound = ad.sum_(mask * ad.reshape(pw, (n_rays, 1, n_prop)), axis=2)
    excess = ad.relu(fw - bound)
    return ad.mean(ad.sum_(ad.square(excess), axis=1))


@dataclass(frozen=True)
class LossFlags:
    enable_l_kf: bool = True
    enable_l_co: bool = True
    co_norm: str = "l2sq"


def total_loss(out, target, grid: TriPlaneGrid, flags: LossFlags = LossFlags()):
    """Weighted sum of all active terms -> (total tensor, LossReport)."""
    l_image = image_loss(out.color, target)
    l_prop = proposal_loss(out.proposal_weights, out.proposal_edges, out.weights, out.edges)
    l_tv = tv_loss(grid)
    total = l_image + l_prop + LAMBDA_TV * l_tv
    l_kf = l_co = ad.Tensor(0.0)
    if flags.enable_l_kf:
        l_kf = kf_loss(out.estimate)
        total = total + l_kf
    if flags.enable_l_co:
        l_co = canonical_observation_loss(out.estimate.dx, out.point_times, flags.co_norm)
        total = total + l_co
    report = LossReport(
        float(l_image.data), float(l_kf.data), float(l_co.data), float(l_prop.data),
        float(l_tv.data), float(total.data),
    )
    return total, report
