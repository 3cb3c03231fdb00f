"""Kalman-guided deformation field.

Each sample point is treated as a scalar dynamic system per axis. A shallow
MLP observes the deformation ``y`` at the current frame, a locally linear
model extrapolates it from the two previous frames, and a learned gain in
(0, 1) blends the two.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .encoders import positional_encode, positional_encoding_dim
from .nn import MLP, Linear, Module

TIME_TOL = 1e-9


class Timeline:
    """Sorted distinct frame timestamps in [0, 1]."""

    def __init__(self, times):
        times = np.unique(np.asarray(times, dtype=np.float64))
        if times.size == 0:
            raise ValueError("timeline needs at least one timestamp")
        if times[0] < 0 or times[-1] > 1:
            raise ValueError("timestamps must lie in [0, 1]")
        self.times = times

    def __len__(self) -> int:
        return len(self.times)

    def __getitem__(self, i: int) -> float:
        return float(self.times[i])

    def index_of(self, t) -> np.ndarray:
        """Frame index of each time: the number of timeline entries strictly before it."""
        t = np.asarray(t, dtype=np.float64)
        return np.searchsorted(self.times, t - TIME_TOL, side="left")

    def history(self, t) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """For each time, (count of usable predecessors <= 2, t_{i-1}, t_{i-2}).

        Missing predecessors are filled with the nearest available time so
        every slot holds a valid input; masks downstream discard them.
        """
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        idx = self.index_of(t)
        n_prev = np.minimum(idx, 2)
        t1 = np.where(idx >= 1, self.times[np.maximum(idx - 1, 0)], t)
        t2 = np.where(idx >= 2, self.times[np.maximum(idx - 2, 0)], t1)
        return n_prev, t1, t2


@dataclass
class DeformationEstimate:
    """Per-point record of one deformation estimate (all (P, 3) tensors)."""

    y: ad.Tensor
    prediction: ad.Tensor
    gain: ad.Tensor
    dx: ad.Tensor
    eps: ad.Tensor
    eps_prev: ad.Tensor


class ObservationNet(Module):
    """PE(x) + PE(t) -> two ReLU layers -> heads y (zero-initialized) and eps."""

    def __init__(self, rng, n_freqs: int = 5, hidden: int = 128, bounds=(-1.5, 1.5)):
        self.n_freqs = n_freqs
        self.center = 0.5 * (np.asarray(bounds[1]) + np.asarray(bounds[0]))
        self.half = 0.5 * (np.asarray(bounds[1]) - np.asarray(bounds[0]))
        n_in = positional_encoding_dim(3, n_freqs) + positional_encoding_dim(1, n_freqs)
        self.trunk = MLP(n_in, [hidden], hidden, rng)
        self.y_head = Linear(hidden, 3, rng, zero=True)
        self.eps_head = Linear(hidden, 3, rng)

    def __call__(self, x, t) -> tuple[ad.Tensor, ad.Tensor]:
        xn = (ad.no_grad_value(x) - self.center) / self.half
        t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
        feats = ad.concat([positional_encode(xn, self.n_freqs), positional_encode(t, self.n_freqs)])
        h = ad.relu(self.trunk(feats))
        return self.y_head(h), self.eps_head(h)


class GainNet(Module):
    """sigmoid(Linear(eps_i, eps_{i-1}, t_i, t_{i-1})) -> per-axis gain in (0, 1)."""

    def __init__(self, rng, eps_dim: int = 3):
        self.linear = Linear(2 * eps_dim + 2, 3, rng)

    def __call__(self, eps, eps_prev, t, t_prev) -> ad.Tensor:
        times = np.stack([np.asarray(t, float), np.asarray(t_prev, float)], axis=1)
        return ad.sigmoid(self.linear(ad.concat([eps, eps_prev, times])))


def fuse(prediction, y, gain) -> ad.Tensor:
    """(1 - K) * prediction + K * y; exact at K = 0 and K = 1."""
    return (1.0 - ad.as_tensor(gain)) * prediction + gain * y


class DeformationField(Module):
    def __init__(
        self,
        rng,
        n_freqs: int = 5,
        hidden: int = 128,
        bounds=(-1.5, 1.5),
        enable_prediction: bool = True,
        stopgrad_prediction: bool = False,
    ):
        self.observer = ObservationNet(rng, n_freqs, hidden, bounds)
        self.gain_net = GainNet(rng)
        self.enable_prediction = enable_prediction
        self.stopgrad_prediction = stopgrad_prediction

    def observe(self, x, t) -> tuple[ad.Tensor, ad.Tensor]:
        x = ad.no_grad_value(x)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (len(x),))
        return self.observer(x, t)

    def estimate_at(self, x, t, timeline: Timeline, force_gain=None) -> DeformationEstimate:
        """Vectorized estimate for points ``x`` (P, 3) at per-point times ``t`` (P,)."""
        x = ad.no_grad_value(x)
        n = len(x)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,)).copy()
        n_prev, t1, t2 = timeline.history(t)

        if not self.enable_prediction:
            # pure observation: the gain is pinned to 1 and no history is evaluated
            y, eps = self.observe(x, t)
            pred = ad.Tensor(np.zeros((n, 3)))
            gain = ad.Tensor(_const_gain(1.0 if force_gain is None else force_gain, n))
            dx = y if force_gain is None else fuse(pred, y, gain)
            return DeformationEstimate(y, pred, gain, dx, eps, eps)

        if np.all(n_prev == 0):
            y, eps = self.observe(x, t)
            pred = ad.Tensor(np.zeros((n, 3)))
            eps_prev = eps
            learned = self.gain_net(eps, eps_prev, t, t)
        else:
            if self.stopgrad_prediction:
                # history observations are constants: evaluate them off the tape
                y, eps = self.observe(x, t)
                with ad.no_grad():
                    ys, es = self.observe(np.concatenate([x, x]), np.concatenate([t1, t2]))
                y1, y2, e1 = ys[:n], ys[n:], es[:n]
            else:
                ys, es = self.observe(np.concatenate([x, x, x]), np.concatenate([t, t1, t2]))
                y, y1, y2 = ys[:n], ys[n : 2 * n], ys[2 * n :]
                eps, e1 = es[:n], es[n : 2 * n]
            pred = _linear_prediction(y1, y2, t, t1, t2, n_prev)
            has1 = (n_prev >= 1).astype(float)[:, None]
            eps_prev = has1 * e1 + (1.0 - has1) * eps
            learned = self.gain_net(eps, eps_prev, t, t1)

        if force_gain is not None:
            gain = ad.Tensor(_const_gain(force_gain, n))
        else:
            first = (n_prev == 0).astype(float)[:, None]
            gain = first * 1.0 + (1.0 - first) * learned
        return DeformationEstimate(y, pred, gain, fuse(pred, y, gain), eps, eps_prev)

    def estimate(self, x, i: int, timeline: Timeline, force_gain=None) -> DeformationEstimate:
        """Estimate at frame index ``i`` of the timeline for all points ``x``."""
        return self.estimate_at(x, np.full(len(x), timeline[i]), timeline, force_gain)

    def predict_deformation(self, x, i: int, timeline: Timeline) -> ad.Tensor:
        """Locally linear extrapolation from frames i-1, i-2 (0 at i = 0, hold at i = 1)."""
        x = ad.no_grad_value(x)
        n = len(x)
        t = np.full(n, timeline[i])
        n_prev, t1, t2 = timeline.history(t)
        if i == 0:
            return ad.Tensor(np.zeros((n, 3)))
        y1, _ = self.observe(x, t1)
        y2, _ = self.observe(x, t2)
        return _linear_prediction(y1, y2, t, t1, t2, n_prev)

    def warp(self, x, t, timeline: Timeline) -> tuple[ad.Tensor, DeformationEstimate]:
        est = self.estimate_at(x, t, timeline)
        return ad.no_grad_value(x) + est.dx, est


def _const_gain(value, n: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(value, dtype=np.float64), (n, 3)).copy()


def _linear_prediction(y1, y2, t, t1, t2, n_prev) -> ad.Tensor:
    # dx_{i-1} + dt_i * v_i with v_i = (dx_{i-1} - dx_{i-2}) / (t_{i-1} - t_{i-2});
    # reduces to 2 dx_{i-1} - dx_{i-2} on uniform spacing
    span = np.where(n_prev >= 2, t1 - t2, 1.0)
    ratio = np.where(n_prev >= 2, (t - t1) / span, 0.0)[:, None]
    has1 = (n_prev >= 1).astype(float)[:, None]
    return has1 * y1 + ratio * (y1 - y2)
