"""Input encodings: sinusoidal positional encoding, degree-2 real spherical
harmonics, and the multi-scale tri-plane feature grid."""

from __future__ import annotations

import numpy as np
from scipy import sparse

from . import autodiff as ad
from .nn import Module

FULL_PLANE_RESOLUTIONS = (64, 128, 256, 512)
PLANE_FEATURES = 32
PLANE_AXES = ((0, 1), (0, 2), (1, 2))  # XY, XZ, YZ
PLANE_NAMES = ("xy", "xz", "yz")

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)


def positional_encoding_dim(d: int, n_freqs: int) -> int:
    return d * (2 * n_freqs + 1)


def _pe_layout(d: int, n_freqs: int) -> tuple[np.ndarray, np.ndarray]:
    # frequency matrix for all sin/cos arguments, and the column order that
    # interleaves them as (p, sin f0 p, cos f0 p, sin f1 p, cos f1 p, ...)
    freqs = np.pi * 2.0 ** np.arange(n_freqs)
    fmat = np.zeros((d, n_freqs * d))
    for k, f in enumerate(freqs):
        fmat[np.arange(d), k * d + np.arange(d)] = f
    n = n_freqs * d
    order = [np.arange(d)]
    for k in range(n_freqs):
        order.append(d + k * d + np.arange(d))
        order.append(d + n + k * d + np.arange(d))
    return fmat, np.concatenate(order)


def positional_encode(p, n_freqs: int = 5) -> ad.Tensor:
    """Encode rows of ``p`` (N, d) as (p, sin(2^k pi p), cos(2^k pi p)) for k < n_freqs.

    Output width is ``d * (2 * n_freqs + 1)``; ``n_freqs = 0`` returns ``p``.
    """
    p = ad.as_tensor(p)
    if p.ndim != 2:
        raise ad.ShapeError(f"positional_encode expects (N, d) input, got {p.shape}")
    if n_freqs == 0:
        return p
    fmat, order = _pe_layout(p.shape[1], n_freqs)
    arg = ad.matmul(p, fmat)
    stacked = ad.concat([p, ad.sin(arg), ad.cos(arg)])
    return ad.getitem(stacked, (slice(None), order))


def sh_encode(v) -> np.ndarray:
    """Real spherical harmonics, degrees 0-2, for unit directions ``v`` (N, 3) -> (N, 9)."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 1:
        return sh_encode(v[None])[0]
    norm = np.linalg.norm(v, axis=-1)
    if np.any(norm == 0):
        raise ValueError("sh_encode: zero-length view direction")
    if np.any(np.abs(norm - 1.0) > 1e-6):
        raise ValueError("sh_encode: view directions must be unit length")
    x, y, z = v[:, 0], v[:, 1], v[:, 2]
    return np.stack(
        [
            np.full_like(x, SH_C0),
            -SH_C1 * y,
            SH_C1 * z,
            -SH_C1 * x,
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2.0 * z * z - x * x - y * y),
            SH_C2[3] * x * z,
            SH_C2[4] * (x * x - y * y),
        ],
        axis=-1,
    )


def bilinear_sample(plane, uv) -> ad.Tensor:
    """Sample an (R, R, F) plane at continuous coordinates ``uv`` in [0, 1]^2.

    Grid node (i, j) sits at uv = (i, j) / (R - 1). Differentiable w.r.t.
    both the plane features and ``uv``.
    """
    pv = ad.no_grad_value(plane)
    uvv = ad.no_grad_value(uv)
    res, res2, n_feat = pv.shape
    if res != res2 or uvv.ndim != 2 or uvv.shape[1] != 2:
        raise ad.ShapeError(f"bilinear_sample: plane {pv.shape}, coords {uvv.shape}")
    g = uvv * (res - 1)
    i0 = np.clip(np.floor(g).astype(np.int64), 0, res - 2)
    a = g - i0
    a0, b0 = a[:, 0], a[:, 1]
    r0, c0 = i0[:, 0], i0[:, 1]
    n = len(uvv)
    rows = np.repeat(np.arange(n), 4)
    cols = np.stack(
        [r0 * res + c0, (r0 + 1) * res + c0, r0 * res + c0 + 1, (r0 + 1) * res + c0 + 1], axis=1
    ).ravel()
    vals = np.stack(
        [(1 - a0) * (1 - b0), a0 * (1 - b0), (1 - a0) * b0, a0 * b0], axis=1
    ).ravel()
    weights = sparse.csr_matrix((vals, (rows, cols)), shape=(n, res * res))
    flat = pv.reshape(res * res, n_feat)
    out = np.asarray(weights @ flat)

    def backward(gout, needs):
        gplane = np.asarray(weights.T @ gout).reshape(pv.shape) if needs[0] else None
        guv = None
        if needs[1]:
            # contract each corner with gout first, then mix the four scalars
            base = r0 * res + c0
            d00, d10, d01, d11 = (
                np.einsum("ij,ij->i", gout, np.take(flat, base + off, axis=0))
                for off in (0, res, 1, res + 1)
            )
            da = (1 - b0) * (d10 - d00) + b0 * (d11 - d01)
            db = (1 - a0) * (d01 - d00) + a0 * (d11 - d10)
            guv = (res - 1) * np.stack([da, db], axis=1)
        return gplane, guv

    return ad._record("bilinear_sample", out, (plane, uv), backward)


class TriPlaneGrid(Module):
    """Per scale, three learnable R x R x F feature planes (XY, XZ, YZ)."""

    def __init__(
        self,
        resolutions=FULL_PLANE_RESOLUTIONS,
        n_features: int = PLANE_FEATURES,
        bounds=((-1.5, -1.5, -1.5), (1.5, 1.5, 1.5)),
        rng: np.random.Generator | None = None,
        init_range: tuple[float, float] = (0.9, 1.1),
    ):
        rng = rng or np.random.default_rng(0)
        self.resolutions = tuple(int(r) for r in resolutions)
        self.n_features = n_features
        self.lo = np.asarray(bounds[0], dtype=np.float64)
        self.hi = np.asarray(bounds[1], dtype=np.float64)
        if np.any(self.hi <= self.lo):
            raise ValueError("TriPlaneGrid: empty bounds")
        self.planes = [
            [ad.Parameter(rng.uniform(*init_range, (r, r, n_features))) for _ in PLANE_AXES]
            for r in self.resolutions
        ]

    @property
    def out_dim(self) -> int:
        return self.n_features * len(self.resolutions)

    def normalize(self, x):
        """World coordinates -> [0, 1]^3, clamped at the box faces."""
        return ad.clip((ad.as_tensor(x) - self.lo) / (self.hi - self.lo), 0.0, 1.0)

    def all_planes(self) -> list[ad.Parameter]:
        return [p for scale in self.planes for p in scale]


def triplane_encode(x, grid: TriPlaneGrid) -> ad.Tensor:
    """Features of points ``x`` (N, 3): per scale the product of the three plane
    samples, concatenated across scales -> (N, F * n_scales)."""
    x = ad.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != 3:
        raise ad.ShapeError(f"triplane_encode expects (N, 3) points, got {x.shape}")
    u = grid.normalize(x)
    coords = [ad.getitem(u, (slice(None), list(axes))) for axes in PLANE_AXES]
    per_scale = []
    for scale in grid.planes:
        feat = None
        for plane, uv in zip(scale, coords):
            sample = bilinear_sample(plane, uv)
            feat = sample if feat is None else feat * sample
        per_scale.append(feat)
    return ad.concat(per_scale)
