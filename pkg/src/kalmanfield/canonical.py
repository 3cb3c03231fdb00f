"""Time-independent canonical radiance field decoded from tri-plane features."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .encoders import (
    PLANE_FEATURES,
    TriPlaneGrid,
    positional_encode,
    positional_encoding_dim,
    sh_encode,
    triplane_encode,
)
from .nn import MLP, Module

GEOMETRY_FEATURES = 15


def _raw_inputs(grid: TriPlaneGrid, pos, t, n_freqs: int) -> list[ad.Tensor]:
    center = 0.5 * (grid.hi + grid.lo)
    half = 0.5 * (grid.hi - grid.lo)
    pn = (ad.as_tensor(pos) - center) / half
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    return [positional_encode(pn, n_freqs), positional_encode(t, n_freqs)]


class CanonicalField(Module):
    """Tri-plane -> Sigma Net (density + geometry features) -> Color Net (RGB)."""

    def __init__(
        self,
        rng,
        resolutions,
        bounds,
        n_freqs: int = 5,
        sigma_hidden: int = 64,
        color_hidden: int = 64,
        n_features: int = PLANE_FEATURES,
    ):
        self.n_freqs = n_freqs
        self.grid = TriPlaneGrid(resolutions, n_features, bounds, rng)
        n_in = (
            self.grid.out_dim
            + positional_encoding_dim(3, n_freqs)
            + positional_encoding_dim(1, n_freqs)
        )
        self.sigma_net = MLP(n_in, [sigma_hidden], 1 + GEOMETRY_FEATURES, rng)
        self.color_net = MLP(GEOMETRY_FEATURES + 9, [color_hidden, color_hidden], 3, rng)

    def _sigma_out(self, xc, t, raw_pos=None) -> ad.Tensor:
        raw = xc if raw_pos is None else raw_pos
        feats = [triplane_encode(xc, self.grid), *_raw_inputs(self.grid, raw, t, self.n_freqs)]
        return self.sigma_net(ad.concat(feats))

    def query(self, xc, t, v, raw_pos=None) -> tuple[ad.Tensor, ad.Tensor]:
        """Density (P,) and RGB (P, 3) at canonical points ``xc`` viewed along ``v``.

        ``raw_pos`` replaces the canonical point in the concatenated positional
        encoding (used for the pre-warp variant).
        """
        out = self._sigma_out(xc, t, raw_pos)
        sigma = ad.softplus(out[:, 0])
        geo = out[:, 1:]
        rgb = ad.sigmoid(self.color_net(ad.concat([geo, sh_encode(v)])))
        return sigma, rgb

    def query_density(self, xc, t, raw_pos=None) -> ad.Tensor:
        return ad.softplus(self._sigma_out(xc, t, raw_pos)[:, 0])


class ProposalField(Module):
    """Density-only proposal network: one tri-plane scale + positional encodings.

    Queried at world points with the frame time, so it needs no deformation.
    """

    def __init__(self, rng, resolution: int, bounds, n_freqs: int = 5, hidden: int = 64,
                 n_features: int = PLANE_FEATURES):
        self.n_freqs = n_freqs
        self.grid = TriPlaneGrid((resolution,), n_features, bounds, rng)
        n_in = (
            self.grid.out_dim
            + positional_encoding_dim(3, n_freqs)
            + positional_encoding_dim(1, n_freqs)
        )
        self.net = MLP(n_in, [hidden], 1, rng)

    def density(self, x, t) -> ad.Tensor:
        feats = [triplane_encode(x, self.grid), *_raw_inputs(self.grid, x, t, self.n_freqs)]
        return ad.softplus(self.net(ad.concat(feats))[:, 0])
