"""Ray generation, proposal-guided sampling and volumetric compositing."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .deformation import DeformationEstimate, Timeline


@dataclass
class RayBundle:
    origins: np.ndarray  # (R, 3)
    dirs: np.ndarray  # (R, 3), unit
    near: np.ndarray  # (R,)
    far: np.ndarray  # (R,)
    times: np.ndarray  # (R,)

    def __len__(self) -> int:
        return len(self.origins)

    def __post_init__(self):
        if np.any(self.near >= self.far):
            raise ValueError("every ray needs near < far")

    def subset(self, idx) -> "RayBundle":
        return RayBundle(
            self.origins[idx], self.dirs[idx], self.near[idx], self.far[idx], self.times[idx]
        )


def focal_length(camera_angle_x: float, width: int) -> float:
    return 0.5 * width / np.tan(0.5 * camera_angle_x)


def pixel_grid(height: int, width: int) -> np.ndarray:
    """All (row, col) pixel coordinates in row-major order."""
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    return np.stack([rows.ravel(), cols.ravel()], axis=1)


def generate_rays(
    pose,
    camera_angle_x: float,
    width: int,
    height: int,
    pixels=None,
    t: float = 0.0,
    near: float = 2.0,
    far: float = 6.0,
) -> RayBundle:
    """Camera-to-world ``pose`` (4x4), camera looks down -z with +y up.

    Pixel (row, col) maps to the camera direction
    ((col - W/2) / f, -(row - H/2) / f, -1).
    """
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (4, 4):
        raise ValueError(f"pose must be 4x4, got {pose.shape}")
    rot = pose[:3, :3]
    if abs(np.linalg.det(rot)) < 1e-9:
        raise ValueError("singular camera pose")
    if pixels is None:
        pixels = pixel_grid(height, width)
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    f = focal_length(camera_angle_x, width)
    cam = np.stack(
        [
            (pixels[:, 1] - 0.5 * width) / f,
            -(pixels[:, 0] - 0.5 * height) / f,
            -np.ones(len(pixels)),
        ],
        axis=1,
    )
    dirs = cam @ rot.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    n = len(pixels)
    return RayBundle(
        np.broadcast_to(pose[:3, 3], (n, 3)).copy(),
        dirs,
        np.full(n, float(near)),
        np.full(n, float(far)),
        np.full(n, float(t)),
    )


def sample_stratified(near, far, n: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """One sample per equal bin of [near, far]; bin midpoints when ``rng`` is None."""
    if n < 1:
        raise ValueError("need at least one sample")
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    offset = np.full((len(near), n), 0.5) if rng is None else rng.random((len(near), n))
    u = (np.arange(n) + offset) / n
    return near[:, None] + (far - near)[:, None] * u


def uniform_edges(near, far, n: int) -> np.ndarray:
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    return near[:, None] + (far - near)[:, None] * np.linspace(0.0, 1.0, n + 1)


def resample_from_weights(
    edges, weights, m: int, rng: np.random.Generator | None = None
) -> np.ndarray:
    """Inverse-transform sample ``m`` distances per ray from a piecewise-constant density.

    ``edges`` (R, n+1) bound the bins carrying ``weights`` (R, n). The draws are
    stratified in probability space (midpoints when ``rng`` is None) so the
    output is sorted along each ray. Rays whose weights are all zero sample
    uniformly.
    """
    edges = np.atleast_2d(np.asarray(edges, dtype=np.float64))
    w = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    n_rays, n_bins = w.shape
    total = w.sum(axis=1, keepdims=True)
    w = np.where(total > 0, w, 1.0)
    pdf = w / w.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((n_rays, 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0
    offset = np.full((n_rays, m), 0.5) if rng is None else rng.random((n_rays, m))
    u = (np.arange(m) + offset) / m
    # largest bin b with cdf[b] <= u
    b = (cdf[:, None, :] <= u[:, :, None]).sum(axis=2) - 1
    b = np.clip(b, 0, n_bins - 1)
    rows = np.arange(n_rays)[:, None]
    lo, mass = cdf[rows, b], pdf[rows, b]
    frac = np.where(mass > 0, (u - lo) / np.where(mass > 0, mass, 1.0), 0.0)
    frac = np.clip(frac, 0.0, 1.0)
    left = edges[rows, b]
    return left + frac * (edges[rows, b + 1] - left)


@dataclass
class Composite:
    color: ad.Tensor  # (R, 3)
    weights: ad.Tensor  # (R, K)
    transmittance: ad.Tensor  # (R, K), T_1 = 1
    final_transmittance: ad.Tensor  # (R,)


def render_weights(sigma, deltas) -> tuple[ad.Tensor, ad.Tensor, ad.Tensor]:
    """w_k = T_k (1 - exp(-sigma_k delta_k)); returns (weights, T, T_final)."""
    tau = ad.as_tensor(sigma) * np.asarray(deltas, dtype=np.float64)
    trans = ad.exp(-ad.cumsum(tau, exclusive=True))
    weights = trans * (-ad.expm1(-tau))
    final = ad.exp(-ad.sum_(tau, axis=-1))
    return weights, trans, final


def composite(sigma, rgb, deltas, background) -> Composite:
    """C = sum_k w_k c_k + T_final * background for (R, K) samples."""
    deltas = np.asarray(deltas, dtype=np.float64)
    if np.any(deltas <= 0):
        raise ValueError("segment lengths must be positive")
    weights, trans, final = render_weights(sigma, deltas)
    n_rays, n_samples = weights.shape
    w3 = ad.reshape(weights, (n_rays, n_samples, 1))
    bg = np.asarray(background, dtype=np.float64).reshape(1, 3)
    color = ad.sum_(w3 * rgb, axis=1) + ad.reshape(final, (n_rays, 1)) * bg
    return Composite(color, weights, trans, final)


@dataclass
class RenderConfig:
    n_proposal: int = 64
    n_samples: int = 64
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    # fraction of the mean proposal weight added to every bin before resampling
    proposal_padding: float = 0.05
    concat_raw: str = "postwarp"

    def __post_init__(self):
        if self.concat_raw not in ("postwarp", "prewarp"):
            raise ValueError(f"concat_raw must be 'postwarp' or 'prewarp', got {self.concat_raw!r}")


@dataclass
class RenderOutput:
    color: ad.Tensor
    weights: ad.Tensor
    edges: np.ndarray
    proposal_weights: ad.Tensor
    proposal_edges: np.ndarray
    estimate: DeformationEstimate
    point_times: np.ndarray
    extras: dict = field(default_factory=dict)


def render_rays(
    model,
    rays: RayBundle,
    timeline: Timeline,
    cfg: RenderConfig,
    rng: np.random.Generator | None = None,
    edges: np.ndarray | None = None,
) -> RenderOutput:
    """Proposal pass, importance resampling, deformation, canonical query, compositing.

    ``model`` supplies ``proposal``, ``deformation`` and ``canonical`` members.
    Jitter is drawn from ``rng``; without one the pass is deterministic. Passing
    ``edges`` (R, n_samples + 1) skips resampling, which makes the output a
    smooth function of every parameter (used by gradient checks).
    """
    n_rays = len(rays)
    o, d = rays.origins, rays.dirs

    prop_edges = uniform_edges(rays.near, rays.far, cfg.n_proposal)
    prop_s = sample_stratified(rays.near, rays.far, cfg.n_proposal, rng)
    prop_pts = (o[:, None, :] + prop_s[..., None] * d[:, None, :]).reshape(-1, 3)
    prop_t = np.repeat(rays.times, cfg.n_proposal)
    prop_sigma = ad.reshape(model.proposal.density(prop_pts, prop_t), (n_rays, cfg.n_proposal))
    prop_w, _, _ = render_weights(prop_sigma, np.diff(prop_edges, axis=1))

    if edges is None:
        guide = prop_w.data + cfg.proposal_padding * prop_w.data.mean(axis=1, keepdims=True)
        edges = resample_from_weights(prop_edges, guide + 1e-12, cfg.n_samples + 1, rng)
        edges = np.maximum.accumulate(edges, axis=1)
    elif edges.shape != (n_rays, cfg.n_samples + 1):
        raise ad.ShapeError(f"edges must be {(n_rays, cfg.n_samples + 1)}, got {edges.shape}")
    mids = 0.5 * (edges[:, 1:] + edges[:, :-1])
    deltas = np.maximum(np.diff(edges, axis=1), 1e-10)

    pts = (o[:, None, :] + mids[..., None] * d[:, None, :]).reshape(-1, 3)
    pt_t = np.repeat(rays.times, cfg.n_samples)
    view = np.repeat(d, cfg.n_samples, axis=0)
    est = model.deformation.estimate_at(pts, pt_t, timeline)
    canon = pts + est.dx
    raw = pts if cfg.concat_raw == "prewarp" else None
    sigma, rgb = model.canonical.query(canon, pt_t, view, raw_pos=raw)
    comp = composite(
        ad.reshape(sigma, (n_rays, cfg.n_samples)),
        ad.reshape(rgb, (n_rays, cfg.n_samples, 3)),
        deltas,
        cfg.background,
    )
    return RenderOutput(
        comp.color, comp.weights, edges, prop_w, prop_edges, est, pt_t,
        extras={"final_transmittance": comp.final_transmittance},
    )


def render_image(
    model, pose, t: float, camera, timeline: Timeline, cfg: RenderConfig, chunk: int = 2048
) -> np.ndarray:
    """Deterministic full-frame render; ``camera`` has camera_angle_x, width, height, near, far."""
    rays = generate_rays(
        pose, camera.camera_angle_x, camera.width, camera.height, None, t, camera.near, camera.far
    )
    out = np.empty((len(rays), 3))
    for start in range(0, len(rays), chunk):
        idx = slice(start, start + chunk)
        out[idx] = render_rays(model, rays.subset(idx), timeline, cfg).color.data
    return out.reshape(camera.height, camera.width, 3)
