"""Finite-difference checks of every parameter group on a few-ray pipeline."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .deformation import Timeline
from .model import DynamicField, ModelConfig
from .objectives import LAMBDA_TV, canonical_observation_loss, image_loss, proposal_loss, tv_loss
from .renderer import RayBundle, RenderConfig, generate_rays, render_rays
from .scenes import look_at

MICRO_MODEL = ModelConfig(
    plane_resolutions=(4, 8),
    proposal_resolution=4,
    plane_features=4,
    observation_hidden=16,
    sigma_hidden=16,
    color_hidden=16,
)


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    n_params: int
    seconds: float

    def line(self) -> str:
        return f"{self.name:<24} params={self.n_params:<4d} max_rel_err={self.max_rel_error:.3e}"


def _perturb(model: DynamicField, rng) -> None:
    # break the zero-initialised observation head so every path carries gradient
    for p in model.params:
        p.data += rng.normal(0.0, 0.05, p.shape)


def micro_pipeline(seed: int = 0, n_rays: int = 4, cfg: ModelConfig = MICRO_MODEL):
    """A tiny model, a 4-frame timeline and ``n_rays`` rays spread over its times."""
    rng = np.random.default_rng(seed)
    model = DynamicField(cfg, seed)
    _perturb(model, rng)
    timeline = Timeline([0.0, 1 / 3, 2 / 3, 1.0])
    pose = look_at((3.0, 1.0, 1.5))
    pixels = rng.integers(3, 9, (n_rays, 2))
    times = np.asarray(timeline.times)[np.arange(n_rays) % len(timeline)]
    rays = [generate_rays(pose, 0.7, 12, 12, pixels[i : i + 1], times[i], 2.0, 5.0)
            for i in range(n_rays)]
    bundle = RayBundle(*(np.concatenate([getattr(r, f) for r in rays])
                         for f in ("origins", "dirs", "near", "far", "times")))
    render_cfg = RenderConfig(n_proposal=8, n_samples=8)
    # freeze the resampled edges: resampling is not differentiated by design
    edges = render_rays(model, bundle, timeline, render_cfg).edges
    target = rng.uniform(0.0, 1.0, (n_rays, 3))
    return model, bundle, timeline, render_cfg, edges, target


def run_suite(seed: int = 0, max_entries: int = 12, step: float = 1e-6) -> list[GradCheckResult]:
    """Checks each loss term against the parameter groups it truly depends on.

    Terms that deliberately hold part of the graph fixed (the observation loss
    and the proposal loss) are checked against an equivalent function with the
    held quantity frozen at its base-point value.
    """
    model, rays, timeline, rcfg, edges, target = micro_pipeline(seed)
    grid = model.canonical.grid

    def render():
        return render_rays(model, rays, timeline, rcfg, edges=edges)

    def field_loss():
        out = render()
        return (
            image_loss(out.color, target)
            + canonical_observation_loss(out.estimate.dx, out.point_times)
            + LAMBDA_TV * tv_loss(grid)
        )

    base = render()
    frozen_dx = ad.no_grad_value(base.estimate.dx)
    # any fixed final weights will do; uniform ones keep most hinge terms active
    frozen_w = np.random.default_rng(seed + 2).uniform(0.0, 1.0, base.weights.shape)

    def kf_frozen():
        y = render().estimate.y
        return ad.mean(ad.sum_(ad.square(y - frozen_dx), axis=1))

    def prop_loss():
        out = render()
        return proposal_loss(out.proposal_weights, out.proposal_edges, frozen_w, out.edges)

    groups = {
        "deformation": [p for p in model.params if p.name.startswith("deformation.")],
        "canonical": [p for p in model.params if p.name.startswith("canonical.")],
        "proposal": [p for p in model.params if p.name.startswith("proposal.")],
    }
    checks = [
        ("image+co+tv/deformation", field_loss, groups["deformation"]),
        ("image+co+tv/canonical", field_loss, groups["canonical"]),
        ("kf/observation", kf_frozen, groups["deformation"]),
        ("proposal/proposal", prop_loss, groups["proposal"]),
    ]
    rng = np.random.default_rng(seed + 1)
    results = []
    for name, fn, params in checks:
        start = time.perf_counter()
        err = ad.grad_check(fn, params, step=step, max_entries=max_entries, rng=rng)
        results.append(GradCheckResult(name, err, len(params), time.perf_counter() - start))
    return results
