"""The full dynamic scene model: deformation field + canonical field + proposal network."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .canonical import CanonicalField, ProposalField
from .deformation import DeformationField
from .encoders import FULL_PLANE_RESOLUTIONS
from .nn import Module, name_parameters


@dataclass(frozen=True)
class ModelConfig:
    plane_resolutions: tuple[int, ...] = FULL_PLANE_RESOLUTIONS
    proposal_resolution: int = 128
    plane_features: int = 32
    bound: float = 1.5  # canonical box is [-bound, bound]^3
    n_freqs: int = 5
    observation_hidden: int = 128
    sigma_hidden: int = 64
    color_hidden: int = 64
    enable_prediction_branch: bool = True
    stopgrad_prediction: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["plane_resolutions"] = list(self.plane_resolutions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["plane_resolutions"] = tuple(d["plane_resolutions"])
        return cls(**d)


class DynamicField(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        ss = np.random.SeedSequence([seed, 7919])
        r_def, r_can, r_prop = (np.random.default_rng(s) for s in ss.spawn(3))
        lo, hi = (-cfg.bound,) * 3, (cfg.bound,) * 3
        self.deformation = DeformationField(
            r_def,
            cfg.n_freqs,
            cfg.observation_hidden,
            (np.array(lo), np.array(hi)),
            cfg.enable_prediction_branch,
            cfg.stopgrad_prediction,
        )
        self.canonical = CanonicalField(
            r_can, cfg.plane_resolutions, (lo, hi), cfg.n_freqs, cfg.sigma_hidden,
            cfg.color_hidden, cfg.plane_features,
        )
        self.proposal = ProposalField(
            r_prop, cfg.proposal_resolution, (lo, hi), cfg.n_freqs, cfg.sigma_hidden,
            cfg.plane_features,
        )
        self.params = name_parameters(self)

    def named_parameters(self, prefix: str = ""):
        # ``params`` caches the same objects; skip it to keep the declared order unique
        for name, p in super().named_parameters(prefix):
            if not name.startswith(prefix + "params."):
                yield name, p

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params))
