"""Optimization loop: Adam, chronological frame release, checkpoints, ablation switches."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .deformation import Timeline
from .model import DynamicField, ModelConfig
from .objectives import LossFlags, LossReport, total_loss
from .renderer import RayBundle, RenderConfig, generate_rays, render_rays
from .scenes import SceneDataset

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"KFCKPT01\n"


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_good: str | None):
        super().__init__(f"non-finite loss at step {step}; last good checkpoint: {last_good}")
        self.step = step
        self.last_good = last_good


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 256
    total_steps: int = 1500
    release_steps: int = 375
    seed: int = 0
    enable_prediction_branch: bool = True
    enable_l_kf: bool = True
    enable_l_co: bool = True
    # gradient flow through the history observations destabilises toy training
    stopgrad_prediction: bool = True
    concat_raw: str = "postwarp"
    co_norm: str = "l2sq"
    plane_resolutions: tuple[int, ...] = (8, 16, 32, 64)
    proposal_resolution: int = 64
    bound: float = 1.5
    n_proposal: int = 64
    n_samples: int = 32
    checkpoint_every: int = 500
    log_every: int = 1
    dataset: str = ""
    out: str = ""

    def __post_init__(self):
        self.plane_resolutions = tuple(int(r) for r in self.plane_resolutions)
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.total_steps < 0 or self.release_steps < 0:
            raise ConfigError("step counts must be non-negative")
        if self.release_steps > self.total_steps:
            raise ConfigError(
                f"release_steps ({self.release_steps}) exceeds total_steps ({self.total_steps})"
            )
        if self.concat_raw not in ("postwarp", "prewarp"):
            raise ConfigError(f"concat_raw must be postwarp or prewarp, got {self.concat_raw!r}")
        if self.co_norm not in ("l2sq", "l1"):
            raise ConfigError(f"co_norm must be l2sq or l1, got {self.co_norm!r}")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            plane_resolutions=self.plane_resolutions,
            proposal_resolution=self.proposal_resolution,
            bound=self.bound,
            enable_prediction_branch=self.enable_prediction_branch,
            stopgrad_prediction=self.stopgrad_prediction,
        )

    def render_config(self, background=(1.0, 1.0, 1.0)) -> RenderConfig:
        return RenderConfig(
            n_proposal=self.n_proposal,
            n_samples=self.n_samples,
            background=tuple(background),
            concat_raw=self.concat_raw,
        )

    def loss_flags(self) -> LossFlags:
        return LossFlags(self.enable_l_kf, self.enable_l_co, self.co_norm)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["plane_resolutions"] = list(self.plane_resolutions)
        return d

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("dataset"), d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _parse_value(name: str, raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{name}: expected an integer, got {raw!r}") from None
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{name}: expected a number, got {raw!r}") from None
    if isinstance(default, tuple):
        try:
            return tuple(int(v) for v in raw.replace(",", " ").split())
        except ValueError:
            raise ConfigError(f"{name}: expected a list of integers, got {raw!r}") from None
    return raw


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment; unknown keys are rejected."""
    base = base or TrainConfig()
    known = {f.name: getattr(base, f.name) for f in fields(TrainConfig)}
    updates = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        updates[key] = _parse_value(key, value, known[key])
    return replace(base, **updates)


def load_config(path) -> TrainConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{path}: config file not found")
    return parse_config(path.read_text())


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for key, value in cfg.to_dict().items():
        if isinstance(value, list):
            value = " ".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = str(value).lower()
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def release_schedule(step: int, n_frames: int, release_steps: int) -> int:
    """Frames [0, allowed) are sampleable; unlocks linearly, saturating at ``release_steps``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if release_steps <= 0:
        return n_frames
    return min(n_frames, 1 + (step * n_frames) // release_steps)


class Adam:
    def __init__(self, params, lr: float = 1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.t = 0

    def step(self, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1**self.t
        corr2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = grads.get(p)
            if g is None:
                g = np.zeros(p.shape)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if self.lr != 0.0:
                p.data -= self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)


@dataclass
class TrainingRays:
    """Every pixel ray of a dataset, flattened, with its colour and frame index."""

    origins: np.ndarray
    dirs: np.ndarray
    colors: np.ndarray
    times: np.ndarray
    frame_index: np.ndarray
    near: float
    far: float

    @classmethod
    def from_dataset(cls, ds: SceneDataset, timeline: Timeline) -> "TrainingRays":
        parts = []
        for fr in ds.frames:
            rays = generate_rays(
                fr.pose, ds.camera_angle_x, ds.width, ds.height, None, fr.time, ds.near, ds.far
            )
            parts.append((rays.origins, rays.dirs, fr.image.reshape(-1, 3), rays.times))
        o, d, c, t = (np.concatenate(x) for x in zip(*parts))
        return cls(o, d, c, t, timeline.index_of(t), ds.near, ds.far)

    def bundle(self, idx) -> RayBundle:
        n = len(idx)
        return RayBundle(
            self.origins[idx], self.dirs[idx], np.full(n, self.near), np.full(n, self.far),
            self.times[idx],
        )


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, step]))


def scene_meta(ds: SceneDataset, timeline: Timeline) -> dict:
    return {
        "camera_angle_x": ds.camera_angle_x,
        "width": ds.width,
        "height": ds.height,
        "near": ds.near,
        "far": ds.far,
        "background": list(ds.background),
        "timeline": timeline.times.tolist(),
    }


class Trainer:
    def __init__(self, cfg: TrainConfig, train: SceneDataset, model: DynamicField | None = None):
        self.cfg = cfg
        self.data = train
        self.timeline = train.timeline
        self.model = model or DynamicField(cfg.model_config(), cfg.seed)
        self.optimizer = Adam(self.model.params, cfg.lr)
        self.render_cfg = cfg.render_config(train.background)
        self.flags = cfg.loss_flags()
        self.rays = TrainingRays.from_dataset(train, self.timeline)
        self.step = 0
        self.last_checkpoint: str | None = None

    def sample_batch(self, rng) -> np.ndarray:
        allowed = release_schedule(self.step, len(self.timeline), self.cfg.release_steps)
        pool = np.flatnonzero(self.rays.frame_index < allowed)
        return np.sort(rng.choice(pool, size=self.cfg.batch_size, replace=True))

    def train_step(self, idx: np.ndarray | None = None) -> LossReport:
        """Render a batch, backpropagate the total loss and apply one Adam update."""
        rng = step_rng(self.cfg.seed, self.step)
        if idx is None:
            idx = self.sample_batch(rng)
        rays = self.rays.bundle(idx)
        with ad.Tape() as tape:
            out = render_rays(self.model, rays, self.timeline, self.render_cfg, rng)
            total, report = total_loss(out, self.rays.colors[idx], self.model.canonical.grid,
                                       self.flags)
            if not math.isfinite(report.total):
                raise TrainingDiverged(self.step, self.last_checkpoint)
            grads = tape.backward(total)
        self.optimizer.step(grads)
        self.step += 1
        return report

    def save(self, path) -> str:
        save_checkpoint(path, self.model, self.optimizer, self.cfg, self.step,
                        scene_meta(self.data, self.timeline))
        self.last_checkpoint = str(path)
        return self.last_checkpoint

    def restore(self, path) -> None:
        ckpt = load_checkpoint(path)
        ckpt.apply(self.model, self.optimizer)
        self.step = ckpt.step

    def run(self, out_dir=None, steps: int | None = None, progress: bool = False) -> list[LossReport]:
        """Train until ``total_steps`` (or ``steps`` more); logs one JSON line per step."""
        out_dir = Path(out_dir) if out_dir else None
        if out_dir:
            out_dir.mkdir(parents=True, exist_ok=True)
        end = self.cfg.total_steps if steps is None else self.step + steps
        reports = []
        log_file = open(out_dir / "loss_log.jsonl", "a") if out_dir else None
        start = time.time()
        try:
            while self.step < end:
                report = self.train_step()
                reports.append(report)
                if log_file and self.step % self.cfg.log_every == 0:
                    log_file.write(report.log_line(self.step) + "\n")
                if progress and self.step % 100 == 0:
                    log.info("step %d loss %.5f (%.1fs)", self.step, report.total,
                             time.time() - start)
                if out_dir and self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
                    self.save(out_dir / "checkpoint.bin")
        finally:
            if log_file:
                log_file.close()
        if out_dir:
            self.save(out_dir / "checkpoint.bin")
        return reports


# -- checkpoints ----------------------------------------------------------------


@dataclass
class Checkpoint:
    manifest: dict
    values: np.ndarray

    @property
    def step(self) -> int:
        return int(self.manifest["step"])

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.manifest["model"])

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.manifest["config"])

    @property
    def scene(self) -> dict:
        return self.manifest.get("scene", {})

    def build_model(self) -> DynamicField:
        model = DynamicField(self.model_config, 0)
        self.apply(model)
        return model

    def apply(self, model: DynamicField, optimizer: Adam | None = None) -> None:
        declared = [(n, tuple(s)) for n, s in self.manifest["params"]]
        actual = [(p.name, p.shape) for p in model.params]
        if declared != actual:
            raise CheckpointError("checkpoint parameters do not match the model architecture")
        sizes = [int(np.prod(s)) for _, s in declared]
        n = sum(sizes)
        chunks = np.split(self.values, np.cumsum([n, n]))
        for block, target in zip(chunks, ("params", "m", "v")):
            offsets = np.cumsum([0] + sizes)
            for k, (p, size) in enumerate(zip(model.params, sizes)):
                arr = block[offsets[k] : offsets[k] + size].reshape(p.shape)
                if target == "params":
                    p.data[...] = arr
                elif optimizer is not None:
                    getattr(optimizer, target)[k][...] = arr
        if optimizer is not None:
            optimizer.t = int(self.manifest["optimizer_t"])


def save_checkpoint(path, model: DynamicField, optimizer: Adam | None, cfg: TrainConfig,
                    step: int, scene: dict | None = None) -> None:
    """Magic line, one-line JSON manifest, then little-endian float64 params, Adam m, Adam v."""
    params = model.params
    zeros = [np.zeros(p.shape) for p in params]
    m = optimizer.m if optimizer else zeros
    v = optimizer.v if optimizer else zeros
    block = np.concatenate(
        [a.reshape(-1) for a in [p.data for p in params] + list(m) + list(v)]
    ).astype("<f8").tobytes()
    manifest = {
        "format": 1,
        "model": model.cfg.to_dict(),
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "step": int(step),
        "optimizer_t": int(optimizer.t) if optimizer else 0,
        "params": [[p.name, list(p.shape)] for p in params],
        "n_bytes": len(block),
        "sha256": hashlib.sha256(block).hexdigest(),
        "scene": scene or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(manifest).encode() + b"\n")
        fh.write(block)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"{path}: checkpoint not found")
    raw = path.read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    head_end = raw.find(b"\n", len(CHECKPOINT_MAGIC))
    if head_end < 0:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[len(CHECKPOINT_MAGIC) : head_end])
    except json.JSONDecodeError:
        raise CheckpointError(f"{path}: corrupt manifest") from None
    block = raw[head_end + 1 :]
    if len(block) != manifest.get("n_bytes"):
        raise CheckpointError(
            f"{path}: truncated parameter block ({len(block)} of {manifest.get('n_bytes')} bytes)"
        )
    if hashlib.sha256(block).hexdigest() != manifest.get("sha256"):
        raise CheckpointError(f"{path}: parameter block checksum mismatch")
    return Checkpoint(manifest, np.frombuffer(block, dtype="<f8").astype(np.float64))
