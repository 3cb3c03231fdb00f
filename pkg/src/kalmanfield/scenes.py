"""Synthetic-format dataset I/O and procedural Gaussian-blob scenes with analytic ground truth.

On-disk layout (one directory per scene)::

    transforms_train.json / transforms_test.json
        {"camera_angle_x": float, "near": float, "far": float,
         "frames": [{"file_path": "./train/r_000", "time": float,
                     "transform_matrix": [[...] x 4]}, ...]}
    train/r_000.png ...   8-bit RGBA, composited onto the background at load
    scene.json            analytic scene parameters (procedural scenes only)
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .deformation import Timeline
from .renderer import composite, focal_length, generate_rays, uniform_edges

DEFAULT_NEAR, DEFAULT_FAR = 2.0, 6.0


class DatasetError(ValueError):
    """A dataset file is missing or malformed."""


@dataclass
class Frame:
    file_path: str
    pose: np.ndarray  # (4, 4) camera-to-world
    time: float
    rgba: np.ndarray  # (H, W, 4) uint8 as stored
    image: np.ndarray  # (H, W, 3) float, composited onto the background


@dataclass
class SceneDataset:
    frames: list[Frame]
    camera_angle_x: float
    width: int
    height: int
    near: float = DEFAULT_NEAR
    far: float = DEFAULT_FAR
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def focal(self) -> float:
        return focal_length(self.camera_angle_x, self.width)

    @property
    def times(self) -> np.ndarray:
        return np.array([f.time for f in self.frames])

    @property
    def timeline(self) -> Timeline:
        return Timeline(self.times)

    def __len__(self) -> int:
        return len(self.frames)


# -- loading ----------------------------------------------------------------


def composite_rgba(rgba: np.ndarray, background) -> np.ndarray:
    arr = rgba.astype(np.float64) / 255.0
    alpha = arr[..., 3:4]
    return arr[..., :3] * alpha + np.asarray(background, dtype=np.float64) * (1.0 - alpha)


def _read_png(path: Path) -> np.ndarray:
    if not path.is_file():
        raise DatasetError(f"{path}: image file not found")
    with Image.open(path) as im:
        return np.array(im.convert("RGBA"), dtype=np.uint8)


def load_split(directory, split: str = "train", background=(1.0, 1.0, 1.0)) -> SceneDataset:
    """Parse ``transforms_{split}.json`` and its images; frames come back sorted by time."""
    directory = Path(directory)
    path = directory / f"transforms_{split}.json"
    if not path.is_file():
        raise DatasetError(f"{path}: file not found")
    try:
        meta = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: invalid JSON ({exc})") from None
    if "camera_angle_x" not in meta:
        raise DatasetError(f"{path}: missing field 'camera_angle_x'")
    if not isinstance(meta.get("frames"), list):
        raise DatasetError(f"{path}: missing field 'frames'")
    frames = []
    for k, fr in enumerate(meta["frames"]):
        where = f"{path}: frames[{k}]"
        for key in ("file_path", "time", "transform_matrix"):
            if key not in fr:
                raise DatasetError(f"{where}: missing field '{key}'")
        try:
            pose = np.array(fr["transform_matrix"], dtype=np.float64)
        except (TypeError, ValueError):
            raise DatasetError(f"{where}: field 'transform_matrix' is not numeric") from None
        if pose.shape != (4, 4):
            raise DatasetError(f"{where}: field 'transform_matrix' must be 4x4, got {pose.shape}")
        t = fr["time"]
        if not isinstance(t, (int, float)) or not 0.0 <= t <= 1.0:
            raise DatasetError(f"{where}: field 'time' must be a number in [0, 1], got {t!r}")
        rgba = _read_png(directory / (fr["file_path"] + ".png"))
        frames.append(Frame(fr["file_path"], pose, float(t), rgba, composite_rgba(rgba, background)))
    if not frames:
        raise DatasetError(f"{path}: no frames")
    shapes = {f.rgba.shape for f in frames}
    if len(shapes) != 1:
        raise DatasetError(f"{path}: images differ in size {sorted(shapes)}")
    frames.sort(key=lambda f: f.time)
    height, width = frames[0].rgba.shape[:2]
    return SceneDataset(
        frames,
        float(meta["camera_angle_x"]),
        width,
        height,
        float(meta.get("near", DEFAULT_NEAR)),
        float(meta.get("far", DEFAULT_FAR)),
        tuple(float(b) for b in background),
    )


def load_dataset(directory, background=(1.0, 1.0, 1.0)) -> tuple[SceneDataset, SceneDataset]:
    """Train and test splits of a synthetic-format scene directory."""
    return (
        load_split(directory, "train", background),
        load_split(directory, "test", background),
    )


def write_split(dataset: SceneDataset, directory, split: str) -> None:
    directory = Path(directory)
    frames = []
    for fr in dataset.frames:
        img_path = directory / (fr.file_path + ".png")
        img_path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(fr.rgba, mode="RGBA").save(img_path)
        frames.append(
            {
                "file_path": fr.file_path,
                "time": fr.time,
                "transform_matrix": fr.pose.tolist(),
            }
        )
    meta = {
        "camera_angle_x": dataset.camera_angle_x,
        "near": dataset.near,
        "far": dataset.far,
        "frames": frames,
    }
    (directory / f"transforms_{split}.json").write_text(json.dumps(meta, indent=2))


# -- analytic scenes -----------------------------------------------------------


def _rot_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    z, o = np.zeros_like(angle), np.ones_like(angle)
    return np.stack([np.stack([c, -s, z], -1), np.stack([s, c, z], -1), np.stack([z, z, o], -1)], -2)


@dataclass
class Blob:
    center: tuple[float, float, float]
    radius: float
    peak: float
    color: tuple[float, float, float]


@dataclass
class AnalyticScene:
    """Gaussian density blobs in a canonical frame plus a closed-form motion.

    ``deformation(x, t)`` maps frame-t points to canonical space, so the frame-t
    density at x equals the canonical density at x + deformation(x, t).
    """

    blobs: list[Blob]
    motion: str = "translate"  # translate | rotate | sine
    velocity: tuple[float, float, float] = (0.8, 0.0, 0.0)  # translate, units per unit time
    angular_velocity: float = 1.0  # rotate, radians per unit time about +z
    amplitude: tuple[float, float, float] = (0.4, 0.0, 0.0)  # sine, displacement amplitude
    color_variation: float = 0.2

    def __post_init__(self):
        if self.motion not in ("translate", "rotate", "sine"):
            raise ValueError(f"unknown motion kind {self.motion!r}")
        self.blobs = [b if isinstance(b, Blob) else Blob(**b) for b in self.blobs]
        # JSON round trips hand back lists; keep the tuple form so scenes compare equal
        for b in self.blobs:
            b.center, b.color = tuple(b.center), tuple(b.color)
        self.velocity = tuple(self.velocity)
        self.amplitude = tuple(self.amplitude)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AnalyticScene":
        return cls(**d)

    def deformation(self, x, t) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), x.shape[:-1])[..., None]
        if self.motion == "translate":
            return np.broadcast_to(-np.asarray(self.velocity) * t, x.shape).copy()
        if self.motion == "sine":
            return np.broadcast_to(-np.asarray(self.amplitude) * np.sin(2 * np.pi * t), x.shape).copy()
        rot = _rot_z(-self.angular_velocity * t[..., 0])
        return np.einsum("...ij,...j->...i", rot, x) - x

    def canonical_density(self, xc) -> np.ndarray:
        xc = np.asarray(xc, dtype=np.float64)
        sigma = np.zeros(xc.shape[:-1])
        for b in self.blobs:
            r2 = np.sum((xc - np.asarray(b.center)) ** 2, axis=-1)
            sigma += b.peak * np.exp(-0.5 * r2 / b.radius**2)
        return sigma

    def canonical_color(self, xc) -> np.ndarray:
        xc = np.asarray(xc, dtype=np.float64)
        num = np.zeros(xc.shape)
        den = np.zeros(xc.shape[:-1] + (1,))
        for b in self.blobs:
            offset = (xc - np.asarray(b.center)) / b.radius
            r2 = np.sum(offset**2, axis=-1, keepdims=True)
            w = b.peak * np.exp(-0.5 * r2)
            c = np.clip(np.asarray(b.color) + self.color_variation * np.tanh(offset), 0.0, 1.0)
            num += w * c
            den += w
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)

    def density(self, x, t) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return self.canonical_density(x + self.deformation(x, t))

    def color(self, x, t) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return self.canonical_color(x + self.deformation(x, t))


def render_analytic(
    scene: AnalyticScene,
    pose,
    t: float,
    camera_angle_x: float,
    width: int,
    height: int,
    near: float = DEFAULT_NEAR,
    far: float = DEFAULT_FAR,
    n_samples: int = 1024,
    background=(1.0, 1.0, 1.0),
    chunk: int = 256,
) -> tuple[np.ndarray, np.ndarray]:
    """Dense midpoint quadrature of the closed-form fields -> (image (H, W, 3), alpha (H, W))."""
    rays = generate_rays(pose, camera_angle_x, width, height, None, t, near, far)
    image = np.empty((len(rays), 3))
    alpha = np.empty(len(rays))
    for start in range(0, len(rays), chunk):
        sub = rays.subset(slice(start, start + chunk))
        edges = uniform_edges(sub.near, sub.far, n_samples)
        mids = 0.5 * (edges[:, 1:] + edges[:, :-1])
        pts = sub.origins[:, None, :] + mids[..., None] * sub.dirs[:, None, :]
        sigma = scene.density(pts, t)
        rgb = scene.color(pts, t)
        comp = composite(sigma, rgb, np.diff(edges, axis=1), background)
        image[start : start + chunk] = comp.color.data
        alpha[start : start + chunk] = 1.0 - comp.final_transmittance.data
    return image.reshape(height, width, 3), alpha.reshape(height, width)


def look_at(position, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world matrix for a camera at ``position`` looking at ``target`` (-z forward)."""
    position = np.asarray(position, dtype=np.float64)
    back = position - np.asarray(target, dtype=np.float64)
    back /= np.linalg.norm(back)
    right = np.cross(np.asarray(up, dtype=np.float64), back)
    right /= np.linalg.norm(right)
    cam_up = np.cross(back, right)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = right, cam_up, back, position
    return pose


def orbit_poses(n: int, radius: float, elevation_deg: float = 20.0) -> list[np.ndarray]:
    out = []
    for k in range(n):
        az = 2 * np.pi * k / n
        el = np.deg2rad(elevation_deg)
        pos = radius * np.array([np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)])
        out.append(look_at(pos))
    return out


@dataclass
class SceneConfig:
    n_frames: int = 8
    width: int = 40
    height: int = 40
    n_train: int = 20
    n_test: int = 4
    motion: str = "translate"
    n_blobs: int = 1
    radius: float = 0.25
    peak_density: float = 40.0
    speed: float = 0.8
    camera_radius: float = 4.0
    camera_angle_x: float = 0.6911112
    near: float = DEFAULT_NEAR
    far: float = DEFAULT_FAR
    quadrature: int = 1024
    seed: int = 0
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    blobs: list = field(default_factory=list)  # explicit blobs override the defaults

    def __post_init__(self):
        if self.n_frames < 3:
            raise ValueError("a scene needs at least 3 frames")


def default_scene(cfg: SceneConfig) -> AnalyticScene:
    if cfg.blobs:
        blobs = [b if isinstance(b, Blob) else Blob(**b) for b in cfg.blobs]
    else:
        palette = [(0.85, 0.3, 0.2), (0.2, 0.45, 0.85)]
        starts = [(-0.5 * cfg.speed, 0.0, 0.0), (0.0, 0.5, 0.3)]
        blobs = [
            Blob(starts[k], cfg.radius, cfg.peak_density, palette[k]) for k in range(cfg.n_blobs)
        ]
    speed = cfg.speed
    return AnalyticScene(
        blobs,
        cfg.motion,
        velocity=(speed, 0.0, 0.0),
        angular_velocity=2.0 * speed,
        amplitude=(0.5 * speed, 0.0, 0.0),
    )


def _random_poses(rng, n: int, radius: float) -> list[np.ndarray]:
    poses = []
    for _ in range(n):
        az = rng.uniform(0, 2 * np.pi)
        el = rng.uniform(np.deg2rad(-10), np.deg2rad(60))
        pos = radius * np.array([np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)])
        poses.append(look_at(pos))
    return poses


def _to_rgba(image: np.ndarray, alpha: np.ndarray, background) -> np.ndarray:
    # un-composite so that load-time compositing reproduces the rendered image
    bg = np.asarray(background, dtype=np.float64)
    a = alpha[..., None]
    obj = image - (1.0 - a) * bg
    rgb = np.where(a > 1e-8, obj / np.maximum(a, 1e-8), 0.0)
    rgba = np.concatenate([np.clip(rgb, 0, 1), np.clip(a, 0, 1)], axis=-1)
    return np.round(rgba * 255.0).astype(np.uint8)


def generate_blob_scene(cfg: SceneConfig, out_dir=None):
    """Render a procedural dataset; writes it when ``out_dir`` is given.

    Returns ((train, test) datasets, analytic scene).
    """
    scene = default_scene(cfg)
    rng = np.random.default_rng(cfg.seed)
    times = np.linspace(0.0, 1.0, cfg.n_frames)
    train_idx = (np.arange(cfg.n_train) * cfg.n_frames) // cfg.n_train
    test_idx = np.round(np.linspace(0, cfg.n_frames - 1, cfg.n_test)).astype(int)
    splits = {}
    for split, idx in (("train", train_idx), ("test", test_idx)):
        poses = _random_poses(rng, len(idx), cfg.camera_radius)
        frames = []
        for k, (ti, pose) in enumerate(zip(idx, poses)):
            t = float(times[ti])
            image, alpha = render_analytic(
                scene, pose, t, cfg.camera_angle_x, cfg.width, cfg.height,
                cfg.near, cfg.far, cfg.quadrature, cfg.background,
            )
            rgba = _to_rgba(image, alpha, cfg.background)
            frames.append(
                Frame(f"./{split}/r_{k:03d}", pose, t, rgba, composite_rgba(rgba, cfg.background))
            )
        splits[split] = SceneDataset(
            frames, cfg.camera_angle_x, cfg.width, cfg.height, cfg.near, cfg.far,
            tuple(cfg.background),
        )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for split, ds in splits.items():
            write_split(ds, out_dir, split)
        (out_dir / "scene.json").write_text(json.dumps(scene.to_dict(), indent=2))
    return (splits["train"], splits["test"]), scene


def load_analytic_scene(directory) -> AnalyticScene | None:
    path = Path(directory) / "scene.json"
    if not path.is_file():
        return None
    return AnalyticScene.from_dict(json.loads(path.read_text()))
