"""Image-quality metrics and evaluation reports."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from . import autodiff as ad

PSNR_CAP = 100.0
SSIM_K1, SSIM_K2 = 0.01, 0.03
SSIM_WINDOW, SSIM_SIGMA = 11, 1.5


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; identical images report ``PSNR_CAP``."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    w = np.exp(-0.5 * (r / sigma) ** 2)
    return w / w.sum()


def _filter_valid(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    out = correlate1d(correlate1d(img, w, axis=0), w, axis=1)
    pad = (len(w) - 1) // 2
    return out[pad : img.shape[0] - pad, pad : img.shape[1] - pad]


def _gray(img: np.ndarray) -> np.ndarray:
    return img.mean(axis=-1) if img.ndim == 3 else img


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM over the fully-covered region of the 11x11 Gaussian window."""
    a, b = _pair(a, b)
    x, y = _gray(a), _gray(b)
    if x.ndim != 2 or min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    w = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = _filter_valid(x, w), _filter_valid(y, w)
    vx = _filter_valid(x * x, w) - mx * mx
    vy = _filter_valid(y * y, w) - my * my
    cxy = _filter_valid(x * y, w) - mx * my
    num = (2 * mx * my + c1) * (2 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    if np.array_equal(x, y):
        return 1.0
    return float(np.clip(np.mean(num / den), -1.0, 1.0))


def average2(mse: float, ssim_value: float) -> float:
    """Geometric mean of MSE and sqrt(1 - SSIM); lower is better."""
    return float(np.sqrt(mse * np.sqrt(max(0.0, 1.0 - ssim_value))))


def deformation_rmse(model, scene, timeline, n_points: int = 4096, seed: int = 0,
                     density_floor: float = 1.0) -> float:
    """RMSE of the learned displacement against the closed-form motion, over occupied points.

    Points are drawn in the model box at every timeline time and kept where the
    analytic frame-t density exceeds ``density_floor``; empty space has no
    identifiable deformation.
    """
    rng = np.random.default_rng(seed)
    b = model.cfg.bound
    errs = []
    for t in timeline.times:
        x = rng.uniform(-b, b, (n_points, 3))
        keep = scene.density(x, t) > density_floor
        if not keep.any():
            continue
        x = x[keep]
        est = model.deformation.estimate_at(x, np.full(len(x), t), timeline)
        errs.append(np.sum((ad.no_grad_value(est.dx) - scene.deformation(x, t)) ** 2, axis=1))
    if not errs:
        return float("nan")
    return float(np.sqrt(np.mean(np.concatenate(errs))))


@dataclass
class ImageMetrics:
    name: str
    time: float
    psnr: float
    ssim: float
    mse: float

    @property
    def average2(self) -> float:
        return average2(self.mse, self.ssim)


@dataclass
class MetricReport:
    images: list[ImageMetrics] = field(default_factory=list)
    deformation_rmse: float | None = None

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([m.psnr for m in self.images]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([m.ssim for m in self.images]))

    @property
    def mean_average2(self) -> float:
        return float(np.mean([m.average2 for m in self.images]))

    def to_text(self) -> str:
        """One line per image plus a mean row; fixed formatting so output is byte-stable."""
        lines = ["image\ttime\tpsnr\tssim\taverage2"]
        for m in self.images:
            lines.append(f"{m.name}\t{m.time:.6f}\t{m.psnr:.4f}\t{m.ssim:.6f}\t{m.average2:.6f}")
        lines.append(
            f"mean\t-\t{self.mean_psnr:.4f}\t{self.mean_ssim:.6f}\t{self.mean_average2:.6f}"
        )
        if self.deformation_rmse is not None:
            lines.append(f"deformation_rmse\t{self.deformation_rmse:.6f}")
        return "\n".join(lines) + "\n"


def evaluate(model, test, timeline, render_cfg, scene=None) -> MetricReport:
    """Render every test view at its timestamp and score it against the ground truth."""
    from .renderer import render_image

    report = MetricReport()
    for fr in test.frames:
        img = render_image(model, fr.pose, fr.time, test, timeline, render_cfg)
        report.images.append(
            ImageMetrics(fr.file_path, fr.time, psnr(img, fr.image), ssim(img, fr.image),
                         float(np.mean((img - fr.image) ** 2)))
        )
    if scene is not None:
        report.deformation_rmse = deformation_rmse(model, scene, timeline)
    return report
