"""PSNR and SSIM on luminance planes, and benchmark runs over image folders."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import correlate1d

from .images import ImagePlane, bicubic_resize, list_images, load_luminance, modcrop
from .models import SRModel, infer

PEAK = 255.0


def _plane(x) -> np.ndarray:
    v = x.values if isinstance(x, ImagePlane) else x
    return np.asarray(v, dtype=np.float64)


def _pair(a, b, shave: int = 0):
    a, b = _plane(a), _plane(b)
    if a.shape != b.shape:
        raise ValueError(f"image dims differ: {a.shape} vs {b.shape}")
    if shave < 0:
        raise ValueError("shave must be >= 0")
    if shave:
        if min(a.shape) <= 2 * shave:
            raise ValueError(f"shave {shave} leaves nothing of a {a.shape} image")
        a, b = a[shave:-shave, shave:-shave], b[shave:-shave, shave:-shave]
    return a, b


def psnr(a, b, shave: int = 0) -> float:
    """Peak signal-to-noise ratio in dB for byte-range planes; ``inf`` if identical."""
    a, b = _pair(a, b, shave)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(PEAK * PEAK / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    r = len(g) // 2
    out = correlate1d(correlate1d(x, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    return out[r: x.shape[0] - r, r: x.shape[1] - r]


def ssim(a, b, shave: int = 0, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity over all fully overlapping windows.

    Local statistics use a normalized Gaussian window, as in the reference
    implementation of Wang et al.
    """
    a, b = _pair(a, b, shave)
    if min(a.shape) < window:
        raise ValueError(f"image {a.shape} smaller than the {window}x{window} window")
    g = gaussian_window(window, sigma)
    c1, c2 = (k1 * PEAK) ** 2, (k2 * PEAK) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# --------------------------------------------------------------------------
# benchmark


@dataclass
class MetricReport:
    method: str
    scale: int
    shave: int
    images: list[str] = field(default_factory=list)
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)

    def add(self, name: str, p: float, s: float):
        self.images.append(name)
        self.psnr.append(p)
        self.ssim.append(s)

    @property
    def n_infinite(self) -> int:
        return sum(math.isinf(p) for p in self.psnr)

    @property
    def mean_psnr(self) -> float:
        finite = [p for p in self.psnr if math.isfinite(p)]
        return float(np.mean(finite)) if finite else math.inf

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "image", "psnr_db", "ssim"])
        for name, p, s in zip(self.images, self.psnr, self.ssim):
            w.writerow([self.method, name, "inf" if math.isinf(p) else f"{p:.4f}", f"{s:.6f}"])
        return buf.getvalue()

    def table(self) -> str:
        header = f"# method={self.method} scale=x{self.scale} shave={self.shave}"
        width = max([len("average")] + [len(n) for n in self.images])
        lines = [header, f"{'image':<{width}}  {'PSNR (dB)':>10}  {'SSIM':>7}"]
        for name, p, s in zip(self.images, self.psnr, self.ssim):
            pv = "inf" if math.isinf(p) else f"{p:.2f}"
            lines.append(f"{name:<{width}}  {pv:>10}  {s:>7.4f}")
        lines.append(f"{'average':<{width}}  {self.mean_psnr:>10.2f}  {self.mean_ssim:>7.4f}")
        if self.n_infinite:
            lines.append(f"* {self.n_infinite} identical image(s) with infinite PSNR excluded from the PSNR average")
        return "\n".join(lines)


def super_resolve(lr: np.ndarray, scale: int, model: SRModel | None) -> np.ndarray:
    """Upscale a byte-range luminance plane with ``model`` or plain bicubic."""
    if model is None:
        return bicubic_resize(lr, scale=scale)
    if model.scale != scale:
        raise ValueError(f"model is x{model.scale}, benchmark is x{scale}")
    return infer(ImagePlane(lr), model).values


def run_benchmark(model: SRModel | None, test_dir, scale: int, shave: int | None = None,
                  method: str | None = None) -> MetricReport:
    """Evaluate ``model`` (bicubic when None) on every image in ``test_dir``.

    Each HR image is reduced to its luminance, cropped to a multiple of the
    scale and downsampled with anti-aliased bicubic to get the input.  The
    super-resolved output is rounded to integers like a saved image before
    PSNR and SSIM are computed.
    """
    paths = list_images(test_dir)
    if not paths:
        raise FileNotFoundError(f"no test images in {test_dir}")
    shave = scale if shave is None else shave
    method = method or ("bicubic" if model is None else model.kind)
    report = MetricReport(method, scale, shave)
    for path in paths:
        hr = modcrop(load_luminance(path), scale)
        lr = bicubic_resize(hr, scale=1.0 / scale)
        sr = np.clip(np.floor(super_resolve(lr, scale, model) + 0.5), 0, 255)
        report.add(path.name, psnr(sr, hr, shave), ssim(sr, hr, shave))
    return report


def write_report(report: MetricReport, out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{report.method}_x{report.scale}"
    csv_path, txt_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.txt"
    csv_path.write_text(report.to_csv())
    txt_path.write_text(report.table() + "\n")
    return csv_path, txt_path
