"""SSIM / PSNR against the source image, and a mean/std baseline transfer."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import colorspace
from .errors import DimensionMismatch, ImageTooSmall
from .imageio import RgbImage

WIN_SIZE = 11
WIN_SIGMA = 1.5
C1 = (0.01 * 255) ** 2
C2 = (0.03 * 255) ** 2
LUMA = (0.299, 0.587, 0.114)


def _check_same(a: RgbImage, b: RgbImage) -> None:
    if (a.width, a.height) != (b.width, b.height):
        raise DimensionMismatch(
            f"image sizes differ: {a.width}x{a.height} vs {b.width}x{b.height}"
        )


def psnr(a: RgbImage, b: RgbImage) -> float:
    """PSNR in dB over all RGB samples; ``math.inf`` for identical images."""
    _check_same(a, b)
    diff = a.data.astype(np.int64) - b.data.astype(np.int64)
    sse = int(np.sum(diff * diff))
    if sse == 0:
        return math.inf
    mse = sse / diff.size
    return 10.0 * math.log10(255.0**2 / mse)


def gaussian_window(size: int = WIN_SIZE, sigma: float = WIN_SIGMA) -> np.ndarray:
    """Normalized 1-D Gaussian taps; the 2-D window is their outer product."""
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    # separable, valid windows only, fixed accumulation order
    n = taps.shape[0]
    h, w = img.shape
    rows = np.zeros((h - n + 1, w))
    for i, t in enumerate(taps):
        rows += t * img[i : i + h - n + 1, :]
    out = np.zeros((h - n + 1, w - n + 1))
    for j, t in enumerate(taps):
        out += t * rows[:, j : j + w - n + 1]
    return out


def luma(img: RgbImage) -> np.ndarray:
    d = img.data.astype(np.float64)
    return LUMA[0] * d[..., 0] + LUMA[1] * d[..., 1] + LUMA[2] * d[..., 2]


def ssim(a: RgbImage, b: RgbImage) -> float:
    """Mean SSIM of the two images' luma over all fully interior windows."""
    _check_same(a, b)
    if a.width < WIN_SIZE or a.height < WIN_SIZE:
        raise ImageTooSmall(f"SSIM needs at least {WIN_SIZE}x{WIN_SIZE}, got {a.width}x{a.height}")
    x, y = luma(a), luma(b)
    taps = gaussian_window()
    mx, my = _filter_valid(x, taps), _filter_valid(y, taps)
    sxx = _filter_valid(x * x, taps) - mx * mx
    syy = _filter_valid(y * y, taps) - my * my
    sxy = _filter_valid(x * y, taps) - mx * my
    num = (2.0 * (mx * my) + C1) * (2.0 * sxy + C2)
    den = (mx * mx + my * my + C1) * (sxx + syy + C2)
    return float(np.mean(num / den))


def baseline_meanstd(source: RgbImage, example: RgbImage) -> RgbImage:
    """Global per-channel mean/std matching in Lab, for sanity comparisons."""
    s = colorspace.rgb_to_lab_pixels(source.data).reshape(-1, 3)
    y = colorspace.rgb_to_lab_pixels(example.data).reshape(-1, 3)
    s_mean, s_std = s.mean(axis=0), s.std(axis=0)
    y_mean, y_std = y.mean(axis=0), y.std(axis=0)
    ratio = np.where(s_std < 1e-9, 1.0, y_std / np.where(s_std < 1e-9, 1.0, s_std))
    out = (s - s_mean) * ratio + y_mean
    rgb = colorspace.lab_to_rgb_pixels(out).reshape(source.height, source.width, 3)
    return RgbImage.from_array(rgb)


@dataclass
class FrameMetrics:
    q: int
    ssim: float
    psnr: float


@dataclass
class MetricsReport:
    frames: list[FrameMetrics] = field(default_factory=list)

    def add(self, q: int, frame: RgbImage, source: RgbImage) -> FrameMetrics:
        rec = FrameMetrics(q, ssim(frame, source), psnr(frame, source))
        self.frames.append(rec)
        return rec

    @property
    def final(self) -> FrameMetrics | None:
        return self.frames[-1] if self.frames else None

    def to_dict(self) -> dict:
        def enc(r: FrameMetrics) -> dict:
            return {"q": r.q, "ssim": r.ssim, "psnr": None if math.isinf(r.psnr) else r.psnr}

        doc = {"frames": [enc(r) for r in self.frames]}
        if self.final is not None:
            doc["final"] = enc(self.final)
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricsReport":
        frames = [
            FrameMetrics(f["q"], f["ssim"], math.inf if f["psnr"] is None else f["psnr"])
            for f in doc["frames"]
        ]
        return cls(frames)
