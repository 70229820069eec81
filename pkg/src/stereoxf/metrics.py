"""PSNR and SSIM for images in [0, 1], plus the metrics.json report."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

PSNR_CAP = 99.0
SSIM_SIGMA = 1.5
SSIM_RADIUS = 5          # 11 x 11 window
SSIM_K1, SSIM_K2 = 0.01, 0.03
METRICS_VERSION = 1


def _prep(a, b, border_crop: int):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if border_crop:
        c = border_crop
        if 2 * c >= min(a.shape[-2:]):
            raise ValueError(f"border crop {c} leaves no pixels in {a.shape[-2:]}")
        a, b = a[..., c:-c, c:-c], b[..., c:-c, c:-c]
    return a, b


def psnr(a, b, border_crop: int = 0) -> float:
    a, b = _prep(a, b, border_crop)
    mse = float(np.mean((a - b) ** 2))
    if mse <= 10.0 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return 10.0 * np.log10(1.0 / mse)


def _blur(x: np.ndarray) -> np.ndarray:
    return ndimage.gaussian_filter(x, SSIM_SIGMA, truncate=SSIM_RADIUS / SSIM_SIGMA, mode="reflect")


def ssim(a, b, border_crop: int = 0) -> float:
    """Mean SSIM with a Gaussian window, averaged over channels.

    Statistics near the edge are discarded (``SSIM_RADIUS`` px) so only
    full windows contribute.
    """
    a, b = _prep(a, b, border_crop)
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    vals = []
    for x, y in zip(a, b):
        mx, my = _blur(x), _blur(y)
        vx = _blur(x * x) - mx * mx
        vy = _blur(y * y) - my * my
        cxy = _blur(x * y) - mx * my
        s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        r = SSIM_RADIUS
        vals.append(s[r:-r, r:-r].mean() if min(s.shape) > 2 * r else s.mean())
    return float(np.mean(vals))


@dataclass
class Sample:
    u: float
    t: float
    psnr: float
    ssim: float


@dataclass
class MetricsReport:
    scene_seed: int | None = None
    samples: list[Sample] = field(default_factory=list)

    def add(self, u: float, t: float, image, reference, border_crop: int = 4) -> Sample:
        s = Sample(float(u), float(t), psnr(image, reference, border_crop), ssim(image, reference, border_crop))
        self.samples.append(s)
        return s

    def aggregate(self) -> dict:
        if not self.samples:
            return {"psnr_mean": None, "ssim_mean": None}
        # sort first so the means do not depend on evaluation order
        p = sorted(s.psnr for s in self.samples)
        q = sorted(s.ssim for s in self.samples)
        return {"psnr_mean": float(np.mean(p)), "ssim_mean": float(np.mean(q))}

    def to_dict(self) -> dict:
        ordered = sorted(self.samples, key=lambda s: (s.t, s.u))
        return {"format_version": METRICS_VERSION, "scene_seed": self.scene_seed,
                "samples": [{"u": s.u, "t": s.t, "psnr": s.psnr, "ssim": s.ssim} for s in ordered],
                "aggregate": self.aggregate()}


def compute_metrics(a, b, border_crop: int = 0) -> dict:
    return {"psnr": psnr(a, b, border_crop), "ssim": ssim(a, b, border_crop)}
