"""SSIM and PSNR on the 0-255 intensity scale."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.ndimage import uniform_filter

DATA_RANGE = 255.0
WINDOW = 7
K1, K2 = 0.01, 0.03


def _prepare(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 4 and a.shape[-1] == 1:
        a, b = a[..., 0], b[..., 0]
    return a, b


def _ssim_nd(a: np.ndarray, b: np.ndarray, win: int) -> float:
    if min(a.shape) < win:
        raise ValueError(f"every axis must be >= {win}, got {a.shape}")
    count = win**a.ndim
    cov_norm = count / (count - 1)  # sample covariance
    ux = uniform_filter(a, win)
    uy = uniform_filter(b, win)
    uxx = uniform_filter(a * a, win)
    uyy = uniform_filter(b * b, win)
    uxy = uniform_filter(a * b, win)
    vx = cov_norm * (uxx - ux * ux)
    vy = cov_norm * (uyy - uy * uy)
    vxy = cov_norm * (uxy - ux * uy)
    c1 = (K1 * DATA_RANGE) ** 2
    c2 = (K2 * DATA_RANGE) ** 2
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux**2 + uy**2 + c1) * (vx + vy + c2))
    pad = (win - 1) // 2
    return float(s[tuple(slice(pad, n - pad) for n in s.shape)].mean())


def ssim(a, b, per_slice: bool = False) -> float:
    """Mean local SSIM with a uniform 7-wide window, edges cropped.

    Volumes are compared with 3D windows; ``per_slice`` averages 2D SSIM over
    axial (depth) slices instead.
    """
    a, b = _prepare(a, b)
    if per_slice:
        return float(np.mean([_ssim_nd(a[i], b[i], WINDOW) for i in range(a.shape[0])]))
    return _ssim_nd(a, b, WINDOW)


def psnr(a, b) -> float:
    a, b = _prepare(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(DATA_RANGE**2 / mse)


@dataclass
class MetricReport:
    label: str
    ssim: list[float] = field(default_factory=list)
    psnr: list[float] = field(default_factory=list)

    def add(self, recon, truth) -> None:
        self.ssim.append(ssim(recon, truth))
        self.psnr.append(psnr(recon, truth))

    @staticmethod
    def _stats(values: Sequence[float]) -> tuple[float, float]:
        v = np.asarray(values, dtype=np.float64)
        return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0

    @property
    def ssim_mean_std(self) -> tuple[float, float]:
        return self._stats(self.ssim)

    @property
    def psnr_mean_std(self) -> tuple[float, float]:
        return self._stats(self.psnr)

    def summary(self) -> str:
        sm, ss = self.ssim_mean_std
        pm, ps = self.psnr_mean_std
        return f"{self.label}\t{sm:.3f} ({ss:.3g})\t{pm:.1f} ({ps:.3g})"


def format_table(reports: Sequence[MetricReport]) -> str:
    """Per-case rows followed by one 'mean (std)' summary line per report."""
    lines = ["method\tcase\tssim\tpsnr_db"]
    for rep in reports:
        for i, (s, p) in enumerate(zip(rep.ssim, rep.psnr)):
            lines.append(f"{rep.label}\t{i}\t{s:.6f}\t{p:.6f}")
    lines.append("method\tssim_mean (std)\tpsnr_mean_db (std)")
    lines.extend(rep.summary() for rep in reports)
    return "\n".join(lines) + "\n"
