"""Reconstruction quality metrics: amplitude/phase RMSE and single-scale SSIM."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .optics import ComplexField

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 1D Gaussian taps; the 2D window is their outer product."""
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-r ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    half = len(g) // 2
    out = correlate1d(correlate1d(img, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    return out[half:img.shape[0] - half, half:img.shape[1] - half]


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean single-scale SSIM over all window positions fully inside the image.

    Images are expected in [0, 1]; the constants assume a dynamic range of 1.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"ssim needs two equal-shape 2D images, got {a.shape} and {b.shape}")
    if min(a.shape) < SSIM_WIN:
        raise ValueError(f"images of shape {a.shape} are smaller than the {SSIM_WIN}x{SSIM_WIN} window")
    g = gaussian_window()
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def wrap_phase(phi: np.ndarray) -> np.ndarray:
    """Wrap angles into (-pi, pi]."""
    w = np.mod(phi + np.pi, 2 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w)


def joint_minmax(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Scale both images to [0, 1] with the range of their union; a flat pair maps to zeros."""
    lo = min(a.min(), b.min())
    span = max(a.max(), b.max()) - lo
    if span == 0:
        return np.zeros_like(a, dtype=np.float64), np.zeros_like(b, dtype=np.float64)
    return (a - lo) / span, (b - lo) / span


@dataclass(frozen=True)
class FieldMetrics:
    amp_rmse: float
    phase_rmse: float
    amp_ssim: float
    phase_ssim: float

    def __post_init__(self):
        if self.amp_rmse < 0 or self.phase_rmse < 0:
            raise ValueError("RMSE values must be nonnegative")
        if self.amp_ssim > 1 + 1e-12 or self.phase_ssim > 1 + 1e-12:
            raise ValueError("SSIM values cannot exceed 1")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.amp_rmse, self.phase_rmse, self.amp_ssim, self.phase_ssim)


def global_phase_offset(pred: np.ndarray, gt: np.ndarray) -> float:
    """Constant phase that minimizes the circular mean of arg(pred) - arg(gt)."""
    d = np.angle(pred) - np.angle(gt)
    return float(np.angle(np.mean(np.exp(1j * d))))


def field_metrics(pred: ComplexField, gt: ComplexField, align_phase: bool = True) -> FieldMetrics:
    p, g = pred.data, gt.data
    if p.shape != g.shape:
        raise ValueError(f"field shapes differ: {p.shape} vs {g.shape}")
    amp_p, amp_g = np.abs(p), np.abs(g)
    amp_rmse = float(np.sqrt(np.mean((amp_p - amp_g) ** 2)))
    offset = global_phase_offset(p, g) if align_phase else 0.0
    ph_p = wrap_phase(np.angle(p) - offset)
    ph_g = np.angle(g)
    phase_rmse = float(np.sqrt(np.mean(wrap_phase(ph_p - ph_g) ** 2)))
    amp_ssim = ssim(*joint_minmax(amp_p, amp_g))
    phase_ssim = ssim(*joint_minmax(ph_p, ph_g))
    return FieldMetrics(amp_rmse, phase_rmse, amp_ssim, phase_ssim)


def amplitude_ssim(pred: ComplexField, gt: ComplexField) -> float:
    return ssim(*joint_minmax(np.abs(pred.data), np.abs(gt.data)))


def amplitude_rmse(pred: ComplexField, gt: ComplexField) -> float:
    return float(np.sqrt(np.mean((np.abs(pred.data) - np.abs(gt.data)) ** 2)))
