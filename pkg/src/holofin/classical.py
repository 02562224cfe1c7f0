"""Non-learned reconstruction: multi-height phase retrieval, edge-sparsity autofocus,
and pixel super-resolution by shift-and-add."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.fft as sfft
from scipy import ndimage

from .errors import GeometryError, NumericalError
from .optics import (ComplexField, HologramStack, IntensityImage, fft_workers,
                     propagate_array, transfer_function)


@dataclass(frozen=True)
class MhprConfig:
    iterations: int = 100
    record_residuals: bool = False
    plane_order: tuple[int, ...] | None = None

    def __post_init__(self):
        if int(self.iterations) < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.plane_order is not None:
            object.__setattr__(self, "plane_order", tuple(int(i) for i in self.plane_order))


@dataclass
class MhprResult:
    field: ComplexField
    residuals: list[float] | None = None


def mhpr_reconstruct(stack: HologramStack, cfg: MhprConfig = MhprConfig()) -> MhprResult:
    """Multi-height phase retrieval with amplitude averaging.

    The sample-plane estimate starts as the zero-phase back-propagation of the
    closest hologram. Each iteration visits the planes in ascending ``z`` (or in
    ``cfg.plane_order``, a permutation of plane indices): the
    estimate is propagated to the plane, its amplitude replaced by the mean of
    the propagated and measured amplitudes (phase kept), and it is propagated
    back. The estimate is kept in the frequency domain between planes, so a
    plane visit costs one forward and one inverse FFT.

    The recorded residual for an iteration is the mean over planes of the RMS
    mismatch between the propagated and measured amplitudes, evaluated on the
    estimate at the end of that iteration.
    """
    if stack.M == 0:
        raise ValueError("empty hologram stack")
    intensities = stack.intensities()
    if not np.all(np.isfinite(intensities)):
        raise NumericalError("hologram stack contains non-finite measurements")
    amps = np.sqrt(intensities)
    shape = stack.shape
    pitch, lam = stack.pixel_pitch, stack.wavelength
    fwd = [transfer_function(shape, pitch, lam, z) for z in stack.z2]
    back = [transfer_function(shape, pitch, lam, -z) for z in stack.z2]
    workers = fft_workers()
    order = tuple(range(stack.M)) if cfg.plane_order is None else cfg.plane_order
    if sorted(order) != list(range(stack.M)):
        raise ValueError(f"plane_order {order} is not a permutation of {stack.M} planes")

    spectrum = sfft.fft2(amps[0].astype(np.complex128), workers=workers) * back[0]
    residuals: list[float] | None = [] if cfg.record_residuals else None
    for _ in range(int(cfg.iterations)):
        for i in order:
            plane = sfft.ifft2(spectrum * fwd[i], workers=workers)
            mag = np.abs(plane)
            phasor = np.exp(1j * np.angle(plane))
            plane = 0.5 * (mag + amps[i]) * phasor
            spectrum = sfft.fft2(plane, workers=workers) * back[i]
        if residuals is not None:
            residuals.append(_amplitude_residual(spectrum, fwd, amps, workers))
    estimate = sfft.ifft2(spectrum, workers=workers)
    if not np.all(np.isfinite(estimate)):
        raise NumericalError("MH-PR produced non-finite values")
    return MhprResult(ComplexField(estimate, pitch, lam), residuals)


def _amplitude_residual(spectrum, fwd, amps, workers) -> float:
    total = 0.0
    for tf, amp in zip(fwd, amps):
        plane = sfft.ifft2(spectrum * tf, workers=workers)
        total += math.sqrt(float(np.mean((np.abs(plane) - amp) ** 2)))
    return total / len(amps)


def backpropagate(hologram: IntensityImage, z: float, normalize: bool = False) -> ComplexField:
    """Zero-phase back-propagation of a single hologram's amplitude to the sample plane."""
    intensity = hologram.data
    if normalize:
        intensity = intensity / intensity.mean()
    amp = np.sqrt(intensity).astype(np.complex128)
    return ComplexField(propagate_array(amp, -z, hologram.pixel_pitch, hologram.wavelength),
                        hologram.pixel_pitch, hologram.wavelength)


def edge_sparsity_metric(image: np.ndarray) -> float:
    """Tamura coefficient of the gradient magnitude, sqrt(std/mean).

    ``image`` is a nonnegative amplitude or a complex field; for complex input
    the gradient magnitude is sqrt(|dU/dx|^2 + |dU/dy|^2), so phase edges count
    as well. Gradients are central differences over interior pixels; the
    one-pixel border is excluded.
    """
    img = np.asarray(image)
    if not np.iscomplexobj(img):
        img = img.astype(np.float64)
    if img.ndim != 2 or min(img.shape) < 3:
        raise ValueError(f"need a 2D image of at least 3x3, got shape {img.shape}")
    gx = 0.5 * (img[1:-1, 2:] - img[1:-1, :-2])
    gy = 0.5 * (img[2:, 1:-1] - img[:-2, 1:-1])
    grad = np.sqrt(np.abs(gx) ** 2 + np.abs(gy) ** 2)
    mean = grad.mean()
    if not mean > 0:
        raise ValueError("edge sparsity undefined for an image without gradients")
    return math.sqrt(grad.std() / mean)


class DegenerateGridWarning(UserWarning):
    """Autofocus could not refine its estimate (too few grid points or peak at an edge)."""


@dataclass
class FocusScan:
    grid: np.ndarray
    scores: np.ndarray
    z: float
    refined: bool


def focus_scan(hologram: IntensityImage, z_min: float, z_max: float,
               coarse_step: float) -> FocusScan:
    """Score a coarse z grid by edge sparsity of the back-propagated complex field
    and refine the peak parabolically."""
    if not z_min < z_max:
        raise ValueError(f"need z_min < z_max, got {z_min}, {z_max}")
    if not coarse_step > 0:
        raise ValueError(f"coarse_step must be positive, got {coarse_step}")
    n = int(math.floor((z_max - z_min) / coarse_step + 1e-9)) + 1
    grid = z_min + coarse_step * np.arange(n)
    amp = np.sqrt(hologram.data).astype(np.complex128)
    spectrum = sfft.fft2(amp, workers=fft_workers())
    scores = np.empty(n)
    for j, z in enumerate(grid):
        tf = transfer_function(hologram.shape, hologram.pixel_pitch, hologram.wavelength, -float(z))
        recon = sfft.ifft2(spectrum * tf, workers=fft_workers())
        scores[j] = edge_sparsity_metric(recon)
    best = int(np.argmax(scores))
    if n < 3 or best == 0 or best == n - 1:
        return FocusScan(grid, scores, float(grid[best]), False)
    left, mid, right = scores[best - 1], scores[best], scores[best + 1]
    denom = left - 2 * mid + right
    offset = 0.0 if denom == 0 else 0.5 * (left - right) / denom
    offset = float(np.clip(offset, -0.5, 0.5))
    return FocusScan(grid, scores, float(grid[best] + offset * coarse_step), True)


def autofocus(hologram: IntensityImage, z_min: float, z_max: float, coarse_step: float) -> float:
    """Estimate the sample-to-sensor distance of ``hologram`` in micrometers.

    Emits :class:`DegenerateGridWarning` and returns the best coarse grid
    point when parabolic refinement is impossible.
    """
    scan = focus_scan(hologram, z_min, z_max, coarse_step)
    if not scan.refined:
        warnings.warn(f"autofocus returned unrefined grid point {scan.z} "
                      f"({len(scan.grid)} grid points)", DegenerateGridWarning, stacklevel=2)
    return scan.z


@dataclass(frozen=True)
class LowResBurst:
    """Sub-pixel shifted low-resolution frames of the same scene."""

    frames: tuple[IntensityImage, ...]
    true_shifts: tuple[tuple[float, float], ...] | None = field(default=None, compare=False)

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise ValueError("burst has no frames")
        f0 = frames[0]
        for fr in frames[1:]:
            if (fr.shape != f0.shape or fr.pixel_pitch != f0.pixel_pitch
                    or fr.wavelength != f0.wavelength):
                raise GeometryError("all burst frames must share shape and metadata")
        object.__setattr__(self, "frames", frames)


def _subpixel_peak(surface: np.ndarray) -> tuple[float, float]:
    """Peak location of a periodic correlation surface with 3-point parabolic refinement.

    The parabola is fitted to the log of the surface when all three samples are
    positive, which is exact for a Gaussian-shaped peak.
    """
    h, w = surface.shape
    r, c = np.unravel_index(int(np.argmax(surface)), surface.shape)

    def refine(m1, m0, p1):
        if min(m1, m0, p1) > 0:
            m1, m0, p1 = math.log(m1), math.log(m0), math.log(p1)
        denom = m1 - 2 * m0 + p1
        return 0.0 if denom == 0 else 0.5 * (m1 - p1) / denom

    dy = refine(surface[(r - 1) % h, c], surface[r, c], surface[(r + 1) % h, c])
    dx = refine(surface[r, (c - 1) % w], surface[r, c], surface[r, (c + 1) % w])
    py, px = r + dy, c + dx
    if py > h / 2:
        py -= h
    if px > w / 2:
        px -= w
    return float(px), float(py)


def _phase_correlation(ref_spec: np.ndarray, spec: np.ndarray, weight: np.ndarray) -> tuple[float, float]:
    cross = ref_spec * np.conj(spec)
    mag = np.abs(cross)
    cross = np.where(mag > 0, cross / np.where(mag > 0, mag, 1.0), 0.0) * weight
    surface = sfft.ifft2(cross, workers=fft_workers()).real
    return _subpixel_peak(surface)


def estimate_shifts(burst: LowResBurst, reference: int = 0) -> list[tuple[float, float]]:
    """Sub-pixel shift (dx, dy) of every frame relative to the reference frame, in coarse pixels.

    A frame with shift (dx, dy) samples the scene at ``frame0(y + dy, x + dx)``.
    The normalized cross-power spectrum is tapered by a Gaussian so the
    correlation peak is smooth and nearly Gaussian, then refined by a
    log-parabola through the neighbors of its maximum.
    """
    frames = [f.data for f in burst.frames]
    if len(frames) < 2:
        raise ValueError("shift estimation needs at least two frames")
    h, w = frames[0].shape
    specs = []
    for i, fr in enumerate(frames):
        centered = fr - fr.mean()
        if not np.any(np.abs(centered) > 1e-12 * max(1.0, float(np.abs(fr).max()))):
            raise ValueError(f"frame {i} is flat; no correlation peak")
        specs.append(sfft.fft2(centered, workers=fft_workers()))
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    # taper width in cycles/pixel; keeps the peak ~1.5 px wide
    weight = np.exp(-(fx ** 2 + fy ** 2) / (2 * 0.1 ** 2))
    ref = specs[reference]
    shifts = []
    for i, spec in enumerate(specs):
        if i == reference:
            shifts.append((0.0, 0.0))
        else:
            shifts.append(_phase_correlation(ref, spec, weight))
    return shifts


def pixel_super_resolve(burst: LowResBurst, factor: int,
                        shifts: Sequence[tuple[float, float]]) -> IntensityImage:
    """Shift-and-add fusion of a burst onto a grid ``factor`` times finer.

    Coarse pixel (m, n) of a frame with shift (dx, dy) covers the fine cells
    starting at ((m + dy) * factor, (n + dx) * factor); its value is deposited
    in the center cell of that footprint (rounded down for even factors). Cells hit by several frames are
    averaged; empty cells are filled by normalized bilinear (tent) weighting
    of filled cells.
    """
    if isinstance(factor, bool) or int(factor) != factor or factor < 1:
        raise ValueError(f"factor must be a positive integer, got {factor}")
    factor = int(factor)
    if len(shifts) != len(burst.frames):
        raise ValueError(f"{len(shifts)} shifts for {len(burst.frames)} frames")
    h, w = burst.frames[0].shape
    big_h, big_w = h * factor, w * factor
    acc = np.zeros((big_h, big_w))
    count = np.zeros((big_h, big_w))
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    # footprint start is rounded on its own so that small shift errors cannot flip cells
    center = (factor - 1) // 2
    for frame, (dx, dy) in zip(burst.frames, shifts):
        if not (math.isfinite(dx) and math.isfinite(dy)):
            raise ValueError(f"non-finite shift ({dx}, {dy})")
        r = (np.rint((rows + dy) * factor).astype(np.int64) + center) % big_h
        c = (np.rint((cols + dx) * factor).astype(np.int64) + center) % big_w
        rr, cc = np.broadcast_arrays(r, c)
        np.add.at(acc, (rr, cc), frame.data)
        np.add.at(count, (rr, cc), 1.0)
    filled = count > 0
    out = np.where(filled, acc / np.where(filled, count, 1.0), 0.0)
    if not filled.all():
        out = _fill_holes(out, filled, factor)
    f0 = burst.frames[0]
    return IntensityImage(np.clip(out, 0.0, None), f0.pixel_pitch / factor, f0.wavelength)


def _fill_holes(img: np.ndarray, filled: np.ndarray, factor: int) -> np.ndarray:
    out = img.copy()
    mask = filled.astype(np.float64)
    radius = max(1, factor)
    while True:
        t = 1.0 - np.abs(np.arange(-radius, radius + 1)) / (radius + 1)
        kernel = np.outer(t, t)
        num = ndimage.convolve(out * mask, kernel, mode="wrap")
        den = ndimage.convolve(mask, kernel, mode="wrap")
        holes = mask == 0
        reach = holes & (den > 1e-12)
        out[reach] = num[reach] / den[reach]
        if reach.sum() == holes.sum():
            return out
        if radius > max(img.shape):
            raise GeometryError("shift-and-add grid has no filled cells to interpolate from")
        radius *= 2


def area_downsample_burst(fine: IntensityImage, factor: int,
                          positions: Sequence[tuple[int, int]] | None = None) -> LowResBurst:
    """Simulate a sub-pixel burst by box-averaging a fine image at integer fine-cell offsets.

    ``positions`` are (px, py) offsets in fine cells; the default is the full
    ``factor`` x ``factor`` raster. The true shift of each frame is
    (px / factor, py / factor) coarse pixels.
    """
    h, w = fine.shape
    if h % factor or w % factor:
        raise GeometryError(f"fine image {fine.shape} not divisible by factor {factor}")
    if positions is None:
        positions = [(px, py) for py in range(factor) for px in range(factor)]
    frames, shifts = [], []
    for px, py in positions:
        rolled = np.roll(fine.data, shift=(-py, -px), axis=(0, 1))
        coarse = rolled.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))
        frames.append(IntensityImage(coarse, fine.pixel_pitch * factor, fine.wavelength))
        shifts.append((px / factor, py / factor))
    return LowResBurst(tuple(frames), tuple(shifts))
