"""Complex optical fields, angular-spectrum propagation and in-line hologram simulation.

All lengths are in micrometers. Fields live on a periodic H x W grid; the
propagator zeroes evanescent components so that propagating by ``z`` and then
by ``-z`` is an exact inverse on the propagating band.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
import scipy.fft as sfft

from .errors import GeometryError

#: Default desk-scale geometry (super-resolved lens-free microscope).
DEFAULT_PITCH = 0.37
DEFAULT_WAVELENGTH = 0.530
DEFAULT_Z_LIST = (300.0, 450.0, 600.0)

_fft_workers = 1


def set_fft_workers(n: int) -> None:
    """Set the number of threads scipy.fft may use for every transform in the package."""
    global _fft_workers
    _fft_workers = max(1, int(n))


def fft_workers() -> int:
    return _fft_workers


def _check_geometry(pixel_pitch: float, wavelength: float) -> None:
    if not (math.isfinite(pixel_pitch) and pixel_pitch > 0):
        raise GeometryError(f"pixel_pitch must be a positive finite length, got {pixel_pitch!r}")
    if not (math.isfinite(wavelength) and wavelength > 0):
        raise GeometryError(f"wavelength must be a positive finite length, got {wavelength!r}")


@dataclass(frozen=True)
class ComplexField:
    """A sampled complex field on an H x W grid."""

    data: np.ndarray
    pixel_pitch: float = DEFAULT_PITCH
    wavelength: float = DEFAULT_WAVELENGTH

    def __post_init__(self):
        data = np.asarray(self.data)
        if not np.iscomplexobj(data):
            data = data.astype(np.complex128)
        if data.ndim != 2 or data.shape[0] < 2 or data.shape[1] < 2:
            raise GeometryError(f"field must be a 2D grid of at least 2x2, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("field contains non-finite values")
        _check_geometry(self.pixel_pitch, self.wavelength)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "pixel_pitch", float(self.pixel_pitch))
        object.__setattr__(self, "wavelength", float(self.wavelength))

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def amplitude(self) -> np.ndarray:
        return np.abs(self.data)

    @property
    def phase(self) -> np.ndarray:
        return np.angle(self.data)

    def with_data(self, data: np.ndarray) -> "ComplexField":
        return ComplexField(data, self.pixel_pitch, self.wavelength)


@dataclass(frozen=True)
class IntensityImage:
    """A nonnegative real image, e.g. a raw hologram."""

    data: np.ndarray
    pixel_pitch: float = DEFAULT_PITCH
    wavelength: float = DEFAULT_WAVELENGTH

    def __post_init__(self):
        data = np.asarray(self.data)
        if np.iscomplexobj(data):
            raise ValueError("intensity must be real-valued")
        data = data.astype(np.float64, copy=False)
        if data.ndim != 2 or data.shape[0] < 2 or data.shape[1] < 2:
            raise GeometryError(f"intensity must be a 2D grid of at least 2x2, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("intensity contains non-finite values")
        if np.any(data < 0):
            raise ValueError("intensity contains negative values")
        _check_geometry(self.pixel_pitch, self.wavelength)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "pixel_pitch", float(self.pixel_pitch))
        object.__setattr__(self, "wavelength", float(self.wavelength))

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True)
class HologramStack:
    """M holograms recorded at strictly increasing sample-to-sensor distances."""

    holograms: tuple[IntensityImage, ...]
    z2: tuple[float, ...]
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        holos = tuple(self.holograms)
        z2 = tuple(float(z) for z in self.z2)
        if len(holos) == 0:
            raise ValueError("hologram stack is empty")
        if len(holos) != len(z2):
            raise ValueError(f"{len(holos)} holograms but {len(z2)} distances")
        first = holos[0]
        for h in holos[1:]:
            if (h.shape != first.shape or h.pixel_pitch != first.pixel_pitch
                    or h.wavelength != first.wavelength):
                raise GeometryError("all holograms in a stack must share shape, pitch and wavelength")
        if any(not math.isfinite(z) or z <= 0 for z in z2):
            raise ValueError(f"distances must be positive and finite, got {z2}")
        if any(b <= a for a, b in zip(z2, z2[1:])):
            raise ValueError(f"distances must be strictly increasing, got {z2}")
        object.__setattr__(self, "holograms", holos)
        object.__setattr__(self, "z2", z2)

    @property
    def M(self) -> int:
        return len(self.holograms)

    @property
    def shape(self) -> tuple[int, int]:
        return self.holograms[0].shape

    @property
    def pixel_pitch(self) -> float:
        return self.holograms[0].pixel_pitch

    @property
    def wavelength(self) -> float:
        return self.holograms[0].wavelength

    def intensities(self) -> np.ndarray:
        """Stacked intensities as an (M, H, W) array."""
        return np.stack([h.data for h in self.holograms])


def frequency_grid(shape: tuple[int, int], pixel_pitch: float) -> tuple[np.ndarray, np.ndarray]:
    """Spatial frequencies (cycles/um) in standard wrapped FFT order, broadcastable to ``shape``."""
    h, w = shape
    fy = np.fft.fftfreq(h, d=pixel_pitch)[:, None]
    fx = np.fft.fftfreq(w, d=pixel_pitch)[None, :]
    return fx, fy


@lru_cache(maxsize=64)
def transfer_function(shape: tuple[int, int], pixel_pitch: float, wavelength: float,
                      z: float) -> np.ndarray:
    """Angular-spectrum transfer function with evanescent components set to zero.

    The returned array is cached and read-only.
    """
    fx, fy = frequency_grid(shape, pixel_pitch)
    arg = 1.0 - (wavelength * fx) ** 2 - (wavelength * fy) ** 2
    propagating = arg >= 0
    kz = np.sqrt(np.where(propagating, arg, 0.0))
    tf = np.where(propagating, np.exp(1j * (2 * np.pi * z / wavelength) * kz), 0.0)
    tf.setflags(write=False)
    return tf


def propagating_mask(shape: tuple[int, int], pixel_pitch: float, wavelength: float) -> np.ndarray:
    fx, fy = frequency_grid(shape, pixel_pitch)
    return (wavelength * fx) ** 2 + (wavelength * fy) ** 2 <= 1.0


def propagate_array(data: np.ndarray, z: float, pixel_pitch: float, wavelength: float) -> np.ndarray:
    """Propagate a raw complex array (last two axes) by ``z``; the array-level core of the propagator."""
    tf = transfer_function(tuple(data.shape[-2:]), float(pixel_pitch), float(wavelength), float(z))
    spectrum = sfft.fft2(data, workers=_fft_workers)
    return sfft.ifft2(spectrum * tf, workers=_fft_workers)


def angular_spectrum_propagate(fld: ComplexField, z: float) -> ComplexField:
    """Propagate ``fld`` by distance ``z`` (negative values back-propagate)."""
    if not isinstance(fld, ComplexField):
        raise TypeError(f"expected ComplexField, got {type(fld).__name__}")
    z = float(z)
    if not math.isfinite(z):
        raise ValueError(f"propagation distance must be finite, got {z}")
    if z == 0.0:
        return fld.with_data(fld.data.copy())
    return fld.with_data(propagate_array(fld.data, z, fld.pixel_pitch, fld.wavelength))


def derive_seed(seed: int, *keys: int | str) -> int:
    """Deterministically split ``seed`` into an independent child seed identified by ``keys``."""
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for key in keys:
        if isinstance(key, str):
            words.extend(key.encode("utf-8"))
        else:
            words.append(int(key) & 0xFFFFFFFFFFFFFFFF)
    return int(np.random.SeedSequence(words).generate_state(2, dtype=np.uint32).view(np.uint64)[0]
               & 0x7FFFFFFFFFFFFFFF)


def simulate_hologram(sample: ComplexField, z: float, noise_sigma: float = 0.0,
                      seed: int = 0) -> IntensityImage:
    """Record the in-line hologram of ``sample`` under unit plane-wave illumination at distance ``z``."""
    z = float(z)
    if not (math.isfinite(z) and z > 0):
        raise ValueError(f"sample-to-sensor distance must be positive, got {z}")
    if noise_sigma < 0:
        raise ValueError(f"noise_sigma must be nonnegative, got {noise_sigma}")
    intensity = np.abs(angular_spectrum_propagate(sample, z).data) ** 2
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        intensity = np.clip(intensity + rng.normal(0.0, noise_sigma, intensity.shape), 0.0, None)
    return IntensityImage(intensity, sample.pixel_pitch, sample.wavelength)


def plane_seed(seed: int, index: int) -> int:
    # plane 0 keeps the caller's seed so a singleton stack matches simulate_hologram
    return int(seed) if index == 0 else derive_seed(seed, "plane", index)


def simulate_stack(sample: ComplexField, z_list: Sequence[float] = DEFAULT_Z_LIST,
                   noise_sigma: float = 0.0, seed: int = 0) -> HologramStack:
    z_list = [float(z) for z in z_list]
    if not z_list:
        raise ValueError("z_list is empty")
    if any(b <= a for a, b in zip(z_list, z_list[1:])):
        raise ValueError(f"z_list must be strictly increasing, got {z_list}")
    holos = [simulate_hologram(sample, z, noise_sigma, plane_seed(seed, i))
             for i, z in enumerate(z_list)]
    return HologramStack(tuple(holos), tuple(z_list))


def band_limited_field(shape: tuple[int, int], pixel_pitch: float, wavelength: float,
                       rng: np.random.Generator, fraction: float = 0.5) -> ComplexField:
    """Random complex field whose spectrum lies within ``fraction`` of the propagating cutoff."""
    fx, fy = frequency_grid(shape, pixel_pitch)
    keep = (wavelength * fx) ** 2 + (wavelength * fy) ** 2 <= fraction ** 2
    spectrum = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * keep
    data = sfft.ifft2(spectrum)
    data /= np.sqrt(np.mean(np.abs(data) ** 2))
    return ComplexField(data, pixel_pitch, wavelength)
