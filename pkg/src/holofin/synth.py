"""Synthetic sample distributions and dataset assembly.

Two classes differ deliberately in sparsity and morphology: ``connected-texture``
is dense and tissue-like, ``sparse-blobs`` is a scatter of soft ellipses on a
clear background. ``resolution-target`` is a bar chart for visual checks.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .classical import MhprConfig, mhpr_reconstruct
from .errors import ConfigError, FormatError
from .formats import read_cfld, read_intensity, write_cfld
from .optics import (DEFAULT_PITCH, DEFAULT_WAVELENGTH, DEFAULT_Z_LIST, ComplexField,
                     HologramStack, derive_seed, simulate_stack)

CLASSES = ("connected-texture", "sparse-blobs", "resolution-target")
GT_PLANES = 8
GT_Z_RANGE = (300.0, 600.0)
GT_ITERATIONS = 100


@dataclass(frozen=True)
class SampleSpec:
    cls: str = "sparse-blobs"
    phase_range: tuple[float, float] = (0.4, 1.2)
    amp_range: tuple[float, float] = (0.6, 0.95)
    feature_scale: float = 1.5
    density: float = 0.1

    def __post_init__(self):
        if self.cls not in CLASSES:
            raise ConfigError(f"unknown sample class {self.cls!r}; expected one of {CLASSES}")
        lo, hi = self.phase_range
        if lo > hi:
            raise ConfigError(f"phase_range must be ordered, got {self.phase_range}")
        lo, hi = self.amp_range
        if not (0 < lo <= hi <= 1):
            raise ConfigError(f"amp_range must be ordered within (0, 1], got {self.amp_range}")
        if not self.feature_scale > 0:
            raise ConfigError(f"feature_scale must be positive, got {self.feature_scale}")
        if not 0 <= self.density <= 1:
            raise ConfigError(f"density must lie in [0, 1], got {self.density}")
        object.__setattr__(self, "phase_range", tuple(float(v) for v in self.phase_range))
        object.__setattr__(self, "amp_range", tuple(float(v) for v in self.amp_range))

    @classmethod
    def from_dict(cls, doc: dict) -> "SampleSpec":
        doc = dict(doc)
        unknown = set(doc) - {"cls", "phase_range", "amp_range", "feature_scale", "density"}
        if unknown:
            raise ConfigError(f"unknown sample spec keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["phase_range"] = list(self.phase_range)
        d["amp_range"] = list(self.amp_range)
        return d


DEFAULT_SPECS = {
    "connected-texture": SampleSpec("connected-texture", (0.3, 1.2), (0.6, 0.95), 2.0, 0.7),
    "sparse-blobs": SampleSpec("sparse-blobs", (0.4, 1.2), (0.6, 0.95), 1.5, 0.1),
    "resolution-target": SampleSpec("resolution-target", (0.5, 0.5), (0.5, 0.5), 1.0, 0.5),
}


def _smooth_noise(rng: np.random.Generator, side: int, sigma_px: float) -> np.ndarray:
    noise = ndimage.gaussian_filter(rng.standard_normal((side, side)), sigma_px, mode="wrap")
    noise -= noise.mean()
    std = noise.std()
    return noise / std if std > 0 else noise


def _connected_texture(spec: SampleSpec, side: int, pitch: float, rng: np.random.Generator):
    sigma = spec.feature_scale / pitch
    base = _smooth_noise(rng, side, sigma)
    thr = np.quantile(base, 1.0 - spec.density)
    inside = base > thr
    # soft onset: weight rises from 0 at the region boundary over ~one feature scale
    span = max(float(base.max() - thr), 1e-12)
    edge = np.clip((base - thr) / (0.35 * span), 0.0, 1.0) * inside
    detail = _smooth_noise(rng, side, 0.5 * sigma)
    t = 0.5 + 0.25 * np.clip(detail, -2, 2)
    plo, phi = spec.phase_range
    alo, ahi = spec.amp_range
    phase = edge * (plo + (phi - plo) * t)
    # amplitude drops where the phase is thick: correlated absorption
    amp = 1.0 - edge * (1.0 - (ahi - (ahi - alo) * t))
    return amp, phase, inside


def _sparse_blobs(spec: SampleSpec, side: int, pitch: float, rng: np.random.Generator):
    amp = np.ones((side, side))
    phase = np.zeros((side, side))
    covered = np.zeros((side, side), dtype=bool)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    target = spec.density * side * side
    radius = spec.feature_scale / pitch
    for _ in range(10_000):
        if covered.sum() >= target:
            break
        cy, cx = rng.uniform(0, side, size=2)
        a = radius * rng.uniform(0.6, 1.4)
        b = radius * rng.uniform(0.6, 1.4)
        theta = rng.uniform(0, np.pi)
        dy = (yy - cy + side / 2) % side - side / 2
        dx = (xx - cx + side / 2) % side - side / 2
        u = (dx * np.cos(theta) + dy * np.sin(theta)) / a
        v = (-dx * np.sin(theta) + dy * np.cos(theta)) / b
        r2 = u * u + v * v
        profile = np.sqrt(np.clip(1.0 - r2, 0.0, None))
        blob_phase = rng.uniform(*spec.phase_range)
        blob_amp = rng.uniform(*spec.amp_range)
        amp *= 1.0 - (1.0 - blob_amp) * profile
        phase += blob_phase * profile
        covered |= r2 < 1
    return amp, phase, covered


def _resolution_target(spec: SampleSpec, side: int, pitch: float, rng: np.random.Generator):
    amp = np.ones((side, side))
    phase = np.zeros((side, side))
    covered = np.zeros((side, side), dtype=bool)
    if spec.density == 0:
        return amp, phase, covered
    period = max(2.0, 2 * spec.feature_scale / pitch)
    half = side // 2
    # four quadrants, period shrinking by 1.5x each; bar orientation alternates
    for g, (r0, c0) in enumerate([(0, 0), (0, half), (half, 0), (half, half)]):
        p = max(2, int(round(period / 1.5 ** g)))
        bars = (np.arange(half) % p) < p / 2
        pattern = np.broadcast_to(bars[None, :] if g % 2 == 0 else bars[:, None], (half, half))
        pad = max(1, half // 8)
        block = np.zeros((half, half), dtype=bool)
        block[pad:half - pad, pad:half - pad] = pattern[pad:half - pad, pad:half - pad]
        covered[r0:r0 + half, c0:c0 + half] = block
    amp[covered] = spec.amp_range[0]
    phase[covered] = spec.phase_range[1]
    return amp, phase, covered


_GENERATORS = {
    "connected-texture": _connected_texture,
    "sparse-blobs": _sparse_blobs,
    "resolution-target": _resolution_target,
}


def generate_sample(spec: SampleSpec, side: int, pitch: float = DEFAULT_PITCH,
                    wavelength: float = DEFAULT_WAVELENGTH, seed: int = 0) -> ComplexField:
    """Draw one transmissive sample field on a unit background."""
    if side < 2:
        raise ConfigError(f"side must be >= 2, got {side}")
    if spec.density == 0:
        return ComplexField(np.ones((side, side), dtype=np.complex128), pitch, wavelength)
    rng = np.random.default_rng(seed)
    amp, phase, _ = _GENERATORS[spec.cls](spec, side, pitch, rng)
    return ComplexField(amp * np.exp(1j * phase), pitch, wavelength)


def coverage_fraction(sample: ComplexField, tol: float = 1e-9) -> float:
    """Fraction of pixels that differ from the unit background."""
    return float(np.mean(np.abs(sample.data - 1.0) > tol))


def gt_z_list(n: int = GT_PLANES, z_range: tuple[float, float] = GT_Z_RANGE) -> list[float]:
    return [float(z) for z in np.linspace(z_range[0], z_range[1], n)]


@dataclass
class DatasetItem:
    stack: HologramStack
    gt: ComplexField
    truth: ComplexField
    label: str
    seed: int


@dataclass
class Dataset:
    items: list[DatasetItem]
    train: list[int]
    test: list[int]
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        check_split(self)

    @property
    def z_list(self) -> tuple[float, ...]:
        return self.items[0].stack.z2

    def subset(self, role: str) -> list[DatasetItem]:
        idx = self.train if role == "train" else self.test
        return [self.items[i] for i in idx]


def check_split(ds: Dataset) -> None:
    """Machine-check split and seed disjointness."""
    train, test = set(ds.train), set(ds.test)
    if train & test:
        raise ValueError(f"train/test splits overlap at indices {sorted(train & test)}")
    n = len(ds.items)
    if any(i < 0 or i >= n for i in train | test):
        raise ValueError("split index out of range")
    train_seeds = {ds.items[i].seed for i in train}
    test_seeds = {ds.items[i].seed for i in test}
    if train_seeds & test_seeds:
        raise ValueError("train and test FOVs share generator seeds")


def split_counts(n: int, ratio: tuple[int, int] = (6, 1)) -> tuple[int, int]:
    a, b = ratio
    if a < 0 or b < 0 or a + b == 0:
        raise ConfigError(f"invalid split ratio {ratio}")
    n_train = int(round(n * a / (a + b)))
    if b > 0 and n >= 2:
        n_train = min(n_train, n - 1)
    if a > 0 and n >= 2:
        n_train = max(n_train, 1)
    return n_train, n - n_train


def make_item(spec: SampleSpec, z_list: Sequence[float], side: int, noise_sigma: float, seed: int,
              pitch: float = DEFAULT_PITCH, wavelength: float = DEFAULT_WAVELENGTH,
              gt_iterations: int = GT_ITERATIONS) -> DatasetItem:
    truth = generate_sample(spec, side, pitch, wavelength, derive_seed(seed, "sample"))
    gt_stack = simulate_stack(truth, gt_z_list(), noise_sigma, derive_seed(seed, "gt"))
    gt = mhpr_reconstruct(gt_stack, MhprConfig(gt_iterations)).field
    stack = simulate_stack(truth, z_list, noise_sigma, derive_seed(seed, "input"))
    return DatasetItem(stack, gt, truth, spec.cls, int(seed))


def build_dataset(spec: SampleSpec, n_fovs: int, z_list: Sequence[float] = DEFAULT_Z_LIST,
                  side: int = 64, noise_sigma: float = 0.0, split_ratio: tuple[int, int] = (6, 1),
                  seed: int = 0, pitch: float = DEFAULT_PITCH,
                  wavelength: float = DEFAULT_WAVELENGTH, gt_iterations: int = GT_ITERATIONS,
                  executor=None) -> Dataset:
    """Simulate ``n_fovs`` samples with input stacks at ``z_list`` and MH-PR(M=8) ground truth.

    Test FOVs are the trailing indices; every FOV has its own derived seed, so
    the splits never share generator seeds. ``executor`` (anything with a
    ``map`` method) parallelizes FOV generation; results are merged by index.
    """
    if n_fovs < 2:
        raise ConfigError(f"n_fovs must be >= 2, got {n_fovs}")
    seeds = [derive_seed(seed, "fov", i) for i in range(n_fovs)]
    args = [(spec, tuple(z_list), side, noise_sigma, s, pitch, wavelength, gt_iterations) for s in seeds]
    mapper = map if executor is None else executor.map
    items = list(mapper(_make_item_star, args))
    n_train, _ = split_counts(n_fovs, split_ratio)
    info = {
        "spec": spec.to_dict(),
        "n_fovs": n_fovs,
        "z_list": [float(z) for z in z_list],
        "gt_z_list": gt_z_list(),
        "gt_iterations": gt_iterations,
        "side": side,
        "noise_sigma": noise_sigma,
        "split_ratio": list(split_ratio),
        "seed": seed,
    }
    return Dataset(items, list(range(n_train)), list(range(n_train, n_fovs)), info)


def _make_item_star(args):
    return make_item(*args)


def rotation_choice(rng: np.random.Generator) -> int:
    """Number of quarter turns, uniform over {0, 1, 2, 3}."""
    return int(rng.integers(4))


def rotate_pair(stack: HologramStack, gt: ComplexField, k: int) -> tuple[HologramStack, ComplexField]:
    if stack.shape[0] != stack.shape[1]:
        raise ValueError(f"rotation augmentation needs a square FOV, got {stack.shape}")
    holos = tuple(type(h)(np.rot90(h.data, k).copy(), h.pixel_pitch, h.wavelength) for h in stack.holograms)
    return HologramStack(holos, stack.z2), gt.with_data(np.rot90(gt.data, k).copy())


def augment_rotate(pair: tuple[HologramStack, ComplexField], seed: int) -> tuple[HologramStack, ComplexField]:
    """Rotate every hologram and the target by the same random multiple of 90 degrees."""
    stack, gt = pair
    return rotate_pair(stack, gt, rotation_choice(np.random.default_rng(seed)))


def save_dataset(ds: Dataset, directory: str | Path) -> None:
    """Write manifest.json plus fov_{i}_{role}.cfld files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    fovs = []
    for i, item in enumerate(ds.items):
        for j, holo in enumerate(item.stack.holograms):
            write_cfld(directory / f"fov_{i}_holo_{j}.cfld", holo)
        write_cfld(directory / f"fov_{i}_gt.cfld", item.gt)
        write_cfld(directory / f"fov_{i}_truth.cfld", item.truth)
        fovs.append({"index": i, "label": item.label, "seed": item.seed, "z2": list(item.stack.z2)})
    manifest = {"format": "holofin-dataset", "version": 1, "info": ds.info,
                "train": ds.train, "test": ds.test, "fovs": fovs}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(directory: str | Path) -> Dataset:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
        fovs = manifest["fovs"]
        train, test = list(manifest["train"]), list(manifest["test"])
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise FormatError(f"{directory}: unreadable dataset manifest ({exc})") from exc
    items = []
    for entry in fovs:
        i = entry["index"]
        holos = tuple(read_intensity(directory / f"fov_{i}_holo_{j}.cfld") for j in range(len(entry["z2"])))
        stack = HologramStack(holos, tuple(entry["z2"]))
        gt = read_cfld(directory / f"fov_{i}_gt.cfld")
        truth = read_cfld(directory / f"fov_{i}_truth.cfld")
        items.append(DatasetItem(stack, gt, truth, entry["label"], int(entry["seed"])))
    return Dataset(items, train, test, manifest.get("info", {}))
