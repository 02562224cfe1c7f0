"""Benchmark harnesses: class generalization matrix, z-pair sweep and inference timing."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .classical import MhprConfig, mhpr_reconstruct
from .errors import ConfigError
from .fin import FinConfig, FinModel, TrainOptions, fin_forward, infer, normalize_holograms, train
from .formats import write_csv
from .metrics import FieldMetrics, field_metrics
from .optics import DEFAULT_Z_LIST, ComplexField, HologramStack, derive_seed, simulate_stack
from .autodiff import Tensor
from .synth import DEFAULT_SPECS, Dataset, SampleSpec, build_dataset

BENCH_SCHEMA = "holofin-bench/1"
TIMING_SCHEMA = "holofin-timing/1"
Z_PAIR_RANGE = (300.0, 600.0)


@dataclass(frozen=True)
class BenchConfig:
    """Per-model training setup shared by the benchmark harnesses."""

    n_fovs: int = 70
    side: int = 64
    noise_sigma: float = 0.02
    epochs: int = 10
    batch_size: int = 8
    seed: int = 0
    channels: int = 16
    k_schedule: tuple[int, ...] = (16, 12, 8)
    lr: float = 1e-2
    mhpr_iterations: int = 100
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "k_schedule", tuple(int(k) for k in self.k_schedule))
        if self.n_fovs < 2:
            raise ConfigError(f"n_fovs must be >= 2, got {self.n_fovs}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")

    def fin_config(self, M: int) -> FinConfig:
        return FinConfig(input_side=self.side, M=M, channels=self.channels,
                         k_schedule=self.k_schedule, dtype=self.dtype)


@dataclass(frozen=True)
class BenchRow:
    train_class: str
    test_class: str
    z_pair: tuple[float, ...]
    method: str
    M: int
    metrics: FieldMetrics
    n_fov: int


@dataclass
class BenchReport:
    kind: str
    rows: list[BenchRow] = field(default_factory=list)

    HEADER = ("schema", "kind", "train_class", "test_class", "z", "method", "M", "n_fov",
              "amp_rmse", "phase_rmse", "amp_ssim", "phase_ssim")

    def __post_init__(self):
        self.check()

    def check(self) -> None:
        for r in self.rows:
            if not all(math.isfinite(v) for v in r.metrics.as_tuple()):
                raise ValueError(f"non-finite metric in row {r}")

    def table_rows(self) -> list[tuple]:
        return [(BENCH_SCHEMA, self.kind, r.train_class, r.test_class, ";".join(f"{z:g}" for z in r.z_pair),
                 r.method, r.M, r.n_fov) + r.metrics.as_tuple() for r in self.rows]

    def write_csv(self, path: str | Path) -> None:
        write_csv(path, self.HEADER, self.table_rows())

    def render(self) -> str:
        head = ("train", "test", "z (um)", "method", "M", "n", "amp RMSE", "phase RMSE", "amp SSIM", "phase SSIM")
        body = [(r.train_class, r.test_class, ",".join(f"{z:g}" for z in r.z_pair), r.method, str(r.M),
                 str(r.n_fov)) + tuple(f"{v:.4f}" for v in r.metrics.as_tuple()) for r in self.rows]
        widths = [max(len(x) for x in col) for col in zip(head, *body)]
        lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in [head] + body]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines)


def mean_metrics(ms: Sequence[FieldMetrics]) -> FieldMetrics:
    if not ms:
        raise ValueError("no metrics to average")
    arr = np.array([m.as_tuple() for m in ms])
    return FieldMetrics(*(float(v) for v in arr.mean(axis=0)))


Reconstructor = Callable[[HologramStack], ComplexField]


def evaluate(recon: Reconstructor, items, executor=None) -> list[FieldMetrics]:
    """Per-FOV metrics of ``recon`` against each item's MH-PR(M=8) ground truth."""
    def one(it):
        return field_metrics(recon(it.stack), it.gt, align_phase=True)
    mapper = map if executor is None else executor.map
    return list(mapper(one, items))


def mhpr_recon(iterations: int) -> Reconstructor:
    def run(stack: HologramStack) -> ComplexField:
        return mhpr_reconstruct(stack, MhprConfig(iterations)).field
    return run


def fin_recon(model: FinModel) -> Reconstructor:
    def run(stack: HologramStack) -> ComplexField:
        return infer(model, stack)
    return run


def input_z_list(M: int) -> tuple[float, ...]:
    """Default input planes for M holograms: the first of 300/450/600 um, or an even spread."""
    if M <= len(DEFAULT_Z_LIST):
        return tuple(DEFAULT_Z_LIST[:M])
    return tuple(float(z) for z in np.linspace(*Z_PAIR_RANGE, M))


def bench_generalization(classes: Sequence[str], M: int, cfg: BenchConfig = BenchConfig(),
                         specs: dict[str, SampleSpec] | None = None,
                         datasets: dict[str, Dataset] | None = None,
                         models: dict[str, FinModel] | None = None,
                         executor=None) -> BenchReport:
    """Train one FIN per class and test it on every class, plus an MH-PR(M) row per test class.

    Prebuilt ``datasets`` or trained ``models`` (keyed by class) are used as
    given; anything missing is built from ``cfg`` with seeds derived from
    ``cfg.seed`` and the class index.
    """
    classes = list(classes)
    if len(classes) < 2 or len(set(classes)) != len(classes):
        raise ConfigError(f"need at least two distinct classes, got {classes}")
    specs = {**DEFAULT_SPECS, **(specs or {})}
    for c in classes:
        if c not in specs:
            raise ConfigError(f"unknown sample class {c!r}; known: {sorted(specs)}")
    datasets = dict(datasets or {})
    models = dict(models or {})
    z_list = input_z_list(M)
    for i, c in enumerate(classes):
        if c not in datasets:
            datasets[c] = build_dataset(specs[c], cfg.n_fovs, z_list, cfg.side, cfg.noise_sigma,
                                        seed=derive_seed(cfg.seed, "gen-data", i))
        if c not in models:
            models[c], _ = train(datasets[c], cfg.fin_config(M), cfg.epochs, cfg.batch_size,
                                 derive_seed(cfg.seed, "gen-train", i), TrainOptions(lr=cfg.lr))
    report = BenchReport("generalization")
    for tr in classes:
        for te in classes:
            items = datasets[te].subset("test")
            ms = evaluate(fin_recon(models[tr]), items, executor)
            report.rows.append(BenchRow(tr, te, datasets[te].z_list, "FIN", M, mean_metrics(ms), len(ms)))
    for te in classes:
        items = datasets[te].subset("test")
        ms = evaluate(mhpr_recon(cfg.mhpr_iterations), items, executor)
        report.rows.append(BenchRow("-", te, datasets[te].z_list, "MH-PR", M, mean_metrics(ms), len(ms)))
    report.check()
    return report


def check_z_pair(pair: Sequence[float]) -> tuple[float, float]:
    if len(pair) != 2:
        raise ConfigError(f"z pair must have two entries, got {list(pair)}")
    z1, z2 = float(pair[0]), float(pair[1])
    lo, hi = Z_PAIR_RANGE
    if not (lo <= z1 <= hi and lo <= z2 <= hi):
        raise ConfigError(f"z pair ({z1:g}, {z2:g}) outside [{lo:g}, {hi:g}] um")
    if not z1 < z2:
        raise ConfigError(f"z pair must satisfy z1 < z2, got ({z1:g}, {z2:g})")
    return z1, z2


def bench_z_pairs(z_pairs: Sequence[Sequence[float]] = ((300, 450),), cfg: BenchConfig = BenchConfig(),
                  sample_class: str = "sparse-blobs", spec: SampleSpec | None = None,
                  executor=None) -> BenchReport:
    """For every (z1, z2) pair train a FIN(M=2) and compare it with MH-PR(M=2) on the test split."""
    pairs = [check_z_pair(p) for p in z_pairs]
    if not pairs:
        raise ConfigError("no z pairs given")
    if spec is None:
        if sample_class not in DEFAULT_SPECS:
            raise ConfigError(f"unknown sample class {sample_class!r}")
        spec = DEFAULT_SPECS[sample_class]
    report = BenchReport("z-pairs")
    for i, pair in enumerate(pairs):
        ds = build_dataset(spec, cfg.n_fovs, pair, cfg.side, cfg.noise_sigma,
                           seed=derive_seed(cfg.seed, "z-data", i))
        model, _ = train(ds, cfg.fin_config(2), cfg.epochs, cfg.batch_size,
                         derive_seed(cfg.seed, "z-train", i), TrainOptions(lr=cfg.lr))
        items = ds.subset("test")
        for method, recon in (("FIN", fin_recon(model)), ("MH-PR", mhpr_recon(cfg.mhpr_iterations))):
            ms = evaluate(recon, items, executor)
            report.rows.append(BenchRow(spec.cls, spec.cls, pair, method, 2, mean_metrics(ms), len(ms)))
    report.check()
    return report


@dataclass(frozen=True)
class TimingRow:
    method: str
    M: int
    batch: int
    s_per_fov: float
    s_per_mm2: float


@dataclass
class TimingTable:
    rows: list[TimingRow] = field(default_factory=list)
    fov_side: int = 0
    pixel_pitch: float = 0.0

    HEADER = ("schema", "method", "M", "batch", "s_per_fov", "s_per_mm2")

    def write_csv(self, path: str | Path) -> None:
        write_csv(path, self.HEADER, [(TIMING_SCHEMA, r.method, r.M, r.batch, r.s_per_fov, r.s_per_mm2)
                                      for r in self.rows])

    def render(self) -> str:
        lines = [f"{'method':<8}{'M':>3}{'batch':>7}{'s/FOV':>12}{'s/mm2':>12}"]
        lines += [f"{r.method:<8}{r.M:>3}{r.batch:>7}{r.s_per_fov:>12.5f}{r.s_per_mm2:>12.3f}" for r in self.rows]
        return "\n".join(lines)

    def lookup(self, method: str, M: int, batch: int = 1) -> TimingRow:
        for r in self.rows:
            if (r.method, r.M, r.batch) == (method, M, batch):
                return r
        raise KeyError((method, M, batch))


def fov_area_mm2(side: int, pitch_um: float) -> float:
    return (side * pitch_um) ** 2 * 1e-6


def _time_fin(model: FinModel, inputs: np.ndarray, batch: int, repeats: int) -> float:
    best = math.inf
    for _ in range(repeats):
        t = time.perf_counter()
        for i in range(0, len(inputs), batch):
            fin_forward(Tensor(inputs[i:i + batch]), model)
        best = min(best, time.perf_counter() - t)
    return best / len(inputs)


def bench_timing(models: Sequence[FinModel], truths: Sequence[ComplexField],
                 batch_sizes: Sequence[int] = (1, 20), mhpr_M: Sequence[int] = (2, 3),
                 mhpr_iterations: int = 100, repeats: int = 3, mhpr_fovs: int = 2) -> TimingTable:
    """Wall-clock inference cost per FOV and per mm^2 of sample.

    Hologram stacks are simulated from ``truths`` at :func:`input_z_list`
    planes for each model's M. Each FIN entry is the best of ``repeats``
    passes over all FOVs; MH-PR is timed on the first ``mhpr_fovs`` FOVs.
    """
    if not truths:
        raise ConfigError("timing needs at least one FOV")
    if any(b < 1 for b in batch_sizes):
        raise ConfigError(f"batch sizes must be positive, got {list(batch_sizes)}")
    side = truths[0].shape[0]
    pitch = truths[0].pixel_pitch
    area = fov_area_mm2(side, pitch)
    table = TimingTable(fov_side=side, pixel_pitch=pitch)
    stacks: dict[int, list[HologramStack]] = {}

    def stacks_for(M: int) -> list[HologramStack]:
        if M not in stacks:
            stacks[M] = [simulate_stack(t, input_z_list(M), 0.0, seed=i) for i, t in enumerate(truths)]
        return stacks[M]

    for model in models:
        M = model.config.M
        inputs = np.stack([normalize_holograms(s.intensities()) for s in stacks_for(M)])
        inputs = inputs.astype(model.config.dtype)
        fin_forward(Tensor(inputs[:1]), model)
        for b in batch_sizes:
            s = _time_fin(model, inputs, b, repeats)
            table.rows.append(TimingRow("FIN", M, b, s, s / area))
    for M in mhpr_M:
        subset = stacks_for(M)[:max(1, mhpr_fovs)]
        t = time.perf_counter()
        for st in subset:
            mhpr_reconstruct(st, MhprConfig(mhpr_iterations))
        s = (time.perf_counter() - t) / len(subset)
        table.rows.append(TimingRow("MH-PR", M, 1, s, s / area))
    return table
