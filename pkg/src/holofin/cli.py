"""Command-line entry point: ``holofin <subcommand> ...``.

Every subcommand writes its outputs plus a ``manifest.json`` (arguments,
config hash, seed, tool version, output digests) into its output directory.
Exit codes: 0 success, 2 bad arguments or config, 3 malformed input file,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .errors import ConfigError, FormatError, GeometryError, HolofinError, NumericalError

EXIT_CONFIG, EXIT_FORMAT, EXIT_NUMERICAL = 2, 3, 4
MANIFEST = "manifest.json"


# ---------------------------------------------------------------- run config

RUN_SECTIONS = ("fin", "mhpr", "dataset", "train", "bench", "seed", "out")


@dataclass(frozen=True)
class DatasetSection:
    sample_class: str = "sparse-blobs"
    spec: dict | None = None
    n_fovs: int = 14
    z_list: tuple[float, ...] = (300.0, 450.0, 600.0)
    side: int = 64
    noise_sigma: float = 0.02
    split_ratio: tuple[int, int] = (6, 1)


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-2
    val_fraction: float = 0.1


@dataclass(frozen=True)
class MhprSection:
    iterations: int = 100


@dataclass(frozen=True)
class BenchSection:
    classes: tuple[str, ...] = ("sparse-blobs", "connected-texture")
    M: int = 2
    z_pairs: tuple[tuple[float, float], ...] = ((300.0, 450.0),)
    n_fovs: int = 70
    side: int = 64
    noise_sigma: float = 0.02
    epochs: int = 10
    batch_size: int = 8
    channels: int = 16
    k_schedule: tuple[int, ...] = (16, 12, 8)
    lr: float = 1e-2


def _section(cls, doc: Any, name: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"config section {name!r}: unknown key(s) {unknown}")
    return cls(**doc)


@dataclass(frozen=True)
class RunConfig:
    """A whole-run JSON document. Every section is optional; unknown keys are rejected."""

    fin: dict | None = None
    mhpr: MhprSection = field(default_factory=MhprSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    train: TrainSection = field(default_factory=TrainSection)
    bench: BenchSection = field(default_factory=BenchSection)
    seed: int | None = None
    out: str | None = None

    @classmethod
    def from_dict(cls, doc: Any) -> "RunConfig":
        from .fin import FinConfig
        if not isinstance(doc, dict):
            raise ConfigError("run config must be a JSON object")
        unknown = sorted(set(doc) - set(RUN_SECTIONS))
        if unknown:
            raise ConfigError(f"run config: unknown key(s) {unknown}")
        fin = doc.get("fin")
        if fin is not None:
            FinConfig.from_dict(fin)
        seed = doc.get("seed")
        if seed is not None and (not isinstance(seed, int) or isinstance(seed, bool) or seed < 0):
            raise ConfigError(f"run config: seed must be a nonnegative integer, got {seed!r}")
        out = doc.get("out")
        if out is not None and not isinstance(out, str):
            raise ConfigError("run config: out must be a string")
        return cls(
            fin=fin,
            mhpr=_section(MhprSection, doc.get("mhpr", {}), "mhpr"),
            dataset=_section(DatasetSection, doc.get("dataset", {}), "dataset"),
            train=_section(TrainSection, doc.get("train", {}), "train"),
            bench=_section(BenchSection, doc.get("bench", {}), "bench"),
            seed=seed,
            out=out,
        )


def load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise FormatError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    try:
        return RunConfig.from_dict(doc)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def pick(flag, fallback):
    return fallback if flag is None else flag


# ---------------------------------------------------------------- manifest

def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out_dir: Path, command: str, args: dict, seed: int | None,
                   outputs: Sequence[Path], volatile: Sequence[Path] = ()) -> Path:
    """Record how to rerun ``command`` and what it produced. ``volatile`` files are listed without digests."""
    vol = {p.resolve() for p in volatile}
    entries = []
    for p in sorted(outputs, key=lambda q: q.name):
        entry = {"path": p.name}
        if p.resolve() in vol:
            entry["deterministic"] = False
        else:
            entry["sha256"] = _digest(p)
        entries.append(entry)
    doc = {
        "tool": "holofin",
        "version": __version__,
        "command": command,
        "args": args,
        "config_hash": hashlib.sha256(_canonical({"command": command, "args": args}).encode()).hexdigest(),
        "seed": seed,
        "outputs": entries,
    }
    path = out_dir / MANIFEST
    existing = _dataset_manifest(path)
    if existing is not None:
        # a dataset directory already owns manifest.json; the run record nests inside it
        existing["run"] = doc
        doc = existing
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _dataset_manifest(path: Path) -> dict | None:
    if not path.exists():
        return None
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError):
        return None
    return doc if isinstance(doc, dict) and doc.get("format") == "holofin-dataset" else None


# ---------------------------------------------------------------- helpers

def resolve_threads(flag: int | None) -> int:
    if flag is not None:
        n = flag
    elif os.environ.get("HOLOFIN_THREADS"):
        try:
            n = int(os.environ["HOLOFIN_THREADS"])
        except ValueError as exc:
            raise ConfigError(f"HOLOFIN_THREADS must be an integer, got {os.environ['HOLOFIN_THREADS']!r}") from exc
    else:
        n = os.cpu_count() or 1
    if n < 1:
        raise ConfigError(f"--threads must be >= 1, got {n}")
    return n


@contextmanager
def executor_for(threads: int):
    if threads == 1:
        yield None
    else:
        with ThreadPoolExecutor(threads) as ex:
            yield ex


def _out_dir(path: str) -> Path:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _require(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FormatError(f"{what} not found: {path}")
    return p


def _parse_pair(text: str) -> tuple[float, float]:
    parts = text.split(",")
    try:
        vals = tuple(float(x) for x in parts)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad z pair {text!r}; expected z1,z2") from exc
    if len(vals) != 2:
        raise argparse.ArgumentTypeError(f"bad z pair {text!r}; expected z1,z2")
    return vals


def _args_doc(ns: argparse.Namespace) -> dict:
    skip = {"func", "threads"}
    return {k: v for k, v in sorted(vars(ns).items()) if k not in skip}


def _preview(path: Path, image: np.ndarray) -> Path:
    from .formats import write_pgm16
    img = np.asarray(image, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    scaled = np.zeros_like(img) if hi == lo else (img - lo) / (hi - lo)
    write_pgm16(path, np.round(scaled * 65535).astype(np.uint16))
    return path


# ---------------------------------------------------------------- subcommands

def cmd_simulate(ns, run: RunConfig) -> tuple[list[Path], list[Path]]:
    from .formats import read_cfld, write_cfld, write_stack
    from .optics import DEFAULT_PITCH, DEFAULT_WAVELENGTH, derive_seed, simulate_stack
    from .synth import DEFAULT_SPECS, SampleSpec, generate_sample
    out = _out_dir(ns.out)
    seed = pick(ns.seed, pick(run.seed, 0))
    ds = run.dataset
    if ns.field is not None:
        truth = read_cfld(_require(ns.field, "sample field"))
    else:
        cls = pick(ns.sample_class, ds.sample_class)
        spec = SampleSpec.from_dict(ds.spec) if ds.spec else DEFAULT_SPECS.get(cls)
        if spec is None:
            raise ConfigError(f"--sample-class: unknown class {cls!r}; known: {sorted(DEFAULT_SPECS)}")
        truth = generate_sample(spec, pick(ns.side, ds.side), pick(ns.pitch, DEFAULT_PITCH),
                                pick(ns.wavelength, DEFAULT_WAVELENGTH), derive_seed(seed, "sample"))
    z = tuple(pick(ns.z, ds.z_list))
    stack = simulate_stack(truth, z, pick(ns.noise, ds.noise_sigma), derive_seed(seed, "stack"))
    write_stack(out / "stack.json", stack)
    write_cfld(out / "truth.cfld", truth)
    outputs = [out / "stack.json", out / "truth.cfld"] + [out / f"stack_holo_{i}.cfld" for i in range(stack.M)]
    return outputs, []


def cmd_mhpr(ns, run: RunConfig):
    from .classical import MhprConfig, mhpr_reconstruct
    from .formats import read_stack, write_cfld, write_csv
    stack = read_stack(_require(ns.stack, "stack index"))
    iters = pick(ns.iters, run.mhpr.iterations)
    res = mhpr_reconstruct(stack, MhprConfig(iters, record_residuals=ns.residuals))
    if not np.all(np.isfinite(res.field.data)):
        raise NumericalError("MH-PR produced non-finite values")
    out_path = Path(ns.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_cfld(out_path, res.field)
    outputs = [out_path]
    if ns.residuals:
        rpath = out_path.with_name(out_path.stem + "_residuals.csv")
        write_csv(rpath, ("iteration", "residual"), [(i + 1, r) for i, r in enumerate(res.residuals)])
        outputs.append(rpath)
    return outputs, []


def cmd_autofocus(ns, run: RunConfig):
    import warnings
    from .classical import DegenerateGridWarning, focus_scan
    from .formats import read_intensity, write_csv
    holo = read_intensity(_require(ns.hologram, "hologram"))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateGridWarning)
        scan = focus_scan(holo, ns.z_min, ns.z_max, ns.step)
    out = _out_dir(ns.out)
    doc = {"z": scan.z, "refined": scan.refined, "z_min": ns.z_min, "z_max": ns.z_max, "step": ns.step}
    (out / "focus.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    write_csv(out / "focus_scan.csv", ("z", "score"), zip(scan.grid.tolist(), scan.scores.tolist()))
    if not scan.refined:
        print(f"warning: focus peak at the edge of [{ns.z_min:g}, {ns.z_max:g}]; estimate not refined",
              file=sys.stderr)
    print(f"z = {scan.z:.3f} um")
    return [out / "focus.json", out / "focus_scan.csv"], []


def cmd_psr(ns, run: RunConfig):
    from .classical import LowResBurst, area_downsample_burst, estimate_shifts, pixel_super_resolve
    from .formats import read_intensity, write_cfld, write_csv
    out = _out_dir(ns.out)
    if ns.from_fine is not None:
        fine = read_intensity(_require(ns.from_fine, "fine image"))
        burst = area_downsample_burst(fine, ns.factor)
    elif ns.frames:
        frames = tuple(read_intensity(_require(f, "frame")) for f in ns.frames)
        burst = LowResBurst(frames)
    else:
        raise ConfigError("psr needs --frames or --from-fine")
    shifts = estimate_shifts(burst)
    sr = pixel_super_resolve(burst, ns.factor, shifts)
    write_cfld(out / "sr.cfld", sr)
    write_csv(out / "shifts.csv", ("frame", "dx", "dy"), [(i, dx, dy) for i, (dx, dy) in enumerate(shifts)])
    _preview(out / "sr.pgm", sr.data)
    return [out / "sr.cfld", out / "shifts.csv", out / "sr.pgm"], []


def cmd_dataset(ns, run: RunConfig):
    from .synth import DEFAULT_SPECS, SampleSpec, build_dataset, save_dataset
    ds_cfg = run.dataset
    cls = pick(ns.sample_class, ds_cfg.sample_class)
    if ns.spec is not None:
        spec = SampleSpec.from_dict(json.loads(_require(ns.spec, "spec file").read_text()))
    elif ds_cfg.spec:
        spec = SampleSpec.from_dict(ds_cfg.spec)
    elif cls in DEFAULT_SPECS:
        spec = DEFAULT_SPECS[cls]
    else:
        raise ConfigError(f"--sample-class: unknown class {cls!r}; known: {sorted(DEFAULT_SPECS)}")
    seed = pick(ns.seed, pick(run.seed, 0))
    with executor_for(ns.threads_resolved) as ex:
        ds = build_dataset(spec, pick(ns.n_fovs, ds_cfg.n_fovs), tuple(pick(ns.z, ds_cfg.z_list)),
                           pick(ns.side, ds_cfg.side), pick(ns.noise, ds_cfg.noise_sigma),
                           tuple(pick(ns.split, ds_cfg.split_ratio)), seed, executor=ex)
    out = _out_dir(ns.out)
    save_dataset(ds, out)
    outputs = sorted(p for p in out.iterdir() if p.name != MANIFEST)
    print(f"{len(ds.train)} train / {len(ds.test)} test FOVs -> {out}")
    return outputs, []


def cmd_train(ns, run: RunConfig):
    from .fin import FinConfig, TrainOptions, config_to_json, train
    from .synth import load_dataset
    ds = load_dataset(_require(ns.dataset, "dataset directory"))
    if ns.config_fin is not None:
        cfg = FinConfig.from_dict(json.loads(_require(ns.config_fin, "FIN config").read_text()))
    elif run.fin is not None:
        cfg = FinConfig.from_dict(run.fin)
    else:
        cfg = FinConfig(input_side=ds.items[0].stack.shape[0], M=ds.items[0].stack.M)
    tr = run.train
    seed = pick(ns.seed, pick(run.seed, 0))
    opts = TrainOptions(lr=pick(ns.lr, tr.lr), val_fraction=pick(ns.val_fraction, tr.val_fraction))
    out = _out_dir(ns.out)

    def report(rec):
        print(f"epoch {rec.epoch:4d}  lr {rec.lr:.2e}  train {rec.train_loss:.5f}  val {rec.val_loss:.5f}  "
              f"val amp RMSE {rec.val_amp_rmse:.5f}", flush=True)

    model, log = train(ds, cfg, pick(ns.epochs, tr.epochs), pick(ns.batch_size, tr.batch_size), seed, opts,
                       progress=None if ns.quiet else report)
    model.save(out / "model.finw")
    log.write_csv(out / "train_log.csv")
    (out / "fin_config.json").write_text(config_to_json(cfg))
    return [out / "model.finw", out / "train_log.csv", out / "fin_config.json"], []


def cmd_infer(ns, run: RunConfig):
    from .fin import FinModel, infer, tile_infer
    from .formats import read_stack, write_cfld
    model = FinModel.load(_require(ns.model, "model"))
    stack = read_stack(_require(ns.stack, "stack index"))
    fld = tile_infer(model, stack, ns.batch) if ns.tile else infer(model, stack)
    if not np.all(np.isfinite(fld.data)):
        raise NumericalError("inference produced non-finite values")
    out_path = Path(ns.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_cfld(out_path, fld)
    return [out_path], []


def _bench_config(ns, run: RunConfig):
    from .bench import BenchConfig
    b = run.bench
    return BenchConfig(n_fovs=pick(ns.n_fovs, b.n_fovs), side=pick(ns.side, b.side),
                       noise_sigma=pick(ns.noise, b.noise_sigma), epochs=pick(ns.epochs, b.epochs),
                       batch_size=pick(ns.batch_size, b.batch_size), seed=pick(ns.seed, pick(run.seed, 0)),
                       channels=pick(ns.channels, b.channels), k_schedule=tuple(pick(ns.k_schedule, b.k_schedule)),
                       lr=b.lr, mhpr_iterations=pick(ns.iters, run.mhpr.iterations))


def cmd_bench_gen(ns, run: RunConfig):
    from .bench import bench_generalization
    cfg = _bench_config(ns, run)
    with executor_for(ns.threads_resolved) as ex:
        report = bench_generalization(pick(ns.classes, run.bench.classes), pick(ns.M, run.bench.M), cfg,
                                      executor=ex)
    out = _out_dir(ns.out)
    report.write_csv(out / "bench_gen.csv")
    (out / "bench_gen.txt").write_text(report.render() + "\n")
    print(report.render())
    return [out / "bench_gen.csv", out / "bench_gen.txt"], []


def cmd_bench_z(ns, run: RunConfig):
    from .bench import bench_z_pairs
    cfg = _bench_config(ns, run)
    with executor_for(ns.threads_resolved) as ex:
        report = bench_z_pairs(pick(ns.pairs, run.bench.z_pairs), cfg, pick(ns.sample_class, "sparse-blobs"),
                               executor=ex)
    out = _out_dir(ns.out)
    report.write_csv(out / "bench_z.csv")
    (out / "bench_z.txt").write_text(report.render() + "\n")
    print(report.render())
    return [out / "bench_z.csv", out / "bench_z.txt"], []


def cmd_bench_time(ns, run: RunConfig):
    from .bench import bench_timing
    from .fin import FinModel
    from .optics import derive_seed
    from .synth import DEFAULT_SPECS, generate_sample, load_dataset
    models = [FinModel.load(_require(m, "model")) for m in ns.model]
    side = models[0].config.input_side
    if any(m.config.input_side != side for m in models):
        raise GeometryError("all timed models must share one input_side")
    if ns.dataset is not None:
        truths = [it.truth for it in load_dataset(_require(ns.dataset, "dataset directory")).items][:ns.n_fov]
    else:
        seed = pick(ns.seed, pick(run.seed, 0))
        spec = DEFAULT_SPECS["sparse-blobs"]
        truths = [generate_sample(spec, side, seed=derive_seed(seed, "timing", i)) for i in range(ns.n_fov)]
    table = bench_timing(models, truths, ns.batch_sizes, ns.mhpr_M, pick(ns.iters, run.mhpr.iterations),
                         repeats=ns.repeats)
    out = _out_dir(ns.out)
    table.write_csv(out / "timing.csv")
    print(table.render())
    return [out / "timing.csv"], [out / "timing.csv"]


def cmd_metrics(ns, run: RunConfig):
    from .formats import read_cfld
    from .metrics import field_metrics
    pred = read_cfld(_require(ns.pred, "prediction"))
    gt = read_cfld(_require(ns.gt, "ground truth"))
    if pred.shape != gt.shape:
        raise GeometryError(f"--pred is {pred.shape}, --gt is {gt.shape}")
    m = field_metrics(pred, gt, align_phase=not ns.no_align)
    out = _out_dir(ns.out)
    doc = {"amp_rmse": m.amp_rmse, "phase_rmse": m.phase_rmse, "amp_ssim": m.amp_ssim, "phase_ssim": m.phase_ssim}
    (out / "metrics.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    outputs = [out / "metrics.json"]
    if ns.diff_pgm:
        outputs.append(_preview(out / "amp_diff.pgm", np.abs(np.abs(pred.data) - np.abs(gt.data))))
    for k, v in doc.items():
        print(f"{k:11s} {v:.6f}")
    return outputs, []


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: $HOLOFIN_THREADS, else all cores); 1 is bit-reproducible")
    common.add_argument("--config", default=None, help="run config JSON; explicit flags override its values")
    common.add_argument("--seed", type=int, default=None, help="master seed (default: config seed, else 0)")

    p = argparse.ArgumentParser(prog="holofin", description="Lens-free holography reconstruction toolkit.")
    p.add_argument("--version", action="version", version=f"holofin {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("simulate", parents=[common], help="simulate a sample and its hologram stack")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--field", default=None, help="CFLD sample field to use instead of a generated one")
    s.add_argument("--sample-class", default=None, help="synthetic class (default sparse-blobs)")
    s.add_argument("--side", type=int, default=None, help="FOV side in pixels (default 64)")
    s.add_argument("--pitch", type=float, default=None, help="pixel pitch in um (default 0.37)")
    s.add_argument("--wavelength", type=float, default=None, help="wavelength in um (default 0.530)")
    s.add_argument("--z", type=float, nargs="+", default=None, help="sample-to-sensor distances in um")
    s.add_argument("--noise", type=float, default=None, help="Gaussian intensity noise sigma")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("mhpr", parents=[common], help="multi-height phase retrieval")
    s.add_argument("--stack", required=True, help="stack index JSON")
    s.add_argument("--iters", type=int, default=None, help="iterations (default 100)")
    s.add_argument("--out", required=True, help="output CFLD path")
    s.add_argument("--residuals", action="store_true", help="also write per-iteration residuals CSV")
    s.set_defaults(func=cmd_mhpr)

    s = sub.add_parser("autofocus", parents=[common], help="estimate the sample-to-sensor distance")
    s.add_argument("--hologram", required=True, help="hologram CFLD (real intensity)")
    s.add_argument("--z-min", type=float, required=True, help="scan start in um")
    s.add_argument("--z-max", type=float, required=True, help="scan end in um")
    s.add_argument("--step", type=float, default=5.0, help="coarse grid step in um (default 5)")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_autofocus)

    s = sub.add_parser("psr", parents=[common], help="pixel super-resolution by shift-and-add")
    s.add_argument("--frames", nargs="+", default=None, help="low-resolution frame CFLDs, first is the reference")
    s.add_argument("--from-fine", default=None, help="fine CFLD to area-downsample into a factor x factor burst")
    s.add_argument("--factor", type=int, required=True, help="upsampling factor")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_psr)

    s = sub.add_parser("dataset", parents=[common], help="build a synthetic training/test dataset")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--sample-class", default=None, help="synthetic class (default sparse-blobs)")
    s.add_argument("--spec", default=None, help="sample spec JSON overriding the class defaults")
    s.add_argument("--n-fovs", type=int, default=None, help="number of FOVs (default 14)")
    s.add_argument("--z", type=float, nargs="+", default=None, help="input plane distances in um")
    s.add_argument("--side", type=int, default=None, help="FOV side in pixels (default 64)")
    s.add_argument("--noise", type=float, default=None, help="Gaussian intensity noise sigma (default 0.02)")
    s.add_argument("--split", type=int, nargs=2, default=None, metavar=("TRAIN", "TEST"),
                   help="train:test ratio (default 6 1)")
    s.set_defaults(func=cmd_dataset)

    s = sub.add_parser("train", parents=[common], help="train a FIN model")
    s.add_argument("--dataset", required=True, help="dataset directory")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--fin-config", dest="config_fin", default=None, help="FinConfig JSON")
    s.add_argument("--epochs", type=int, default=None, help="epochs (default 10)")
    s.add_argument("--batch-size", type=int, default=None, help="minibatch size (default 8)")
    s.add_argument("--lr", type=float, default=None, help="peak learning rate (default 1e-2)")
    s.add_argument("--val-fraction", type=float, default=None, help="validation share of training FOVs")
    s.add_argument("--quiet", action="store_true", help="suppress per-epoch progress")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", parents=[common], help="reconstruct a field with a trained FIN")
    s.add_argument("--model", required=True, help="FINW checkpoint")
    s.add_argument("--stack", required=True, help="stack index JSON")
    s.add_argument("--out", required=True, help="output CFLD path")
    s.add_argument("--tile", action="store_true", help="tile FOVs larger than the model input")
    s.add_argument("--batch", type=int, default=20, help="tiles per forward pass (default 20)")
    s.set_defaults(func=cmd_infer)

    def bench_flags(s):
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--n-fovs", type=int, default=None, help="FOVs per dataset (default 70)")
        s.add_argument("--side", type=int, default=None, help="FOV side in pixels (default 64)")
        s.add_argument("--noise", type=float, default=None, help="Gaussian intensity noise sigma (default 0.02)")
        s.add_argument("--epochs", type=int, default=None, help="training epochs per model (default 10)")
        s.add_argument("--batch-size", type=int, default=None, help="minibatch size (default 8)")
        s.add_argument("--channels", type=int, default=None, help="FIN channel width (default 16)")
        s.add_argument("--k-schedule", type=int, nargs="+", default=None, help="half windows (default 16 12 8)")
        s.add_argument("--iters", type=int, default=None, help="MH-PR iterations (default 100)")

    s = sub.add_parser("bench-gen", parents=[common], help="train-class x test-class generalization matrix")
    bench_flags(s)
    s.add_argument("--classes", nargs="+", default=None, help="sample classes (default sparse-blobs connected-texture)")
    s.add_argument("--M", type=int, default=None, help="holograms per stack (default 2)")
    s.set_defaults(func=cmd_bench_gen)

    s = sub.add_parser("bench-z", parents=[common], help="FIN(M=2) vs MH-PR(M=2) over z pairs")
    bench_flags(s)
    s.add_argument("--pairs", type=_parse_pair, nargs="+", default=None, help="z pairs as z1,z2 (default 300,450)")
    s.add_argument("--sample-class", default=None, help="synthetic class (default sparse-blobs)")
    s.set_defaults(func=cmd_bench_z)

    s = sub.add_parser("bench-time", parents=[common], help="inference timing table")
    s.add_argument("--model", nargs="+", required=True, help="FINW checkpoints to time")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--dataset", default=None, help="dataset whose sample fields are used (default: generated)")
    s.add_argument("--n-fov", type=int, default=20, help="FOVs per measurement (default 20)")
    s.add_argument("--batch-sizes", type=int, nargs="+", default=[1, 20], help="FIN batch sizes (default 1 20)")
    s.add_argument("--mhpr-M", type=int, nargs="+", default=[2, 3], help="MH-PR plane counts (default 2 3)")
    s.add_argument("--iters", type=int, default=None, help="MH-PR iterations (default 100)")
    s.add_argument("--repeats", type=int, default=3, help="timing repeats, best kept (default 3)")
    s.set_defaults(func=cmd_bench_time)

    s = sub.add_parser("metrics", parents=[common], help="RMSE and SSIM between two fields")
    s.add_argument("--pred", required=True, help="reconstructed field CFLD")
    s.add_argument("--gt", required=True, help="reference field CFLD")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--no-align", action="store_true", help="skip global phase alignment")
    s.add_argument("--diff-pgm", action="store_true", help="also write an amplitude difference PGM")
    s.set_defaults(func=cmd_metrics)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    from .optics import fft_workers, set_fft_workers
    parser = build_parser()
    ns = parser.parse_args(argv)
    previous_workers = fft_workers()
    try:
        return _dispatch(ns)
    finally:
        set_fft_workers(previous_workers)


def _dispatch(ns: argparse.Namespace) -> int:
    from .optics import set_fft_workers
    try:
        run = load_run_config(ns.config)
        ns.threads_resolved = resolve_threads(ns.threads)
        set_fft_workers(ns.threads_resolved)
        outputs, volatile = ns.func(ns, run)
        args = _args_doc(ns)
        args.pop("threads_resolved", None)
        seed = ns.seed if ns.seed is not None else run.seed
        out_path = Path(ns.out)
        manifest_dir = out_path if out_path.is_dir() else out_path.parent
        write_manifest(manifest_dir, ns.command, args, seed, outputs, volatile)
    except (ConfigError, GeometryError) as exc:
        print(f"holofin {ns.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FormatError as exc:
        print(f"holofin {ns.command}: malformed input: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except OSError as exc:
        print(f"holofin {ns.command}: cannot read input: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (NumericalError, FloatingPointError) as exc:
        print(f"holofin {ns.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except HolofinError as exc:
        print(f"holofin {ns.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"holofin {ns.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
