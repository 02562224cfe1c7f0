"""A miniature end-to-end CLI session shared by the CLI and acceptance tests."""

from __future__ import annotations

import json
from pathlib import Path

from holofin.cli import main
from holofin.fin import FinConfig

COMMON = ["--threads", "1", "--seed", "7"]
BENCH = ["--n-fovs", "4", "--side", "16", "--noise", "0.01", "--epochs", "1", "--batch-size", "2",
         "--channels", "4", "--k-schedule", "4", "--iters", "5"]

STEPS = [
    ("simulate", ["--out", "sim", "--side", "16", "--z", "300", "450", "--noise", "0.01"]),
    ("simulate", ["--out", "sim_big", "--side", "40", "--z", "300", "450", "--noise", "0.01"]),
    ("mhpr", ["--stack", "sim/stack.json", "--iters", "5", "--out", "mhpr/field.cfld", "--residuals"]),
    ("autofocus", ["--hologram", "sim_big/stack_holo_0.cfld", "--z-min", "270", "--z-max", "330", "--step", "5",
                   "--out", "focus"]),
    ("psr", ["--from-fine", "sim/stack_holo_0.cfld", "--factor", "2", "--out", "psr"]),
    ("dataset", ["--out", "ds", "--side", "16", "--n-fovs", "4", "--z", "300", "450", "--noise", "0.01"]),
    ("train", ["--dataset", "ds", "--out", "model", "--fin-config", "fin.json", "--epochs", "1",
               "--batch-size", "2", "--quiet"]),
    ("infer", ["--model", "model/model.finw", "--stack", "sim/stack.json", "--out", "infer/field.cfld"]),
    ("infer", ["--model", "model/model.finw", "--stack", "sim_big/stack.json", "--out", "tiled/field.cfld",
               "--tile", "--batch", "3"]),
    ("metrics", ["--pred", "infer/field.cfld", "--gt", "sim/truth.cfld", "--out", "metrics", "--diff-pgm"]),
    ("bench-gen", ["--out", "bgen", "--M", "2"] + BENCH),
    ("bench-z", ["--out", "bz", "--pairs", "300,450"] + BENCH),
    ("bench-time", ["--model", "model/model.finw", "--out", "btime", "--n-fov", "2", "--batch-sizes", "1", "2",
                    "--mhpr-M", "2", "--iters", "2", "--repeats", "1"]),
]

# wall-clock measurements; the manifest lists them without a digest
VOLATILE = {"btime/timing.csv"}


def write_fin_config(workdir: Path) -> None:
    cfg = FinConfig(input_side=16, M=2, channels=4, k_schedule=(4,))
    (workdir / "fin.json").write_text(json.dumps(cfg.to_dict()))


def run_pipeline(workdir: Path, monkeypatch) -> dict[str, int]:
    """Run every subcommand inside ``workdir`` with relative paths; return exit codes by step label."""
    monkeypatch.chdir(workdir)
    write_fin_config(workdir)
    codes = {}
    for i, (cmd, args) in enumerate(STEPS):
        codes[f"{i}:{cmd}"] = main([cmd] + args + COMMON)
    return codes


def snapshot(workdir: Path) -> dict[str, bytes]:
    return {str(p.relative_to(workdir)): p.read_bytes()
            for p in sorted(workdir.rglob("*")) if p.is_file()}
