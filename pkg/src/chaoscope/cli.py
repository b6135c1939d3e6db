"""``chaoscope`` command-line front end.

Exit codes: 0 success, 1 configuration or usage error, 2 numerical abort
(NaN or infinity), 3 search budget exhausted.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import ConfigError, RunConfig, load, loads
from .model import NumericalAbort
from .numerics import PrecisionMode
from .plotting import DEFAULT_KIND, PlotKind, plot
from .probes import SearchBudgetExhausted
from .report import (
    MANIFEST_NAME,
    OutputCollision,
    atomic_write,
    check_collision,
    read_csv,
    sha256_file,
    table_to_csv,
    write_manifest,
)
from .runner import Setup, execute

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_BUDGET = 0, 1, 2, 3
THREADS_ENV = "CHAOSCOPE_THREADS"

DEMOS = {
    "regimes": """
schema_version = 1
output_dir = "chaoscope-demo/regimes"
[model]
seed = 1
[probe]
kind = "directional_sweep"
directions = ["v1", "v10", "v64", "random:3"]
""",
    "avalanche": """
schema_version = 1
output_dir = "chaoscope-demo/avalanche"
[model]
seed = 1
[probe]
kind = "layerwise_gain"
directions = "spanning:8"
eps = 1e-9
""",
    "boundary": """
schema_version = 1
output_dir = "chaoscope-demo/boundary"
[model]
seed = 1
[probe]
kind = "angular_boundary"
plane = [1, 2]
n_angles = 360
""",
}


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == "":
        return nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "precision", None):
        cfg = cfg.with_precision(args.precision)
    if getattr(args, "output_dir", None):
        cfg = replace(cfg, output_dir=str(args.output_dir))
    return cfg


def run_config(cfg: RunConfig, overwrite: bool = False) -> int:
    out = Path(cfg.output_dir)
    kind = cfg.probe.kind
    names = [f"{kind}.csv"] + ([f"{kind}.svg"] if cfg.plot else [])
    check_collision(out, names, overwrite)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    outcome, _ = execute(cfg, cache_dir=out / "cache")
    wall = time.perf_counter() - t0
    csv_path = out / names[0]
    atomic_write(csv_path, table_to_csv(outcome.table))
    files = {csv_path.name: sha256_file(csv_path)}
    if cfg.plot and len(outcome.table):
        rows = [dict(zip(outcome.table.columns, r)) for r in outcome.table.rows]
        svg_path = out / names[1]
        atomic_write(svg_path, plot(rows, DEFAULT_KIND[kind]))
        files[svg_path.name] = sha256_file(svg_path)
    manifest = {
        "schema_version": cfg.schema_version,
        "artifact_version": __version__,
        "config": cfg.to_dict(),
        "probe": kind,
        "wall_time_s": wall,
        "record_counts": {csv_path.name: len(outcome.table)},
        "columns": outcome.table.columns,
        "thresholds": outcome.thresholds,
        "summary": outcome.summary,
        "flagged_records": outcome.flagged,
        "exhausted_searches": outcome.exhausted,
        "files": files,
    }
    write_manifest(out, manifest)
    print(f"{kind}: {len(outcome.table)} records -> {csv_path} ({wall:.2f} s)")
    if outcome.flagged:
        print(f"error: {outcome.flagged} records hit NaN/inf and were flagged", file=sys.stderr)
        return EXIT_NUMERIC
    if outcome.exhausted:
        print(f"error: {outcome.exhausted} searches exhausted their budget", file=sys.stderr)
        return EXIT_BUDGET
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _apply_overrides(load(args.config), args)
    return run_config(cfg, args.overwrite)


def cmd_demo(args) -> int:
    cfg = _apply_overrides(loads(DEMOS[args.name]), args)
    return run_config(cfg, args.overwrite)


def cmd_spectrum(args) -> int:
    cfg = _apply_overrides(load(args.config), args)
    setup = Setup(cfg, cache_dir=Path(cfg.output_dir) / "cache")
    sp = setup.spectrum
    print(f"spectrum ({setup.spectrum_source}) -> {setup.spectrum_path()}")
    print(f"sigma_1 = {sp.sigma[0]:.6e}  sigma_d = {sp.sigma[-1]:.6e}  condition = {sp.condition:.3e}")
    return EXIT_OK


def cmd_plot(args) -> int:
    src = Path(args.csv)
    if not src.exists():
        raise ConfigError(f"no such file: {src}")
    if not (src.parent / MANIFEST_NAME).exists():
        raise ConfigError(f"{src} has no {MANIFEST_NAME} alongside it; refusing to plot an unmanifested data file")
    _, rows = read_csv(src)
    try:
        svg = plot(rows, PlotKind.parse(args.kind))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    dest = Path(args.out) if args.out else src.with_suffix(".svg")
    if dest.exists() and not args.overwrite:
        raise OutputCollision(f"{dest} already exists (pass --overwrite to replace it)")
    atomic_write(dest, svg)
    print(f"{PlotKind.parse(args.kind).value} -> {dest}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    # usage errors share the configuration-error exit code
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="chaoscope", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"chaoscope {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, with_config=True):
        if with_config:
            p.add_argument("config", help="TOML run configuration")
        p.add_argument("--precision", choices=[m.value for m in PrecisionMode], help="override model.precision")
        p.add_argument("--output-dir", help="override output_dir")
        p.add_argument("--overwrite", action="store_true", help="replace existing outputs")

    common(sub.add_parser("run", help="run the configured probe"))
    common(sub.add_parser("spectrum", help="compute and cache the reference spectrum"))
    p = sub.add_parser("plot", help="render a probe CSV as SVG")
    p.add_argument("csv")
    p.add_argument("--kind", required=True, help=", ".join(k.value for k in PlotKind))
    p.add_argument("--out", help="SVG path (default: next to the CSV)")
    p.add_argument("--overwrite", action="store_true")
    p = sub.add_parser("demo", help="canned desk-scale reproductions")
    p.add_argument("name", choices=sorted(DEMOS))
    common(p, with_config=False)
    return ap


COMMANDS = {"run": cmd_run, "spectrum": cmd_spectrum, "plot": cmd_plot, "demo": cmd_demo}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _thread_limit():
            return COMMANDS[args.command](args)
    except (ConfigError, OutputCollision) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalAbort, ArithmeticError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SearchBudgetExhausted as exc:
        print(f"search budget exhausted: {exc}", file=sys.stderr)
        return EXIT_BUDGET


if __name__ == "__main__":
    sys.exit(main())
