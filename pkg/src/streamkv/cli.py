"""Command-line front end: simulate, replay, ablate, calibrate, gen-trace.

Exit codes: 0 success, 2 usage error, 3 configuration error, 4 trace error.
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from typing import Any, Sequence

from . import __version__
from .cache_engine import POLICIES, BudgetConfig, Engine, calibrate_thresholds
from .config import (
    budget_from_kv,
    budget_to_kv,
    dump_kv,
    load_kv,
    pooling_to_kv,
    spec_from_kv,
    spec_to_kv,
)
from .errors import StreamKVError, TraceError
from .harness import StreamSpec, SyntheticStream, place_needles
from .report import RunReport
from .runner import run_policy
from .trace_io import TraceHeader, read_trace, write_trace

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_TRACE = 4

ABLATE_COLUMNS = (
    "alpha",
    "recent",
    "ratio",
    "seed",
    "status",
    "policy",
    "memory_budget",
    "target_size",
    "recent_frames",
    "compressions",
    "peak_tokens",
    "needles_retained",
    "needle_retention",
    "needle_mass",
    "static_eviction_precision",
    "static_eviction_recall",
    "selection_digest",
    "note",
)
DEFAULT_GRID = ("alpha=0,0.2,0.4,0.6,0.8,1", "recent=0.125,0.25,0.5", "ratio=0.75,0.5,0.25")


class UsageError(Exception):
    """Flags that parse individually but make no sense together."""


# ---------------------------------------------------------------- flag groups


def _grid(text: str) -> tuple[int, int]:
    try:
        rows, cols = (int(x) for x in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected RxC, got {text!r}") from None
    return rows, cols


def _add_budget_flags(p: argparse.ArgumentParser, policy_list: bool = True) -> None:
    g = p.add_argument_group("budget")
    g.add_argument("--config", help="key = value file with engine and/or stream settings")
    g.add_argument("--budget", type=int, help="memory budget M in tokens")
    g.add_argument("--target", type=int, help="target size C in tokens (default 0.75 M)")
    g.add_argument("--recent", type=int, help="recent frames r (default max(1, M/p/8))")
    g.add_argument("--alpha", type=float, help="TaR share of the target (default 0.5)")
    helptext = "comma-separated policies" if policy_list else "eviction policy"
    g.add_argument("--policy", help=f"{helptext}: {', '.join(POLICIES)}")
    for i in (1, 2, 3):
        g.add_argument(f"--tau{i}", type=float, help=f"CV threshold tau{i}")
    g.add_argument("--snapkv-window", type=int)
    g.add_argument("--snapkv-pool-kernel", type=int)


def _add_stream_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("stream")
    g.add_argument("--frames", type=int, help="number of frames (default 200)")
    g.add_argument("--patch-grid", type=_grid, help="patch grid RxC (default 8x8)")
    g.add_argument("--layers", type=int, help="layers (default 1)")
    g.add_argument("--heads", type=int, help="heads per layer (default 2)")
    g.add_argument("--head-dim", type=int, help="head dimension (default 16)")
    g.add_argument("--static-fraction", type=float)
    g.add_argument("--noise-sigma", type=float)
    g.add_argument(
        "--needles",
        help="needle count, or explicit frame:row:col[:boost] list separated by commas",
    )
    g.add_argument("--needle-boost", type=float, default=5.0, help="boost for counted needles")
    g.add_argument("--seed", type=int)


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--workers", type=int, default=1, help="threads for per-layer compression")
    p.add_argument("--prefill", action="store_true", help="run attention for each appended frame")
    p.add_argument("--flush", action="store_true", help="compress the tail at stream end")
    p.add_argument("--survivor-log", help="write the binary survivor log here")
    p.add_argument("--out", help="report path (default stdout)")
    p.add_argument("--format", choices=("json", "csv"), default="json")


_BUDGET_FLAGS = {
    "budget": "memory_budget",
    "target": "target_size",
    "recent": "recent_frames",
    "alpha": "alpha",
    "tau1": "tau1",
    "tau2": "tau2",
    "tau3": "tau3",
    "snapkv_window": "snapkv_window",
    "snapkv_pool_kernel": "snapkv_pool_kernel",
}
_STREAM_FLAGS = {
    "frames": "num_frames",
    "layers": "num_layers",
    "heads": "num_heads",
    "head_dim": "head_dim",
    "static_fraction": "static_fraction",
    "noise_sigma": "noise_sigma",
    "seed": "seed",
}
_STREAM_DEFAULTS = {"num_frames": "200", "grid_rows": "8", "grid_cols": "8"}


def _settings(args: argparse.Namespace, path: str | None = None) -> dict[str, str]:
    """Config file values overridden by any flag given on the command line."""
    path = path if path is not None else getattr(args, "config", None)
    settings = load_kv(path) if path else {}
    for flag, key in {**_BUDGET_FLAGS, **_STREAM_FLAGS}.items():
        value = getattr(args, flag, None)
        if value is not None:
            settings[key] = str(value)
    grid = getattr(args, "patch_grid", None)
    if grid is not None:
        settings["grid_rows"], settings["grid_cols"] = str(grid[0]), str(grid[1])
    return settings


def _policies(args: argparse.Namespace, settings: dict[str, str]) -> list[str]:
    raw = args.policy if args.policy is not None else settings.get("policy", "infinipot_v")
    names = [x.strip() for x in raw.split(",") if x.strip()]
    if not names:
        raise UsageError("--policy is empty")
    unknown = [n for n in names if n not in POLICIES]
    if unknown:
        raise UsageError(f"unknown policy {', '.join(unknown)}; choose from {', '.join(POLICIES)}")
    return names


def _budget(settings: dict[str, str]) -> BudgetConfig:
    settings = dict(settings)
    settings.setdefault("memory_budget", "6144")
    return budget_from_kv(settings)


def _spec(args: argparse.Namespace, settings: dict[str, str]) -> StreamSpec:
    merged = {**_STREAM_DEFAULTS, **settings}
    needles = getattr(args, "needles", None)
    if needles is not None and ":" not in needles:
        merged.pop("needles", None)
        spec = spec_from_kv(merged)
        try:
            count = int(needles)
        except ValueError:
            raise UsageError(f"--needles expects a count or frame:row:col list, got {needles!r}") from None
        if count < 0:
            raise UsageError("--needles count must be >= 0")
        placed = place_needles(count, spec.num_frames, spec.geometry, spec.seed, args.needle_boost)
        return replace(spec, needles=placed)
    if needles is not None:
        merged["needles"] = needles
    spec = spec_from_kv(merged)
    return spec


def _echo(base: BudgetConfig, spec_kv: dict[str, Any], policies: list[str]) -> dict[str, Any]:
    echo = budget_to_kv(base)
    echo.pop("policy")
    echo["policies"] = policies
    for key, value in spec_kv.items():
        if key == "needles":
            value = ", ".join(f"{n.frame}:{n.row}:{n.col}:{n.norm_boost!r}" for n in value or ())
        echo[key] = value
    return echo


def _emit(report: RunReport, args: argparse.Namespace) -> None:
    text = report.to_json() if args.format == "json" else report.to_csv()
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _run_all(
    args: argparse.Namespace,
    base: BudgetConfig,
    policies: list[str],
    make_frames,
    geometry,
    dims,
    stream: SyntheticStream | None,
    echo: dict[str, Any],
) -> RunReport:
    # validate every policy before running any of them
    configs = [replace(base, policy=name) for name in policies]
    for cfg in configs:
        cfg.resolve(geometry)
    results, timings = [], {}
    sink = open(args.survivor_log, "wb") if args.survivor_log else None
    try:
        for cfg in configs:
            res, timing, _ = run_policy(
                cfg,
                make_frames(),
                geometry,
                dims,
                stream=stream,
                workers=args.workers,
                prefill=args.prefill,
                flush=args.flush,
                log_sink=sink,
            )
            results.append(res)
            timings[cfg.policy] = timing
    finally:
        if sink is not None:
            sink.close()
    return RunReport(echo, results, timings)


# ---------------------------------------------------------------- commands


def cmd_simulate(args: argparse.Namespace) -> int:
    settings = _settings(args)
    policies = _policies(args, settings)
    base = _budget(settings)
    spec = _spec(args, settings)
    stream = SyntheticStream(spec)
    echo = _echo(base, spec_to_kv(spec), policies)
    report = _run_all(args, base, policies, lambda: iter(stream), spec.geometry, spec.dims, stream, echo)
    _emit(report, args)
    return EXIT_OK


def cmd_replay(args: argparse.Namespace) -> int:
    header, _ = read_trace(args.trace)
    geometry, dims = header.geometry, header.dims
    expected = {
        "patch-grid": (args.patch_grid, (geometry.grid_rows, geometry.grid_cols)),
        "layers": (args.layers, dims.num_layers),
        "heads": (args.heads, dims.num_heads),
        "head-dim": (args.head_dim, dims.head_dim),
    }
    for flag, (wanted, actual) in expected.items():
        if wanted is not None and wanted != actual:
            raise UsageError(f"--{flag} {wanted} does not match the trace header ({actual})")
    settings = _settings(args)
    policies = _policies(args, settings)
    base = _budget(settings)
    stream = None
    if args.stream_spec:
        spec = spec_from_kv(load_kv(args.stream_spec))
        if spec.geometry != geometry or spec.dims != dims or spec.num_frames != header.num_frames:
            raise UsageError("stream spec does not describe the trace (geometry, dims or frame count)")
        stream = SyntheticStream(spec)
        spec_kv = spec_to_kv(spec)
    else:
        spec_kv = {
            "num_frames": header.num_frames,
            "grid_rows": geometry.grid_rows,
            "grid_cols": geometry.grid_cols,
            "num_layers": dims.num_layers,
            "num_heads": dims.num_heads,
            "head_dim": dims.head_dim,
        }
    echo = _echo(base, spec_kv, policies)
    report = _run_all(args, base, policies, lambda: read_trace(args.trace)[1], geometry, dims, stream, echo)
    _emit(report, args)
    return EXIT_OK


def _parse_grid(items: Sequence[str]) -> dict[str, list[float]]:
    grid = {}
    for item in items:
        key, sep, values = item.partition("=")
        if not sep or key not in ("alpha", "recent", "ratio"):
            raise UsageError(f"grid axis must be alpha=, recent= or ratio=, got {item!r}")
        try:
            grid[key] = [float(v) for v in values.split(",") if v.strip()]
        except ValueError:
            raise UsageError(f"non-numeric value in grid axis {item!r}") from None
        if not grid[key]:
            raise UsageError(f"grid axis {key} is empty")
    for axis in DEFAULT_GRID:
        key, _, values = axis.partition("=")
        grid.setdefault(key, [float(v) for v in values.split(",")])
    return grid


def _ablate_cell(job: tuple) -> list[dict[str, Any]]:
    base, spec, policy, alpha, recent, ratio, seeds = job
    rows = []
    p = spec.geometry.p
    f = base.memory_budget // p
    for seed in seeds:
        row: dict[str, Any] = {"alpha": alpha, "recent": recent, "ratio": ratio, "seed": seed, "policy": policy}
        r = max(1, math.floor(recent * f))
        cfg = replace(
            base,
            policy=policy,
            alpha=alpha,
            recent_frames=r,
            target_size=math.floor(ratio * base.memory_budget),
        )
        try:
            cfg.resolve(spec.geometry)
        except StreamKVError as exc:
            row.update(status="skipped", recent_frames=r, note=str(exc))
            rows.append(row)
            continue
        stream = SyntheticStream(replace(spec, seed=seed))
        res, _, _ = run_policy(cfg, iter(stream), spec.geometry, spec.dims, stream=stream)
        row.update(
            status="ok",
            memory_budget=res.memory_budget,
            target_size=res.target_size,
            recent_frames=res.recent_frames,
            compressions=res.compressions,
            peak_tokens=res.peak_tokens,
            needles_retained=res.needles_retained,
            needle_retention=res.needle_retention,
            needle_mass=res.needle_mass,
            static_eviction_precision=res.static_eviction_precision,
            static_eviction_recall=res.static_eviction_recall,
            selection_digest=res.selection_digest,
        )
        rows.append(row)
    return rows


def cmd_ablate(args: argparse.Namespace) -> int:
    grid = _parse_grid(args.grid or DEFAULT_GRID)
    settings = _settings(args)
    policies = _policies(args, settings)
    if len(policies) != 1:
        raise UsageError("ablate sweeps a single policy")
    base = _budget(settings)
    base.resolve(_spec(args, settings).geometry)
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    first = int(settings.get("seed", 0))
    seeds = list(range(first, first + args.seeds))
    # needles are placed per seed so every seed gets its own layout
    specs = [_spec(args, {**settings, "seed": str(seed)}) for seed in seeds]
    jobs = [
        (base, spec, policies[0], alpha, recent, ratio, [spec.seed])
        for alpha in grid["alpha"]
        for recent in grid["recent"]
        for ratio in grid["ratio"]
        for spec in specs
    ]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            chunks = list(pool.map(_ablate_cell, jobs))
    else:
        chunks = [_ablate_cell(job) for job in jobs]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=ABLATE_COLUMNS, lineterminator="\n", restval="")
    writer.writeheader()
    for rows in chunks:
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_calibrate(args: argparse.Namespace) -> int:
    settings = _settings(args)
    if args.trace:
        header, frames = read_trace(args.trace)
        geometry, dims = header.geometry, header.dims
    else:
        spec = _spec(args, {**settings, **load_kv(args.spec)})
        geometry, dims = spec.geometry, spec.dims
        frames = iter(SyntheticStream(spec))
    base = _budget({k: v for k, v in settings.items() if not k.startswith("tau")})
    engine = Engine(replace(base, policy="van_only"), geometry, dims)
    pooling = calibrate_thresholds(engine, frames)
    text = dump_kv(pooling_to_kv(pooling))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_gen_trace(args: argparse.Namespace) -> int:
    settings = _settings(args)
    spec = _spec(args, settings)
    header = TraceHeader.for_stream(spec.geometry, spec.dims, spec.num_frames)
    size = write_trace(args.out, header, iter(SyntheticStream(spec)))
    sidecar = args.out + ".spec"
    with open(sidecar, "w", encoding="utf-8") as fh:
        fh.write(dump_kv(spec_to_kv(spec)))
    print(f"wrote {size} bytes to {args.out} (spec in {sidecar})")
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="streamkv", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run policies over a synthetic stream")
    _add_budget_flags(p)
    _add_stream_flags(p)
    _add_run_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("replay", help="run policies over a recorded KVTR trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--stream-spec", help="spec sidecar of a synthetic trace, enables needle metrics")
    p.add_argument("--patch-grid", type=_grid, help="expected grid; must match the trace")
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--head-dim", type=int)
    _add_budget_flags(p)
    _add_run_flags(p)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("ablate", help="sweep alpha, recent and ratio over several seeds")
    p.add_argument("--grid", nargs="+", help="axes like alpha=0,0.5,1 recent=0.125 ratio=0.75")
    p.add_argument("--seeds", type=int, default=5, help="seeds per cell, counting up from --seed")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--out", help="CSV path (default stdout)")
    _add_budget_flags(p, policy_list=False)
    _add_stream_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("calibrate", help="derive CV thresholds from a warmup window")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--trace")
    src.add_argument("--spec", help="stream spec file")
    p.add_argument("--out", help="thresholds file (default stdout)")
    _add_budget_flags(p, policy_list=False)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("gen-trace", help="write a synthetic stream as a KVTR trace")
    _add_stream_flags(p)
    p.add_argument("--config", help="key = value file with stream settings")
    p.add_argument("--out", required=True, help="trace path; the spec goes to OUT.spec")
    p.set_defaults(func=cmd_gen_trace)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"streamkv {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TraceError as exc:
        print(f"trace error: {exc}", file=sys.stderr)
        return EXIT_TRACE
    except StreamKVError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        code = EXIT_TRACE if getattr(args, "trace", None) else EXIT_CONFIG
        print(f"I/O error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
