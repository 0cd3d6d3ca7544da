"""Plain ``key = value`` config files for budgets, pooling and synthetic streams.

One setting per line; ``#`` starts a comment; blank lines are ignored. A
single file may hold both engine and stream keys::

    memory_budget = 6144
    target_size = 4608
    alpha = 0.5
    policy = infinipot_v
    tau1 = 0.2
    num_frames = 960
    grid_rows = 8
    grid_cols = 8
    needles = 7:1:2:5.0, 40:3:3:4.0
"""

from __future__ import annotations

import os
from typing import Any, Mapping

from .baselines import SnapKVConfig
from .cache_engine import BudgetConfig
from .errors import ConfigError
from .harness import Needle, StreamSpec
from .kvcore import FrameGeometry, ModelDims
from .scoring import PoolingConfig

BUDGET_KEYS = (
    "memory_budget",
    "target_size",
    "recent_frames",
    "alpha",
    "tau1",
    "tau2",
    "tau3",
    "policy",
    "snapkv_window",
    "snapkv_pool_kernel",
)
STREAM_KEYS = (
    "num_frames",
    "grid_rows",
    "grid_cols",
    "num_layers",
    "num_heads",
    "head_dim",
    "static_fraction",
    "noise_sigma",
    "seed",
    "needles",
)
KNOWN_KEYS = frozenset(BUDGET_KEYS + STREAM_KEYS)


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        if key not in KNOWN_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def load_kv(path: str | os.PathLike) -> dict[str, str]:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    return parse_kv(text, str(path))


def dump_kv(settings: Mapping[str, Any]) -> str:
    lines = []
    for key, value in settings.items():
        if value is None:
            continue
        if key not in KNOWN_KEYS:
            raise ConfigError(f"unknown key {key!r}")
        lines.append(f"{key} = {_format(value)}")
    return "\n".join(lines) + "\n"


def _format(value: Any) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ", ".join(_format_needle(n) for n in value)
    return str(value)


def _format_needle(n: Needle) -> str:
    return f"{n.frame}:{n.row}:{n.col}:{n.norm_boost!r}"


def _convert(settings: Mapping[str, str], key: str, kind: type, default: Any = None) -> Any:
    if key not in settings:
        return default
    raw = settings[key]
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key} = {raw!r} is not a valid {kind.__name__}") from None


def pooling_from_kv(settings: Mapping[str, str], base: PoolingConfig | None = None) -> PoolingConfig:
    base = base or PoolingConfig()
    return PoolingConfig(
        _convert(settings, "tau1", float, base.tau1),
        _convert(settings, "tau2", float, base.tau2),
        _convert(settings, "tau3", float, base.tau3),
    )


def pooling_to_kv(pooling: PoolingConfig) -> dict[str, Any]:
    return {"tau1": pooling.tau1, "tau2": pooling.tau2, "tau3": pooling.tau3}


def budget_from_kv(settings: Mapping[str, str]) -> BudgetConfig:
    if "memory_budget" not in settings:
        raise ConfigError("memory_budget is required")
    snap = SnapKVConfig(
        _convert(settings, "snapkv_window", int, SnapKVConfig.window),
        _convert(settings, "snapkv_pool_kernel", int, SnapKVConfig.pool_kernel),
    )
    return BudgetConfig(
        memory_budget=_convert(settings, "memory_budget", int),
        target_size=_convert(settings, "target_size", int),
        recent_frames=_convert(settings, "recent_frames", int),
        alpha=_convert(settings, "alpha", float, 0.5),
        pooling=pooling_from_kv(settings),
        policy=settings.get("policy", "infinipot_v"),
        snapkv=snap,
    )


def budget_to_kv(config: BudgetConfig) -> dict[str, Any]:
    out: dict[str, Any] = {
        "memory_budget": config.memory_budget,
        "target_size": config.target_size,
        "recent_frames": config.recent_frames,
        "alpha": float(config.alpha),
        "policy": config.policy,
        "snapkv_window": config.snapkv.window,
        "snapkv_pool_kernel": config.snapkv.pool_kernel,
    }
    out.update(pooling_to_kv(config.pooling))
    return out


def parse_needles(text: str) -> tuple[Needle, ...]:
    """``frame:row:col[:boost]`` items separated by commas."""
    out = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        parts = item.split(":")
        if len(parts) not in (3, 4):
            raise ConfigError(f"needle {item!r} is not frame:row:col[:boost]")
        try:
            frame, row, col = (int(x) for x in parts[:3])
            boost = float(parts[3]) if len(parts) == 4 else 5.0
        except ValueError:
            raise ConfigError(f"needle {item!r} has a non-numeric field") from None
        out.append(Needle(frame, row, col, boost))
    return tuple(out)


def spec_from_kv(settings: Mapping[str, str]) -> StreamSpec:
    missing = [k for k in ("num_frames", "grid_rows", "grid_cols") if k not in settings]
    if missing:
        raise ConfigError(f"stream spec is missing {', '.join(missing)}")
    rows = _convert(settings, "grid_rows", int)
    cols = _convert(settings, "grid_cols", int)
    try:
        geometry = FrameGeometry.from_grid(rows, cols)
        dims = ModelDims(
            _convert(settings, "num_layers", int, 1),
            _convert(settings, "num_heads", int, 2),
            _convert(settings, "head_dim", int, 16),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return StreamSpec(
        num_frames=_convert(settings, "num_frames", int),
        geometry=geometry,
        dims=dims,
        static_fraction=_convert(settings, "static_fraction", float, 0.75),
        noise_sigma=_convert(settings, "noise_sigma", float, 0.01),
        needles=parse_needles(settings.get("needles", "")),
        seed=_convert(settings, "seed", int, 0),
    )


def spec_to_kv(spec: StreamSpec) -> dict[str, Any]:
    return {
        "num_frames": spec.num_frames,
        "grid_rows": spec.geometry.grid_rows,
        "grid_cols": spec.geometry.grid_cols,
        "num_layers": spec.dims.num_layers,
        "num_heads": spec.dims.num_heads,
        "head_dim": spec.dims.head_dim,
        "static_fraction": float(spec.static_fraction),
        "noise_sigma": float(spec.noise_sigma),
        "seed": spec.seed,
        "needles": spec.needles if spec.needles else None,
    }
