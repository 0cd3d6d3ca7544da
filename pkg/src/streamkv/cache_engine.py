"""Budgeted continual KV-cache compression engine.

Frames are appended to every layer in lockstep. As soon as a layer holds
``memory_budget`` tokens the whole cache is compressed in place down to
``target_size`` tokens, one independent selection per layer.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable

import numpy as np

from .baselines import (
    SnapKVConfig,
    frames_to_tokens,
    sliding_window_select,
    snapkv_like_select,
    uniform_select,
)
from .errors import ConfigError, DimensionError, GeometryError, StateError
from .kvcore import FrameGeometry, ModelDims, attention_forward, coefficient_of_variation, top_k_indices
from .scoring import (
    PoolingConfig,
    Provenance,
    SelectionResult,
    adaptive_pool_van,
    infinipot_select,
    recent_indices,
    tar_scores,
    tar_select,
    van_scores,
)

POLICIES = (
    "infinipot_v",
    "tar_only",
    "van_only",
    "tar_reverse",
    "van_reverse",
    "uniform",
    "sliding_window",
    "snapkv_like",
)
TAR_POLICIES = frozenset({"infinipot_v", "tar_only", "tar_reverse"})
CALIBRATION_EPS = 1e-6


@dataclass(frozen=True)
class BudgetConfig:
    """Engine knobs. ``None`` fields take their defaults in :meth:`resolve`."""

    memory_budget: int
    target_size: int | None = None
    recent_frames: int | None = None
    alpha: float = 0.5
    pooling: PoolingConfig = field(default_factory=PoolingConfig)
    policy: str = "infinipot_v"
    snapkv: SnapKVConfig = field(default_factory=SnapKVConfig)

    def resolve(self, geometry: FrameGeometry) -> "BudgetConfig":
        """Floor sizes to whole frames, fill defaults and check every invariant."""
        p = geometry.p
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown policy {self.policy!r}; expected one of {', '.join(POLICIES)}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        m = (int(self.memory_budget) // p) * p
        if m < p:
            raise ConfigError(f"memory budget {self.memory_budget} holds no whole {p}-token frame")
        c = self.target_size if self.target_size is not None else math.floor(0.75 * m)
        c = (int(c) // p) * p
        if c >= m:
            raise ConfigError(f"target must be below budget (target {c} >= budget {m})")
        if c <= 0:
            raise ConfigError(f"target must hold at least one {p}-token frame")
        f = m // p
        r = self.recent_frames
        if r is None:
            r = max(1, math.floor(0.125 * f))
        r = int(r)
        if r < 1:
            raise ConfigError("recent frame count r must be >= 1")
        out = replace(self, memory_budget=m, target_size=c, recent_frames=r)
        if self.policy in TAR_POLICIES:
            if r >= f:
                raise ConfigError(f"recent frames r={r} must be fewer than the {f} budget frames")
            if out.tar_budget < r * p:
                raise ConfigError(
                    f"TaR share alpha*C = {out.tar_budget} must cover the recent "
                    f"frames r*p = {r * p}"
                )
        if self.policy == "snapkv_like" and c < self.snapkv.window:
            raise ConfigError(
                f"target {c} is smaller than the SnapKV observation window {self.snapkv.window}"
            )
        return out

    @property
    def tar_budget(self) -> int:
        """TaR share of the target, recent frames included."""
        if self.target_size is None:
            raise ConfigError("resolve the config before asking for the TaR budget")
        if self.policy in ("tar_only", "tar_reverse"):
            return self.target_size
        return math.floor(self.alpha * self.target_size + 1e-9)


@dataclass
class LayerKV:
    """Snapshot of one layer's cache with per-token provenance."""

    keys: np.ndarray
    values: np.ndarray
    frame_index: np.ndarray
    patch_row: np.ndarray
    patch_col: np.ndarray
    position: np.ndarray

    def __len__(self) -> int:
        return self.position.size


@dataclass
class FrameKV:
    """One frame's new tokens for every layer: ``[L, H, p, D]`` keys and values."""

    keys: np.ndarray
    values: np.ndarray


@dataclass
class AppendOutcome:
    appended: int
    compressed: bool


@dataclass
class CompressionStats:
    compressions_performed: int = 0
    tokens_appended: int = 0
    tokens_evicted: int = 0
    current_tokens: int = 0
    peak_tokens_per_layer: int = 0
    memory_budget: int = 0
    target_size: int = 0
    time_append: float = 0.0
    time_compress: float = 0.0

    @property
    def overhead_ratio(self) -> float:
        total = self.time_append + self.time_compress
        return self.time_compress / total if total > 0 else 0.0


def select_tokens(
    keys: np.ndarray,
    values: np.ndarray,
    frame_ids: np.ndarray,
    patch_ids: np.ndarray,
    config: BudgetConfig,
    geometry: FrameGeometry,
) -> SelectionResult:
    """Pick the survivors of one layer under ``config.policy``."""
    n = keys.shape[1]
    p = geometry.p
    target = min(config.target_size, n)
    r = config.recent_frames
    policy = config.policy
    if policy == "infinipot_v":
        return infinipot_select(
            keys,
            values,
            geometry,
            target=target,
            recent_frames=r,
            tar_budget=min(config.tar_budget, target),
            pooling=config.pooling,
            patch_ids=patch_ids,
            frame_ids=frame_ids,
        )
    if policy in ("tar_only", "tar_reverse"):
        direction = "max" if policy == "tar_only" else "min"
        past = tar_select(tar_scores(keys, geometry, r, patch_ids), target - r * p, direction)
        recent = recent_indices(n, geometry, r)
        tags = np.r_[np.full(past.size, Provenance.TAR), np.full(recent.size, Provenance.RECENT)]
        return SelectionResult(np.r_[past, recent], tags)
    if policy in ("van_only", "van_reverse"):
        direction = "max" if policy == "van_only" else "min"
        pooled, kernel = adaptive_pool_van(van_scores(values, geometry), config.pooling, patch_ids, frame_ids)
        chosen = top_k_indices(pooled.values, target, direction)
        return SelectionResult(chosen, np.full(chosen.size, Provenance.VAN), kernel)
    if policy == "uniform":
        if (frame_ids.reshape(-1, p) != frame_ids[::p, None]).any():
            raise GeometryError("uniform selection needs a cache made of whole frames")
        frames = uniform_select(n // p, target // p)
        chosen = frames_to_tokens(frames, p)
    elif policy == "sliding_window":
        chosen = sliding_window_select(n, target)
    elif policy == "snapkv_like":
        chosen = snapkv_like_select(keys, values, config.snapkv, target)
    else:
        raise ConfigError(f"unknown policy {policy!r}")
    return SelectionResult(chosen, np.full(chosen.size, Provenance.OTHER))


class Engine:
    """Per-layer KV caches under a hard token budget.

    Single writer: only one thread may append or compress at a time. With
    ``workers > 1`` the per-layer selections inside a compression run on a
    thread pool; results are identical to the sequential path.

    ``on_compress(count, selections, survivors)`` is called after every
    compression with the per-layer selections and the original stream
    positions of each layer's survivors.
    """

    def __init__(
        self,
        config: BudgetConfig,
        geometry: FrameGeometry,
        dims: ModelDims,
        *,
        workers: int = 1,
        record_history: bool = False,
        on_compress: Callable[[int, list[SelectionResult], list[np.ndarray]], None] | None = None,
    ) -> None:
        self.config = config.resolve(geometry)
        self.geometry = geometry
        self.dims = dims
        self.workers = max(1, int(workers))
        m = self.config.memory_budget
        shape = (dims.num_layers, dims.num_heads, m, dims.head_dim)
        self._keys = np.zeros(shape, dtype=np.float32)
        self._values = np.zeros(shape, dtype=np.float32)
        meta_shape = (dims.num_layers, m)
        self._frame = np.zeros(meta_shape, dtype=np.int64)
        self._patch = np.zeros(meta_shape, dtype=np.int64)
        self._pos = np.zeros(meta_shape, dtype=np.int64)
        self._n = 0
        self._frames_seen = 0
        self._stats = CompressionStats(memory_budget=m, target_size=self.config.target_size)
        self.history: list[list[SelectionResult]] | None = [] if record_history else None
        self.last_selection: list[SelectionResult] | None = None
        self.on_compress = on_compress

    @property
    def num_tokens(self) -> int:
        return self._n

    def layer(self, index: int) -> LayerKV:
        n = self._n
        cols = self.geometry.grid_cols
        patch = self._patch[index, :n].copy()
        return LayerKV(
            keys=self._keys[index, :, :n].copy(),
            values=self._values[index, :, :n].copy(),
            frame_index=self._frame[index, :n].copy(),
            patch_row=patch // cols,
            patch_col=patch % cols,
            position=self._pos[index, :n].copy(),
        )

    def layers(self) -> list[LayerKV]:
        return [self.layer(i) for i in range(self.dims.num_layers)]

    def _check_frame(self, frame: FrameKV) -> tuple[np.ndarray, np.ndarray]:
        d = self.dims
        p = self.geometry.p
        keys = np.asarray(frame.keys, dtype=np.float32)
        values = np.asarray(frame.values, dtype=np.float32)
        for name, arr in (("keys", keys), ("values", values)):
            if arr.ndim != 4:
                raise DimensionError(f"frame {name} must be [L, H, p, D], got {arr.shape}")
            if arr.shape[2] != p:
                raise GeometryError(f"frame {name} carry {arr.shape[2]} tokens, expected {p}")
            if arr.shape != (d.num_layers, d.num_heads, p, d.head_dim):
                raise DimensionError(
                    f"frame {name} shape {arr.shape} does not match "
                    f"{(d.num_layers, d.num_heads, p, d.head_dim)}"
                )
        return keys, values

    def append_frame(self, frame: FrameKV, *, prefill: bool = False) -> AppendOutcome:
        """Append one frame to every layer, compressing if the budget is reached.

        ``prefill=True`` also runs the new tokens as queries over the cache they
        join, standing in for the model forward that produces them; its cost is
        booked as append time.
        """
        t0 = time.perf_counter()
        keys, values = self._check_frame(frame)
        p = self.geometry.p
        n = self._n
        self._keys[:, :, n : n + p] = keys
        self._values[:, :, n : n + p] = values
        if prefill:
            for layer in range(self.dims.num_layers):
                attention_forward(
                    keys[layer],
                    self._keys[layer, :, : n + p],
                    self._values[layer, :, : n + p],
                    dtype=np.float32,
                )
        self._frame[:, n : n + p] = self._frames_seen
        self._patch[:, n : n + p] = np.arange(p)
        self._pos[:, n : n + p] = self._stats.tokens_appended + np.arange(p)
        self._n = n + p
        self._frames_seen += 1
        st = self._stats
        st.tokens_appended += p
        st.current_tokens = self._n
        st.peak_tokens_per_layer = max(st.peak_tokens_per_layer, self._n)
        st.time_append += time.perf_counter() - t0
        compressed = False
        if self._n >= self.config.memory_budget:
            self.compress_all()
            compressed = True
        return AppendOutcome(appended=p, compressed=compressed)

    def _select_layer(self, layer: int) -> SelectionResult:
        n = self._n
        return select_tokens(
            self._keys[layer, :, :n],
            self._values[layer, :, :n],
            self._frame[layer, :n],
            self._patch[layer, :n],
            self.config,
            self.geometry,
        )

    def compress_all(self, *, flush: bool = False) -> list[SelectionResult]:
        """Compress every layer to the target size and gather the survivors."""
        n = self._n
        if flush:
            if n <= self.config.target_size:
                raise StateError(f"nothing to flush: {n} tokens <= target {self.config.target_size}")
        elif n < self.config.memory_budget:
            raise StateError(f"cache holds {n} tokens, below the budget {self.config.memory_budget}")
        t0 = time.perf_counter()
        layers = range(self.dims.num_layers)
        if self.workers > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                results = list(pool.map(self._select_layer, layers))
        else:
            results = [self._select_layer(layer) for layer in layers]
        kept = {len(res) for res in results}
        if len(kept) != 1:
            raise StateError(f"layers disagree on survivor count: {sorted(kept)}")
        c = kept.pop()
        for layer, res in enumerate(results):
            idx = res.indices
            self._keys[layer, :, :c] = self._keys[layer][:, idx]
            self._values[layer, :, :c] = self._values[layer][:, idx]
            self._frame[layer, :c] = self._frame[layer, idx]
            self._patch[layer, :c] = self._patch[layer, idx]
            self._pos[layer, :c] = self._pos[layer, idx]
        self._n = c
        st = self._stats
        st.compressions_performed += 1
        st.tokens_evicted += n - c
        st.current_tokens = c
        st.time_compress += time.perf_counter() - t0
        self.last_selection = results
        if self.history is not None:
            self.history.append(results)
        if self.on_compress is not None:
            survivors = [self._pos[layer, :c].copy() for layer in layers]
            self.on_compress(st.compressions_performed, results, survivors)
        return results

    def flush(self) -> list[SelectionResult] | None:
        """Compress whatever is resident if it exceeds the target; else no-op."""
        if self._n <= self.config.target_size:
            return None
        return self.compress_all(flush=True)

    def reindex_positions(self) -> list[np.ndarray]:
        """Dense positions ``0..N-1`` per layer, in original temporal order."""
        n = self._n
        out = []
        for layer in range(self.dims.num_layers):
            order = np.argsort(self._pos[layer, :n], kind="stable")
            ranks = np.empty(n, dtype=np.int64)
            ranks[order] = np.arange(n)
            out.append(ranks)
        return out

    def stats(self) -> CompressionStats:
        return replace(self._stats)

    def calibrate_thresholds(self, warmup_frames: Iterable[FrameKV]) -> PoolingConfig:
        return calibrate_thresholds(self, warmup_frames)


def engine_new(
    config: BudgetConfig, geometry: FrameGeometry, dims: ModelDims, **kwargs
) -> Engine:
    return Engine(config, geometry, dims, **kwargs)


def reindex_positions(engine: Engine) -> list[np.ndarray]:
    return engine.reindex_positions()


def thresholds_from_cvs(cvs: Iterable[float], eps: float = CALIBRATION_EPS) -> PoolingConfig:
    """Quartiles of per-layer CVs as ``(tau1, tau2, tau3)``.

    Coincident quartiles are pushed apart around the median by ``eps`` so the
    triple stays strictly increasing.
    """
    cvs = np.asarray(list(cvs), dtype=np.float64)
    if cvs.size == 0:
        raise StateError("no CV observations to calibrate from")
    t1, t2, t3 = (float(v) for v in np.percentile(cvs, [25, 50, 75]))
    t1 = min(t1, t2 - eps)
    t3 = max(t3, t2 + eps)
    return PoolingConfig(t1, t2, t3)


def calibrate_thresholds(engine: Engine, warmup_frames: Iterable[FrameKV]) -> PoolingConfig:
    """Per-layer VaN CV over the first full budget window of ``warmup_frames``."""
    f = engine.config.memory_budget // engine.geometry.p
    window: list[FrameKV] = []
    for frame in warmup_frames:
        window.append(frame)
        if len(window) == f:
            break
    if len(window) < f:
        raise StateError(f"warmup holds {len(window)} frames; one budget window needs {f}")
    values = np.concatenate([np.asarray(fr.values, dtype=np.float32) for fr in window], axis=2)
    cvs = [
        coefficient_of_variation(van_scores(values[layer], engine.geometry).values)
        for layer in range(engine.dims.num_layers)
    ]
    return thresholds_from_cvs(cvs)
