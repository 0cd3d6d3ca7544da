"""Drive an engine over a frame source and turn the outcome into report rows."""

from __future__ import annotations

from dataclasses import replace
from typing import IO, Iterable

import numpy as np

from .cache_engine import BudgetConfig, Engine, FrameKV
from .harness import SyntheticStream, needle_recall
from .kvcore import FrameGeometry, ModelDims
from .report import PolicyResult, SurvivorLog, Timing


def static_eviction_metrics(
    resident: list[np.ndarray], tokens_appended: int, stream: SyntheticStream
) -> tuple[float, float]:
    """Precision and recall of "evicted" as a detector of static tokens.

    Precision is the static share of evicted tokens (1.0 when nothing was
    evicted); recall is the evicted share of static tokens (1.0 when the
    stream has none). Both are averaged over layers.
    """
    all_pos = np.arange(tokens_appended, dtype=np.int64)
    static = stream.is_static_position(all_pos)
    n_static = int(static.sum())
    precisions, recalls = [], []
    for positions in resident:
        evicted = np.ones(tokens_appended, dtype=bool)
        evicted[positions] = False
        hit = int((evicted & static).sum())
        n_evicted = int(evicted.sum())
        precisions.append(hit / n_evicted if n_evicted else 1.0)
        recalls.append(hit / n_static if n_static else 1.0)
    return float(np.mean(precisions)), float(np.mean(recalls))


def run_policy(
    config: BudgetConfig,
    frames: Iterable[FrameKV],
    geometry: FrameGeometry,
    dims: ModelDims,
    *,
    stream: SyntheticStream | None = None,
    workers: int = 1,
    prefill: bool = False,
    flush: bool = False,
    log_sink: IO[bytes] | None = None,
) -> tuple[PolicyResult, Timing, Engine]:
    """Stream ``frames`` through a fresh engine and measure the outcome.

    ``stream`` (the generator behind ``frames``, when synthetic) enables the
    needle and static-eviction metrics.
    """
    log = SurvivorLog(log_sink)
    engine = Engine(config, geometry, dims, workers=workers, on_compress=log)
    count = 0
    for frame in frames:
        engine.append_frame(frame, prefill=prefill)
        count += 1
    if flush:
        engine.flush()
    st = engine.stats()
    cfg = engine.config
    result = PolicyResult(
        policy=cfg.policy,
        memory_budget=cfg.memory_budget,
        target_size=cfg.target_size,
        recent_frames=cfg.recent_frames,
        frames=count,
        tokens_appended=st.tokens_appended,
        tokens_evicted=st.tokens_evicted,
        final_tokens=st.current_tokens,
        peak_tokens=st.peak_tokens_per_layer,
        compressions=st.compressions_performed,
        selection_digest=log.hexdigest(),
    )
    if stream is not None:
        layers = engine.layers()
        needles = needle_recall(layers, stream)
        precision, recall = static_eviction_metrics(
            [layer.position for layer in layers], st.tokens_appended, stream
        )
        result = replace(
            result,
            needles_planted=needles.needles_planted,
            needles_retained=needles.needles_retained,
            needle_retention=needles.retention_rate,
            needle_mass=needles.attention_mass_on_needles,
            static_eviction_precision=precision,
            static_eviction_recall=recall,
        )
    return result, Timing(st.time_append, st.time_compress), engine
