"""Temporal-redundancy (TaR) and value-norm (VaN) token scoring.

Scores are computed per layer. Keys and values arrive as ``[H, N, D]`` arrays
whose ``N`` tokens form whole frames of ``p`` patches in temporal order; the
last ``r`` frames are the *recent* frames and everything before them is the
*past* block.

Every reduction has a fixed left-to-right order, so results do not depend on
threading or call order. A key with zero norm contributes cosine 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Sequence

import numpy as np

from .errors import ConfigError, DimensionError, GeometryError
from .kvcore import (
    Direction,
    FrameGeometry,
    coefficient_of_variation,
    _ltr_dot_major,
    ltr_sum,
    masked_avg_pool2d,
    top_k_indices,
)


class Provenance(IntEnum):
    RECENT = 0
    TAR = 1
    VAN = 2
    OTHER = 3  # baseline policies

    def __str__(self) -> str:
        return self.name.lower()


@dataclass
class ScoreMap:
    values: np.ndarray
    geometry: FrameGeometry
    frame_offset: int = 0

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        if self.values.size % self.geometry.p:
            raise GeometryError(
                f"{self.values.size} scores do not form whole frames of {self.geometry.p}"
            )

    def __len__(self) -> int:
        return self.values.size

    @property
    def num_frames(self) -> int:
        return self.values.size // self.geometry.p

    def flat_index(self, t: int, i: int, j: int) -> int:
        g = self.geometry
        return t * g.p + i * g.grid_cols + j

    def at(self, t: int, i: int, j: int) -> float:
        return float(self.values[self.flat_index(t, i, j)])

    def as_grids(self) -> np.ndarray:
        g = self.geometry
        return self.values.reshape(self.num_frames, g.grid_rows, g.grid_cols)


@dataclass(frozen=True)
class PoolingConfig:
    """CV thresholds choosing the VaN pooling kernel.

    ``CV < tau1 -> 7``, ``tau1 <= CV < tau2 -> 5``, ``tau2 <= CV < tau3 -> 3``,
    ``CV >= tau3 -> 1``.
    """

    tau1: float = 0.2
    tau2: float = 0.4
    tau3: float = 0.8

    def __post_init__(self) -> None:
        if not (self.tau1 < self.tau2 < self.tau3):
            raise ConfigError(
                f"CV thresholds must be strictly increasing, got "
                f"({self.tau1}, {self.tau2}, {self.tau3})"
            )

    @property
    def thresholds(self) -> tuple[float, float, float]:
        return (self.tau1, self.tau2, self.tau3)

    def kernel_for(self, cv: float) -> int:
        if cv < self.tau1:
            return 7
        if cv < self.tau2:
            return 5
        if cv < self.tau3:
            return 3
        return 1


@dataclass
class SelectionResult:
    indices: np.ndarray
    tags: np.ndarray = field(repr=False)
    kernel: int | None = None

    def __post_init__(self) -> None:
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.tags = np.asarray(self.tags, dtype=np.int8)
        if self.indices.shape != self.tags.shape:
            raise DimensionError("one provenance tag per index is required")

    def __len__(self) -> int:
        return self.indices.size

    @property
    def provenance(self) -> list[str]:
        return [str(Provenance(t)) for t in self.tags]

    def with_tag(self, tag: Provenance) -> np.ndarray:
        return self.indices[self.tags == tag]


def _frame_layout(n_tokens: int, geometry: FrameGeometry, r: int) -> int:
    p = geometry.p
    if n_tokens % p:
        raise GeometryError(f"{n_tokens} tokens are not a whole number of {p}-token frames")
    f = n_tokens // p
    if r < 1:
        raise ConfigError("recent frame count r must be >= 1")
    if r >= f:
        raise ConfigError(f"recent frames r={r} must be fewer than the {f} resident frames")
    return f


def tar_scores(
    keys: np.ndarray,
    geometry: FrameGeometry,
    r: int,
    patch_ids: np.ndarray | None = None,
) -> ScoreMap:
    """Negative mean cosine between each past key and its patch in the recent frames.

    ``patch_ids`` gives the patch slot of every token. Without it the past block
    is reshaped frame by frame, which is exact for a cache of whole frames; with
    it, tokens that survived earlier compressions are still compared against
    their own patch. The recent frames must always be complete.
    """
    keys = np.asarray(keys)
    if keys.ndim != 3:
        raise DimensionError(f"keys must be [H, N, D], got shape {keys.shape}")
    h, n, _ = keys.shape
    p = geometry.p
    _frame_layout(n, geometry, r)
    n_past = n - r * p
    recent = keys[:, n_past:, :].reshape(h, r, p, -1)
    if patch_ids is None:
        past_patch = np.arange(n_past) % p
    else:
        patch_ids = np.asarray(patch_ids, dtype=np.int64)
        expected = np.tile(np.arange(p), r)
        if not np.array_equal(patch_ids[n_past:], expected):
            raise GeometryError("recent frames must be complete and in patch order")
        past_patch = patch_ids[:n_past]
    # cos is linear in each unit vector, so the r cosines against one patch
    # collapse into a single dot with the sum of the recent unit keys
    past = _unit_major(keys[:, :n_past, :])
    recent_sum = ltr_sum(_unit_major(recent), axis=2)
    per_head = -(_ltr_dot_major(past, recent_sum[:, :, past_patch]) / r)
    per_head = np.clip(per_head, -1.0, 1.0)
    scores = ltr_sum(per_head, axis=0) / h
    return ScoreMap(scores, geometry, 0)


def _unit_major(x: np.ndarray) -> np.ndarray:
    """Unit vectors along the last axis, returned component-major; zero stays zero."""
    xm = np.ascontiguousarray(np.moveaxis(np.asarray(x), -1, 0), dtype=np.float64)
    norm = np.sqrt(_ltr_dot_major(xm, xm))
    norm[norm == 0] = 1.0  # zero vectors stay zero
    xm /= norm
    return xm


def tar_select(scores: ScoreMap, past_budget: int, direction: Direction = "max") -> np.ndarray:
    """TopK over past-token TaR scores, in whole-cache coordinates."""
    if past_budget < 0:
        raise ConfigError(f"TaR past budget must be >= 0, got {past_budget}")
    if past_budget > len(scores):
        raise ConfigError(f"TaR budget {past_budget} exceeds {len(scores)} past tokens")
    offset = scores.frame_offset * scores.geometry.p
    return top_k_indices(scores.values, past_budget, direction) + offset


def tar_select_reverse(scores: ScoreMap, past_budget: int) -> np.ndarray:
    return tar_select(scores, past_budget, "min")


def van_scores(values: np.ndarray, geometry: FrameGeometry) -> ScoreMap:
    """L2 norm of each token's value vector, all heads concatenated."""
    values = np.asarray(values)
    if values.ndim != 3:
        raise DimensionError(f"values must be [H, N, D], got shape {values.shape}")
    h, n, d = values.shape
    if n < 1:
        raise DimensionError("van_scores needs at least one token")
    # component-major [H*D, N], heads in order, so each row is contiguous
    major = np.ascontiguousarray(np.transpose(values, (0, 2, 1)), dtype=np.float64).reshape(h * d, n)
    return ScoreMap(np.sqrt(_ltr_dot_major(major, major)), geometry, 0)


def adaptive_pool_van(
    van: ScoreMap,
    pooling: PoolingConfig,
    patch_ids: np.ndarray | None = None,
    frame_ids: np.ndarray | None = None,
) -> tuple[ScoreMap, int]:
    """Pool VaN on each frame's patch grid with a kernel picked from the layer CV.

    With ``patch_ids``/``frame_ids`` the tokens are scattered back onto their
    original frame grids and windows average only the tokens still resident.
    """
    g = van.geometry
    cv = coefficient_of_variation(van.values)
    kernel = pooling.kernel_for(cv)
    if patch_ids is None and frame_ids is None:
        pooled = masked_avg_pool2d(van.as_grids(), None, kernel).ravel()
        return ScoreMap(pooled, g, van.frame_offset), kernel
    if patch_ids is None or frame_ids is None:
        raise GeometryError("patch_ids and frame_ids must be given together")
    patch_ids = np.asarray(patch_ids, dtype=np.int64)
    frame_ids = np.asarray(frame_ids, dtype=np.int64)
    if patch_ids.size != len(van) or frame_ids.size != len(van):
        raise GeometryError("one patch and frame id per token is required")
    if frame_ids.size and (np.diff(frame_ids) >= 0).all():
        # resident tokens are kept in temporal order, so no sort is needed
        starts = np.r_[True, frame_ids[1:] != frame_ids[:-1]]
        frames = frame_ids[starts]
        slot = np.cumsum(starts) - 1
    else:
        frames, slot = np.unique(frame_ids, return_inverse=True)
    dense = np.zeros((frames.size, g.p), dtype=np.float64)
    mask = np.zeros((frames.size, g.p), dtype=bool)
    dense[slot, patch_ids] = van.values
    mask[slot, patch_ids] = True
    shape = (frames.size, g.grid_rows, g.grid_cols)
    pooled = masked_avg_pool2d(dense.reshape(shape), mask.reshape(shape), kernel)
    out = pooled.reshape(frames.size, g.p)[slot, patch_ids]
    return ScoreMap(out, g, van.frame_offset), kernel


def _dominating_value(x: np.ndarray) -> float:
    top = float(x.max()) if x.size else 0.0
    return max(top + 1.0, float(np.nextafter(top, np.inf)))


def combine_select(
    tar_indices: Sequence[int],
    pooled_van: ScoreMap,
    recent_indices: Sequence[int],
    target: int,
) -> SelectionResult:
    """Final TopK over pooled VaN after forcing TaR and recent tokens to the top."""
    tar_indices = np.asarray(tar_indices, dtype=np.int64)
    recent_indices = np.asarray(recent_indices, dtype=np.int64)
    if np.intersect1d(tar_indices, recent_indices).size:
        raise ConfigError("TaR selection overlaps the recent frames")
    working = pooled_van.values.copy()
    forced = np.concatenate([tar_indices, recent_indices])
    working[forced] = _dominating_value(working)
    chosen = top_k_indices(working, target, "max")
    tags = np.full(chosen.size, Provenance.VAN, dtype=np.int8)
    tags[np.isin(chosen, tar_indices)] = Provenance.TAR
    tags[np.isin(chosen, recent_indices)] = Provenance.RECENT
    return SelectionResult(chosen, tags)


def recent_indices(n_tokens: int, geometry: FrameGeometry, r: int) -> np.ndarray:
    return np.arange(n_tokens - r * geometry.p, n_tokens, dtype=np.int64)


def infinipot_select(
    keys: np.ndarray,
    values: np.ndarray,
    geometry: FrameGeometry,
    *,
    target: int,
    recent_frames: int,
    tar_budget: int,
    pooling: PoolingConfig,
    patch_ids: np.ndarray | None = None,
    frame_ids: np.ndarray | None = None,
) -> SelectionResult:
    """Full TaR + VaN selection for one layer.

    ``tar_budget`` is the whole TaR share (recent frames included), i.e.
    ``floor(alpha * target)``.
    """
    n = keys.shape[1]
    r = recent_frames
    past_budget = tar_budget - r * geometry.p
    if past_budget < 0:
        raise ConfigError("TaR share alpha*C must cover the recent frames r*p")
    tar = tar_select(tar_scores(keys, geometry, r, patch_ids), past_budget)
    van = van_scores(values, geometry)
    pooled, kernel = adaptive_pool_van(van, pooling, patch_ids, frame_ids)
    result = combine_select(tar, pooled, recent_indices(n, geometry, r), target)
    result.kernel = kernel
    return result
