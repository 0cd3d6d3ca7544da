"""Deterministic numeric kernels and the geometry types used by every scorer.

All reductions run strictly left to right (``np.add.accumulate``) so that a
vectorized kernel and a scalar loop over the same values agree bit for bit.
Pairwise summation (what ``np.sum`` does) is avoided on purpose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, DomainError, GeometryError

Direction = Literal["max", "min"]
POOL_KERNELS = (1, 3, 5, 7)


@dataclass(frozen=True)
class FrameGeometry:
    """Token layout of one frame: ``grid_rows x grid_cols`` patches."""

    tokens_per_frame: int
    grid_rows: int
    grid_cols: int

    def __post_init__(self) -> None:
        for name in ("tokens_per_frame", "grid_rows", "grid_cols"):
            if int(getattr(self, name)) < 1:
                raise GeometryError(f"{name} must be >= 1")
        if self.grid_rows * self.grid_cols != self.tokens_per_frame:
            raise GeometryError(
                f"grid {self.grid_rows}x{self.grid_cols} does not hold "
                f"{self.tokens_per_frame} tokens"
            )

    @classmethod
    def from_grid(cls, rows: int, cols: int) -> "FrameGeometry":
        return cls(rows * cols, rows, cols)

    @property
    def p(self) -> int:
        return self.tokens_per_frame


@dataclass(frozen=True)
class ModelDims:
    num_layers: int
    num_heads: int
    head_dim: int

    def __post_init__(self) -> None:
        for name in ("num_layers", "num_heads", "head_dim"):
            if int(getattr(self, name)) < 1:
                raise DimensionError(f"{name} must be >= 1")


def tensor_f32(data, shape: Sequence[int] | None = None) -> np.ndarray:
    """Coerce ``data`` to a C-contiguous float32 array, rejecting NaN/Inf."""
    arr = np.ascontiguousarray(data, dtype=np.float32)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if arr.size != math.prod(shape):
            raise DimensionError(f"{arr.size} values cannot fill shape {shape}")
        arr = arr.reshape(shape)
    if not np.isfinite(arr).all():
        raise DomainError("tensor contains NaN or Inf")
    return arr


def ltr_sum(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Sum along ``axis`` in strict left-to-right order."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return np.add.accumulate(x)[-1] if x.size else np.float64(0.0)
    x = np.moveaxis(x, axis, 0)
    acc = np.zeros(x.shape[1:], dtype=np.float64)
    for part in x:
        acc += part
    return acc


def _ltr_dot_major(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Left-to-right dot products of component-major arrays ``[D, ...]``."""
    shape = np.broadcast_shapes(a.shape[1:], b.shape[1:])
    acc = np.zeros(shape, dtype=np.float64)
    tmp = np.empty(shape, dtype=np.float64)
    for x, y in zip(a, b):
        np.multiply(x, y, out=tmp)
        acc += tmp
    return acc


def l2_norms(x: np.ndarray) -> np.ndarray:
    """Euclidean norm of every vector along the last axis."""
    x = np.moveaxis(np.asarray(x, dtype=np.float64), -1, 0)
    return np.sqrt(_ltr_dot_major(x, x))


def cosine_major(a: np.ndarray, b: np.ndarray, norm_a: np.ndarray, norm_b: np.ndarray) -> np.ndarray:
    """Cosine of component-major vectors ``[D, ...]`` given their norms."""
    dot = _ltr_dot_major(a, b)
    denom = norm_a * norm_b
    out = np.zeros(dot.shape, dtype=np.float64)
    np.divide(dot, denom, out=out, where=denom != 0)
    return np.clip(out, -1.0, 1.0, out=out)


def cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarity over the last axis, broadcasting leading axes.

    Pairs where either vector has zero norm score 0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"vector lengths differ: {a.shape[-1]} vs {b.shape[-1]}")
    am = np.moveaxis(a, -1, 0)
    bm = np.moveaxis(b, -1, 0)
    return cosine_major(am, bm, np.sqrt(_ltr_dot_major(am, am)), np.sqrt(_ltr_dot_major(bm, bm)))


def cosine_similarity(a: Sequence[float], b: Sequence[float]) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or a.size != b.size:
        raise DimensionError(f"cosine needs equal non-empty lengths, got {a.size} and {b.size}")
    return float(cosine_rows(a, b))


def l2_norm(v: Sequence[float]) -> float:
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size == 0:
        raise DimensionError("l2_norm of an empty vector")
    return float(l2_norms(v))


def check_kernel(kernel: int) -> int:
    kernel = int(kernel)
    if kernel < 1 or kernel % 2 == 0:
        raise ConfigError(f"pool kernel must be odd and positive, got {kernel}")
    return kernel


def _window_counts(rows: int, cols: int, kernel: int) -> np.ndarray:
    h = kernel // 2
    r = np.arange(rows)
    c = np.arange(cols)
    in_r = np.minimum(r + h, rows - 1) - np.maximum(r - h, 0) + 1
    in_c = np.minimum(c + h, cols - 1) - np.maximum(c - h, 0) + 1
    return np.outer(in_r, in_c).astype(np.float64)


def _box_sum(x: np.ndarray, kernel: int) -> np.ndarray:
    """Window sums over the last two axes: row pass, then column pass, each left to right."""
    h = kernel // 2
    rows, cols = x.shape[-2:]
    pad = [(0, 0)] * (x.ndim - 2) + [(0, 0), (h, h)]
    xp = np.pad(x, pad)
    horiz = np.zeros(x.shape, dtype=np.float64)
    for dj in range(kernel):
        horiz += xp[..., :, dj : dj + cols]
    pad = [(0, 0)] * (x.ndim - 2) + [(h, h), (0, 0)]
    hp = np.pad(horiz, pad)
    out = np.zeros(x.shape, dtype=np.float64)
    for di in range(kernel):
        out += hp[..., di : di + rows, :]
    return out


def masked_avg_pool2d(grid: np.ndarray, mask: np.ndarray | None, kernel: int) -> np.ndarray:
    """Stride-1 same-size average pooling over the last two axes.

    Each output cell is the mean of the in-bounds cells of its window whose
    ``mask`` is set; border windows are not zero-padded. Cells whose window
    holds no valid cell come out as 0. Window sums run along each row of the
    window first, then down the column of row sums, all left to right.
    """
    kernel = check_kernel(kernel)
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim < 2 or grid.shape[-1] == 0 or grid.shape[-2] == 0:
        raise DimensionError("pooling needs a non-empty 2-D grid")
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), grid.shape)
        if mask.all():
            mask = None
        else:
            grid = np.where(mask, grid, 0.0)
    if kernel == 1:
        return grid.copy()
    rows, cols = grid.shape[-2:]
    acc = _box_sum(grid, kernel)
    if mask is None:
        return acc / _window_counts(rows, cols, kernel)
    cnt = _box_sum(mask.astype(np.float64), kernel)
    out = np.zeros(grid.shape, dtype=np.float64)
    np.divide(acc, cnt, out=out, where=cnt > 0)
    return out


def avg_pool2d_same(grid: np.ndarray, kernel: int) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise DimensionError(f"expected a 2-D grid, got shape {grid.shape}")
    return masked_avg_pool2d(grid, None, kernel)


def avg_pool1d_same(seq: np.ndarray, kernel: int) -> np.ndarray:
    """1-D counterpart of :func:`avg_pool2d_same` along the last axis."""
    seq = np.asarray(seq, dtype=np.float64)
    return masked_avg_pool2d(seq[..., None, :], None, kernel)[..., 0, :]


def top_k_indices(scores: Sequence[float], k: int, direction: Direction = "max") -> np.ndarray:
    """Indices of the ``k`` best scores, ascending; ties go to the smaller index."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if k < 0:
        raise ConfigError(f"k must be >= 0, got {k}")
    k = min(int(k), scores.size)
    if direction == "max":
        key = -scores
    elif direction == "min":
        key = scores
    else:
        raise ConfigError(f"unknown direction {direction!r}")
    if k == 0:
        return np.empty(0, dtype=np.int64)
    if k == key.size:
        return np.arange(k, dtype=np.int64)
    # same set as a stable full sort: everything strictly better than the
    # k-th key, then the lowest-index ties at the boundary
    kth = np.partition(key, k - 1)[k - 1]
    keep = key < kth
    need = k - int(keep.sum())
    keep[np.flatnonzero(key == kth)[:need]] = True
    return np.flatnonzero(keep).astype(np.int64)


def coefficient_of_variation(values: Sequence[float]) -> float:
    """Population standard deviation over mean; 0 when the mean is 0."""
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size == 0:
        raise DimensionError("coefficient of variation of an empty array")
    if (x < 0).any():
        raise DomainError("coefficient of variation expects non-negative values")
    n = float(x.size)
    mean = float(ltr_sum(x)) / n
    if mean == 0.0:
        return 0.0
    dev = x - mean
    var = float(ltr_sum(dev * dev)) / n
    return math.sqrt(var) / mean


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    out = np.array(logits, dtype=np.result_type(logits, np.float32))
    out -= out.max(axis=-1, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=-1, keepdims=True)
    return out


def attention_forward(
    queries: np.ndarray,
    keys: np.ndarray,
    values: np.ndarray,
    dtype: np.dtype = np.float64,
) -> tuple[np.ndarray, np.ndarray]:
    """Unmasked scaled dot-product attention per head.

    ``queries`` is ``[H, m, D]``, ``keys``/``values`` are ``[H, N, D]``. Returns
    the ``[H, m, D]`` output and the ``[H, m, N]`` attention weights.
    """
    q = np.asarray(queries, dtype=dtype)
    k = np.asarray(keys, dtype=dtype)
    v = np.asarray(values, dtype=dtype)
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise DimensionError("attention expects [H, tokens, D] arrays")
    if k.shape != v.shape or q.shape[0] != k.shape[0] or q.shape[2] != k.shape[2]:
        raise DimensionError(
            f"incompatible attention shapes q={q.shape} k={k.shape} v={v.shape}"
        )
    if k.shape[1] == 0:
        raise DimensionError("attention over an empty cache")
    logits = q @ np.swapaxes(k, 1, 2)
    logits *= q.dtype.type(1.0 / math.sqrt(q.shape[2]))
    weights = softmax_rows(logits)
    return weights @ v, weights
