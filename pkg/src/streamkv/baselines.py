"""Reference eviction policies: uniform frames, sliding window, SnapKV-style, reverses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .kvcore import avg_pool1d_same, check_kernel, ltr_sum, softmax_rows, top_k_indices

_REVERSE = {
    "tar_only": "tar_reverse",
    "tar_reverse": "tar_only",
    "van_only": "van_reverse",
    "van_reverse": "van_only",
}


@dataclass(frozen=True)
class SnapKVConfig:
    window: int = 32
    pool_kernel: int = 7

    def __post_init__(self) -> None:
        if self.window < 1:
            raise ConfigError(f"observation window must be >= 1, got {self.window}")
        check_kernel(self.pool_kernel)


def uniform_select(total_frames: int, keep_frames: int) -> np.ndarray:
    """Frames at a regular stride, with the newest frame always in the last slot."""
    if total_frames < 1 or keep_frames < 1:
        raise ConfigError("uniform selection needs at least one frame to keep")
    keep = min(keep_frames, total_frames)
    frames = np.array([j * total_frames // keep for j in range(keep)], dtype=np.int64)
    frames[-1] = total_frames - 1
    return frames


def frames_to_tokens(frames: np.ndarray, tokens_per_frame: int) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.int64)
    return (frames[:, None] * tokens_per_frame + np.arange(tokens_per_frame)).ravel()


def sliding_window_select(n_tokens: int, keep: int) -> np.ndarray:
    keep = max(0, min(int(keep), int(n_tokens)))
    return np.arange(n_tokens - keep, n_tokens, dtype=np.int64)


def snapkv_scores(keys: np.ndarray, config: SnapKVConfig) -> np.ndarray:
    """Attention mass each token receives from the trailing observation window.

    The window tokens' keys stand in for queries (the cache holds no separate
    query projections). Weights are summed over window positions, then heads,
    and the prefix scores are average-pooled; window tokens score 0 here.
    """
    keys = np.asarray(keys, dtype=np.float64)
    if keys.ndim != 3:
        raise DimensionError(f"keys must be [H, N, D], got shape {keys.shape}")
    h, n, d = keys.shape
    w = config.window
    if n <= w:
        raise ConfigError(f"SnapKV needs more than {w} tokens, got {n}")
    queries = keys[:, n - w :, :]
    weights = softmax_rows(queries @ np.swapaxes(keys, 1, 2) / np.sqrt(d))
    per_head = ltr_sum(weights, axis=1)
    u = ltr_sum(per_head, axis=0)
    scores = np.zeros(n, dtype=np.float64)
    scores[: n - w] = avg_pool1d_same(u[: n - w], config.pool_kernel)
    return scores


def snapkv_like_select(
    keys: np.ndarray,
    values: np.ndarray,
    config: SnapKVConfig,
    keep: int,
) -> np.ndarray:
    """Keep the observation window plus the prefix tokens it attends to most."""
    n = np.shape(keys)[1]
    if np.shape(values) != np.shape(keys):
        raise DimensionError("keys and values disagree in shape")
    if keep >= n:
        return np.arange(n, dtype=np.int64)
    if keep < config.window:
        raise ConfigError(f"keep={keep} is smaller than the observation window {config.window}")
    scores = snapkv_scores(keys, config)
    prefix = top_k_indices(scores[: n - config.window], keep - config.window, "max")
    return np.concatenate([prefix, np.arange(n - config.window, n, dtype=np.int64)])


def reverse_mode(policy: str) -> str:
    """Name of the policy that runs the same pipeline with TopK flipped."""
    try:
        return _REVERSE[policy]
    except KeyError:
        raise ConfigError(f"policy {policy!r} has no reverse variant") from None
