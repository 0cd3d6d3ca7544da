"""Synthetic video-like KV streams, a toy decoder, and brute-force oracles.

Streams mimic the statistics that make TaR/VaN work: *static* patches repeat
a fixed base vector (plus small noise) every frame, *dynamic* patches draw a
fresh unit vector every frame, and *needles* are single tokens whose value is
scaled up and whose key is orthogonal to the recent history of their patch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .cache_engine import BudgetConfig, Engine, FrameKV, LayerKV
from .errors import ConfigError
from .kvcore import FrameGeometry, ModelDims, attention_forward  # noqa: F401  (re-exported)

NEEDLE_HISTORY = 8


@dataclass(frozen=True)
class Needle:
    frame: int
    row: int
    col: int
    norm_boost: float = 5.0


@dataclass(frozen=True)
class StreamSpec:
    num_frames: int
    geometry: FrameGeometry
    dims: ModelDims
    static_fraction: float = 0.75
    noise_sigma: float = 0.01
    needles: tuple[Needle, ...] = ()
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_frames < 0:
            raise ConfigError("num_frames must be >= 0")
        if not 0.0 <= self.static_fraction <= 1.0:
            raise ConfigError(f"static_fraction must lie in [0, 1], got {self.static_fraction}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        g = self.geometry
        seen = set()
        for nd in self.needles:
            if not (0 <= nd.frame < self.num_frames and 0 <= nd.row < g.grid_rows and 0 <= nd.col < g.grid_cols):
                raise ConfigError(f"needle {nd} lies outside the stream")
            if nd.norm_boost < 1:
                raise ConfigError(f"needle norm_boost must be >= 1, got {nd.norm_boost}")
            key = (nd.frame, nd.row, nd.col)
            if key in seen:
                raise ConfigError(f"duplicate needle at {key}")
            seen.add(key)
        object.__setattr__(self, "needles", tuple(sorted(self.needles, key=lambda n: (n.frame, n.row, n.col))))

    def needle_position(self, needle: Needle) -> int:
        g = self.geometry
        return needle.frame * g.p + needle.row * g.grid_cols + needle.col


@dataclass
class NeedleReport:
    needles_planted: int
    needles_retained: int
    retention_rate: float
    attention_mass_on_needles: float


def place_needles(
    count: int,
    num_frames: int,
    geometry: FrameGeometry,
    seed: int,
    norm_boost: float = 5.0,
) -> tuple[Needle, ...]:
    """Scatter ``count`` needles over distinct tokens, reproducibly."""
    total = num_frames * geometry.p
    if count > total:
        raise ConfigError(f"cannot place {count} needles in {total} tokens")
    rng = np.random.default_rng([seed, 0x6E656564])
    flat = np.sort(rng.choice(total, size=count, replace=False))
    out = []
    for pos in flat:
        frame, patch = divmod(int(pos), geometry.p)
        out.append(Needle(frame, patch // geometry.grid_cols, patch % geometry.grid_cols, norm_boost))
    return tuple(out)


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


class SyntheticStream:
    """Deterministic frame source described by a :class:`StreamSpec`."""

    def __init__(self, spec: StreamSpec) -> None:
        self.spec = spec
        g, d = spec.geometry, spec.dims
        rng = np.random.default_rng(spec.seed)
        n_static = int(round(spec.static_fraction * g.p))
        mask = np.zeros(g.p, dtype=bool)
        mask[rng.permutation(g.p)[:n_static]] = True
        self.static_mask = mask
        shape = (d.num_layers, d.num_heads, g.p, d.head_dim)
        self._base_k = _unit(rng.standard_normal(shape))
        self._base_v = _unit(rng.standard_normal(shape))
        self._stream_seed = int(rng.integers(0, 2**63))
        self.needle_keys: dict[int, np.ndarray] = {}

    @property
    def needle_positions(self) -> list[int]:
        return [self.spec.needle_position(n) for n in self.spec.needles]

    def is_static_position(self, positions: np.ndarray) -> np.ndarray:
        """True for tokens of static patches that are not needles."""
        positions = np.asarray(positions, dtype=np.int64)
        out = self.static_mask[positions % self.spec.geometry.p]
        return out & ~np.isin(positions, self.needle_positions)

    def __iter__(self) -> Iterator[FrameKV]:
        spec = self.spec
        g, d = spec.geometry, spec.dims
        rng = np.random.default_rng(self._stream_seed)
        shape = (d.num_layers, d.num_heads, g.p, d.head_dim)
        by_frame: dict[int, list[Needle]] = {}
        for nd in spec.needles:
            by_frame.setdefault(nd.frame, []).append(nd)
        history: list[np.ndarray] = []
        static = self.static_mask[None, None, :, None]
        for t in range(spec.num_frames):
            dyn_k = _unit(rng.standard_normal(shape))
            dyn_v = _unit(rng.standard_normal(shape))
            noise_k = rng.standard_normal(shape) * spec.noise_sigma
            noise_v = rng.standard_normal(shape) * spec.noise_sigma
            keys = np.where(static, self._base_k + noise_k, dyn_k)
            values = np.where(static, self._base_v + noise_v, dyn_v)
            for nd in by_frame.get(t, ()):
                patch = nd.row * g.grid_cols + nd.col
                keys[:, :, patch, :] = self._needle_key(rng, history, patch)
                values[:, :, patch, :] *= nd.norm_boost
                self.needle_keys[spec.needle_position(nd)] = keys[:, :, patch, :].astype(np.float32)
            history.append(keys)
            if len(history) > NEEDLE_HISTORY:
                history.pop(0)
            yield FrameKV(keys.astype(np.float32), values.astype(np.float32))

    def _needle_key(self, rng: np.random.Generator, history: list[np.ndarray], patch: int) -> np.ndarray:
        """Random unit key orthogonal to the patch's base and recent keys, per layer and head."""
        d = self.spec.dims
        out = np.empty((d.num_layers, d.num_heads, d.head_dim))
        draws = rng.standard_normal(out.shape)
        for layer in range(d.num_layers):
            for head in range(d.num_heads):
                # at most D - 1 directions: the base plus the newest history
                keep = max(0, d.head_dim - 2)
                recent = history[-keep:] if keep else []
                basis = [self._base_k[layer, head, patch]]
                basis += [frame[layer, head, patch] for frame in recent]
                basis = np.array(basis).T
                q, _ = np.linalg.qr(basis)
                v = draws[layer, head]
                v = v - q @ (q.T @ v)
                v = v - q @ (q.T @ v)
                out[layer, head] = v / np.linalg.norm(v)
        return out

    def frames(self) -> list[FrameKV]:
        return list(self)

    def all_needle_keys(self) -> dict[int, np.ndarray]:
        """Needle keys ``[L, H, D]`` by global position (generates the stream if needed)."""
        if len(self.needle_keys) < len(self.spec.needles):
            for _ in self:
                pass
        return dict(self.needle_keys)


def gen_stream(spec: StreamSpec) -> Iterator[FrameKV]:
    return iter(SyntheticStream(spec))


def needle_recall(
    layers: Sequence[LayerKV],
    stream: SyntheticStream,
    query_scale: float = 8.0,
) -> NeedleReport:
    """How many needles survive and how much attention a needle-seeking query puts on them.

    A needle counts as retained when it survives in at least half the layers.
    The query for each layer and head is the normalized sum of the needle keys
    times ``query_scale * sqrt(D)``; the reported mass is the post-softmax
    weight on resident needles, averaged over layers and heads.
    """
    positions = stream.needle_positions
    planted = len(positions)
    if planted == 0:
        return NeedleReport(0, 0, 1.0, 0.0)
    needle_keys = stream.all_needle_keys()
    survive_count = np.zeros(planted, dtype=np.int64)
    mass = 0.0
    for li, layer in enumerate(layers):
        present = np.isin(positions, layer.position)
        survive_count += present
        direction = np.sum([needle_keys[p][li] for p in positions], axis=0)
        d = direction.shape[-1]
        q = direction / np.linalg.norm(direction, axis=-1, keepdims=True) * query_scale * math.sqrt(d)
        _, weights = attention_forward(q[:, None, :], layer.keys, layer.values)
        on_needles = np.isin(layer.position, positions)
        mass += float(weights[:, 0, on_needles].sum(axis=-1).mean())
    retained = int((2 * survive_count >= len(layers)).sum())
    return NeedleReport(planted, retained, retained / planted, mass / len(layers))


# ---------------------------------------------------------------------------
# Literal oracles. Plain Python loops over floats, with a full sort in place
# of TopK. Only meant for small instances.
# ---------------------------------------------------------------------------


def _oracle_cos(a: list[float], b: list[float]) -> float:
    dot = 0.0
    na2 = 0.0
    nb2 = 0.0
    for x, y in zip(a, b):
        dot += x * y
    for x in a:
        na2 += x * x
    for y in b:
        nb2 += y * y
    denom = math.sqrt(na2) * math.sqrt(nb2)
    if denom == 0.0:
        return 0.0
    return min(1.0, max(-1.0, dot / denom))


def _oracle_topk(scores: list[float], k: int) -> list[int]:
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return sorted(order[:k])


def _oracle_pool(grid: list[list[float]], kernel: int) -> list[list[float]]:
    rows, cols = len(grid), len(grid[0])
    half = kernel // 2
    out = []
    for i in range(rows):
        row = []
        for j in range(cols):
            total = 0.0
            count = 0
            for di in range(-half, half + 1):
                for dj in range(-half, half + 1):
                    ii, jj = i + di, j + dj
                    if 0 <= ii < rows and 0 <= jj < cols:
                        total += grid[ii][jj]
                        count += 1
            row.append(total / count)
        out.append(row)
    return out


def oracle_combined_select(
    keys: Sequence[np.ndarray],
    values: Sequence[np.ndarray],
    config: BudgetConfig,
    geometry: FrameGeometry,
) -> list[list[int]]:
    """Straight-line TaR + VaN selection for a single budget window, per layer.

    ``keys[l]`` and ``values[l]`` are ``[H, N, D]`` with ``N = f * p``. The
    TaR TopK takes ``alpha*C - r*p`` past tokens, and both the TaR picks and
    the recent frames are raised to ``max + 1`` before the final TopK.
    """
    cfg = config.resolve(geometry)
    p = geometry.p
    rows, cols = geometry.grid_rows, geometry.grid_cols
    c_size = cfg.target_size
    r = cfg.recent_frames
    c_tar = cfg.tar_budget
    tau1, tau2, tau3 = cfg.pooling.thresholds
    result = []
    for k_arr, v_arr in zip(keys, values):
        k_l = np.asarray(k_arr, dtype=np.float64).tolist()
        v_l = np.asarray(v_arr, dtype=np.float64).tolist()
        n_heads = len(k_l)
        n_tok = len(k_l[0])
        f = n_tok // p
        # TaR over past frames
        s = []
        for t in range(f - r):
            for i in range(rows):
                for j in range(cols):
                    tok = t * p + i * cols + j
                    head_sum = 0.0
                    for h in range(n_heads):
                        acc = 0.0
                        for t2 in range(f - r, f):
                            acc += _oracle_cos(k_l[h][tok], k_l[h][t2 * p + i * cols + j])
                        head_sum += -(acc / r)
                    s.append(head_sum / n_heads)
        i_tar = _oracle_topk(s, c_tar - r * p)
        # VaN
        van = []
        for tok in range(n_tok):
            sq = 0.0
            for h in range(n_heads):
                for x in v_l[h][tok]:
                    sq += x * x
            van.append(math.sqrt(sq))
        mu = 0.0
        for x in van:
            mu += x
        mu = mu / n_tok
        if mu == 0.0:
            cv = 0.0
        else:
            var = 0.0
            for x in van:
                var += (x - mu) * (x - mu)
            cv = math.sqrt(var / n_tok) / mu
        if cv < tau1:
            pool = 7
        elif cv < tau2:
            pool = 5
        elif cv < tau3:
            pool = 3
        else:
            pool = 1
        pooled = []
        for t in range(f):
            grid = [[van[t * p + i * cols + j] for j in range(cols)] for i in range(rows)]
            for row in _oracle_pool(grid, pool):
                pooled.extend(row)
        # prioritize TaR picks and recent frames
        top = max(pooled)
        dom = max(top + 1.0, float(np.nextafter(top, np.inf)))
        for idx in i_tar:
            pooled[idx] = dom
        for idx in range((f - r) * p, f * p):
            pooled[idx] = dom
        result.append(_oracle_topk(pooled, c_size))
    return result


def oracle_tar_scores(keys: np.ndarray, geometry: FrameGeometry, r: int) -> list[float]:
    """Brute force over every (t, i, j, t', h) for one layer ``[H, N, D]``."""
    k_l = np.asarray(keys, dtype=np.float64).tolist()
    p = geometry.p
    f = len(k_l[0]) // p
    out = []
    for tok in range((f - r) * p):
        patch = tok % p
        head_sum = 0.0
        for h in range(len(k_l)):
            acc = 0.0
            for t2 in range(f - r, f):
                acc += _oracle_cos(k_l[h][tok], k_l[h][t2 * p + patch])
            head_sum += -(acc / r)
        out.append(head_sum / len(k_l))
    return out


def oracle_pool(grid: np.ndarray, kernel: int) -> np.ndarray:
    return np.array(_oracle_pool(np.asarray(grid, dtype=np.float64).tolist(), kernel))


def oracle_snapkv_scores(keys: np.ndarray, window: int, kernel: int) -> list[float]:
    k_l = np.asarray(keys, dtype=np.float64).tolist()
    n_heads, n = len(k_l), len(k_l[0])
    d = len(k_l[0][0])
    u = [0.0] * n
    for h in range(n_heads):
        for qi in range(n - window, n):
            logits = [sum(a * b for a, b in zip(k_l[h][qi], k_l[h][t])) / math.sqrt(d) for t in range(n)]
            top = max(logits)
            exps = [math.exp(x - top) for x in logits]
            z = sum(exps)
            for t in range(n):
                u[t] += exps[t] / z
    prefix = u[: n - window]
    pooled = _oracle_pool([prefix], kernel)[0]
    return pooled + [0.0] * window
