"""Acceptance criteria 1-10, one test (or small group) per criterion.

Each criterion records a PASS/FAIL line that is printed in the terminal
summary under "acceptance criteria".
"""

import hashlib
import math
import time

import numpy as np
import pytest

from streamkv.cache_engine import BudgetConfig, Engine, FrameKV
from streamkv.errors import TraceCorruptionError, TraceFormatError
from streamkv.harness import (
    StreamSpec,
    SyntheticStream,
    oracle_combined_select,
    oracle_pool,
    place_needles,
)
from streamkv.kvcore import (
    FrameGeometry,
    ModelDims,
    coefficient_of_variation,
    cosine_similarity,
    l2_norm,
)
from streamkv.report import RunReport, SurvivorLog
from streamkv.runner import run_policy
from streamkv.scoring import PoolingConfig, ScoreMap, adaptive_pool_van, van_scores
from streamkv.trace_io import TraceHeader, read_trace, write_trace

# criterion-1 setup: M = 6144, C = 4608, p = 64, 100 * f frames
G64 = FrameGeometry.from_grid(8, 8)
M, C = 6144, 4608
F = M // G64.p
PLATEAU_DIMS = ModelDims(1, 2, 16)
PLATEAU_FRAMES = 100 * F


def _plateau_run(log_path, workers=1, dims=PLATEAU_DIMS, prefill=True):
    spec = StreamSpec(PLATEAU_FRAMES, G64, dims, needles=place_needles(8, PLATEAU_FRAMES, G64, 0), seed=0)
    stream = SyntheticStream(spec)
    with open(log_path, "wb") as sink:
        log = SurvivorLog(sink)
        engine = Engine(BudgetConfig(M, C), G64, dims, workers=workers, on_compress=log)
        over_budget = wrong_after = 0
        t0 = time.perf_counter()
        for frame in stream:
            out = engine.append_frame(frame, prefill=prefill)
            over_budget += engine.num_tokens > M
            wrong_after += out.compressed and engine.num_tokens != C
        wall = time.perf_counter() - t0
    st = engine.stats()
    report_body = {
        "digest": log.hexdigest(),
        "stats": (st.compressions_performed, st.tokens_appended, st.tokens_evicted,
                  st.current_tokens, st.peak_tokens_per_layer),
    }
    return {
        "stats": st,
        "wall": wall,
        "over_budget": over_budget,
        "wrong_after": wrong_after,
        "body": report_body,
        "log_sha": hashlib.sha256(open(log_path, "rb").read()).hexdigest(),
    }


@pytest.fixture(scope="module")
def plateau(tmp_path_factory):
    return _plateau_run(tmp_path_factory.mktemp("plateau") / "survivors.bin")


def test_criterion_01_memory_plateau(plateau, acceptance):
    st = plateau["stats"]
    expected = 1 + (PLATEAU_FRAMES * G64.p - M) // (M - C)
    ok = (
        plateau["over_budget"] == 0
        and plateau["wrong_after"] == 0
        and st.peak_tokens_per_layer == M
        and st.compressions_performed == expected
        and plateau["wall"] < 60.0
    )
    acceptance(
        1,
        ok,
        f"{PLATEAU_FRAMES} frames, peak={st.peak_tokens_per_layer}, over-budget steps="
        f"{plateau['over_budget']}, post-compression size errors={plateau['wrong_after']}, "
        f"compressions={st.compressions_performed}/{expected}, wall={plateau['wall']:.1f}s",
    )


def test_criterion_02_recent_frame_retention(acceptance):
    rng = np.random.default_rng(2)
    configs = violations = compressions = 0
    while configs < 220:
        rows, cols = (int(x) for x in rng.integers(1, 5, size=2))
        g = FrameGeometry.from_grid(rows, cols)
        p = g.p
        f = int(rng.integers(3, 13))
        c_frames = int(rng.integers(1, f))
        r = int(rng.integers(1, min(c_frames, f - 1) + 1))
        alpha = float(rng.uniform(0, 1))
        cfg = BudgetConfig(f * p, c_frames * p, r, alpha)
        try:
            cfg.resolve(g)
        except ValueError:
            continue
        dims = ModelDims(int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(2, 6)))
        seed = int(rng.integers(0, 2**32))
        spec = StreamSpec(int(rng.integers(f, 4 * f)), g, dims, float(rng.uniform(0, 1)), 0.01, seed=seed)
        stream = SyntheticStream(spec)
        appended = [0]

        def check(_count, _sel, survivors):
            nonlocal violations, compressions
            compressions += 1
            recent = np.arange(appended[0] - r * p, appended[0])
            violations += sum(not np.isin(recent, s).all() for s in survivors)

        engine = Engine(cfg, g, dims, on_compress=check)
        for frame in stream:
            appended[0] += p
            engine.append_frame(frame)
        configs += 1
    acceptance(
        2,
        violations == 0 and compressions > 0,
        f"{configs} configs, {compressions} compressions, {violations} violations",
    )


def test_criterion_03_oracle_equivalence(acceptance):
    rng = np.random.default_rng(3)
    instances = mismatches = layers_checked = 0
    kernels = set()
    while instances < 220:
        rows = int(rng.integers(1, 5))
        cols = int(rng.integers(1, 16 // rows + 1))
        g = FrameGeometry.from_grid(rows, cols)
        p = g.p
        f = int(rng.integers(2, 9))
        c_frames = int(rng.integers(1, f))
        r = int(rng.integers(1, f))
        taus = np.sort(rng.uniform(0, 1.0, size=3))
        if not taus[0] < taus[1] < taus[2]:
            continue
        cfg = BudgetConfig(f * p, c_frames * p, r, float(rng.uniform(0, 1)), PoolingConfig(*taus))
        try:
            cfg.resolve(g)
        except ValueError:
            continue
        heads = int(rng.integers(1, 5))
        dims = ModelDims(2, heads, int(rng.integers(1, 6)))
        shape = (dims.num_layers, heads, p, dims.head_dim)
        scale = rng.uniform(0.2, 3.0, size=(f, 1, 1, p, 1))
        frames = [
            FrameKV(rng.standard_normal(shape).astype(np.float32),
                    (rng.standard_normal(shape) * scale[t]).astype(np.float32))
            for t in range(f)
        ]
        engine = Engine(cfg, g, dims)
        for frame in frames:
            engine.append_frame(frame)
        keys = np.concatenate([fr.keys for fr in frames], axis=2)
        values = np.concatenate([fr.values for fr in frames], axis=2)
        ref = oracle_combined_select(list(keys), list(values), cfg, g)
        for sel, want in zip(engine.last_selection, ref):
            mismatches += sel.indices.tolist() != want
            kernels.add(sel.kernel)
            layers_checked += 1
        instances += 1
    acceptance(
        3,
        mismatches == 0,
        f"{instances} instances, {layers_checked} layers, {mismatches} mismatches, kernels seen {sorted(kernels)}",
    )


def _discrimination(policy, seed):
    # f = 18, r = 2: past = 16 frames; budget C - r*p = 16 frames * 16 dynamic patches
    f, r = 18, 2
    n_dynamic = 16
    past_budget = (f - r) * n_dynamic
    cfg = BudgetConfig(f * 64, r * 64 + past_budget, r, policy=policy)
    spec = StreamSpec(f, G64, ModelDims(1, 2, 16), static_fraction=0.75, noise_sigma=0.01, seed=seed)
    stream = SyntheticStream(spec)
    engine = Engine(cfg, G64, spec.dims)
    for frame in stream:
        engine.append_frame(frame)
    kept = engine.layer(0).position
    past = np.arange((f - r) * 64)
    static = stream.is_static_position(past)
    kept_past = np.isin(past, kept)
    dyn_retained = kept_past[~static].mean()
    static_retained = kept_past[static].mean()
    static_share = static[kept_past].mean()
    return dyn_retained, static_retained, static_share


def test_criterion_04_redundancy_discrimination(acceptance):
    fwd = [_discrimination("tar_only", s) for s in range(10)]
    rev = [_discrimination("tar_reverse", s) for s in range(10)]
    dyn = min(x[0] for x in fwd)
    stat = max(x[1] for x in fwd)
    rev_dyn = max(x[0] for x in rev)
    rev_share = min(x[2] for x in rev)
    ok = dyn >= 0.95 and stat <= 0.10 and rev_dyn <= 0.10 and rev_share >= 0.95
    acceptance(
        4,
        ok,
        f"tar_only: dynamic recall min {dyn:.3f}, static retention max {stat:.3f}; "
        f"tar_reverse: dynamic retention max {rev_dyn:.3f}, static share of kept min {rev_share:.3f}",
    )


def test_criterion_05_salience_discrimination(acceptance):
    f = F
    dims = ModelDims(1, 2, 16)
    top_ok = reverse_ok = 0
    for seed in range(20):
        needles = place_needles(3, f, G64, seed, norm_boost=3.0)
        spec = StreamSpec(f, G64, dims, needles=needles, seed=seed)
        stream = SyntheticStream(spec)
        frames = list(stream)
        values = np.concatenate([fr.values[0] for fr in frames], axis=1)
        pooled, _ = adaptive_pool_van(van_scores(values, G64), PoolingConfig())
        cutoff = np.quantile(pooled.values, 0.95)
        positions = stream.needle_positions
        top_ok += all(pooled.values[p] >= cutoff for p in positions)
        engine = Engine(BudgetConfig(M, C, policy="van_reverse"), G64, dims)
        for frame in frames:
            engine.append_frame(frame)
        reverse_ok += not np.isin(positions, engine.layer(0).position).any()
    ok = top_ok >= 19 and reverse_ok == 20
    acceptance(5, ok, f"needles in pooled-VaN top 5%: {top_ok}/20 seeds; van_reverse drops all: {reverse_ok}/20")


def test_criterion_06_needle_mass_vs_uniform(acceptance):
    m, c = 1024, 768
    frames = 8 * c // G64.p
    dims = ModelDims(2, 2, 16)
    wins = 0
    masses = []
    for seed in range(20):
        spec = StreamSpec(frames, G64, dims, needles=place_needles(4, frames, G64, seed, 5.0), seed=seed)
        out = {}
        for policy in ("infinipot_v", "uniform"):
            stream = SyntheticStream(spec)
            res, _, _ = run_policy(BudgetConfig(m, c, policy=policy), iter(stream), G64, dims, stream=stream)
            out[policy] = res.needle_mass
        wins += out["infinipot_v"] >= out["uniform"]
        masses.append((out["infinipot_v"], out["uniform"]))
    mean_ours = float(np.mean([a for a, _ in masses]))
    mean_uni = float(np.mean([b for _, b in masses]))
    acceptance(
        6,
        wins >= 16,
        f"infinipot_v >= uniform in {wins}/20 seeds (mean mass {mean_ours:.4f} vs {mean_uni:.4f})",
    )


def _scalar_cos(a, b):
    dot = na = nb = 0.0
    for x, y in zip(a, b):
        dot += x * y
        na += x * x
        nb += y * y
    return 0.0 if na == 0 or nb == 0 else dot / (math.sqrt(na) * math.sqrt(nb))


def test_criterion_07_kernel_correctness(acceptance):
    rng = np.random.default_rng(7)
    worst_pool = 0.0
    forcing = {7: (10, 11, 12), 5: (1e-9, 10, 11), 3: (1e-9, 2e-9, 10), 1: (1e-9, 2e-9, 3e-9)}
    for _ in range(100):
        rows, cols = (int(x) for x in rng.integers(1, 9, size=2))
        g = FrameGeometry.from_grid(rows, cols)
        frames = int(rng.integers(1, 4))
        vals = rng.uniform(0.1, 5.0, size=frames * g.p)
        for kernel, taus in forcing.items():
            pooled, k = adaptive_pool_van(ScoreMap(vals, g), PoolingConfig(*taus))
            assert k == kernel
            ref = np.concatenate(
                [oracle_pool(vals[t * g.p : (t + 1) * g.p].reshape(rows, cols), k).ravel() for t in range(frames)]
            )
            worst_pool = max(worst_pool, float(np.abs(pooled.values - ref).max()))
    worst_scalar = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 33))
        a, b = rng.standard_normal(n), rng.standard_normal(n)
        worst_scalar = max(worst_scalar, abs(cosine_similarity(a, b) - _scalar_cos(a.tolist(), b.tolist())))
        worst_scalar = max(worst_scalar, abs(l2_norm(a) - math.sqrt(sum(x * x for x in a.tolist()))))
        x = np.abs(a).tolist()
        mu = sum(x) / n
        cv = math.sqrt(sum((v - mu) ** 2 for v in x) / n) / mu
        worst_scalar = max(worst_scalar, abs(coefficient_of_variation(x) - cv))
    acceptance(
        7,
        worst_pool <= 1e-6 and worst_scalar <= 1e-6,
        f"100 grids x kernels {{1,3,5,7}}: max |d| {worst_pool:.2e}; cosine/norm/CV max |d| {worst_scalar:.2e}",
    )


def test_criterion_08_trace_round_trip(tmp_path, acceptance):
    rng = np.random.default_rng(8)
    identical = 0
    frame_counts = [0, 1] + [int(x) for x in rng.integers(0, 6, size=48)]
    for i, n in enumerate(frame_counts):
        rows, cols = (int(x) for x in rng.integers(1, 4, size=2))
        header = TraceHeader(int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 6)),
                             rows * cols, rows, cols, n)
        frames = [
            FrameKV(rng.standard_normal(header.block_shape).astype(np.float32),
                    rng.standard_normal(header.block_shape).astype(np.float32))
            for _ in range(n)
        ]
        path = tmp_path / f"t{i}.kvtr"
        size = write_trace(path, header, frames)
        got_header, it = read_trace(path)
        got = list(it)
        same = (
            size == path.stat().st_size == header.total_bytes
            and got_header == header
            and len(got) == n
            and all(a.keys.tobytes() == b.keys.tobytes() and a.values.tobytes() == b.values.tobytes()
                    for a, b in zip(got, frames))
        )
        rewritten = tmp_path / f"t{i}.copy"
        write_trace(rewritten, got_header, got)
        identical += same and rewritten.read_bytes() == path.read_bytes()
    errors_ok = True
    data = (tmp_path / "t1.kvtr").read_bytes()
    (tmp_path / "trunc.kvtr").write_bytes(data[:-3])
    (tmp_path / "magic.kvtr").write_bytes(b"XXXX" + data[4:])
    try:
        read_trace(tmp_path / "trunc.kvtr")
        errors_ok = False
    except TraceCorruptionError:
        pass
    try:
        read_trace(tmp_path / "magic.kvtr")
        errors_ok = False
    except TraceFormatError:
        pass
    acceptance(
        8,
        identical == len(frame_counts) and errors_ok,
        f"{identical}/{len(frame_counts)} traces byte-identical (0- and 1-frame included); "
        f"truncation/bad-magic error classes {'ok' if errors_ok else 'wrong'}",
    )


def test_criterion_09_overhead_ratio(plateau, acceptance):
    st = plateau["stats"]
    ratio = st.overhead_ratio
    acceptance(
        9,
        0.0 <= ratio <= 0.10,
        f"overhead_ratio {ratio:.4f} (append {st.time_append:.1f}s incl. prefill attention, "
        f"compress {st.time_compress:.1f}s)",
    )


def test_criterion_10_determinism(plateau, tmp_path, acceptance):
    again = _plateau_run(tmp_path / "again.bin")
    same_run = again["log_sha"] == plateau["log_sha"] and again["body"] == plateau["body"]
    # layer parallelism: a multi-layer stream with 1 vs 4 workers
    dims = ModelDims(4, 2, 16)
    seq = _plateau_run(tmp_path / "seq.bin", workers=1, dims=dims, prefill=False)
    par = _plateau_run(tmp_path / "par.bin", workers=4, dims=dims, prefill=False)
    same_parallel = seq["log_sha"] == par["log_sha"] and seq["body"] == par["body"]
    acceptance(
        10,
        same_run and same_parallel,
        f"repeat run identical: {same_run}; 4-layer run with 1 vs 4 workers identical: {same_parallel}",
    )


def test_criterion_10_report_bodies(tmp_path, acceptance):
    from streamkv.cli import main

    bodies = []
    for i, workers in enumerate(("1", "1", "4")):
        out = tmp_path / f"r{i}.json"
        args = ["simulate", "--frames", "400", "--layers", "2", "--needles", "4", "--seed", "11",
                "--policy", "infinipot_v,uniform,snapkv_like", "--workers", workers, "--out", str(out)]
        assert main(args) == 0
        bodies.append(RunReport.from_json(out.read_text()).body_json())
    acceptance(10, bodies[0] == bodies[1] == bodies[2], "CLI report bodies identical across repeats and workers")
