"""Latency of dense vs. rank-factored matrix products.

Both paths use the same numpy/BLAS matmul so the comparison isolates the
factored structure. Timing runs in float32 (the only place it is used) and
single-threaded unless asked otherwise.
"""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ContractViolation
from .pruning import factored_cost

CSV_COLUMNS = [
    "shape_m", "shape_n", "batch_l", "k_prime", "density", "dense_ns_median",
    "factored_ns_median", "relative", "theoretical_ratio", "reps", "threads",
]
MIN_REPS = 30
MIN_WARMUP = 5
CHECK_RTOL = 1e-4


@dataclass
class BenchResult:
    shape_m: int
    shape_n: int
    batch_l: int
    k_prime: int
    density: float
    dense_ns_median: float
    dense_ns_q1: float
    dense_ns_q3: float
    factored_ns_median: float
    factored_ns_q1: float
    factored_ns_q3: float
    relative: float
    theoretical_ratio: float
    reps: int
    threads: int
    dtype: str = "float32"

    @property
    def speedup(self):
        return 1.0 / self.relative

    def row(self):
        d = asdict(self)
        return {c: d[c] for c in CSV_COLUMNS}


def _timer_resolution_ns():
    return time.get_clock_info("perf_counter").resolution * 1e9


def _inner_loops(fn):
    """Calls per timed sample so each sample spans >= 100x the timer resolution."""
    t0 = time.perf_counter_ns()
    fn()
    once = max(time.perf_counter_ns() - t0, 1)
    return max(1, math.ceil(100 * _timer_resolution_ns() / once))


def _sample(fn, loops):
    t0 = time.perf_counter_ns()
    for _ in range(loops):
        fn()
    return (time.perf_counter_ns() - t0) / loops


def time_pair(fa, fb, reps=MIN_REPS, warmup=MIN_WARMUP):
    """Interleaved per-call timings (ns) of two callables, alternating which goes first."""
    if reps < MIN_REPS or warmup < MIN_WARMUP:
        raise ContractViolation(f"need reps >= {MIN_REPS} and warmup >= {MIN_WARMUP}")
    for _ in range(warmup):
        fa()
        fb()
    la, lb = _inner_loops(fa), _inner_loops(fb)
    ta, tb = [], []
    for r in range(reps):
        if r % 2:
            tb.append(_sample(fb, lb))
            ta.append(_sample(fa, la))
        else:
            ta.append(_sample(fa, la))
            tb.append(_sample(fb, lb))
    return np.array(ta), np.array(tb)


def _quartiles(t):
    return tuple(float(v) for v in np.percentile(t, [50, 25, 75]))


def _operands(m, n, l, k, rng, dtype):
    w = rng.standard_normal((m, n)).astype(dtype)
    x = rng.standard_normal((n, l)).astype(dtype)
    us = rng.standard_normal((m, k)).astype(dtype)
    v = rng.standard_normal((k, n)).astype(dtype)
    return w, x, us, v


def bench_point(m, n, l, k, reps=MIN_REPS, warmup=MIN_WARMUP, threads=1, seed=0, dtype=np.float32):
    """Time ``W @ x`` against ``US @ (V @ x)`` for one shape and retained rank.

    When the factored form would hold at least ``m*n`` parameters the layer is
    stored unfactorized, so the "factored" side is a dense product too.
    """
    if min(m, n, l) < 1 or not 1 <= k <= min(m, n):
        raise ContractViolation(f"invalid shape/rank ({m}, {n}, {l}, k'={k})")
    rng = np.random.default_rng([seed, m, n, l, k])
    w, x, us, v = _operands(m, n, l, k, rng, dtype)
    unfactorized = k * (m + n) >= m * n
    w_prime = us @ v
    if unfactorized:
        factored = lambda: w_prime @ x
    else:
        factored = lambda: us @ (v @ x)
    ref = w_prime.astype(np.float64) @ x.astype(np.float64)
    got = factored().astype(np.float64)
    err = np.linalg.norm(got - ref) / np.linalg.norm(ref)
    if err > CHECK_RTOL:
        raise ContractViolation(f"factored product deviates from dense by {err:.2e}")
    dense = lambda: w @ x
    with threadpool_limits(limits=threads):
        td, tf = time_pair(dense, factored, reps, warmup)
    dq, fq = _quartiles(td), _quartiles(tf)
    return BenchResult(
        shape_m=m, shape_n=n, batch_l=l, k_prime=k,
        density=factored_cost(m, n, k) / (m * n),
        dense_ns_median=dq[0], dense_ns_q1=dq[1], dense_ns_q3=dq[2],
        factored_ns_median=fq[0], factored_ns_q1=fq[1], factored_ns_q3=fq[2],
        relative=fq[0] / dq[0],
        theoretical_ratio=min(1.0, k * (m + n) / (m * n)),
        reps=reps, threads=threads, dtype=np.dtype(dtype).name,
    )


def dense_control(m, n, l, reps=MIN_REPS, warmup=MIN_WARMUP, threads=1, seed=0, dtype=np.float32):
    """Median-latency ratio of two identical dense products (should be ~1)."""
    rng = np.random.default_rng([seed, m, n, l])
    w = rng.standard_normal((m, n)).astype(dtype)
    x = rng.standard_normal((n, l)).astype(dtype)
    w2, x2 = w.copy(), x.copy()
    with threadpool_limits(limits=threads):
        ta, tb = time_pair(lambda: w @ x, lambda: w2 @ x2, reps, warmup)
    return float(np.median(tb) / np.median(ta))


def ranks_for(m, n, fractions):
    k = min(m, n)
    out = []
    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise ContractViolation("rank fractions must be in (0, 1]")
        out.append(max(1, int(round(f * k))))
    return sorted(set(out))


def bench_grid(shapes, rank_fractions, reps=MIN_REPS, warmup=MIN_WARMUP, threads=1, seed=0):
    """Benchmark every (shape, rank) pair; results sorted by density."""
    results = []
    for m, n, l in shapes:
        for k in ranks_for(m, n, rank_fractions):
            results.append(bench_point(m, n, l, k, reps, warmup, threads, seed))
    return sorted(results, key=lambda r: (r.density, r.shape_m, r.shape_n, r.batch_l, r.k_prime))


def monotone_violations(results, slack=0.05):
    """Rank reductions (per shape) where median latency rose by more than ``slack``."""
    bad = []
    by_shape = {}
    for r in results:
        by_shape.setdefault((r.shape_m, r.shape_n, r.batch_l), []).append(r)
    for rs in by_shape.values():
        rs = sorted(rs, key=lambda r: -r.k_prime)
        for hi, lo in zip(rs, rs[1:]):
            if lo.factored_ns_median > hi.factored_ns_median * (1 + slack):
                bad.append((hi.k_prime, lo.k_prime))
    return bad


def crossover_density(results):
    """Largest density below which every measured factored product beats dense."""
    best = None
    for r in sorted(results, key=lambda r: r.density):
        if r.relative < 1.0:
            best = r.density
        else:
            break
    return best


def to_csv(results):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in results:
        writer.writerow(r.row())
    return buf.getvalue()
