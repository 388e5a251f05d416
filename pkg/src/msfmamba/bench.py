"""Runtime scaling of the scans against a quadratic attention foil."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .ssm import scan_chunked, scan_sequential

ATTN_ROW_BLOCK = 1024


def lengths(min_n: int = 256, max_n: int = 16384) -> list[int]:
    """Powers of two from ``min_n`` to ``max_n`` inclusive."""
    out, n = [], min_n
    while n <= max_n:
        out.append(n)
        n *= 2
    return out


def naive_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Softmax attention with the full ``n x n`` score matrix, built a row block at a time.

    Blocking only bounds memory. Every one of the ``n**2`` scores is still
    materialized and exponentiated.
    """
    n, dh = q.shape
    out = np.empty((n, v.shape[1]))
    scale = 1.0 / np.sqrt(dh)
    for i in range(0, n, ATTN_ROW_BLOCK):
        s = (q[i:i + ATTN_ROW_BLOCK] @ k.T) * scale
        s -= s.max(axis=1, keepdims=True)
        np.exp(s, out=s)
        s /= s.sum(axis=1, keepdims=True)
        out[i:i + ATTN_ROW_BLOCK] = s @ v
    return out


def median_time(fn: Callable[[], object], repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def loglog_slope(ns, seconds) -> float:
    return float(np.polyfit(np.log(ns), np.log(seconds), 1)[0])


@dataclass
class BenchReport:
    ns: list[int]
    timings: dict[str, list[float]] = field(default_factory=dict)
    repeats: int = 5

    @property
    def slopes(self) -> dict[str, float]:
        return {m: loglog_slope(self.ns, t) for m, t in self.timings.items()}

    def timings_csv(self) -> str:
        rows = ["method,n,median_seconds,repeats"]
        for m, ts in self.timings.items():
            rows += [f"{m},{n},{t:.6e},{self.repeats}" for n, t in zip(self.ns, ts)]
        return "\n".join(rows) + "\n"

    def slopes_csv(self) -> str:
        return "method,slope\n" + "".join(f"{m},{s:.4f}\n" for m, s in self.slopes.items())


def run_bench(
    d: int = 8,
    N: int = 8,
    chunk: int = 32,
    repeats: int = 5,
    min_n: int = 256,
    max_n: int = 16384,
    head_dim: int = 64,
    seed: int = 0,
    log: Callable[[str], None] = print,
) -> BenchReport:
    if repeats < 5:
        raise ValueError(f"bench needs at least 5 repeats per length, got {repeats}")
    ns = lengths(min_n, max_n)
    if len(ns) < 2:
        raise ValueError(f"need at least two lengths between {min_n} and {max_n}")
    rng = np.random.default_rng(seed)
    report = BenchReport(ns, {"scan_sequential": [], "scan_chunked": [], "attention": []}, repeats)
    for n in ns:
        a = rng.uniform(0.5, 1.0, size=(n, d, N))
        bx = rng.normal(size=(n, d, N))
        C = rng.normal(size=(n, N))
        skip = rng.normal(size=d)
        x = rng.normal(size=(n, d))
        q, k, v = (rng.normal(size=(n, head_dim)) for _ in range(3))
        row = {
            "scan_sequential": median_time(lambda: scan_sequential(a, bx, C, skip, x), repeats),
            "scan_chunked": median_time(lambda: scan_chunked(a, bx, C, skip, x, chunk), repeats),
            "attention": median_time(lambda: naive_attention(q, k, v), repeats),
        }
        for m, t in row.items():
            report.timings[m].append(t)
        log(f"n={n}: " + "  ".join(f"{m} {t * 1e3:.2f} ms" for m, t in row.items()))
    return report
