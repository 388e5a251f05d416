"""Walk through the selective scan: discretization, the two scan paths, and their cost.

Run with ``python notebooks/01_scans.py``.
"""
import time

import numpy as np

from msfmamba import ssm

rng = np.random.default_rng(0)

# A continuous diagonal system, discretized for a step size per token.
n, d, N = 12, 2, 3
a_log = rng.normal(size=(d, N)) * 0.5
delta = rng.uniform(0.01, 0.5, size=(n, d))
B = rng.normal(size=(n, N))
x = rng.normal(size=(n, d))
a_bar, bbx = ssm.discretize(a_log, delta, B, x)
print("decay range", a_bar.data.min(), a_bar.data.max())

# Tiny steps fall back to a two-term series; the exact factor and the series agree.
tiny = np.array([1e-13, 1e-10, 1e-9])
print("zoh factor / delta at tiny steps:", ssm.zoh_input_factor(tiny, np.full(3, -1.0)) / tiny)

# Sequential and chunked scans compute the same recurrence.
C = rng.normal(size=(n, N))
skip = rng.normal(size=d)
seq = ssm.scan_sequential(a_bar, bbx, C, skip, x).data
for chunk in (1, 4, n):
    gap = np.abs(ssm.scan_chunked(a_bar, bbx, C, skip, x, chunk).data - seq).max()
    print(f"chunk {chunk:2d}: max gap {gap:.1e}")

# Doubling the length roughly doubles the time.
for n in (1024, 2048, 4096):
    a = rng.uniform(0.5, 1.0, size=(n, 4, 4))
    b = rng.normal(size=(n, 4, 4))
    t0 = time.perf_counter()
    ssm.scan_chunked(a, b, rng.normal(size=(n, 4)), np.zeros(4), np.zeros((n, 4)), 64)
    print(f"n={n}: {1e3 * (time.perf_counter() - t0):.1f} ms")
