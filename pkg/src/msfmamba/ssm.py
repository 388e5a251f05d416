"""Selective state-space scans over token sequences.

Shapes (leading batch axes ``...`` are allowed everywhere):

    x, delta      (..., n, d)
    B, C          (..., n, N)
    a_bar, b_bar_x (..., n, d, N)

The continuous transition is diagonal, ``A[c, s] = -exp(a_log[c, s])``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import ndtensor as nt
from .ndtensor import ConfigError, ContractError, Parameter, Tensor

#: below this |delta * A| the ZOH input factor switches to its Taylor series
SERIES_THRESHOLD = 1e-8


@dataclass
class SsmDirectionParams:
    a_log: Parameter  # (d, N)
    b_proj: Parameter  # (d, N)
    b_bias: Parameter  # (N,)
    c_proj: Parameter  # (d, N)
    c_bias: Parameter  # (N,)
    delta_proj: Parameter  # (d, 1)
    delta_bias: Parameter  # (d,)
    skip: Parameter  # (d,)

    @classmethod
    def init(cls, d: int, N: int, rng: np.random.Generator, prefix: str = "") -> "SsmDirectionParams":
        a_log = np.tile(np.log(np.arange(1, N + 1, dtype=np.float64)), (d, 1))
        dt0 = rng.uniform(1e-3, 1e-1, size=d)
        scale = 1.0 / math.sqrt(d)
        values = {
            "a_log": a_log,
            "b_proj": rng.normal(0.0, scale, size=(d, N)),
            "b_bias": np.zeros(N),
            "c_proj": rng.normal(0.0, scale, size=(d, N)),
            "c_bias": np.zeros(N),
            "delta_proj": rng.normal(0.0, 0.1 * scale, size=(d, 1)),
            "delta_bias": dt0 + np.log(-np.expm1(-dt0)),  # softplus^-1
            "skip": np.ones(d),
        }
        return cls(**{k: Parameter(v, name=prefix + k) for k, v in values.items()})

    def parameters(self) -> list[Parameter]:
        return [getattr(self, f.name) for f in fields(self)]

    @property
    def d(self) -> int:
        return self.a_log.shape[0]

    @property
    def N(self) -> int:
        return self.a_log.shape[1]


@dataclass
class BidirectionalParams:
    forward: SsmDirectionParams
    backward: SsmDirectionParams

    def __post_init__(self):
        if (self.forward.d, self.forward.N) != (self.backward.d, self.backward.N):
            raise ConfigError("bidirectional directions must share d and N")

    @classmethod
    def init(cls, d: int, N: int, rng: np.random.Generator, prefix: str = "") -> "BidirectionalParams":
        return cls(
            SsmDirectionParams.init(d, N, rng, prefix + "fwd."),
            SsmDirectionParams.init(d, N, rng, prefix + "bwd."),
        )

    def parameters(self) -> list[Parameter]:
        return self.forward.parameters() + self.backward.parameters()

    def swapped(self) -> "BidirectionalParams":
        return BidirectionalParams(self.backward, self.forward)


# ---------------------------------------------------------------------------
# projection and discretization


def project_inputs(x, p: SsmDirectionParams) -> tuple[Tensor, Tensor, Tensor]:
    """Input-dependent step size and state projections for every token."""
    x = nt.tensor(x)
    delta = nt.softplus(nt.add(nt.matmul(x, p.delta_proj), p.delta_bias))
    B = nt.add(nt.matmul(x, p.b_proj), p.b_bias)
    C = nt.add(nt.matmul(x, p.c_proj), p.c_bias)
    return delta, B, C


def zoh_input_factor(delta: np.ndarray, A: np.ndarray) -> np.ndarray:
    """``(exp(delta*A) - 1) / A`` elementwise (broadcasting).

    Below :data:`SERIES_THRESHOLD` in ``|delta*A|`` the two-term series
    ``delta * (1 + delta*A/2)`` replaces the quotient.
    """
    delta, A = np.broadcast_arrays(np.asarray(delta, dtype=np.float64), np.asarray(A, dtype=np.float64))
    z = delta * A
    f = np.expm1(z)
    f /= A
    small = np.abs(z) < SERIES_THRESHOLD
    if small.any():
        f[small] = delta[small] * (1.0 + 0.5 * z[small])
    return f


def _zoh_partial_a(delta: np.ndarray, A: np.ndarray) -> np.ndarray:
    """d/dA of :func:`zoh_input_factor`."""
    z = delta * A
    em1 = np.expm1(z)
    out = z * (em1 + 1.0)
    out -= em1
    out /= A * A
    small = np.abs(z) < SERIES_THRESHOLD
    if small.any():
        out[small] = (0.5 * delta * delta)[small]
    return out


def _lead_sum(g: np.ndarray, ndim: int) -> np.ndarray:
    """Sum away leading axes so ``g`` matches a trailing ``ndim``-axis operand."""
    return g.reshape((-1,) + g.shape[g.ndim - ndim:]).sum(axis=0)


def discretize(a_log, delta, B, x) -> tuple[Tensor, Tensor]:
    """Zero-order-hold discretization of the diagonal system.

    Returns ``a_bar = exp(delta*A)`` and the driven term
    ``b_bar_x = ((exp(delta*A) - 1) / A) * B * x``, both ``(..., n, d, N)``.
    """
    a_log, delta, B, x = (nt.tensor(t) for t in (a_log, delta, B, x))
    if not np.all(delta.data > 0):
        raise ContractError("discretize: step sizes must be strictly positive")
    A = nt.neg(nt.exp(a_log))  # (d, N)
    Ad = A.data
    de = delta.data[..., None]
    z = de * Ad
    em1 = np.expm1(z)
    a_bar = np.exp(z)
    small = np.abs(z) < SERIES_THRESHOLD
    any_small = bool(small.any())
    f = em1 / Ad
    if any_small:
        f[small] = (de * (1.0 + 0.5 * z))[small]
    Be = B.data[..., None, :]
    xe = x.data[..., None]
    Bx = Be * xe

    def partial_a() -> np.ndarray:
        out = z * a_bar
        out -= em1
        out /= Ad * Ad
        if any_small:
            out[small] = np.broadcast_to(0.5 * de * de, out.shape)[small]
        return out

    def decay_vjp(g):
        ga = g * a_bar
        gd = (ga * Ad).sum(axis=-1) if delta.requires_grad else None
        gA = _lead_sum(ga * de, 2) if A.requires_grad else None
        return gd, gA

    def driven_vjp(g):
        gd = gA = gB = gx = None
        if delta.requires_grad or A.requires_grad:
            gBx = g * Bx
            if delta.requires_grad:
                gd = (gBx * a_bar).sum(axis=-1)
            if A.requires_grad:
                gBx *= partial_a()
                gA = _lead_sum(gBx, 2)
        if B.requires_grad or x.requires_grad:
            gf = g * f
            if B.requires_grad:
                gB = np.matmul(x.data[..., None, :], gf)[..., 0, :]
            if x.requires_grad:
                gx = np.matmul(gf, B.data[..., :, None])[..., 0]
        return gd, gA, gB, gx

    a_bar_t = nt.apply_op(a_bar, (delta, A), decay_vjp)
    b_bar_x = nt.apply_op(f * Bx, (delta, A, B, x), driven_vjp)
    return a_bar_t, b_bar_x


# ---------------------------------------------------------------------------
# linear recurrence kernels; time is axis 0 of the numpy arrays


def _recurrence_sequential(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    h = np.empty_like(b)
    h[0] = b[0]
    for t in range(1, b.shape[0]):
        np.multiply(a[t], h[t - 1], out=h[t])
        h[t] += b[t]
    return h


def compose(first: tuple, second: tuple) -> tuple:
    """Affine map composition ``second ∘ first`` for ``h -> a*h + b``."""
    a1, b1 = first
    a2, b2 = second
    return a1 * a2, a2 * b1 + b2


def _recurrence_chunked(a: np.ndarray, b: np.ndarray, chunk: int) -> np.ndarray:
    n = b.shape[0]
    L = min(chunk, n)
    nc = -(-n // L)
    pad = nc * L - n
    if pad:
        tail = (pad,) + b.shape[1:]
        a = np.concatenate([a, np.ones(tail)])
        b = np.concatenate([b, np.zeros(tail)])
    a = a.reshape((nc, L) + b.shape[1:])
    b = b.reshape((nc, L) + b.shape[1:])
    # within-chunk prefix maps, vectorised over chunks
    P = np.empty_like(a)
    hl = np.empty_like(b)
    P[:, 0] = a[:, 0]
    hl[:, 0] = b[:, 0]
    for j in range(1, L):
        np.multiply(P[:, j - 1], a[:, j], out=P[:, j])
        np.multiply(a[:, j], hl[:, j - 1], out=hl[:, j])
        hl[:, j] += b[:, j]
    # sequential pass over chunk boundaries
    carry = np.zeros((nc,) + b.shape[2:])
    for c in range(1, nc):
        carry[c] = P[c - 1, L - 1] * carry[c - 1] + hl[c - 1, L - 1]
    h = hl + P * carry[:, None]
    return h.reshape((nc * L,) + b.shape[2:])[:n]


def _run(a: np.ndarray, b: np.ndarray, chunk: int | None) -> np.ndarray:
    if chunk is None:
        return _recurrence_sequential(a, b)
    return _recurrence_chunked(a, b, chunk)


def recurrence(a_bar, b_bar_x, chunk: int | None = None) -> Tensor:
    """States ``h_t = a_t * h_{t-1} + b_t`` with ``h_{-1} = 0``; time axis -3.

    The vjp is the same recurrence run backwards in time with the decays
    shifted by one step.
    """
    a_bar, b_bar_x = nt.tensor(a_bar), nt.tensor(b_bar_x)
    if chunk is not None and chunk < 1:
        raise ConfigError(f"scan chunk must be >= 1, got {chunk}")
    if a_bar.ndim < 3 or a_bar.shape != b_bar_x.shape:
        raise nt.ShapeError(f"recurrence: shapes {a_bar.shape} and {b_bar_x.shape}")
    a = np.moveaxis(a_bar.data, -3, 0)
    b = np.moveaxis(b_bar_x.data, -3, 0)
    h = _run(a, b, chunk)

    def vjp(g):
        g0 = np.moveaxis(g, -3, 0)
        a_next = np.empty_like(a)
        a_next[:-1] = a[1:]
        a_next[-1] = 0.0
        lam = _run(a_next[::-1], g0[::-1], chunk)[::-1]
        ga = None
        if a_bar.requires_grad:
            ga = np.empty_like(lam)
            ga[0] = 0.0
            np.multiply(lam[1:], h[:-1], out=ga[1:])
            ga = np.moveaxis(ga, 0, -3)
        gb = np.moveaxis(lam, 0, -3) if b_bar_x.requires_grad else None
        return ga, gb

    return nt.apply_op(np.ascontiguousarray(np.moveaxis(h, 0, -3)), (a_bar, b_bar_x), vjp)


def _contract_state(h: Tensor, C: Tensor) -> Tensor:
    """``y[..., t, c] = sum_s h[..., t, c, s] * C[..., t, s]``."""
    Ce = C.data[..., :, None]
    out = np.matmul(h.data, Ce)[..., 0]

    def vjp(g):
        gh = g[..., :, None] * C.data[..., None, :] if h.requires_grad else None
        gC = np.matmul(g[..., None, :], h.data)[..., 0, :] if C.requires_grad else None
        return gh, gC

    return nt.apply_op(out, (h, C), vjp)


def _readout(h: Tensor, C, skip, x) -> Tensor:
    return nt.add(_contract_state(h, nt.tensor(C)), nt.mul(skip, x))


def scan_sequential(a_bar, b_bar_x, C, skip, x) -> Tensor:
    """Outputs ``y_t = C_t · h_t + skip * x_t`` using one state update per step."""
    return _readout(recurrence(a_bar, b_bar_x), C, skip, x)


def scan_chunked(a_bar, b_bar_x, C, skip, x, chunk: int) -> Tensor:
    """Same outputs as :func:`scan_sequential`, computed chunk-parallel.

    Each chunk is scanned locally from a zero state (all chunks at once),
    chunk summaries are chained sequentially, and the carried boundary state
    is folded back in through the within-chunk decay products.
    """
    if chunk < 1:
        raise ConfigError(f"scan chunk must be >= 1, got {chunk}")
    return _readout(recurrence(a_bar, b_bar_x, chunk), C, skip, x)


# ---------------------------------------------------------------------------
# bidirectional


def flip_time(z) -> Tensor:
    """Reverse token order (axis -2 of ``(..., n, d)``)."""
    return nt.flip(nt.tensor(z), -2)


def direction_forward(z, p: SsmDirectionParams, chunk: int | None = None) -> Tensor:
    """Project, discretize and scan one direction."""
    delta, B, C = project_inputs(z, p)
    a_bar, b_bar_x = discretize(p.a_log, delta, B, z)
    if chunk is None:
        return scan_sequential(a_bar, b_bar_x, C, p.skip, z)
    return scan_chunked(a_bar, b_bar_x, C, p.skip, z, chunk)


def bidirectional_ssm(z, p: BidirectionalParams, chunk: int | None = None) -> Tensor:
    """Average of a forward scan and a re-flipped scan of the flipped sequence."""
    z = nt.tensor(z)
    h_fwd = direction_forward(z, p.forward, chunk)
    h_bwd = direction_forward(flip_time(z), p.backward, chunk)
    return nt.mul(nt.add(h_fwd, flip_time(h_bwd)), 0.5)
