"""Multiscale fusion of latent states with a frame-difference motion branch.

Grids have shape ``(..., d, T, H', W')``; the time axis is -3.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndtensor as nt
from .ndtensor import ConfigError, ContractError, Parameter, Tensor
from .tokenizer import TokenSequence

MOTION_MODES = ("central", "first_order", "none")


@dataclass
class ScaleSpec:
    window: int
    kernel: Parameter  # (w, w, w), shared over channels
    gate_logit: Parameter  # scalar; gate = sigmoid(gate_logit)

    def __post_init__(self):
        if self.window % 2 == 0 or self.window < 1:
            raise ConfigError(f"window size must be odd, got {self.window}")
        if self.kernel.shape != (self.window,) * 3:
            raise ConfigError(f"kernel shape {self.kernel.shape} != window {self.window}")

    @classmethod
    def init(cls, window: int, rng: np.random.Generator, noise: float = 0.01) -> "ScaleSpec":
        if window % 2 == 0 or window < 1:
            raise ConfigError(f"window size must be odd, got {window}")
        k = rng.normal(0.0, noise, size=(window,) * 3)
        k[(window // 2,) * 3] += 1.0
        return cls(
            window,
            Parameter(k, f"mcfm.w{window}.kernel"),
            Parameter(np.zeros(()), f"mcfm.w{window}.gate_logit"),
        )

    @property
    def gate(self) -> Tensor:
        return nt.sigmoid(self.gate_logit)

    def parameters(self) -> list[Parameter]:
        return [self.kernel, self.gate_logit]


def reshape_to_grid(h: TokenSequence) -> Tensor:
    """``(..., n, d)`` tokens -> ``(..., d, T, H', W')`` grid."""
    T, Hp, Wp = h.grid
    tok = h.tokens
    if tok.shape[-2] != T * Hp * Wp:
        raise ContractError(f"{tok.shape[-2]} tokens cannot fill grid {h.grid}")
    lead = tok.shape[:-2]
    d = tok.shape[-1]
    g = nt.reshape(tok, lead + (T, Hp, Wp, d))
    nl = len(lead)
    order = tuple(range(nl)) + (nl + 3, nl, nl + 1, nl + 2)
    return nt.transpose(g, order)


def flatten_grid(f) -> TokenSequence:
    """Inverse of :func:`reshape_to_grid`."""
    f = nt.tensor(f)
    *lead, d, T, Hp, Wp = f.shape
    nl = len(lead)
    order = tuple(range(nl)) + (nl + 1, nl + 2, nl + 3, nl)
    tok = nt.reshape(nt.transpose(f, order), tuple(lead) + (T * Hp * Wp, d))
    return TokenSequence(tok, (T, Hp, Wp))


def _time_slice(f: Tensor, sl: slice) -> Tensor:
    return nt.getitem(f, (Ellipsis, sl, slice(None), slice(None)))


def central_frame_diff(f) -> Tensor:
    """``D_t = F_t - (F_{t-1} + F_{t+1}) / 2`` with edge frames replicated."""
    f = nt.tensor(f)
    T = f.shape[-3]
    if T < 3:
        raise ContractError(f"central frame difference needs T >= 3, got {T}")
    prev = nt.concat([_time_slice(f, slice(0, 1)), _time_slice(f, slice(0, T - 1))], axis=-3)
    nxt = nt.concat([_time_slice(f, slice(1, T)), _time_slice(f, slice(T - 1, T))], axis=-3)
    return nt.sub(f, nt.mul(nt.add(prev, nxt), 0.5))


def first_order_diff(f) -> Tensor:
    """``D_t = F_t - F_{t-1}``, and ``D_0 = 0``."""
    f = nt.tensor(f)
    T = f.shape[-3]
    if T < 2:
        raise ContractError(f"first-order difference needs T >= 2, got {T}")
    prev = nt.concat([_time_slice(f, slice(0, 1)), _time_slice(f, slice(0, T - 1))], axis=-3)
    return nt.sub(f, prev)


def motion_signal(f, mode: str) -> Tensor | None:
    if mode == "central":
        return central_frame_diff(f)
    if mode == "first_order":
        return first_order_diff(f)
    if mode == "none":
        return None
    raise ConfigError(f"unknown motion mode {mode!r}; expected one of {MOTION_MODES}")


def fuse_scale(f, dmotion, spec: ScaleSpec) -> Tensor:
    """``S_k(F) + gate * S_k(D)`` with ``S_k`` the shared windowed aggregation.

    ``S_k`` is linear, so this is evaluated as one convolution of
    ``F + gate * D``. ``dmotion=None`` stands for an all-zero motion grid.
    """
    f = nt.tensor(f)
    if dmotion is None:
        return nt.conv3d_shared(f, spec.kernel)
    dmotion = nt.tensor(dmotion)
    if dmotion.shape != f.shape:
        raise nt.ShapeError(f"fuse_scale: grid {f.shape} vs motion {dmotion.shape}")
    return nt.conv3d_shared(nt.add(f, nt.mul(spec.gate, dmotion)), spec.kernel)


def mcfm_forward(h: TokenSequence, specs: list[ScaleSpec], motion_mode: str = "central") -> list[Tensor]:
    """Reshape tokens to a grid and return one fused grid per scale, in order."""
    if not specs:
        raise ConfigError("mcfm needs at least one scale")
    f = reshape_to_grid(h)
    d = motion_signal(f, motion_mode)
    return [fuse_scale(f, d, s) for s in specs]
