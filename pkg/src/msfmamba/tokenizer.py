"""Patch embedding and learned positional embeddings for video clips.

Tokens are ordered t-major, then patch row, then patch column, so row
``t*H'*W' + h*W' + w`` of the token matrix is patch ``(t, h, w)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndtensor as nt
from .ndtensor import ConfigError, Parameter, Tensor


@dataclass(frozen=True)
class VideoClip:
    frames: np.ndarray  # (T, H, W, 3) in [0, 1]
    frame_rate: float | None = None

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float64)
        if f.ndim != 4 or f.shape[-1] != 3:
            raise ConfigError(f"clip frames must be (T, H, W, 3), got {f.shape}")
        if f.shape[0] < 3:
            raise ConfigError(f"clip needs T >= 3 frames, got {f.shape[0]}")
        object.__setattr__(self, "frames", f)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.frames.shape[:3]


@dataclass
class TokenSequence:
    tokens: Tensor  # (..., n, d)
    grid: tuple[int, int, int]  # (T, H', W')

    def __post_init__(self):
        T, Hp, Wp = self.grid
        if self.tokens.shape[-2] != T * Hp * Wp:
            raise ConfigError(
                f"token count {self.tokens.shape[-2]} != T*H'*W' = {T * Hp * Wp}"
            )


@dataclass
class PatchEmbedding:
    proj: Parameter  # (3*p*p, d)
    bias: Parameter  # (d,)
    patch: int

    @classmethod
    def init(cls, patch: int, d: int, rng: np.random.Generator) -> "PatchEmbedding":
        fan_in = 3 * patch * patch
        w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, d))
        return cls(Parameter(w, "embed.proj"), Parameter(np.zeros(d), "embed.bias"), patch)

    def parameters(self) -> list[Parameter]:
        return [self.proj, self.bias]


@dataclass
class PositionalEmbeddings:
    spatial: Parameter  # (H'*W', d)
    temporal: Parameter  # (T, d)

    @classmethod
    def init(cls, grid: tuple[int, int, int], d: int, rng: np.random.Generator, std: float = 0.02):
        T, Hp, Wp = grid
        return cls(
            Parameter(rng.normal(0.0, std, size=(Hp * Wp, d)), "pos.spatial"),
            Parameter(rng.normal(0.0, std, size=(T, d)), "pos.temporal"),
        )

    def parameters(self) -> list[Parameter]:
        return [self.spatial, self.temporal]


def patchify(frames: np.ndarray, patch: int) -> np.ndarray:
    """``(..., T, H, W, 3)`` pixels -> ``(..., T*H'*W', p*p*3)`` flattened patches."""
    *lead, T, H, W, ch = frames.shape
    if H % patch or W % patch:
        raise ConfigError(f"frame size {H}x{W} is not divisible by patch {patch}")
    Hp, Wp = H // patch, W // patch
    x = frames.reshape(*lead, T, Hp, patch, Wp, patch, ch)
    nl = len(lead)
    order = list(range(nl)) + [nl + i for i in (0, 1, 3, 2, 4, 5)]
    x = x.transpose(order)
    return np.ascontiguousarray(x).reshape(*lead, T * Hp * Wp, patch * patch * ch)


def patch_embed(v, embed: PatchEmbedding) -> TokenSequence:
    """Linear projection of non-overlapping ``1×p×p`` patches.

    ``v`` is a :class:`VideoClip` or a raw ``(..., T, H, W, 3)`` array
    (batched clips).
    """
    frames = v.frames if isinstance(v, VideoClip) else np.asarray(v, dtype=np.float64)
    T, H, W = frames.shape[-4:-1]
    p = embed.patch
    patches = patchify(frames, p)
    tokens = nt.add(nt.matmul(Tensor(patches), embed.proj), embed.bias)
    return TokenSequence(tokens, (T, H // p, W // p))


def add_positions(zp: TokenSequence, pe: PositionalEmbeddings) -> TokenSequence:
    """Add the spatial embedding of each patch and the temporal embedding of its frame."""
    T, Hp, Wp = zp.grid
    if pe.spatial.shape[0] != Hp * Wp or pe.temporal.shape[0] != T:
        raise ConfigError(
            f"positional embeddings {pe.spatial.shape}/{pe.temporal.shape} "
            f"do not match grid {zp.grid}"
        )
    lead = zp.tokens.shape[:-2]
    d = zp.tokens.shape[-1]
    z = nt.reshape(zp.tokens, lead + (T, Hp * Wp, d))
    z = nt.add(z, pe.spatial)
    z = nt.add(z, nt.reshape(pe.temporal, (T, 1, d)))
    return TokenSequence(nt.reshape(z, lead + (T * Hp * Wp, d)), zp.grid)
