"""Per-location soft attention over a bank of per-scale grids.

Bank grids are ``(B, d, T, H', W')``; attention weights are
``(B, M, T, H', W')`` with ``M`` the number of scales.
"""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from . import ndtensor as nt
from .ndtensor import ConfigError, ContractError, Parameter, Tensor

AGGREGATE_MODES = ("aswm", "average")


@dataclass
class AswmParams:
    conv1_w: Parameter  # (hidden, M*d, 3, 3, 3)
    conv1_b: Parameter  # (hidden,)
    conv2_w: Parameter  # (M, hidden, 1, 1, 1)
    conv2_b: Parameter  # (M,)

    @classmethod
    def init(cls, M: int, d: int, rng: np.random.Generator, hidden: int | None = None) -> "AswmParams":
        hidden = d if hidden is None else hidden
        fan_in = M * d * 27
        return cls(
            Parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(hidden, M * d, 3, 3, 3)), "aswm.conv1_w"),
            Parameter(np.zeros(hidden), "aswm.conv1_b"),
            # zero head: uniform weights at initialisation, i.e. average-sum
            Parameter(np.zeros((M, hidden, 1, 1, 1)), "aswm.conv2_w"),
            Parameter(np.zeros(M), "aswm.conv2_b"),
        )

    @property
    def scales(self) -> int:
        return self.conv2_w.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.conv1_w, self.conv1_b, self.conv2_w, self.conv2_b]


def _check_bank(bank) -> list[Tensor]:
    bank = [nt.tensor(g) for g in bank]
    if not bank:
        raise ContractError("empty scale bank")
    shapes = {g.shape for g in bank}
    if len(shapes) != 1:
        raise ContractError(f"scale bank grids differ in shape: {sorted(shapes)}")
    return bank


def _batched(bank: list[Tensor]) -> tuple[list[Tensor], bool]:
    if bank[0].ndim == 4:
        return [nt.reshape(g, (1,) + g.shape) for g in bank], True
    return bank, False


def attention_logits(bank, p: AswmParams) -> Tensor:
    """Channel-concat -> 3³ conv -> ReLU -> 1³ conv to one logit per scale."""
    bank = _check_bank(bank)
    if len(bank) != p.scales:
        raise ContractError(f"bank has {len(bank)} scales, attention expects {p.scales}")
    bank, squeeze = _batched(bank)
    x = nt.concat(bank, axis=1)
    hid = nt.relu(nt.conv3d(x, p.conv1_w, p.conv1_b))
    logits = nt.conv3d(hid, p.conv2_w, p.conv2_b)
    return nt.reshape(logits, logits.shape[1:]) if squeeze else logits


def normalize_scales(logits) -> Tensor:
    """Softmax over the scale axis (-4) at every location."""
    return nt.softmax_axis(nt.tensor(logits), -4)


def weighted_sum(bank, alpha) -> Tensor:
    """``sum_k alpha[k] * F^(k)``, broadcasting alpha over channels."""
    bank = _check_bank(bank)
    alpha = nt.tensor(alpha)
    if alpha.shape[-4] != len(bank):
        raise ContractError(f"alpha has {alpha.shape[-4]} scales, bank has {len(bank)}")
    stacked = nt.stack(bank, axis=-5)  # (..., M, d, T, H, W)
    a = nt.reshape(alpha, alpha.shape[:-3] + (1,) + alpha.shape[-3:])
    return nt.sum(nt.mul(stacked, a), -5)


def average(bank) -> Tensor:
    bank = _check_bank(bank)
    total = bank[0]
    for g in bank[1:]:
        total = nt.add(total, g)
    return nt.mul(total, 1.0 / len(bank))


def aggregate(bank, params: AswmParams | None, mode: str = "aswm") -> tuple[Tensor, Tensor | None]:
    """Fuse the bank; returns ``(grid, alpha)`` with ``alpha=None`` in average mode."""
    if mode == "average":
        return average(bank), None
    if mode != "aswm":
        raise ConfigError(f"unknown aggregate mode {mode!r}; expected one of {AGGREGATE_MODES}")
    if params is None:
        raise ConfigError("aswm aggregation requires attention parameters")
    alpha = normalize_scales(attention_logits(bank, params))
    return weighted_sum(bank, alpha), alpha


def attention_csv(alpha, windows: list[int] | None = None) -> str:
    """Serialize one clip's weights ``(M, T, H', W')`` as ``scale,t,h,w,weight`` rows.

    A trailing ``# mean,...`` line lists the per-scale mean weight.
    """
    a = nt.no_grad_value(alpha)
    if a.ndim != 4:
        raise ContractError(f"expected (M, T, H', W') weights, got {a.shape}")
    M = a.shape[0]
    labels = windows if windows is not None else list(range(M))
    buf = io.StringIO()
    buf.write("scale,t,h,w,weight\n")
    for k in range(M):
        for (t, h, w), val in np.ndenumerate(a[k]):
            buf.write(f"{labels[k]},{t},{h},{w},{val:.9g}\n")
    means = a.reshape(M, -1).mean(axis=1)
    buf.write("# mean," + ",".join(f"{m:.9g}" for m in means) + "\n")
    return buf.getvalue()
