"""Full network, loss, metrics, learning-rate schedule and optimizer."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import ndtensor as nt
from .aswm import AGGREGATE_MODES, AswmParams, aggregate
from .mcfm import MOTION_MODES, ScaleSpec, mcfm_forward
from .ndtensor import ConfigError, ContractError, Parameter, Tensor
from .ssm import BidirectionalParams, bidirectional_ssm
from .tokenizer import (
    PatchEmbedding,
    PositionalEmbeddings,
    TokenSequence,
    VideoClip,
    add_positions,
    patch_embed,
)

# (d, layers, N, patch, grid)
INPUT_CENTER_MODES = ("clip", "none")

PRESETS: dict[str, dict] = {
    "tiny": dict(d=192, layers=24, N=16, patch=16, grid=(16, 224, 224)),
    "small": dict(d=384, layers=24, N=16, patch=16, grid=(16, 224, 224)),
    "middle": dict(d=576, layers=32, N=16, patch=16, grid=(16, 224, 224)),
    "desk": dict(d=64, layers=4, N=8, patch=8, grid=(8, 32, 32)),
}


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    layers: int = 4
    N: int = 8
    patch: int = 8
    scales: tuple[int, ...] = (3, 5, 7)
    motion_mode: str = "central"
    aggregate_mode: str = "aswm"
    classes: int = 10
    grid: tuple[int, int, int] = (8, 32, 32)
    preset: str = "desk"
    scan_chunk: int | None = None
    # "clip" subtracts each clip's per-channel mean pixel before embedding
    input_center: str = "clip"

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(int(s) for s in self.scales))
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        if not self.scales or any(s % 2 == 0 or s < 1 for s in self.scales):
            raise ConfigError(f"scales must be a non-empty list of odd sizes, got {self.scales}")
        if self.classes < 2:
            raise ConfigError(f"classes must be >= 2, got {self.classes}")
        if self.motion_mode not in MOTION_MODES:
            raise ConfigError(f"motion_mode must be one of {MOTION_MODES}, got {self.motion_mode!r}")
        if self.aggregate_mode not in AGGREGATE_MODES:
            raise ConfigError(f"aggregate_mode must be one of {AGGREGATE_MODES}, got {self.aggregate_mode!r}")
        if self.input_center not in INPUT_CENTER_MODES:
            raise ConfigError(
                f"input_center must be one of {INPUT_CENTER_MODES}, got {self.input_center!r}"
            )
        T, H, W = self.grid
        if T < 3:
            raise ConfigError(f"clips need T >= 3, got {T}")
        if H % self.patch or W % self.patch:
            raise ConfigError(f"frame {H}x{W} not divisible by patch {self.patch}")
        if min(self.d, self.layers, self.N) < 1:
            raise ConfigError("d, layers and N must be positive")

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "ModelConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
        return cls(**{**PRESETS[name], "preset": name, **overrides})

    @property
    def token_grid(self) -> tuple[int, int, int]:
        T, H, W = self.grid
        return T, H // self.patch, W // self.patch

    @property
    def tokens(self) -> int:
        return math.prod(self.token_grid)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    warmup_epochs: int = 5
    base_lr_per_256: float = 4e-4
    batch: int = 16
    weight_decay: float = 0.05
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps_per_epoch: int = 1

    def __post_init__(self):
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(
                f"warmup_epochs ({self.warmup_epochs}) must be in [0, epochs={self.epochs})"
            )

    @property
    def peak_lr(self) -> float:
        return self.base_lr_per_256 * self.batch / 256.0

    def with_steps(self, steps_per_epoch: int) -> "TrainConfig":
        return replace(self, steps_per_epoch=steps_per_epoch)


# ---------------------------------------------------------------------------
# network


@dataclass
class Block:
    norm_scale: Parameter
    norm_offset: Parameter
    ssm: BidirectionalParams

    def parameters(self) -> list[Parameter]:
        return [self.norm_scale, self.norm_offset] + self.ssm.parameters()


class MSFMamba:
    """Patch embedding, bidirectional SSM blocks, multiscale fusion, scale attention, head."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng([seed, 0xA11])
        d = cfg.d
        self.embed = PatchEmbedding.init(cfg.patch, d, rng)
        self.pos = PositionalEmbeddings.init(cfg.token_grid, d, rng)
        self.blocks = [
            Block(
                Parameter(np.ones(d), f"block{i}.norm_scale"),
                Parameter(np.zeros(d), f"block{i}.norm_offset"),
                BidirectionalParams.init(d, cfg.N, rng, prefix=f"block{i}."),
            )
            for i in range(cfg.layers)
        ]
        self.scales = [ScaleSpec.init(w, rng) for w in cfg.scales]
        self.aswm = AswmParams.init(len(cfg.scales), d, rng) if cfg.aggregate_mode == "aswm" else None
        self.head_w = Parameter(rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, cfg.classes)), "head.w")
        self.head_b = Parameter(np.zeros(cfg.classes), "head.b")

    def parameters(self) -> list[Parameter]:
        ps = self.embed.parameters() + self.pos.parameters()
        for b in self.blocks:
            ps += b.parameters()
        for s in self.scales:
            ps += s.parameters()
        if self.aswm is not None:
            ps += self.aswm.parameters()
        return ps + [self.head_w, self.head_b]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.parameters()}

    def encode(self, clips) -> TokenSequence:
        """Embedded tokens after the SSM block stack."""
        frames = clips.frames if isinstance(clips, VideoClip) else np.asarray(clips, dtype=np.float64)
        grid = tuple(frames.shape[-4:-1])
        if grid != self.cfg.grid:
            raise ConfigError(f"clip grid {grid} does not match model grid {self.cfg.grid}")
        if self.cfg.input_center == "clip":
            frames = frames - frames.mean(axis=(-4, -3, -2), keepdims=True)
        z = add_positions(patch_embed(frames, self.embed), self.pos)
        x = z.tokens
        for b in self.blocks:
            h = nt.layer_norm(x, b.norm_scale, b.norm_offset)
            x = nt.add(x, bidirectional_ssm(h, b.ssm, self.cfg.scan_chunk))
        return TokenSequence(x, z.grid)

    def forward(self, clips) -> tuple[Tensor, Tensor | None]:
        """Class logits ``(..., classes)`` and the scale attention weights (or None)."""
        h = self.encode(clips)
        bank = mcfm_forward(h, self.scales, self.cfg.motion_mode)
        single = bank[0].ndim == 4
        if single:
            bank = [nt.reshape(g, (1,) + g.shape) for g in bank]
        fused, alpha = aggregate(bank, self.aswm, self.cfg.aggregate_mode)
        logits = classify_head(fused, self.head_w, self.head_b)
        if single:
            logits = nt.reshape(logits, logits.shape[1:])
            alpha = None if alpha is None else nt.reshape(alpha, alpha.shape[1:])
        return logits, alpha

    __call__ = forward


def classify_head(f, w, b) -> Tensor:
    """Global average pool over ``(T, H', W')`` then an affine map to class logits."""
    f = nt.tensor(f)
    pooled = nt.mean(f, axis=(-3, -2, -1))
    return nt.add(nt.matmul(nt.reshape(pooled, pooled.shape[:-1] + (1, pooled.shape[-1])), w)[..., 0, :], b)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-softmax of the labelled class (one-hot targets).

    ``logits`` is ``(C,)`` with an integer label, or ``(B, C)`` with ``B`` labels.
    """
    logits = nt.tensor(logits)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    C = logits.shape[-1]
    if np.any(labels < 0) or np.any(labels >= C):
        raise ContractError(f"labels {labels.tolist()} out of range for {C} classes")
    rows = nt.reshape(logits, (-1, C))
    if rows.shape[0] != labels.size:
        raise ContractError(f"{rows.shape[0]} logit rows but {labels.size} labels")
    lse = nt.logsumexp(rows, -1)
    picked = nt.getitem(rows, (np.arange(labels.size), labels))
    return nt.mean(nt.sub(lse, picked))


def topk_accuracy(logit_rows, labels, k: int) -> float:
    """Fraction of rows whose label is among the ``k`` largest logits.

    Ties are ranked by lower class index first.
    """
    z = np.atleast_2d(nt.no_grad_value(logit_rows))
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if k < 1 or k > z.shape[1]:
        raise ConfigError(f"k={k} must be in 1..{z.shape[1]}")
    if len(labels) == 0:
        return 0.0
    true = z[np.arange(len(labels)), labels][:, None]
    idx = np.arange(z.shape[1])[None, :]
    ahead = (z > true) | ((z == true) & (idx < labels[:, None]))
    return float(np.mean(ahead.sum(axis=1) < k))


# ---------------------------------------------------------------------------
# optimisation


def lr_at(step: int, tc: TrainConfig) -> float:
    """Linear warm-up to the batch-scaled peak, then cosine decay to zero.

    ``step`` counts optimizer updates from 1; the warm-up ends at
    ``warmup_epochs * steps_per_epoch`` and the schedule reaches zero at
    ``epochs * steps_per_epoch``.
    """
    peak = tc.peak_lr
    warm = tc.warmup_epochs * tc.steps_per_epoch
    total = tc.epochs * tc.steps_per_epoch
    if step <= 0:
        return 0.0
    if step <= warm:
        return peak * step / warm
    if step >= total:
        return 0.0
    frac = (step - warm) / (total - warm)
    return peak * 0.5 * (1.0 + math.cos(math.pi * frac))


def decays(p: Parameter) -> bool:
    """Whether decoupled weight decay applies (not to gates, biases, positions)."""
    name = p.name
    leaf = name.rsplit(".", 1)[-1]
    is_bias = "bias" in leaf or leaf in ("b", "norm_offset") or leaf.endswith("_b")
    return not (is_bias or leaf == "gate_logit" or name.startswith("pos."))


@dataclass
class AdamW:
    """Adaptive moments with decoupled, multiplicative weight decay."""

    params: list[Parameter]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    @classmethod
    def from_config(cls, params, tc: TrainConfig) -> "AdamW":
        return cls(list(params), tc.beta1, tc.beta2, tc.eps, tc.weight_decay)

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad.data
            if self.weight_decay and decays(p):
                p.data *= 1.0 - lr * self.weight_decay
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        nt.zero_grads(self.params)


def opt_step(opt: AdamW, tc: TrainConfig, step: int) -> float:
    """Apply one update at the scheduled learning rate; returns that rate."""
    lr = lr_at(step, tc)
    opt.step(lr)
    return lr


def config_dict(cfg) -> dict:
    return asdict(cfg)
