"""Deterministic synthetic micro-gesture clips.

A small soft-edged blob moves over a smooth textured background. In the
default mode each class is a named low-amplitude trajectory. In
``motion_only`` mode every class visits the same ring of positions and only
the visiting order differs, so any single frame (or a shuffled clip) carries
no class information.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ndtensor import ConfigError

MAGIC = b"MSFV"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIII")

CLASS_NAMES = (
    "vertical_oscillation",
    "horizontal_oscillation",
    "diagonal_oscillation",
    "circular_orbit",
    "in_place_flicker",
    "slow_drift_up",
    "slow_drift_down",
    "expand_contract",
    "two_phase_tap",
    "static",
)

MOTION_ONLY_NAMES = ("orbit_forward", "orbit_reverse") + tuple(
    f"ring_order_{i}" for i in range(8)
)

SYNTH_MODES = ("default", "motion_only")


@dataclass(frozen=True)
class SynthSpec:
    classes: int = 10
    amplitude: float = 2.0
    T: int = 8
    H: int = 32
    W: int = 32
    clips_per_class: int = 20
    noise_sigma: float = 0.02
    seed: int = 0
    mode: str = "default"
    blob_radius: float = 3.0
    index_offset: int = 0
    # background texture: "dataset" shares one per seed, "clip" draws a fresh one per clip
    texture: str = "dataset"
    # max blob-centre offset from the frame centre in px; None spreads it over the whole frame
    center_jitter: float | None = 1.0

    def __post_init__(self):
        if not 2 <= self.classes <= len(CLASS_NAMES):
            raise ConfigError(f"classes must be in 2..{len(CLASS_NAMES)}, got {self.classes}")
        if self.clips_per_class < 0:
            raise ConfigError(f"clips_per_class must be >= 0, got {self.clips_per_class}")
        if self.mode not in SYNTH_MODES:
            raise ConfigError(f"unknown synth mode {self.mode!r}; expected one of {SYNTH_MODES}")
        if self.T < 3:
            raise ConfigError(f"clips need T >= 3, got {self.T}")
        if self.texture not in ("clip", "dataset"):
            raise ConfigError(f"texture must be 'clip' or 'dataset', got {self.texture!r}")

    @property
    def class_names(self) -> tuple[str, ...]:
        names = MOTION_ONLY_NAMES if self.mode == "motion_only" else CLASS_NAMES
        return names[: self.classes]

    @property
    def clip_count(self) -> int:
        return self.classes * self.clips_per_class


def _clip_rng(spec: SynthSpec, class_id: int, index: int) -> np.random.Generator:
    mode_tag = SYNTH_MODES.index(spec.mode)
    return np.random.default_rng([spec.seed, class_id, index, mode_tag])


def _background(rng: np.random.Generator, H: int, W: int) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W] / np.array([H, W]).reshape(2, 1, 1)
    bg = np.full((H, W, 3), 0.35)
    for _ in range(3):
        fy, fx = rng.uniform(0.5, 2.5, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        tint = rng.uniform(0.02, 0.08, size=3)
        wave = np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
        bg += wave[..., None] * tint
    return bg


def _default_track(class_id: int, T: int, amp: float, rng: np.random.Generator):
    """Per-frame (dy, dx, radius_scale, brightness) for a named class."""
    t = np.arange(T, dtype=np.float64)
    phase = rng.uniform(-0.3, 0.3)
    w = 2 * np.pi * t / T + phase
    zero = np.zeros(T)
    one = np.ones(T)
    ramp = np.linspace(-1.0, 1.0, T)
    name = CLASS_NAMES[class_id]
    if name == "vertical_oscillation":
        return amp * np.sin(w), zero, one, one
    if name == "horizontal_oscillation":
        return zero, amp * np.sin(w), one, one
    if name == "diagonal_oscillation":
        s = amp * np.sin(w) / np.sqrt(2.0)
        return s, s, one, one
    if name == "circular_orbit":
        return amp * np.sin(w), amp * np.cos(w), one, one
    if name == "in_place_flicker":
        return zero, zero, one, np.where(np.arange(T) % 2 == 0, 1.0, 0.45)
    if name == "slow_drift_up":
        return -amp * ramp, zero, one, one
    if name == "slow_drift_down":
        return amp * ramp, zero, one, one
    if name == "expand_contract":
        return zero, zero, 1.0 + 0.3 * amp * np.sin(w) / 2.0, one
    if name == "two_phase_tap":
        taps = np.zeros(T)
        taps[[T // 4, (3 * T) // 4]] = amp
        return taps, zero, one, one
    return zero, zero, one, one  # static


def ring_orders(T: int, count: int = 10) -> np.ndarray:
    """Fixed visiting orders of ``T`` ring positions, distinct up to rotation.

    Row 0 walks the ring forward, row 1 backwards; the rest are seeded
    random permutations.
    """
    orders = [np.arange(T), (-np.arange(T)) % T]
    seen = {tuple(o) for o in orders}
    rng = np.random.default_rng(20240611)
    while len(orders) < count:
        p = rng.permutation(T)
        canon = tuple((p - p[0]) % T)
        if canon in seen or tuple(canon) == tuple(np.arange(T)):
            continue
        orders.append(p)
        seen.add(canon)
        seen.add(tuple(p))
    return np.stack(orders)


def _motion_only_track(class_id: int, T: int, amp: float, rng: np.random.Generator):
    order = ring_orders(T)[class_id]
    theta = rng.uniform(0, 2 * np.pi) + 2 * np.pi * order / T
    one = np.ones(T)
    return amp * np.sin(theta), amp * np.cos(theta), one, one


def generate_clip(spec: SynthSpec, class_id: int, index: int) -> tuple[np.ndarray, int]:
    """Render clip ``index`` of class ``class_id``: frames ``(T, H, W, 3)`` in [0, 1]."""
    if not 0 <= class_id < spec.classes:
        raise ConfigError(f"class_id {class_id} out of range for {spec.classes} classes")
    rng = _clip_rng(spec, class_id, index + spec.index_offset)
    T, H, W = spec.T, spec.H, spec.W
    if spec.texture == "dataset":
        bg = _background(np.random.default_rng([spec.seed, 0xB6]), H, W)
    else:
        bg = _background(rng, H, W)
    margin = spec.blob_radius + spec.amplitude + 2.0
    if spec.center_jitter is None:
        cy = rng.uniform(margin, H - 1 - margin)
        cx = rng.uniform(margin, W - 1 - margin)
    else:
        j = spec.center_jitter
        cy = (H - 1) / 2 + rng.uniform(-j, j)
        cx = (W - 1) / 2 + rng.uniform(-j, j)
    color = np.array([0.95, 0.85, 0.7]) + rng.uniform(-0.05, 0.05, size=3)
    if spec.mode == "motion_only":
        dy, dx, rscale, bright = _motion_only_track(class_id, T, spec.amplitude, rng)
    else:
        dy, dx, rscale, bright = _default_track(class_id, T, spec.amplitude, rng)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    frames = np.empty((T, H, W, 3))
    for t in range(T):
        dist = np.hypot(yy - (cy + dy[t]), xx - (cx + dx[t]))
        mask = 1.0 / (1.0 + np.exp((dist - spec.blob_radius * rscale[t]) / 0.6))
        mask = (bright[t] * mask)[..., None]
        frames[t] = bg * (1.0 - mask) + color * mask
    if spec.noise_sigma > 0:
        frames += rng.normal(0.0, spec.noise_sigma, size=frames.shape)
    np.clip(frames, 0.0, 1.0, out=frames)
    return frames, class_id


def generate(spec: SynthSpec) -> tuple[np.ndarray, np.ndarray]:
    """All clips, class-major: ``(clip_count, T, H, W, 3)`` frames and labels."""
    frames = np.empty((spec.clip_count, spec.T, spec.H, spec.W, 3))
    labels = np.empty(spec.clip_count, dtype=np.int64)
    i = 0
    for c in range(spec.classes):
        for j in range(spec.clips_per_class):
            frames[i], labels[i] = generate_clip(spec, c, j)
            i += 1
    return frames, labels


def shuffle_frames(frames: np.ndarray, seed: int) -> np.ndarray:
    """Independently permute the frame order of every clip (control experiment)."""
    rng = np.random.default_rng([seed, 0x5F])
    out = np.empty_like(frames)
    for i in range(frames.shape[0]):
        out[i] = frames[i][rng.permutation(frames.shape[1])]
    return out


# ---------------------------------------------------------------------------
# binary dataset format


def _record_dtype(T: int, H: int, W: int) -> np.dtype:
    return np.dtype([("label", "<u2"), ("frames", "<f4", (T, H, W, 3))])


def write_arrays(path, frames: np.ndarray, labels: np.ndarray, class_count: int, grid=None) -> None:
    """Write clips in the MSFV layout; ``grid`` is required when there are no clips."""
    path = Path(path)
    n = len(labels)
    T, H, W = grid if grid is not None else frames.shape[1:4]
    recs = np.empty(n, dtype=_record_dtype(T, H, W))
    recs["label"] = labels
    recs["frames"] = frames
    try:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, VERSION, n, T, H, W, class_count))
            fh.write(recs.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write dataset {path}: {exc}") from exc


def write_dataset(spec: SynthSpec, path) -> dict[str, int]:
    """Write ``spec``'s clips to ``path`` plus a ``<path>.manifest`` CSV of per-class counts."""
    path = Path(path)
    frames, labels = generate(spec)
    manifest = {name: int(np.sum(labels == c)) for c, name in enumerate(spec.class_names)}
    write_arrays(path, frames, labels, spec.classes, grid=(spec.T, spec.H, spec.W))
    try:
        with open(str(path) + ".manifest", "w", encoding="utf-8") as fh:
            fh.write("class,name,count\n")
            for c, name in enumerate(spec.class_names):
                fh.write(f"{c},{name},{manifest[name]}\n")
    except OSError as exc:
        raise OSError(f"cannot write manifest for {path}: {exc}") from exc
    return manifest


@dataclass
class Dataset:
    frames: np.ndarray  # (count, T, H, W, 3) float64
    labels: np.ndarray  # (count,) int64
    class_count: int

    @property
    def grid(self) -> tuple[int, int, int]:
        return tuple(self.frames.shape[1:4])

    def __len__(self) -> int:
        return len(self.labels)


def read_dataset(path) -> Dataset:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read dataset {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, n, T, H, W, classes = _HEADER.unpack_from(raw)
    if magic != MAGIC or version != VERSION:
        raise ValueError(f"{path}: not an MSFV v{VERSION} dataset")
    dt = _record_dtype(T, H, W)
    body = raw[_HEADER.size:]
    if len(body) != n * dt.itemsize:
        raise ValueError(f"{path}: expected {n * dt.itemsize} payload bytes, got {len(body)}")
    recs = np.frombuffer(body, dtype=dt, count=n)
    return Dataset(recs["frames"].astype(np.float64), recs["label"].astype(np.int64), classes)
