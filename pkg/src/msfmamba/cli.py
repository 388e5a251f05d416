"""``msfmamba`` command line: gen, train, eval, bench, export-attn.

Settings come from a flat ``key = value`` file (``--config``) overridden by
``--key value`` flags. Every key is a field of :class:`RunConfig`.
"""
from __future__ import annotations

import argparse
import contextlib
import os
import sys
import time
import typing
from dataclasses import dataclass, fields
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import checkpoint
from .aswm import attention_csv
from .model import PRESETS, MSFMamba, ModelConfig, TrainConfig
from .ndtensor import ConfigError
from .synthgen import Dataset, SynthSpec, read_dataset, shuffle_frames, write_dataset
from .train import TrainingDiverged, evaluate, train

COMMANDS = ("gen", "train", "eval", "bench", "export-attn")


@dataclass
class RunConfig:
    # model; None means "take it from the preset"
    preset: str = "desk"
    d: int | None = None
    layers: int | None = None
    N: int | None = None
    patch: int | None = None
    scales: str = "3,5,7"
    motion_mode: str = "central"
    aggregate_mode: str = "aswm"
    scan_chunk: int = 0
    input_center: str = "clip"
    # optimisation
    epochs: int = 30
    warmup_epochs: int = 5
    # desk-scale rate; the library default in TrainConfig keeps the published 4e-4
    base_lr_per_256: float = 8e-3
    batch: int = 16
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    floor: float = 0.0
    stop_after: int = 0  # 0 runs the whole schedule
    # synthetic data
    classes: int = 10
    amplitude: float = 2.0
    T: int | None = None
    H: int | None = None
    W: int | None = None
    clips_per_class: int = 20
    val_clips_per_class: int = 10
    noise_sigma: float = 0.02
    synth_mode: str = "default"
    blob_radius: float = 3.0
    texture: str = "dataset"
    center_jitter: float | None = 1.0
    frame_shuffle: bool = False
    # paths and command options
    out: str = "runs/default"
    data_dir: str = ""
    checkpoint: str = ""
    split: str = "val"
    clip_index: int = 0
    bench_d: int = 8
    bench_N: int = 8
    bench_chunk: int = 32
    bench_repeats: int = 5
    bench_min_n: int = 256
    bench_max_n: int = 16384
    bench_head_dim: int = 64

    # -- derived views -----------------------------------------------------

    @property
    def grid(self) -> tuple[int, int, int]:
        base = PRESETS[self.preset]["grid"]
        return tuple(v if v is not None else b for v, b in zip((self.T, self.H, self.W), base))

    @property
    def data_path(self) -> Path:
        return Path(self.data_dir or self.out)

    def model_config(self) -> ModelConfig:
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; expected one of {sorted(PRESETS)}")
        over = {k: getattr(self, k) for k in ("d", "layers", "N", "patch") if getattr(self, k) is not None}
        return ModelConfig.from_preset(
            self.preset,
            scales=parse_scales(self.scales),
            motion_mode=self.motion_mode,
            aggregate_mode=self.aggregate_mode,
            classes=self.classes,
            grid=self.grid,
            scan_chunk=self.scan_chunk or None,
            input_center=self.input_center,
            **over,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            warmup_epochs=self.warmup_epochs,
            base_lr_per_256=self.base_lr_per_256,
            batch=self.batch,
            weight_decay=self.weight_decay,
            seed=self.seed,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
        )

    def synth_spec(self, split: str) -> SynthSpec:
        T, H, W = self.grid
        per_class = self.clips_per_class if split == "train" else self.val_clips_per_class
        return SynthSpec(
            classes=self.classes,
            amplitude=self.amplitude,
            T=T,
            H=H,
            W=W,
            clips_per_class=per_class,
            noise_sigma=self.noise_sigma,
            seed=self.seed,
            mode=self.synth_mode,
            blob_radius=self.blob_radius,
            texture=self.texture,
            center_jitter=self.center_jitter,
            # validation clips use a disjoint index range
            index_offset=0 if split == "train" else 1_000_000,
        )

    def lines(self) -> list[str]:
        return [f"{f.name} = {format_value(getattr(self, f.name))}" for f in fields(self)]


def parse_scales(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in str(text).split(",") if s.strip())
    except ValueError as exc:
        raise ConfigError(f"scales must be comma-separated integers, got {text!r}") from exc


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


_HINTS = typing.get_type_hints(RunConfig)


def _convert(key: str, raw: str):
    hint = _HINTS[key]
    text = raw.strip()
    optional = type(None) in typing.get_args(hint)
    if optional:
        if text.lower() == "none":
            return None
        hint = next(a for a in typing.get_args(hint) if a is not type(None))
    try:
        if hint is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {hint.__name__}") from exc
    return text


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _HINTS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _convert(key, raw)
    return values


def build_config(config_path: str | None, overrides: dict) -> RunConfig:
    values = {}
    if config_path:
        path = Path(config_path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        values.update(parse_config_text(text, str(path)))
    for key, raw in overrides.items():
        if key not in _HINTS:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _convert(key, raw) if isinstance(raw, str) else raw
    return RunConfig(**values)


# ---------------------------------------------------------------------------
# argument parsing

_ALIASES = {"aggregate_mode": ["--aggregate"]}


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", default=argparse.SUPPRESS)
    for f in fields(RunConfig):
        flags = [f"--{f.name}"] + _ALIASES.get(f.name, [])
        common.add_argument(*flags, dest=f.name, metavar="VALUE", default=argparse.SUPPRESS)
    parser = argparse.ArgumentParser(prog="msfmamba", description="Multiscale state-fusion video classifier on a desk.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gen": "write train/val synthetic datasets",
        "train": "train a model and write metrics and checkpoints",
        "eval": "evaluate a checkpoint on a split",
        "bench": "time scans against a quadratic attention foil",
        "export-attn": "write per-location scale weights for one clip",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


class RunLog:
    """Echo to stdout and append to ``<out>/run.log``."""

    def __init__(self, path: Path | None):
        self.fh = None
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            self.fh = open(path, "w", encoding="utf-8")

    def __call__(self, msg: str) -> None:
        print(msg, flush=True)
        if self.fh:
            self.fh.write(msg + "\n")
            self.fh.flush()

    def close(self) -> None:
        if self.fh:
            self.fh.close()


# ---------------------------------------------------------------------------
# commands


def _dataset_files(cfg: RunConfig) -> dict[str, Path]:
    return {split: cfg.data_path / f"{split}.msfv" for split in ("train", "val")}


def cmd_gen(cfg: RunConfig, log=print) -> int:
    cfg.data_path.mkdir(parents=True, exist_ok=True)
    for split, path in _dataset_files(cfg).items():
        manifest = write_dataset(cfg.synth_spec(split), path)
        log(f"{split}: {path} ({sum(manifest.values())} clips)")
        for name, count in manifest.items():
            log(f"  {name}: {count}")
    return 0


def load_split(cfg: RunConfig, split: str) -> Dataset:
    files = _dataset_files(cfg)
    if split not in files:
        raise ConfigError(f"split must be 'train' or 'val', got {split!r}")
    path = files[split]
    if not path.exists():
        raise ConfigError(f"dataset {path} not found; run 'msfmamba gen' first")
    ds = read_dataset(path)
    if cfg.frame_shuffle:
        ds = Dataset(shuffle_frames(ds.frames, cfg.seed + (split == "val")), ds.labels, ds.class_count)
    return ds


def cmd_train(cfg: RunConfig, log=print) -> int:
    start = time.perf_counter()
    mcfg, tc = cfg.model_config(), cfg.train_config()
    for line in cfg.lines():
        log(f"config {line}")
    train_ds, val_ds = load_split(cfg, "train"), load_split(cfg, "val")
    model = MSFMamba(mcfg, cfg.seed)
    log(f"parameters {model.parameter_count()}")
    log(f"peak_lr {tc.peak_lr:.9g}")
    try:
        result = train(model, tc, train_ds, val_ds, cfg.out, log, cfg.stop_after or None)
    except TrainingDiverged as exc:
        log(f"aborted: {exc}")
        return 3
    for row in result.history:
        log(f"metrics {row}")
    log(f"best val top1 {result.best.top1:.9g} at epoch {result.best_epoch}")
    log(f"final val loss {result.final.loss:.9g} top1 {result.final.top1:.9g} top5 {result.final.top5:.9g}")
    log(f"wall_clock_seconds {time.perf_counter() - start:.2f}")
    ok = result.final.top1 >= cfg.floor
    log(f"floor {cfg.floor:.9g}: {'pass' if ok else 'FAIL'}")
    return 0 if ok else 1


def _load_model(cfg: RunConfig) -> MSFMamba:
    model = MSFMamba(cfg.model_config(), cfg.seed)
    path = Path(cfg.checkpoint) if cfg.checkpoint else Path(cfg.out) / "final.msfw"
    checkpoint.load_into(model.parameters(), path)
    return model


def cmd_eval(cfg: RunConfig, log=print) -> int:
    model = _load_model(cfg)
    ds = load_split(cfg, cfg.split)
    m = evaluate(model, ds, cfg.batch)
    text = f"split,loss,top1,top5\n{cfg.split},{m.loss:.9g},{m.top1:.9g},{m.top5:.9g}\n"
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"eval_{cfg.split}.csv").write_text(text, encoding="utf-8")
    log(text.rstrip())
    return 0


def cmd_export_attn(cfg: RunConfig, log=print) -> int:
    if cfg.aggregate_mode != "aswm":
        raise ConfigError("no attention in average mode: export-attn needs aggregate_mode = aswm")
    model = _load_model(cfg)
    ds = load_split(cfg, cfg.split)
    if not 0 <= cfg.clip_index < len(ds):
        raise ConfigError(f"clip_index {cfg.clip_index} out of range for {len(ds)} clips")
    _, alpha = model.forward(ds.frames[cfg.clip_index])
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"attention_{cfg.split}_{cfg.clip_index}.csv"
    path.write_text(attention_csv(alpha, list(model.cfg.scales)), encoding="utf-8")
    log(f"wrote {path}")
    return 0


def cmd_bench(cfg: RunConfig, log=print) -> int:
    from .bench import run_bench

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with threadpool_limits(limits=1):
        report = run_bench(
            d=cfg.bench_d,
            N=cfg.bench_N,
            chunk=cfg.bench_chunk,
            repeats=cfg.bench_repeats,
            min_n=cfg.bench_min_n,
            max_n=cfg.bench_max_n,
            head_dim=cfg.bench_head_dim,
            seed=cfg.seed,
            log=log,
        )
    (out / "bench.csv").write_text(report.timings_csv(), encoding="utf-8")
    (out / "bench_slopes.csv").write_text(report.slopes_csv(), encoding="utf-8")
    for method, slope in report.slopes.items():
        log(f"slope {method} {slope:.3f}")
    return 0


_HANDLERS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "export-attn": cmd_export_attn,
}


def _thread_cap():
    raw = os.environ.get("MSF_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"MSF_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"MSF_THREADS must be a positive integer, got {raw!r}")
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = vars(make_parser().parse_args(argv))
    command = args.pop("command")
    config_path = args.pop("config", None)
    log = None
    try:
        cfg = build_config(config_path, args)
        log = RunLog(Path(cfg.out) / "run.log" if command == "train" else None)
        with _thread_cap():
            return _HANDLERS[command](cfg, log)
    except (ConfigError, checkpoint.CheckpointMismatch) as exc:
        print(f"msfmamba {command}: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"msfmamba {command}: {exc}", file=sys.stderr)
        return 2
    finally:
        if log is not None:
            log.close()
