"""Training and evaluation loops with CSV metrics and MSFW checkpoints."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint
from . import ndtensor as nt
from .model import AdamW, MSFMamba, TrainConfig, cross_entropy, opt_step, topk_accuracy
from .ndtensor import ConfigError
from .synthgen import Dataset

METRICS_HEADER = "epoch,split,loss,top1,top5,lr"


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at optimizer step {step}")
        self.step = step


@dataclass(frozen=True)
class Metrics:
    loss: float
    top1: float
    top5: float

    def row(self, epoch: int, split: str, lr: float) -> str:
        return f"{epoch},{split},{self.loss:.9g},{self.top1:.9g},{self.top5:.9g},{lr:.9g}"


def check_compatible(model: MSFMamba, ds: Dataset, name: str = "dataset") -> None:
    if ds.grid != model.cfg.grid:
        raise ConfigError(f"{name} clips are {ds.grid} but the model expects {model.cfg.grid}")
    if ds.class_count != model.cfg.classes:
        raise ConfigError(f"{name} has {ds.class_count} classes but the model has {model.cfg.classes}")


def _topk(rows: np.ndarray, labels: np.ndarray, k: int) -> float:
    return topk_accuracy(rows, labels, min(k, rows.shape[1]))


def evaluate(model: MSFMamba, ds: Dataset, batch: int = 20) -> Metrics:
    """Mean loss and Top-1/Top-5 over ``ds`` (no gradients recorded)."""
    if len(ds) == 0:
        return Metrics(float("nan"), 0.0, 0.0)
    logits = []
    for i in range(0, len(ds), batch):
        out, _ = model.forward(ds.frames[i:i + batch])
        logits.append(out.data)
    rows = np.concatenate(logits)
    loss = float(cross_entropy(rows, ds.labels).data)
    return Metrics(loss, _topk(rows, ds.labels, 1), _topk(rows, ds.labels, 5))


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 0xBA7C]).permutation(n)


@dataclass
class TrainResult:
    final: Metrics
    best: Metrics
    best_epoch: int
    history: list[str]
    seconds: float


def train(
    model: MSFMamba,
    tc: TrainConfig,
    train_ds: Dataset,
    val_ds: Dataset,
    out_dir,
    log: Callable[[str], None] = print,
    stop_after: int | None = None,
) -> TrainResult:
    """Run the full schedule; writes ``metrics.csv``, ``final.msfw`` and ``best.msfw``.

    The per-epoch ``train`` row reports the running loss and accuracy of the
    training batches seen during that epoch; the ``val`` row is a full
    evaluation after the epoch's last update. ``lr`` is the rate of that
    last update. ``stop_after`` ends the run after that many epochs while
    keeping the full-length schedule, so a truncated run reproduces the
    opening epochs of a complete one.
    """
    check_compatible(model, train_ds, "training set")
    check_compatible(model, val_ds, "validation set")
    if len(train_ds) == 0:
        raise ConfigError("training set is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    steps = math.ceil(len(train_ds) / tc.batch)
    tc = tc.with_steps(steps)
    params = model.parameters()
    opt = AdamW.from_config(params, tc)
    history = [METRICS_HEADER]
    best, best_epoch, final = None, -1, None
    start = time.perf_counter()
    step = 0
    lr = 0.0
    epochs = tc.epochs if not stop_after else min(stop_after, tc.epochs)
    for epoch in range(epochs):
        order = epoch_order(tc.seed, epoch, len(train_ds))
        loss_sum, rows = 0.0, []
        for i in range(steps):
            idx = order[i * tc.batch:(i + 1) * tc.batch]
            labels = train_ds.labels[idx]
            opt.zero_grad()
            with nt.Tape() as tape:
                logits, _ = model.forward(train_ds.frames[idx])
                loss = cross_entropy(logits, labels)
            value = float(loss.data)
            step += 1
            if not math.isfinite(value):
                raise TrainingDiverged(step, value)
            nt.backward(tape, loss)
            lr = opt_step(opt, tc, step)
            loss_sum += value * len(idx)
            rows.append(logits.data)
        seen = np.concatenate(rows)
        seen_labels = train_ds.labels[order[: len(seen)]]
        tr = Metrics(loss_sum / len(seen), _topk(seen, seen_labels, 1), _topk(seen, seen_labels, 5))
        final = evaluate(model, val_ds, tc.batch)
        history += [tr.row(epoch, "train", lr), final.row(epoch, "val", lr)]
        log(f"epoch {epoch}: train loss {tr.loss:.4f} top1 {tr.top1:.3f} | "
            f"val loss {final.loss:.4f} top1 {final.top1:.3f} top5 {final.top5:.3f} | "
            f"lr {lr:.3g} | {time.perf_counter() - start:.1f}s")
        if best is None or final.top1 > best.top1:
            best, best_epoch = final, epoch
            checkpoint.save(out / "best.msfw", params)
    checkpoint.save(out / "final.msfw", params)
    (out / "metrics.csv").write_text("\n".join(history) + "\n", encoding="utf-8")
    return TrainResult(final, best, best_epoch, history, time.perf_counter() - start)
