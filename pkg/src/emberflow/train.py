"""Training harness: epoch loop, evaluation, metric recording, curve export.

A run is fully determined by (config, seed, dataset): one Rng drives weight
init, epoch shuffles and dropout masks in a fixed consumption order.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt_mod
from .data import Dataset, NUM_CLASSES, batches
from .layers import Model, ModelConfig, build_model, softmax_cross_entropy
from .optim import NonFiniteGradientError, make_optimizer
from .tensor import Rng

EVAL_BATCH = 256


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 200
    optimizer: str = "sgd"
    lr: float = 0.05
    decay: float = 1e-5
    seed: int = 0
    limit_train: int | None = None
    limit_val: int | None = None
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        self.model.validate()


@dataclass
class EpochMetrics:
    epoch: int
    lr: float  # effective lr at epoch start
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    seconds: float


@dataclass
class TrainResult:
    metrics: list[EpochMetrics]
    checkpoint: ckpt_mod.Checkpoint
    diverged: bool


def evaluate(model: Model, dataset: Dataset, batch_size: int = EVAL_BATCH):
    """Eval-mode loss, accuracy and 7x7 confusion matrix (rows = true class)."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    saved_mode = model.mode
    model.set_mode("eval")
    total_loss = 0.0
    confusion = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    for images, labels in batches(dataset, batch_size):
        logits = model.forward(images)
        loss, _ = softmax_cross_entropy(logits, labels)
        total_loss += loss * len(labels)
        preds = logits.argmax(axis=1)
        np.add.at(confusion, (labels, preds), 1)
    model.set_mode(saved_mode)
    model._forward_done = False
    n = len(dataset)
    accuracy = float(np.trace(confusion)) / n
    return total_loss / n, accuracy, confusion


def train(config: TrainConfig, train_set: Dataset, val_set: Dataset) -> TrainResult:
    """Run the full training loop and return per-epoch metrics plus a final
    checkpoint.

    A non-finite batch loss or gradient marks the run diverged: the
    offending update is skipped and no further updates are applied, but
    per-epoch evaluation and metric recording continue.
    """
    config.validate()
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("train and validation sets must be nonempty")
    if config.limit_train:
        train_set = train_set.head(config.limit_train)
    if config.limit_val:
        val_set = val_set.head(config.limit_val)

    rng = Rng(config.seed)
    model = build_model(config.model, rng)
    optimizer = make_optimizer(config.optimizer, config.lr, config.decay)
    metrics: list[EpochMetrics] = []
    diverged = False

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr_at_start = optimizer.effective_lr()
        model.set_mode("train")
        if not diverged:
            for images, labels in batches(train_set, config.batch_size,
                                          shuffle=True, rng=rng):
                model.zero_grads()
                logits = model.forward(images)
                loss, dlogits = softmax_cross_entropy(logits, labels)
                if not np.isfinite(loss):
                    diverged = True
                    break
                model.backward(dlogits)
                try:
                    optimizer.step(list(model.slots.values()))
                except NonFiniteGradientError:
                    diverged = True
                    break
        train_loss, train_acc, _ = evaluate(model, train_set)
        val_loss, val_acc, _ = evaluate(model, val_set)
        metrics.append(EpochMetrics(
            epoch=epoch, lr=lr_at_start,
            train_loss=train_loss, train_acc=train_acc,
            val_loss=val_loss, val_acc=val_acc,
            seconds=time.perf_counter() - t0))

    final = ckpt_mod.from_model(model, optimizer, rng, config.epochs - 1,
                                diverged=diverged)
    return TrainResult(metrics, final, diverged)


CSV_HEADER = "epoch,lr,train_loss,train_acc,val_loss,val_acc"


def emit_curves(metrics: list[EpochMetrics], csv_path, svg_path=None,
                optimizer: str = "sgd"):
    """Write the metrics CSV (6 decimal places) and, when the series is
    nonempty and svg_path is given, an accuracy-vs-epoch SVG line chart."""
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        f.write(CSV_HEADER + "\n")
        for m in metrics:
            f.write(f"{m.epoch},{m.lr:.6f},{m.train_loss:.6f},{m.train_acc:.6f},"
                    f"{m.val_loss:.6f},{m.val_acc:.6f}\n")
    if svg_path and metrics:
        _write_svg(metrics, svg_path, optimizer)


def parse_metrics_csv(path) -> list[EpochMetrics]:
    with open(path, newline="", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"bad metrics header in {path}")
    out = []
    for line in lines[1:]:
        e, lr, tl, ta, vl, va = line.split(",")
        out.append(EpochMetrics(int(e), float(lr), float(tl), float(ta),
                                float(vl), float(va), 0.0))
    return out


def _write_svg(metrics: list[EpochMetrics], path, optimizer: str):
    width, height = 640, 440
    ml, mr, mt, mb = 60, 20, 30, 50
    pw, ph = width - ml - mr, height - mt - mb
    epochs = [m.epoch for m in metrics]
    xmax = max(max(epochs), 1)

    def sx(e):
        return ml + pw * e / xmax

    def sy(a):
        return mt + ph * (1.0 - a)

    def poly(values, color):
        pts = " ".join(f"{sx(e):.1f},{sy(v):.1f}" for e, v in zip(epochs, values))
        return (f'<polyline fill="none" stroke="{color}" stroke-width="2" '
                f'points="{pts}"/>')

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="black"/>',
        f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="black"/>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = sy(frac)
        parts.append(f'<line x1="{ml - 4}" y1="{y:.1f}" x2="{ml}" y2="{y:.1f}" stroke="black"/>')
        parts.append(f'<text x="{ml - 8}" y="{y + 4:.1f}" font-size="11" '
                     f'text-anchor="end">{frac:.2f}</text>')
    for e in sorted({0, xmax // 2, xmax}):
        x = sx(e)
        parts.append(f'<line x1="{x:.1f}" y1="{mt + ph}" x2="{x:.1f}" y2="{mt + ph + 4}" stroke="black"/>')
        parts.append(f'<text x="{x:.1f}" y="{mt + ph + 18}" font-size="11" '
                     f'text-anchor="middle">{e}</text>')
    parts.append(f'<text x="{ml + pw / 2:.0f}" y="{height - 12}" font-size="12" '
                 f'text-anchor="middle">epoch</text>')
    parts.append(f'<text x="16" y="{mt + ph / 2:.0f}" font-size="12" text-anchor="middle" '
                 f'transform="rotate(-90 16 {mt + ph / 2:.0f})">accuracy</text>')
    parts.append(poly([m.train_acc for m in metrics], "#1f6feb"))
    parts.append(poly([m.val_acc for m in metrics], "#d1242f"))
    n_epochs = len(metrics)
    parts.append(f'<rect x="{ml + 10}" y="{mt + 6}" width="14" height="3" fill="#1f6feb"/>')
    parts.append(f'<text x="{ml + 30}" y="{mt + 11}" font-size="11">train acc '
                 f'({optimizer}, {n_epochs} epochs)</text>')
    parts.append(f'<rect x="{ml + 10}" y="{mt + 22}" width="14" height="3" fill="#d1242f"/>')
    parts.append(f'<text x="{ml + 30}" y="{mt + 27}" font-size="11">val acc '
                 f'({optimizer}, {n_epochs} epochs)</text>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(parts) + "\n")
