"""Supervised training loop shared by the train and finetune commands."""
from __future__ import annotations

import csv
import logging
import math
import os

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .config import ViTConfig
from .data import Dataset
from .errors import TrainingError
from .model import Model, build_model, forward_parallel
from .optim import OptimizerConfig, make_optimizer
from .rng import Rng

log = logging.getLogger(__name__)

METRIC_FIELDS = ["epoch", "steps", "lr", "train_loss", "train_acc", "test_loss", "test_acc", "grad_elements"]


def evaluate(model: Model, dataset: Dataset, batch_size: int = 256) -> tuple[float, float]:
    """(mean cross-entropy, accuracy) in eval mode."""
    total_loss, correct = 0.0, 0
    with T.no_grad():
        for x, y in dataset.batches(batch_size):
            logits = forward_parallel(model, x, "eval")
            total_loss += float(T.cross_entropy(logits, y).data) * len(y)
            correct += int((logits.data.argmax(axis=1) == y).sum())
    return total_loss / len(dataset), correct / len(dataset)


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_metrics(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow([_fmt(r.get(k, "")) for k in METRIC_FIELDS])


def fit(model: Model, train: Dataset, epochs: int, opt_cfg: OptimizerConfig, rng: Rng,
        test: Dataset | None = None, params=None, log_path=None) -> list[dict]:
    """Cross-entropy training with seeded shuffling and a per-step cosine schedule.

    Only tensors with ``requires_grad`` are updated. Aborts with TrainingError
    on the first non-finite loss.
    """
    opt_cfg.validate()
    params = [p for p in (model.parameters() if params is None else params) if p.requires_grad]
    steps_per_epoch = math.ceil(len(train) / opt_cfg.batch_size)
    opt = make_optimizer(params, opt_cfg, steps_per_epoch * epochs)
    shuffle_rng, drop_rng = rng.fork("shuffle"), rng.fork("droppath")
    rows = []
    last_norm = float("nan")
    for epoch in range(1, epochs + 1):
        loss_sum, correct, seen, grad_elems = 0.0, 0, 0, 0
        for x, y in train.batches(opt_cfg.batch_size, shuffle_rng):
            logits = forward_parallel(model, x, "train", drop_rng)
            loss = T.cross_entropy(logits, y)
            val = float(loss.data)
            if not math.isfinite(val):
                raise TrainingError(f"non-finite loss {val} at step {opt.step_count} "
                                    f"(lr={opt.lr_at(opt.step_count):.3g}, last grad-norm={last_norm:.3g})")
            loss.backward()
            grad_elems = sum(p.grad.size for p in params if p.grad is not None)
            last_norm = opt.grad_norm()
            lr = opt.step()
            opt.zero_grad()
            loss_sum += val * len(y)
            correct += int((logits.data.argmax(axis=1) == y).sum())
            seen += len(y)
        row = {"epoch": epoch, "steps": opt.step_count, "lr": lr, "train_loss": loss_sum / seen,
               "train_acc": correct / seen, "grad_elements": grad_elems}
        if test is not None:
            row["test_loss"], row["test_acc"] = evaluate(model, test)
        rows.append(row)
        log.info("epoch %d loss %.4f acc %.3f test_acc %s", epoch, row["train_loss"], row["train_acc"],
                 row.get("test_acc"))
        if log_path is not None:
            write_metrics(log_path, rows)
    return rows


def train(config: ViTConfig, dataset: Dataset, epochs: int, opt_cfg: OptimizerConfig, seed: int = 0,
          test: Dataset | None = None, out_dir=None) -> tuple[Model, list[dict]]:
    """Build a model from ``seed``, train it, and (with ``out_dir``) write metrics.csv and model.vtc."""
    rng = Rng(seed)
    model = build_model(config, rng.fork("init"))
    log_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "metrics.csv")
    rows = fit(model, dataset, epochs, opt_cfg, rng.fork("train"), test=test, log_path=log_path)
    if out_dir is not None:
        save_checkpoint(model, os.path.join(out_dir, "model.vtc"))
    return model, rows
