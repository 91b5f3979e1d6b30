"""Seed-deterministic training and evaluation loops.

Metrics land in ``out_dir``/metrics.csv with a versioned header and one row
per completed epoch; the final model in ``out_dir``/checkpoint.ckpt. All
randomness (init, shuffling, augmentation) derives from the config seed, so
two single-threaded runs with the same config agree except for wall time.
"""

from __future__ import annotations

import os
import time

import numpy as np

from .config import RunConfig
from .data import (BatchIterator, Dataset, channel_stats_for, load_cifar_binary,
                   normalize_augment, synthesize_positional)
from .optim import Adam
from .rng import make_rng
from .tensor import no_grad
from .vit import VitModel, cross_entropy, top_k_accuracy, save_checkpoint

METRICS_VERSION = "sape2-metrics-v1"
METRICS_HEADER = "epoch,train_loss,train_top1,eval_top1,eval_top5,wall_seconds"

# the synthetic task is fixed data; only model seeds vary between runs
_SYNTH_TRAIN_SEED = 0
_SYNTH_EVAL_SEED = 1


def load_splits(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    if cfg.dataset == "synthetic":
        train = synthesize_positional(cfg.train_count, num_classes=cfg.num_classes,
                                      seed=_SYNTH_TRAIN_SEED, split="train")
        evals = synthesize_positional(cfg.eval_count, num_classes=cfg.num_classes,
                                      seed=_SYNTH_EVAL_SEED, split="eval")
        return train, evals
    root = cfg.resolved_data_dir()
    return (load_cifar_binary(root, cfg.dataset, "train"),
            load_cifar_binary(root, cfg.dataset, "eval"))


def _train_stats(cfg: RunConfig, train: Dataset):
    if cfg.dataset == "synthetic":
        return channel_stats_for(train)
    try:
        return channel_stats_for(train, cfg.resolved_data_dir())
    except OSError:
        return channel_stats_for(train)


def evaluate(model: VitModel, ds: Dataset, mean, std,
             batch_size: int = 256) -> tuple[float, float]:
    """(top-1, top-5) over a full split, gradient-free."""
    k5 = min(5, ds.num_classes)
    hits1 = hits5 = 0
    with no_grad():
        for start in range(0, len(ds), batch_size):
            images = ds.images[start:start + batch_size]
            labels = ds.labels[start:start + batch_size]
            x = normalize_augment(images, train=False, mean=mean, std=std)
            logits = model(x).data
            hits1 += top_k_accuracy(logits, labels, 1) * len(labels)
            hits5 += top_k_accuracy(logits, labels, k5) * len(labels)
    n = len(ds)
    return hits1 / n, hits5 / n


def train_model(cfg: RunConfig, log=print) -> dict:
    """Full training run; returns the final metrics summary."""
    os.makedirs(cfg.out_dir, exist_ok=True)
    train_ds, eval_ds = load_splits(cfg)
    if train_ds.num_classes != cfg.num_classes:
        raise ValueError(f"dataset has {train_ds.num_classes} classes, "
                         f"config says {cfg.num_classes}")
    mean, std = _train_stats(cfg, train_ds)

    model = VitModel(cfg.vit_config(), seed=cfg.seed, dtype=cfg.dtype)
    opt = Adam(model.parameters(), lr=cfg.lr)
    batches = BatchIterator(train_ds, cfg.batch_size, shuffle=cfg.shuffle,
                            seed=cfg.seed)

    metrics_path = os.path.join(cfg.out_dir, "metrics.csv")
    ckpt_path = os.path.join(cfg.out_dir, "checkpoint.ckpt")
    with open(metrics_path, "w", encoding="ascii") as fh:
        fh.write(f"# {METRICS_VERSION}\n{METRICS_HEADER}\n")

    summary = {"train_loss": float("nan"), "train_top1": float("nan"),
               "eval_top1": float("nan"), "eval_top5": float("nan")}
    for epoch in range(1, cfg.epochs + 1):
        tic = time.perf_counter()
        aug_rng = make_rng(cfg.seed, stream=2000 + epoch)
        loss_sum = 0.0
        hit_sum = 0
        seen = 0
        for images, labels in batches:
            x = normalize_augment(images, train=True, mean=mean, std=std,
                                  augment=cfg.augment, rng=aug_rng)
            logits = model(x)
            loss = cross_entropy(logits, labels)
            opt.zero_grad()
            loss.backward()
            opt.step()
            b = len(labels)
            loss_sum += loss.item() * b
            hit_sum += top_k_accuracy(logits.data, labels, 1) * b
            seen += b
        train_loss = loss_sum / seen
        train_top1 = hit_sum / seen
        eval_top1, eval_top5 = evaluate(model, eval_ds, mean, std, cfg.eval_batch_size)
        wall = time.perf_counter() - tic
        with open(metrics_path, "a", encoding="ascii") as fh:
            fh.write(f"{epoch},{train_loss:.6f},{train_top1:.6f},"
                     f"{eval_top1:.6f},{eval_top5:.6f},{wall:.3f}\n")
        if log:
            log(f"epoch {epoch}/{cfg.epochs} loss {train_loss:.4f} "
                f"train@1 {train_top1:.3f} eval@1 {eval_top1:.3f} ({wall:.1f}s)")
        summary = {"train_loss": train_loss, "train_top1": train_top1,
                   "eval_top1": eval_top1, "eval_top5": eval_top5}
        if cfg.save_every and epoch % cfg.save_every == 0:
            save_checkpoint(ckpt_path, model)

    if cfg.epochs == 0:
        eval_top1, eval_top5 = evaluate(model, eval_ds, mean, std, cfg.eval_batch_size)
        summary["eval_top1"], summary["eval_top5"] = eval_top1, eval_top5
        if log:
            log(f"no training requested; eval@1 {eval_top1:.3f} eval@5 {eval_top5:.3f}")
    save_checkpoint(ckpt_path, model)
    summary["checkpoint"] = ckpt_path
    summary["metrics"] = metrics_path
    return summary


def eval_checkpoint(model: VitModel, cfg: RunConfig) -> dict:
    """Evaluation-split metrics for a restored model."""
    train_ds, eval_ds = load_splits(cfg)
    if eval_ds.num_classes != model.cfg.num_classes:
        raise ValueError(f"dataset has {eval_ds.num_classes} classes, "
                         f"checkpoint expects {model.cfg.num_classes}")
    mean, std = _train_stats(cfg, train_ds)
    top1, top5 = evaluate(model, eval_ds, mean, std, cfg.eval_batch_size)
    return {"eval_top1": top1, "eval_top5": top5, "count": len(eval_ds)}
