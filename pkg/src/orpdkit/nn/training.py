"""Supervised training loop: z-scored targets, AdamW, early stopping.

Targets are normalized per output column with statistics computed on the
training split only; the model prediction lives in that normalized space and
is denormalized at evaluation time.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..datagen import LabeledDataset
from ..grid import Grid
from ..powerflow import control_mask
from .autodiff import Tensor, backward
from .models import Model, ModelConfig, build_model, forward, masked_loss

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        self.epoch = epoch
        super().__init__(f"validation loss became non-finite at epoch {epoch}")


@dataclass
class Hyper:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 64
    patience: int = 20
    max_epochs: int = 200
    seed: int = 0


@dataclass
class TrainReport:
    train_curve: list[float] = field(default_factory=list)
    val_curve: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    stopped_epoch: int = -1
    hyper: Optional[Hyper] = None
    seed: int = 0


class AdamW:
    """Adaptive-moment steps with decoupled weight decay."""

    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            m_hat = self.m[k] / (1 - b1 ** self.t)
            v_hat = self.v[k] / (1 - b2 ** self.t)
            p.value = p.value - self.lr * self.weight_decay * p.value
            p.value = p.value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def normalize_targets(y: np.ndarray, mask: np.ndarray, norm_stats: dict) -> np.ndarray:
    """Z-score the two output columns over masked entries; unmasked stay zero."""
    out = np.zeros_like(y)
    for col, key in ((0, "vset"), (1, "qr")):
        std = norm_stats[key]["std"] or 1.0
        picked = mask[..., col]
        out[..., col] = np.where(picked, (y[..., col] - norm_stats[key]["mean"]) / std, 0.0)
    return out


def denormalize_predictions(z: np.ndarray, mask: np.ndarray, norm_stats: dict) -> np.ndarray:
    out = np.zeros_like(z)
    for col, key in ((0, "vset"), (1, "qr")):
        std = norm_stats[key]["std"] or 1.0
        picked = mask[..., col]
        out[..., col] = np.where(picked, z[..., col] * std + norm_stats[key]["mean"], 0.0)
    return out


def _fit_input_scale(x_train: np.ndarray, grid: Grid) -> np.ndarray:
    """Per-channel 1/RMS over defined train entries; zeros stay exactly zero."""
    from ..powerflow import input_mask

    defined = input_mask(grid)
    scale = np.ones(5)
    for c in range(5):
        vals = x_train[:, defined[:, c], c]
        rms = float(np.sqrt(np.mean(vals**2))) if vals.size else 0.0
        if rms > 0.0:
            scale[c] = 1.0 / rms
    return scale


def _split_arrays(dataset: LabeledDataset, grid: Grid, tag: str, norm_stats: dict):
    rows = dataset.by_split(tag)
    if not rows:
        raise ValueError(f"dataset has no converged rows tagged {tag!r}")
    mask = control_mask(grid)
    x = np.stack([r.x for r in rows])
    y = np.stack([r.y_star for r in rows])
    z = normalize_targets(y, mask[None, :, :], norm_stats)
    return x, z, mask


def _mean_loss(model: Model, x: np.ndarray, z: np.ndarray, mask: np.ndarray, batch: int) -> float:
    total, count = 0.0, 0
    for k in range(0, len(x), batch):
        xb, zb = x[k : k + batch], z[k : k + batch]
        yhat = forward(model, xb, mode="eval")
        loss = masked_loss(yhat, zb, mask[None, :, :])
        total += float(loss.value) * len(xb)
        count += len(xb)
    return total / count


def train(model: Model, dataset: LabeledDataset, grid: Grid, hyper: Hyper | None = None) -> TrainReport:
    """Stochastic gradient training with early stopping on validation loss.

    Restores the parameters achieving the best recorded validation loss.
    Raises TrainingDiverged when the validation loss becomes non-finite.
    """
    hyper = hyper or Hyper()
    if dataset.norm_stats is None:
        raise ValueError("dataset carries no normalization statistics")
    model.norm_stats = dataset.norm_stats
    x_train, z_train, mask = _split_arrays(dataset, grid, "train", dataset.norm_stats)
    x_val, z_val, _ = _split_arrays(dataset, grid, "val", dataset.norm_stats)
    model.input_scale = _fit_input_scale(x_train, grid)

    rng = np.random.default_rng(hyper.seed)
    optimizer = AdamW(model.params, hyper.lr, hyper.weight_decay)
    report = TrainReport(hyper=hyper, seed=hyper.seed)
    best_snapshot = model.snapshot()
    since_best = 0

    for epoch in range(hyper.max_epochs):
        order = rng.permutation(len(x_train))
        epoch_loss, seen = 0.0, 0
        for k in range(0, len(order), hyper.batch_size):
            idx = order[k : k + hyper.batch_size]
            optimizer.zero_grad()
            yhat = forward(model, x_train[idx], mode="train", rng=rng)
            loss = masked_loss(yhat, z_train[idx], mask[None, :, :])
            backward(loss)
            optimizer.step()
            epoch_loss += float(loss.value) * len(idx)
            seen += len(idx)
        train_loss = epoch_loss / seen
        val_loss = _mean_loss(model, x_val, z_val, mask, hyper.batch_size)
        report.train_curve.append(train_loss)
        report.val_curve.append(val_loss)
        if not math.isfinite(val_loss):
            raise TrainingDiverged(epoch)
        if val_loss < report.best_val_loss:
            report.best_val_loss = val_loss
            report.best_epoch = epoch
            best_snapshot = model.snapshot()
            since_best = 0
        else:
            since_best += 1
            if since_best > hyper.patience:
                break
    report.stopped_epoch = len(report.val_curve) - 1
    model.restore(best_snapshot)
    model.training_manifest = {
        "best_epoch": report.best_epoch,
        "best_val_loss": report.best_val_loss,
        "stopped_epoch": report.stopped_epoch,
        "seed": hyper.seed,
        "lr": hyper.lr,
        "weight_decay": hyper.weight_decay,
        "batch_size": hyper.batch_size,
        "patience": hyper.patience,
        "max_epochs": hyper.max_epochs,
    }
    return report


_CONFIG_KEYS = {"hidden", "nonlinearity", "dropout", "taps"}
_HYPER_KEYS = {"lr", "weight_decay", "batch_size", "patience", "max_epochs"}


def hyper_search(
    space: dict[str, list],
    budget: int,
    seed: int,
    base_config: ModelConfig,
    dataset: LabeledDataset,
    grid: Grid,
    base_hyper: Hyper | None = None,
) -> tuple[dict, list[dict]]:
    """Seeded random search over a discrete space of config/hyper choices.

    Returns the best draw (by validation loss) and the full trial table.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    unknown = set(space) - _CONFIG_KEYS - _HYPER_KEYS
    if unknown:
        raise ValueError(f"unknown search keys {sorted(unknown)}")
    base_hyper = base_hyper or Hyper()
    rng = np.random.default_rng(seed)
    trials = []
    best = None
    for t in range(budget):
        draw = {k: v[int(rng.integers(0, len(v)))] for k, v in sorted(space.items())}
        cfg_kwargs = {k: (tuple(v) if k == "hidden" else v) for k, v in draw.items() if k in _CONFIG_KEYS}
        hyp_kwargs = {k: v for k, v in draw.items() if k in _HYPER_KEYS}
        config = ModelConfig(**{**_config_dict(base_config), **cfg_kwargs})
        hyper = Hyper(**{**_hyper_dict(base_hyper), **hyp_kwargs, "seed": base_hyper.seed})
        model = build_model(config, grid, seed=base_hyper.seed)
        report = train(model, dataset, grid, hyper)
        trial = {"trial": t, "params": draw, "val_loss": report.best_val_loss}
        trials.append(trial)
        if best is None or report.best_val_loss < best["val_loss"]:
            best = trial
        log.info("trial %d: %s -> val %.3e", t, draw, report.best_val_loss)
    return dict(best["params"]), trials


def _config_dict(config: ModelConfig) -> dict:
    return {
        "family": config.family,
        "hidden": config.hidden,
        "nonlinearity": config.nonlinearity,
        "dropout": config.dropout,
        "taps": config.taps,
    }


def _hyper_dict(hyper: Hyper) -> dict:
    return {
        "lr": hyper.lr,
        "weight_decay": hyper.weight_decay,
        "batch_size": hyper.batch_size,
        "patience": hyper.patience,
        "max_epochs": hyper.max_epochs,
    }
