"""Adam with selective decoupled weight decay, the training loop, and
confusion-matrix / Cohen's-kappa evaluation."""

from __future__ import annotations

import csv
import dataclasses
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Scaler, TrialSet
from .model import EEGEncoder, save_checkpoint
from .nn import cross_entropy_smoothed
from .tensor import ContractError, Tensor, backward, no_grad


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 500
    lr: float = 0.001
    label_smoothing: float = 0.1
    dropout: float = 0.3  # recipe record; the forward pass reads ModelConfig.dropout_p
    mlp_weight_decay: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size <= 0 or self.epochs <= 0 or self.lr <= 0:
            raise ContractError("batch_size, epochs and lr must be positive")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ContractError(f"label_smoothing must lie in [0, 1), got {self.label_smoothing}")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.mlp_weight_decay < 0:
            raise ContractError("mlp_weight_decay must be non-negative")


@dataclass
class AdamState:
    """First/second moment buffers plus the shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(entries, state: AdamState, config: TrainConfig) -> None:
    """One bias-corrected Adam update over (name, tensor, decayed) entries.

    Decayed parameters additionally shrink by lr * wd * p (decoupled decay,
    applied alongside the Adam step, never folded into the gradient).
    """
    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1**t
    correction2 = 1.0 - state.beta2**t
    for name, tensor, decayed in entries:
        if tensor.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient; run backward first")
        g = tensor.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        tensor.data = tensor.data - config.lr * update
        if decayed and config.mlp_weight_decay > 0.0:
            tensor.data = tensor.data - config.lr * config.mlp_weight_decay * tensor.data


@dataclass
class ModelState:
    """Learnable parameters plus optimizer moments; checkpoint-serializable."""

    model: EEGEncoder
    adam: AdamState
    scaler: Scaler | None = None

    def save(self, path) -> None:
        extras: dict[str, np.ndarray] = {}
        if self.scaler is not None:
            extras["scaler.mean"] = self.scaler.mean
            extras["scaler.std"] = self.scaler.std
            extras["scaler.mode"] = np.array([0 if self.scaler.mode == "per_channel" else 1], dtype=np.int64)
        extras["adam.step"] = np.array([self.adam.step], dtype=np.int64)
        for name, buf in self.adam.m.items():
            extras[f"adam.m.{name}"] = buf
        for name, buf in self.adam.v.items():
            extras[f"adam.v.{name}"] = buf
        save_checkpoint(path, self.model, extras)


def _scalar(buf) -> int:
    return int(np.asarray(buf).reshape(-1)[0])


def scaler_from_extras(extras: dict[str, np.ndarray]) -> Scaler | None:
    if "scaler.mean" not in extras:
        return None
    mode = "per_channel" if _scalar(extras.get("scaler.mode", 0)) == 0 else "global"
    return Scaler(mean=extras["scaler.mean"], std=extras["scaler.std"], mode=mode)


def trials_to_batch(trial_set: TrialSet, indices) -> tuple[Tensor, np.ndarray]:
    """Stack trials into the model's (B, 1, T, C) layout with their labels."""
    signals = np.stack([trial_set.trials[i].signal for i in indices])  # (B, C, T)
    x = np.ascontiguousarray(signals.transpose(0, 2, 1))[:, None, :, :]
    labels = np.array([trial_set.trials[i].label for i in indices], dtype=np.int64)
    return Tensor(x), labels


@dataclass
class EpochStats:
    epoch: int
    loss: float
    train_acc: float


def train(
    model: EEGEncoder,
    train_set: TrialSet,
    config: TrainConfig,
    checkpoint_dir=None,
    scaler: Scaler | None = None,
    on_epoch=None,
) -> tuple[ModelState, list[EpochStats]]:
    """Seeded mini-batch training; returns final state and per-epoch history.

    Batches are reshuffled every epoch; a batch size above the dataset size
    degrades to one full-set batch. ``on_epoch(stats) -> bool`` may stop the
    loop early (caller-controlled; the recipe itself never stops early).
    Checkpoints land in ``checkpoint_dir`` at the best train loss
    (checkpoint_best.bin) and at the end (checkpoint.bin).
    """
    config.validate()
    if len(train_set) == 0:
        raise ContractError("cannot train on an empty trial set")
    rng = np.random.default_rng([config.seed, 1])
    state = ModelState(model=model, adam=AdamState(), scaler=scaler)
    history: list[EpochStats] = []
    best_loss = np.inf
    n = len(train_set)
    entries = model.parameter_entries()

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total_loss = 0.0
        total_correct = 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            x, labels = trials_to_batch(train_set, idx)
            logits = model(x, training=True, rng=rng)
            loss = cross_entropy_smoothed(logits, labels, config.label_smoothing)
            total_loss += loss.item() * len(idx)
            total_correct += int((logits.data.argmax(axis=1) == labels).sum())
            model.zero_grad()
            backward(loss)
            adam_step(entries, state.adam, config)
        stats = EpochStats(epoch=epoch, loss=total_loss / n, train_acc=total_correct / n)
        history.append(stats)
        if checkpoint_dir is not None and stats.loss < best_loss:
            best_loss = stats.loss
            state.save(Path(checkpoint_dir) / "checkpoint_best.bin")
        if on_epoch is not None and on_epoch(stats):
            break

    if checkpoint_dir is not None:
        state.save(Path(checkpoint_dir) / "checkpoint.bin")
    return state, history


def write_history_csv(path, history: list[EpochStats]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "loss", "train_acc"])
        for stats in history:
            writer.writerow([stats.epoch, repr(stats.loss), repr(stats.train_acc)])


# -- evaluation -----------------------------------------------------------------


@dataclass
class EvalReport:
    confusion: np.ndarray  # (K, K) int64, rows = true class, cols = predicted
    accuracy: float
    kappa: float
    per_class_recall: np.ndarray

    def to_dict(self) -> dict:
        return {
            "n_eval": int(self.confusion.sum()),
            "accuracy": self.accuracy,
            "kappa": self.kappa,
            "confusion": self.confusion.tolist(),
            "per_class_recall": self.per_class_recall.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def confusion_matrix(labels, predictions, n_classes: int = 4) -> np.ndarray:
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (np.asarray(labels), np.asarray(predictions)), 1)
    return confusion


def kappa_from_confusion(confusion) -> float:
    """Chance-corrected agreement (p_o - p_e) / (1 - p_e) with product marginals."""
    confusion = np.asarray(confusion, dtype=np.float64)
    n = confusion.sum()
    if n <= 0:
        raise ContractError("confusion matrix is empty")
    p_o = np.trace(confusion) / n
    p_e = float((confusion.sum(axis=1) / n) @ (confusion.sum(axis=0) / n))
    if p_e >= 1.0:
        # both marginals collapsed onto one class; agreement is then total
        return 1.0
    return (p_o - p_e) / (1.0 - p_e)


def report_from_predictions(labels, predictions, n_classes: int = 4) -> EvalReport:
    confusion = confusion_matrix(labels, predictions, n_classes)
    n = confusion.sum()
    support = confusion.sum(axis=1)
    recall = np.divide(
        np.diag(confusion), support, out=np.zeros(n_classes, dtype=np.float64), where=support > 0
    )
    return EvalReport(
        confusion=confusion,
        accuracy=float(np.trace(confusion) / n),
        kappa=float(kappa_from_confusion(confusion)),
        per_class_recall=recall,
    )


def predict(model: EEGEncoder, trial_set: TrialSet, batch_size: int = 64, n_threads: int = 1) -> np.ndarray:
    """Eval-mode argmax predictions; trials may be sharded across threads."""
    if len(trial_set) == 0:
        raise ContractError("cannot evaluate an empty trial set")
    chunks = [list(range(s, min(s + batch_size, len(trial_set)))) for s in range(0, len(trial_set), batch_size)]

    def run(chunk):
        x, _ = trials_to_batch(trial_set, chunk)
        with no_grad():
            logits = model(x, training=False)
        return logits.data.argmax(axis=1)

    if n_threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return np.concatenate(parts)


def evaluate(model: EEGEncoder, eval_set: TrialSet, n_threads: int = 1) -> EvalReport:
    predictions = predict(model, eval_set, n_threads=n_threads)
    return report_from_predictions(eval_set.labels(), predictions, model.config.n_classes)
