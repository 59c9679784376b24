"""Adam optimization, the supervised training loop, and evaluation.

Training is single-threaded and bit-reproducible: the only randomness is
the epoch shuffle generator seeded from the config, batches run in a fixed
order, and snapshots copy rather than alias. The distillation path reuses
the same loop with a different batch loss, so its label-only degenerate
case reproduces plain training exactly.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape, Tensor, backward
from .data import GestureDataset, GestureSample, make_input
from .layers import cross_entropy_mean
from .models import ModelParams, clip_from_video, forward_batch

__all__ = [
    "AdamState",
    "TrainConfig",
    "adam_step",
    "train",
    "evaluate",
    "batch_inputs",
    "EpochRecord",
]

INPUT_MODES = ("hand", "upper_body", "combined")


class AdamState:
    """First/second moment accumulators keyed by parameter name."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        if lr <= 0 or not 0 <= beta1 < 1 or not 0 <= beta2 < 1 or epsilon <= 0:
            raise ValueError("invalid Adam hyperparameters")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState) -> AdamState:
    """One bias-corrected Adam update over every named parameter, in place.

    All gradients are validated before any parameter changes, so a
    non-finite gradient aborts the step without leaving a half-applied
    update behind.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter "
                f"{name!r} shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise FloatingPointError(
                f"non-finite gradient for {name!r} ({bad} of {g.size} elements); "
                "step aborted")

    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return state


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    loss_mode: str = "hard"
    shuffle: bool = True
    input_mode: str = "upper_body"
    clip_norm: float | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if self.loss_mode not in ("hard", "distill"):
            raise ValueError(f"unknown loss mode {self.loss_mode!r}")
        if self.input_mode not in INPUT_MODES:
            raise ValueError(f"unknown input mode {self.input_mode!r}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive when set")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float


def required_channels(input_mode: str) -> int:
    return 4 if input_mode == "combined" else 2


def _check_compatibility(model: ModelParams, input_mode: str) -> None:
    want = required_channels(input_mode)
    if model.spec.input_channels != want:
        raise ValueError(
            f"input mode {input_mode!r} produces {want} channels but the "
            f"model expects {model.spec.input_channels}")


def batch_inputs(model: ModelParams, samples: Sequence[GestureSample],
                 input_mode: str):
    """Network-ready batch for a model family: stacked clips or video list."""
    videos = [make_input(s, input_mode) for s in samples]
    if model.spec.family == "baseline_cnn3d":
        return np.stack([clip_from_video(v) for v in videos])
    return videos


def evaluate(model: ModelParams, samples: Sequence[GestureSample],
             input_mode: str = "upper_body",
             batch_size: int = 16) -> tuple[float, np.ndarray]:
    """Eval-mode accuracy (fraction) and the class confusion matrix.

    ``confusion[i, j]`` counts samples of true class ``i`` predicted as
    class ``j``; its total equals the number of samples.
    """
    if not samples:
        raise ValueError("cannot evaluate on an empty sample list")
    _check_compatibility(model, input_mode)
    c = model.spec.class_count
    confusion = np.zeros((c, c), dtype=np.int64)
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo:lo + batch_size]
        logits = forward_batch(model, batch_inputs(model, chunk, input_mode),
                               training=False)
        preds = np.argmax(logits.data, axis=1)
        for s, p in zip(chunk, preds):
            confusion[s.label, p] += 1
    accuracy = float(np.trace(confusion) / len(samples))
    return accuracy, confusion


def _clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> None:
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale


def fit(model: ModelParams, dataset: GestureDataset, config: TrainConfig,
        batch_loss: Callable[[ModelParams, Sequence[GestureSample]], Tensor],
        csv_path: str | None = None,
        log=sys.stdout) -> tuple[ModelParams, list[EpochRecord]]:
    """Shared optimization loop; returns the best-validation snapshot.

    ``batch_loss`` runs the train-mode forward over a batch of samples and
    returns the scalar loss. Snapshot selection takes the highest
    validation accuracy, with later epochs winning ties.
    """
    train_samples = dataset.train
    val_samples = dataset.val
    if not train_samples:
        raise ValueError("training split is empty")
    if not val_samples:
        raise ValueError("validation split is empty")

    params = model.learnable()
    grad_order = list(params.values())
    names = list(params)
    adam = AdamState(lr=config.lr)
    rng = np.random.default_rng(config.seed)

    best: ModelParams | None = None
    best_acc = -1.0
    history: list[EpochRecord] = []

    for epoch in range(1, config.epochs + 1):
        if config.shuffle:
            order = rng.permutation(len(train_samples))
        else:
            order = np.arange(len(train_samples))
        losses = []
        for lo in range(0, len(order), config.batch_size):
            batch = [train_samples[i] for i in order[lo:lo + config.batch_size]]
            tape = Tape()
            with tape:
                loss = batch_loss(model, batch)
            if not np.isfinite(loss.data):
                raise FloatingPointError(
                    f"non-finite training loss at epoch {epoch}")
            losses.append(loss.item())
            grad_map = backward(tape, loss, grad_order)
            grads = {n: grad_map[t] for n, t in zip(names, grad_order)}
            if config.clip_norm is not None:
                _clip_gradients(grads, config.clip_norm)
            adam_step(params, grads, adam)

        val_acc, _ = evaluate(model, val_samples, config.input_mode)
        record = EpochRecord(epoch, float(np.mean(losses)), val_acc)
        history.append(record)
        if log is not None:
            print(f"epoch={record.epoch} train_loss={record.train_loss:.6f} "
                  f"val_accuracy={record.val_accuracy:.4f}", file=log)
        if val_acc >= best_acc:
            best_acc = val_acc
            best = model.copy()

    if csv_path is not None:
        lines = ["epoch,train_loss,val_accuracy"]
        lines += [f"{r.epoch},{r.train_loss:.8f},{r.val_accuracy:.6f}"
                  for r in history]
        with open(csv_path, "w") as f:
            f.write("\n".join(lines) + "\n")
    return best, history


def train(model: ModelParams, dataset: GestureDataset, config: TrainConfig,
          csv_path: str | None = None,
          log=sys.stdout) -> tuple[ModelParams, list[EpochRecord]]:
    """Supervised cross-entropy training; returns (best snapshot, history)."""
    if config.loss_mode != "hard":
        raise ValueError("train() only handles the hard loss mode; "
                         "use distill_train for distillation")
    _check_compatibility(model, config.input_mode)

    def batch_loss(m: ModelParams, samples: Sequence[GestureSample]) -> Tensor:
        logits = forward_batch(m, batch_inputs(m, samples, config.input_mode),
                               training=True)
        labels = np.array([s.label for s in samples], dtype=np.int64)
        return cross_entropy_mean(logits, labels)

    return fit(model, dataset, config, batch_loss, csv_path, log)
