"""Temperature-softened targets and the weighted teacher/student loss.

The soft target for a sample is the teacher's softmax taken over logits
divided by a temperature T; the student trains against a mix of that
distribution and the true label: ``L = alpha * L_soft + (1 - alpha) *
L_hard``. By default the soft term carries no extra scaling; the
conventional T^2 gradient-scale correction is available behind a flag.

The teacher reads its own view of each sample (a centered 32-frame clip
for the convolutional family, raw chunk sequences otherwise) in eval mode
and is never updated.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor, add, scale
from .data import GestureDataset, GestureSample
from .layers import cross_entropy, cross_entropy_mean, softmax
from .models import ArchSpec, ModelParams, build_model, forward_batch
from .train import (EpochRecord, TrainConfig, batch_inputs, fit,
                    required_channels)

__all__ = [
    "soften",
    "DistillConfig",
    "distill_loss",
    "distill_train",
]


def soften(logits, temperature: float) -> np.ndarray:
    """Softmax over logits divided by the temperature, max-subtracted.

    Accepts a logit vector or a (B, c) batch; returns probabilities of the
    same shape. Higher temperatures flatten the distribution toward
    uniform without moving its argmax.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = logits.data if isinstance(logits, Tensor) else logits
    z = np.asarray(z, dtype=np.float64) / float(temperature)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _check_mix(temperature: float, alpha: float) -> None:
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")


def _soft_term(student_logits: Tensor, soft_targets: np.ndarray,
               temperature: float, t_squared: bool, batched: bool) -> Tensor:
    cooled = scale(student_logits, 1.0 / temperature)
    ce = cross_entropy_mean(cooled, soft_targets) if batched else \
        cross_entropy(cooled, soft_targets)
    if t_squared:
        ce = scale(ce, temperature * temperature)
    return ce


def distill_loss(student_logits: Tensor, teacher_logits, label: int,
                 temperature: float = 2.0, alpha: float = 0.5,
                 t_squared: bool = False) -> Tensor:
    """Weighted sum of softened-teacher and true-label cross-entropies.

    ``alpha`` = 0 degenerates to the plain label loss and 1 to the pure
    soft loss; in between the value is exactly affine in alpha.
    """
    _check_mix(temperature, alpha)
    if alpha == 0.0:
        return cross_entropy(student_logits, label)
    soft = _soft_term(student_logits, soften(teacher_logits, temperature),
                      temperature, t_squared, batched=False)
    if alpha == 1.0:
        return soft
    hard = cross_entropy(student_logits, label)
    return add(scale(soft, alpha), scale(hard, 1.0 - alpha))


@dataclass
class DistillConfig:
    teacher: ModelParams
    student_spec: ArchSpec
    temperature: float = 2.0
    alpha: float = 0.5
    t_squared: bool = False
    cache_teacher: bool = True

    def __post_init__(self):
        _check_mix(self.temperature, self.alpha)


def distill_train(config: DistillConfig, dataset: GestureDataset,
                  train_config: TrainConfig, csv_path: str | None = None,
                  log=sys.stdout) -> tuple[ModelParams, list[EpochRecord]]:
    """Train a fresh student against the frozen teacher; returns it + history.

    The student is built from (student_spec, train_config.seed), so the
    alpha = 0 case reproduces plain supervised training of that model
    bit for bit. With ``cache_teacher`` the teacher's logits are computed
    once per sample id and reused across epochs.
    """
    if train_config.loss_mode != "distill":
        raise ValueError("distill_train() only handles the distill loss "
                         "mode; use train for plain supervision")
    teacher = config.teacher
    if teacher.spec.class_count != config.student_spec.class_count:
        raise ValueError(
            f"teacher has {teacher.spec.class_count} classes but student "
            f"spec has {config.student_spec.class_count}")
    mode = train_config.input_mode
    want = required_channels(mode)
    for who, spec in (("teacher", teacher.spec), ("student", config.student_spec)):
        if spec.input_channels != want:
            raise ValueError(
                f"input mode {mode!r} produces {want} channels but the "
                f"{who} expects {spec.input_channels}")

    student = build_model(config.student_spec, train_config.seed)
    alpha = config.alpha
    temperature = config.temperature
    logit_cache: dict[int, np.ndarray] = {}

    def run_teacher(samples: Sequence[GestureSample]) -> np.ndarray:
        return forward_batch(teacher, batch_inputs(teacher, samples, mode),
                             training=False).data

    if config.cache_teacher and alpha > 0.0:
        # one eval pass up front keeps teacher work off the gradient tape
        split = dataset.train
        for lo in range(0, len(split), train_config.batch_size):
            chunk = split[lo:lo + train_config.batch_size]
            for s, row in zip(chunk, run_teacher(chunk)):
                logit_cache[s.id] = row

    def teacher_logits(samples: Sequence[GestureSample]) -> np.ndarray:
        missing = [s for s in samples if s.id not in logit_cache]
        if missing:
            rows = run_teacher(missing)
            if not config.cache_teacher:
                return rows
            for s, row in zip(missing, rows):
                logit_cache[s.id] = row
        return np.stack([logit_cache[s.id] for s in samples])

    def batch_loss(model: ModelParams, samples: Sequence[GestureSample]) -> Tensor:
        logits = forward_batch(model, batch_inputs(model, samples, mode),
                               training=True)
        labels = np.array([s.label for s in samples], dtype=np.int64)
        if alpha == 0.0:
            return cross_entropy_mean(logits, labels)
        targets = soften(teacher_logits(samples), temperature)
        soft = _soft_term(logits, targets, temperature, config.t_squared,
                          batched=True)
        if alpha == 1.0:
            return soft
        hard = cross_entropy_mean(logits, labels)
        return add(scale(soft, alpha), scale(hard, 1.0 - alpha))

    return fit(student, dataset, train_config, batch_loss, csv_path, log)
