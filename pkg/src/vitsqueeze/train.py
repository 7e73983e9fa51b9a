"""Plain mini-batch SGD on :func:`engine.loss_and_grad`."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .engine import (ArchitectureConfig, Teacher, VitSpec, is_trainable, loss_and_grad, total_loss,
                     update_glad_statistics)
from .errors import ConfigError, ParameterError, TrainingDivergenceError

log = logging.getLogger(__name__)

DEFAULT_BATCH = 32
DEFAULT_LAMBDA_GLAD = 1.0


@dataclass
class TrainResult:
    weights: dict
    # curve[0] is the loss before training, curve[e] the loss after epoch e
    curve: list = field(default_factory=list)
    task_curve: list = field(default_factory=list)
    glad_curve: list = field(default_factory=list)


def evaluate(data: Dataset, config, weights, spec, teacher=None, lambda_glad=DEFAULT_LAMBDA_GLAD,
             batch_size: int = 256):
    """Sample-weighted loss over the whole dataset."""
    total = task = glad = 0.0
    for start in range(0, len(data), batch_size):
        t = data.tokens[start:start + batch_size]
        y = data.labels[start:start + batch_size]
        loss, parts = total_loss(t, y, config, weights, spec, teacher, lambda_glad, training=False)
        total += loss * len(y)
        task += parts["task"] * len(y)
        glad += parts["glad"] * len(y)
    n = max(len(data), 1)
    return total / n, task / n, glad / n


def train_toy(spec: VitSpec, config: ArchitectureConfig, weights: dict, data: Dataset,
              epochs: int, lr: float, teacher: Teacher | None = None, lambda_glad: float = DEFAULT_LAMBDA_GLAD,
              batch_size: int = DEFAULT_BATCH, seed: int = 0) -> TrainResult:
    """Train a copy of ``weights``; deterministic for a fixed seed."""
    config.validate(spec)
    if epochs < 0 or lr < 0 or batch_size < 1:
        raise ParameterError(f"need epochs >= 0, lr >= 0, batch_size >= 1 (got {epochs}, {lr}, {batch_size})")
    if len(data) == 0 and epochs > 0:
        raise ConfigError("cannot train on an empty dataset")
    fires = any(config.reduces(l, spec) for l in range(spec.layers))
    if fires and lambda_glad != 0.0 and teacher is None:
        raise ConfigError("config aggregates tokens; fine-tuning needs a teacher model")
    w = {k: np.array(v, dtype=np.float64, copy=True) for k, v in weights.items()}
    rng = np.random.default_rng(seed)
    result = TrainResult(w)

    def record():
        if len(data) == 0:
            return
        loss, task, glad = evaluate(data, config, w, spec, teacher, lambda_glad)
        result.curve.append(loss)
        result.task_curve.append(task)
        result.glad_curve.append(glad)

    record()
    step = 0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(data))
        for start in range(0, len(data), batch_size):
            idx = order[start:start + batch_size]
            t, y = data.tokens[idx], data.labels[idx]
            loss, _, grads = loss_and_grad(t, y, config, w, spec, teacher, lambda_glad, training=True)
            if not math.isfinite(loss):
                raise TrainingDivergenceError(step, loss)
            for name, g in grads.items():
                if is_trainable(name):
                    w[name] -= lr * g
            update_glad_statistics(t, config, w, spec, teacher)
            step += 1
        record()
        if not math.isfinite(result.curve[-1]):
            raise TrainingDivergenceError(step, result.curve[-1])
        log.info("epoch %d/%d loss %.6f", epoch, epochs, result.curve[-1])
    return result
