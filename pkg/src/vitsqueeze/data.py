"""Synthetic labelled token sequences and model/dataset file helpers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import container
from .engine import ArchitectureConfig, VitSpec, check_weights
from .errors import ConfigError

SIGNAL_TOKENS = 3
SIGNAL_STRENGTH = 2.0


@dataclass
class Dataset:
    tokens: np.ndarray  # (S, n0 - 1, d)
    labels: np.ndarray  # (S,) int64

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def subset(self, count: int) -> "Dataset":
        return Dataset(self.tokens[:count], self.labels[:count])


def make_dataset(spec: VitSpec, samples: int, seed: int) -> Dataset:
    """Noise tokens carrying a class direction at a few random positions.

    Every class owns a fixed unit direction in feature space; each sample adds
    it to ``SIGNAL_TOKENS`` randomly chosen patch tokens, so classifying
    requires finding where the signal is.
    """
    rng = np.random.default_rng(seed)
    n, d, c = spec.patch_tokens, spec.embed_dim, spec.num_classes
    directions = rng.normal(size=(c, d))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    labels = rng.integers(0, c, size=samples)
    tokens = rng.normal(size=(samples, n, d))
    k = min(SIGNAL_TOKENS, n)
    for s in range(samples):
        where = rng.choice(n, size=k, replace=False)
        tokens[s, where] += SIGNAL_STRENGTH * directions[labels[s]]
    return Dataset(tokens, labels.astype(np.int64))


def save_dataset(path, data: Dataset, spec: VitSpec, seed: int | None = None) -> None:
    meta = {"kind": "dataset", "spec": spec.to_dict(), "seed": seed}
    container.save(path, {"tokens": data.tokens, "labels": data.labels.astype(np.float64)}, meta)


def load_dataset(path):
    tensors, meta = container.load(path)
    if meta.get("kind") != "dataset" or "tokens" not in tensors or "labels" not in tensors:
        raise ConfigError(f"{path}: not a dataset container")
    spec = VitSpec.from_dict(meta["spec"])
    tokens = tensors["tokens"]
    labels = tensors["labels"]
    if tokens.shape[1:] != (spec.patch_tokens, spec.embed_dim) or labels.shape != tokens.shape[:1]:
        raise ConfigError(f"{path}: tensor shapes {tokens.shape}/{labels.shape} disagree with spec")
    return Dataset(tokens, labels.astype(np.int64)), spec


def save_model(path, spec: VitSpec, config: ArchitectureConfig, weights: dict, extra: dict | None = None) -> None:
    meta = {"kind": "model", "spec": spec.to_dict(), "config": config.to_dict()}
    if extra:
        meta.update(extra)
    container.save(path, weights, meta)


def load_model(path):
    tensors, meta = container.load(path)
    if meta.get("kind") != "model":
        raise ConfigError(f"{path}: not a model container")
    spec = VitSpec.from_dict(meta["spec"])
    config = ArchitectureConfig.from_dict(meta["config"]).validate(spec)
    check_weights(spec, config, tensors)
    return spec, config, tensors, meta
