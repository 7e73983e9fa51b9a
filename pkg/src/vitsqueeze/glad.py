"""Global token aggregation: ``Y = GeLU(Norm(W X)) + E`` with analytic gradients.

``W`` (M x N) mixes all N input tokens into M output tokens, ``E`` (M x d)
re-embeds position.  ``Norm`` is per-token layer normalisation by default;
``norm="batch"`` normalises every (token, feature) activation over the batch
axis and keeps running statistics for evaluation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .errors import ParameterError, ShapeError

NORM_EPS = 1e-6
W_INIT_NOISE = 0.01
E_INIT_STD = 0.02
BN_MOMENTUM = 0.1


@dataclass
class GladLayer:
    w: np.ndarray
    pos: np.ndarray
    norm_eps: float = NORM_EPS
    norm: str = "layer"
    running_mean: np.ndarray | None = field(default=None, repr=False)
    running_var: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.pos = np.asarray(self.pos, dtype=np.float64)
        if self.w.ndim != 2 or self.pos.ndim != 2 or self.pos.shape[0] != self.w.shape[0]:
            raise ShapeError(f"GLAD needs W (M x N) and E (M x d), got {self.w.shape} and {self.pos.shape}")
        if self.out_tokens > self.in_tokens:
            raise ShapeError(f"GLAD cannot grow tokens ({self.in_tokens} -> {self.out_tokens})")
        if self.norm not in ("layer", "batch"):
            raise ParameterError(f"glad norm must be 'layer' or 'batch', got {self.norm!r}")
        if self.norm == "batch":
            shape = self.pos.shape
            if self.running_mean is None:
                self.running_mean = np.zeros(shape)
            if self.running_var is None:
                self.running_var = np.ones(shape)

    @property
    def in_tokens(self) -> int:
        return self.w.shape[1]

    @property
    def out_tokens(self) -> int:
        return self.w.shape[0]

    @property
    def dim(self) -> int:
        return self.pos.shape[1]


def pooling_init(n_in: int, m_out: int) -> np.ndarray:
    """Average-pooling-like rows: row j averages the ceil(N/M) tokens nearest j*N/M."""
    width = math.ceil(n_in / m_out)
    idx = np.arange(n_in)
    w = np.zeros((m_out, n_in))
    for j in range(m_out):
        centre = j * n_in / m_out
        nearest = np.lexsort((idx, np.abs(idx - centre)))[:width]
        w[j, nearest] = 1.0 / width
    return w


def make_glad_layer(n_in: int, m_out: int, dim: int, rng: np.random.Generator,
                    norm: str = "layer", norm_eps: float = NORM_EPS) -> GladLayer:
    if not 1 <= m_out <= n_in:
        raise ParameterError(f"GLAD output tokens must lie in [1, {n_in}], got {m_out}")
    w = pooling_init(n_in, m_out) + rng.normal(0.0, W_INIT_NOISE, size=(m_out, n_in))
    pos = rng.normal(0.0, E_INIT_STD, size=(m_out, dim))
    return GladLayer(w, pos, norm_eps=norm_eps, norm=norm)


def make_teacher_glad(layer: GladLayer, rng: np.random.Generator | None = None,
                      in_tokens: int | None = None) -> GladLayer:
    """Fresh, independently initialised GLAD for the teacher's features.

    ``in_tokens`` overrides N when the teacher carries more tokens than the
    student at that depth.
    """
    if rng is None:
        rng = np.random.default_rng()
    n_in = layer.in_tokens if in_tokens is None else in_tokens
    return make_glad_layer(n_in, layer.out_tokens, layer.dim, rng, norm=layer.norm, norm_eps=layer.norm_eps)


def _check_input(layer: GladLayer, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or x.shape[-2] != layer.in_tokens or x.shape[-1] != layer.dim:
        raise ShapeError(f"GLAD expects (..., {layer.in_tokens}, {layer.dim}) tokens, got {x.shape}")
    return x


def _batch_stats(z: np.ndarray):
    if z.ndim != 3:
        raise ShapeError(f"batch normalisation needs a (B, M, d) stack, got {z.shape}")
    return z.mean(axis=0), z.var(axis=0)


def _normalise(layer: GladLayer, z: np.ndarray, training: bool) -> np.ndarray:
    if layer.norm == "layer":
        return linalg.layer_norm(z, layer.norm_eps)
    if training:
        mean, var = _batch_stats(z)
    else:
        mean, var = layer.running_mean, layer.running_var
    return (z - mean) / np.sqrt(var + layer.norm_eps)


def glad_forward(layer: GladLayer, x, training: bool = False) -> np.ndarray:
    x = _check_input(layer, x)
    z = layer.w @ x
    return linalg.gelu(_normalise(layer, z, training)) + layer.pos


def glad_backward(layer: GladLayer, x, upstream_grad, training: bool = False):
    """Return ``(grad_w, grad_pos, grad_x)``; batch axes are summed for W and E."""
    x = _check_input(layer, x)
    g = np.asarray(upstream_grad, dtype=np.float64)
    expected = x.shape[:-2] + (layer.out_tokens, layer.dim)
    if g.shape != expected:
        raise ShapeError(f"upstream gradient has shape {g.shape}, expected {expected}")
    z = layer.w @ x
    h = _normalise(layer, z, training)
    dh = g * linalg.gelu_grad(h)
    if layer.norm == "layer":
        dz = linalg.layer_norm_backward(z, dh, layer.norm_eps)
    elif training:
        _, var = _batch_stats(z)
        inv = 1.0 / np.sqrt(var + layer.norm_eps)
        dz = inv * (dh - dh.mean(axis=0) - h * (dh * h).mean(axis=0))
    else:
        dz = dh / np.sqrt(layer.running_var + layer.norm_eps)
    batch_axes = tuple(range(g.ndim - 2))
    grad_w = np.einsum("bmj,bnj->mn", dz.reshape((-1,) + dz.shape[-2:]), x.reshape((-1,) + x.shape[-2:]))
    grad_pos = g.sum(axis=batch_axes) if batch_axes else g.copy()
    grad_x = layer.w.T @ dz
    return grad_w, grad_pos, grad_x


def update_running_stats(layer: GladLayer, x, momentum: float = BN_MOMENTUM) -> None:
    if layer.norm != "batch":
        return
    z = layer.w @ _check_input(layer, x)
    mean, var = _batch_stats(z)
    layer.running_mean = (1 - momentum) * layer.running_mean + momentum * mean
    layer.running_var = (1 - momentum) * layer.running_var + momentum * var


def token_distill_loss(y, y_t):
    """Squared Frobenius distance and its gradient w.r.t. ``y``.

    A ``(B, M, d)`` stack is reduced by the mean of per-sample losses.
    """
    y = np.asarray(y, dtype=np.float64)
    y_t = np.asarray(y_t, dtype=np.float64)
    if y.shape != y_t.shape:
        raise ShapeError(f"distillation shapes differ: {y.shape} vs {y_t.shape}")
    diff = y - y_t
    if diff.ndim == 3:
        b = max(diff.shape[0], 1)
        return float(np.sum(diff * diff)) / b, 2.0 * diff / b
    return float(np.sum(diff * diff)), 2.0 * diff
