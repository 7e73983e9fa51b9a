"""Dynamic attention, static attention baselines and the closed-form static fit.

Naming follows the usual query/key/value convention: the attention map is
built from ``X W_q`` and ``X W_k`` and aggregates the values ``X W_v``.  The
static fit therefore uses ``W_v`` in its moments.  (The source derivation
labels the projections differently; the math is the same.)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .errors import DegenerateInputError, ParameterError, ShapeError, SingularMatrixError

DEFAULT_RIDGE_FACTOR = 1e-6
DEFAULT_ESTIMATION_SAMPLES = 512


@dataclass(frozen=True)
class AttentionHead:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray

    def __post_init__(self):
        shapes = {np.shape(self.w_q), np.shape(self.w_k), np.shape(self.w_v)}
        if len(shapes) != 1 or len(next(iter(shapes))) != 2:
            raise ShapeError(f"W_q, W_k, W_v must share one d x d_h shape, got {sorted(shapes)}")

    @property
    def d(self) -> int:
        return self.w_v.shape[0]

    @property
    def d_h(self) -> int:
        return self.w_v.shape[1]


@dataclass
class StaticAttention:
    a_hat: np.ndarray
    head_index: int = 0
    layer_index: int = 0

    def __post_init__(self):
        self.a_hat = np.asarray(self.a_hat, dtype=np.float64)
        n = self.a_hat.shape[0] if self.a_hat.ndim == 2 else -1
        if self.a_hat.shape != (n, n):
            raise ShapeError(f"static attention must be square, got {self.a_hat.shape}")
        linalg.check_finite(self.a_hat, "static attention")

    @property
    def token_count(self) -> int:
        return self.a_hat.shape[0]


@dataclass
class MomentAccumulator:
    """Running sums of ``A G`` and ``G`` with ``G = X W_v W_v^T X^T``."""

    n: int
    cross: np.ndarray = field(default=None)
    gram: np.ndarray = field(default=None)
    sample_count: int = 0

    def __post_init__(self):
        if self.cross is None:
            self.cross = np.zeros((self.n, self.n))
        if self.gram is None:
            self.gram = np.zeros((self.n, self.n))

    def merge(self, other: "MomentAccumulator") -> "MomentAccumulator":
        if other.n != self.n:
            raise ShapeError(f"cannot merge accumulators over {self.n} and {other.n} tokens")
        return MomentAccumulator(self.n, self.cross + other.cross, self.gram + other.gram,
                                 self.sample_count + other.sample_count)


def _check_tokens(x, head: AttentionHead) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or x.shape[-2] < 1:
        raise ShapeError(f"token sequence must have at least one row, got shape {x.shape}")
    if x.shape[-1] != head.d:
        raise ShapeError(f"tokens have dimension {x.shape[-1]}, head expects {head.d}")
    return x


def attention_map(x, head: AttentionHead) -> np.ndarray:
    x = _check_tokens(x, head)
    q = x @ head.w_q
    k = x @ head.w_k
    return linalg.row_softmax(q @ linalg.transpose(k), 1.0 / math.sqrt(head.d_h))


def dynamic_attention(x, head: AttentionHead):
    """Return ``(A, A X W_v)``; works on one sequence or a stack of them."""
    x = _check_tokens(x, head)
    a = attention_map(x, head)
    return a, a @ (x @ head.w_v)


def ssa_apply(x, static: StaticAttention, head: AttentionHead) -> np.ndarray:
    x = _check_tokens(x, head)
    if x.shape[-2] != static.token_count:
        raise ShapeError(f"static attention covers {static.token_count} tokens, input has {x.shape[-2]}")
    return static.a_hat @ (x @ head.w_v)


def make_position_aware_ssa(n: int, window: int, cls_token: bool = True) -> StaticAttention:
    """Banded, row-normalised local attention.

    Each row averages the tokens within ``window // 2`` positions.  Without a
    class token the band is clipped at the sequence ends; with one, the cls row
    attends only itself and the remaining rows use a full-width window shifted
    to stay inside the sequence.
    """
    if n < 1 or window < 1 or window % 2 == 0 or window > n:
        raise ParameterError(f"window must be odd and within [1, {n}], got {window}")
    half = window // 2
    a = np.zeros((n, n))
    for i in range(n):
        if cls_token and i == 0:
            a[0, 0] = 1.0
            continue
        if cls_token:
            lo = min(max(i - half, 0), n - window)
            hi = lo + window
        else:
            lo, hi = max(i - half, 0), min(i + half + 1, n)
        a[i, lo:hi] = 1.0 / (hi - lo)
    return StaticAttention(a)


def make_normal_ssa(n: int, rng: np.random.Generator, std: float = 0.02) -> StaticAttention:
    """Randomly initialised full static attention (softmax of small logits)."""
    return StaticAttention(linalg.row_softmax(rng.normal(0.0, std, size=(n, n))))


def accumulate_moments(acc: MomentAccumulator, x, head: AttentionHead) -> MomentAccumulator:
    """Add one sequence ``(N, d)`` or a stack ``(S, N, d)`` to ``acc`` in place."""
    x = _check_tokens(x, head)
    if x.shape[-2] != acc.n:
        raise ShapeError(f"accumulator tracks {acc.n} tokens, input has {x.shape[-2]}")
    stack = x.reshape((-1,) + x.shape[-2:])
    a = attention_map(stack, head)
    z = stack @ head.w_v
    g = z @ np.swapaxes(z, -1, -2)
    acc.cross += np.einsum("sij,sjk->ik", a, g)
    acc.gram += g.sum(axis=0)
    acc.sample_count += stack.shape[0]
    return acc


def default_ridge(gram_mean: np.ndarray) -> float:
    n = gram_mean.shape[0]
    return DEFAULT_RIDGE_FACTOR * float(np.trace(gram_mean)) / n


def dgssa_estimate(acc: MomentAccumulator, ridge: float | None = None,
                   head_index: int = 0, layer_index: int = 0) -> StaticAttention:
    """Closed-form least-squares static attention from accumulated moments.

    ``ridge=None`` uses ``1e-6 * trace(gram) / N`` on the averaged Gram matrix.
    """
    if acc.sample_count < 1:
        raise DegenerateInputError("moment accumulator is empty")
    cross = acc.cross / acc.sample_count
    gram = acc.gram / acc.sample_count
    if ridge is None:
        ridge = default_ridge(gram)
    try:
        a_hat = linalg.solve_spd(gram, cross, ridge)
    except SingularMatrixError as exc:
        raise SingularMatrixError(
            "value Gram matrix is singular; estimate with ridge > 0 or more samples",
            exc.condition) from exc
    return StaticAttention(a_hat, head_index=head_index, layer_index=layer_index)


def dgssa_objective(static: StaticAttention, samples, head: AttentionHead) -> float:
    """Mean over samples of ``||(A_hat - A) X W_v||_F^2``."""
    xs = _check_tokens(samples, head)
    xs = xs.reshape((-1,) + xs.shape[-2:])
    if xs.shape[0] < 1:
        raise DegenerateInputError("objective needs at least one sample")
    if xs.shape[-2] != static.token_count:
        raise ShapeError(f"static attention covers {static.token_count} tokens, samples have {xs.shape[-2]}")
    a = attention_map(xs, head)
    r = (static.a_hat - a) @ (xs @ head.w_v)
    return float(np.mean(np.sum(r * r, axis=(-2, -1))))
