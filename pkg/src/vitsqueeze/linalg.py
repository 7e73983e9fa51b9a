"""Dense float64 kernels used by every other module.

Matrices are plain ``numpy.ndarray`` objects of dtype float64.  Most kernels
also accept a stack of matrices (leading batch axes) and act on the last two
axes, which is how the transformer code calls them.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import linalg as sla
from scipy.special import erf

from .errors import ConvergenceError, NumericError, ParameterError, ShapeError, SingularMatrixError

JACOBI_MAX_SWEEPS = 100
JACOBI_TOL = 1e-12
# Largest condition number accepted by solve_spd before it refuses to answer.
MAX_CONDITION = 1.0 / (1e3 * np.finfo(np.float64).eps)

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def check_finite(a: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{what} produced non-finite entries")
    return a


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def transpose(a) -> np.ndarray:
    return np.swapaxes(np.asarray(a, dtype=np.float64), -1, -2)


def row_softmax(m, scale: float = 1.0) -> np.ndarray:
    """Softmax over the last axis of ``scale * m``, stabilised by the row max."""
    if not scale > 0:
        raise ParameterError(f"softmax scale must be positive, got {scale}")
    z = np.asarray(m, dtype=np.float64) * scale
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(p: np.ndarray, grad_p: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the softmax logits given the softmax output ``p``."""
    return p * (grad_p - (grad_p * p).sum(axis=-1, keepdims=True))


def normal_cdf(m) -> np.ndarray:
    return 0.5 * (1.0 + erf(np.asarray(m, dtype=np.float64) * _INV_SQRT2))


def gelu(m) -> np.ndarray:
    """Exact GeLU ``x * Phi(x)``."""
    x = np.asarray(m, dtype=np.float64)
    return x * normal_cdf(x)


def gelu_grad(m, cdf: np.ndarray | None = None) -> np.ndarray:
    x = np.asarray(m, dtype=np.float64)
    if cdf is None:
        cdf = normal_cdf(x)
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


def layer_norm(m, eps: float = 1e-10) -> np.ndarray:
    """Normalise each row (last axis) to zero mean and unit variance.

    No affine parameters; callers that need scale/shift apply them.
    """
    x = np.asarray(m, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps)


def layer_norm_backward(m, grad_out, eps: float = 1e-10) -> np.ndarray:
    x = np.asarray(m, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    g = np.asarray(grad_out, dtype=np.float64)
    return inv * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True))


def frobenius(m) -> float:
    x = np.asarray(m, dtype=np.float64)
    return float(np.sqrt(np.sum(x * x)))


def _jacobi_columns(a: np.ndarray, want_v: bool):
    """One-sided (Hestenes) Jacobi on the columns of a stack ``(B, m, n)``, m >= n.

    Returns the rotated columns and the accumulated right rotations.
    """
    a = a.copy()
    batch, _, n = a.shape
    v = np.broadcast_to(np.eye(n), (batch, n, n)).copy() if want_v else None
    tiny = np.finfo(np.float64).tiny
    for _sweep in range(JACOBI_MAX_SWEEPS):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                ap = a[:, :, p]
                aq = a[:, :, q]
                alpha = np.einsum("bi,bi->b", ap, ap)
                beta = np.einsum("bi,bi->b", aq, aq)
                gamma = np.einsum("bi,bi->b", ap, aq)
                scale = np.sqrt(alpha * beta)
                active = (np.abs(gamma) > JACOBI_TOL * scale) & (scale > tiny)
                if not active.any():
                    continue
                rotated = True
                g = np.where(active, gamma, 1.0)
                zeta = (beta - alpha) / (2.0 * g)
                t = np.sign(zeta) / (np.abs(zeta) + np.hypot(1.0, zeta))
                t = np.where(zeta == 0.0, 1.0, t)
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                c = np.where(active, c, 1.0)[:, None]
                s = np.where(active, s, 0.0)[:, None]
                new_p = c * ap - s * aq
                new_q = s * ap + c * aq
                a[:, :, p] = new_p
                a[:, :, q] = new_q
                if want_v:
                    vp = v[:, :, p]
                    vq = v[:, :, q]
                    new_vp = c * vp - s * vq
                    new_vq = s * vp + c * vq
                    v[:, :, p] = new_vp
                    v[:, :, q] = new_vq
        if not rotated:
            return a, v
    raise ConvergenceError(f"Jacobi SVD did not converge within {JACOBI_MAX_SWEEPS} sweeps")


def svd_batched(stack, compute_uv: bool = True):
    """Thin SVD of every matrix in a ``(B, m, n)`` stack via one-sided Jacobi.

    Returns ``(U, S, V)`` with ``U: (B, m, k)``, ``S: (B, k)`` descending and
    ``V: (B, n, k)``, ``k = min(m, n)``; with ``compute_uv=False`` only ``S``.
    """
    x = np.asarray(stack, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"svd_batched expects a 3-D stack, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericError("svd input contains non-finite entries")
    flipped = x.shape[1] < x.shape[2]
    if flipped:
        x = np.swapaxes(x, 1, 2)
    cols, v = _jacobi_columns(x, want_v=compute_uv)
    s = np.sqrt(np.einsum("bij,bij->bj", cols, cols))
    order = np.argsort(-s, axis=1, kind="stable")
    s = np.take_along_axis(s, order, axis=1)
    if not compute_uv:
        return s
    cols = np.take_along_axis(cols, order[:, None, :], axis=2)
    v = np.take_along_axis(v, order[:, None, :], axis=2)
    safe = np.where(s > 0, s, 1.0)
    u = np.where(s[:, None, :] > 0, cols / safe[:, None, :], 0.0)
    if flipped:
        u, v = v, u
    return u, s, v


def svd(m):
    """Thin SVD ``m = U diag(S) V^T`` with singular values in descending order."""
    a = as_matrix(m)
    u, s, v = svd_batched(a[None])
    return u[0], s[0], v[0]


def singular_values(m) -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim == 2:
        return svd_batched(a[None], compute_uv=False)[0]
    return svd_batched(a, compute_uv=False)


def solve_spd(a, b, ridge: float = 0.0) -> np.ndarray:
    """Return ``Z = b (a + ridge I)^{-1}`` for symmetric positive definite ``a``."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    n = a.shape[0]
    if a.shape != (n, n):
        raise ShapeError(f"solve_spd needs a square matrix, got {a.shape}")
    if b.shape[1] != n:
        raise ShapeError(f"right-hand side has {b.shape[1]} columns, system is {n}x{n}")
    if ridge < 0:
        raise ParameterError(f"ridge must be non-negative, got {ridge}")
    asym = np.max(np.abs(a - a.T)) if n else 0.0
    if asym > 1e-9 * max(1.0, np.max(np.abs(a))):
        raise ShapeError(f"solve_spd needs a symmetric matrix (asymmetry {asym:.3e})")
    system = 0.5 * (a + a.T) + ridge * np.eye(n)
    eig = np.linalg.eigvalsh(system)
    top = eig[-1] if n else 1.0
    cond = math.inf if eig[0] <= 0 else float(top / eig[0])
    if not cond <= MAX_CONDITION:
        raise SingularMatrixError("matrix is numerically singular; use a positive ridge", cond)
    factor = sla.cho_factor(system, lower=True, check_finite=False)
    return sla.cho_solve(factor, b.T, check_finite=False).T
