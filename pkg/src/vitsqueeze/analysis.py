"""Singular spectra of attention maps, effective rank and static-fit quality."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import linalg
from .attention import AttentionHead, StaticAttention, attention_map
from .engine import ArchitectureConfig, VitSpec, model_forward
from .errors import DegenerateInputError, ParameterError, ShapeError

log = logging.getLogger(__name__)

DEFAULT_ENERGY = 0.99
REPORT_SIGMAS = 10
REPORT_COLUMNS = ["layer", "rank", "diff"] + [f"sigma_{i}" for i in range(1, REPORT_SIGMAS + 1)]
# Samples per SVD batch.  Fixed so results do not depend on the thread count.
CHUNK = 64


@dataclass
class LayerSpectrum:
    layer_index: int
    sigma: np.ndarray
    sample_count: int
    head_reduction: bool = True

    def __post_init__(self):
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.sigma.ndim != 1:
            raise ShapeError(f"spectrum must be 1-D, got shape {self.sigma.shape}")


def _chunks(count: int):
    return [(s, min(s + CHUNK, count)) for s in range(0, count, CHUNK)]


def _map_chunks(fn, count: int, threads: int):
    parts = _chunks(count)
    if threads <= 1 or len(parts) <= 1:
        return [fn(a, b) for a, b in parts]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda ab: fn(*ab), parts))


def collect_spectra(spec: VitSpec, weights: dict, config: ArchitectureConfig, tokens,
                    threads: int = 1) -> list:
    """Mean singular values of every layer's attention maps over samples and heads.

    Chunk sums are added in chunk order, so the result is the same for any
    ``threads``.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 3 or tokens.shape[0] < 1:
        raise DegenerateInputError("spectra need at least one sample")
    count = tokens.shape[0]

    def run(a, b):
        trace = model_forward(tokens[a:b], config, weights, spec)
        if b - a == 1:
            maps = {l: m[None] for l, m in trace.attention.items()}
        else:
            maps = trace.attention
        out = []
        for l in range(spec.layers):
            stack = np.asarray(maps[l])
            n = stack.shape[-1]
            s = linalg.singular_values(stack.reshape(-1, n, n))
            out.append(s.sum(axis=0))
        return out

    sums = _map_chunks(run, count, threads)
    result = []
    for l in range(spec.layers):
        total = sums[0][l].copy()
        for part in sums[1:]:
            total += part[l]
        result.append(LayerSpectrum(l, total / (count * spec.heads), count, True))
    return result


def effective_rank(spectrum, energy: float = DEFAULT_ENERGY, squared: bool = True) -> int:
    """Smallest ``k`` whose leading values hold at least ``energy`` of the total."""
    if not 0 < energy <= 1:
        raise ParameterError(f"energy must lie in (0, 1], got {energy}")
    sigma = np.asarray(getattr(spectrum, "sigma", spectrum), dtype=np.float64)
    w = sigma * sigma if squared else np.abs(sigma)
    total = float(w.sum())
    if not total > 0:
        raise DegenerateInputError("cannot rank an all-zero spectrum")
    frac = np.cumsum(w) / total
    # guard against the running sum landing a rounding error short of 1.0
    frac[-1] = 1.0
    return int(np.searchsorted(frac, energy, side="left")) + 1


def _residuals(samples, heads, statics):
    xs = np.asarray(samples, dtype=np.float64)
    xs = xs.reshape((-1,) + xs.shape[-2:])
    num = den = 0.0
    for head, st in zip(heads, statics):
        if st.token_count != xs.shape[-2]:
            raise ShapeError(f"static attention covers {st.token_count} tokens, samples have {xs.shape[-2]}")
        z = xs @ head.w_v
        target = attention_map(xs, head) @ z
        r = st.a_hat @ z - target
        num += float(np.sum(r * r))
        den += float(np.sum(target * target))
    return num, den


def difference_metric(samples, head: AttentionHead, static: StaticAttention) -> float:
    """``E||(A_hat - A) X W_v||^2 / E||A X W_v||^2`` over the given samples."""
    num, den = _residuals(samples, [head], [static])
    if not den > 0:
        raise DegenerateInputError("dynamic aggregation is zero on every sample")
    return num / den


def layer_difference_metric(samples, heads, statics) -> float:
    """Pooled version over heads: summed residuals over summed targets."""
    if len(heads) != len(statics) or not heads:
        raise ParameterError("need one static map per head")
    num, den = _residuals(samples, heads, statics)
    if not den > 0:
        raise DegenerateInputError("dynamic aggregation is zero on every sample")
    return num / den


def emit_report(spectra, metrics, path, energy: float = DEFAULT_ENERGY, ranks=None) -> Path:
    """Write ``path`` (CSV) and a ``.txt`` summary next to it; returns the CSV path."""
    path = Path(path)
    rows = []
    for i, (s, diff) in enumerate(zip(spectra, metrics)):
        rank = ranks[i] if ranks is not None else effective_rank(s, energy)
        sigma = np.asarray(getattr(s, "sigma", s))
        top = [float(v) for v in sigma[:REPORT_SIGMAS]]
        top += [0.0] * (REPORT_SIGMAS - len(top))
        rows.append([getattr(s, "layer_index", i), int(rank), float(diff)] + top)
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            out = csv.writer(fh)
            out.writerow(REPORT_COLUMNS)
            for r in rows:
                out.writerow([r[0], r[1]] + ["%.17g" % v for v in r[2:]])
        lines = [f"layers: {len(rows)}", f"energy: {energy}"]
        for r in rows:
            lines.append(f"layer {r[0]:>3}  rank {r[1]:>4}  diff {r[2]:.6f}  sigma_1 {r[3]:.6f}")
        path.with_suffix(".txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"{path}: cannot write report ({exc.strerror or exc})") from exc
    return path


def read_report(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != REPORT_COLUMNS:
            raise ShapeError(f"{path}: unexpected report columns {header}")
        rows = []
        for rec in reader:
            rows.append({"layer": int(rec[0]), "rank": int(rec[1]), "diff": float(rec[2]),
                         "sigma": [float(v) for v in rec[3:]]})
    return rows
