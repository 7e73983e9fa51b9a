"""Glue between the model, analysis and solver: analyze a baseline and compress it."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .analysis import DEFAULT_ENERGY, collect_spectra, effective_rank, layer_difference_metric
from .attention import (DEFAULT_ESTIMATION_SAMPLES, MomentAccumulator, StaticAttention, accumulate_moments,
                        dgssa_estimate)
from .engine import ArchitectureConfig, VitSpec, attention_heads, build_compressed_weights, model_forward
from .errors import ConfigError
from .solver import SearchProblem, Solution, solve_architecture

log = logging.getLogger(__name__)


@dataclass
class Analysis:
    spectra: list
    ranks: list
    metrics: list


def attention_inputs(spec: VitSpec, weights: dict, tokens) -> dict:
    """Normalised block inputs (what the attention projections see) per layer, baseline model."""
    trace = model_forward(np.asarray(tokens, dtype=np.float64), ArchitectureConfig.baseline(spec), weights, spec)
    out = trace.attention_inputs
    if np.ndim(tokens) == 2:
        out = {l: x[None] for l, x in out.items()}
    return out


def estimate_static_maps(spec: VitSpec, weights: dict, tokens, layers, ridge=None,
                         share_heads: bool = False) -> dict:
    """Closed-form static attention for each listed layer, shape ``(heads, N, N)``."""
    inputs = attention_inputs(spec, weights, tokens)
    maps = {}
    for l in layers:
        x = inputs[l]
        accs = [accumulate_moments(MomentAccumulator(x.shape[1]), x, head)
                for head in attention_heads(weights, l, spec)]
        if share_heads:
            pooled = accs[0]
            for acc in accs[1:]:
                pooled = pooled.merge(acc)
            a = dgssa_estimate(pooled, ridge, layer_index=l).a_hat
            maps[l] = np.repeat(a[None], spec.heads, axis=0)
        else:
            maps[l] = np.stack([dgssa_estimate(acc, ridge, h, l).a_hat for h, acc in enumerate(accs)])
    return maps


def analyze(spec: VitSpec, weights: dict, tokens, energy: float = DEFAULT_ENERGY, ridge=None,
            threads: int = 1, estimation_samples: int = DEFAULT_ESTIMATION_SAMPLES) -> Analysis:
    tokens = np.asarray(tokens, dtype=np.float64)
    base = ArchitectureConfig.baseline(spec)
    spectra = collect_spectra(spec, weights, base, tokens, threads)
    ranks = [effective_rank(s, energy) for s in spectra]
    est = tokens[:estimation_samples]
    maps = estimate_static_maps(spec, weights, est, range(spec.layers), ridge)
    inputs = attention_inputs(spec, weights, est)
    metrics = []
    for l in range(spec.layers):
        heads = attention_heads(weights, l, spec)
        statics = [StaticAttention(maps[l][h], h, l) for h in range(spec.heads)]
        metrics.append(layer_difference_metric(inputs[l], heads, statics))
    return Analysis(spectra, ranks, metrics)


def compress(spec: VitSpec, weights: dict, tokens, p: int, q: int, eta: float, *, grid=None, ridge=None,
             seed: int = 0, glad_norm: str = "layer", share_heads: bool = False, paper_literal: bool = False,
             include_glad_overhead: bool = True, threads: int = 1,
             estimation_samples: int = DEFAULT_ESTIMATION_SAMPLES):
    """Analyze, solve for ``(gamma, phi, m)``, fit static maps and build compressed weights.

    Returns ``(config, weights, solution, problem)``.  No training happens here.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.shape[0] < 1:
        raise ConfigError("compression needs at least one data sample")
    spectra = collect_spectra(spec, weights, ArchitectureConfig.baseline(spec), tokens, threads)
    problem = SearchProblem([s.sigma for s in spectra], p, q, eta, spec.embed_dim, grid,
                            include_glad_overhead, paper_literal)
    solution: Solution = solve_architecture(problem)
    cfg = solution.config
    config = ArchitectureConfig(cfg.gamma, cfg.phi, cfg.m, cfg.p, cfg.q, eta, glad_norm).validate(spec)
    log.info("solution m=%s ratio=%.4f am=%.6f", config.m, solution.ratio, solution.am)
    static = [l for l in range(spec.layers) if config.gamma[l]]
    maps = estimate_static_maps(spec, weights, tokens[:estimation_samples], static, ridge, share_heads)
    new = build_compressed_weights(spec, weights, config, maps, np.random.default_rng(seed))
    return config, new, solution, problem
