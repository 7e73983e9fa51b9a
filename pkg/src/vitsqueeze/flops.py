"""Per-layer FLOPs model for dynamic, static-attention and GLAD layers.

Counts follow the usual ViT convention (one multiply-add = one FLOP, MLP
ratio 4): a dynamic layer costs ``2n^2 d + 4nd^2`` for attention plus
``8nd^2`` for the MLP; a static-attention layer drops the query/key work and
the score matrix, leaving ``m^2 d + 2md^2 + 8md^2``.
"""

from __future__ import annotations

from .engine import ArchitectureConfig, VitSpec


def flops_dynamic_layer(n: int, d: int) -> int:
    return 2 * n * n * d + 12 * n * d * d


def flops_dgssa_layer(m: int, d: int) -> int:
    return m * m * d + 10 * m * d * d


def flops_glad(m_in: int, m_out: int, d: int) -> int:
    """Projection ``W X`` plus the elementwise norm/GeLU/re-embedding pass."""
    return m_out * m_in * d + m_out * d


def flops_literal_layer(m: int, d: int) -> int:
    """Per-layer cost as printed for the compressed total (``m^2 d + 10 m d^2``)."""
    return m * m * d + 10 * m * d * d


def flops_literal_baseline_layer(n: int, d: int) -> int:
    """Per-layer baseline cost as printed (``12nd^2 + 4nd^2``, no score term)."""
    return 16 * n * d * d


def layer_costs(config: ArchitectureConfig, spec: VitSpec, include_glad_overhead: bool = True,
                paper_literal: bool = False) -> list:
    config.validate(spec)
    d = spec.embed_dim
    costs = []
    for l in range(spec.layers):
        m = config.m[l]
        if paper_literal:
            c = flops_literal_layer(m, d)
        elif config.gamma[l]:
            c = flops_dgssa_layer(m, d)
        else:
            c = flops_dynamic_layer(m, d)
        if include_glad_overhead and config.reduces(l, spec):
            c += flops_glad(config.tokens_in(l, spec), m, d)
        costs.append(c)
    return costs


def flops_total(config: ArchitectureConfig, spec: VitSpec, include_glad_overhead: bool = True,
                paper_literal: bool = False) -> int:
    return sum(layer_costs(config, spec, include_glad_overhead, paper_literal))


def baseline_flops(spec: VitSpec, paper_literal: bool = False) -> int:
    """Cost of the uncompressed model; the literal variant uses the printed denominator."""
    if paper_literal:
        return spec.layers * flops_literal_baseline_layer(spec.base_tokens, spec.embed_dim)
    return flops_total(ArchitectureConfig.baseline(spec), spec, False)


def compression_ratio(config: ArchitectureConfig, spec: VitSpec, include_glad_overhead: bool = True,
                      paper_literal: bool = False) -> float:
    return flops_total(config, spec, include_glad_overhead, paper_literal) / baseline_flops(spec, paper_literal)
