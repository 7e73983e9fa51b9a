"""Post-hoc validation of an architecture, written without reusing the solver or FLOPs code.

Every rule is re-derived from raw ``gamma/phi/m`` lists so a bug in the
shared helpers cannot hide itself.  :func:`check_config` returns a list of
human-readable violations; an empty list means the config is acceptable.
"""

from __future__ import annotations


def _cost(raw_gamma, raw_m, n0: int, d: int, raw_phi, overhead: bool, literal: bool) -> int:
    total, prev = 0, n0
    for static, fired, m in zip(raw_gamma, raw_phi, raw_m):
        if literal:
            total += m * m * d + 10 * m * d * d
        elif static:
            total += m * m * d + 2 * m * d * d + 8 * m * d * d
        else:
            total += 2 * m * m * d + 4 * m * d * d + 8 * m * d * d
        if overhead and fired and m < prev:
            total += m * prev * d + m * d
        prev = m
    return total


def reference_flops(gamma, phi, m, n0: int, d: int, include_glad_overhead: bool = True,
                    paper_literal: bool = False) -> int:
    return _cost(gamma, m, n0, d, phi, include_glad_overhead, paper_literal)


def reference_baseline(layers: int, n0: int, d: int, paper_literal: bool = False) -> int:
    if paper_literal:
        return layers * 16 * n0 * d * d
    return layers * (2 * n0 * n0 * d + 12 * n0 * d * d)


def check_config(gamma, phi, m, *, p: int, q: int, eta: float, n0: int, d: int, grid=None,
                 include_glad_overhead: bool = True, paper_literal: bool = False) -> list:
    gamma = [bool(g) for g in gamma]
    phi = [bool(f) for f in phi]
    m = [int(v) for v in m]
    L = len(gamma)
    problems = []
    if len(phi) != L or len(m) != L:
        return [f"length mismatch: gamma={L}, phi={len(phi)}, m={len(m)}"]
    if not 0 <= p <= L - 1:
        problems.append(f"P={p} outside [0, {L - 1}]")
    if sum(gamma) != p:
        problems.append(f"{sum(gamma)} static layers, expected P={p}")
    if [l for l in range(L) if gamma[l]] != list(range(1, p + 1)):
        problems.append("static layers are not exactly 1..P")
    fired = [l for l in range(L) if phi[l]]
    if len(fired) != q:
        problems.append(f"{len(fired)} GLAD firings, expected Q={q}")
    if any(l <= p for l in fired):
        problems.append("GLAD fires at or before layer P")
    prev = n0
    for l in range(L):
        if m[l] < 1:
            problems.append(f"m[{l}]={m[l]} below 1")
        if m[l] > prev:
            problems.append(f"m[{l}]={m[l]} exceeds previous count {prev}")
        if not phi[l] and m[l] != prev:
            problems.append(f"m changes at layer {l} without a firing")
        if grid is not None and phi[l] and m[l] not in set(grid):
            problems.append(f"m[{l}]={m[l]} not in the candidate grid")
        prev = m[l]
    if not problems:
        cost = reference_flops(gamma, phi, m, n0, d, include_glad_overhead, paper_literal)
        base = reference_baseline(L, n0, d, paper_literal)
        if cost / base > eta:
            problems.append(f"FLOPs ratio {cost / base:.6f} exceeds eta={eta}")
    return problems


def check_solution(solution, problem) -> list:
    """Validate a solver result against the problem it answers."""
    cfg = solution.config
    return check_config(cfg.gamma, cfg.phi, cfg.m, p=problem.p, q=problem.q, eta=problem.eta, n0=problem.n0,
                        d=problem.d, grid=problem.grid, include_glad_overhead=problem.include_glad_overhead,
                        paper_literal=problem.paper_literal)
