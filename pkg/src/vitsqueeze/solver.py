"""Accuracy-Metric maximisation over GLAD placements under a FLOPs budget.

Static attention occupies layers ``1..P``; the search places exactly ``Q``
GLAD firings in layers ``P+1..L-1`` and picks their token counts from a
candidate grid, keeping counts non-increasing.  The objective is the product
over layers of retained singular-value mass,
``AM(m) = prod_l sum_{i<=m_l} s_{l,i} / sum_{i<=n_l} s_{l,i}``.

:func:`solve_architecture` is a forward dynamic program over
``(layer, firings used, current tokens)`` that keeps, per state, the Pareto
set of partial solutions in (cost, AM, tie-break keys).  Because the states
fully determine every future cost and ratio, dropping dominated labels is
exact.  An exact minimum cost-to-go table prunes labels that can no longer
meet the budget.  :func:`solve_exhaustive` enumerates everything and serves
as the reference.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .engine import ArchitectureConfig, VitSpec
from .errors import ConfigError, DegenerateInputError, InfeasibleError
from .flops import (baseline_flops, flops_dgssa_layer, flops_dynamic_layer, flops_glad, flops_literal_layer,
                    flops_total)

GRID_LEVELS = 16


def _sigma(s) -> np.ndarray:
    return np.asarray(getattr(s, "sigma", s), dtype=np.float64)


def retention(spectrum, m: int) -> float:
    """Fraction of singular-value mass kept by the top ``m`` values."""
    sigma = _sigma(spectrum)
    total = float(sigma.sum())
    if not total > 0:
        raise DegenerateInputError("spectrum has zero total mass")
    return float(sigma[:m].sum()) / total


def accuracy_metric(m, spectra) -> float:
    if len(m) != len(spectra):
        raise ConfigError(f"{len(m)} token counts for {len(spectra)} spectra")
    am = 1.0
    for ml, s in zip(m, spectra):
        n = len(_sigma(s))
        if not 1 <= ml <= n:
            raise ConfigError(f"token count {ml} outside [1, {n}]")
        am *= retention(s, ml)
    return am


def default_grid(n0: int, levels: int = GRID_LEVELS) -> list:
    return sorted({math.ceil(n0 * k / levels) for k in range(1, levels + 1)} | {n0})


@dataclass
class SearchProblem:
    spectra: list
    p: int
    q: int
    eta: float
    d: int
    grid: list = None
    include_glad_overhead: bool = True
    paper_literal: bool = False

    def __post_init__(self):
        self.spectra = [_sigma(s) for s in self.spectra]
        L = len(self.spectra)
        if L < 2:
            raise ConfigError("a search needs at least two layers")
        n0 = len(self.spectra[0])
        if any(len(s) != n0 for s in self.spectra):
            raise ConfigError("every layer spectrum must cover the same base token count")
        if self.grid is None:
            self.grid = default_grid(n0)
        self.grid = [int(g) for g in self.grid]
        if self.grid != sorted(set(self.grid)) or not self.grid or self.grid[0] < 1 or self.grid[-1] > n0:
            raise ConfigError(f"grid must be strictly ascending within [1, {n0}], got {self.grid}")
        if not 0 <= self.p <= L - 1:
            raise ConfigError(f"P must lie in [0, {L - 1}], got {self.p}")
        if not 1 <= self.q <= L - self.p - 1:
            raise ConfigError(f"Q must lie in [1, {L - self.p - 1}], got {self.q}")
        if not self.eta > 0:
            raise ConfigError(f"eta must be positive, got {self.eta}")

    @property
    def layers(self) -> int:
        return len(self.spectra)

    @property
    def n0(self) -> int:
        return len(self.spectra[0])

    def vit_spec(self) -> VitSpec:
        return VitSpec(layers=self.layers, embed_dim=self.d, heads=1, base_tokens=self.n0)

    def to_json(self) -> dict:
        return {"spectra": [s.tolist() for s in self.spectra], "P": self.p, "Q": self.q, "eta": self.eta,
                "d": self.d, "grid": list(self.grid), "include_glad_overhead": self.include_glad_overhead,
                "paper_literal": self.paper_literal}

    @classmethod
    def from_json(cls, doc: dict, **overrides) -> "SearchProblem":
        merged = {"spectra": doc.get("spectra"), "p": doc.get("P"), "q": doc.get("Q"), "eta": doc.get("eta"),
                  "d": doc.get("d"), "grid": doc.get("grid"),
                  "include_glad_overhead": doc.get("include_glad_overhead", True),
                  "paper_literal": doc.get("paper_literal", False)}
        merged.update({k: v for k, v in overrides.items() if v is not None})
        missing = [k for k in ("spectra", "p", "q", "eta", "d") if merged[k] is None]
        if missing:
            raise ConfigError(f"search problem is missing {missing}")
        return cls(merged["spectra"], int(merged["p"]), int(merged["q"]), float(merged["eta"]), int(merged["d"]),
                   merged["grid"], bool(merged["include_glad_overhead"]), bool(merged["paper_literal"]))


@dataclass
class Solution:
    config: ArchitectureConfig
    am: float
    log_am: float
    flops: int
    baseline: int
    ratio: float
    explored: int = field(default=0, compare=False)

    def to_json(self) -> dict:
        return {"gamma": [int(g) for g in self.config.gamma], "phi": [int(f) for f in self.config.phi],
                "m": list(self.config.m), "p": self.config.p, "q": self.config.q, "eta": self.config.eta,
                "am": self.am, "log_am": self.log_am, "flops": self.flops, "baseline_flops": self.baseline,
                "ratio": self.ratio}


def within_budget(cost: int, baseline: int, eta: float) -> bool:
    return cost / baseline <= eta


def _key(am, summ, mseq, phiseq):
    # larger is better: AM, then more tokens, then larger early counts, then earlier firings
    return (am, summ, mseq, phiseq)


def _solution(problem: SearchProblem, m: tuple, firings: tuple, log_am: float | None, explored: int) -> Solution:
    spec = problem.vit_spec()
    cfg = ArchitectureConfig.from_firings(spec, problem.p, {l: m[l] for l in firings}, problem.eta)
    am = accuracy_metric(cfg.m, problem.spectra)
    if log_am is None:
        log_am = math.log(am)
    cost = flops_total(cfg, spec, problem.include_glad_overhead, problem.paper_literal)
    base = baseline_flops(spec, problem.paper_literal)
    return Solution(cfg, am, log_am, cost, base, cost / base, explored)


class _Costs:
    def __init__(self, problem: SearchProblem):
        self.d = problem.d
        self.literal = problem.paper_literal
        self.overhead = problem.include_glad_overhead

    def dynamic(self, m):
        return flops_literal_layer(m, self.d) if self.literal else flops_dynamic_layer(m, self.d)

    def static(self, m):
        return flops_literal_layer(m, self.d) if self.literal else flops_dgssa_layer(m, self.d)

    def fire(self, m_in, m_out):
        return flops_glad(m_in, m_out, self.d) if self.overhead and m_out < m_in else 0


def solve_architecture(problem: SearchProblem) -> Solution:
    """Exact maximiser of AM subject to the placement, pyramid and FLOPs constraints."""
    L, P, Q, n0 = problem.layers, problem.p, problem.q, problem.n0
    costs = _Costs(problem)
    base = baseline_flops(problem.vit_spec(), problem.paper_literal)
    free = list(range(P + 1, L))
    states = sorted(set(problem.grid) | {n0})
    ratio = [{m: retention(problem.spectra[l], m) for m in states} for l in range(L)]

    # exact minimum remaining cost from position i (into ``free``), j firings used, m tokens
    inf = math.inf
    H = [[dict.fromkeys(states, inf) for _ in range(Q + 1)] for _ in range(len(free) + 1)]
    for m in states:
        H[len(free)][Q][m] = 0
    for i in reversed(range(len(free))):
        for j in range(Q + 1):
            for m in states:
                best = costs.dynamic(m) + H[i + 1][j][m]
                if j < Q:
                    for m2 in problem.grid:
                        if m2 <= m:
                            best = min(best, costs.fire(m, m2) + costs.dynamic(m2) + H[i + 1][j + 1][m2])
                H[i][j][m] = best

    prefix_cost = costs.dynamic(n0) + P * costs.static(n0)
    am0, log0 = 1.0, 0.0
    for l in range(P + 1):
        am0 *= ratio[l][n0]
        log0 += math.log(ratio[l][n0])
    min_total = prefix_cost + H[0][0][n0]
    if min_total == inf:
        raise InfeasibleError("no placement of the GLAD firings exists", inf)
    if not within_budget(min_total, base, problem.eta):
        raise InfeasibleError(f"no architecture meets eta={problem.eta}", min_total / base)

    # label: (cost, am, log_am, sum_m, m_seq, phi_seq)
    frontier = {(0, n0): [(prefix_cost, am0, log0, (P + 1) * n0, (n0,) * (P + 1), (False,) * (P + 1))]}
    explored = 0
    for i, l in enumerate(free):
        nxt = {}
        for (j, m), labels in frontier.items():
            moves = [(j, m, costs.dynamic(m), False)]
            if j < Q:
                moves += [(j + 1, m2, costs.fire(m, m2) + costs.dynamic(m2), True)
                          for m2 in problem.grid if m2 <= m]
            for j2, m2, step, fired in moves:
                lower = H[i + 1][j2][m2]
                if lower == inf:
                    continue
                r = ratio[l][m2]
                lr = math.log(r) if r > 0 else -inf
                for cost, am, lam, summ, mseq, phiseq in labels:
                    c2 = cost + step
                    explored += 1
                    if not within_budget(c2 + lower, base, problem.eta):
                        continue
                    nxt.setdefault((j2, m2), []).append(
                        (c2, am * r, lam + lr, summ + m2, mseq + (m2,), phiseq + (fired,)))
        frontier = {s: _pareto(labels) for s, labels in nxt.items()}

    finals = [lab for (j, _), labels in frontier.items() if j == Q for lab in labels]
    if not finals:
        raise InfeasibleError(f"no architecture meets eta={problem.eta}", min_total / base)
    best = max(finals, key=lambda lab: _key(lab[1], lab[3], lab[4], lab[5]))
    firings = tuple(l for l in range(L) if best[5][l])
    sol = _solution(problem, best[4], firings, best[2], explored)
    return sol


def _dominates(a, b) -> bool:
    return (a[0] <= b[0] and a[1] >= b[1] and a[3] >= b[3] and (a[4], a[5]) >= (b[4], b[5]))


def _pareto(labels: list) -> list:
    ordered = sorted(labels, key=lambda x: (x[0], -x[1], -x[3], tuple(-v for v in x[4]),
                                            tuple(-int(f) for f in x[5])))
    kept = []
    for lab in ordered:
        if not any(_dominates(k, lab) for k in kept):
            kept.append(lab)
    return kept


def solve_exhaustive(problem: SearchProblem) -> Solution:
    """Enumerate every placement and non-increasing token assignment."""
    spec = problem.vit_spec()
    base = baseline_flops(spec, problem.paper_literal)
    desc = sorted(problem.grid, reverse=True)
    best, best_key, explored = None, None, 0
    for where in itertools.combinations(range(problem.p + 1, problem.layers), problem.q):
        for values in itertools.combinations_with_replacement(desc, problem.q):
            explored += 1
            cfg = ArchitectureConfig.from_firings(spec, problem.p, dict(zip(where, values)), problem.eta)
            cost = flops_total(cfg, spec, problem.include_glad_overhead, problem.paper_literal)
            if not within_budget(cost, base, problem.eta):
                continue
            am = accuracy_metric(cfg.m, problem.spectra)
            key = _key(am, sum(cfg.m), cfg.m, cfg.phi)
            if best_key is None or key > best_key:
                best, best_key = (cfg.m, where), key
    if best is None:
        raise InfeasibleError(f"no architecture meets eta={problem.eta}", math.nan)
    return _solution(problem, best[0], best[1], None, explored)


def load_problem(path, **overrides) -> SearchProblem:
    with open(path, encoding="utf-8") as fh:
        return SearchProblem.from_json(json.load(fh), **overrides)
