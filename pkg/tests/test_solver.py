import json
import math
from fractions import Fraction

import numpy as np
import pytest

from vitsqueeze.checker import check_config, check_solution
from vitsqueeze.engine import ArchitectureConfig
from vitsqueeze.errors import ConfigError, DegenerateInputError, InfeasibleError
from vitsqueeze.flops import compression_ratio
from vitsqueeze.solver import (SearchProblem, accuracy_metric, default_grid, load_problem, solve_architecture,
                               solve_exhaustive)


def random_problem(rng, max_layers=6, max_grid=6, max_q=3):
    L = int(rng.integers(2, max_layers + 1))
    n0 = int(rng.integers(3, 25))
    spectra = [np.sort(rng.gamma(0.5, size=n0))[::-1] for _ in range(L)]
    p = int(rng.integers(0, L - 1))
    q = int(rng.integers(1, min(max_q, L - p - 1) + 1))
    grid = sorted(set(int(v) for v in rng.integers(1, n0 + 1, size=int(rng.integers(1, max_grid + 1)))))
    eta = float(rng.uniform(0.35, 1.0))
    return SearchProblem(spectra, p, q, eta, int(rng.integers(2, 64)), grid)


def test_am_examples():
    assert accuracy_metric([3], [[3.0, 2.0, 1.0]]) == 1.0
    assert abs(accuracy_metric([2], [[3.0, 2.0, 1.0]]) - 5 / 6) < 1e-15
    assert Fraction(accuracy_metric([2], [[3.0, 2.0, 1.0]])).limit_denominator(100) == Fraction(5, 6)
    r1, r2 = 4 / 6, 3 / 5
    assert accuracy_metric([1, 2], [[4.0, 1.0, 1.0], [2.0, 1.0, 2.0]]) == r1 * r2
    with pytest.raises(DegenerateInputError):
        accuracy_metric([1], [[0.0, 0.0]])
    with pytest.raises(ConfigError):
        accuracy_metric([4], [[1.0, 1.0]])


def test_am_bounds_and_monotone():
    rng = np.random.default_rng(0)
    for _ in range(100):
        L, n = int(rng.integers(1, 6)), int(rng.integers(2, 15))
        spectra = [np.sort(rng.random(n))[::-1] for _ in range(L)]
        m = [int(v) for v in rng.integers(1, n + 1, size=L)]
        am = accuracy_metric(m, spectra)
        assert 0 < am <= 1
        for l in range(L):
            if m[l] < n:
                bigger = list(m)
                bigger[l] += 1
                assert accuracy_metric(bigger, spectra) >= am


def test_default_grid():
    g = default_grid(17)
    assert g == sorted(set(g)) and g[-1] == 17 and g[0] == 2
    assert len(default_grid(197)) == 16 and 197 in default_grid(197)


def test_problem_validation():
    s = [[3.0, 2.0, 1.0]] * 4
    SearchProblem(s, 0, 3, 1.0, 4)
    for kwargs in ({"p": 4, "q": 1}, {"p": 2, "q": 2}, {"p": 1, "q": 0}):
        with pytest.raises(ConfigError):
            SearchProblem(s, kwargs["p"], kwargs["q"], 1.0, 4)
    with pytest.raises(ConfigError):
        SearchProblem(s, 0, 1, 1.0, 4, grid=[2, 1])
    with pytest.raises(ConfigError):
        SearchProblem(s, 0, 1, 1.0, 4, grid=[1, 4])
    with pytest.raises(ConfigError):
        SearchProblem([[1.0, 1.0], [1.0]], 0, 1, 1.0, 4)


def test_unconstrained_single_candidate():
    spectra = [np.arange(9, 0, -1.0)] * 5
    sol = solve_architecture(SearchProblem(spectra, 1, 1, 1.0, 8, grid=[9]))
    assert sol.config.m == (9,) * 5 and sol.am == 1.0 and sum(sol.config.phi) == 1


def test_dp_matches_exhaustive():
    rng = np.random.default_rng(1)
    checked = 0
    while checked < 200:
        prob = random_problem(rng)
        try:
            ref = solve_exhaustive(prob)
        except InfeasibleError:
            with pytest.raises(InfeasibleError):
                solve_architecture(prob)
            continue
        sol = solve_architecture(prob)
        assert sol.am == ref.am
        assert sol.config.m == ref.config.m and sol.config.phi == ref.config.phi
        assert check_solution(sol, prob) == []
        assert abs(sol.log_am - math.log(accuracy_metric(sol.config.m, prob.spectra))) < 1e-12
        checked += 1


def test_dp_literal_and_no_overhead_modes():
    rng = np.random.default_rng(2)
    for _ in range(60):
        prob = random_problem(rng)
        prob.paper_literal = bool(rng.integers(0, 2))
        prob.include_glad_overhead = bool(rng.integers(0, 2))
        try:
            ref = solve_exhaustive(prob)
        except InfeasibleError:
            continue
        assert solve_architecture(prob).am == ref.am


def test_tie_break_prefers_more_tokens():
    # flat spectra past the first value make every m >= 1 equally good
    spectra = [np.array([1.0, 0.0, 0.0, 0.0, 0.0, 0.0])] * 4
    sol = solve_architecture(SearchProblem(spectra, 0, 2, 1.0, 4, grid=[1, 3, 6]))
    assert sol.am == 1.0
    assert sol.config.m == (6, 6, 6, 6)


def test_infeasible_reports_min_ratio():
    spectra = [np.arange(10, 0, -1.0)] * 4
    with pytest.raises(InfeasibleError) as info:
        solve_architecture(SearchProblem(spectra, 1, 1, 0.1, 16, grid=[5, 10]))
    prob = SearchProblem(spectra, 1, 1, 1.0, 16, grid=[5])
    cheapest = ArchitectureConfig.from_firings(prob.vit_spec(), 1, {2: 5})
    assert abs(info.value.min_ratio - compression_ratio(cheapest, prob.vit_spec())) < 1e-12
    assert info.value.min_ratio > 0.1


def test_deit_surrogate_table_shape():
    rng = np.random.default_rng(3)
    n0 = 197
    spectra = [np.sort(rng.gamma(0.3 + 0.1 * l, size=n0))[::-1] for l in range(12)]
    grid = sorted(set(default_grid(n0)) | {127, 77, 35})
    prob = SearchProblem(spectra, 2, 3, 0.5, 384, grid)
    sol = solve_architecture(prob)
    table = ArchitectureConfig.from_firings(prob.vit_spec(), 2, {3: 127, 5: 77, 7: 35}, 0.5)
    assert check_config(table.gamma, table.phi, table.m, p=2, q=3, eta=0.5, n0=n0, d=384, grid=grid) == []
    assert compression_ratio(table, prob.vit_spec()) <= 0.5
    assert accuracy_metric(table.m, spectra) <= sol.am
    assert check_solution(sol, prob) == []


def test_checker_catches_violations():
    ok = dict(p=1, q=1, eta=1.0, n0=8, d=4)
    assert check_config([0, 1, 0, 0], [0, 0, 1, 0], [8, 8, 5, 5], **ok) == []
    assert check_config([0, 1, 0, 0], [0, 0, 1, 0], [8, 8, 5, 6], **ok)
    assert check_config([1, 0, 0, 0], [0, 0, 1, 0], [8, 8, 5, 5], **ok)
    assert check_config([0, 1, 0, 0], [0, 1, 0, 0], [8, 5, 5, 5], **ok)
    assert check_config([0, 1, 0, 0], [0, 0, 1, 1], [8, 8, 5, 4], **ok)
    assert check_config([0, 1, 0, 0], [0, 0, 1, 0], [8, 8, 5, 5], **{**ok, "eta": 0.2})
    assert check_config([0, 1, 0, 0], [0, 0, 1, 0], [8, 8, 5, 5], grid=[4, 8], **ok)


def test_json_round_trip(tmp_path):
    prob = SearchProblem([[3.0, 2.0, 1.0]] * 3, 0, 1, 0.9, 4, [1, 2, 3])
    path = tmp_path / "p.json"
    path.write_text(json.dumps(prob.to_json()))
    again = load_problem(path)
    assert again.to_json() == prob.to_json()
    assert load_problem(path, eta=0.5).eta == 0.5
    with pytest.raises(ConfigError):
        SearchProblem.from_json({"spectra": [[1.0, 1.0]] * 2, "P": 0})
    doc = solve_architecture(again).to_json()
    for key in ("gamma", "phi", "m", "am", "flops", "ratio"):
        assert key in doc
