"""One test per acceptance criterion; each records a PASS/FAIL line for the run summary."""

import contextlib
import csv
import json
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import VERDICTS
from oracles import gradcheck, plain_vit_logits
from vitsqueeze import linalg
from vitsqueeze.analysis import difference_metric, effective_rank
from vitsqueeze.attention import (AttentionHead, MomentAccumulator, StaticAttention, accumulate_moments,
                                  dgssa_estimate, dgssa_objective)
from vitsqueeze.checker import check_solution
from vitsqueeze.cli import main
from vitsqueeze.data import load_model, make_dataset
from vitsqueeze.engine import (ArchitectureConfig, Teacher, VitSpec, build_compressed_weights, init_weights,
                               loss_and_grad, model_forward)
from vitsqueeze.errors import InfeasibleError
from vitsqueeze.flops import baseline_flops, compression_ratio, flops_total
from vitsqueeze.glad import glad_backward, glad_forward, make_glad_layer, token_distill_loss
from vitsqueeze.pipeline import estimate_static_maps
from vitsqueeze.solver import SearchProblem, accuracy_metric, solve_architecture, solve_exhaustive
from vitsqueeze.train import train_toy

DEIT_S = VitSpec(layers=12, embed_dim=384, heads=6, base_tokens=197, num_classes=1000)


@contextlib.contextmanager
def criterion(number, title):
    start = time.perf_counter()
    notes = []
    try:
        yield notes
    except BaseException as exc:
        VERDICTS[number] = f"FAIL  {number:>2}. {title}: {type(exc).__name__}: {exc}".splitlines()[0]
        print(VERDICTS[number])
        raise
    detail = f" ({'; '.join(notes)})" if notes else ""
    VERDICTS[number] = f"PASS  {number:>2}. {title}{detail} [{time.perf_counter() - start:.1f}s]"
    print(VERDICTS[number])


def test_01_baseline_flops():
    with criterion(1, "baseline FLOPs") as notes:
        total = flops_total(ArchitectureConfig.baseline(DEIT_S), DEIT_S)
        assert total == baseline_flops(DEIT_S) == 4_540_695_552
        assert abs(total / 4.6e9 - 1) <= 0.03
        notes.append(f"{total / 1e9:.3f} GFLOPs vs 4.6G")


def test_02_compressed_flops():
    with criterion(2, "compressed FLOPs") as notes:
        cfg = ArchitectureConfig.from_firings(DEIT_S, 2, {3: 127, 5: 77, 7: 35}, 0.5)
        assert cfg.m == (197,) * 3 + (127,) * 2 + (77,) * 2 + (35,) * 5
        total = flops_total(cfg, DEIT_S, include_glad_overhead=True)
        ratio = compression_ratio(cfg, DEIT_S)
        assert abs(total / 2.1e9 - 1) <= 0.05
        assert abs(total / 1e9 - 2.07) < 0.005
        assert ratio <= 0.5 and abs(ratio - 0.456) < 1e-3
        notes.append(f"{total / 1e9:.3f} GFLOPs, ratio {ratio:.4f}")


def estimation_problem(rng, n=17, d=64, d_h=16, samples=64):
    head = AttentionHead(*(rng.normal(0, 1 / np.sqrt(d), size=(d, d_h)) for _ in range(3)))
    xs = rng.normal(size=(samples, n, d))
    return head, xs


def descend(head, xs, iterations=200_000, tol=1e-14):
    """Plain gradient descent on the sample objective, step 1/lambda_max of its Hessian."""
    a = linalg.row_softmax((xs @ head.w_q) @ np.swapaxes(xs @ head.w_k, -1, -2), 1 / np.sqrt(head.d_h))
    z = xs @ head.w_v
    g = np.einsum("sik,sjk->sij", z, z)
    gram, cross = g.mean(axis=0), np.einsum("sij,sjk->ik", a, g) / len(xs)
    step = 1.0 / (2.0 * np.linalg.eigvalsh(gram)[-1])
    x = linalg.row_softmax(np.random.default_rng(0).normal(size=gram.shape))
    for it in range(iterations):
        grad = 2.0 * (x @ gram - cross)
        x = x - step * grad
        if np.max(np.abs(grad)) < tol:
            break
    return StaticAttention(x), it


def test_03_closed_form_optimality():
    with criterion(3, "closed-form optimality") as notes:
        rng = np.random.default_rng(3)
        worst_gap, worst_rel, iters = 0.0, 0.0, 0
        for _ in range(20):
            head, xs = estimation_problem(rng)
            acc = accumulate_moments(MomentAccumulator(17), xs, head)
            est = dgssa_estimate(acc, ridge=0.0)
            best = dgssa_objective(est, xs, head)
            for _ in range(100):
                delta = rng.normal(size=est.a_hat.shape)
                delta *= 1e-3 / np.linalg.norm(delta)
                other = dgssa_objective(StaticAttention(est.a_hat + delta), xs, head)
                worst_gap = min(worst_gap, other - best)
                assert other >= best - 1e-12
            gd, n_it = descend(head, xs)
            iters = max(iters, n_it)
            rel = abs(dgssa_objective(gd, xs, head) - best) / best
            worst_rel = max(worst_rel, rel)
            assert rel <= 1e-6, rel
        notes.append(f"GD rel gap {worst_rel:.1e}, max {iters} steps")


def test_04_static_recovery():
    with criterion(4, "static recovery") as notes:
        rng = np.random.default_rng(4)
        worst_obj = worst_diff = 0.0
        for trial in range(10):
            d, d_h, n = 16, 8, 9
            zero = np.zeros((d, d_h))
            # W_q = W_k = 0 gives the uniform map for every sample
            head = AttentionHead(zero, zero, rng.normal(size=(d, d_h)))
            xs = rng.normal(size=(40, n, d))
            est = dgssa_estimate(accumulate_moments(MomentAccumulator(n), xs, head), ridge=0.0)
            assert np.max(np.abs(est.a_hat - 1.0 / n)) < 1e-8
            obj = dgssa_objective(est, xs, head)
            diff = difference_metric(xs, head, est)
            # a shared non-uniform map fed straight into the moments
            shared = linalg.row_softmax(rng.normal(0, 2, size=(n, n)))
            z = xs @ head.w_v
            g = np.einsum("sik,sjk->sij", z, z)
            acc = MomentAccumulator(n, np.einsum("ij,sjk->ik", shared, g), g.sum(axis=0), len(xs))
            fit = dgssa_estimate(acc, ridge=0.0)
            resid = np.mean(np.sum(((fit.a_hat - shared) @ z) ** 2, axis=(-2, -1)))
            worst_obj = max(worst_obj, obj, resid)
            worst_diff = max(worst_diff, diff)
            assert obj < 1e-8 and resid < 1e-8 and diff < 1e-6
        notes.append(f"objective <= {worst_obj:.1e}, diff <= {worst_diff:.1e}")


def compressed_instance(seed, norm):
    spec = VitSpec(layers=4, embed_dim=8, heads=2, base_tokens=7, num_classes=3)
    rng = np.random.default_rng(seed)
    teacher_w = init_weights(spec, rng)
    for name in teacher_w:
        if name.endswith((".g", ".b", "bo", "b1", "b2")):
            teacher_w[name] = teacher_w[name] + rng.normal(0, 0.3, size=teacher_w[name].shape)
    cfg = ArchitectureConfig.from_firings(spec, 1, {2: 5, 3: 3}, glad_norm=norm)
    w = build_compressed_weights(spec, teacher_w, cfg, {1: rng.normal(0.15, 0.05, size=(2, 7, 7))}, rng)
    for name in w:
        w[name] = w[name] + rng.normal(0, 0.05, size=w[name].shape)
    return spec, cfg, w, Teacher(spec, teacher_w), rng.normal(size=(6, 6, 8)), rng.integers(0, 3, size=6)


def test_05_gradient_checks():
    with criterion(5, "gradient checks") as notes:
        rng = np.random.default_rng(5)
        worst = {"glad": 0.0, "distill": 0.0, "total_loss": 0.0}
        for trial in range(20):
            norm = ("layer", "batch")[trial % 2]
            training = norm == "batch"
            layer = make_glad_layer(6, 4, 5, rng, norm=norm)
            x = rng.normal(size=(5, 6, 5)) if training else rng.normal(size=(6, 5))
            up = rng.normal(size=x.shape[:-2] + (4, 5))
            gw, gp, gx = glad_backward(layer, x, up, training)
            err, _ = gradcheck(lambda: float(np.sum(up * glad_forward(layer, x, training))),
                               {"w": layer.w, "pos": layer.pos, "x": x}, {"w": gw, "pos": gp, "x": gx}, rng)
            worst["glad"] = max(worst["glad"], err)

            a, b = rng.normal(size=(3, 4, 5)), rng.normal(size=(3, 4, 5))
            _, ga = token_distill_loss(a, b)
            err, _ = gradcheck(lambda: token_distill_loss(a, b)[0], {"a": a}, {"a": ga}, rng)
            worst["distill"] = max(worst["distill"], err)

            spec, cfg, w, teacher, tokens, labels = compressed_instance(500 + trial, norm)
            _, _, grads = loss_and_grad(tokens, labels, cfg, w, spec, teacher, 0.7)
            err, where = gradcheck(
                lambda: loss_and_grad(tokens, labels, cfg, w, spec, teacher, 0.7, need_grad=False)[0],
                {k: v for k, v in w.items() if k in grads}, grads, rng, per_tensor=2)
            worst["total_loss"] = max(worst["total_loss"], err)
            assert max(worst.values()) < 1e-6, (worst, where)
        notes.append(", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


def random_problem(rng):
    L = int(rng.integers(2, 7))
    n0 = int(rng.integers(3, 25))
    spectra = [np.sort(rng.gamma(0.5, size=n0))[::-1] for _ in range(L)]
    p = int(rng.integers(0, L - 1))
    q = int(rng.integers(1, min(3, L - p - 1) + 1))
    grid = sorted(set(int(v) for v in rng.integers(1, n0 + 1, size=int(rng.integers(1, 7)))))
    return SearchProblem(spectra, p, q, float(rng.uniform(0.35, 1.0)), int(rng.integers(2, 64)), grid)


def test_06_dp_correctness():
    with criterion(6, "DP correctness") as notes:
        rng = np.random.default_rng(6)
        solved = infeasible = 0
        while solved < 200:
            prob = random_problem(rng)
            try:
                ref = solve_exhaustive(prob)
            except InfeasibleError:
                try:
                    solve_architecture(prob)
                except InfeasibleError:
                    infeasible += 1
                    continue
                raise AssertionError("DP found a config the exhaustive search calls infeasible")
            sol = solve_architecture(prob)
            assert sol.am == ref.am, (sol.am, ref.am)
            assert check_solution(sol, prob) == []
            solved += 1
        notes.append(f"200 solved, {infeasible} infeasible agreed")


@given(st.integers(0, 2**31))
@settings(max_examples=100, deadline=None)
def _am_monotone_case(seed):
    rng = np.random.default_rng(seed)
    L, n = int(rng.integers(1, 6)), int(rng.integers(2, 20))
    spectra = [np.sort(rng.random(n))[::-1] for _ in range(L)]
    m = [int(v) for v in rng.integers(1, n + 1, size=L)]
    am = accuracy_metric(m, spectra)
    assert 0 < am <= 1
    for l in range(L):
        if m[l] < n:
            assert accuracy_metric(m[:l] + [m[l] + 1] + m[l + 1:], spectra) >= am


def test_07_am_properties():
    with criterion(7, "AM properties"):
        rng = np.random.default_rng(7)
        for _ in range(20):
            n = int(rng.integers(1, 30))
            spectra = [rng.random(n) for _ in range(3)]
            assert accuracy_metric([n] * 3, spectra) == 1.0
        _am_monotone_case()
        assert abs(accuracy_metric([2], [[3.0, 2.0, 1.0]]) - 5 / 6) < 1e-15


def test_08_vanilla_forward_oracle():
    with criterion(8, "vanilla forward oracle") as notes:
        spec = VitSpec(layers=3, embed_dim=8, heads=2, base_tokens=6, num_classes=4)
        rng = np.random.default_rng(8)
        w = init_weights(spec, rng)
        for name in w:
            w[name] = w[name] + rng.normal(0, 0.2, size=w[name].shape)
        base = ArchitectureConfig.baseline(spec)
        worst = 0.0
        for _ in range(10):
            x = rng.normal(size=(spec.patch_tokens, spec.embed_dim))
            worst = max(worst, float(np.max(np.abs(model_forward(x, base, w, spec).logits
                                                   - plain_vit_logits(x, w, spec.layers, spec.heads)))))
        assert worst < 1e-10
        notes.append(f"max deviation {worst:.1e}")


def test_09_rank_analysis():
    with criterion(9, "rank analysis"):
        n = 12
        uniform = np.linalg.svd(np.full((n, n), 1.0 / n), compute_uv=False)
        assert effective_rank(uniform, 0.99) == 1
        assert effective_rank([3.0, 2.0, 1.0], 0.99) == 3
        rng = np.random.default_rng(9)
        for _ in range(200):
            sigma = np.sort(rng.gamma(0.5, size=int(rng.integers(1, 40))))[::-1]
            ranks = [effective_rank(sigma, e) for e in np.linspace(0.01, 1.0, 25)]
            assert ranks == sorted(ranks) and ranks[-1] <= len(sigma)


@pytest.mark.slow
def test_10_end_to_end(tmp_path):
    with criterion(10, "end-to-end smoke") as notes:
        data, base, comp, ft = (str(tmp_path / name) for name in ("data.vsq", "base.vsq", "comp.vsq", "ft.vsq"))
        assert main(["gen-data", "--out", data, "--seed", "0"]) == 0
        assert main(["train", "--data", data, "--out", base, "--epochs", "20"]) == 0
        assert main(["analyze", "--model", base, "--data", data, "--out", str(tmp_path / "report.csv")]) == 0
        assert main(["compress", "--model", base, "--data", data, "--out", comp,
                     "--p", "2", "--q", "2", "--eta", "0.6"]) == 0
        assert main(["finetune", "--model", comp, "--teacher", base, "--data", data, "--out", ft,
                     "--epochs", "10"]) == 0
        with open(ft + ".loss.csv") as fh:
            losses = [float(row["loss"]) for row in csv.DictReader(fh)]
        assert len(losses) == 11 and losses[-1] < losses[0], losses
        spec, cfg, _, _ = load_model(ft)
        ratio = flops_total(cfg, spec) / baseline_flops(spec)
        assert ratio <= 0.6
        assert main(["verify", "--model", ft]) == 0
        solution = json.loads((tmp_path / "comp.vsq.solution.json").read_text())
        assert list(cfg.m) == solution["m"]
        notes.append(f"loss {losses[0]:.2f} -> {losses[-1]:.2f}, ratio {ratio:.3f}, m {list(cfg.m)}")


def test_11_dgssa_init_soft_check():
    """Informational: DGSSA-initialised vs randomly initialised static attention after one epoch."""
    with criterion(11, "not reproducible: accuracy, throughput, ImageNet optimality") as notes:
        spec = VitSpec(layers=4, embed_dim=16, heads=2, base_tokens=9, num_classes=3)
        data = make_dataset(spec, 256, seed=11)
        base = train_toy(spec, ArchitectureConfig.baseline(spec), init_weights(spec, np.random.default_rng(11)),
                         data, 10, 0.05).weights
        cfg = ArchitectureConfig.from_firings(spec, 2, {})
        layers = [l for l in range(spec.layers) if cfg.gamma[l]]
        dgssa = estimate_static_maps(spec, base, data.tokens, layers)
        rng = np.random.default_rng(12)
        random_maps = {l: linalg.row_softmax(rng.normal(0, 0.02, size=(spec.heads, 9, 9))) for l in layers}
        losses = {}
        for name, maps in (("dgssa", dgssa), ("random", random_maps)):
            w = build_compressed_weights(spec, base, cfg, maps, np.random.default_rng(13))
            losses[name] = train_toy(spec, cfg, w, data, 1, 0.002, seed=14).curve[1]
        outcome = "holds" if losses["dgssa"] <= losses["random"] else "does not hold"
        notes.append(f"soft check {outcome}: epoch-1 loss dgssa {losses['dgssa']:.4f} "
                     f"vs random {losses['random']:.4f}, non-blocking")
