"""``vitsqueeze`` command-line entry point.

Exit status is 0 on success, 1 on runtime or numeric failures and 2 on
usage or validation errors.  Option values resolve as command-line flag,
then ``--config`` JSON (a flat object, optionally with per-command
sub-objects keyed by command name), then built-in default.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checker
from .analysis import DEFAULT_ENERGY, emit_report
from .data import load_dataset, load_model, make_dataset, save_dataset, save_model
from .engine import ArchitectureConfig, Teacher, VitSpec, init_weights
from .errors import ConfigError, VitSqueezeError
from .flops import baseline_flops, flops_total
from .pipeline import analyze, compress
from .solver import load_problem, solve_architecture
from .train import DEFAULT_LAMBDA_GLAD, train_toy

log = logging.getLogger("vitsqueeze")

LOG_ENV = "VITSQUEEZE_LOG"
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}

DEFAULTS = {
    "spec": "l=8,d=64,h=4,n=17,c=4",
    "samples": 512,
    "seed": 0,
    "threads": 1,
    "epochs": {"train": 20, "finetune": 10},
    "lr": {"train": 0.05, "finetune": 0.002},
    "batch_size": 32,
    "energy": DEFAULT_ENERGY,
    "ridge": None,
    "p": 2,
    "q": 2,
    "eta": 0.6,
    "lambda_glad": DEFAULT_LAMBDA_GLAD,
    "glad_norm": "layer",
    "grid": None,
    "paper_literal_flops": False,
    "no_glad_overhead": False,
    "share_heads": False,
}


class UsageError(VitSqueezeError, ValueError):
    pass


def _setup_logging() -> None:
    name = os.environ.get(LOG_ENV, "warn").strip().lower()
    level = LOG_LEVELS.get(name, logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.getLogger().setLevel(level)


class _Options:
    """Looks up an option through flags, then the config file, then defaults."""

    def __init__(self, args, command: str):
        self.args = args
        self.command = command
        self.file = {}
        if getattr(args, "config", None):
            try:
                with open(args.config, encoding="utf-8") as fh:
                    self.file = json.load(fh)
            except OSError as exc:
                raise OSError(f"{args.config}: {exc.strerror or exc}") from exc
            except json.JSONDecodeError as exc:
                raise UsageError(f"{args.config}: invalid JSON ({exc})") from None
            if not isinstance(self.file, dict):
                raise UsageError(f"{args.config}: config must be a JSON object")

    def __getattr__(self, key):
        flag = getattr(self.args, key, None)
        if flag is not None:
            return flag
        section = self.file.get(self.command)
        if isinstance(section, dict) and key in section:
            return section[key]
        if key in self.file:
            return self.file[key]
        value = DEFAULTS.get(key)
        if isinstance(value, dict):
            value = value.get(self.command)
        return value

    def require(self, key):
        value = getattr(self, key)
        if value is None:
            raise UsageError(f"{self.command}: --{key.replace('_', '-')} is required")
        return value


def _positive_int(value, name):
    try:
        v = int(value)
    except (TypeError, ValueError):
        raise UsageError(f"{name} must be an integer, got {value!r}") from None
    if v < 1:
        raise UsageError(f"{name} must be >= 1, got {v}")
    return v


def _grid(value):
    if value is None:
        return None
    if isinstance(value, str):
        try:
            value = [int(v) for v in value.split(",") if v.strip()]
        except ValueError:
            raise UsageError(f"grid must be comma-separated integers, got {value!r}") from None
    return sorted({int(v) for v in value})


def _write_json(path, doc) -> None:
    try:
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"{path}: cannot write ({exc.strerror or exc})") from exc


def _write_curve(path, result) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            out = csv.writer(fh)
            out.writerow(["epoch", "loss", "task", "glad"])
            for e, row in enumerate(zip(result.curve, result.task_curve, result.glad_curve)):
                out.writerow([e] + ["%.17g" % v for v in row])
    except OSError as exc:
        raise OSError(f"{path}: cannot write ({exc.strerror or exc})") from exc


def _check_shapes(spec: VitSpec, data_spec: VitSpec, model_path, data_path) -> None:
    if (spec.embed_dim, spec.base_tokens) != (data_spec.embed_dim, data_spec.base_tokens) \
            or spec.num_classes != data_spec.num_classes:
        raise ConfigError(f"model {model_path} ({spec}) does not fit dataset {data_path} ({data_spec})")


def _emit(doc) -> None:
    print(json.dumps(doc, sort_keys=True))


# -- commands ----------------------------------------------------------------

def cmd_gen_data(o: _Options) -> int:
    spec = VitSpec.parse(o.spec)
    samples = int(o.samples)
    if samples < 0:
        raise UsageError(f"--samples must be >= 0, got {samples}")
    data = make_dataset(spec, samples, int(o.seed))
    save_dataset(o.require("out"), data, spec, int(o.seed))
    log.info("wrote %d samples to %s", samples, o.out)
    return 0


def _train_common(o: _Options, spec, config, weights, data, teacher):
    epochs = int(o.epochs)
    result = train_toy(spec, config, weights, data, epochs, float(o.lr), teacher, float(o.lambda_glad),
                       _positive_int(o.batch_size, "--batch-size"), int(o.seed))
    out = o.require("out")
    save_model(out, spec, config, result.weights)
    _write_curve(o.loss_csv or str(out) + ".loss.csv", result)
    if result.curve:
        _emit({"epochs": epochs, "initial_loss": result.curve[0], "final_loss": result.curve[-1]})
    return 0


def cmd_train(o: _Options) -> int:
    data, spec = load_dataset(o.require("data"))
    weights = init_weights(spec, np.random.default_rng(int(o.seed)))
    return _train_common(o, spec, ArchitectureConfig.baseline(spec), weights, data, None)


def cmd_finetune(o: _Options) -> int:
    spec, config, weights, _ = load_model(o.require("model"))
    data, data_spec = load_dataset(o.require("data"))
    _check_shapes(spec, data_spec, o.model, o.data)
    teacher = None
    if o.teacher:
        t_spec, t_config, t_weights, _ = load_model(o.teacher)
        if t_spec != spec or any(t_config.gamma) or any(t_config.phi):
            raise ConfigError(f"teacher {o.teacher} must be an uncompressed model with spec {spec}")
        teacher = Teacher(t_spec, t_weights)
    elif any(config.reduces(l, spec) for l in range(spec.layers)):
        raise UsageError("finetune: the model aggregates tokens, so --teacher is required")
    return _train_common(o, spec, config, weights, data, teacher)


def cmd_analyze(o: _Options) -> int:
    spec, config, weights, _ = load_model(o.require("model"))
    data, data_spec = load_dataset(o.require("data"))
    _check_shapes(spec, data_spec, o.model, o.data)
    if any(config.gamma) or any(config.phi):
        raise ConfigError("analyze expects an uncompressed model")
    if len(data) == 0:
        raise ConfigError(f"{o.data}: dataset is empty")
    energy = float(o.energy)
    result = analyze(spec, weights, data.tokens, energy, o.ridge, _positive_int(o.threads, "--threads"))
    out = o.require("out")
    emit_report(result.spectra, result.metrics, out, energy, result.ranks)
    problem = {"spectra": [s.sigma.tolist() for s in result.spectra], "P": int(o.p), "Q": int(o.q),
               "eta": float(o.eta), "d": spec.embed_dim, "grid": _grid(o.grid),
               "sample_count": len(data)}
    _write_json(o.spectra_out or str(Path(out).with_suffix(".spectra.json")), problem)
    _emit({"ranks": result.ranks, "diff": result.metrics})
    return 0


def cmd_solve(o: _Options) -> int:
    problem = load_problem(o.require("problem"), p=o.args.p, q=o.args.q, eta=o.args.eta,
                           grid=_grid(o.args.grid), paper_literal=o.args.paper_literal_flops,
                           include_glad_overhead=False if o.args.no_glad_overhead else None)
    solution = solve_architecture(problem)
    doc = solution.to_json()
    if o.out:
        _write_json(o.out, doc)
    _emit(doc)
    return 0


def cmd_compress(o: _Options) -> int:
    spec, config, weights, _ = load_model(o.require("model"))
    data, data_spec = load_dataset(o.require("data"))
    _check_shapes(spec, data_spec, o.model, o.data)
    if any(config.gamma) or any(config.phi):
        raise ConfigError("compress expects an uncompressed model")
    new_config, new_weights, solution, problem = compress(
        spec, weights, data.tokens, int(o.p), int(o.q), float(o.eta), grid=_grid(o.grid), ridge=o.ridge,
        seed=int(o.seed), glad_norm=o.glad_norm, share_heads=bool(o.share_heads),
        paper_literal=bool(o.paper_literal_flops), include_glad_overhead=not o.no_glad_overhead,
        threads=_positive_int(o.threads, "--threads"))
    out = o.require("out")
    save_model(out, spec, new_config, new_weights,
               {"flops": {"paper_literal": problem.paper_literal,
                          "include_glad_overhead": problem.include_glad_overhead},
                "grid": problem.grid})
    doc = solution.to_json()
    _write_json(o.solution_out or str(out) + ".solution.json", doc)
    _emit(doc)
    return 0


def cmd_flops(o: _Options) -> int:
    if o.model:
        spec, config, _, _ = load_model(o.model)
    else:
        spec = VitSpec.parse(o.spec)
        config = ArchitectureConfig.baseline(spec)
        if o.arch:
            try:
                doc = json.loads(Path(o.arch).read_text(encoding="utf-8"))
            except json.JSONDecodeError as exc:
                raise UsageError(f"{o.arch}: invalid JSON ({exc})") from None
            config = ArchitectureConfig.from_dict(doc).validate(spec)
    literal = bool(o.paper_literal_flops)
    overhead = not o.no_glad_overhead
    cost = flops_total(config, spec, overhead, literal)
    base = baseline_flops(spec, literal)
    _emit({"flops": cost, "baseline_flops": base, "ratio": cost / base, "m": list(config.m)})
    return 0


def cmd_verify(o: _Options) -> int:
    spec, config, _, meta = load_model(o.require("model"))
    flops_meta = meta.get("flops", {})
    literal = bool(o.paper_literal_flops or flops_meta.get("paper_literal", False))
    overhead = (not o.no_glad_overhead) and flops_meta.get("include_glad_overhead", True)
    grid = _grid(o.grid) if o.grid is not None else meta.get("grid")
    problems = checker.check_config(config.gamma, config.phi, config.m, p=config.p, q=config.q,
                                    eta=float(o.args.eta if o.args.eta is not None else config.eta),
                                    n0=spec.base_tokens, d=spec.embed_dim, grid=grid,
                                    include_glad_overhead=overhead, paper_literal=literal)
    ref = checker.reference_flops(config.gamma, config.phi, config.m, spec.base_tokens, spec.embed_dim,
                                  overhead, literal)
    cost = flops_total(config, spec, overhead, literal)
    if cost != ref:
        problems.append(f"flops_total {cost} disagrees with reference count {ref}")
    base = checker.reference_baseline(spec.layers, spec.base_tokens, spec.embed_dim, literal)
    _emit({"ok": not problems, "violations": problems, "flops": ref, "ratio": ref / base})
    return 0 if not problems else 2


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "analyze": cmd_analyze, "solve": cmd_solve,
            "compress": cmd_compress, "finetune": cmd_finetune, "flops": cmd_flops, "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with option defaults")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="worker threads (results do not depend on it)")

    parser = argparse.ArgumentParser(prog="vitsqueeze", description="Toy ViT compression toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        return sub.add_parser(name, parents=[common], help=help_text)

    def search_flags(p):
        p.add_argument("--p", type=int, help="number of static-attention layers")
        p.add_argument("--q", type=int, help="number of GLAD insertion points")
        p.add_argument("--eta", type=float, help="FLOPs ratio budget")
        p.add_argument("--grid", help="candidate token counts, comma separated")

    def flops_flags(p):
        p.add_argument("--paper-literal-flops", action="store_true", default=None)
        p.add_argument("--no-glad-overhead", action="store_true", default=None)

    def train_flags(p):
        p.add_argument("--data")
        p.add_argument("--out")
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--lambda-glad", type=float)
        p.add_argument("--loss-csv")

    p = add("gen-data", "write a synthetic dataset")
    p.add_argument("--samples", type=int)
    p.add_argument("--spec")
    p.add_argument("--out")

    p = add("train", "train a baseline model from scratch")
    train_flags(p)

    p = add("analyze", "attention spectra, effective ranks and static-fit report")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--energy", type=float)
    p.add_argument("--ridge", type=float)
    p.add_argument("--out", help="report CSV path")
    p.add_argument("--spectra-out", help="spectra JSON path (a solve input)")
    search_flags(p)

    p = add("solve", "choose GLAD placement and token counts")
    p.add_argument("--problem", help="spectra/problem JSON")
    p.add_argument("--out")
    search_flags(p)
    flops_flags(p)

    p = add("compress", "build a compressed model from a baseline")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--solution-out")
    p.add_argument("--ridge", type=float)
    p.add_argument("--glad-norm", choices=["layer", "batch"])
    p.add_argument("--share-heads", action="store_true", default=None)
    search_flags(p)
    flops_flags(p)

    p = add("finetune", "train a compressed model with token distillation")
    p.add_argument("--model")
    p.add_argument("--teacher")
    train_flags(p)

    p = add("flops", "FLOPs of a model, or of a spec and optional architecture JSON")
    p.add_argument("--model")
    p.add_argument("--spec")
    p.add_argument("--arch", help="architecture JSON with gamma/phi/m/p/q")
    flops_flags(p)

    p = add("verify", "re-check a model's architecture against all constraints")
    p.add_argument("--model")
    p.add_argument("--eta", type=float)
    p.add_argument("--grid")
    flops_flags(p)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        options = _Options(args, args.command)
        return COMMANDS[args.command](options)
    except ValueError as exc:
        log.error("%s", exc)
        print(f"vitsqueeze {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ArithmeticError, RuntimeError, OSError, VitSqueezeError) as exc:
        log.error("%s", exc)
        print(f"vitsqueeze {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
