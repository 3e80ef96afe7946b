"""Command-line entry point.

Subcommands: ``search`` runs the evolutionary or random search and writes the
run log plus final-front genotype files; ``estimate`` prints the hardware cost
of one genotype; ``eps-select`` sweeps perturbation budgets and reports the
selected triple; ``front`` exports a run log's non-dominated set as CSV.

Exit codes: 0 success, 2 configuration error, 3 evaluator failure, 4 I/O
error. Errors are reported as one JSON line on standard error. All output
files are written to a temporary sibling and renamed into place, so a failed
run never leaves a partial file.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import shlex
import sys
import tempfile
from pathlib import Path

from .eps_select import (
    DegenerateCurveError,
    EpsilonGrid,
    choose_epsilons,
)
from .evaluator import (
    DEFAULT_TIMEOUT_S,
    Evaluator,
    EvaluatorError,
    ExternalEvaluatorPool,
    SurrogateConfig,
    SurrogateEvaluator,
)
from .genotype import (
    GenotypeDecodeError,
    SearchSpace,
    UnsatisfiableSpaceError,
    decode,
    encode,
    from_obj,
    genotype_hash,
    random_genotype,
)
from .hw_model import CostOverflowError, HardwareConfig, estimate
from .nsga2 import (
    ConfigError,
    FitnessVector,
    ObjectiveSense,
    SearchConfig,
    dominates,
    evolve,
    random_search,
)
from .toy_model import ToyConfig, ToyEvaluator

WORKERS_ENV_VAR = "ROHNAS_WORKERS"

# The accelerator power/energy inputs are not published; these stand-ins give
# plausible magnitudes and are meant to be overridden in the config file.
DEFAULTS = {
    "seed": 0,
    "strategy": "nsga2",
    "out": None,
    "search": {
        "population_size": 10,
        "generations": 20,
        "offspring_size": 10,
        "mutation_prob": 0.1,
        "train_epochs": 1,
        "input_size": 28,
        "input_channels": 1,
        "num_classes": 10,
        "min_layers": 2,
        "max_layers": 10,
    },
    "hardware": {
        "pe_power_mw": 8600.0,
        "mem_access_energy_pj": 50.0,
        "clock_period_ns": 3.0,
        "pe_rows": 16,
        "pe_cols": 16,
        "bytes_per_weight": 4,
        "load_weights_cycles": 0,
    },
    "evaluator": {
        "backend": "surrogate",
        "workers": 1,
        "timeout_s": DEFAULT_TIMEOUT_S,
        "surrogate": {
            "log_params_gain": 0.35,
            "depth_gain": 0.1,
            "offset": -2.5,
            "jitter": 0.02,
            "eps_base": 0.01,
        },
    },
    "toy": {
        "classes": None,  # defaults to search.num_classes
        "dim": 16,
        "train_size": 2000,
        "test_size": 500,
        "lr": 0.05,
        "batch_size": 32,
        "dataset_seed": 0,
        "pgd_iters": 10,
    },
    "epsilon": {
        "mode": "one_eps",
        "values": None,  # explicit list, "auto", or None for the mode table
        "one_eps": [3e-2],
        "two_eps": [3e-3, 1e-1],
        "grid": None,  # {eps_min, eps_max, points, spacing}; None = decade
        "probe_seed": None,  # defaults to the run seed
    },
}

PRESETS = {
    "surrogate-demo": {},
    "mnist": {
        "search": {"input_size": 28, "input_channels": 1, "num_classes": 10,
                   "train_epochs": 5},
        "epsilon": {"one_eps": [3e-2], "two_eps": [3e-3, 1e-1]},
    },
    "fmnist": {
        "search": {"input_size": 28, "input_channels": 1, "num_classes": 10,
                   "train_epochs": 5},
        "epsilon": {"one_eps": [1e-2], "two_eps": [1e-3, 3e-2]},
    },
    "cifar10": {
        "search": {"input_size": 32, "input_channels": 3, "num_classes": 10,
                   "train_epochs": 10},
        "epsilon": {"one_eps": [3e-4], "two_eps": [3e-5, 1e-3]},
    },
}


# -- configuration -----------------------------------------------------------


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown configuration key: {where}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(config_path: str | None, preset: str | None,
                overrides: dict | None = None) -> dict:
    """Resolve defaults <- preset <- config file <- command-line flags."""
    cfg = copy.deepcopy(DEFAULTS)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(
                f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        cfg = _merge(cfg, PRESETS[preset])
    if config_path is not None:
        try:
            raw = Path(config_path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        try:
            data = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg = _merge(cfg, data)
    if overrides:
        cfg = _merge(cfg, overrides)
    return cfg


def build_space(cfg: dict) -> SearchSpace:
    s = cfg["search"]
    return SearchSpace(input_size=s["input_size"],
                       input_channels=s["input_channels"],
                       num_classes=s["num_classes"],
                       min_layers=s["min_layers"],
                       max_layers=s["max_layers"])


def build_hardware(cfg: dict) -> HardwareConfig:
    return HardwareConfig(**cfg["hardware"])


def build_evaluator(cfg: dict) -> Evaluator:
    ev = cfg["evaluator"]
    backend = ev["backend"]
    workers = ev["workers"]
    if WORKERS_ENV_VAR in os.environ:
        try:
            workers = int(os.environ[WORKERS_ENV_VAR])
        except ValueError as exc:
            raise ConfigError(
                f"{WORKERS_ENV_VAR} must be an integer") from exc
    if backend == "surrogate":
        return SurrogateEvaluator(SurrogateConfig(**ev["surrogate"]))
    if backend == "toy":
        toy = dict(cfg["toy"])
        if toy["classes"] is None:
            toy["classes"] = cfg["search"]["num_classes"]
        return ToyEvaluator(ToyConfig(**toy))
    if backend.startswith("external:"):
        command = shlex.split(backend[len("external:"):])
        if not command:
            raise ConfigError("external backend needs a command")
        return ExternalEvaluatorPool(command, workers=workers,
                                     timeout=ev["timeout_s"])
    raise ConfigError(
        f"unknown backend {backend!r}; use surrogate, toy, or external:<cmd>")


def build_grid(cfg: dict) -> EpsilonGrid:
    grid = cfg["epsilon"]["grid"]
    if grid is None:
        return EpsilonGrid.decade()
    try:
        return EpsilonGrid(**grid)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad epsilon grid: {exc}") from exc


def resolve_epsilons(cfg: dict, evaluator: Evaluator,
                     space: SearchSpace) -> tuple[float, ...]:
    """Turn the epsilon section into the concrete objective budgets."""
    eps = cfg["epsilon"]
    mode = eps["mode"]
    if mode not in ("one_eps", "two_eps"):
        raise ConfigError("epsilon mode must be one_eps or two_eps")
    values = eps["values"]
    if values == "auto":
        probe_seed = eps["probe_seed"]
        if probe_seed is None:
            probe_seed = cfg["seed"]
        probe = random_genotype(space, seed=probe_seed)
        sel = choose_epsilons(evaluator, probe, grid=build_grid(cfg),
                              epochs=cfg["search"]["train_epochs"],
                              seed=probe_seed)
        values = ([sel.eps_nas] if mode == "one_eps"
                  else [sel.eps_low, sel.eps_high])
    elif values is None:
        values = eps[mode]
    if not isinstance(values, (list, tuple)):
        raise ConfigError("epsilon values must be a list or \"auto\"")
    need = 1 if mode == "one_eps" else 2
    if len(values) != need:
        raise ConfigError(f"mode {mode} requires exactly {need} epsilon value(s)")
    return tuple(float(v) for v in values)


def build_search_config(cfg: dict, epsilons: tuple[float, ...]) -> SearchConfig:
    s = cfg["search"]
    return SearchConfig(space=build_space(cfg),
                        population_size=s["population_size"],
                        generations=s["generations"],
                        offspring_size=s["offspring_size"],
                        mutation_prob=s["mutation_prob"],
                        epsilons=epsilons,
                        train_epochs=s["train_epochs"])


# -- output helpers ----------------------------------------------------------


def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def _objective_names(senses: tuple[ObjectiveSense, ...]) -> list[str]:
    n_acc = sum(1 for s in senses if s is ObjectiveSense.MAXIMIZE)
    names = (["adv_acc"] if n_acc == 1 else ["adv_acc_low", "adv_acc_high"])
    return names + ["energy_mj", "latency_ms", "memory_mib"]


def _fmt(v) -> str:
    return str(v)


# -- subcommands -------------------------------------------------------------


def cmd_search(args) -> int:
    cfg = load_config(args.config, args.preset, _flag_overrides(args))
    out = Path(cfg["out"] if cfg["out"] is not None else "runlog.ndjson")
    space = build_space(cfg)
    hw = build_hardware(cfg)
    evaluator = build_evaluator(cfg)
    try:
        if cfg["strategy"] not in ("nsga2", "random"):
            raise ConfigError("strategy must be nsga2 or random")
        epsilons = resolve_epsilons(cfg, evaluator, space)
        search_cfg = build_search_config(cfg, epsilons)
        run = evolve if cfg["strategy"] == "nsga2" else random_search
        log = run(search_cfg, evaluator, hw, seed=cfg["seed"])
    finally:
        evaluator.close()

    _write_atomic(out, log.to_ndjson())
    front_dir = out.parent / (out.stem + "_front")
    for ind in log.final_front:
        _write_atomic(front_dir / f"{genotype_hash(ind.genotype)}.json",
                      encode(ind.genotype) + "\n")
    summaries = [r for r in log.records if r["type"] == "generation"]
    print(json.dumps({
        "out": str(out),
        "front_dir": str(front_dir),
        "front_size": len(log.final_front),
        "evaluations_requested": log.evaluations_requested,
        "backend_calls": log.backend_calls,
        "final_hypervolume": summaries[-1]["hypervolume"],
        "epsilons": list(epsilons),
    }, sort_keys=True))
    return 0


def cmd_estimate(args) -> int:
    cfg = load_config(args.config, args.preset, _flag_overrides(args))
    genotype = decode(Path(args.genotype).read_text())
    hw = build_hardware(cfg)
    try:
        cost = estimate(genotype, hw)
    except CostOverflowError as exc:
        raise ConfigError(str(exc)) from exc

    header = ["layer", "type", "weights", "summands", "feature_maps",
              "load_groups", "mem_accesses", "cycles"]
    rows = [header]
    for i, (desc, layer) in enumerate(zip(genotype.layers, cost.per_layer)):
        rows.append([str(i), desc.layer_type.value, str(layer.w_l),
                     str(layer.s_l), str(layer.f_l), str(layer.w_pe_array),
                     str(layer.m_acc), str(layer.c_l)])
    widths = [max(len(r[c]) for r in rows) for c in range(len(header))]
    for row in rows:
        print("  ".join(cell.rjust(w) for cell, w in zip(row, widths)))
    print(f"total_cycles {cost.total_cycles}")
    print(f"total_weights {cost.total_weights}")
    print(f"latency_ms {_fmt(cost.latency_ms)}")
    print(f"energy_mj {_fmt(cost.energy_mj)}")
    print(f"memory_mib {_fmt(cost.memory_mib)}")
    return 0


def cmd_eps_select(args) -> int:
    cfg = load_config(args.config, args.preset, _flag_overrides(args))
    out = Path(cfg["out"] if cfg["out"] is not None else "eps_curve.csv")
    space = build_space(cfg)
    evaluator = build_evaluator(cfg)
    try:
        if args.genotype is not None:
            probe = decode(Path(args.genotype).read_text())
        else:
            probe = random_genotype(space, seed=cfg["seed"])
        sel = choose_epsilons(evaluator, probe, grid=build_grid(cfg),
                              epochs=cfg["search"]["train_epochs"],
                              seed=cfg["seed"])
    finally:
        evaluator.close()

    csv = "epsilon,accuracy\n" + "".join(
        f"{_fmt(e)},{_fmt(a)}\n" for e, a in sel.accuracy_curve)
    _write_atomic(out, csv)
    print(json.dumps({
        "eps_low": sel.eps_low,
        "eps_nas": sel.eps_nas,
        "eps_high": sel.eps_high,
        "clean_accuracy": sel.clean_accuracy,
        "low_clamped": sel.low_clamped,
        "high_clamped": sel.high_clamped,
        "curve_csv": str(out),
    }, sort_keys=True))
    return 0


def cmd_front(args) -> int:
    out = Path(args.out if args.out is not None else "front.csv")
    lines = Path(args.runlog).read_text().splitlines()
    entries = []
    for line in lines:
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"run log is not NDJSON: {exc}") from exc
        if rec.get("type") != "individual":
            continue
        values = tuple(float("inf") if v == "inf" else
                       float("-inf") if v == "-inf" else float(v)
                       for v in rec["fitness"])
        senses = tuple(ObjectiveSense(s) for s in rec["senses"])
        entries.append((FitnessVector(values, senses),
                        genotype_hash(from_obj(rec["genotype"]))))
    if not entries:
        raise ConfigError("run log holds no individual records")

    keep = [i for i, (fit, _) in enumerate(entries)
            if not any(j != i and dominates(entries[j][0], fit)
                       for j in range(len(entries)))]
    names = _objective_names(entries[0][0].senses)
    rows = [",".join(names + ["genotype_hash"])]
    for i in keep:
        fit, ghash = entries[i]
        rows.append(",".join([_fmt(v) for v in fit.values] + [ghash]))
    _write_atomic(out, "\n".join(rows) + "\n")
    print(json.dumps({"out": str(out), "rows": len(keep)}, sort_keys=True))
    return 0


# -- argument wiring ---------------------------------------------------------


def _flag_overrides(args) -> dict:
    """Only flags the user actually passed become overrides."""
    overrides: dict = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        overrides["out"] = args.out
    if getattr(args, "strategy", None) is not None:
        overrides["strategy"] = args.strategy
    search = {}
    if getattr(args, "generations", None) is not None:
        search["generations"] = args.generations
    if getattr(args, "population", None) is not None:
        search["population_size"] = args.population
    if search:
        overrides["search"] = search
    if getattr(args, "backend", None) is not None:
        overrides["evaluator"] = {"backend": args.backend}
    return overrides


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON configuration file")
    parser.add_argument("--preset", choices=sorted(PRESETS),
                        help="named defaults bundle")
    parser.add_argument("--seed", type=int, help="run seed")
    parser.add_argument("--out", help="output path")
    parser.add_argument("--backend",
                        help="surrogate, toy, or external:<command>")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="paretonas",
        description="Multi-objective architecture search balancing adversarial "
                    "robustness against accelerator cost.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_search = sub.add_parser("search", help="run the architecture search")
    _add_common(p_search)
    p_search.add_argument("--strategy", choices=("nsga2", "random"))
    p_search.add_argument("--generations", type=int)
    p_search.add_argument("--population", type=int)
    p_search.set_defaults(func=cmd_search)

    p_est = sub.add_parser("estimate", help="hardware cost of one genotype")
    _add_common(p_est)
    p_est.add_argument("--genotype", required=True,
                       help="path to a genotype JSON file")
    p_est.set_defaults(func=cmd_estimate)

    p_eps = sub.add_parser("eps-select",
                           help="sweep budgets and pick the objective values")
    _add_common(p_eps)
    p_eps.add_argument("--genotype", help="probe genotype JSON file "
                                          "(default: random from seed)")
    p_eps.set_defaults(func=cmd_eps_select)

    p_front = sub.add_parser("front",
                             help="export a run log's non-dominated set as CSV")
    p_front.add_argument("--runlog", required=True, help="NDJSON run log path")
    p_front.add_argument("--out", help="CSV output path")
    p_front.set_defaults(func=cmd_front)
    return parser


def _fail(exc: Exception, code: int) -> int:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc)},
                     sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except EvaluatorError as exc:
        return _fail(exc, 3)
    except DegenerateCurveError as exc:
        return _fail(exc, 3)
    except OSError as exc:
        return _fail(exc, 4)
    except (ConfigError, GenotypeDecodeError, UnsatisfiableSpaceError,
            ValueError, TypeError) as exc:
        return _fail(exc, 2)


if __name__ == "__main__":
    sys.exit(main())
