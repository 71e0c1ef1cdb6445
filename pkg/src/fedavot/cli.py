"""Command-line front end: solve transport plans, check feasibility, run experiments.

Exit codes: 0 success, 1 validation problem, 2 infeasibility (unconverged
solve, infeasible verdict, or a refused run), 3 I/O failure.  The output
directory for experiment artifacts may be overridden with the
``FEDAVOT_OUTPUT_DIR`` environment variable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .experiments import (
    ALGORITHMS,
    ExperimentConfig,
    ExperimentSuite,
    NAMED_CONFIGS,
    TaskConfig,
    decreasing_linear_importance,
    exponential_decay_importance,
    fit_rate,
    increasing_linear_prior,
    run_experiment,
    summary_document,
    uniform_vector,
)
from .feasibility import HALL_MAX_CLIENTS, check_feasible_hall, check_feasible_maxflow, verdict_to_dict
from .simulation import ExplicitAvailability, PairPrior
from .tasks import LINEAR_REGRESSION, MULTICLASS_LOGISTIC
from .transport import (
    StructuralInfeasibilityError,
    ValidationError,
    load_problem,
    plan_to_dict,
    solve_sinkhorn,
)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_INFEASIBLE = 2
EXIT_IO = 3

OUTPUT_DIR_ENV = "FEDAVOT_OUTPUT_DIR"


def _print_json(doc: dict) -> None:
    print(json.dumps(doc, indent=2, sort_keys=True))


def _cmd_solve(args) -> int:
    problem = load_problem(args.problem)
    result = solve_sinkhorn(problem, epsilon=args.epsilon, max_iterations=args.max_iters)
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.problem).stem
    plan_path = out_dir / f"{stem}.plan.json"
    weights_path = out_dir / f"{stem}.weights.json"
    plan_path.write_text(json.dumps(plan_to_dict(result.plan), indent=2) + "\n", encoding="utf-8")
    weights_doc = {
        "n_clients": result.weights.n_clients,
        "n_events": result.weights.n_events,
        "entries": [
            [int(i), int(j), float(v)]
            for i, j, v in zip(
                result.weights.row_index, result.weights.col_index, result.weights.values
            )
        ],
        "zero_mass_events": list(result.weights.zero_mass_events),
    }
    weights_path.write_text(json.dumps(weights_doc, indent=2) + "\n", encoding="utf-8")
    _print_json(
        {
            "converged": result.converged,
            "iterations": result.iterations,
            "row_residual_l1": result.row_residual_l1,
            "col_residual_l1": result.col_residual_l1,
            "plan_file": str(plan_path),
            "weights_file": str(weights_path),
        }
    )
    return EXIT_OK if result.converged else EXIT_INFEASIBLE


def _cmd_feascheck(args) -> int:
    problem = load_problem(args.problem)
    verdict = check_feasible_maxflow(problem)
    doc = verdict_to_dict(verdict)
    if args.oracle:
        if problem.n_clients > HALL_MAX_CLIENTS:
            raise ValidationError(
                f"--oracle is limited to N <= {HALL_MAX_CLIENTS} clients "
                f"(got {problem.n_clients})"
            )
        oracle = check_feasible_hall(problem)
        doc["oracle"] = verdict_to_dict(oracle)
        if oracle.feasible != verdict.feasible:
            print(json.dumps(doc, indent=2, sort_keys=True), file=sys.stderr)
            raise ValidationError("max-flow and brute-force verdicts disagree")
    _print_json(doc)
    return EXIT_OK if verdict.feasible else EXIT_INFEASIBLE


def _vector_from_spec(spec, n_clients: int, kind: str) -> np.ndarray:
    """Resolve a config vector: explicit values or a named scheme."""
    if isinstance(spec, dict):
        if "values" in spec:
            return np.asarray(spec["values"], dtype=np.float64)
        name = spec.get("scheme", "uniform")
    else:
        name = spec
    schemes = {
        "uniform": uniform_vector,
        "decreasing_linear": decreasing_linear_importance,
        "increasing_linear": increasing_linear_prior,
        "exponential_decay": exponential_decay_importance,
    }
    if name not in schemes:
        raise ValidationError(f"unknown {kind} scheme {name!r}")
    return schemes[name](n_clients)


def experiment_config_from_dict(doc: dict) -> ExperimentConfig:
    """Build a runnable experiment from a JSON/TOML document."""
    try:
        n_clients = int(doc["n_clients"])
        task_doc = dict(doc["task"])
        fed_doc = dict(doc["federation"])
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"experiment config missing section: {exc}") from exc

    kind = task_doc.pop("kind", None)
    if kind not in (LINEAR_REGRESSION, MULTICLASS_LOGISTIC):
        raise ValidationError(f"task.kind must be one of "
                              f"{LINEAR_REGRESSION!r}, {MULTICLASS_LOGISTIC!r}; got {kind!r}")
    task = TaskConfig(kind=kind, **task_doc)

    importance = _vector_from_spec(doc.get("importance", "uniform"), n_clients, "importance")

    avail_doc = dict(doc.get("availability", {"kind": "pair_prior", "scheme": "uniform"}))
    avail_kind = avail_doc.pop("kind", "pair_prior")
    if avail_kind == "pair_prior":
        prior = _vector_from_spec(
            avail_doc.get("prior", avail_doc.get("scheme", "uniform")), n_clients, "availability"
        )
        availability = PairPrior(prior=prior, subset_size=int(avail_doc.get("subset_size", 2)))
    elif avail_kind == "explicit":
        availability = ExplicitAvailability(
            events=tuple(tuple(int(i) for i in e) for e in avail_doc["events"]),
            q=np.asarray(avail_doc["q"], dtype=np.float64),
        )
    else:
        raise ValidationError(f"unknown availability kind {avail_kind!r}")

    sinkhorn_doc = dict(doc.get("sinkhorn", {}))
    algorithms = tuple(doc.get("algorithms", ALGORITHMS))
    unknown = [a for a in algorithms if a not in ALGORITHMS]
    if unknown:
        raise ValidationError(f"unknown algorithms {unknown}; choose from {list(ALGORITHMS)}")

    radius = fed_doc.get("projection_radius", 1000.0)
    return ExperimentConfig(
        name=str(doc.get("name", "custom")),
        task=task,
        n_clients=n_clients,
        importance=importance,
        availability=availability,
        local_steps_per_round=int(fed_doc["local_steps_per_round"]),
        global_rounds=int(fed_doc["global_rounds"]),
        step_size_base=float(fed_doc["step_size_base"]),
        batch_size=int(fed_doc["batch_size"]),
        projection_radius=None if radius in (None, "none") else float(radius),
        algorithms=algorithms,
        sinkhorn_epsilon=float(sinkhorn_doc.get("epsilon", 1e-8)),
        sinkhorn_max_iterations=int(sinkhorn_doc.get("max_iterations", 2000)),
        allow_unconverged=bool(doc.get("allow_unconverged", False)),
        mnist_images=doc.get("mnist_images"),
        mnist_labels=doc.get("mnist_labels"),
    )


def load_experiment_config(path) -> ExperimentConfig:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ImportError:
            import tomli as tomllib
        try:
            doc = tomllib.loads(raw.decode("utf-8"))
        except Exception as exc:
            raise ValidationError(f"{path}: invalid TOML: {exc}") from exc
    else:
        try:
            doc = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ValidationError(
                f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}"
            ) from exc
    return experiment_config_from_dict(doc)


def _cmd_simulate(args) -> int:
    if bool(args.suite) == bool(args.config):
        raise ValidationError("pass exactly one of --suite or --config")
    if args.suite:
        if args.suite not in NAMED_CONFIGS:
            raise ValidationError(
                f"unknown suite {args.suite!r}; choose from {sorted(NAMED_CONFIGS)}"
            )
        overrides = {}
        if args.mnist_images or args.mnist_labels:
            if not (args.mnist_images and args.mnist_labels):
                raise ValidationError("--mnist-images and --mnist-labels go together")
            overrides["mnist_images"] = args.mnist_images
            overrides["mnist_labels"] = args.mnist_labels
        config = NAMED_CONFIGS[args.suite](**overrides)
    else:
        config = load_experiment_config(args.config)

    seeds = tuple(int(s) for s in args.seeds.split(",") if s.strip() != "")
    output_dir = Path(args.output_dir or os.environ.get(OUTPUT_DIR_ENV, "runs"))
    suite = ExperimentSuite(config=config, seeds=seeds, output_dir=output_dir)
    result = run_experiment(suite)
    _print_json(summary_document(suite, result.stats))
    for name, path in sorted(result.artifacts.items()):
        print(f"{name}: {path}", file=sys.stderr)
    return EXIT_OK


def _cmd_rate(args) -> int:
    rows = Path(args.input).read_text(encoding="utf-8").strip().splitlines()
    if not rows or rows[0].split(",")[:2] != ["round", "gap"]:
        raise ValidationError(f"{args.input}: expected a CSV with header 'round,gap'")
    pairs = []
    for line_no, line in enumerate(rows[1:], start=2):
        parts = line.split(",")
        try:
            pairs.append((int(parts[0]), float(parts[1])))
        except (IndexError, ValueError) as exc:
            raise ValidationError(f"{args.input}:{line_no}: bad row {line!r}") from exc
    pairs.sort()
    fit = fit_rate([gap for _, gap in pairs])
    _print_json(
        {
            "slope": fit.slope,
            "points": [[t, g] for t, g in fit.points],
            "excluded_rounds": list(fit.excluded_rounds),
        }
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedavot",
        description="Masked-transport aggregation: solver, feasibility checks, simulator.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    solve = sub.add_parser("solve", help="solve a transport problem JSON file")
    solve.add_argument("problem", help="path to a problem JSON document")
    solve.add_argument("--epsilon", type=float, default=1e-8)
    solve.add_argument("--max-iters", type=int, default=100_000)
    solve.add_argument("--output-dir", default=".")
    solve.set_defaults(func=_cmd_solve)

    feas = sub.add_parser("feascheck", help="check feasibility of a problem JSON file")
    feas.add_argument("problem")
    feas.add_argument(
        "--oracle",
        action="store_true",
        help=f"also run the brute-force subset check (N <= {HALL_MAX_CLIENTS})",
    )
    feas.set_defaults(func=_cmd_feascheck)

    sim = sub.add_parser("simulate", help="run a multi-seed experiment suite")
    sim.add_argument("--suite", help=f"named suite: {', '.join(sorted(NAMED_CONFIGS))}")
    sim.add_argument("--config", help="path to a JSON or TOML experiment config")
    sim.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated seeds")
    sim.add_argument(
        "--output-dir", default=None, help=f"defaults to ${OUTPUT_DIR_ENV} or ./runs"
    )
    sim.add_argument("--mnist-images", default=None, help="IDX image file for the classification suite")
    sim.add_argument("--mnist-labels", default=None, help="IDX label file for the classification suite")
    sim.set_defaults(func=_cmd_simulate)

    rate = sub.add_parser("rate", help="fit a log-log convergence slope to a gap CSV")
    rate.add_argument("--input", required=True, help="CSV with header 'round,gap'")
    rate.set_defaults(func=_cmd_rate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except StructuralInfeasibilityError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
