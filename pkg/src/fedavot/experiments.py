"""Multi-seed experiment harness with CSV/JSON artifacts and rendered figures.

A suite names an experiment configuration, a list of seeds, and an output
directory.  Running it trains every configured algorithm on every seed,
writes one delimited file of per-round losses, a per-round mean/std file for
plotting, a JSON summary (final losses, distortion diagnostic, rate fit), the
suboptimality-gap curve for regression experiments, and a rendered loss-curve
figure next to the delimited output.  All delimited output is byte-stable for
a fixed suite.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .feasibility import check_feasible_maxflow
from .simulation import (
    AvailabilityModel,
    FedAvgFull,
    FedAvgK,
    Fedavot,
    FederationConfig,
    PairPrior,
    TrainingTrace,
    expand_availability,
    fedavgk_expected_scale,
    run_training,
)
from .tasks import (
    LINEAR_REGRESSION,
    MULTICLASS_LOGISTIC,
    TaskSpec,
    gen_label_skew_classification,
    gen_linear_regression,
    global_objective,
    load_mnist_idx,
)
from .transport import (
    StructuralInfeasibilityError,
    ValidationError,
    build_problem,
    solve_sinkhorn,
)

ALGORITHMS = ("fedavg_full", "fedavg_k", "fedavot")
_DATA_STREAM_TAG = 1729


def decreasing_linear_importance(n_clients: int) -> np.ndarray:
    """Importance proportional to N, N-1, ..., 1 (first clients matter most)."""
    weights = np.arange(n_clients, 0, -1, dtype=np.float64)
    return weights / weights.sum()


def increasing_linear_prior(n_clients: int) -> np.ndarray:
    """Availability prior proportional to 1, 2, ..., N (last clients seen most)."""
    weights = np.arange(1, n_clients + 1, dtype=np.float64)
    return weights / weights.sum()


def exponential_decay_importance(n_clients: int, scale: float = 10.0) -> np.ndarray:
    weights = np.exp(-np.arange(n_clients) / scale)
    return weights / weights.sum()


def uniform_vector(n_clients: int) -> np.ndarray:
    return np.full(n_clients, 1.0 / n_clients)


@dataclass(frozen=True)
class TaskConfig:
    kind: str
    n_per_client: int = 50
    dimension: int = 10
    n_classes: int = 10
    classes_per_client: int = 2
    noise_std: float = 0.1
    class_separation: float = 2.0


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    name: str
    task: TaskConfig
    n_clients: int
    importance: np.ndarray
    availability: AvailabilityModel
    local_steps_per_round: int
    global_rounds: int
    step_size_base: float
    batch_size: int
    projection_radius: Optional[float]
    algorithms: tuple[str, ...] = ALGORITHMS
    sinkhorn_epsilon: float = 1e-8
    sinkhorn_max_iterations: int = 2000
    allow_unconverged: bool = False
    mnist_images: Optional[str] = None
    mnist_labels: Optional[str] = None


@dataclass(frozen=True, eq=False)
class ExperimentSuite:
    config: ExperimentConfig
    seeds: tuple[int, ...]
    output_dir: Path

    def __post_init__(self):
        if not self.seeds:
            raise ValidationError("seed list must be nonempty")


@dataclass(frozen=True, eq=False)
class SummaryStats:
    """Across-seed per-round statistics and the final-loss table."""

    algorithms: tuple[str, ...]
    rounds: int
    mean_loss: dict[str, np.ndarray]
    std_loss: dict[str, np.ndarray]
    final_loss: dict[str, float]
    final_loss_std: dict[str, float]
    average_model_loss: dict[str, float]
    rate_slope: Optional[float]
    distortion_scale: Optional[float]
    distortion_scale_std: Optional[float]


@dataclass(frozen=True)
class RateFit:
    slope: float
    points: tuple[tuple[int, float], ...]
    excluded_rounds: tuple[int, ...]


def fit_rate(gaps: Sequence[float]) -> RateFit:
    """Least-squares slope of log(gap) against log(T) at dyadic checkpoints.

    ``gaps[T-1]`` is the suboptimality gap of the running average after T
    rounds.  Nonpositive gaps cannot enter the log fit; they are reported as
    excluded.
    """
    gaps = np.asarray(gaps, dtype=np.float64)
    if gaps.size < 2:
        raise ValidationError("need at least two rounds to fit a rate")
    checkpoints = []
    t = 1
    while t <= gaps.size:
        checkpoints.append(t)
        t *= 2
    points = [(t, float(gaps[t - 1])) for t in checkpoints]
    usable = [(t, g) for t, g in points if g > 0.0]
    excluded = tuple(t for t, g in points if g <= 0.0)
    if len(usable) < 2:
        raise ValidationError("fewer than two positive gaps at dyadic checkpoints")
    log_t = np.log([t for t, _ in usable])
    log_gap = np.log([g for _, g in usable])
    slope = float(np.polyfit(log_t, log_gap, 1)[0])
    return RateFit(slope=slope, points=tuple(usable), excluded_rounds=excluded)


def weighted_least_squares(task: TaskSpec, p) -> np.ndarray:
    """Exact minimizer of the importance-weighted squared loss."""
    if task.kind != LINEAR_REGRESSION:
        raise ValidationError("closed-form optimum is only available for regression tasks")
    p = np.asarray(p, dtype=np.float64)
    scale = p / task.n_per_client
    gram = np.einsum("i,ind,ine->de", scale, task.features, task.features)
    moment = np.einsum("i,ind,in->d", scale, task.features, task.labels)
    return np.linalg.solve(gram, moment)


def suboptimality_gaps(trace: TrainingTrace, task: TaskSpec, p) -> np.ndarray:
    """Gap of the running-average model after each round, against the exact optimum."""
    models = trace.models
    prefixes = np.cumsum(models, axis=0) / np.arange(1, models.shape[0] + 1)[:, None]
    optimum = weighted_least_squares(task, p)
    f_star = global_objective(optimum, p, task)
    return np.array([global_objective(m, p, task) - f_star for m in prefixes])


def restricted_regression_config(**overrides) -> ExperimentConfig:
    """Regression under availability that favors exactly the down-weighted clients."""
    n = int(overrides.pop("n_clients", 100))
    defaults = dict(
        name="restricted_regression",
        task=TaskConfig(kind=LINEAR_REGRESSION, n_per_client=50, dimension=10, noise_std=0.1),
        n_clients=n,
        importance=decreasing_linear_importance(n),
        availability=PairPrior(prior=increasing_linear_prior(n), subset_size=2),
        local_steps_per_round=5,
        global_rounds=200,
        step_size_base=0.1,
        batch_size=10,
        projection_radius=1000.0,
        allow_unconverged=True,
    )
    defaults.update(overrides)
    return ExperimentConfig(**defaults)


def coordinated_classification_config(**overrides) -> ExperimentConfig:
    """Label-skew classification with server-controlled uniform pair sampling."""
    n = int(overrides.pop("n_clients", 100))
    defaults = dict(
        name="coordinated_mnist",
        task=TaskConfig(
            kind=MULTICLASS_LOGISTIC,
            n_per_client=50,
            dimension=20,
            n_classes=10,
            classes_per_client=2,
            class_separation=2.0,
        ),
        n_clients=n,
        importance=exponential_decay_importance(n),
        availability=PairPrior(prior=uniform_vector(n), subset_size=2),
        local_steps_per_round=5,
        global_rounds=300,
        step_size_base=0.5,
        batch_size=10,
        projection_radius=1000.0,
        allow_unconverged=True,
    )
    defaults.update(overrides)
    return ExperimentConfig(**defaults)


NAMED_CONFIGS = {
    "restricted_regression": restricted_regression_config,
    "coordinated_mnist": coordinated_classification_config,
}


def build_task(config: ExperimentConfig, seed: int) -> TaskSpec:
    """Generate the per-seed dataset; a fixed tag keeps data streams disjoint from training streams."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, _DATA_STREAM_TAG]))
    task = config.task
    if task.kind == LINEAR_REGRESSION:
        return gen_linear_regression(
            config.n_clients,
            task.n_per_client,
            task.dimension,
            rng,
            importance=config.importance,
            noise_std=task.noise_std,
        )
    source = None
    if config.mnist_images is not None and config.mnist_labels is not None:
        source = load_mnist_idx(config.mnist_images, config.mnist_labels)
    return gen_label_skew_classification(
        config.n_clients,
        classes_per_client=task.classes_per_client,
        source=source,
        rng=rng,
        n_per_client=task.n_per_client,
        n_classes=task.n_classes,
        dimension=task.dimension,
        importance=config.importance,
        class_separation=task.class_separation,
    )


def prepare_transport(config: ExperimentConfig):
    """Expand availability, solve for transport weights, and gate on feasibility."""
    events, q = expand_availability(config.availability, config.n_clients)
    problem = build_problem(config.importance, q, events)
    solution = solve_sinkhorn(
        problem,
        epsilon=config.sinkhorn_epsilon,
        max_iterations=config.sinkhorn_max_iterations,
    )
    if not solution.converged and not config.allow_unconverged:
        verdict = check_feasible_maxflow(problem)
        raise StructuralInfeasibilityError(
            "importance/availability pairing is infeasible for exact matching; "
            f"violating subset {list(verdict.violating_subset or ())} "
            f"({verdict.violated_side} bound, max flow {verdict.max_flow_value!r})"
        )
    return events, q, problem, solution


def _make_rule(name: str, solution, allow_unconverged: bool):
    if name == "fedavg_full":
        return FedAvgFull()
    if name == "fedavg_k":
        return FedAvgK()
    if name == "fedavot":
        return Fedavot(solution=solution, allow_unconverged=allow_unconverged)
    raise ValidationError(f"unknown algorithm {name!r}")


@dataclass(frozen=True, eq=False)
class ExperimentResult:
    suite: ExperimentSuite
    stats: SummaryStats
    traces: dict[tuple[str, int], TrainingTrace]
    gap_curve: Optional[np.ndarray]
    artifacts: dict[str, Path]


def run_experiment(suite: ExperimentSuite, write: bool = True) -> ExperimentResult:
    """Train every (algorithm, seed) pair and assemble artifacts."""
    config = suite.config
    needs_transport = "fedavot" in config.algorithms or not config.allow_unconverged
    events = q = solution = None
    if needs_transport:
        events, q, _, solution = prepare_transport(config)
    else:
        events, q = expand_availability(config.availability, config.n_clients)

    tasks = {seed: build_task(config, seed) for seed in suite.seeds}
    traces: dict[tuple[str, int], TrainingTrace] = {}
    for algorithm in config.algorithms:
        rule = _make_rule(algorithm, solution, config.allow_unconverged)
        for seed in suite.seeds:
            fed = FederationConfig(
                n_clients=config.n_clients,
                local_steps_per_round=config.local_steps_per_round,
                global_rounds=config.global_rounds,
                step_size_base=config.step_size_base,
                batch_size=config.batch_size,
                seed=seed,
                aggregation=rule,
                availability=config.availability,
                importance=config.importance,
                projection_radius=config.projection_radius,
            )
            traces[(algorithm, seed)] = run_training(fed, tasks[seed])

    stats = summarize(suite, traces, events, q)

    gap_curve = None
    if config.task.kind == LINEAR_REGRESSION and "fedavot" in config.algorithms:
        per_seed = np.stack(
            [
                suboptimality_gaps(traces[("fedavot", seed)], tasks[seed], config.importance)
                for seed in suite.seeds
            ]
        )
        gap_curve = per_seed.mean(axis=0)
        stats = _with_rate(stats, gap_curve)

    artifacts: dict[str, Path] = {}
    if write:
        artifacts = write_artifacts(suite, traces, stats, gap_curve)
    return ExperimentResult(
        suite=suite, stats=stats, traces=traces, gap_curve=gap_curve, artifacts=artifacts
    )


def _with_rate(stats: SummaryStats, gap_curve: np.ndarray) -> SummaryStats:
    try:
        slope = fit_rate(gap_curve).slope
    except ValidationError:
        slope = None
    return SummaryStats(
        algorithms=stats.algorithms,
        rounds=stats.rounds,
        mean_loss=stats.mean_loss,
        std_loss=stats.std_loss,
        final_loss=stats.final_loss,
        final_loss_std=stats.final_loss_std,
        average_model_loss=stats.average_model_loss,
        rate_slope=slope,
        distortion_scale=stats.distortion_scale,
        distortion_scale_std=stats.distortion_scale_std,
    )


def summarize(
    suite: ExperimentSuite,
    traces: dict[tuple[str, int], TrainingTrace],
    events,
    q,
) -> SummaryStats:
    config = suite.config
    mean_loss: dict[str, np.ndarray] = {}
    std_loss: dict[str, np.ndarray] = {}
    final_loss: dict[str, float] = {}
    final_loss_std: dict[str, float] = {}
    average_model_loss: dict[str, float] = {}
    for algorithm in config.algorithms:
        losses = np.stack([traces[(algorithm, seed)].losses for seed in suite.seeds])
        mean_loss[algorithm] = losses.mean(axis=0)
        std_loss[algorithm] = losses.std(axis=0)
        final_loss[algorithm] = float(losses[:, -1].mean())
        final_loss_std[algorithm] = float(losses[:, -1].std())
        average_model_loss[algorithm] = float(
            np.mean([traces[(algorithm, seed)].average_model_loss for seed in suite.seeds])
        )

    sizes = {len(e) for e in events}
    scale = scale_std = None
    if len(sizes) == 1:
        k = sizes.pop()
        scale = fedavgk_expected_scale(config.importance, events, q, k)
        totals = (config.n_clients / k) * np.array(
            [config.importance[list(e)].sum() for e in events]
        )
        scale_std = float(math.sqrt(max(0.0, float(q @ totals**2) - float(q @ totals) ** 2)))

    return SummaryStats(
        algorithms=config.algorithms,
        rounds=config.global_rounds,
        mean_loss=mean_loss,
        std_loss=std_loss,
        final_loss=final_loss,
        final_loss_std=final_loss_std,
        average_model_loss=average_model_loss,
        rate_slope=None,
        distortion_scale=scale,
        distortion_scale_std=scale_std,
    )


# -- artifact emission ------------------------------------------------------


def rounds_csv_text(suite: ExperimentSuite, traces: dict[tuple[str, int], TrainingTrace]) -> str:
    lines = ["round,seed,algorithm,global_loss"]
    for algorithm in suite.config.algorithms:
        for seed in suite.seeds:
            for record in traces[(algorithm, seed)].records:
                lines.append(f"{record.round_index},{seed},{algorithm},{record.global_loss!r}")
    return "\n".join(lines) + "\n"


def plotdata_csv_text(stats: SummaryStats) -> str:
    lines = ["round,algorithm,mean,std"]
    for algorithm in stats.algorithms:
        mean = stats.mean_loss[algorithm]
        std = stats.std_loss[algorithm]
        for idx in range(stats.rounds):
            lines.append(f"{idx},{algorithm},{float(mean[idx])!r},{float(std[idx])!r}")
    return "\n".join(lines) + "\n"


def gaps_csv_text(gap_curve: np.ndarray) -> str:
    lines = ["round,gap"]
    for idx, gap in enumerate(gap_curve):
        lines.append(f"{idx + 1},{float(gap)!r}")
    return "\n".join(lines) + "\n"


def summary_document(suite: ExperimentSuite, stats: SummaryStats) -> dict:
    config = suite.config
    doc: dict = {
        "experiment": config.name,
        "seeds": list(suite.seeds),
        "rounds": stats.rounds,
        "algorithms": list(stats.algorithms),
        "final_loss": {a: stats.final_loss[a] for a in stats.algorithms},
        "final_loss_std": {a: stats.final_loss_std[a] for a in stats.algorithms},
        "average_model_loss": {a: stats.average_model_loss[a] for a in stats.algorithms},
    }
    if stats.distortion_scale is not None:
        doc["fedavgk_expected_scale"] = stats.distortion_scale
        doc["fedavgk_scale_std"] = stats.distortion_scale_std
    if stats.rate_slope is not None:
        doc["rate_slope"] = stats.rate_slope
    return doc


def write_artifacts(
    suite: ExperimentSuite,
    traces: dict[tuple[str, int], TrainingTrace],
    stats: SummaryStats,
    gap_curve: Optional[np.ndarray],
) -> dict[str, Path]:
    from .plotting import render_loss_curves

    out = Path(suite.output_dir) / suite.config.name
    out.mkdir(parents=True, exist_ok=True)
    artifacts: dict[str, Path] = {}

    rounds_path = out / "rounds.csv"
    rounds_path.write_text(rounds_csv_text(suite, traces), encoding="utf-8")
    artifacts["rounds"] = rounds_path

    plot_path = out / "plotdata.csv"
    plot_path.write_text(plotdata_csv_text(stats), encoding="utf-8")
    artifacts["plotdata"] = plot_path

    summary_path = out / "summary.json"
    summary_path.write_text(
        json.dumps(summary_document(suite, stats), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    artifacts["summary"] = summary_path

    if gap_curve is not None:
        gaps_path = out / "gaps.csv"
        gaps_path.write_text(gaps_csv_text(gap_curve), encoding="utf-8")
        artifacts["gaps"] = gaps_path

    figure_path = out / "loss_curves.png"
    render_loss_curves(
        stats,
        figure_path,
        log_scale=suite.config.task.kind == LINEAR_REGRESSION,
        title=suite.config.name,
    )
    artifacts["figure"] = figure_path
    return artifacts
