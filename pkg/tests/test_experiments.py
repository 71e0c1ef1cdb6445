"""Tests for the experiment harness, summary statistics, and rate fitting."""

from __future__ import annotations

import json

import numpy as np
import pytest

from fedavot import StructuralInfeasibilityError, ValidationError, global_objective
from fedavot.cli import experiment_config_from_dict
from fedavot.experiments import (
    ExperimentConfig,
    ExperimentSuite,
    TaskConfig,
    build_task,
    coordinated_classification_config,
    decreasing_linear_importance,
    exponential_decay_importance,
    fit_rate,
    increasing_linear_prior,
    restricted_regression_config,
    run_experiment,
    suboptimality_gaps,
    weighted_least_squares,
)
from fedavot.simulation import ExplicitAvailability, PairPrior
from fedavot.tasks import LINEAR_REGRESSION


def tiny_regression_config(**overrides) -> ExperimentConfig:
    defaults = dict(
        name="tiny",
        task=TaskConfig(kind=LINEAR_REGRESSION, n_per_client=12, dimension=3, noise_std=0.05),
        n_clients=6,
        importance=decreasing_linear_importance(6),
        availability=PairPrior(prior=increasing_linear_prior(6), subset_size=2),
        local_steps_per_round=3,
        global_rounds=8,
        step_size_base=0.1,
        batch_size=4,
        projection_radius=100.0,
        allow_unconverged=True,
        sinkhorn_max_iterations=500,
    )
    defaults.update(overrides)
    return ExperimentConfig(**defaults)


class TestFitRate:
    def test_inverse_square_root_power_law(self):
        rounds = np.arange(1, 257)
        gaps = 3.7 / np.sqrt(rounds)
        fit = fit_rate(gaps)
        assert fit.slope == pytest.approx(-0.5, abs=1e-6)
        assert fit.excluded_rounds == ()

    def test_constant_sequence_has_zero_slope(self):
        fit = fit_rate(np.full(64, 0.25))
        assert fit.slope == pytest.approx(0.0, abs=1e-12)

    def test_nonpositive_gaps_are_excluded_and_reported(self):
        gaps = 1.0 / np.arange(1, 65)
        gaps[0] = 0.0
        fit = fit_rate(gaps)
        assert 1 in fit.excluded_rounds
        assert fit.slope == pytest.approx(-1.0, abs=1e-2)

    def test_too_few_points_rejected(self):
        with pytest.raises(ValidationError):
            fit_rate([1.0])
        with pytest.raises(ValidationError, match="positive gaps"):
            fit_rate([-1.0, -1.0, -1.0, -1.0])


class TestWeightedLeastSquares:
    def test_gradient_vanishes_at_solution(self):
        config = tiny_regression_config()
        task = build_task(config, seed=0)
        optimum = weighted_least_squares(task, config.importance)
        gradient = np.zeros(task.param_dim)
        for client in range(task.n_clients):
            gradient += config.importance[client] * task.local_gradient(optimum, client)
        np.testing.assert_allclose(gradient, 0.0, atol=1e-10)

    def test_gap_curve_is_nonnegative(self):
        config = tiny_regression_config()
        task = build_task(config, seed=1)
        suite = ExperimentSuite(config=config, seeds=(1,), output_dir="unused")
        result = run_experiment(suite, write=False)
        gaps = suboptimality_gaps(result.traces[("fedavot", 1)], task, config.importance)
        assert gaps.shape == (config.global_rounds,)
        assert np.all(gaps >= -1e-12)
        assert gaps[0] >= gaps[-1]


class TestRunExperiment:
    def test_csv_row_count_invariant(self, tmp_path):
        config = tiny_regression_config(global_rounds=1, local_steps_per_round=1)
        suite = ExperimentSuite(config=config, seeds=(0,), output_dir=tmp_path)
        result = run_experiment(suite)
        lines = result.artifacts["rounds"].read_text().strip().splitlines()
        assert lines[0] == "round,seed,algorithm,global_loss"
        assert len(lines) - 1 == 1 * 3 * 1

    def test_row_count_scales_with_seeds_and_rounds(self, tmp_path):
        config = tiny_regression_config()
        suite = ExperimentSuite(config=config, seeds=(0, 1), output_dir=tmp_path)
        result = run_experiment(suite)
        lines = result.artifacts["rounds"].read_text().strip().splitlines()
        assert len(lines) - 1 == 2 * 3 * config.global_rounds

    def test_summary_recomputable_from_csv(self, tmp_path):
        config = tiny_regression_config()
        suite = ExperimentSuite(config=config, seeds=(0, 1, 2), output_dir=tmp_path)
        result = run_experiment(suite)
        by_algorithm: dict[str, dict[int, list[float]]] = {}
        rows = result.artifacts["rounds"].read_text().strip().splitlines()[1:]
        for row in rows:
            round_index, seed, algorithm, loss = row.split(",")
            by_algorithm.setdefault(algorithm, {}).setdefault(int(seed), []).append(float(loss))
        for algorithm in config.algorithms:
            curves = np.array([by_algorithm[algorithm][s] for s in suite.seeds])
            np.testing.assert_allclose(
                curves.mean(axis=0), result.stats.mean_loss[algorithm], atol=1e-12
            )
            np.testing.assert_allclose(
                curves.std(axis=0), result.stats.std_loss[algorithm], atol=1e-12
            )
        # the plot-data file repeats the same statistics and parses as plain floats
        plot_rows = result.artifacts["plotdata"].read_text().strip().splitlines()[1:]
        for row in plot_rows:
            round_index, algorithm, mean, std = row.split(",")
            assert float(mean) == result.stats.mean_loss[algorithm][int(round_index)]
            assert float(std) == result.stats.std_loss[algorithm][int(round_index)]

    def test_rerun_produces_identical_bytes(self, tmp_path):
        config = tiny_regression_config()
        outputs = []
        for run in range(2):
            suite = ExperimentSuite(config=config, seeds=(0, 1), output_dir=tmp_path / str(run))
            result = run_experiment(suite)
            outputs.append(
                {
                    name: result.artifacts[name].read_bytes()
                    for name in ("rounds", "plotdata", "summary", "gaps")
                }
            )
        assert outputs[0] == outputs[1]

    def test_figure_is_rendered_next_to_csv(self, tmp_path):
        config = tiny_regression_config()
        suite = ExperimentSuite(config=config, seeds=(0,), output_dir=tmp_path)
        result = run_experiment(suite)
        figure = result.artifacts["figure"]
        assert figure.parent == result.artifacts["rounds"].parent
        payload = figure.read_bytes()
        assert payload[:8] == b"\x89PNG\r\n\x1a\n"

    def test_summary_document_fields(self, tmp_path):
        config = tiny_regression_config()
        suite = ExperimentSuite(config=config, seeds=(0, 1), output_dir=tmp_path)
        result = run_experiment(suite)
        doc = json.loads(result.artifacts["summary"].read_text())
        assert set(doc["algorithms"]) == {"fedavg_full", "fedavg_k", "fedavot"}
        assert "fedavgk_expected_scale" in doc
        assert "rate_slope" in doc
        assert doc["rounds"] == config.global_rounds

    def test_infeasible_pairing_aborts_with_witness(self, tmp_path):
        config = tiny_regression_config(
            name="refused",
            availability=ExplicitAvailability(
                events=((0,), (0, 1)), q=np.array([0.5, 0.5])
            ),
            n_clients=2,
            importance=np.array([0.1, 0.9]),
            allow_unconverged=False,
        )
        suite = ExperimentSuite(config=config, seeds=(0,), output_dir=tmp_path)
        with pytest.raises(StructuralInfeasibilityError, match="violating subset"):
            run_experiment(suite)

    def test_empty_seed_list_rejected(self, tmp_path):
        with pytest.raises(ValidationError, match="seed"):
            ExperimentSuite(config=tiny_regression_config(), seeds=(), output_dir=tmp_path)


class TestNamedConfigs:
    def test_restricted_defaults_match_contract(self):
        config = restricted_regression_config()
        assert config.n_clients == 100
        assert config.task.dimension == 10
        assert config.global_rounds == 200
        assert config.local_steps_per_round == 5
        assert isinstance(config.availability, PairPrior)
        # importance decreasing, availability prior increasing
        assert config.importance[0] > config.importance[-1]
        assert config.availability.prior[0] < config.availability.prior[-1]

    def test_coordinated_defaults_match_contract(self):
        config = coordinated_classification_config()
        assert config.n_clients == 100
        assert config.task.n_classes == 10
        assert config.global_rounds == 300
        expected = exponential_decay_importance(100)
        np.testing.assert_allclose(config.importance, expected)
        np.testing.assert_allclose(config.availability.prior, np.full(100, 0.01))

    def test_blob_fallback_generates_without_external_data(self):
        config = coordinated_classification_config(n_clients=8)
        task = build_task(config, seed=0)
        assert task.features.shape == (8, 50, 20)
        theta = np.zeros(task.param_dim)
        assert np.isfinite(global_objective(theta, config.importance, task))


class TestConfigParsing:
    def test_round_trip_from_dict(self):
        doc = {
            "name": "custom",
            "n_clients": 4,
            "task": {"kind": "linear_regression", "n_per_client": 10, "dimension": 2},
            "federation": {
                "local_steps_per_round": 2,
                "global_rounds": 3,
                "step_size_base": 0.1,
                "batch_size": 5,
            },
            "importance": {"scheme": "decreasing_linear"},
            "availability": {"kind": "pair_prior", "scheme": "uniform", "subset_size": 2},
            "algorithms": ["fedavg_full", "fedavot"],
            "allow_unconverged": True,
        }
        config = experiment_config_from_dict(doc)
        assert config.n_clients == 4
        assert config.algorithms == ("fedavg_full", "fedavot")
        np.testing.assert_allclose(config.importance, decreasing_linear_importance(4))

    def test_explicit_vectors_and_availability(self):
        doc = {
            "n_clients": 2,
            "task": {"kind": "linear_regression", "n_per_client": 6, "dimension": 2},
            "federation": {
                "local_steps_per_round": 2,
                "global_rounds": 2,
                "step_size_base": 0.1,
                "batch_size": 2,
            },
            "importance": {"values": [0.25, 0.75]},
            "availability": {"kind": "explicit", "events": [[0, 1]], "q": [1.0]},
        }
        config = experiment_config_from_dict(doc)
        np.testing.assert_array_equal(config.importance, [0.25, 0.75])
        assert isinstance(config.availability, ExplicitAvailability)

    def test_unknown_algorithm_rejected(self):
        doc = {
            "n_clients": 2,
            "task": {"kind": "linear_regression"},
            "federation": {
                "local_steps_per_round": 1,
                "global_rounds": 1,
                "step_size_base": 0.1,
                "batch_size": 1,
            },
            "algorithms": ["fedprox"],
        }
        with pytest.raises(ValidationError, match="fedprox"):
            experiment_config_from_dict(doc)

    def test_unknown_task_kind_rejected(self):
        doc = {
            "n_clients": 2,
            "task": {"kind": "deep_net"},
            "federation": {
                "local_steps_per_round": 1,
                "global_rounds": 1,
                "step_size_base": 0.1,
                "batch_size": 1,
            },
        }
        with pytest.raises(ValidationError, match="task.kind"):
            experiment_config_from_dict(doc)
