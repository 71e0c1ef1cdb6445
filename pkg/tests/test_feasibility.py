"""Tests for the flow-network feasibility check and its brute-force oracle."""

from __future__ import annotations

import numpy as np
import pytest

from conftest import random_feasible_instance, random_instance
from fedavot import (
    ValidationError,
    build_flow_network,
    build_problem,
    check_feasible_hall,
    check_feasible_maxflow,
    expand_availability,
    max_flow,
    solve_sinkhorn,
    subset_inequalities,
)
from fedavot.feasibility import FEASIBILITY_TOL, FlowNetwork
from fedavot.simulation import PairPrior


def assert_witness_valid(problem, verdict):
    """The reported subset must violate the reported side by more than 1e-12."""
    q_contained, p_mass, q_touching = subset_inequalities(problem, verdict.violating_subset)
    if verdict.violated_side == "lower":
        assert q_contained - p_mass > 1e-12
    else:
        assert p_mass - q_touching > 1e-12


class TestBuildFlowNetwork:
    def test_minimal_instance(self):
        network = build_flow_network(build_problem([1.0], [1.0], [[0]]))
        assert network.n_nodes == 4
        assert network.tails.size == 3

    def test_arc_count_formula(self):
        problem = build_problem([0.5, 0.5], [0.3, 0.7], [[0], [0, 1]])
        network = build_flow_network(problem)
        assert network.tails.size == 2 + 3 + 2

    def test_pair_mask_scale(self):
        events, q = expand_availability(
            PairPrior(prior=np.full(100, 0.01), subset_size=2), 100
        )
        problem = build_problem(np.full(100, 0.01), q, events)
        network = build_flow_network(problem)
        assert network.tails.size == 100 + 9900 + 4950

    def test_source_and_sink_are_terminal(self):
        problem = build_problem([0.5, 0.5], [0.3, 0.7], [[0], [0, 1]])
        network = build_flow_network(problem)
        assert not np.any(network.heads == network.source)
        assert not np.any(network.tails == network.sink)
        assert np.all(network.capacities >= 0)


class TestMaxFlow:
    def test_feasible_instance_routes_full_mass(self):
        problem = build_problem([0.5, 0.5], [0.3, 0.7], [[0], [0, 1]])
        assert max_flow(build_flow_network(problem)) == pytest.approx(1.0, abs=1e-12)

    def test_unreachable_client_caps_flow(self):
        problem = build_problem([0.5, 0.5], [1.0], [[0]])
        assert max_flow(build_flow_network(problem)) == pytest.approx(0.5, abs=1e-12)

    def test_flow_scales_linearly_with_capacities(self):
        problem = build_problem([0.5, 0.5], [0.3, 0.7], [[0], [0, 1]])
        network = build_flow_network(problem)
        scaled = FlowNetwork(
            n_clients=network.n_clients,
            n_events=network.n_events,
            tails=network.tails,
            heads=network.heads,
            capacities=0.5 * network.capacities,
        )
        assert max_flow(scaled) == pytest.approx(0.5 * max_flow(network), abs=1e-12)


class TestMaxflowVerdicts:
    def test_full_participation_is_feasible(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            n = int(rng.integers(1, 8))
            problem = build_problem(rng.dirichlet(np.ones(n)), [1.0], [list(range(n))])
            assert check_feasible_maxflow(problem).feasible

    def test_never_available_client(self):
        problem = build_problem([0.5, 0.5], [1.0], [[0]])
        verdict = check_feasible_maxflow(problem)
        assert not verdict.feasible
        assert verdict.max_flow_value == pytest.approx(0.5, abs=1e-12)
        assert verdict.violating_subset == (1,)
        assert verdict.violated_side == "upper"
        assert_witness_valid(problem, verdict)

    def test_overweight_singleton_event(self):
        problem = build_problem([0.5, 0.5], [0.9, 0.1], [[0], [0, 1]])
        verdict = check_feasible_maxflow(problem)
        assert not verdict.feasible
        assert_witness_valid(problem, verdict)
        # the complementary witness: lower bound fails for {0} by direct evaluation
        q_contained, p_mass, _ = subset_inequalities(problem, (0,))
        assert q_contained == pytest.approx(0.9)
        assert q_contained - p_mass > 1e-12


class TestHallChecker:
    def test_agrees_on_worked_instances(self):
        instances = [
            build_problem([0.5, 0.5], [0.3, 0.7], [[0], [0, 1]]),
            build_problem([0.5, 0.5], [1.0], [[0]]),
            build_problem([0.5, 0.5], [0.9, 0.1], [[0], [0, 1]]),
        ]
        for problem in instances:
            assert (
                check_feasible_hall(problem).feasible
                == check_feasible_maxflow(problem).feasible
            )

    def test_reports_lexicographically_first_violation(self):
        problem = build_problem([0.5, 0.5], [0.9, 0.1], [[0], [0, 1]])
        verdict = check_feasible_hall(problem)
        assert verdict.violating_subset == (0,)
        assert verdict.violated_side == "lower"
        assert_witness_valid(problem, verdict)

    def test_guard_directs_to_maxflow(self):
        n = 25
        problem = build_problem(
            np.full(n, 1.0 / n), [1.0], [list(range(n))]
        )
        with pytest.raises(ValidationError, match="max-flow"):
            check_feasible_hall(problem)

    def test_random_feasible_instances_pass(self):
        rng = np.random.default_rng(23)
        for _ in range(20):
            problem = random_feasible_instance(rng, n_max=10, m_max=20)
            assert check_feasible_hall(problem).feasible


class TestOracleEquivalence:
    def test_verdicts_match_on_random_instances(self):
        rng = np.random.default_rng(101)
        mismatches = []
        for trial in range(300):
            problem = random_instance(rng, n_max=12, m_max=30)
            flow = check_feasible_maxflow(problem)
            hall = check_feasible_hall(problem)
            if flow.feasible != hall.feasible:
                mismatches.append(trial)
            if not flow.feasible:
                assert_witness_valid(problem, flow)
            if not hall.feasible:
                assert_witness_valid(problem, hall)
        assert mismatches == []

    def test_implied_flow_value_close_to_dinic(self):
        rng = np.random.default_rng(37)
        for _ in range(50):
            problem = random_instance(rng, n_max=9, m_max=16)
            flow = check_feasible_maxflow(problem)
            hall = check_feasible_hall(problem)
            assert flow.max_flow_value == pytest.approx(hall.max_flow_value, abs=1e-9)


class TestConsistencyWithSolver:
    def test_feasible_verdict_implies_convergence(self):
        rng = np.random.default_rng(29)
        for _ in range(30):
            problem = random_feasible_instance(rng, n_max=12, m_max=30)
            assert check_feasible_maxflow(problem).feasible
            result = solve_sinkhorn(problem, epsilon=1e-8)
            assert result.converged


class TestMonotonicity:
    def test_adding_members_preserves_feasibility(self):
        rng = np.random.default_rng(31)
        checked = 0
        while checked < 40:
            problem = random_instance(rng, n_max=8, m_max=12)
            if not check_feasible_maxflow(problem).feasible:
                continue
            events = [list(e) for e in problem.events]
            j = int(rng.integers(len(events)))
            missing = sorted(set(range(problem.n_clients)) - set(events[j]))
            if not missing:
                continue
            events[j].append(int(rng.choice(missing)))
            widened = build_problem(problem.importance, problem.availability, events)
            assert check_feasible_maxflow(widened).feasible
            assert check_feasible_hall(widened).feasible
            checked += 1


class TestTolerance:
    def test_threshold_matches_flow_margin(self):
        # instance infeasible by far more than the tolerance
        problem = build_problem([0.5, 0.5], [1.0], [[0]])
        verdict = check_feasible_maxflow(problem)
        assert verdict.max_flow_value < 1.0 - FEASIBILITY_TOL
