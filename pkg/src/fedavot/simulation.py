"""Deterministic single-process federated training loop.

One run executes ``global_rounds * local_steps_per_round`` steps.  Steps at
multiples of the round length are communication steps: the server observes an
active client subset drawn from the availability distribution, aggregates the
previous parameters of the active clients under the configured rule, and
broadcasts the aggregate to everyone.  All other steps are local: every client
takes one projected stochastic gradient step on its own mini-batch (sampled
without replacement, reshuffled each pass).

Randomness is split from the master seed with ``numpy.random.SeedSequence``:
child 0 drives the server's availability draws and children ``1..N`` drive the
per-client batch shuffles.  Fixed config and task therefore reproduce a trace
bitwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations, permutations
from typing import Optional, Sequence, Union

import numpy as np

from .tasks import TaskSpec, global_objective
from .transport import (
    SinkhornResult,
    StructuralInfeasibilityError,
    ValidationError,
    WeightMatrix,
)

DEFAULT_EVENT_CAP = 1_000_000


@dataclass(frozen=True, eq=False)
class ExplicitAvailability:
    """Availability given directly as (events, q)."""

    events: tuple[tuple[int, ...], ...]
    q: np.ndarray


@dataclass(frozen=True, eq=False)
class PairPrior:
    """Subsets of fixed size drawn sequentially without replacement from a prior.

    For subset size 2 the event probabilities have the closed form
    ``q({a,b}) = r_a r_b (1/(1-r_a) + 1/(1-r_b))``; larger sizes are expanded
    by enumerating member orderings, guarded by ``max_events``.
    """

    prior: np.ndarray
    subset_size: int = 2
    max_events: int = DEFAULT_EVENT_CAP


AvailabilityModel = Union[ExplicitAvailability, PairPrior]


def expand_availability(model: AvailabilityModel, n_clients: int):
    """Expand a model into explicit ``(events, q)`` with lexicographic event order."""
    if isinstance(model, ExplicitAvailability):
        events = tuple(tuple(sorted(set(map(int, e)))) for e in model.events)
        return events, np.asarray(model.q, dtype=np.float64)

    r = np.asarray(model.prior, dtype=np.float64)
    if r.shape != (n_clients,):
        raise ValidationError(f"prior has shape {r.shape}, expected ({n_clients},)")
    if np.any(r < 0) or abs(float(r.sum()) - 1.0) > 1e-9:
        raise ValidationError("prior must be a probability vector")
    if np.any(r >= 1.0) and model.subset_size > 1:
        raise ValidationError("prior entries must be < 1 for without-replacement draws")
    k = model.subset_size
    if not 1 <= k <= n_clients:
        raise ValidationError(f"subset size {k} out of range for {n_clients} clients")
    n_events = math.comb(n_clients, k)
    if n_events > model.max_events:
        raise ValidationError(
            f"{n_events} subsets of size {k} exceed the configured cap of {model.max_events}"
        )

    events = tuple(combinations(range(n_clients), k))
    if k == 1:
        return events, r.copy()
    if k == 2:
        a = np.array([e[0] for e in events])
        b = np.array([e[1] for e in events])
        q = r[a] * r[b] * (1.0 / (1.0 - r[a]) + 1.0 / (1.0 - r[b]))
        return events, q
    q = np.empty(n_events)
    for idx, event in enumerate(events):
        total = 0.0
        for order in permutations(event):
            prob, remaining = 1.0, 1.0
            for client in order:
                prob *= r[client] / remaining
                remaining -= r[client]
            total += prob
        q[idx] = total
    return events, q


def sample_active_set(events: Sequence[tuple[int, ...]], q: np.ndarray, rng) -> tuple[tuple[int, ...], int]:
    """Draw one availability event by inverse-CDF on a single uniform."""
    cumulative = np.cumsum(q)
    j = int(np.searchsorted(cumulative, rng.random() * cumulative[-1], side="right"))
    j = min(j, len(events) - 1)
    return tuple(events[j]), j


def local_update(theta: np.ndarray, gradient: np.ndarray, step: float, radius: Optional[float] = None) -> np.ndarray:
    """Gradient step followed by Euclidean-ball projection when a radius is set."""
    if not np.all(np.isfinite(gradient)):
        raise ValidationError("gradient contains non-finite entries")
    updated = theta - step * gradient
    if radius is not None:
        norm = float(np.linalg.norm(updated))
        if norm > radius:
            updated = updated * (radius / norm)
    return updated


@dataclass(frozen=True)
class FedAvgFull:
    """Importance-weighted average over all clients, ignoring availability."""


@dataclass(frozen=True)
class FedAvgK:
    """Active clients upscaled by N/K times their importance (not renormalized)."""


@dataclass(frozen=True, eq=False)
class Fedavot:
    """Transport-based aggregation using a solved weight matrix.

    ``allow_unconverged`` opts into the projected-weights regime when the
    marginals could not be matched exactly (infeasible importance/availability
    pairings); without it, training refuses to start.
    """

    solution: SinkhornResult
    allow_unconverged: bool = False

    @property
    def weights(self) -> WeightMatrix:
        return self.solution.weights


AggregationRule = Union[FedAvgFull, FedAvgK, Fedavot]


def aggregate(
    rule: AggregationRule,
    states: np.ndarray,
    active: Sequence[int],
    event_index: int,
    importance: np.ndarray,
) -> np.ndarray:
    """Combine client parameter rows into the broadcast model for one round."""
    active = tuple(int(i) for i in active)
    if active and (min(active) < 0 or max(active) >= states.shape[0]):
        raise ValidationError("active set references a client out of range")
    if isinstance(rule, FedAvgFull):
        return importance @ states
    if isinstance(rule, FedAvgK):
        k = len(active)
        scale = states.shape[0] / k
        idx = np.fromiter(active, dtype=np.int64)
        return (scale * importance[idx]) @ states[idx]
    clients, weights = rule.weights.column(event_index)
    if weights.sum() <= 0.0:
        raise ValidationError(
            f"aggregation weights for event {event_index} sum to zero "
            "(weight matrix does not match the availability mask)"
        )
    if tuple(int(c) for c in clients) != tuple(sorted(active)):
        raise ValidationError(
            f"event {event_index} weight column covers clients {clients.tolist()} "
            f"but the active set is {sorted(active)}"
        )
    return weights @ states[clients]


@dataclass(frozen=True, eq=False)
class FederationConfig:
    """Complete specification of one training run."""

    n_clients: int
    local_steps_per_round: int
    global_rounds: int
    step_size_base: float
    batch_size: int
    seed: int
    aggregation: AggregationRule
    availability: AvailabilityModel
    importance: np.ndarray
    projection_radius: Optional[float] = 1000.0
    skip_idle_updates: bool = False

    @property
    def step_size(self) -> float:
        return self.step_size_base / math.sqrt(self.global_rounds * self.local_steps_per_round)


@dataclass(frozen=True, eq=False)
class RoundRecord:
    round_index: int
    event_index: int
    active: tuple[int, ...]
    model: np.ndarray
    global_loss: float


@dataclass(frozen=True, eq=False)
class TrainingTrace:
    """Per-round aggregates plus the running average of all aggregated models."""

    seed: int
    records: list[RoundRecord]
    average_model: np.ndarray
    average_model_loss: float

    @property
    def losses(self) -> np.ndarray:
        return np.array([record.global_loss for record in self.records])

    @property
    def models(self) -> np.ndarray:
        return np.stack([record.model for record in self.records])


def _validate_config(config: FederationConfig, task: TaskSpec) -> None:
    if config.local_steps_per_round < 1:
        raise ValidationError("local_steps_per_round must be >= 1")
    if config.global_rounds < 1:
        raise ValidationError("global_rounds must be >= 1")
    if config.step_size_base <= 0:
        raise ValidationError("step_size_base must be positive")
    if config.batch_size < 1:
        raise ValidationError("batch_size must be >= 1")
    if config.batch_size > task.n_per_client:
        raise ValidationError(
            f"batch_size {config.batch_size} exceeds samples per client {task.n_per_client}"
        )
    if task.n_clients != config.n_clients:
        raise ValidationError(
            f"task has {task.n_clients} clients but config expects {config.n_clients}"
        )
    if config.skip_idle_updates and config.local_steps_per_round != 1:
        raise ValidationError(
            "skip_idle_updates is only trace-preserving when local_steps_per_round == 1"
        )
    p = np.asarray(config.importance, dtype=np.float64)
    if p.shape != (config.n_clients,):
        raise ValidationError("importance length must match n_clients")


def _validate_fedavot(rule: Fedavot, events: tuple[tuple[int, ...], ...]) -> None:
    weights = rule.weights
    if weights.n_events != len(events):
        raise ValidationError(
            f"weight matrix has {weights.n_events} events, availability has {len(events)}"
        )
    for j, event in enumerate(events):
        clients, _ = weights.column(j)
        if tuple(int(c) for c in clients) != event:
            raise ValidationError(
                f"weight matrix mask disagrees with availability at event {j}"
            )
    if not rule.solution.converged and not rule.allow_unconverged:
        raise StructuralInfeasibilityError(
            "transport weights did not converge (row residual "
            f"{rule.solution.row_residual_l1!r}); the importance/availability pairing "
            "is infeasible for exact matching - pass allow_unconverged to run with "
            "the projected weights"
        )


def run_training(config: FederationConfig, task: TaskSpec) -> TrainingTrace:
    """Run the full communication/local-update schedule and log every round."""
    _validate_config(config, task)
    events, q = expand_availability(config.availability, config.n_clients)
    rule = config.aggregation
    if isinstance(rule, Fedavot):
        _validate_fedavot(rule, events)

    n = config.n_clients
    p = np.asarray(config.importance, dtype=np.float64)
    streams = np.random.SeedSequence(config.seed).spawn(n + 1)
    server_rng = np.random.default_rng(streams[0])
    client_rngs = [np.random.default_rng(s) for s in streams[1:]]

    samples = task.n_per_client
    permutations_ = np.stack([rng.permutation(samples) for rng in client_rngs])
    cursor = 0

    eta = config.step_size
    theta = np.zeros((n, task.param_dim))
    records: list[RoundRecord] = []
    model_sum = np.zeros(task.param_dim)

    total_steps = config.global_rounds * config.local_steps_per_round
    for t in range(total_steps):
        if t % config.local_steps_per_round == 0:
            active, j = sample_active_set(events, q, server_rng)
            model = aggregate(rule, theta, active, j, p)
            theta[:] = model
            loss = global_objective(model, p, task)
            records.append(
                RoundRecord(
                    round_index=len(records),
                    event_index=j,
                    active=active,
                    model=model.copy(),
                    global_loss=loss,
                )
            )
            model_sum += model
        else:
            if cursor + config.batch_size > samples:
                permutations_ = np.stack([rng.permutation(samples) for rng in client_rngs])
                cursor = 0
            batch = permutations_[:, cursor : cursor + config.batch_size]
            cursor += config.batch_size
            gradients = task.minibatch_gradients(theta, batch)
            if not np.all(np.isfinite(gradients)):
                bad = int(np.flatnonzero(~np.isfinite(gradients).all(axis=1))[0])
                raise ValidationError(f"client {bad} produced a non-finite gradient")
            theta = theta - eta * gradients
            if config.projection_radius is not None:
                norms = np.linalg.norm(theta, axis=1)
                over = norms > config.projection_radius
                if np.any(over):
                    theta[over] *= (config.projection_radius / norms[over])[:, None]

    average_model = model_sum / config.global_rounds
    return TrainingTrace(
        seed=config.seed,
        records=records,
        average_model=average_model,
        average_model_loss=global_objective(average_model, p, task),
    )


def expected_aggregate_weight(weights: WeightMatrix, events, q) -> np.ndarray:
    """Exact expected aggregation weight per client: sum_j q_j Y[i,j] over events containing i."""
    q = np.asarray(q, dtype=np.float64)
    if len(events) != q.size or weights.n_events != q.size:
        raise ValidationError("events, q and weight matrix sizes disagree")
    return np.bincount(
        weights.row_index,
        weights=q[weights.col_index] * weights.values,
        minlength=weights.n_clients,
    )


def fedavgk_expected_scale(p, events, q, subset_size: int) -> float:
    """Expected total weight of the N/K-upscaled partial average.

    Deviation from 1 quantifies the amplitude distortion of the upscaled rule
    under a non-uniform availability/importance pairing.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    sizes = {len(e) for e in events}
    if sizes != {subset_size}:
        raise ValidationError(f"expected all events of size {subset_size}, found sizes {sorted(sizes)}")
    n = p.size
    event_mass = np.array([p[list(e)].sum() for e in events])
    return float(q @ event_mass * (n / subset_size))
