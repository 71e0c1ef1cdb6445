"""Masked optimal transport between an availability distribution and an importance distribution.

A transport problem couples an importance vector ``p`` over ``N`` clients with an
availability vector ``q`` over ``M`` participation events (client subsets).  A
transport plan is a nonnegative ``N x M`` matrix supported only on the mask
``{(i, j): client i belongs to event j}`` whose row sums should match ``p`` and
whose column sums should match ``q``.  Plans are stored sparsely as parallel
coordinate arrays in column-major order, so off-mask entries are unrepresentable
by construction.

The solver is plain iterative proportional fitting (row scaling followed by
column scaling).  Because the column pass runs last, column marginals are exact
after every full pass; on infeasible instances the row residual converges to a
strictly positive limit while columns stay exact, and the column-normalized
weights remain valid convex combinations per event.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

SIMPLEX_TOL = 1e-9
DEFAULT_EPSILON = 1e-8
DEFAULT_MAX_ITERATIONS = 100_000


class ValidationError(ValueError):
    """Raised when inputs violate a documented precondition."""


class StructuralInfeasibilityError(RuntimeError):
    """Raised when the mask structure makes marginal matching impossible.

    A client with positive importance but zero incoming mass certifies a
    violated subset inequality (take the singleton subset of that client).
    """


def _as_prob_vector(values, name: str) -> np.ndarray:
    vec = np.asarray(values, dtype=np.float64)
    if vec.ndim != 1 or vec.size == 0:
        raise ValidationError(f"{name} must be a nonempty 1-D vector")
    if not np.all(np.isfinite(vec)):
        raise ValidationError(f"{name} contains non-finite entries")
    if np.any(vec < 0):
        worst = int(np.argmin(vec))
        raise ValidationError(f"{name}[{worst}] = {vec[worst]!r} is negative")
    total = float(vec.sum())
    if abs(total - 1.0) > SIMPLEX_TOL:
        raise ValidationError(f"{name} sums to {total!r}, expected 1.0")
    return vec


def _frozen(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


@dataclass(frozen=True, eq=False)
class TransportProblem:
    """A masked transport instance: marginals plus the event membership mask.

    ``row_index``/``col_index`` enumerate the mask coordinates in column-major
    order (all members of event 0, then event 1, ...); every sparse matrix tied
    to this problem shares that coordinate ordering.
    """

    n_clients: int
    n_events: int
    importance: np.ndarray
    availability: np.ndarray
    events: tuple[tuple[int, ...], ...]
    row_index: np.ndarray
    col_index: np.ndarray
    dropped_events: tuple[int, ...]

    @property
    def mask_size(self) -> int:
        return self.row_index.size

    @property
    def event_sizes(self) -> np.ndarray:
        return np.bincount(self.col_index, minlength=self.n_events).astype(np.int64)


@dataclass(frozen=True, eq=False)
class TransportPlan:
    """Nonnegative mass on the mask coordinates of a problem (column-major)."""

    n_clients: int
    n_events: int
    row_index: np.ndarray
    col_index: np.ndarray
    values: np.ndarray

    def row_sums(self) -> np.ndarray:
        return np.bincount(self.row_index, weights=self.values, minlength=self.n_clients)

    def col_sums(self) -> np.ndarray:
        return np.bincount(self.col_index, weights=self.values, minlength=self.n_events)

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.n_clients, self.n_events))
        dense[self.row_index, self.col_index] = self.values
        return dense

    def triplets(self) -> list[tuple[int, int, float]]:
        """Mask entries as ``(client, event, value)`` rows."""
        return [
            (int(i), int(j), float(v))
            for i, j, v in zip(self.row_index, self.col_index, self.values)
        ]


@dataclass(frozen=True, eq=False)
class WeightMatrix:
    """Per-event aggregation weights: the column normalization of a plan.

    Columns flagged in ``zero_mass_events`` had zero availability and are
    emitted as all-zero rather than divided through.
    """

    n_clients: int
    n_events: int
    row_index: np.ndarray
    col_index: np.ndarray
    values: np.ndarray
    zero_mass_events: tuple[int, ...] = ()

    def column(self, event: int) -> tuple[np.ndarray, np.ndarray]:
        """Client indices and weights for one event column."""
        lo, hi = np.searchsorted(self.col_index, [event, event + 1])
        return self.row_index[lo:hi], self.values[lo:hi]

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.n_clients, self.n_events))
        dense[self.row_index, self.col_index] = self.values
        return dense


@dataclass(frozen=True, eq=False)
class SinkhornResult:
    plan: TransportPlan
    weights: WeightMatrix
    iterations: int
    row_residual_l1: float
    col_residual_l1: float
    converged: bool


def build_problem(p, q, events: Iterable[Iterable[int]]) -> TransportProblem:
    """Validate marginals and event sets and assemble the mask.

    Events with exactly zero availability are dropped (their original indices
    are recorded in ``dropped_events``) so every retained column carries
    positive mass.
    """
    importance = _as_prob_vector(p, "p")
    availability = _as_prob_vector(q, "q")
    n_clients = importance.size

    raw_events = [tuple(sorted({int(i) for i in event})) for event in events]
    if len(raw_events) != availability.size:
        raise ValidationError(
            f"got {len(raw_events)} events but q has {availability.size} entries"
        )
    for j, event in enumerate(raw_events):
        if not event:
            raise ValidationError(f"event {j} is empty")
        if event[0] < 0 or event[-1] >= n_clients:
            raise ValidationError(
                f"event {j} references client outside [0, {n_clients})"
            )

    keep = availability > 0.0
    dropped = tuple(int(j) for j in np.flatnonzero(~keep))
    kept_events = tuple(e for j, e in enumerate(raw_events) if keep[j])
    kept_q = availability[keep]
    if kept_events:
        row_index = np.concatenate([np.array(e, dtype=np.int64) for e in kept_events])
        col_index = np.repeat(
            np.arange(len(kept_events), dtype=np.int64),
            [len(e) for e in kept_events],
        )
    else:
        row_index = np.empty(0, dtype=np.int64)
        col_index = np.empty(0, dtype=np.int64)

    return TransportProblem(
        n_clients=n_clients,
        n_events=len(kept_events),
        importance=_frozen(importance),
        availability=_frozen(kept_q),
        events=kept_events,
        row_index=_frozen(row_index),
        col_index=_frozen(col_index),
        dropped_events=dropped,
    )


def _make_plan(problem: TransportProblem, values: np.ndarray) -> TransportPlan:
    return TransportPlan(
        n_clients=problem.n_clients,
        n_events=problem.n_events,
        row_index=problem.row_index,
        col_index=problem.col_index,
        values=_frozen(values),
    )


def init_plan(problem: TransportProblem) -> TransportPlan:
    """Initial plan splitting each event's mass evenly over its members.

    Column sums equal the availability vector exactly.
    """
    sizes = problem.event_sizes
    values = problem.availability[problem.col_index] / sizes[problem.col_index]
    return _make_plan(problem, values)


def marginal_residuals(plan: TransportPlan, problem: TransportProblem) -> tuple[float, float]:
    """L1 distances of the plan's row and column sums from (p, q)."""
    if plan.n_clients != problem.n_clients or plan.n_events != problem.n_events:
        raise ValidationError("plan and problem shapes disagree")
    row = float(np.abs(plan.row_sums() - problem.importance).sum())
    col = float(np.abs(plan.col_sums() - problem.availability).sum())
    return row, col


def _scaling_pass(values: np.ndarray, problem: TransportProblem) -> np.ndarray:
    """One row-then-column proportional fitting pass (column marginals exact on exit).

    Zero rows/columns are left untouched instead of dividing by zero; their
    deficits surface through the residuals.
    """
    p, q = problem.importance, problem.availability
    row_sums = np.bincount(problem.row_index, weights=values, minlength=problem.n_clients)
    row_scale = np.divide(p, row_sums, out=np.zeros_like(p), where=row_sums > 0)
    values = values * row_scale[problem.row_index]
    col_sums = np.bincount(problem.col_index, weights=values, minlength=problem.n_events)
    col_scale = np.divide(q, col_sums, out=np.zeros_like(q), where=col_sums > 0)
    return values * col_scale[problem.col_index]


def sinkhorn_step(plan: TransportPlan, problem: TransportProblem) -> TransportPlan:
    """Apply one full scaling pass to ``plan``.

    Unlike the tolerant loop in :func:`solve_sinkhorn`, a single step demands a
    strictly positive row sum for every client with positive importance and
    aborts otherwise, since the zero row certifies structural infeasibility.
    """
    if plan.n_clients != problem.n_clients or plan.n_events != problem.n_events:
        raise ValidationError("plan and problem shapes disagree")
    row_sums = plan.row_sums()
    starved = (problem.importance > 0) & (row_sums <= 0)
    if np.any(starved):
        client = int(np.flatnonzero(starved)[0])
        raise StructuralInfeasibilityError(
            f"client {client} has importance {problem.importance[client]!r} but "
            "receives zero mass from every event it belongs to"
        )
    return _make_plan(problem, _scaling_pass(np.array(plan.values), problem))


def solve_sinkhorn(
    problem: TransportProblem,
    epsilon: float = DEFAULT_EPSILON,
    max_iterations: int = DEFAULT_MAX_ITERATIONS,
) -> SinkhornResult:
    """Iterate proportional fitting until both L1 residuals drop below ``epsilon``.

    On feasible instances this converges; on infeasible ones the column
    residual stays at round-off while the row residual settles at a positive
    limit (the row marginal is then the closest matchable importance, a
    KL projection of ``p``), and ``converged`` is False.  Clients that belong
    to no event simply keep zero mass; their importance shows up in the row
    residual rather than aborting the solve.
    """
    if not epsilon > 0:
        raise ValidationError(f"epsilon must be positive, got {epsilon!r}")
    if max_iterations < 1:
        raise ValidationError(f"max_iterations must be >= 1, got {max_iterations!r}")

    values = np.array(init_plan(problem).values)
    iterations = 0
    row_res = col_res = np.inf
    for iterations in range(1, max_iterations + 1):
        values = _scaling_pass(values, problem)
        row_sums = np.bincount(problem.row_index, weights=values, minlength=problem.n_clients)
        col_sums = np.bincount(problem.col_index, weights=values, minlength=problem.n_events)
        row_res = float(np.abs(row_sums - problem.importance).sum())
        col_res = float(np.abs(col_sums - problem.availability).sum())
        if row_res <= epsilon and col_res <= epsilon:
            break

    plan = _make_plan(problem, values)
    return SinkhornResult(
        plan=plan,
        weights=normalize_weights(plan, problem.availability),
        iterations=iterations,
        row_residual_l1=row_res,
        col_residual_l1=col_res,
        converged=row_res <= epsilon and col_res <= epsilon,
    )


def normalize_weights(plan: TransportPlan, q) -> WeightMatrix:
    """Divide each plan column by its availability mass: ``Y[i,j] = T[i,j]/q_j``.

    Columns with ``q_j = 0`` are emitted as all-zero and flagged.
    """
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (plan.n_events,):
        raise ValidationError(
            f"q has shape {q.shape}, expected ({plan.n_events},)"
        )
    safe = q > 0
    scale = np.divide(1.0, q, out=np.zeros_like(q), where=safe)
    values = plan.values * scale[plan.col_index]
    return WeightMatrix(
        n_clients=plan.n_clients,
        n_events=plan.n_events,
        row_index=plan.row_index,
        col_index=plan.col_index,
        values=_frozen(values),
        zero_mass_events=tuple(int(j) for j in np.flatnonzero(~safe)),
    )


def uniform_weights(problem: TransportProblem) -> WeightMatrix:
    """Classic federated-averaging weights: ``1/|A_j|`` for every member of event j."""
    sizes = problem.event_sizes
    values = 1.0 / sizes[problem.col_index]
    return WeightMatrix(
        n_clients=problem.n_clients,
        n_events=problem.n_events,
        row_index=problem.row_index,
        col_index=problem.col_index,
        values=_frozen(values),
    )


def implied_importance(q, events: Sequence[Iterable[int]], n_clients: int | None = None) -> np.ndarray:
    """Effective per-client weight induced by uniform intra-event averaging.

    Client i accumulates ``q_j / |A_j|`` over the events containing it; the
    result sums to one whenever q does.  Without an explicit ``n_clients`` the
    vector covers clients up to the largest event member.
    """
    q = np.asarray(q, dtype=np.float64)
    event_tuples = [tuple(sorted({int(i) for i in e})) for e in events]
    if len(event_tuples) != q.size:
        raise ValidationError(f"got {len(event_tuples)} events but q has {q.size} entries")
    if any(not e for e in event_tuples):
        raise ValidationError("events must be nonempty")
    if n_clients is None:
        n_clients = max(max(e) for e in event_tuples) + 1
    out = np.zeros(n_clients)
    for prob, event in zip(q, event_tuples):
        share = prob / len(event)
        for i in event:
            out[i] += share
    return out


def problem_to_dict(problem: TransportProblem) -> dict:
    return {
        "p": problem.importance.tolist(),
        "q": problem.availability.tolist(),
        "events": [list(e) for e in problem.events],
    }


def problem_from_dict(doc: dict) -> TransportProblem:
    try:
        p, q, events = doc["p"], doc["q"], doc["events"]
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"problem document missing field: {exc}") from exc
    return build_problem(p, q, events)


def load_problem(path) -> TransportProblem:
    with open(path, "r", encoding="utf-8") as handle:
        try:
            doc = json.load(handle)
        except json.JSONDecodeError as exc:
            raise ValidationError(
                f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}"
            ) from exc
    return problem_from_dict(doc)


def plan_to_dict(plan: TransportPlan) -> dict:
    return {
        "n_clients": plan.n_clients,
        "n_events": plan.n_events,
        "entries": [[i, j, v] for i, j, v in plan.triplets()],
    }


def plan_from_dict(doc: dict) -> TransportPlan:
    try:
        n_clients = int(doc["n_clients"])
        n_events = int(doc["n_events"])
        entries = doc["entries"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"plan document malformed: {exc}") from exc
    rows = np.array([int(e[0]) for e in entries], dtype=np.int64)
    cols = np.array([int(e[1]) for e in entries], dtype=np.int64)
    values = np.array([float(e[2]) for e in entries])
    if np.any(values < 0):
        raise ValidationError("plan entries must be nonnegative")
    order = np.lexsort((rows, cols))
    return TransportPlan(
        n_clients=n_clients,
        n_events=n_events,
        row_index=_frozen(rows[order]),
        col_index=_frozen(cols[order]),
        values=_frozen(values[order]),
    )
