"""Shared random-instance generators for the test suite."""

from __future__ import annotations

import numpy as np

from fedavot import build_problem


def random_instance(rng, n_max=12, m_max=30):
    """A random transport problem: random masks, random simplex marginals."""
    n = int(rng.integers(1, n_max + 1))
    m = int(rng.integers(1, m_max + 1))
    events = []
    for _ in range(m):
        size = int(rng.integers(1, min(n, 4) + 1))
        events.append(sorted(rng.choice(n, size=size, replace=False).tolist()))
    p = rng.dirichlet(np.ones(n))
    q = rng.dirichlet(np.ones(m))
    return build_problem(p, q, events)


def random_feasible_instance(rng, n_max=12, m_max=30, min_event=1, max_event=4):
    """A provably feasible problem: sample a masked plan, read off its marginals."""
    n = int(rng.integers(1, n_max + 1))
    m = int(rng.integers(1, m_max + 1))
    events = []
    for _ in range(m):
        size = int(rng.integers(min_event, min(n, max_event) + 1))
        events.append(sorted(rng.choice(n, size=size, replace=False).tolist()))
    mass = []
    for event in events:
        mass.append(rng.uniform(0.1, 1.0, size=len(event)))
    total = sum(float(v.sum()) for v in mass)
    p = np.zeros(n)
    q = np.zeros(m)
    for j, (event, values) in enumerate(zip(events, mass)):
        values /= total
        q[j] = values.sum()
        for i, v in zip(event, values):
            p[i] += v
    # counteract accumulated round-off so the simplex validation passes exactly
    p /= p.sum()
    q /= q.sum()
    return build_problem(p, q, events)
