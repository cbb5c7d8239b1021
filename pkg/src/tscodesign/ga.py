"""Small real-coded genetic algorithm for global pre-search.

Used to seed the GP hyperparameter likelihood maximization and to
optimize acquisition functions; callers follow up with a local polish.
Deterministic given the RNG.
"""

from __future__ import annotations

import numpy as np


def ga_minimize(
    fn,
    lower,
    upper,
    rng: np.random.Generator,
    pop_size: int = 40,
    generations: int = 60,
    vectorized: bool = False,
    x0=None,
):
    """Minimize fn over the box [lower, upper].

    fn maps (d,) -> float, or (n, d) -> (n,) when vectorized. Optional x0
    rows are injected into the initial population. Returns (x_best, f_best).
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    d = lower.size
    span = upper - lower

    pop = lower + span * rng.random((pop_size, d))
    if x0 is not None:
        x0 = np.atleast_2d(np.asarray(x0, dtype=float))
        pop[: len(x0)] = np.clip(x0, lower, upper)

    def evaluate(P):
        if vectorized:
            return np.asarray(fn(P), dtype=float)
        return np.array([fn(p) for p in P], dtype=float)

    fitness = evaluate(pop)
    best_i = int(np.nanargmin(fitness))
    x_best, f_best = pop[best_i].copy(), float(fitness[best_i])

    for gen in range(generations):
        # binary tournaments
        idx = rng.integers(0, pop_size, size=(2, 2 * pop_size))
        winners = np.where(
            (fitness[idx[0]] <= fitness[idx[1]])[:, None], pop[idx[0]], pop[idx[1]]
        )
        pa, pb = winners[:pop_size], winners[pop_size:]
        # blend crossover
        gamma = rng.uniform(-0.25, 1.25, size=(pop_size, d))
        children = pa + gamma * (pb - pa)
        # gaussian mutation, shrinking with generation
        scale = 0.15 * (1.0 - 0.9 * gen / max(generations - 1, 1))
        mask = rng.random((pop_size, d)) < 0.25
        children += mask * rng.normal(0.0, scale, size=(pop_size, d)) * span
        children = np.clip(children, lower, upper)
        children[0] = x_best  # elitism

        pop = children
        fitness = evaluate(pop)
        fitness = np.where(np.isfinite(fitness), fitness, np.inf)
        i = int(np.argmin(fitness))
        if fitness[i] < f_best:
            x_best, f_best = pop[i].copy(), float(fitness[i])

    return x_best, f_best
