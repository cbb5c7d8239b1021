"""Bayesian optimization: acquisitions, hypervolume, archives, EGO loop.

Single-objective search maximizes expected improvement

    EI(x) = (y_min - mu) Phi(u) + s phi(u),   u = (y_min - mu) / s

and the multi-objective variant maximizes the expected hypervolume
improvement of the predictive distribution against the current nondominated
front, evaluated with an exact cell decomposition for two objectives.
Evaluation failures train a probit classifier whose predictive probability
multiplies the acquisition ("safe" acquisition), steering the search back
into the feasible region. Acquisitions are maximized by a genetic algorithm
with a local polish.

All objectives are minimized. Stochastic objectives are modelled with the
regressive GP, and the incumbent / front used by the acquisition is then
defined on predictive means at the evaluated sites rather than on raw noisy
observations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.optimize import minimize
from scipy.stats import norm, qmc

from . import gp
from .ga import ga_minimize

REFERENCE_MARGIN = 0.05  # fraction of the per-objective observed range


class HypervolumeError(ValueError):
    """A front point fails to dominate the reference point."""


def expected_improvement(mean, variance, y_min):
    """Closed-form EI for minimization; zero variance handled exactly."""
    mean = np.asarray(mean, dtype=float)
    s = np.sqrt(np.maximum(np.asarray(variance, dtype=float), 0.0))
    diff = y_min - mean
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(s > 0, diff / np.where(s > 0, s, 1.0), 0.0)
    ei = np.where(s > 0, diff * norm.cdf(u) + s * norm.pdf(u), np.maximum(diff, 0.0))
    return np.maximum(ei, 0.0)


def pareto_front_mask(Y) -> np.ndarray:
    """Boolean mask of nondominated rows (minimization)."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    n = len(Y)
    mask = np.ones(n, dtype=bool)
    for i in range(n):
        if not mask[i]:
            continue
        dominated = np.all(Y <= Y[i], axis=1) & np.any(Y < Y[i], axis=1)
        if np.any(dominated & mask):
            mask[i] = False
    return mask


def reference_point(Y, margin: float = REFERENCE_MARGIN) -> np.ndarray:
    """Componentwise max plus a fractional-range margin."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    hi = Y.max(axis=0)
    span = hi - Y.min(axis=0)
    pad = np.where(span > 0, margin * span, np.maximum(margin * np.abs(hi), 1e-9))
    return hi + pad


def hypervolume(front, r) -> float:
    """Dominated hypervolume for 2 (sweep) or 3 (inclusion-exclusion) objectives."""
    front = np.atleast_2d(np.asarray(front, dtype=float))
    r = np.asarray(r, dtype=float)
    if front.size == 0:
        return 0.0
    if np.any(front > r):
        raise HypervolumeError("front point beyond the reference point")
    front = front[pareto_front_mask(front)]
    m = front.shape[1]
    if m == 2:
        order = np.argsort(front[:, 0])
        pts = front[order]
        hv = 0.0
        prev = r[1]
        for f1, f2 in pts:
            hv += (r[0] - f1) * (prev - f2)
            prev = f2
        return float(hv)
    if m == 3:
        n = len(front)
        if n > 20:
            raise HypervolumeError("inclusion-exclusion limited to 20 points")
        hv = 0.0
        for k in range(1, n + 1):
            for idx in combinations(range(n), k):
                corner = np.max(front[list(idx)], axis=0)
                vol = float(np.prod(np.maximum(r - corner, 0.0)))
                hv += vol if k % 2 == 1 else -vol
        return float(hv)
    raise HypervolumeError("hypervolume implemented for 2 or 3 objectives")


def _partial_expectation(t, mu, sigma):
    """E[max(t - Y, 0)] for Y ~ N(mu, sigma^2), broadcasting over arrays.

    Handles sigma = 0 (point mass) and t = -inf exactly.
    """
    t = np.asarray(t, dtype=float)
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    t, mu, sigma = np.broadcast_arrays(t, mu, sigma)
    out = np.zeros(t.shape)
    finite = np.isfinite(t)
    det = finite & (sigma <= 0.0)
    out[det] = np.maximum(t[det] - mu[det], 0.0)
    sto = finite & (sigma > 0.0)
    u = (t[sto] - mu[sto]) / sigma[sto]
    out[sto] = (t[sto] - mu[sto]) * norm.cdf(u) + sigma[sto] * norm.pdf(u)
    return out


def hvei_two_objectives_batch(means, variances, front, r) -> np.ndarray:
    """Exact expected hypervolume improvement for two independent normals.

    Cell decomposition over the nondominated staircase: with front points
    sorted ascending in the first objective (a_i, b_i), the improvement
    region splits into vertical strips whose integrals factor into
    one-dimensional partial expectations. Vectorized over query rows.
    """
    means = np.atleast_2d(np.asarray(means, dtype=float))
    sd = np.sqrt(np.maximum(np.atleast_2d(np.asarray(variances, dtype=float)), 0.0))
    front = np.atleast_2d(np.asarray(front, dtype=float))
    r = np.asarray(r, dtype=float)
    if front.size == 0:
        total = _partial_expectation(r[0], means[:, 0], sd[:, 0]) * _partial_expectation(
            r[1], means[:, 1], sd[:, 1]
        )
        return np.maximum(total, 0.0)
    front = front[pareto_front_mask(front)]
    order = np.argsort(front[:, 0])
    edges1 = np.concatenate([[-np.inf], front[order, 0], [r[0]]])  # (k+2,)
    heights = np.concatenate([[r[1]], front[order, 1]])  # (k+1,)
    E1 = _partial_expectation(edges1[:, None], means[None, :, 0], sd[None, :, 0])
    widths = np.diff(E1, axis=0)  # (k+1, m)
    E2 = _partial_expectation(heights[:, None], means[None, :, 1], sd[None, :, 1])
    return np.maximum(np.sum(widths * E2, axis=0), 0.0)


def hvei_two_objectives(mean, variance, front, r) -> float:
    """Single-point wrapper around the batched exact HVEI."""
    return float(hvei_two_objectives_batch([mean], [variance], front, r)[0])


def safe_acquisition(base_value, feasible_probability):
    """Fail-safe composition: acquisition times classifier probability."""
    return np.asarray(base_value, dtype=float) * np.asarray(feasible_probability, dtype=float)


def optimize_acquisition(
    acq,
    lower,
    upper,
    rng,
    pop_size: int = 50,
    generations: int = 80,
    polish: bool = True,
):
    """Maximize a vectorized acquisition over a box; GA then local polish."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)

    def neg(P):
        return -np.asarray(acq(np.atleast_2d(P)), dtype=float)

    x_ga, f_ga = ga_minimize(
        lambda P: neg(P), lower, upper, rng,
        pop_size=pop_size, generations=generations, vectorized=True,
    )
    x_best, f_best = x_ga, f_ga
    if polish:
        res = minimize(
            lambda x: float(neg(x[None])[0]),
            x_ga,
            method="Nelder-Mead",
            options={"maxiter": 120 * len(lower), "xatol": 1e-6, "fatol": 1e-12},
        )
        x_pol = np.clip(res.x, lower, upper)
        f_pol = float(neg(x_pol[None])[0])
        if f_pol < f_best:
            x_best, f_best = x_pol, f_pol
    return x_best, -f_best


@dataclass
class EvalRecord:
    index: int
    x: np.ndarray
    objectives: np.ndarray | None
    feasible: bool
    phase: str  # "doe" | "iteration"
    acquisition: float = np.nan
    feasible_probability: float = np.nan
    hypervolume: float = np.nan
    tag: str = ""


@dataclass
class ParetoArchive:
    """Evaluated designs with the running nondominated front."""

    n_objectives: int
    records: list = field(default_factory=list)

    def add(self, record: EvalRecord):
        self.records.append(record)

    @property
    def X(self) -> np.ndarray:
        return np.array([r.x for r in self.records])

    def feasible_XY(self):
        ok = [r for r in self.records if r.feasible]
        if not ok:
            return np.zeros((0, 0)), np.zeros((0, self.n_objectives))
        return np.array([r.x for r in ok]), np.array([r.objectives for r in ok])

    def labels(self) -> np.ndarray:
        return np.array([1.0 if r.feasible else -1.0 for r in self.records])

    def front(self) -> np.ndarray:
        _, Y = self.feasible_XY()
        if len(Y) == 0:
            return Y
        return Y[pareto_front_mask(Y)]

    def best_single(self):
        _, Y = self.feasible_XY()
        i = int(np.argmin(Y[:, 0]))
        ok = [r for r in self.records if r.feasible]
        return ok[i]

    def hypervolume(self, r=None) -> float:
        front = self.front()
        if front.size == 0:
            return 0.0
        if r is None:
            _, Y = self.feasible_XY()
            r = reference_point(Y)
        return hypervolume(front, r)


@dataclass(frozen=True)
class BOConfig:
    """Budgets and behaviour of the EGO loop."""

    lower: np.ndarray
    upper: np.ndarray
    n_objectives: int = 1
    doe_size: int | None = None  # default 11 d - 5
    max_iterations: int = 200
    k_ei: float = 1e-3  # relative early-stop threshold
    noisy: bool = False
    fit_budget: gp.FitBudget = gp.SMALL_BUDGET
    ga_pop: int = 50
    ga_generations: int = 80

    def resolved_doe_size(self) -> int:
        d = len(np.asarray(self.lower))
        n = self.doe_size if self.doe_size is not None else 11 * d - 5
        if n < d + 2:
            raise ValueError("DoE size must be at least d + 2")
        return n


class AllFailedError(RuntimeError):
    """Every DoE evaluation failed; nothing to model."""


def sobol_doe(lower, upper, n, rng) -> np.ndarray:
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    seed = int(np.random.default_rng(rng).integers(0, 2**31 - 1))
    sampler = qmc.Sobol(d=len(lower), scramble=True, seed=seed)
    n_pow2 = 1 << max((n - 1).bit_length(), 0)
    u = sampler.random_base2(n_pow2.bit_length() - 1)[:n]
    return lower + u * (upper - lower)


def _fit_objective_models(X, Y, config: BOConfig, rng):
    models = []
    for j in range(config.n_objectives):
        fit = gp.fit_gpr if config.noisy and len(X) >= 3 else gp.fit_gpi
        models.append(fit(X, Y[:, j], budget=config.fit_budget, rng=(rng, j)))
    return models


def ego_loop(evaluator, config: BOConfig, seed=0, doe_x=None, callback=None) -> ParetoArchive:
    """Efficient global optimization with fail-safe (hypervolume) EI.

    evaluator(x) returns an objective vector, or None when the evaluation
    fails. doe_x optionally injects extra initial designs (e.g. a baseline)
    on top of the Sobol plan. Deterministic for a fixed seed.
    """
    ss = np.random.SeedSequence(seed)
    rng_doe, rng_fit, rng_acq = [np.random.default_rng(s) for s in ss.spawn(3)]
    lower = np.asarray(config.lower, dtype=float)
    upper = np.asarray(config.upper, dtype=float)

    archive = ParetoArchive(n_objectives=config.n_objectives)
    X0 = sobol_doe(lower, upper, config.resolved_doe_size(), rng_doe)
    if doe_x is not None:
        X0 = np.vstack([np.atleast_2d(doe_x), X0])

    for i, x in enumerate(X0):
        y = evaluator(x)
        rec = EvalRecord(
            index=i, x=np.asarray(x, dtype=float),
            objectives=None if y is None else np.asarray(y, dtype=float),
            feasible=y is not None, phase="doe",
        )
        rec.hypervolume = _running_metric(archive, rec, config)
        archive.add(rec)
        if callback:
            callback(rec)

    _, Yok = archive.feasible_XY()
    if len(Yok) == 0:
        raise AllFailedError("all initial designs failed evaluation")

    scale = None
    for it in range(config.max_iterations):
        Xok, Yok = archive.feasible_XY()
        models = _fit_objective_models(Xok, Yok, config, rng=(seed, it))
        has_failures = any(not r.feasible for r in archive.records)
        classifier = None
        if has_failures:
            classifier = gp.fit_gpc_ep(archive.X, archive.labels(), rng=(seed, it, 1))

        # incumbent / front on predictive means at evaluated sites when noisy
        site_means = np.column_stack([m.predict(Xok)[0] for m in models])
        Ysite = site_means if config.noisy else Yok
        if config.n_objectives == 1:
            y_min = float(np.min(Ysite[:, 0]))

            def base_acq(P):
                mu, var = models[0].predict(P)
                return expected_improvement(mu, var, y_min)

        else:
            front = Ysite[pareto_front_mask(Ysite)]
            r = reference_point(Ysite)

            def base_acq(P):
                stats = [m.predict(P) for m in models]
                means = np.column_stack([s[0] for s in stats])
                variances = np.column_stack([s[1] for s in stats])
                return hvei_two_objectives_batch(means, variances, front, r)

        if classifier is not None:
            acq = lambda P: safe_acquisition(base_acq(P), classifier.predict_class(P))
        else:
            acq = base_acq

        x_new, acq_val = optimize_acquisition(
            acq, lower, upper, rng_acq,
            pop_size=config.ga_pop, generations=config.ga_generations,
        )

        if scale is None:
            scale = acq_val if acq_val > 0 else float(np.max(base_acq(archive.X)))
            scale = max(scale, 1e-300)
        if acq_val <= config.k_ei * scale:
            break

        y = evaluator(x_new)
        rec = EvalRecord(
            index=len(archive.records), x=x_new,
            objectives=None if y is None else np.asarray(y, dtype=float),
            feasible=y is not None, phase="iteration",
            acquisition=float(acq_val),
            feasible_probability=(
                float(classifier.predict_class(x_new[None])[0]) if classifier is not None else 1.0
            ),
        )
        rec.hypervolume = _running_metric(archive, rec, config)
        archive.add(rec)
        if callback:
            callback(rec)
    return archive


def _running_metric(archive: ParetoArchive, rec: EvalRecord, config: BOConfig) -> float:
    """Hypervolume (or best value) after adding rec, for the ledger."""
    ok = [r.objectives for r in archive.records if r.feasible]
    if rec.feasible:
        ok = ok + [rec.objectives]
    if not ok:
        return np.nan
    Y = np.array(ok)
    if config.n_objectives == 1:
        return float(np.min(Y[:, 0]))
    return hypervolume(Y[pareto_front_mask(Y)], reference_point(Y))
