import numpy as np
import pytest

from tscodesign import gp
from tscodesign.bo import (
    AllFailedError,
    BOConfig,
    HypervolumeError,
    ParetoArchive,
    ego_loop,
    expected_improvement,
    hvei_two_objectives,
    hvei_two_objectives_batch,
    hypervolume,
    optimize_acquisition,
    pareto_front_mask,
    reference_point,
    safe_acquisition,
    sobol_doe,
)

TINY_BUDGET = gp.FitBudget(pop=10, generations=12, polish_iters=20)


def test_ei_zero_variance():
    assert expected_improvement(1.0, 0.0, 0.5) == 0.0
    assert expected_improvement(0.2, 0.0, 0.5) == pytest.approx(0.3)


def test_ei_at_incumbent_with_unit_sd():
    # (y_min - mu) Phi + s phi at mu = y_min, s = 1 -> standard normal density at 0
    assert expected_improvement(0.0, 1.0, 0.0) == pytest.approx(0.3989422804, abs=1e-6)


def test_ei_matches_monte_carlo():
    rng = np.random.default_rng(0)
    for _ in range(5):
        mu = rng.normal()
        s = rng.uniform(0.2, 2.0)
        y_min = rng.normal()
        samples = mu + s * rng.standard_normal(1_000_000)
        imp = np.maximum(y_min - samples, 0.0)
        mc, se = imp.mean(), imp.std() / 1000.0
        assert abs(expected_improvement(mu, s**2, y_min) - mc) <= 3 * se


def test_ei_translation_invariance():
    base = expected_improvement(1.3, 0.49, 1.0)
    shifted = expected_improvement(11.3, 0.49, 11.0)
    assert base == pytest.approx(shifted, rel=1e-12)


def test_hypervolume_empty_and_simple():
    assert hypervolume(np.zeros((0, 2)), np.array([1.0, 1.0])) == 0.0
    hv = hypervolume(np.array([[1.0, 2.0], [2.0, 1.0]]), np.array([3.0, 3.0]))
    assert hv == pytest.approx(3.0, abs=1e-12)  # 2 + 2 - 1 by inclusion-exclusion


def test_hypervolume_dominated_point_no_change():
    r = np.array([3.0, 3.0])
    base = hypervolume(np.array([[1.0, 2.0], [2.0, 1.0]]), r)
    with_dom = hypervolume(np.array([[1.0, 2.0], [2.0, 1.0], [2.5, 2.5]]), r)
    assert with_dom == pytest.approx(base, abs=1e-12)


def test_hypervolume_beyond_reference_error():
    with pytest.raises(HypervolumeError):
        hypervolume(np.array([[4.0, 1.0]]), np.array([3.0, 3.0]))


def test_hypervolume_three_objectives_hand_case():
    r = np.array([2.0, 2.0, 2.0])
    assert hypervolume(np.array([[1.0, 1.0, 1.0]]), r) == pytest.approx(1.0)
    # union = 1 + 1.5 - 0.5 (intersection corner (1, 1.5, 1))
    hv = hypervolume(np.array([[1.0, 1.0, 1.0], [0.0, 1.5, 0.5]]), r)
    assert hv == pytest.approx(2.0, abs=1e-12)


def test_pareto_mask_against_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(20):
        Y = rng.normal(size=(30, 2))
        mask = pareto_front_mask(Y)
        for i in range(len(Y)):
            dominated = any(
                np.all(Y[j] <= Y[i]) and np.any(Y[j] < Y[i]) for j in range(len(Y)) if j != i
            )
            assert mask[i] == (not dominated)


FRONT = np.array([[1.0, 2.5], [2.0, 1.5], [3.0, 0.5]])
REF = np.array([4.0, 4.0])


def test_hvei_dominated_mass_is_zero():
    val = hvei_two_objectives([3.5, 3.5], [1e-8, 1e-8], FRONT, REF)
    assert val < 1e-12


def test_hvei_point_mass_equals_exclusive_hypervolume():
    y = np.array([1.5, 1.0])
    base = hypervolume(FRONT, REF)
    excl = hypervolume(np.vstack([FRONT, y]), REF) - base
    val = hvei_two_objectives(y, [0.0, 0.0], FRONT, REF)
    assert val == pytest.approx(excl, abs=1e-12)


def test_hvei_matches_monte_carlo():
    rng = np.random.default_rng(2)
    mu = np.array([1.6, 1.2])
    var = np.array([0.6, 0.4])
    closed = hvei_two_objectives(mu, var, FRONT, REF)

    n = 1_000_000
    y1 = mu[0] + np.sqrt(var[0]) * rng.standard_normal(n)
    y2 = mu[1] + np.sqrt(var[1]) * rng.standard_normal(n)
    # independent geometric transcription of the exclusive improvement
    order = np.argsort(FRONT[:, 0])
    edges = np.concatenate([[-1e18], FRONT[order, 0], [REF[0]]])
    heights = np.concatenate([[REF[1]], FRONT[order, 1]])
    imp = np.zeros(n)
    for i in range(len(heights)):
        width = np.clip(edges[i + 1] - np.maximum(edges[i], y1), 0.0, None)
        width = np.minimum(width, edges[i + 1] - edges[i])
        imp += width * np.clip(heights[i] - y2, 0.0, None)
    mc = imp.mean()
    se = imp.std() / np.sqrt(n)
    assert abs(closed - mc) <= max(0.01 * closed, 3 * se)


def test_hvei_translation_invariance():
    shift = 7.0
    a = hvei_two_objectives([1.6, 1.2], [0.3, 0.2], FRONT, REF)
    b = hvei_two_objectives(
        [1.6 + shift, 1.2 + shift], [0.3, 0.2], FRONT + shift, REF + shift
    )
    assert a == pytest.approx(b, rel=1e-10)


def test_hvei_empty_front_product_form():
    val = hvei_two_objectives([0.0, 0.0], [0.0, 0.0], np.zeros((0, 2)), np.array([2.0, 3.0]))
    assert val == pytest.approx(6.0)


def test_safe_acquisition_product():
    assert safe_acquisition(2.0, 1.0) == 2.0
    assert safe_acquisition(2.0, 0.0) == 0.0
    assert safe_acquisition(2.0, 0.5) == 1.0


def test_optimize_acquisition_quadratic():
    lower, upper = np.array([-2.0, -1.0]), np.array([3.0, 4.0])
    target = np.array([1.2, 0.7])

    def acq(P):
        return -np.sum((P - target) ** 2, axis=1)

    rng = np.random.default_rng(3)
    x, val = optimize_acquisition(acq, lower, upper, rng)
    diag = np.linalg.norm(upper - lower)
    assert np.linalg.norm(x - target) < 1e-3 * diag


def test_optimize_acquisition_constant_and_deterministic():
    lower, upper = np.zeros(2), np.ones(2)
    acq = lambda P: np.full(len(np.atleast_2d(P)), 4.2)
    x1, v1 = optimize_acquisition(acq, lower, upper, np.random.default_rng(5))
    x2, v2 = optimize_acquisition(acq, lower, upper, np.random.default_rng(5))
    assert v1 == 4.2
    assert np.array_equal(x1, x2)


def multimodal_1d(x):
    x = np.atleast_2d(x)[:, 0]
    return -(1.4 - 3.0 * x) * np.sin(18.0 * x)


def test_ego_finds_1d_multimodal_minimum():
    lower, upper = np.array([0.0]), np.array([1.2])
    grid = np.linspace(0, 1.2, 120001)
    x_star = grid[np.argmin(multimodal_1d(grid[:, None]))]

    config = BOConfig(
        lower=lower, upper=upper, doe_size=8, max_iterations=22, k_ei=1e-6,
        fit_budget=TINY_BUDGET, ga_pop=24, ga_generations=30,
    )
    hits = 0
    for seed in range(20):
        archive = ego_loop(lambda x: np.array([multimodal_1d(x[None]).item()]), config, seed=seed)
        best = archive.best_single()
        if abs(best.x[0] - x_star) < 1e-2:
            hits += 1
    assert hits >= 18


def test_ego_failures_train_classifier_and_ledger():
    lower, upper = np.zeros(2), np.ones(2)

    def evaluator(x):
        if x[0] > 0.5:
            return None  # failed half of the box
        return np.array([float(np.sum((x - 0.2) ** 2))])

    config = BOConfig(
        lower=lower, upper=upper, doe_size=10, max_iterations=6, k_ei=1e-9,
        fit_budget=TINY_BUDGET, ga_pop=24, ga_generations=25,
    )
    archive = ego_loop(evaluator, config, seed=1)
    post = [r for r in archive.records if r.phase == "iteration"]
    assert len(post) > 0
    assert all(r.feasible_probability > 0.05 for r in post)
    assert any(not r.feasible for r in archive.records)


def test_ego_two_objective_hypervolume_monotone():
    def evaluator(x):
        # convex front: f1 = x, f2 = 1 - sqrt(x) plus curvature
        v = float(x[0])
        return np.array([v, (1.0 - np.sqrt(v)) ** 2 + 0.05 * x[1] ** 2])

    config = BOConfig(
        lower=np.zeros(2), upper=np.ones(2), n_objectives=2, doe_size=10,
        max_iterations=6, k_ei=1e-9, fit_budget=TINY_BUDGET, ga_pop=24,
        ga_generations=25,
    )
    archive = ego_loop(evaluator, config, seed=3)
    Y = np.array([r.objectives for r in archive.records if r.feasible])
    r_fixed = reference_point(Y)
    hv_seq = []
    for k in range(1, len(Y) + 1):
        sub = Y[:k]
        hv_seq.append(hypervolume(sub[pareto_front_mask(sub)], r_fixed))
    assert all(b >= a - 1e-12 for a, b in zip(hv_seq, hv_seq[1:]))


def test_ego_all_failed_aborts():
    config = BOConfig(
        lower=np.zeros(1), upper=np.ones(1), doe_size=4, max_iterations=2,
        fit_budget=TINY_BUDGET,
    )
    with pytest.raises(AllFailedError):
        ego_loop(lambda x: None, config, seed=0)


def test_ego_deterministic_with_seed():
    config = BOConfig(
        lower=np.zeros(1), upper=np.ones(1), doe_size=6, max_iterations=4,
        k_ei=1e-9, fit_budget=TINY_BUDGET, ga_pop=16, ga_generations=15,
    )
    f = lambda x: np.array([float(np.cos(3 * x[0]) + x[0])])
    a1 = ego_loop(f, config, seed=7)
    a2 = ego_loop(f, config, seed=7)
    X1 = np.array([r.x for r in a1.records])
    X2 = np.array([r.x for r in a2.records])
    assert np.array_equal(X1, X2)


def test_sobol_doe_bounds_and_determinism():
    lo, hi = np.array([-1.0, 2.0]), np.array([1.0, 5.0])
    X1 = sobol_doe(lo, hi, 17, rng=9)
    X2 = sobol_doe(lo, hi, 17, rng=9)
    assert X1.shape == (17, 2)
    assert np.all(X1 >= lo) and np.all(X1 <= hi)
    assert np.array_equal(X1, X2)


def test_reference_point_margin():
    Y = np.array([[0.0, 10.0], [2.0, 6.0]])
    r = reference_point(Y)
    assert np.allclose(r, [2.0 + 0.1, 10.0 + 0.2])
