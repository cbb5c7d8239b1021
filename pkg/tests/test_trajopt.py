import dataclasses

import numpy as np
import pytest

from tscodesign import aero, flatness, trajopt
from tscodesign.dynamics import EnvConstants
from tscodesign.geometry import DesignVector

ENV = EnvConstants()


@pytest.fixture(scope="module")
def params():
    _, p = aero.design_model(DesignVector.baseline())
    return p


@pytest.fixture(scope="module")
def solutions(params):
    return {m.kind: trajopt.solve_mission(m, params) for m in trajopt.standard_missions()}


def test_all_missions_solve(solutions):
    assert set(solutions) == set(trajopt.MISSION_KINDS)


def test_cruise_duration_bracket(solutions):
    assert 2.5 <= solutions["cruise"].bc.T <= 5.5


def test_objective_never_exceeds_initial_guess(solutions):
    for sol in solutions.values():
        assert sol.objective <= sol.objective_initial + 1e-15


def test_actuator_limits_on_dense_grid(params, solutions):
    for sol in solutions.values():
        assert sol.verified_violation <= trajopt.VERIFY_TOL
        # independent recomputation on the 2001-point grid
        t = np.linspace(0.0, sol.bc.T, trajopt.VERIFY_GRID)
        s0, s1, s2 = (sol.traj.eval(t, k) for k in range(3))
        fs = flatness.flat_trajectory(t, s0[:, :3], s1[:, :3], s2[:, :3], s0[:, 3], params)
        raw = fs.inputs_raw
        assert raw[:, 0:2].max() <= params.T_max + trajopt.VERIFY_TOL
        assert raw[:, 0:2].min() >= params.T_min - trajopt.VERIFY_TOL
        assert np.abs(raw[:, 2:4]).max() <= params.delta_max + trajopt.VERIFY_TOL


def test_cruise_thrust_integral_bracket(solutions):
    # reported alongside the published 17.25 N s; model-dependent bracket
    assert solutions["cruise"].thrust_integral <= 3 * 17.25
    assert solutions["cruise"].thrust_integral >= 17.25 / 3


def test_cruise_thrust_profile_near_constant(params, solutions):
    sol = solutions["cruise"]
    t = np.linspace(0.0, sol.bc.T, 501)
    s0, s1, s2 = (sol.traj.eval(t, k) for k in range(3))
    fs = flatness.flat_trajectory(t, s0[:, :3], s1[:, :3], s2[:, :3], s0[:, 3], params)
    thr = fs.inputs_raw[:, 0] + fs.inputs_raw[:, 1]
    assert thr.std() / thr.mean() < 0.1


def test_boundary_conditions_on_finer_grid(params, solutions):
    # bc feasibility holds on a 10x denser check grid
    for sol in solutions.values():
        bc = sol.bc
        t = np.linspace(0.0, bc.T, 10 * trajopt.BC_GRID)
        sig = [bc.cubic.eval(t, k) for k in range(3)]
        _, viol, _ = trajopt._path_metrics(t, sig[0], sig[1], sig[2], params, ENV)
        assert viol <= trajopt.CONSTRAINT_MARGIN  # margin consumed, limits hold


def test_degenerate_mission_minimizes_duration(params):
    mission = trajopt.Mission(kind="cruise", altitude=50.0, leg_length=0.0)
    bc = trajopt.solve_boundary_conditions(mission, params)
    assert bc.T == pytest.approx(trajopt.T_SEARCH_RANGE[0], abs=0.02)
    hover_total = params.mass * ENV.g * bc.T
    assert bc.thrust_integral == pytest.approx(hover_total, rel=0.02)


def test_endpoint_conditions_pinned_exactly(solutions):
    for sol in solutions.values():
        bc = sol.bc
        for deriv in range(3):
            want = bc.cubic.eval(np.array([0.0, bc.T]), deriv)
            got = sol.traj.eval(np.array([0.0, bc.T]), deriv)
            assert np.allclose(got, want, atol=1e-8)


def test_gradient_matches_central_difference_oracle(params, solutions):
    bc = solutions["turn"].bc
    tr = trajopt._Transcription(bc, params, ENV)
    memo = trajopt._Memo(tr)
    z0 = tr.initial_guess()
    rng = np.random.default_rng(0)
    for _ in range(10):
        z = z0 + rng.normal(0, 0.05, size=z0.shape)
        g = trajopt.objective_gradient(memo, z, h=1e-6)
        oracle = np.zeros_like(z)
        h = 2e-6
        for i in range(len(z)):
            e = np.zeros_like(z)
            e[i] = h
            oracle[i] = (memo(z + e)[0] - memo(z - e)[0]) / (2 * h)
        denom = max(np.linalg.norm(oracle), 1e-12)
        assert np.linalg.norm(g - oracle) / denom < 1e-4


def test_deterministic_solutions(params):
    m = trajopt.Mission(kind="takeoff", altitude=0.0)
    s1 = trajopt.solve_mission(m, params)
    s2 = trajopt.solve_mission(m, params)
    assert np.array_equal(s1.traj.coeffs, s2.traj.coeffs)
    assert s1.objective == s2.objective


def test_infeasible_mission_raises(params):
    starved = dataclasses.replace(params, T_max=0.5)  # cannot support weight
    with pytest.raises(trajopt.MissionInfeasibleError):
        trajopt.solve_boundary_conditions(trajopt.Mission(kind="cruise"), starved)


def test_unknown_mission_kind():
    with pytest.raises(ValueError):
        trajopt.Mission(kind="loiter")
