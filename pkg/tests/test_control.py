import numpy as np
import pytest

from tscodesign import aero, bspline, gp
from tscodesign.control import (
    GAIN_BOUNDS,
    ClosedLoopLog,
    Gains,
    HifiPlant,
    LofiPlant,
    ReferenceTrajectory,
    allocate,
    attitude_loop,
    attitude_setpoint,
    position_loop,
    simulate_closed_loop,
    simulate_open_loop,
    CONTROL_TICK,
    W_COMMAND_RATE,
    W_TRACKING,
)
from tscodesign.dynamics import EnvConstants, angular_jacobian, rot_z, wrap_angle
from tscodesign.geometry import DesignVector

ENV = EnvConstants()
BASELINE = DesignVector.baseline()


@pytest.fixture(scope="module")
def params():
    _, p = aero.design_model(BASELINE)
    return p


@pytest.fixture(scope="module")
def smooth_reference(params):
    # gentle S-curve at 20 m/s; feedforward verified unsaturated
    T = 1.0
    t_fit = np.linspace(0, T, 60)
    x = 20.0 * t_fit
    y = 0.075 * (1 - np.cos(2 * np.pi * t_fit / T))
    z = 100.0 + 0.1 * np.sin(np.pi * t_fit / T)
    traj = bspline.BSplineTraj.fit(
        t_fit, np.stack([x, y, z, np.zeros_like(t_fit)], 1), horizon=T
    )
    ref = ReferenceTrajectory.from_spline(traj, params)
    return ref


def test_position_loop_equilibrium(params):
    g = Gains.baseline()
    f = position_loop(
        np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(3),
        np.zeros(3), g, params.mass, ENV,
    )
    assert np.allclose(f, [0.0, 0.0, params.mass * ENV.g], atol=1e-12)


def test_position_loop_single_term(params):
    g = Gains(att_p=0, att_d=0, att_i=0, pos_p=0.5, pos_d=0.0, pos_i=0.0)
    dp = np.array([0.3, -0.2, 0.1])
    f = position_loop(dp, np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(3),
                      np.zeros(3), g, params.mass, ENV)
    assert np.allclose(f - [0, 0, params.mass * ENV.g], -params.mass * 0.5 * dp, atol=1e-13)


def test_position_loop_dual_implementation(params):
    rng = np.random.default_rng(0)
    g = Gains(att_p=0, att_d=0, att_i=0, pos_p=0.31, pos_d=1.7, pos_i=0.21)
    for _ in range(10):
        p, v, pr, vr, ar, gm = rng.normal(size=(6, 3))
        f = position_loop(p, v, pr, vr, ar, gm, g, params.mass, ENV)
        ref = params.mass * (
            ar - g.pos_d * (v - vr) - g.pos_p * (p - pr) - g.pos_i * gm
        ) + params.mass * np.array([0, 0, ENV.g])
        assert np.allclose(f, ref, rtol=1e-14, atol=1e-14)


def test_position_loop_yaw_equivariance(params):
    # rotating every input around z rotates the force command identically
    rng = np.random.default_rng(1)
    g = Gains(att_p=0, att_d=0, att_i=0, pos_p=0.4, pos_d=1.1, pos_i=0.08)
    R = rot_z(0.7)
    p, v, pr, vr, ar, gm = rng.normal(size=(6, 3))
    f1 = position_loop(p, v, pr, vr, ar, gm, g, params.mass, ENV)
    f2 = position_loop(R @ p, R @ v, R @ pr, R @ vr, R @ ar, R @ gm, g, params.mass, ENV)
    assert np.allclose(R @ f1 - R @ [0, 0, params.mass * ENV.g],
                       f2 - [0, 0, params.mass * ENV.g], atol=1e-12)


def test_attitude_setpoint_level_cruise(params):
    V = 25.0
    f_c = np.array([0.0, 0.0, params.mass * ENV.g])
    q_c, hover = attitude_setpoint(f_c, np.array([V, 0.0]), np.array([V, 0.0, 0.0]), params)
    assert not hover
    assert abs(q_c[0]) < 1e-12
    assert abs(q_c[1]) < 1e-12
    theta_ref = np.arctan2(-params.mass * ENV.g, params.phi.K_L * V**2)
    assert abs(q_c[2] - theta_ref) < 1e-12


def test_attitude_setpoint_yaw_from_reference_velocity(params):
    f_c = np.array([0.0, 0.0, params.mass * ENV.g])
    q_c, _ = attitude_setpoint(f_c, np.array([12.0, 0.0]), np.array([12.0, 0.0, 0.0]), params)
    assert q_c[0] == 0.0
    q_c, _ = attitude_setpoint(f_c, np.array([5.0, 5.0]), np.array([5.0, 5.0, 0.0]), params)
    assert q_c[0] == pytest.approx(np.pi / 4)


def test_attitude_setpoint_roll_follows_rotated_force(params):
    V = 20.0
    v = np.array([V, 0.0, 0.0])
    f0 = np.array([0.0, 0.0, params.mass * ENV.g])
    q0, _ = attitude_setpoint(f0, v[:2], v, params)
    for a in (0.2, -0.35):
        ca, sa = np.cos(a), np.sin(a)
        f_rot = np.array([0.0, -sa * f0[2], ca * f0[2]])  # rotate about the velocity axis
        q1, _ = attitude_setpoint(f_rot, v[:2], v, params)
        assert q1[0] == q0[0]
        assert q1[1] - q0[1] == pytest.approx(a, abs=1e-12)


def test_attitude_loop_zero_error_is_gyroscopic(params):
    g = Gains.baseline()
    q = np.array([0.2, -0.1, 0.4])
    omega = np.array([0.5, -0.3, 0.2])
    tau = attitude_loop(q, omega, q, omega, np.zeros(3), g, params.inertia)
    assert np.allclose(tau, np.cross(omega, params.inertia @ omega), atol=1e-12)


def test_attitude_loop_single_axis(params):
    g = Gains(att_p=100.0, att_d=0, att_i=0, pos_p=0, pos_d=0, pos_i=0)
    q = np.zeros(3)
    q_c = np.array([0.0, 0.1, 0.0])  # pure roll error at level attitude
    tau = attitude_loop(q, np.zeros(3), q_c, np.zeros(3), np.zeros(3), g, params.inertia)
    # J(0) maps the roll error onto the body-x axis only
    assert abs(tau[1]) < 1e-12 and abs(tau[2]) < 1e-12
    assert tau[0] != 0.0


def test_attitude_loop_dual_implementation(params):
    rng = np.random.default_rng(2)
    g = Gains(att_p=120.0, att_d=9.0, att_i=33.0, pos_p=0, pos_d=0, pos_i=0)
    for _ in range(10):
        q = rng.uniform(-1.0, 1.0, 3)
        qc = rng.uniform(-1.0, 1.0, 3)
        om, omr, gm = rng.normal(size=(3, 3))
        tau = attitude_loop(q, om, qc, omr, gm, g, params.inertia)
        J = angular_jacobian(q)
        odc = -g.att_d * (om - omr) - g.att_p * (J @ wrap_angle(q - qc)) - g.att_i * (J @ gm)
        ref = params.inertia @ odc + np.cross(om, params.inertia @ om)
        assert np.allclose(tau, ref, rtol=1e-14, atol=1e-13)


def test_allocate_cruise_split(params):
    V = 22.0
    v = np.array([V, 0.0, 0.0])
    f_c = np.array([0.0, 0.0, params.mass * ENV.g])
    q_c, _ = attitude_setpoint(f_c, v[:2], v, params)
    raw, sat, sat_flag, guard = allocate(f_c, np.zeros(3), q_c, v, params)
    assert not sat_flag and not guard
    assert raw[0] == pytest.approx(raw[1], abs=1e-12)
    assert abs(raw[2]) < 1e-12 and abs(raw[3]) < 1e-12


def test_allocate_guard_near_hover(params):
    q_c = np.array([0.0, 0.0, -np.pi / 2])
    raw, sat, _, guard = allocate(
        np.array([0.0, 0.0, params.mass * ENV.g]), np.array([0.0, 0.05, 0.0]),
        q_c, np.array([0.05, 0.0, 0.0]), params,
    )
    assert guard
    assert np.all(np.isfinite(raw))


def test_open_loop_replay(params, smooth_reference):
    from tscodesign import flatness

    # feedforward must be unsaturated for exact consistency
    log = simulate_open_loop(params, smooth_reference, LofiPlant(params))
    err = np.linalg.norm(log.xi[:, 0:3] - smooth_reference.xi[:, 0:3], axis=1)
    assert err.max() < 1e-3


def test_hover_regulation(params):
    ref = ReferenceTrajectory.hover(params, [0.0, 0.0, 10.0], 5.0)
    gains = Gains(att_p=400.0, att_d=12.0, att_i=0.0, pos_p=0.8, pos_d=1.8, pos_i=0.05)
    xi0 = ref.xi[0].copy()
    xi0[2] += 0.1
    log = simulate_closed_loop(params, ref, gains, LofiPlant(params), xi0=xi0[None])[0]
    assert not log.diverged
    assert abs(log.xi[-1, 2] - 10.0) < 0.01


def test_closed_loop_tracks_lofi(params, smooth_reference):
    gains = Gains(att_p=400.0, att_d=12.0, att_i=50.0, pos_p=0.3, pos_d=1.0, pos_i=0.0)
    log = simulate_closed_loop(params, smooth_reference, gains, LofiPlant(params))[0]
    err = np.linalg.norm(log.xi[:, 0:3] - smooth_reference.xi[:, 0:3], axis=1)
    assert not log.diverged
    assert err.max() < 0.05


@pytest.fixture(scope="module")
def hifi_plant(params):
    prov = aero.SyntheticCoefficientModel(params.design, params.planform)
    ss = aero.fit_design_surrogate(prov, rng=3, budget=gp.SMALL_BUDGET)
    return HifiPlant(ss, params)


def test_closed_loop_deterministic(params, smooth_reference, hifi_plant):
    gains = Gains(att_p=1800.0, att_d=35.0, att_i=800.0, pos_p=0.3, pos_d=1.2, pos_i=0.0)
    eps = tuple(aero.EmulatorConfig().episode((9, i)) for i in range(3))
    a = simulate_closed_loop(params, smooth_reference, gains, hifi_plant, episodes=eps)
    b = simulate_closed_loop(params, smooth_reference, gains, hifi_plant, episodes=eps)
    for la, lb in zip(a, b):
        assert np.array_equal(la.xi, lb.xi)
        assert np.array_equal(la.u_applied, lb.u_applied)
        assert la.cost_cdp == lb.cost_cdp and la.cost_fcp == lb.cost_fcp


def test_closed_loop_batch_matches_single(params, smooth_reference, hifi_plant):
    # batching episodes must not change any episode's trajectory bits
    gains = Gains(att_p=1800.0, att_d=35.0, att_i=800.0, pos_p=0.3, pos_d=1.2, pos_i=0.0)
    eps = tuple(aero.EmulatorConfig().episode((4, i)) for i in range(2))
    batch = simulate_closed_loop(params, smooth_reference, gains, hifi_plant, episodes=eps)
    for i, ep in enumerate(eps):
        solo = simulate_closed_loop(params, smooth_reference, gains, hifi_plant, episodes=(ep,))[0]
        assert np.array_equal(batch[i].xi, solo.xi)


def test_anti_windup_reduces_overshoot(params):
    # saturating climb: the frozen integrator must overshoot less
    ref = ReferenceTrajectory.hover(params, [0.0, 0.0, 10.0], 12.0)
    gains = Gains(att_p=400.0, att_d=12.0, att_i=0.0, pos_p=0.8, pos_d=1.2, pos_i=0.6)
    xi0 = ref.xi[0].copy()
    xi0[2] -= 15.0  # large offset drives thrust saturation
    on = simulate_closed_loop(params, ref, gains, LofiPlant(params), xi0=xi0[None], anti_windup=True)[0]
    off = simulate_closed_loop(params, ref, gains, LofiPlant(params), xi0=xi0[None], anti_windup=False)[0]
    assert on.saturated.any()
    over_on = np.max(on.xi[:, 2] - 10.0)
    over_off = np.max(off.xi[:, 2] - 10.0)
    assert over_on < over_off


def test_fcp_cost_recomputation(params, smooth_reference):
    gains = Gains(att_p=400.0, att_d=12.0, att_i=50.0, pos_p=0.3, pos_d=1.0, pos_i=0.0)
    log = simulate_closed_loop(params, smooth_reference, gains, LofiPlant(params))[0]
    err = log.xi_ref - log.xi
    err[:, 3:6] = wrap_angle(err[:, 3:6])
    track = np.trapezoid(np.sum(err**2, axis=1), log.t)
    du = np.diff(log.u_command, axis=0) / CONTROL_TICK
    rate = np.sum(du**2) * CONTROL_TICK
    assert log.cost_fcp == pytest.approx(W_TRACKING * track + W_COMMAND_RATE * rate, rel=1e-12)


def test_divergence_detector(params, smooth_reference):
    # hostile gains destabilize the attitude loop; the episode must be
    # flagged instead of raising or going non-finite
    gains = Gains(att_p=2000.0, att_d=0.0, att_i=2000.0, pos_p=0.8, pos_d=0.0, pos_i=0.8)
    log = simulate_closed_loop(params, smooth_reference, gains, LofiPlant(params))[0]
    assert np.all(np.isfinite(log.xi))
    if log.diverged:
        assert np.isfinite(log.divergence_time)


def test_gain_validation_and_bounds():
    with pytest.raises(ValueError):
        Gains(att_p=-1.0, att_d=0, att_i=0, pos_p=0, pos_d=0, pos_i=0)
    g = Gains.baseline()
    for name, (lo, hi, _) in GAIN_BOUNDS.items():
        assert lo <= getattr(g, name) <= hi
    assert g.bandwidth_separated()
