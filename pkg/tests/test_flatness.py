import numpy as np
import pytest

from tscodesign import aero, bspline, dynamics, flatness
from tscodesign.dynamics import EnvConstants
from tscodesign.geometry import DerivedParams, DesignVector, PhiCoeffs, TrimPoint, derive_geometry

ENV = EnvConstants()
BASELINE = DesignVector.baseline()

# Published baseline coefficient column (drag-free variant for the closed-form
# cross-checks).
PHI_TABLE = PhiCoeffs(K_L=0.6014, K_D=0.0, K_phi=0.0376, K_theta=0.0295, K_psi=0.0003)


def table_params(phi=PHI_TABLE) -> DerivedParams:
    p = derive_geometry(BASELINE)
    tp = TrimPoint(alpha=0.0152, delta=0.1155, C_L=0.04, C_D=0.0004, C_D0=0.0002, k_induced=0.0978)
    return DerivedParams(design=BASELINE, planform=p, trim=tp, phi=phi)


@pytest.fixture(scope="module")
def params():
    return table_params()


def test_cruise_attitude_matches_closed_form(params):
    fp = flatness.steady_cruise_point(27.5)
    xi = flatness.flat_to_state(fp, params)
    psi, phi, theta = xi[3:6]
    assert abs(psi) < 1e-12
    assert abs(phi) < 1e-12
    theta_ref = np.arctan(-params.mass * ENV.g / (PHI_TABLE.K_L * 27.5**2))
    assert abs(theta - theta_ref) < 1e-9
    assert -0.055 < theta < -0.045  # published cruise pitch


def test_vertical_ascent_pitch(params):
    z3 = np.zeros(3)
    fp = flatness.FlatPoint(
        pos=np.array([0.0, 0.0, 5.0]), vel=np.array([0.0, 0.0, 6.0]),
        acc=z3, jerk=z3, snap=z3, psi=0.0, psi_dot=0.0, psi_ddot=0.0,
    )
    xi = flatness.flat_to_state(fp, params)
    assert abs(xi[5] + np.pi / 2) < 1e-9


def test_straight_line_zero_omega(params):
    fp = flatness.steady_cruise_point(20.0)
    xi = flatness.flat_to_state(fp, params)
    assert np.allclose(xi[9:12], 0.0, atol=1e-9)


def test_cruise_allocation_and_thrust(params):
    fp = flatness.steady_cruise_point(27.5)
    xi = flatness.flat_to_state(fp, params)
    u, sat, guard = flatness.flat_to_input(fp, params)
    assert not sat and not guard
    theta = xi[5]
    T_expected = -params.mass * ENV.g * np.sin(theta)  # drag-free closed form
    assert abs((u[0] + u[1]) - T_expected) < 1e-8
    assert abs(u[0] - u[1]) < 1e-10
    assert abs(u[2]) < 1e-8 and abs(u[3]) < 1e-8


def synthetic_params():
    _, params = aero.design_model(BASELINE)
    return params


def random_spline_trajectory(rng, params, horizon=4.0, scale=0.5):
    knots = bspline.clamped_knots(horizon, 13, 5)
    tt = np.linspace(0, horizon, 40)
    base = np.stack([16 * tt, np.zeros_like(tt), np.full_like(tt, 100.0), np.zeros_like(tt)], 1)
    c = bspline.fit_coefficients(tt, base, knots, 5).T.copy()
    c[:3, 3:-3] += rng.normal(0, scale, size=(3, 7))
    c[3, 3:-3] += rng.normal(0, 0.04, size=7)
    return bspline.BSplineTraj(knots=knots, degree=5, coeffs=c)


def lofi_residual(traj, params, dt=1e-3):
    t = np.arange(0.0, traj.horizon + 1e-12, dt)
    pos = traj.eval(t, 0)[:, :3]
    vel = traj.eval(t, 1)[:, :3]
    acc = traj.eval(t, 2)[:, :3]
    psi = traj.eval(t, 0)[:, 3]
    speed = np.linalg.norm(vel, axis=1)
    fs = flatness.flat_trajectory(t, pos, vel, acc, psi, params)
    if speed.min() < 2.0 or np.abs(fs.attitude[:, 1]).max() > 1.4:
        return None
    xi = fs.states
    R = dynamics.rot_global_to_local(xi[:, 3:6])
    v_loc = (R @ xi[:, 6:9, None])[..., 0]
    f_loc, tau_loc = aero.lofi_forces(v_loc, fs.inputs_raw, params.phi, params.planform.l_T_y)
    f_glob = (R.transpose(0, 2, 1) @ f_loc[..., None])[..., 0]
    rhs = dynamics.dynamics_rhs(xi, f_glob, tau_loc, params.mass, params.inertia, ENV)
    xidot = (xi[2:] - xi[:-2]) / (2 * dt)
    r = xidot - rhs[1:-1]
    sl = slice(3, -3)
    return float(np.sqrt(np.mean(r[sl] ** 2)) / np.sqrt(np.mean(rhs[1:-1][sl] ** 2)))


def test_flatness_consistency_residual():
    params = synthetic_params()
    rng = np.random.default_rng(42)
    checked = 0
    tries = 0
    while checked < 100 and tries < 300:
        tries += 1
        rel = lofi_residual(random_spline_trajectory(rng, params), params)
        if rel is None:
            continue
        checked += 1
        assert rel < 1e-4
    assert checked == 100


def test_planar_trajectory_zero_roll():
    params = synthetic_params()
    rng = np.random.default_rng(3)
    traj = random_spline_trajectory(rng, params)
    c = traj.coeffs.copy()
    c[1] = 0.0  # y channel flat
    c[3] = 0.0
    traj = bspline.BSplineTraj(knots=traj.knots, degree=traj.degree, coeffs=c)
    t = np.linspace(0, traj.horizon, 401)
    fs = flatness.flat_trajectory(
        t, traj.eval(t, 0)[:, :3], traj.eval(t, 1)[:, :3], traj.eval(t, 2)[:, :3],
        traj.eval(t, 0)[:, 3], params,
    )
    assert np.max(np.abs(fs.attitude[:, 1])) < 1e-10


def test_saturation_monotone_in_aggressiveness():
    params = synthetic_params()
    peaks = []
    for scale in (0.25, 0.5, 1.0):
        rng = np.random.default_rng(9)
        traj = random_spline_trajectory(rng, params, scale=scale)
        t = np.linspace(0, traj.horizon, 801)
        fs = flatness.flat_trajectory(
            t, traj.eval(t, 0)[:, :3], traj.eval(t, 1)[:, :3], traj.eval(t, 2)[:, :3],
            traj.eval(t, 0)[:, 3], params,
        )
        peaks.append(np.max(np.abs(fs.inputs_raw[:, 2:4])))
    assert peaks[0] <= peaks[1] <= peaks[2]


def test_hover_guard_holds_attitude(params):
    # decelerate through the hover floor: attitude must stay finite and frozen
    t = np.linspace(0, 4.0, 401)
    vel = np.stack([np.maximum(2.0 - t, 0.0), np.zeros_like(t), np.zeros_like(t)], 1)
    pos = np.cumsum(vel, axis=0) * (t[1] - t[0])
    acc = np.gradient(vel, t[1] - t[0], axis=0)
    fs = flatness.flat_trajectory(t, pos, vel, acc, np.zeros_like(t), params)
    assert np.any(fs.hover_guard)
    assert np.all(np.isfinite(fs.attitude))
    frozen = fs.attitude[fs.hover_guard]
    assert np.allclose(frozen, frozen[0], atol=1e-12)


def test_allocation_guard_flags_near_hover(params):
    z3 = np.zeros(3)
    fp = flatness.FlatPoint(
        pos=np.zeros(3), vel=np.array([0.1, 0.0, 0.0]),
        acc=np.array([0.0, 0.5, 0.0]), jerk=z3, snap=z3,
        psi=0.0, psi_dot=0.3, psi_ddot=0.0,
    )
    u, sat, guard = flatness.flat_to_input(fp, params)
    assert guard
    assert np.all(np.isfinite(u))
