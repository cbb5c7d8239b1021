"""Cascaded feedback-linearization control and closed-loop simulation.

Outer loop (position): a desired global force from feedback linearization
with an integral term,

    f_c = m [ a_ref - k_pd (v - v*) - k_pp (p - p*) - k_pi gamma_p ] + m g e_z

Inner loop (attitude): the commanded attitude aligns f_c with the feasible
force plane -- yaw from the reference ground velocity, roll and pitch from
the flatness expressions applied to f_c -- and a desired torque

    tau_c = I Omegadot_c + Omega x I Omega
    Omegadot_c = -k_qd (Omega - Omega*) - k_qp wrap(q - q_c) - k_qi gamma_q

(negative feedback; the attitude loop should be tuned roughly an order of
magnitude faster than the position loop). The flat inverse dynamics turn
(f_c, tau_c) into motor thrusts and elevon deflections. The deployed command
is the reference feedforward plus the allocator's feedback correction,
saturated to the actuator limits, with conditional integrator freezing as
anti-windup.

Closed-loop simulation runs the plant at 1 kHz (RK4) with the controller at
100 Hz: each command is computed from the state sampled one tick earlier and
applied as a first-order hold ramping from the previous command across the
tick; the feedforward is indexed where the ramp lands. High-fidelity
aerodynamic coefficients are evaluated once per 1 ms integrator step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import aero
from .dynamics import (
    EnvConstants,
    angular_jacobian,
    dynamics_rhs,
    rot_global_to_local,
    wrap_angle,
)
from .flatness import ALLOC_DEN_EPS, HOVER_SPEED_EPS, flat_trajectory
from .geometry import DerivedParams

CONTROL_TICK = 0.01  # s, 100 Hz command rate
PLANT_DT = 0.001  # s, 1 kHz integrator
DIVERGENCE_RADIUS = 50.0  # m of position error
ROLL_DIVERGENCE_MARGIN = 0.05  # rad from the Euler singularity
RATE_DIVERGENCE_LIMIT = 50.0  # rad/s

# FCP integrand weights: tracking error and command-rate penalty.
W_TRACKING = 0.1
W_COMMAND_RATE = 1.0

# (lower, upper, baseline) boxes for the tunable gains.
GAIN_BOUNDS = {
    "att_p": (0.0, 2000.0, 1508.0752),
    "att_d": (0.0, 40.0, 12.0),
    "att_i": (0.0, 2000.0, 467.7640),
    "pos_p": (0.0, 0.8, 0.0091),
    "pos_d": (0.0, 4.0, 0.1817),
    "pos_i": (0.0, 0.8, 0.0),
}
GAIN_FIELDS = tuple(GAIN_BOUNDS)


@dataclass(frozen=True)
class Gains:
    """Isotropic PID triplets for the position and attitude loops."""

    att_p: float
    att_d: float
    att_i: float
    pos_p: float
    pos_d: float
    pos_i: float

    def __post_init__(self):
        for name in GAIN_FIELDS:
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    def bandwidth_separated(self) -> bool:
        """Attitude loop at least 10x faster than the position loop."""
        wq = np.sqrt(max(self.att_p, 1e-12))
        wp = np.sqrt(max(self.pos_p, 1e-12))
        return wq >= 10.0 * wp

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in GAIN_FIELDS])

    @classmethod
    def from_array(cls, arr) -> "Gains":
        return cls(**dict(zip(GAIN_FIELDS, map(float, arr))))

    @classmethod
    def baseline(cls) -> "Gains":
        return cls(**{k: b for k, (_, _, b) in GAIN_BOUNDS.items()})


def position_loop(p, v, p_ref, v_ref, a_ref, gamma_p, gains: Gains, mass, env: EnvConstants):
    """Desired global force from the outer feedback linearization."""
    p, v = np.asarray(p, dtype=float), np.asarray(v, dtype=float)
    vdot_c = (
        np.asarray(a_ref, dtype=float)
        - gains.pos_d * (v - v_ref)
        - gains.pos_p * (p - p_ref)
        - gains.pos_i * np.asarray(gamma_p, dtype=float)
    )
    return mass * vdot_c + mass * np.array([0.0, 0.0, env.g])


def _frame_components(w, psi, phi):
    """x and z components of a global vector in the double-primed frame."""
    cz, sz = np.cos(psi), np.sin(psi)
    cx, sx = np.cos(phi), np.sin(phi)
    wx = cz * w[..., 0] + sz * w[..., 1]
    wy = -sz * w[..., 0] + cz * w[..., 1]
    wz = -sx * wy + cx * w[..., 2]
    return wx, wz


def attitude_setpoint(f_c, v_ref_xy, v_meas, params: DerivedParams, prev_qc=None):
    """Commanded (psi, phi, theta) aligning f_c with the feasible force plane.

    Yaw follows the reference ground velocity; roll and pitch come from the
    flatness expressions applied to f_c with the measured velocity. Below
    the hover speed floor the previous setpoint is held; angles continue on
    the branch nearest prev_qc.
    """
    f_c = np.asarray(f_c, dtype=float)
    v_meas = np.asarray(v_meas, dtype=float)
    v_ref_xy = np.asarray(v_ref_xy, dtype=float)
    psi_c = np.arctan2(v_ref_xy[..., 1], v_ref_xy[..., 0])
    psi_c = np.broadcast_to(psi_c, f_c.shape[:-1]).copy()

    cz, sz = np.cos(psi_c), np.sin(psi_c)
    fp_y = -sz * f_c[..., 0] + cz * f_c[..., 1]
    phi_c = -np.arctan2(fp_y, f_c[..., 2])

    fpp_x, fpp_z = _frame_components(f_c, psi_c, phi_c)
    vpp_x, vpp_z = _frame_components(v_meas, psi_c, phi_c)
    speed = np.linalg.norm(v_meas, axis=-1)
    K_L = params.phi.K_L
    theta_c = np.arctan2(-(fpp_z + K_L * vpp_z * speed), fpp_x + K_L * vpp_x * speed)

    q_c = np.stack([psi_c, phi_c, theta_c], axis=-1)
    hover = speed < HOVER_SPEED_EPS
    if prev_qc is not None:
        prev_qc = np.asarray(prev_qc, dtype=float)
        q_c = prev_qc + wrap_angle(q_c - prev_qc)  # nearest-branch continuation
        q_c = np.where(hover[..., None], prev_qc, q_c)
    return q_c, hover


def attitude_loop(q, omega, q_c, omega_ref, gamma_q, gains: Gains, inertia):
    """Desired torque from the inner feedback linearization.

    The wrapped per-axis Euler-angle errors are mapped into body axes
    through the angular-kinematics Jacobian J(q) so the proportional and
    integral actions address the correct body axes at any attitude.
    """
    q = np.asarray(q, dtype=float)
    omega = np.asarray(omega, dtype=float)
    J = angular_jacobian(q)
    dq_body = (J @ wrap_angle(q - np.asarray(q_c, dtype=float))[..., None])[..., 0]
    gi_body = (J @ np.asarray(gamma_q, dtype=float)[..., None])[..., 0]
    omegadot_c = (
        -gains.att_d * (omega - omega_ref)
        - gains.att_p * dq_body
        - gains.att_i * gi_body
    )
    Iw = omega @ inertia.T
    return omegadot_c @ inertia.T + np.cross(omega, Iw)


def allocate(f_c, tau_c, q_c, v_meas, params: DerivedParams, saturate: bool = True):
    """Distribute (f_c, tau_c) over motors and elevons (flat inverse dynamics).

    The force balance is evaluated in the commanded-attitude frames with the
    measured velocity; the torque splits per the phi-theory inverse with the
    near-hover denominator clamp. Returns (raw, saturated, sat_flag, guard).
    """
    f_c = np.asarray(f_c, dtype=float)
    tau_c = np.asarray(tau_c, dtype=float)
    q_c = np.asarray(q_c, dtype=float)
    v_meas = np.asarray(v_meas, dtype=float)
    k = params.phi
    psi_c, phi_c, theta_c = q_c[..., 0], q_c[..., 1], q_c[..., 2]

    fpp_x, fpp_z = _frame_components(f_c, psi_c, phi_c)
    vpp_x, vpp_z = _frame_components(v_meas, psi_c, phi_c)
    speed = np.linalg.norm(v_meas, axis=-1)
    ct, st = np.cos(theta_c), np.sin(theta_c)
    thrust = -(fpp_z + k.K_D * vpp_z * speed) * st + (fpp_x + k.K_D * vpp_x * speed) * ct

    vppp_x = ct * vpp_x - st * vpp_z
    den_raw = vppp_x * speed
    guard = np.abs(den_raw) < ALLOC_DEN_EPS
    den = np.where(guard, np.where(den_raw < 0, -ALLOC_DEN_EPS, ALLOC_DEN_EPS), den_raw)

    split = (k.K_psi / k.K_phi * tau_c[..., 0] - tau_c[..., 2]) / (2.0 * params.planform.l_T_y)
    T1 = 0.5 * thrust + split
    T2 = 0.5 * thrust - split
    d1 = (tau_c[..., 1] / k.K_theta - tau_c[..., 0] / k.K_phi) / (2.0 * den)
    d2 = (tau_c[..., 0] / k.K_phi + tau_c[..., 1] / k.K_theta) / (2.0 * den)
    raw = np.stack([T1, T2, d1, d2], axis=-1)
    if not saturate:
        return raw, raw, np.zeros(raw.shape[:-1], dtype=bool), guard
    lo = np.array([params.T_min, params.T_min, -params.delta_max, -params.delta_max])
    hi = np.array([params.T_max, params.T_max, params.delta_max, params.delta_max])
    sat = np.clip(raw, lo, hi)
    sat_flag = np.any(sat != raw, axis=-1)
    return raw, sat, sat_flag, guard


# ---------------------------------------------------------------------------
# Closed-loop simulation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReferenceTrajectory:
    """Reference states and feedforward inputs on the 1 kHz plant grid."""

    t: np.ndarray
    xi: np.ndarray  # (n, 12)
    u: np.ndarray  # (n, 4)
    acc: np.ndarray  # (n, 3) reference translational acceleration

    @property
    def horizon(self) -> float:
        return float(self.t[-1])

    @classmethod
    def from_spline(
        cls, traj, params: DerivedParams, env: EnvConstants = EnvConstants(),
        dt: float = PLANT_DT, refine: int = 10,
    ):
        """Sample the flat transforms on a refine-times-finer grid (sharper
        finite-difference body rates and torques), then decimate to dt."""
        n = int(round(traj.horizon / dt))
        tf = np.arange(n * refine + 1) * (dt / refine)
        tf[-1] = traj.horizon
        sig = traj.eval(tf, 0)
        vel = traj.eval(tf, 1)
        acc = traj.eval(tf, 2)
        fs = flat_trajectory(tf, sig[:, :3], vel[:, :3], acc[:, :3], sig[:, 3], params, env)
        sl = slice(None, None, refine)
        return cls(t=tf[sl], xi=fs.states[sl], u=fs.inputs[sl], acc=acc[sl, :3])

    @classmethod
    def hover(cls, params: DerivedParams, position, horizon: float, env: EnvConstants = EnvConstants(), dt: float = PLANT_DT):
        """Static nose-up hover reference at a fixed position."""
        n = int(round(horizon / dt))
        t = np.arange(n + 1) * dt
        xi = np.zeros((n + 1, 12))
        xi[:, 0:3] = np.asarray(position, dtype=float)
        xi[:, 5] = -np.pi / 2  # nose up
        u = np.zeros((n + 1, 4))
        u[:, 0] = u[:, 1] = 0.5 * params.mass * env.g
        return cls(t=t, xi=xi, u=u, acc=np.zeros((n + 1, 3)))


@dataclass
class ClosedLoopLog:
    """One episode of the 100 Hz closed loop on the 1 kHz grid."""

    t: np.ndarray
    xi: np.ndarray
    xi_ref: np.ndarray
    u_applied: np.ndarray
    t_tick: np.ndarray
    u_command: np.ndarray
    saturated: np.ndarray  # per tick
    diverged: bool
    divergence_time: float
    cost_cdp: float  # integral of (T1 + T2) dt over the applied commands
    cost_fcp: float  # tracking + command-rate integrand
    episode_seed: object = None

    @property
    def failed(self) -> bool:
        return self.diverged


class LofiPlant:
    """phi-theory plant (perfect-model studies and emulator-free ablation)."""

    kind = "lofi"

    def __init__(self, params: DerivedParams, env: EnvConstants = EnvConstants()):
        self.params = params
        self.env = env

    def forces(self, xi, u):
        R = rot_global_to_local(xi[..., 3:6])
        v_loc = (R @ xi[..., 6:9, None])[..., 0]
        f_loc, tau_loc = aero.lofi_forces(v_loc, u, self.params.phi, self.params.planform.l_T_y)
        f_glob = (np.swapaxes(R, -1, -2) @ f_loc[..., None])[..., 0]
        return f_glob, tau_loc


class HifiPlant:
    """Surrogate-coefficient plant with per-episode noise and wind.

    Coefficients are frozen per integrator step (evaluated at the step-start
    state and command); attitude, dynamic pressure, and thrust terms follow
    the RK4 stage states exactly.
    """

    kind = "hifi"

    def __init__(self, coeff_source, params: DerivedParams, env: EnvConstants = EnvConstants()):
        self.source = coeff_source
        self.params = params
        self.env = env

    def eval_coeffs(self, xi, u, scale, wind):
        R = rot_global_to_local(xi[..., 3:6])
        v_air = xi[..., 6:9] - wind
        v_loc = (R @ v_air[..., None])[..., 0]
        alpha, beta, speed = aero.aero_angles(v_loc)
        p = self.params.planform
        om_hat = aero.normalized_rates(xi[..., 9:12], speed, p.b, p.c)
        X = np.column_stack([alpha, beta, u[..., 2], u[..., 3], om_hat])
        return self.source.coefficient_means(X) * scale

    def forces_with_coeffs(self, xi, u, coeffs, wind):
        p = self.params.planform
        R = rot_global_to_local(xi[..., 3:6])
        v_air = xi[..., 6:9] - wind
        v_loc = (R @ v_air[..., None])[..., 0]
        speed = np.linalg.norm(v_loc, axis=-1)
        qS = 0.5 * self.env.rho * speed**2 * p.S
        T1, T2 = u[..., 0], u[..., 1]
        f_loc = np.stack(
            [T1 + T2 - coeffs[..., 0] * qS, coeffs[..., 1] * qS, -coeffs[..., 2] * qS], axis=-1
        )
        tau_loc = np.stack(
            [
                coeffs[..., 3] * qS * p.c,
                coeffs[..., 4] * qS * p.b,
                coeffs[..., 5] * qS * p.c + p.l_T_y * (T2 - T1),
            ],
            axis=-1,
        )
        f_glob = (np.swapaxes(R, -1, -2) @ f_loc[..., None])[..., 0]
        return f_glob, tau_loc


def simulate_open_loop(
    params: DerivedParams,
    reference: ReferenceTrajectory,
    plant,
    env: EnvConstants = EnvConstants(),
) -> ClosedLoopLog:
    """Replay the dense reference feedforward open loop (no sampling, no
    delay, no feedback). With the phi-theory plant this is the numerical
    counterpart of the flatness consistency property."""
    n = len(reference.t)
    xi = reference.xi[0].copy()
    xi_log = np.zeros((n, 12))
    xi_log[0] = xi
    for idx in range(n - 1):
        dt = reference.t[idx + 1] - reference.t[idx]
        u0, u1 = reference.u[idx], reference.u[idx + 1]
        um = 0.5 * (u0 + u1)

        def rhs(x, u):
            f_glob, tau_loc = plant.forces(x, u)
            return dynamics_rhs(x, f_glob, tau_loc, params.mass, params.inertia, env)

        k1 = rhs(xi, u0)
        k2 = rhs(xi + 0.5 * dt * k1, um)
        k3 = rhs(xi + 0.5 * dt * k2, um)
        k4 = rhs(xi + dt * k3, u1)
        xi = xi + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        xi_log[idx + 1] = xi
    thrust = reference.u[:, 0] + reference.u[:, 1]
    err = reference.xi - xi_log
    err[:, 3:6] = wrap_angle(err[:, 3:6])
    return ClosedLoopLog(
        t=reference.t, xi=xi_log, xi_ref=reference.xi, u_applied=reference.u,
        t_tick=reference.t[:0], u_command=reference.u[:0],
        saturated=np.zeros(0, dtype=bool), diverged=False, divergence_time=np.inf,
        cost_cdp=float(np.trapezoid(thrust, reference.t)),
        cost_fcp=W_TRACKING * float(np.trapezoid(np.sum(err**2, axis=1), reference.t)),
    )


def _finalize_log(reference, xi_b, u_b, u_cmd_b, sat_b, diverged, div_time, seed):
    applied = u_b
    thrust_sum = applied[:, 0] + applied[:, 1]
    cost_cdp = float(np.trapezoid(thrust_sum, reference.t))
    err = reference.xi - xi_b
    err[:, 3:6] = wrap_angle(err[:, 3:6])
    track = float(np.trapezoid(np.sum(err**2, axis=1), reference.t))
    du = np.diff(u_cmd_b, axis=0) / CONTROL_TICK
    rate = float(np.sum(du**2) * CONTROL_TICK)
    return ClosedLoopLog(
        t=reference.t, xi=xi_b, xi_ref=reference.xi, u_applied=applied,
        t_tick=np.arange(len(u_cmd_b)) * CONTROL_TICK,
        u_command=u_cmd_b, saturated=sat_b,
        diverged=diverged, divergence_time=float(div_time),
        cost_cdp=cost_cdp, cost_fcp=W_TRACKING * track + W_COMMAND_RATE * rate,
        episode_seed=seed,
    )


def _simulate_numba(params, reference, gains, plant, episodes, env, anti_windup, xi0):
    from . import simkernel

    hifi = getattr(plant, "kind", "lofi") == "hifi"
    if hifi:
        src = plant.source
        pack = (
            src._Xn, src._inv_ls2, src._alphas, src._betas,
            src._y_mean, src._y_std, src._lo, src._span,
        )
    else:
        pack = (
            np.zeros((1, 7)), np.zeros((6, 7)), np.zeros((6, 1)), np.zeros(6),
            np.zeros(6), np.ones(6), np.zeros(7), np.ones(7),
        )
    n = len(reference.t)
    steps_per_tick = int(round(CONTROL_TICK / PLANT_DT))
    n_ticks = (n - 1 + steps_per_tick - 1) // steps_per_tick
    Idiag = np.ascontiguousarray(np.diag(params.inertia))
    phi_k = np.array([params.phi.K_L, params.phi.K_D, params.phi.K_phi,
                      params.phi.K_theta, params.phi.K_psi])
    gains_arr = gains.to_array()
    x0_all = (
        np.tile(reference.xi[0], (len(episodes), 1))
        if xi0 is None else np.array(xi0, dtype=float).reshape(len(episodes), 12)
    )
    logs = []
    for b, ep in enumerate(episodes):
        xi_log = np.zeros((n, 12))
        u_log = np.zeros((n, 4))
        u_cmd = np.zeros((n_ticks, 4))
        sat = np.zeros(n_ticks, dtype=np.bool_)
        alive, div_time = simkernel.simulate_episode(
            np.ascontiguousarray(reference.xi), np.ascontiguousarray(reference.u),
            np.ascontiguousarray(reference.acc), np.ascontiguousarray(reference.t),
            steps_per_tick, gains_arr,
            params.mass, Idiag, phi_k,
            params.planform.l_T_y, params.T_min, params.T_max, params.delta_max,
            env.g, env.rho, params.planform.S, params.planform.b, params.planform.c,
            hifi, *pack,
            np.asarray(ep.coeff_scale, dtype=float), np.asarray(ep.wind, dtype=float),
            anti_windup, np.ascontiguousarray(x0_all[b]),
            HOVER_SPEED_EPS, ALLOC_DEN_EPS, DIVERGENCE_RADIUS,
            ROLL_DIVERGENCE_MARGIN, RATE_DIVERGENCE_LIMIT,
            xi_log, u_log, u_cmd, sat,
        )
        logs.append(
            _finalize_log(reference, xi_log, u_log, u_cmd, sat, not alive, div_time, ep.seed)
        )
    return logs


def simulate_closed_loop(
    params: DerivedParams,
    reference: ReferenceTrajectory,
    gains: Gains,
    plant,
    episodes=(aero.STILL_AIR,),
    env: EnvConstants = EnvConstants(),
    anti_windup: bool = True,
    xi0=None,
    engine: str = "auto",
) -> list[ClosedLoopLog]:
    """Fly the reference closed loop; one log per episode.

    The deployed command is the reference feedforward plus the cascade's
    feedback correction (so zero gains and zero error replay the reference
    exactly up to the hold discretization). Episodes that leave the safe
    attitude/rate/position envelope are frozen and marked diverged.

    engine selects the JIT kernel ("numba") or the reference numpy path
    ("numpy"); "auto" uses the kernel whenever the plant supports it. Both
    engines are deterministic; results agree to integration accuracy.
    """
    if engine == "auto":
        hifi = getattr(plant, "kind", "lofi") == "hifi"
        supported = (not hifi) or isinstance(plant.source, aero.SurrogateSet)
        diag = np.allclose(params.inertia, np.diag(np.diag(params.inertia)))
        engine = "numba" if (supported and diag) else "numpy"
    if engine == "numba":
        return _simulate_numba(params, reference, gains, plant, episodes, env, anti_windup, xi0)
    return _simulate_numpy(params, reference, gains, plant, episodes, env, anti_windup, xi0)


def _simulate_numpy(
    params: DerivedParams,
    reference: ReferenceTrajectory,
    gains: Gains,
    plant,
    episodes=(aero.STILL_AIR,),
    env: EnvConstants = EnvConstants(),
    anti_windup: bool = True,
    xi0=None,
) -> list[ClosedLoopLog]:
    """Reference implementation of the closed loop (batched over episodes)."""
    B = len(episodes)
    n = len(reference.t)
    steps_per_tick = int(round(CONTROL_TICK / PLANT_DT))
    n_ticks = (n - 1 + steps_per_tick - 1) // steps_per_tick

    xi = np.tile(reference.xi[0], (B, 1)) if xi0 is None else np.array(xi0, dtype=float).reshape(B, 12)
    hifi = getattr(plant, "kind", "lofi") == "hifi"
    if hifi:
        scale = np.stack([ep.coeff_scale for ep in episodes])
        wind = np.stack([ep.wind for ep in episodes])

    xi_log = np.zeros((B, n, 12))
    u_log = np.zeros((B, n, 4))
    xi_log[:, 0] = xi
    u_prev = np.tile(reference.u[0], (B, 1))
    u_log[:, 0] = u_prev
    u_cmd = np.zeros((B, n_ticks, 4))
    sat_log = np.zeros((B, n_ticks), dtype=bool)
    alive = np.ones(B, dtype=bool)
    div_time = np.full(B, np.inf)

    gamma_p = np.zeros((B, 3))
    gamma_q = np.zeros((B, 3))
    prev_qc = np.tile(reference.xi[0, 3:6], (B, 1))
    xi_sample = xi.copy()  # state sampled one tick earlier

    lo = np.array([params.T_min, params.T_min, -params.delta_max, -params.delta_max])
    hi = np.array([params.T_max, params.T_max, params.delta_max, params.delta_max])
    g_vec = np.array([0.0, 0.0, env.g])

    def mark_dead(mask, t_now):
        nonlocal alive
        newly = alive & mask
        if np.any(newly):
            div_time[newly] = t_now
            alive = alive & ~newly

    for k in range(n_ticks):
        i0 = k * steps_per_tick
        i_s = max(i0 - steps_per_tick, 0)  # delayed sample index
        ref_xi = reference.xi[i_s]
        ref_acc = reference.acc[i_s]
        i_ff = min(i0 + steps_per_tick, n - 1)
        u_ff = reference.u[i_ff]

        e_p = xi_sample[:, 0:3] - ref_xi[0:3]
        e_q = wrap_angle(xi_sample[:, 3:6] - ref_xi[3:6])

        f_c = position_loop(
            xi_sample[:, 0:3], xi_sample[:, 6:9], ref_xi[0:3], ref_xi[6:9], ref_acc,
            gamma_p, gains, params.mass, env,
        )
        q_c, _ = attitude_setpoint(f_c, ref_xi[6:8], xi_sample[:, 6:9], params, prev_qc)
        prev_qc = q_c
        tau_c = attitude_loop(
            xi_sample[:, 3:6], xi_sample[:, 9:12], q_c, ref_xi[9:12], gamma_q, gains, params.inertia
        )
        raw, _, _, _ = allocate(f_c, tau_c, q_c, xi_sample[:, 6:9], params, saturate=False)

        # feedforward-consistent zero-error command in the same frames
        f_ff = params.mass * (ref_acc + g_vec)
        omega_ref = ref_xi[9:12]
        tau_ff = np.cross(omega_ref, params.inertia @ omega_ref)
        ff_raw, _, _, _ = allocate(
            np.tile(f_ff, (B, 1)), np.tile(tau_ff, (B, 1)), q_c, xi_sample[:, 6:9],
            params, saturate=False,
        )
        combined = u_ff + (raw - ff_raw)
        u_k = np.clip(combined, lo, hi)
        sat_thrust = np.any(u_k[:, 0:2] != combined[:, 0:2], axis=-1)
        sat_elevon = np.any(u_k[:, 2:4] != combined[:, 2:4], axis=-1)
        sat_flag = sat_thrust | sat_elevon
        u_cmd[:, k] = u_k
        sat_log[:, k] = sat_flag

        # integrator update on the sampled errors; anti-windup freezes each
        # loop's integrator while its own actuator channel saturates
        if anti_windup:
            upd_p = (~sat_thrust & alive)[:, None]
            upd_q = (~sat_elevon & alive)[:, None]
        else:
            upd_p = upd_q = alive[:, None]
        gamma_p = gamma_p + upd_p * e_p * CONTROL_TICK
        gamma_q = gamma_q + upd_q * e_q * CONTROL_TICK

        xi_sample = xi.copy()

        for j in range(steps_per_tick):
            idx = i0 + j
            if idx + 1 >= n:
                break
            dt = reference.t[idx + 1] - reference.t[idx]
            mark_dead(np.abs(xi[:, 4]) > np.pi / 2 - ROLL_DIVERGENCE_MARGIN, reference.t[idx])
            mark_dead(np.max(np.abs(xi[:, 9:12]), axis=1) > RATE_DIVERGENCE_LIMIT, reference.t[idx])
            xi_safe = np.where(alive[:, None], xi, 0.0)

            frac0 = j / steps_per_tick
            frac1 = (j + 1) / steps_per_tick
            u0 = u_prev + frac0 * (u_k - u_prev)
            u1 = u_prev + frac1 * (u_k - u_prev)
            um = 0.5 * (u0 + u1)

            if hifi:
                coeffs = plant.eval_coeffs(xi_safe, u0, scale, wind)

                def rhs(x, u):
                    f_glob, tau_loc = plant.forces_with_coeffs(x, u, coeffs, wind)
                    return dynamics_rhs(x, f_glob, tau_loc, params.mass, params.inertia, env)

            else:

                def rhs(x, u):
                    f_glob, tau_loc = plant.forces(x, u)
                    return dynamics_rhs(x, f_glob, tau_loc, params.mass, params.inertia, env)

            k1 = rhs(xi_safe, u0)
            k2 = rhs(xi_safe + 0.5 * dt * k1, um)
            k3 = rhs(xi_safe + 0.5 * dt * k2, um)
            k4 = rhs(xi_safe + dt * k3, u1)
            step = (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            xi = np.where(alive[:, None], xi + step, xi)

            finite = np.isfinite(xi).all(axis=1)
            err = np.linalg.norm(
                np.where(finite[:, None], xi[:, 0:3], 0.0) - reference.xi[idx + 1, 0:3], axis=1
            )
            mark_dead(~finite | (err > DIVERGENCE_RADIUS), reference.t[idx + 1])
            xi = np.where(alive[:, None], xi, xi_log[:, idx])
            xi_log[:, idx + 1] = xi
            u_log[:, idx + 1] = np.where(alive[:, None], u1, u_log[:, idx])
        u_prev = u_k

    return [
        _finalize_log(
            reference, xi_log[b], u_log[b], u_cmd[b], sat_log[b],
            not alive[b], div_time[b], episodes[b].seed,
        )
        for b in range(B)
    ]
