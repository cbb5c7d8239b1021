"""Differential-flatness transforms between flat output and state/input.

The flat output is sigma = (x, y, z, psi). Any sufficiently smooth flat
trajectory maps to the full state and inputs of the phi-theory model:

* v, vdot follow directly from position derivatives; the required global
  force is f = m (vdot + g e_z).

* With f' = rot_z(psi)^T f, the roll angle puts f' into the roll plane:
  phi = -atan2(f'_y, f'_z).

* With f'' = rot_x(phi)^T f' and v'' the velocity in the same frame, pitch
  and total thrust solve the body x-z force balance:

      theta = atan2(-(f''_z + K_L v''_z |v|),  f''_x + K_L v''_x |v|)
      T     = (-f''_z - K_D v''_z |v|) sin(theta)
              + (f''_x + K_D v''_x |v|) cos(theta)

* Angle rates come from central differences of the algebraic angle series
  (branch-unwrapped along time); Omega = J(q) qdot, and the body torque from
  the rotational Newton-Euler balance distributes into per-motor thrusts and
  elevon deflections:

      T1,2    = T/2 +- (K_psi/K_phi tau_x - tau_z) / (2 l_T_y)
      delta12 = (tau_y/K_theta -+ tau_x/K_phi) / (2 v'''_x |v|)

atan2 is used wherever an arctangent appears and the resulting angle series
is unwrapped to the nearest branch; near hover the attitude holds its last
well-defined value and the elevon denominator is clamped (both flagged).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import EnvConstants, angular_jacobian, rot_x, rot_z
from .geometry import DerivedParams

HOVER_SPEED_EPS = 0.5  # m/s; below this the attitude holds its last value
ALLOC_DEN_EPS = 0.5  # m^2/s^2 floor on v'''_x |v| in the elevon allocation


@dataclass(frozen=True)
class FlatPoint:
    """Flat output with the derivatives the transforms consume.

    Position derivatives to 4th order (snap), yaw to 2nd.
    """

    pos: np.ndarray
    vel: np.ndarray
    acc: np.ndarray
    jerk: np.ndarray
    snap: np.ndarray
    psi: float
    psi_dot: float
    psi_ddot: float


@dataclass
class FlatTrajectorySamples:
    """Flat-to-state/input evaluation on a uniform time grid."""

    t: np.ndarray
    pos: np.ndarray
    vel: np.ndarray
    acc: np.ndarray
    attitude: np.ndarray  # unwrapped (psi, phi, theta)
    omega: np.ndarray
    omega_dot: np.ndarray
    thrust_total: np.ndarray
    inputs_raw: np.ndarray  # before saturation, (n, 4)
    inputs: np.ndarray  # saturated, (n, 4)
    saturated: np.ndarray  # bool (n,)
    hover_guard: np.ndarray  # bool (n,)
    alloc_guard: np.ndarray  # bool (n,)

    @property
    def states(self) -> np.ndarray:
        """State trajectory xi(t), rows (p, q, v, Omega)."""
        return np.concatenate([self.pos, self.attitude, self.vel, self.omega], axis=1)


def _central_diff(y: np.ndarray, dt: float) -> np.ndarray:
    out = np.empty_like(y)
    out[1:-1] = (y[2:] - y[:-2]) / (2.0 * dt)
    # second-order one-sided ends
    out[0] = (-3.0 * y[0] + 4.0 * y[1] - y[2]) / (2.0 * dt)
    out[-1] = (3.0 * y[-1] - 4.0 * y[-2] + y[-3]) / (2.0 * dt)
    return out


def _attitude_series(vel, acc, psi, params: DerivedParams, env: EnvConstants):
    """Unwrapped (psi, phi, theta) plus intermediate-frame quantities."""
    m = params.mass
    K_L = params.phi.K_L
    f = m * (acc + np.array([0.0, 0.0, env.g]))
    fp = (rot_z(psi).swapaxes(-1, -2) @ f[..., None])[..., 0]
    phi = -np.arctan2(fp[..., 1], fp[..., 2])
    fpp = (rot_x(phi).swapaxes(-1, -2) @ fp[..., None])[..., 0]
    vp = (rot_z(psi).swapaxes(-1, -2) @ vel[..., None])[..., 0]
    vpp = (rot_x(phi).swapaxes(-1, -2) @ vp[..., None])[..., 0]
    speed = np.linalg.norm(vel, axis=-1)
    theta = np.arctan2(
        -(fpp[..., 2] + K_L * vpp[..., 2] * speed),
        fpp[..., 0] + K_L * vpp[..., 0] * speed,
    )
    return phi, theta, fpp, vpp, speed


def flat_trajectory(
    t: np.ndarray,
    pos: np.ndarray,
    vel: np.ndarray,
    acc: np.ndarray,
    psi: np.ndarray,
    params: DerivedParams,
    env: EnvConstants = EnvConstants(),
) -> FlatTrajectorySamples:
    """Evaluate the flat transforms on a uniform grid.

    pos/vel/acc are (n, 3); psi is (n,). Angle rates, body rates, and the
    torque all come from grid central differences.
    """
    t = np.asarray(t, dtype=float)
    dt = float(t[1] - t[0])
    k = params.phi
    m = params.mass
    inertia = params.inertia

    phi, theta, fpp, vpp, speed = _attitude_series(vel, acc, psi, params, env)

    # Hover guard: hold the last well-defined attitude below the speed floor.
    hover = speed < HOVER_SPEED_EPS
    if np.any(hover):
        phi = phi.copy()
        theta = theta.copy()
        idx = np.where(~hover, np.arange(len(t)), -1)
        np.maximum.accumulate(idx, out=idx)
        first_ok = np.argmax(~hover) if np.any(~hover) else 0
        idx = np.where(idx < 0, first_ok, idx)
        phi[hover] = phi[idx][hover]
        theta[hover] = theta[idx][hover]

    psi_u = np.unwrap(np.asarray(psi, dtype=float))
    phi_u = np.unwrap(phi)
    theta_u = np.unwrap(theta)
    q = np.stack([psi_u, phi_u, theta_u], axis=-1)

    qdot = _central_diff(q, dt)
    J = angular_jacobian(q)
    omega = (J @ qdot[..., None])[..., 0]
    omega_dot = _central_diff(omega, dt)
    tau = omega_dot @ inertia.T + np.cross(omega, omega @ inertia.T)

    thrust = (
        -(fpp[..., 2] + k.K_D * vpp[..., 2] * speed) * np.sin(theta_u)
        + (fpp[..., 0] + k.K_D * vpp[..., 0] * speed) * np.cos(theta_u)
    )

    # allocation (Newton-Euler torque -> motors and elevons)
    vppp_x = np.cos(theta_u) * vpp[..., 0] - np.sin(theta_u) * vpp[..., 2]
    den_raw = vppp_x * speed
    alloc_guard = np.abs(den_raw) < ALLOC_DEN_EPS
    den = np.where(alloc_guard, np.where(den_raw < 0, -ALLOC_DEN_EPS, ALLOC_DEN_EPS), den_raw)

    split = (k.K_psi / k.K_phi * tau[..., 0] - tau[..., 2]) / (2.0 * params.planform.l_T_y)
    T1 = 0.5 * thrust + split
    T2 = 0.5 * thrust - split
    d1 = (tau[..., 1] / k.K_theta - tau[..., 0] / k.K_phi) / (2.0 * den)
    d2 = (tau[..., 0] / k.K_phi + tau[..., 1] / k.K_theta) / (2.0 * den)
    raw = np.stack([T1, T2, d1, d2], axis=-1)

    lo = np.array([params.T_min, params.T_min, -params.delta_max, -params.delta_max])
    hi = np.array([params.T_max, params.T_max, params.delta_max, params.delta_max])
    sat = np.clip(raw, lo, hi)
    saturated = np.any(np.abs(sat - raw) > 0, axis=-1)

    return FlatTrajectorySamples(
        t=t, pos=np.asarray(pos, dtype=float), vel=np.asarray(vel, dtype=float),
        acc=np.asarray(acc, dtype=float), attitude=q, omega=omega,
        omega_dot=omega_dot, thrust_total=thrust, inputs_raw=raw, inputs=sat,
        saturated=saturated, hover_guard=hover, alloc_guard=alloc_guard,
    )


def _micro_grid(fp: FlatPoint, h: float = 1e-4):
    """Five-point Taylor extension of a flat point for local differencing."""
    ks = np.arange(-2.0, 3.0)[:, None] * h
    pos = fp.pos + ks * fp.vel + ks**2 / 2 * fp.acc + ks**3 / 6 * fp.jerk + ks**4 / 24 * fp.snap
    vel = fp.vel + ks * fp.acc + ks**2 / 2 * fp.jerk + ks**3 / 6 * fp.snap
    acc = fp.acc + ks * fp.jerk + ks**2 / 2 * fp.snap
    kp = ks[:, 0]
    psi = fp.psi + kp * fp.psi_dot + kp**2 / 2 * fp.psi_ddot
    t = 2.0 * h + kp
    return t, pos, vel, acc, psi


def flat_to_state(fp: FlatPoint, params: DerivedParams, env: EnvConstants = EnvConstants()) -> np.ndarray:
    """State vector xi for a single flat point (hover convention applies)."""
    t, pos, vel, acc, psi = _micro_grid(fp)
    traj = flat_trajectory(t, pos, vel, acc, psi, params, env)
    return traj.states[2]


def flat_to_input(fp: FlatPoint, params: DerivedParams, env: EnvConstants = EnvConstants(), saturate: bool = True):
    """Input vector upsilon for a single flat point, plus guard flags."""
    t, pos, vel, acc, psi = _micro_grid(fp)
    traj = flat_trajectory(t, pos, vel, acc, psi, params, env)
    u = traj.inputs[2] if saturate else traj.inputs_raw[2]
    return u, bool(traj.saturated[2]), bool(traj.alloc_guard[2])


def steady_cruise_point(speed: float, altitude: float = 100.0) -> FlatPoint:
    """Level constant-speed flight along +x at the given speed."""
    z3 = np.zeros(3)
    return FlatPoint(
        pos=np.array([0.0, 0.0, altitude]),
        vel=np.array([speed, 0.0, 0.0]),
        acc=z3, jerk=z3, snap=z3,
        psi=0.0, psi_dot=0.0, psi_ddot=0.0,
    )
