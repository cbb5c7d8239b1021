"""Rigid-body flight dynamics: frames, angular kinematics, Newton-Euler, RK4.

Conventions
-----------
Global frame: inertial, z up. Gravity acts along -z with magnitude g.
Local frame: body fixed, x out the nose, y along the right wing, z completing
the right-handed triad.

Attitude is parametrized yaw-roll-pitch, q = (psi, phi, theta). A global
vector w maps to the body frame through three elementary rotations applied in
sequence:

    w'   = rot_z(psi)^T  w
    w''  = rot_x(phi)^T  w'
    w''' = rot_y(theta)^T w''     (= w in the local frame)

The state vector is xi = (p_global, q, v_global, Omega_local) in R^12 and the
input vector is upsilon = (T1, T2, delta1, delta2) in R^4.

All functions are pure and accept batched angle arrays (leading dimensions
broadcast); matrices are returned with shape (..., 3, 3).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Roll magnitude must stay below pi/2 by this margin wherever the Euler-rate
# map J(q) is inverted.
ROLL_SINGULARITY_MARGIN = 1e-6

# Index slices of the 12-state vector.
POS = slice(0, 3)
ATT = slice(3, 6)
VEL = slice(6, 9)
RATE = slice(9, 12)


class KinematicSingularityError(RuntimeError):
    """Raised when inverting the Euler-rate map at |phi| ~ pi/2."""


@dataclass(frozen=True)
class EnvConstants:
    """Ambient constants: air density rho (kg/m^3) and gravity g (m/s^2)."""

    rho: float = 1.225
    g: float = 9.81

    def __post_init__(self):
        if self.rho <= 0 or self.g <= 0:
            raise ValueError("rho and g must be positive")

    @property
    def gravity_vec(self) -> np.ndarray:
        """Gravity acceleration vector in the global frame (z up)."""
        return np.array([0.0, 0.0, -self.g])


def rot_x(a):
    """Rotation matrix about the x axis, batched over a."""
    a = np.asarray(a, dtype=float)
    c, s = np.cos(a), np.sin(a)
    z, o = np.zeros_like(c), np.ones_like(c)
    return np.stack(
        [np.stack([o, z, z], -1), np.stack([z, c, -s], -1), np.stack([z, s, c], -1)],
        axis=-2,
    )


def rot_y(a):
    a = np.asarray(a, dtype=float)
    c, s = np.cos(a), np.sin(a)
    z, o = np.zeros_like(c), np.ones_like(c)
    return np.stack(
        [np.stack([c, z, s], -1), np.stack([z, o, z], -1), np.stack([-s, z, c], -1)],
        axis=-2,
    )


def rot_z(a):
    a = np.asarray(a, dtype=float)
    c, s = np.cos(a), np.sin(a)
    z, o = np.zeros_like(c), np.ones_like(c)
    return np.stack(
        [np.stack([c, -s, z], -1), np.stack([s, c, z], -1), np.stack([z, z, o], -1)],
        axis=-2,
    )


def rot_global_to_local(q) -> np.ndarray:
    """Rotation matrix R with w_local = R @ w_global for attitude q = (psi, phi, theta).

    R = rot_y(theta)^T rot_x(phi)^T rot_z(psi)^T. The inverse is the transpose.
    Accepts q with shape (..., 3).
    """
    q = np.asarray(q, dtype=float)
    psi, phi, theta = q[..., 0], q[..., 1], q[..., 2]
    Rt = np.swapaxes(rot_y(theta), -1, -2)
    Rp = np.swapaxes(rot_x(phi), -1, -2)
    Rs = np.swapaxes(rot_z(psi), -1, -2)
    return Rt @ Rp @ Rs


def rot_local_to_global(q) -> np.ndarray:
    """Transpose of rot_global_to_local."""
    return np.swapaxes(rot_global_to_local(q), -1, -2)


def angular_jacobian(q) -> np.ndarray:
    """Map J(q) with Omega_local = J(q) @ qdot, qdot = (psi_dot, phi_dot, theta_dot).

    Columns are the body-frame directions of the elementary rotation axes:
    J = [R_y(th)^T R_x(ph)^T e_z | R_y(th)^T e_x | e_y]. det J = cos(phi), so
    the map is invertible away from |phi| = pi/2.
    """
    q = np.asarray(q, dtype=float)
    phi, theta = q[..., 1], q[..., 2]
    cph, sph = np.cos(phi), np.sin(phi)
    cth, sth = np.cos(theta), np.sin(theta)
    z = np.zeros_like(cph)
    o = np.ones_like(cph)
    row0 = np.stack([-sth * cph, cth, z], -1)
    row1 = np.stack([sph, z, o], -1)
    row2 = np.stack([cth * cph, sth, z], -1)
    return np.stack([row0, row1, row2], axis=-2)


def euler_rates(q, omega_local) -> np.ndarray:
    """Invert J(q): qdot = J(q)^-1 Omega_local. Errors near |phi| = pi/2."""
    q = np.asarray(q, dtype=float)
    phi = q[..., 1]
    if np.any(np.abs(phi) >= np.pi / 2 - ROLL_SINGULARITY_MARGIN):
        raise KinematicSingularityError(
            "Euler-rate map singular: |phi| within margin of pi/2"
        )
    J = angular_jacobian(q)
    return np.linalg.solve(J, np.asarray(omega_local, dtype=float)[..., None])[..., 0]


def dynamics_rhs(xi, f_global, tau_local, mass, inertia, env: EnvConstants) -> np.ndarray:
    """Newton-Euler right-hand side for the 12-state vector.

        p_dot = v
        q_dot = J(q)^-1 Omega
        m v_dot = f_global - m g e_z
        I Omega_dot + Omega x I Omega = tau_local

    Batched over leading dimensions of xi / forces.
    """
    xi = np.asarray(xi, dtype=float)
    f_global = np.asarray(f_global, dtype=float)
    tau_local = np.asarray(tau_local, dtype=float)
    q = xi[..., ATT]
    v = xi[..., VEL]
    omega = xi[..., RATE]
    qdot = euler_rates(q, omega)
    vdot = f_global / mass + env.gravity_vec
    Iw = omega @ inertia.T
    omegadot = np.linalg.solve(
        np.broadcast_to(inertia, omega.shape[:-1] + (3, 3)),
        (tau_local - np.cross(omega, Iw))[..., None],
    )[..., 0]
    return np.concatenate([v, qdot, vdot, omegadot], axis=-1)


def rk4_step(rhs, x, t, dt):
    """One classical Runge-Kutta step of x' = rhs(t, x)."""
    k1 = rhs(t, x)
    k2 = rhs(t + 0.5 * dt, x + 0.5 * dt * k1)
    k3 = rhs(t + 0.5 * dt, x + 0.5 * dt * k2)
    k4 = rhs(t + dt, x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate_step(xi, force_map, dt, mass, inertia, env: EnvConstants, t=0.0):
    """Advance the rigid-body state one RK4 step.

    force_map(t, xi) must return (f_global, tau_local).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")

    def rhs(tt, x):
        f, tau = force_map(tt, x)
        return dynamics_rhs(x, f, tau, mass, inertia, env)

    return rk4_step(rhs, xi, t, dt)


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    return np.mod(np.asarray(a) + np.pi, 2.0 * np.pi) - np.pi
