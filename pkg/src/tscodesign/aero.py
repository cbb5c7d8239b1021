"""Aerodynamic force models: low-fidelity phi-theory and the reality emulator.

Two force pipelines share the rigid-body dynamics:

* the low-fidelity phi-theory model (used by trajectory optimization and the
  flat inverse dynamics), linear in products of body-frame velocity
  components and control inputs;

* the high-fidelity pipeline: nondimensional force/moment coefficients from
  a per-design provider, interpolated by Gaussian-process surrogates fitted
  on a 100-state design of experiments, assembled with dynamic pressure and
  reference lengths, and perturbed per episode (multiplicative coefficient
  noise plus a constant wind offset) to emulate operational stochasticity.

The built-in provider is a documented synthetic nonlinear model standing in
for an external vortex-lattice solver; ``avl_adapter`` declares the file
interface for the real pipeline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .dynamics import EnvConstants, rot_global_to_local
from .geometry import DELTA_MAX, DesignVector, Planform, PhiCoeffs, derive_geometry
from . import gp

# Surrogate design-of-experiments box: (alpha, beta, delta1, delta2, 3 rates).
DOE_SIZE = 100
DOE_LOWER = np.array([-np.radians(15.0), -np.radians(10.0), -DELTA_MAX, -DELTA_MAX, -0.3, -0.3, -0.3])
DOE_UPPER = -DOE_LOWER
COEFF_NAMES = ("C_X", "C_Y", "C_Z", "C_phi", "C_theta", "C_psi")

RATE_CLIP = 2.0  # normalized-rate sanity clip near zero airspeed
V_EPS = 1e-9


@dataclass(frozen=True)
class CoeffSet:
    """Nondimensional force (C_X, C_Y, C_Z) and moment (C_phi, C_theta, C_psi)
    coefficients; scalar or batched."""

    C_X: np.ndarray
    C_Y: np.ndarray
    C_Z: np.ndarray
    C_phi: np.ndarray
    C_theta: np.ndarray
    C_psi: np.ndarray

    def stack(self) -> np.ndarray:
        return np.stack([getattr(self, n) for n in COEFF_NAMES], axis=-1)


def aero_angles(v_local):
    """Angle of attack and sideslip from the body-frame airspeed vector."""
    v_local = np.asarray(v_local, dtype=float)
    speed = np.linalg.norm(v_local, axis=-1)
    alpha = np.arctan2(v_local[..., 2], v_local[..., 0])
    with np.errstate(invalid="ignore", divide="ignore"):
        sin_beta = np.where(speed > V_EPS, v_local[..., 1] / np.maximum(speed, V_EPS), 0.0)
    beta = np.arcsin(np.clip(sin_beta, -1.0, 1.0))
    return alpha, beta, speed


class SyntheticCoefficientModel:
    """Deterministic analytic coefficient provider for one design.

    Constant table (all angles in radians):

    ================  =======================================================
    lift slope        a0 = 2 pi AR / (AR + 2)
    stall blending    logistic centred at +-12 deg, width 1.2 deg; post-stall
                      branch 2 sgn(a) sin^2(a) cos(a)
    elevon lift       0.5 * f_con * a0 * (1 - blend) per surface
    drag polar        C_X = 0.0001 + C_L^2 / (pi AR 0.9) + 2 blend |sin a|^3
    side force        C_Y = -0.1 beta
    pitch moment      c_m0 = 1.5 * mean_twist;
                      c_ma = -a0 (x_ac + 0.1 c - x_cog) / c  (neutral point a
                      tenth-chord behind the quarter-chord line);
                      c_md = 0.9 (|l_d_x| / b) f_con a0 per +-pair;
                      damping -5.0 * rate
    roll moment       c_ld = 0.9 (l_d_y / c) f_con a0 per differential pair;
                      damping -0.5 (l_d_y / c); dihedral 2.0 (z_tip-z_fus)/b
    yaw moment        differential elevon drag through the polar times
                      0.9 (l_d_y / c); damping -0.2; weathercock -0.02 beta
    ================  =======================================================
    """

    ALPHA_STALL = math.radians(12.0)
    BLEND_WIDTH = math.radians(1.2)
    CD0 = 0.0001
    SIDE_SLOPE = -0.1
    TWIST_MOMENT = 1.5
    CONTROL_ETA = 0.9
    NEUTRAL_POINT_SHIFT = 0.10  # chords aft of the quarter-chord line
    PITCH_DAMPING = -5.0
    ROLL_DAMPING = -0.5
    YAW_DAMPING = -0.2
    WEATHERCOCK = -0.02
    DIHEDRAL = 2.0
    LIFT_RATE = 4.0

    def __init__(self, design: DesignVector, planform: Planform | None = None):
        self.design = design
        self.planform = planform if planform is not None else derive_geometry(design)
        p = self.planform
        self.a0 = 2.0 * math.pi * p.aspect_ratio / (p.aspect_ratio + 2.0)
        self.k_induced = 1.0 / (math.pi * p.aspect_ratio * 0.9)
        self.c_m0 = self.TWIST_MOMENT * p.mean_twist
        x_np = p.x_ac + self.NEUTRAL_POINT_SHIFT * p.c
        self.c_ma = -self.a0 * (x_np - p.x_cog) / p.c
        self.c_md = self.CONTROL_ETA * abs(p.l_d_x) / p.b * design.f_con * self.a0
        self.c_ld = self.CONTROL_ETA * (p.l_d_y / p.c) * design.f_con * self.a0
        self.c_nd_scale = self.CONTROL_ETA * (p.l_d_y / p.c)
        self.c_lb = self.DIHEDRAL * (design.z_tip - design.z_fus) / p.b
        self.c_lp = self.ROLL_DAMPING * (p.l_d_y / p.c)

    def _blend(self, alpha):
        return 1.0 / (1.0 + np.exp(-(np.abs(alpha) - self.ALPHA_STALL) / self.BLEND_WIDTH))

    def _elevon_lift(self, alpha, delta):
        return 0.5 * self.design.f_con * self.a0 * (1.0 - self._blend(alpha)) * delta

    def coefficients(self, alpha, beta=0.0, delta1=0.0, delta2=0.0, omega_hat=None) -> CoeffSet:
        alpha = np.asarray(alpha, dtype=float)
        beta = np.asarray(beta, dtype=float)
        delta1 = np.asarray(delta1, dtype=float)
        delta2 = np.asarray(delta2, dtype=float)
        if omega_hat is None:
            om = np.zeros(np.broadcast(alpha, beta).shape + (3,))
        else:
            om = np.asarray(omega_hat, dtype=float)

        sig = self._blend(alpha)
        lift_wing = (1.0 - sig) * self.a0 * (alpha + self.planform.mean_twist)
        lift_stall = sig * 2.0 * np.sign(alpha) * np.sin(alpha) ** 2 * np.cos(alpha)
        dcl1 = self._elevon_lift(alpha, delta1)
        dcl2 = self._elevon_lift(alpha, delta2)
        C_L = lift_wing + lift_stall + dcl1 + dcl2 + self.LIFT_RATE * om[..., 1]

        C_X = self.CD0 + self.k_induced * C_L**2 + 2.0 * sig * np.abs(np.sin(alpha)) ** 3
        C_Y = self.SIDE_SLOPE * beta

        base_lift = lift_wing + lift_stall
        dcd1 = self.k_induced * (2.0 * base_lift * dcl1 + dcl1**2)
        dcd2 = self.k_induced * (2.0 * base_lift * dcl2 + dcl2**2)

        C_phi = (
            self.c_ld * (delta2 - delta1)
            + self.c_lp * om[..., 0]
            + self.c_lb * beta
        )
        C_theta = (
            self.c_m0
            + self.c_ma * alpha
            + self.c_md * (delta1 + delta2)
            + self.PITCH_DAMPING * om[..., 1]
        )
        C_psi = (
            self.c_nd_scale * (dcd2 - dcd1)
            + self.YAW_DAMPING * om[..., 2]
            + self.WEATHERCOCK * beta
        )
        return CoeffSet(C_X=C_X, C_Y=C_Y, C_Z=C_L, C_phi=C_phi, C_theta=C_theta, C_psi=C_psi)

    def coefficient_means(self, X) -> np.ndarray:
        """Provider values on stacked DoE-layout inputs (surrogate bypass)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        cs = self.coefficients(
            alpha=X[:, 0], beta=X[:, 1], delta1=X[:, 2], delta2=X[:, 3],
            omega_hat=X[:, 4:7],
        )
        return cs.stack()


def lofi_forces(v_local, upsilon, phi: PhiCoeffs, l_T_y: float):
    """phi-theory body-frame force and torque.

        f   = (T1 + T2 - K_D vx |v|, 0, -K_L vz |v|)
        tau = (K_phi vx |v| (d2 - d1),
               K_theta vx |v| (d1 + d2),
               K_psi vx |v| (d2 - d1) + l_T_y (T2 - T1))

    Batched over leading dimensions.
    """
    v_local = np.asarray(v_local, dtype=float)
    upsilon = np.asarray(upsilon, dtype=float)
    T1, T2 = upsilon[..., 0], upsilon[..., 1]
    d1, d2 = upsilon[..., 2], upsilon[..., 3]
    vx, vz = v_local[..., 0], v_local[..., 2]
    speed = np.linalg.norm(v_local, axis=-1)
    vxv = vx * speed
    zeros = np.zeros_like(vx)
    f = np.stack([T1 + T2 - phi.K_D * vxv, zeros, -phi.K_L * v_local[..., 2] * speed], axis=-1)
    tau = np.stack(
        [
            phi.K_phi * vxv * (d2 - d1),
            phi.K_theta * vxv * (d1 + d2),
            phi.K_psi * vxv * (d2 - d1) + l_T_y * (T2 - T1),
        ],
        axis=-1,
    )
    return f, tau


# ---------------------------------------------------------------------------
# Reality emulator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EmulatorConfig:
    """Stochasticity of the high-fidelity environment.

    Per episode: one multiplicative N(0, coeff_noise_std) perturbation per
    coefficient, frozen for the episode, and a constant wind vector with
    independent N(0, wind_std) components.
    """

    coeff_noise_std: float = 0.05
    wind_std: float = 0.5

    def __post_init__(self):
        if self.coeff_noise_std < 0 or self.wind_std < 0:
            raise ValueError("noise magnitudes must be nonnegative")

    def episode(self, seed) -> "Episode":
        rng = np.random.default_rng(seed)
        scale = 1.0 + self.coeff_noise_std * rng.standard_normal(6)
        wind = self.wind_std * rng.standard_normal(3)
        return Episode(seed=seed, coeff_scale=scale, wind=wind)

    @classmethod
    def quiet(cls) -> "EmulatorConfig":
        """Stochasticity turned off."""
        return cls(coeff_noise_std=0.0, wind_std=0.0)


@dataclass(frozen=True)
class Episode:
    """Frozen stochastic draw for one closed-loop flight."""

    seed: object
    coeff_scale: np.ndarray = field(default_factory=lambda: np.ones(6))
    wind: np.ndarray = field(default_factory=lambda: np.zeros(3))


STILL_AIR = Episode(seed=None)


class SurrogateSet:
    """Per-coefficient GP interpolators with a batched mean evaluator."""

    def __init__(self, models: dict):
        self.models = models
        ref = models[COEFF_NAMES[0]]
        self._Xn = ref.Xn
        self._lo = ref.x_lo
        self._span = ref.x_span
        self._inv_ls2 = np.stack([models[n].lengthscales ** -2 for n in COEFF_NAMES])
        self._alphas = np.stack([models[n].alpha_vec for n in COEFF_NAMES])
        self._betas = np.array([models[n].beta for n in COEFF_NAMES])
        self._y_mean = np.array([models[n].y_mean for n in COEFF_NAMES])
        self._y_std = np.array([models[n].y_std for n in COEFF_NAMES])

    def coefficient_means(self, X) -> np.ndarray:
        """Mean coefficient predictions, shape (m, 6)."""
        Xq = (np.atleast_2d(np.asarray(X, dtype=float)) - self._lo) / self._span
        D = Xq[:, None, :] - self._Xn[None, :, :]
        D2 = D * D
        r2 = np.einsum("mnk,gk->gmn", D2, self._inv_ls2)
        r = np.sqrt(np.maximum(r2, 0.0))
        s5r = math.sqrt(5.0) * r
        K = (1.0 + s5r + (5.0 / 3.0) * r2) * np.exp(-s5r)
        mu_n = self._betas[:, None] + np.einsum("gmn,gn->gm", K, self._alphas)
        return (self._y_mean[:, None] + self._y_std[:, None] * mu_n).T

    def coefficients(self, alpha, beta=0.0, delta1=0.0, delta2=0.0, omega_hat=None) -> CoeffSet:
        alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
        shape = alpha.shape
        n = alpha.size
        cols = [np.broadcast_to(np.asarray(v, dtype=float), shape).ravel()
                for v in (alpha, beta, delta1, delta2)]
        if omega_hat is None:
            om = np.zeros((n, 3))
        else:
            om = np.broadcast_to(np.asarray(omega_hat, dtype=float), shape + (3,)).reshape(n, 3)
        X = np.column_stack(cols + [om])
        vals = self.coefficient_means(X)
        fields = {name: vals[:, i].reshape(shape) for i, name in enumerate(COEFF_NAMES)}
        return CoeffSet(**fields)


def surrogate_doe(rng) -> np.ndarray:
    """100-state scrambled-Sobol design over the coefficient input box."""
    seed = np.random.default_rng(rng).integers(0, 2**31 - 1)
    sampler = qmc.Sobol(d=7, scramble=True, seed=int(seed))
    n_pow2 = 1 << (DOE_SIZE - 1).bit_length()
    u = sampler.random_base2(n_pow2.bit_length() - 1)[:DOE_SIZE]
    return DOE_LOWER + u * (DOE_UPPER - DOE_LOWER)


def fit_design_surrogate(provider, rng=0, budget: gp.FitBudget = gp.FitBudget()) -> SurrogateSet:
    """Fit one GP interpolator per force coefficient on a fresh DoE."""
    X = surrogate_doe(rng)
    Y = provider.coefficient_means(X)
    models = {}
    for i, name in enumerate(COEFF_NAMES):
        models[name] = gp.fit_gpi(X, Y[:, i], budget=budget, rng=(rng, i))
    return SurrogateSet(models)


def normalized_rates(omega_local, speed, b, c):
    """(p b, q c, r b) / (2 V), clipped for near-hover sanity."""
    omega_local = np.asarray(omega_local, dtype=float)
    V = np.maximum(np.asarray(speed, dtype=float), 0.5)
    om = np.stack(
        [
            omega_local[..., 0] * b,
            omega_local[..., 1] * c,
            omega_local[..., 2] * b,
        ],
        axis=-1,
    ) / (2.0 * V[..., None])
    return np.clip(om, -RATE_CLIP, RATE_CLIP)


def hifi_forces(
    xi,
    upsilon,
    coeff_source,
    planform: Planform,
    env: EnvConstants = EnvConstants(),
    episode: Episode = STILL_AIR,
):
    """Body-frame force/torque of the high-fidelity pipeline.

    Coefficients come from coeff_source (fitted surrogates or a provider
    bypass) at the episode-perturbed state; the airspeed is the inertial
    velocity minus the episode wind. Assembly:

        f   = (T1 + T2 - C_X qS, C_Y qS, -C_Z qS)
        tau = (C_phi qS c, C_theta qS b, C_psi qS c + l_T_y (T2 - T1))

    with qS = 1/2 rho |v_air|^2 S.
    """
    xi = np.asarray(xi, dtype=float)
    upsilon = np.asarray(upsilon, dtype=float)
    q = xi[..., 3:6]
    R = rot_global_to_local(q)
    v_air_global = xi[..., 6:9] - episode.wind
    v_local = (R @ v_air_global[..., None])[..., 0]
    alpha, beta, speed = aero_angles(v_local)
    om_hat = normalized_rates(xi[..., 9:12], speed, planform.b, planform.c)

    shape = alpha.shape
    X = np.column_stack(
        [
            alpha.ravel(), beta.ravel(),
            np.broadcast_to(upsilon[..., 2], shape).ravel(),
            np.broadcast_to(upsilon[..., 3], shape).ravel(),
            om_hat.reshape(-1, 3),
        ]
    )
    coeffs = coeff_source.coefficient_means(X) * episode.coeff_scale
    coeffs = coeffs.reshape(shape + (6,))

    qS = 0.5 * env.rho * speed**2 * planform.S
    T1, T2 = upsilon[..., 0], upsilon[..., 1]
    f = np.stack(
        [
            T1 + T2 - coeffs[..., 0] * qS,
            coeffs[..., 1] * qS,
            -coeffs[..., 2] * qS,
        ],
        axis=-1,
    )
    tau = np.stack(
        [
            coeffs[..., 3] * qS * planform.c,
            coeffs[..., 4] * qS * planform.b,
            coeffs[..., 5] * qS * planform.c + planform.l_T_y * (T2 - T1),
        ],
        axis=-1,
    )
    return f, tau


def design_model(d: DesignVector, env: EnvConstants = EnvConstants()):
    """Convenience: provider plus full derived parameters for one design."""
    from .geometry import derive_params

    planform = derive_geometry(d)
    provider = SyntheticCoefficientModel(d, planform)
    params = derive_params(d, provider, env)
    return provider, params
