"""Conceptual design parameterization and derived physical parameters.

A blended-wing-body tail-sitter is described by 12 design variables: chords
and leading-edge positions of three sections (symmetry plane, fuselage joint,
tip), section twists, and the chord fraction at which the control surface
starts. Everything else -- areas, mass, inertia, lever arms, trim point,
drag polar, phi-theory force coefficients -- derives from those variables.

Planform x grows aft from the symmetry-plane leading edge; spanwise y grows
outboard. The centre of gravity sits at the symmetry-chord midpoint. The
airframe carries 0.5 kg of avionics at the cog and two 0.25 kg propulsion
units at the outer-wing-centre leading edge, and is built from 100 kg/m^3
EPP foam with cross-section area k_A * c(y)^2 (k_A calibrated against the
known baseline and lower-bound masses).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .dynamics import EnvConstants

FOAM_DENSITY = 100.0  # kg/m^3
AVIONICS_MASS = 0.5  # kg, at the cog
PROP_MASS = 0.25  # kg each, two units
SECTION_SHAPE_FACTOR = 0.1192  # k_A: cross-section area = k_A * c^2

# Actuator limits (identical for every design).
T_MIN = 0.0
T_MAX = 25.0
DELTA_MAX = math.radians(15.0)

# Trim search settings.
TRIM_ALPHA_GRID = np.radians(np.arange(-5.0, 10.0 + 1e-9, 0.25))
TRIM_DELTA_PROBES = 61
SPAN_EFFICIENCY = 0.9

# Finite-difference steps for coefficient extraction.
DALPHA = math.radians(0.5)
DDELTA = math.radians(0.5)

# (lower, upper, baseline); twists in radians internally.
DESIGN_BOUNDS = {
    "c_sym": (0.4, 0.8, 0.6),
    "c_fus": (0.2, 0.4, 0.3),
    "c_tip": (0.1, 0.2, 0.15),
    "x_fus": (0.1, 0.3, 0.2),
    "x_tip": (0.4, 0.6, 0.5),
    "y_fus": (0.1, 0.3, 0.2),
    "y_tip": (0.4, 0.6, 0.5),
    "z_fus": (-0.01, 0.01, 0.0),
    "z_tip": (-0.01, 0.01, 0.0),
    "gamma_fus": (math.radians(-6.0), math.radians(4.0), math.radians(-1.0)),
    "gamma_tip": (math.radians(-12.0), math.radians(-2.0), math.radians(-7.0)),
    "f_con": (0.5, 0.75, 0.625),
}

DESIGN_FIELDS = tuple(DESIGN_BOUNDS)
ANGLE_FIELDS = ("gamma_fus", "gamma_tip")


class BoundsError(ValueError):
    """A design variable violates its admissible interval."""


class TrimError(RuntimeError):
    """No elevon deflection in range zeroes the pitching moment."""


@dataclass(frozen=True)
class DesignVector:
    """The 12 conceptual design variables (lengths m, twists rad)."""

    c_sym: float
    c_fus: float
    c_tip: float
    x_fus: float
    x_tip: float
    y_fus: float
    y_tip: float
    z_fus: float
    z_tip: float
    gamma_fus: float
    gamma_tip: float
    f_con: float

    def validate(self) -> "DesignVector":
        for name, (lo, hi, _) in DESIGN_BOUNDS.items():
            v = getattr(self, name)
            if not np.isfinite(v) or v < lo - 1e-12 or v > hi + 1e-12:
                raise BoundsError(f"{name}={v} outside [{lo}, {hi}]")
        if not self.y_tip > self.y_fus > 0:
            raise BoundsError("require y_tip > y_fus > 0")
        return self

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in DESIGN_FIELDS])

    @classmethod
    def from_array(cls, arr) -> "DesignVector":
        return cls(**dict(zip(DESIGN_FIELDS, map(float, arr))))

    @classmethod
    def baseline(cls) -> "DesignVector":
        return cls(**{k: b for k, (_, _, b) in DESIGN_BOUNDS.items()})

    def with_values(self, **kwargs) -> "DesignVector":
        return replace(self, **kwargs)


@dataclass(frozen=True)
class PhiCoeffs:
    """phi-theory force/torque coefficients of the simplified model.

    K_L, K_D in kg/m; K_phi, K_theta, K_psi in kg. K_D is retained from the
    drag-slope extraction: the boundary-condition optimization needs the
    drag term for a finite optimal cruise speed.
    """

    K_L: float
    K_D: float
    K_phi: float
    K_theta: float
    K_psi: float

    def validate(self):
        if not (self.K_L > 0 and self.K_phi > 0 and self.K_theta > 0 and self.K_psi > 0):
            raise ValueError("K_L, K_phi, K_theta, K_psi must be positive")
        if self.K_D < 0:
            raise ValueError("K_D must be nonnegative")
        return self


@dataclass(frozen=True)
class Planform:
    """Closed-form planform and mass properties of a design."""

    S: float  # wetted area, both halves (m^2)
    b: float  # span (m)
    c: float  # mean chord S/b (m)
    x_cog: float  # aft of the symmetry-plane leading edge (m)
    l_T_x: float
    l_T_y: float
    l_d_x: float
    l_d_y: float
    mass: float
    inertia: np.ndarray  # 3x3, body axes about the cog
    aspect_ratio: float
    mean_twist: float  # chord-weighted twist (rad)
    x_ac: float  # chord-weighted quarter-chord position (m)


@dataclass(frozen=True)
class TrimPoint:
    """Operating point maximizing C_L/C_D in trimmed conditions."""

    alpha: float
    delta: float
    C_L: float
    C_D: float
    C_D0: float
    k_induced: float


@dataclass(frozen=True)
class DerivedParams:
    """Everything the dynamics, trajectory, and control stages consume."""

    design: DesignVector
    planform: Planform
    trim: TrimPoint
    phi: PhiCoeffs
    T_min: float = T_MIN
    T_max: float = T_MAX
    delta_max: float = DELTA_MAX

    @property
    def mass(self) -> float:
        return self.planform.mass

    @property
    def inertia(self) -> np.ndarray:
        return self.planform.inertia


def _chord_at(d: DesignVector, y):
    """Piecewise-linear chord over |y| in [0, y_tip]."""
    y = np.abs(np.asarray(y, dtype=float))
    inner = d.c_sym + (d.c_fus - d.c_sym) * y / d.y_fus
    outer = d.c_fus + (d.c_tip - d.c_fus) * (y - d.y_fus) / (d.y_tip - d.y_fus)
    return np.where(y <= d.y_fus, inner, outer)


def _leading_edge_at(d: DesignVector, y):
    y = np.abs(np.asarray(y, dtype=float))
    inner = d.x_fus * y / d.y_fus
    outer = d.x_fus + (d.x_tip - d.x_fus) * (y - d.y_fus) / (d.y_tip - d.y_fus)
    return np.where(y <= d.y_fus, inner, outer)


def _twist_at(d: DesignVector, y):
    y = np.abs(np.asarray(y, dtype=float))
    inner = d.gamma_fus * y / d.y_fus
    outer = d.gamma_fus + (d.gamma_tip - d.gamma_fus) * (y - d.y_fus) / (d.y_tip - d.y_fus)
    return np.where(y <= d.y_fus, inner, outer)


def _half_span_nodes(d: DesignVector, order: int = 5):
    """Gauss-Legendre nodes/weights per linear section; exact for deg<=2*order-1."""
    xg, wg = np.polynomial.legendre.leggauss(order)
    nodes, weights = [], []
    for a, b in ((0.0, d.y_fus), (d.y_fus, d.y_tip)):
        mid, half = 0.5 * (a + b), 0.5 * (b - a)
        nodes.append(mid + half * xg)
        weights.append(half * wg)
    return np.concatenate(nodes), np.concatenate(weights)


def derive_geometry(d: DesignVector, validate: bool = True) -> Planform:
    """Planform areas, lever arms, mass, and inertia from the design vector.

    validate=False admits out-of-bounds study designs (still requires a
    geometrically sensible planform).
    """
    if validate:
        d.validate()
    elif not (d.y_tip > d.y_fus > 0 and min(d.c_sym, d.c_fus, d.c_tip) > 0):
        raise BoundsError("degenerate planform")
    S = 2.0 * (
        0.5 * (d.c_sym + d.c_fus) * d.y_fus
        + 0.5 * (d.c_fus + d.c_tip) * (d.y_tip - d.y_fus)
    )
    b = 2.0 * d.y_tip
    c_mean = S / b
    x_cog = 0.5 * d.c_sym

    y_mid = 0.5 * (d.y_fus + d.y_tip)
    x_le_mid = 0.5 * (d.x_fus + d.x_tip)
    x_te_mid = 0.5 * ((d.x_fus + d.c_fus) + (d.x_tip + d.c_tip))
    l_T_x = x_cog - x_le_mid
    l_d_x = x_cog - x_te_mid
    l_T_y = y_mid
    l_d_y = y_mid

    y, w = _half_span_nodes(d)
    chord = _chord_at(d, y)
    le = _leading_edge_at(d, y)
    lam = FOAM_DENSITY * SECTION_SHAPE_FACTOR * chord**2  # mass per unit span
    m_foam = 2.0 * float(np.sum(w * lam))
    mass = m_foam + AVIONICS_MASS + 2.0 * PROP_MASS

    # Thin plate in the z = 0 plane; chordwise-uniform strips plus Steiner
    # terms for the point masses. Spanwise symmetry keeps the matrix diagonal.
    x_mid = le + 0.5 * chord - x_cog
    Ixx = 2.0 * float(np.sum(w * lam * y**2))
    Iyy = 2.0 * float(np.sum(w * lam * (chord**2 / 12.0 + x_mid**2)))
    Izz = Ixx + Iyy  # perpendicular-axis theorem for a plane lamina
    Ixx += 2.0 * PROP_MASS * l_T_y**2
    Iyy += 2.0 * PROP_MASS * l_T_x**2
    Izz += 2.0 * PROP_MASS * (l_T_y**2 + l_T_x**2)
    inertia = np.diag([Ixx, Iyy, Izz])

    mean_twist = 2.0 * float(np.sum(w * chord * _twist_at(d, y))) / S
    x_ac = 2.0 * float(np.sum(w * chord * (le + 0.25 * chord))) / S

    return Planform(
        S=S, b=b, c=c_mean, x_cog=x_cog,
        l_T_x=l_T_x, l_T_y=l_T_y, l_d_x=l_d_x, l_d_y=l_d_y,
        mass=mass, inertia=inertia, aspect_ratio=b**2 / S,
        mean_twist=mean_twist, x_ac=x_ac,
    )


def _pitch_coefficient(provider, alpha, delta):
    cs = provider.coefficients(alpha=alpha, beta=0.0, delta1=delta, delta2=delta)
    return cs.C_theta


def _solve_trim_delta(provider, alpha: float) -> float | None:
    """Symmetric deflection zeroing C_theta at one alpha, or None."""
    deltas = np.linspace(-DELTA_MAX, DELTA_MAX, TRIM_DELTA_PROBES)
    cm = np.array([_pitch_coefficient(provider, alpha, dl) for dl in deltas])
    sign_change = np.nonzero(cm[:-1] * cm[1:] <= 0)[0]
    if len(sign_change) == 0:
        return None
    i = int(sign_change[0])
    lo, hi = deltas[i], deltas[i + 1]
    flo = cm[i]
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        fm = _pitch_coefficient(provider, alpha, mid)
        if flo * fm <= 0:
            hi = mid
        else:
            lo, flo = mid, fm
    return 0.5 * (lo + hi)


def trim(planform: Planform, provider) -> TrimPoint:
    """Trim sweep: per-alpha symmetric deflection with C_theta = 0, then the
    grid point maximizing C_L/C_D; drag polar fitted over the trimmed grid.

    Raises TrimError when no alpha on the grid admits a trim deflection.
    """
    rows = []
    for alpha in TRIM_ALPHA_GRID:
        delta = _solve_trim_delta(provider, float(alpha))
        if delta is None:
            continue
        cs = provider.coefficients(alpha=float(alpha), beta=0.0, delta1=delta, delta2=delta)
        rows.append((float(alpha), float(delta), float(cs.C_Z), float(cs.C_X)))
    if not rows:
        raise TrimError("C_theta admits no zero crossing for any alpha on the grid")

    arr = np.array(rows)
    cl, cd = arr[:, 2], arr[:, 3]
    ratio = cl / np.maximum(cd, 1e-12)
    best = int(np.argmax(ratio))

    A = np.column_stack([np.ones_like(cl), cl**2])
    (cd0, k_ind), *_ = np.linalg.lstsq(A, cd, rcond=None)
    return TrimPoint(
        alpha=arr[best, 0], delta=arr[best, 1], C_L=arr[best, 2], C_D=arr[best, 3],
        C_D0=float(cd0), k_induced=float(k_ind),
    )


def induced_drag_reference(planform: Planform, e: float = SPAN_EFFICIENCY) -> float:
    """Analytic induced-drag factor 1 / (pi * AR * e)."""
    return 1.0 / (math.pi * planform.aspect_ratio * e)


def extract_phi_coeffs(
    d: DesignVector,
    planform: Planform,
    trim_point: TrimPoint,
    provider,
    env: EnvConstants = EnvConstants(),
) -> PhiCoeffs:
    """phi-theory coefficients from central differences at the trim point.

    K_L = 1/2 rho S dC_L/dalpha. The mixed velocity-deflection lift
    derivative is approximated by f_con * dC_L/dalpha (control-fraction
    scaling), which feeds the roll and pitch coefficients through the
    control-surface lever arms. K_psi uses the per-elevon drag slope, and
    K_D uses the drag slope in alpha.
    """
    a, dl = trim_point.alpha, trim_point.delta

    def coeffs(alpha, d1, d2):
        return provider.coefficients(alpha=alpha, beta=0.0, delta1=d1, delta2=d2)

    dCL_da = (coeffs(a + DALPHA, dl, dl).C_Z - coeffs(a - DALPHA, dl, dl).C_Z) / (2 * DALPHA)
    dCD_da = (coeffs(a + DALPHA, dl, dl).C_X - coeffs(a - DALPHA, dl, dl).C_X) / (2 * DALPHA)
    dCD_dd = (coeffs(a, dl + DDELTA, dl).C_X - coeffs(a, dl - DDELTA, dl).C_X) / (2 * DDELTA)

    qfac = 0.5 * env.rho * planform.S
    cross_lift = d.f_con * dCL_da
    return PhiCoeffs(
        K_L=float(qfac * dCL_da),
        K_D=float(max(qfac * dCD_da, 0.0)),
        K_phi=float(qfac * planform.l_d_y * cross_lift),
        K_theta=float(abs(qfac * planform.l_d_x * cross_lift)),
        K_psi=float(abs(qfac * planform.l_d_y * dCD_dd)),
    ).validate()


def derive_params(d: DesignVector, provider, env: EnvConstants = EnvConstants()) -> DerivedParams:
    """Full derived-parameter bundle for one design (may raise TrimError)."""
    planform = derive_geometry(d)
    trim_point = trim(planform, provider)
    phi = extract_phi_coeffs(d, planform, trim_point, provider, env)
    return DerivedParams(design=d, planform=planform, trim=trim_point, phi=phi)
