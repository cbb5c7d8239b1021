"""Clamped B-spline bases, derivatives, least-squares fitting, and trajectories.

The flat output sigma = (x, y, z, psi) is represented per channel as a
weighted sum of B-spline basis functions on a clamped (open-uniform) knot
vector, so boundary values map directly onto the first and last coefficients.
Defaults: degree 5 with 13 basis functions per channel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline

DEFAULT_DEGREE = 5
DEFAULT_N_BASIS = 13


class DomainError(ValueError):
    """Evaluation point outside the knot span."""


def clamped_knots(horizon: float, n_basis: int = DEFAULT_N_BASIS, degree: int = DEFAULT_DEGREE) -> np.ndarray:
    """Open-uniform knot vector on [0, horizon] with end multiplicity degree+1."""
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    n_interior = n_basis - degree - 1
    if n_interior < 0:
        raise ValueError("n_basis must be at least degree + 1")
    interior = np.linspace(0.0, horizon, n_interior + 2)[1:-1]
    return np.concatenate(
        [np.zeros(degree + 1), interior, np.full(degree + 1, horizon)]
    )


def n_basis_functions(knots: np.ndarray, degree: int) -> int:
    return len(knots) - degree - 1


def _check_domain(knots, t):
    t = np.atleast_1d(np.asarray(t, dtype=float))
    slack = 1e-9 * max(knots[-1] - knots[0], 1.0)
    if np.any(t < knots[0] - slack) or np.any(t > knots[-1] + slack):
        raise DomainError(f"evaluation points outside [{knots[0]}, {knots[-1]}]")
    return np.clip(t, knots[0], knots[-1])


def derivative_operator(knots: np.ndarray, degree: int):
    """Matrix D with: coefficients of S' = D @ c, plus the derivative's knots/degree.

    Standard identity: c'_i = degree * (c_{i+1} - c_i) / (t_{i+degree+1} - t_{i+1}).
    """
    n = n_basis_functions(knots, degree)
    D = np.zeros((n - 1, n))
    for i in range(n - 1):
        dt = knots[i + degree + 1] - knots[i + 1]
        if dt > 0:
            D[i, i] = -degree / dt
            D[i, i + 1] = degree / dt
    return D, knots[1:-1], degree - 1


def basis_matrix(knots: np.ndarray, degree: int, t, deriv: int = 0) -> np.ndarray:
    """Dense matrix B with S^(deriv)(t) = B @ c, rows indexed by t.

    deriv must not exceed the degree; points must lie inside the knot span.
    """
    if deriv > degree:
        raise ValueError("derivative order exceeds spline degree")
    t = _check_domain(knots, t)
    kn, dg = np.asarray(knots, dtype=float), degree
    op = np.eye(n_basis_functions(kn, dg))
    for _ in range(deriv):
        D, kn, dg = derivative_operator(kn, dg)
        op = D @ op
    # right-closed evaluation: nudge the right endpoint inside the last span
    te = np.where(t >= kn[-1], np.nextafter(kn[-1], kn[0]), t)
    B = BSpline.design_matrix(te, kn, dg).toarray()
    return B @ op


def basis_eval(knots: np.ndarray, degree: int, t: float, deriv: int = 0) -> np.ndarray:
    """All basis-function values (or derivative values) at a single point."""
    return basis_matrix(knots, degree, [t], deriv)[0]


def fit_coefficients(times, samples, knots, degree: int) -> np.ndarray:
    """Least-squares B-spline coefficients for samples at given times.

    samples may be (m,) or (m, n_channels); at least n_basis samples are
    required and the collocation matrix must have full column rank.
    """
    times = np.asarray(times, dtype=float)
    samples = np.asarray(samples, dtype=float)
    n = n_basis_functions(knots, degree)
    if len(times) < n:
        raise ValueError(f"need at least {n} samples, got {len(times)}")
    B = basis_matrix(knots, degree, times)
    coeffs, _, rank, _ = np.linalg.lstsq(B, samples, rcond=None)
    if rank < n:
        raise np.linalg.LinAlgError("rank-deficient B-spline collocation matrix")
    return coeffs


@dataclass(frozen=True)
class BSplineTraj:
    """Multi-channel clamped B-spline trajectory over t in [0, horizon].

    coeffs has shape (n_channels, n_basis); channel order for flat output is
    (x, y, z, psi).
    """

    knots: np.ndarray
    degree: int
    coeffs: np.ndarray

    def __post_init__(self):
        n = n_basis_functions(self.knots, self.degree)
        if self.coeffs.ndim != 2 or self.coeffs.shape[1] != n:
            raise ValueError(f"coeffs must be (n_channels, {n})")
        if np.any(np.diff(self.knots) < 0):
            raise ValueError("knots must be non-decreasing")

    @property
    def horizon(self) -> float:
        return float(self.knots[-1])

    @property
    def n_channels(self) -> int:
        return self.coeffs.shape[0]

    def eval(self, t, deriv: int = 0) -> np.ndarray:
        """Values with shape (len(t), n_channels)."""
        B = basis_matrix(self.knots, self.degree, t, deriv)
        return B @ self.coeffs.T

    @classmethod
    def fit(cls, times, samples, horizon=None, n_basis=DEFAULT_N_BASIS, degree=DEFAULT_DEGREE):
        """Least-squares fit of (m, n_channels) samples; initial-guess path."""
        samples = np.atleast_2d(np.asarray(samples, dtype=float))
        if samples.shape[0] == 1 and len(np.atleast_1d(times)) > 1:
            samples = samples.T
        horizon = float(np.max(times)) if horizon is None else float(horizon)
        knots = clamped_knots(horizon, n_basis, degree)
        coeffs = fit_coefficients(times, samples, knots, degree)
        return cls(knots=knots, degree=degree, coeffs=np.asarray(coeffs).T.copy())
