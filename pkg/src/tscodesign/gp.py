"""Gaussian-process interpolation, nugget regression, and EP classification.

Kriging-style formulation: inputs are normalized to the unit box and outputs
standardized. The correlation kernel is Matern 5/2 with ARD lengthscales and
a constant trend (ordinary kriging). Hyperparameters maximize the
concentrated log marginal likelihood

    -n log sigma^2 - log |Psi|

with the trend coefficient and process variance recovered by generalized
least squares:

    beta   = (F' Psi^-1 F)^-1 F' Psi^-1 y
    sigma2 = (y - F beta)' Psi^-1 (y - F beta) / n

Predictions (correlation units):

    mu(x)    = beta' f(x) + alpha' psi(x),        alpha = Psi^-1 (y - F beta)
    Sigma(x) = sigma2 { 1 - |psi(x)|^2_{Psi^-1} + |g(x)|^2_Gamma }

with g(x) = F' Psi^-1 psi(x) - f(x) and Gamma = (F' Psi^-1 F)^-1.

The regressive variant inflates the correlation matrix with a noise-to-signal
nugget, Psi_r = Psi + sigma_r^-2 10^lambda I, resolved by a short fixed-point
iteration on sigma_r^2, and carries 10^lambda as an extra MLE variable.

Classification uses a latent GP squashed through the probit, with the
non-Gaussian posterior approximated by expectation propagation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import math

import numpy as np
from scipy.linalg import cholesky, solve_triangular
from scipy.optimize import minimize
from scipy.special import log_ndtr, ndtr

from .ga import ga_minimize

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)

JITTER_LADDER = (1e-10, 1e-8, 1e-6)
LOG10_LS_BOUNDS = (-2.0, 1.3)
LOG10_NUGGET_BOUNDS = (-9.0, 0.5)
SAVE_FORMAT = "tscodesign-gp"
SAVE_VERSION = 1


class GPFitError(RuntimeError):
    """Kernel matrix could not be factorized even at maximum jitter."""


class EPConvergenceError(RuntimeError):
    """Expectation propagation failed to reach its fixed point."""


@dataclass(frozen=True)
class FitBudget:
    """Search effort for the hyperparameter MLE."""

    pop: int = 40
    generations: int = 60
    polish_iters: int = 50


SMALL_BUDGET = FitBudget(pop=16, generations=20, polish_iters=30)


def matern52(A, B, lengthscales):
    """Matern 5/2 ARD correlation between row sets A (n,d) and B (m,d)."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    ls = np.asarray(lengthscales, dtype=float)
    diff = (A[:, None, :] - B[None, :, :]) / ls
    r = np.sqrt(np.maximum(np.sum(diff * diff, axis=-1), 0.0))
    s5r = np.sqrt(5.0) * r
    return (1.0 + s5r + (5.0 / 3.0) * r * r) * np.exp(-s5r)


def _normalize_inputs(X):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    lo = X.min(axis=0)
    hi = X.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    return (X - lo) / span, lo, span


def _chol_with_jitter(M):
    """Clean lower-triangular Cholesky factor, escalating jitter on failure."""
    for jit in JITTER_LADDER:
        try:
            return cholesky(M + jit * np.eye(len(M)), lower=True)
        except np.linalg.LinAlgError:
            continue
    raise GPFitError("correlation matrix not positive definite at max jitter")


def chol_solve(L, b):
    """Solve (L L^T) x = b for a clean lower-triangular L."""
    return solve_triangular(L.T, solve_triangular(L, b, lower=True), lower=False)


def _gls(L, y, F):
    """GLS trend/variance given the correlation Cholesky factor."""
    n = len(y)
    Ki_y = chol_solve(L, y)
    Ki_F = chol_solve(L, F)
    FtKiF = F.T @ Ki_F
    beta = np.linalg.solve(FtKiF, F.T @ Ki_y)
    resid = y - F @ beta
    sigma2 = float(resid @ chol_solve(L, resid)) / n
    return beta, max(sigma2, 1e-300), FtKiF


@dataclass
class GPModel:
    """Fitted GP (interpolating when log10_nugget is None, regressive otherwise)."""

    X_raw: np.ndarray
    y_raw: np.ndarray
    x_lo: np.ndarray
    x_span: np.ndarray
    y_mean: float
    y_std: float
    log10_ls: np.ndarray
    log10_nugget: float | None
    # cached factorization products
    beta: float = 0.0
    sigma2: float = 1.0
    alpha_vec: np.ndarray = field(default_factory=lambda: np.zeros(0))
    chol_L: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    gamma: float = 1.0
    nugget_ratio: float = 0.0

    @property
    def n(self) -> int:
        return len(self.y_raw)

    @property
    def Xn(self) -> np.ndarray:
        return (self.X_raw - self.x_lo) / self.x_span

    @property
    def lengthscales(self) -> np.ndarray:
        return 10.0 ** self.log10_ls

    def _normalize(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return (X - self.x_lo) / self.x_span

    def _refresh(self):
        Xn = self.Xn
        yn = (self.y_raw - self.y_mean) / self.y_std
        Psi = matern52(Xn, Xn, self.lengthscales)
        F = np.ones((self.n, 1))
        if self.log10_nugget is None:
            self.nugget_ratio = 0.0
            L = _chol_with_jitter(Psi)
            beta, sigma2, FtKiF = _gls(L, yn, F)
        else:
            beta, sigma2, FtKiF, L, ratio = _nugget_fixed_point(
                Psi, yn, F, self.log10_nugget
            )
            self.nugget_ratio = ratio
        self.beta = float(beta[0])
        self.sigma2 = sigma2
        self.gamma = float(np.linalg.inv(FtKiF)[0, 0])
        resid = yn - F @ beta
        self.alpha_vec = chol_solve(L, resid)
        self.chol_L = L
        return self

    def predict(self, X):
        """Predictive mean and variance (original output units)."""
        Xq = self._normalize(X)
        psi = matern52(self.Xn, Xq, self.lengthscales)  # (n, m)
        mu_n = self.beta + psi.T @ self.alpha_vec
        w = solve_triangular(self.chol_L, psi, lower=True)
        quad = np.sum(w * w, axis=0)
        Ki_psi = solve_triangular(self.chol_L.T, w, lower=False)
        g = np.sum(Ki_psi, axis=0) - 1.0
        var_n = self.sigma2 * (1.0 - quad + self.gamma * g * g)
        var_n = np.maximum(var_n, 0.0)
        mean = self.y_mean + self.y_std * mu_n
        var = var_n * self.y_std**2
        return mean, var

    # -- persistence ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": SAVE_FORMAT,
            "version": SAVE_VERSION,
            "kind": "interpolator" if self.log10_nugget is None else "regressor",
            "X": self.X_raw.tolist(),
            "y": self.y_raw.tolist(),
            "log10_lengthscales": self.log10_ls.tolist(),
            "log10_nugget": self.log10_nugget,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GPModel":
        if data.get("format") != SAVE_FORMAT:
            raise ValueError("not a saved GP record")
        if data.get("version") != SAVE_VERSION:
            raise ValueError(f"unsupported GP record version {data.get('version')}")
        X = np.asarray(data["X"], dtype=float)
        y = np.asarray(data["y"], dtype=float)
        model = _assemble(X, y, np.asarray(data["log10_lengthscales"]), data["log10_nugget"])
        return model

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "GPModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _nugget_fixed_point(Psi, yn, F, log10_nugget, iters: int = 12):
    """Resolve Psi_r = Psi + sigma_r^-2 10^lambda I jointly with sigma_r^2."""
    noise = 10.0**log10_nugget
    s2 = 1.0
    beta = np.zeros(1)
    FtKiF = np.eye(1)
    L = None
    ratio = noise
    for _ in range(iters):
        ratio = noise / s2
        L = _chol_with_jitter(Psi + ratio * np.eye(len(Psi)))
        beta, s2_new, FtKiF = _gls(L, yn, F)
        if abs(s2_new - s2) <= 1e-12 * max(s2, 1e-30):
            s2 = s2_new
            break
        s2 = s2_new
    return beta, s2, FtKiF, L, ratio


def _concentrated_nll(Xn, yn, F, log10_ls, log10_nugget=None):
    """Negative concentrated log-likelihood  n log sigma^2 + log |Psi|."""
    try:
        Psi = matern52(Xn, Xn, 10.0**np.asarray(log10_ls))
        if log10_nugget is None:
            L = _chol_with_jitter(Psi)
            _, sigma2, _ = _gls(L, yn, F)
        else:
            _, sigma2, _, L, _ = _nugget_fixed_point(Psi, yn, F, log10_nugget)
        logdet = 2.0 * np.sum(np.log(np.diag(L)))
        return len(yn) * np.log(sigma2) + logdet
    except (GPFitError, np.linalg.LinAlgError):
        return 1e12


def _assemble(X, y, log10_ls, log10_nugget):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    _, lo, span = _normalize_inputs(X)
    std = float(np.std(y))
    model = GPModel(
        X_raw=X.copy(),
        y_raw=y.copy(),
        x_lo=lo,
        x_span=span,
        y_mean=float(np.mean(y)),
        y_std=std if std > 0 else 1.0,
        log10_ls=np.asarray(log10_ls, dtype=float),
        log10_nugget=log10_nugget,
    )
    return model._refresh()


def _fit(X, y, with_nugget, budget: FitBudget, rng, fixed_log10_ls=None):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    n, d = X.shape
    Xn, _, _ = _normalize_inputs(X)
    std = float(np.std(y))
    yn = (y - np.mean(y)) / (std if std > 0 else 1.0)
    F = np.ones((n, 1))

    if fixed_log10_ls is not None:
        return _assemble(X, y, fixed_log10_ls, None)

    rng = np.random.default_rng(rng)
    dim = d + (1 if with_nugget else 0)
    lower = np.full(dim, LOG10_LS_BOUNDS[0])
    upper = np.full(dim, LOG10_LS_BOUNDS[1])
    if with_nugget:
        lower[-1], upper[-1] = LOG10_NUGGET_BOUNDS

    def objective(theta):
        if with_nugget:
            return _concentrated_nll(Xn, yn, F, theta[:-1], theta[-1])
        return _concentrated_nll(Xn, yn, F, theta)

    x0 = np.zeros((1, dim))
    if with_nugget:
        x0[0, -1] = -6.0
    xg, _ = ga_minimize(
        objective, lower, upper, rng,
        pop_size=budget.pop, generations=budget.generations, x0=x0,
    )
    res = minimize(
        objective, xg, method="L-BFGS-B",
        bounds=list(zip(lower, upper)),
        options={"maxiter": budget.polish_iters},
    )
    theta = res.x if res.fun <= objective(xg) else xg
    if with_nugget:
        return _assemble(X, y, theta[:-1], float(theta[-1]))
    return _assemble(X, y, theta, None)


def fit_gpi(X, y, budget: FitBudget = FitBudget(), rng=0, log10_ls=None) -> GPModel:
    """Interpolating GP. Duplicate input rows divert to the regression path."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if len(X) < 1:
        raise ValueError("need at least one training point")
    uniq = np.unique(X, axis=0)
    if len(uniq) < len(X):
        return fit_gpr(X, y, budget=budget, rng=rng)
    return _fit(X, y, with_nugget=False, budget=budget, rng=rng, fixed_log10_ls=log10_ls)


def fit_gpr(X, y, budget: FitBudget = FitBudget(), rng=0) -> GPModel:
    """Regressive GP with a jointly estimated noise-to-signal nugget."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if len(X) < 3:
        raise ValueError("regression needs at least three points")
    return _fit(X, y, with_nugget=True, budget=budget, rng=rng)


def noise_variance_estimate(model: GPModel) -> float:
    """Fitted noise variance in original output units (regression models)."""
    if model.log10_nugget is None:
        return 0.0
    return 10.0**model.log10_nugget * model.y_std**2


# ---------------------------------------------------------------------------
# Expectation-propagation probit classifier
# ---------------------------------------------------------------------------


@dataclass
class GPClassifier:
    """Latent Matern-5/2 GP with probit response, EP-approximated posterior."""

    X_raw: np.ndarray
    labels: np.ndarray  # +-1
    x_lo: np.ndarray
    x_span: np.ndarray
    log10_ls: np.ndarray
    site_nu: np.ndarray = field(default_factory=lambda: np.zeros(0))
    site_tau: np.ndarray = field(default_factory=lambda: np.zeros(0))
    log_evidence: float = -np.inf

    @property
    def Xn(self):
        return (self.X_raw - self.x_lo) / self.x_span

    def _normalize(self, X):
        return (np.atleast_2d(np.asarray(X, dtype=float)) - self.x_lo) / self.x_span

    def predict_class(self, X):
        """Probability of the +1 class at query points."""
        K = matern52(self.Xn, self.Xn, 10.0**self.log10_ls)
        tau = np.maximum(self.site_tau, 1e-10)
        mu_site = self.site_nu / tau
        L = _chol_with_jitter(K + np.diag(1.0 / tau))
        a = chol_solve(L, mu_site)
        Xq = self._normalize(X)
        psi = matern52(self.Xn, Xq, 10.0**self.log10_ls)
        fbar = psi.T @ a
        w = solve_triangular(L, psi, lower=True)
        var = np.maximum(1.0 - np.sum(w * w, axis=0), 0.0)
        return ndtr(fbar / np.sqrt(1.0 + var))

    def to_dict(self) -> dict:
        return {
            "format": SAVE_FORMAT,
            "version": SAVE_VERSION,
            "kind": "classifier",
            "X": self.X_raw.tolist(),
            "labels": self.labels.tolist(),
            "log10_lengthscales": self.log10_ls.tolist(),
            "site_nu": self.site_nu.tolist(),
            "site_tau": self.site_tau.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GPClassifier":
        if data.get("format") != SAVE_FORMAT or data.get("kind") != "classifier":
            raise ValueError("not a saved classifier record")
        X = np.atleast_2d(np.asarray(data["X"], dtype=float))
        _, lo, span = _normalize_inputs(X)
        return cls(
            X_raw=X,
            labels=np.asarray(data["labels"], dtype=float),
            x_lo=lo,
            x_span=span,
            log10_ls=np.asarray(data["log10_lengthscales"], dtype=float),
            site_nu=np.asarray(data["site_nu"], dtype=float),
            site_tau=np.asarray(data["site_tau"], dtype=float),
        )


def _ep_sweeps(K, c, damping: float, max_sweeps: int, tol: float):
    """Sequential EP site updates (Rasmussen & Williams alg. 3.5 layout)."""
    n = len(c)
    nu = np.zeros(n)
    tau = np.zeros(n)
    Sigma = K.copy()
    mu = np.zeros(n)
    residual = np.inf
    history = []
    for _ in range(max_sweeps):
        max_delta = 0.0
        for i in range(n):
            tau_cav = 1.0 / Sigma[i, i] - tau[i]
            nu_cav = mu[i] / Sigma[i, i] - nu[i]
            if tau_cav <= 1e-12:
                continue
            m_cav = nu_cav / tau_cav
            s2_cav = 1.0 / tau_cav
            denom = math.sqrt(1.0 + s2_cav)
            z = c[i] * m_cav / denom
            ratio = math.exp(-0.5 * z * z - _LOG_SQRT_2PI - log_ndtr(z))
            m_hat = m_cav + c[i] * s2_cav * ratio / denom
            s2_hat = s2_cav - s2_cav**2 * ratio * (z + ratio) / (1.0 + s2_cav)
            s2_hat = max(s2_hat, 1e-12)
            d_tau = damping * (1.0 / s2_hat - tau_cav - tau[i])
            d_nu = damping * (m_hat / s2_hat - nu_cav - nu[i])
            tau_new = max(tau[i] + d_tau, 1e-12)
            d_tau = tau_new - tau[i]
            tau[i] = tau_new
            nu[i] += d_nu
            # rank-one posterior refresh
            si = Sigma[:, i]
            Sigma = Sigma - (d_tau / (1.0 + d_tau * si[i])) * np.outer(si, si)
            mu = Sigma @ nu
            max_delta = max(max_delta, abs(d_tau), abs(d_nu))
        # full recompute for numerical hygiene
        sqrt_tau = np.sqrt(tau)
        B = np.eye(n) + sqrt_tau[:, None] * K * sqrt_tau[None, :]
        L = cholesky(B, lower=True)
        V = solve_triangular(L, sqrt_tau[:, None] * K, lower=True)
        Sigma = K - V.T @ V
        mu = Sigma @ nu
        residual = max_delta
        history.append(residual)
        if residual < tol:
            return nu, tau, Sigma, mu, history
    return nu, tau, Sigma, mu, history


def _ep_posterior(K, c, tol: float = 1e-6, max_sweeps: int = 100, return_history: bool = False):
    nu, tau, Sigma, mu, hist = _ep_sweeps(K, c, 1.0, max_sweeps, tol)
    if hist[-1] >= tol:
        nu, tau, Sigma, mu, hist = _ep_sweeps(K, c, 0.5, max_sweeps, tol)
    if hist[-1] >= tol:
        raise EPConvergenceError(f"EP residual {hist[-1]:.2e} above {tol:.0e}")
    if return_history:
        return nu, tau, Sigma, mu, hist
    return nu, tau, Sigma, mu


def _ep_log_evidence(K, c, nu, tau, Sigma, mu):
    """EP marginal likelihood via the cavity-corrected Gaussian identity."""
    tau_c = np.maximum(tau, 1e-12)
    mu_site = nu / tau_c
    tau_cav = 1.0 / np.diag(Sigma) - tau
    nu_cav = mu / np.diag(Sigma) - nu
    tau_cav = np.maximum(tau_cav, 1e-12)
    m_cav = nu_cav / tau_cav
    s2_cav = 1.0 / tau_cav
    z = c * m_cav / np.sqrt(1.0 + s2_cav)
    s2_sum = s2_cav + 1.0 / tau_c
    term_sites = np.sum(
        log_ndtr(z)
        + 0.5 * np.log(2.0 * np.pi * s2_sum)
        + 0.5 * (m_cav - mu_site) ** 2 / s2_sum
    )
    cov = K + np.diag(1.0 / tau_c)
    L = _chol_with_jitter(cov)
    quad = mu_site @ chol_solve(L, mu_site)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    n = len(c)
    term_gauss = -0.5 * (n * np.log(2.0 * np.pi) + logdet + quad)
    return float(term_sites + term_gauss)


def fit_gpc_ep(X, c, rng=0, n_starts: int = 3, max_sweeps: int = 100, fixed_log10_ls=None) -> GPClassifier:
    """Fit the probit EP classifier; lengthscales maximize the EP evidence
    unless fixed_log10_ls pins them."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    c = np.asarray(c, dtype=float).ravel()
    if not (np.any(c > 0) and np.any(c < 0)):
        raise ValueError("both classes must be present")
    Xn, lo, span = _normalize_inputs(X)
    d = X.shape[1]
    rng = np.random.default_rng(rng)

    def neg_evidence(log10_ls):
        log10_ls = np.asarray(log10_ls, dtype=float)
        if np.any(log10_ls < LOG10_LS_BOUNDS[0]) or np.any(log10_ls > LOG10_LS_BOUNDS[1]):
            return 1e12
        try:
            K = matern52(Xn, Xn, 10.0**log10_ls)
            K += 1e-8 * np.eye(len(K))
            nu, tau, Sigma, mu = _ep_posterior(K, c, max_sweeps=max_sweeps)
            return -_ep_log_evidence(K, c, nu, tau, Sigma, mu)
        except (EPConvergenceError, np.linalg.LinAlgError):
            return 1e12

    if fixed_log10_ls is not None:
        theta = np.broadcast_to(np.asarray(fixed_log10_ls, dtype=float), (d,)).copy()
    else:
        starts = rng.uniform(-1.0, 0.8, size=(n_starts, d))
        starts[0] = 0.0
        best_theta, best_val = None, np.inf
        for s in starts:
            res = minimize(
                neg_evidence, s, method="Nelder-Mead",
                options={"maxiter": 25 * d, "fatol": 1e-5, "xatol": 3e-3},
            )
            if res.fun < best_val:
                best_theta, best_val = res.x, float(res.fun)
        theta = np.clip(best_theta, LOG10_LS_BOUNDS[0], LOG10_LS_BOUNDS[1])

    K = matern52(Xn, Xn, 10.0**theta) + 1e-8 * np.eye(len(Xn))
    nu, tau, Sigma, mu = _ep_posterior(K, c, max_sweeps=max_sweeps)
    return GPClassifier(
        X_raw=X.copy(), labels=c.copy(), x_lo=lo, x_span=span,
        log10_ls=np.asarray(theta, dtype=float),
        site_nu=nu, site_tau=tau,
        log_evidence=_ep_log_evidence(K, c, nu, tau, Sigma, mu),
    )
