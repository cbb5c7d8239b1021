import math

import numpy as np
import pytest

from tscodesign import avl_adapter, gp
from tscodesign.aero import (
    COEFF_NAMES,
    CoeffSet,
    EmulatorConfig,
    Episode,
    SurrogateSet,
    SyntheticCoefficientModel,
    aero_angles,
    design_model,
    fit_design_surrogate,
    hifi_forces,
    lofi_forces,
    surrogate_doe,
)
from tscodesign.dynamics import EnvConstants
from tscodesign.geometry import DesignVector, PhiCoeffs, derive_geometry

ENV = EnvConstants()
BASELINE = DesignVector.baseline()
PHI = PhiCoeffs(K_L=0.6, K_D=0.005, K_phi=0.04, K_theta=0.03, K_psi=0.0005)
L_TY = 0.35


@pytest.fixture(scope="module")
def baseline_model():
    return design_model(BASELINE)


@pytest.fixture(scope="module")
def baseline_surrogates(baseline_model):
    provider, _ = baseline_model
    return fit_design_surrogate(provider, rng=11, budget=gp.SMALL_BUDGET)


def test_lofi_hover():
    f, tau = lofi_forces(np.zeros(3), np.array([2.0, 3.0, 0.1, -0.2]), PHI, L_TY)
    assert np.allclose(f, [5.0, 0.0, 0.0], atol=1e-15)
    assert np.allclose(tau, [0.0, 0.0, L_TY * 1.0], atol=1e-15)


def test_lofi_symmetric_deflection():
    v = np.array([10.0, 0.0, 1.0])
    u = np.array([4.0, 4.0, 0.05, 0.05])
    f, tau = lofi_forces(v, u, PHI, L_TY)
    s = np.linalg.norm(v)
    assert abs(tau[0]) < 1e-14 and abs(tau[2]) < 1e-14
    assert np.isclose(tau[1], PHI.K_theta * 10.0 * s * 0.1, rtol=1e-14)


def test_lofi_matches_dual_implementation():
    rng = np.random.default_rng(0)
    for _ in range(20):
        v = rng.normal(size=3) * 10
        u = rng.normal(size=4)
        f, tau = lofi_forces(v, u, PHI, L_TY)
        # independent scalar transcription
        s = math.sqrt(v[0] ** 2 + v[1] ** 2 + v[2] ** 2)
        T1, T2, d1, d2 = u
        f_ref = [T1 + T2 - PHI.K_D * v[0] * s, 0.0, -PHI.K_L * v[2] * s]
        tau_ref = [
            PHI.K_phi * v[0] * s * (d2 - d1),
            PHI.K_theta * v[0] * s * (d1 + d2),
            PHI.K_psi * v[0] * s * (d2 - d1) + L_TY * (T2 - T1),
        ]
        assert np.allclose(f, f_ref, rtol=1e-14, atol=1e-14)
        assert np.allclose(tau, tau_ref, rtol=1e-14, atol=1e-14)


def test_provider_symmetry_at_zero_state():
    d = BASELINE.with_values(gamma_fus=0.0, gamma_tip=0.0, z_fus=0.0, z_tip=0.0)
    prov = SyntheticCoefficientModel(d, derive_geometry(d, validate=False))
    cs = prov.coefficients(alpha=0.0, beta=0.0, delta1=0.0, delta2=0.0)
    assert abs(cs.C_Z) < 1e-14
    assert abs(cs.C_Y) < 1e-14
    assert abs(cs.C_phi) < 1e-14
    assert abs(cs.C_psi) < 1e-14


def test_provider_small_alpha_slope_near_a0(baseline_model):
    prov, _ = baseline_model
    h = 1e-5
    up = prov.coefficients(alpha=h).C_Z
    dn = prov.coefficients(alpha=-h).C_Z
    slope = (up - dn) / (2 * h)
    assert abs(slope - prov.a0) / prov.a0 < 0.02


def test_provider_side_force(baseline_model):
    prov, _ = baseline_model
    assert np.isclose(float(prov.coefficients(alpha=0.0, beta=0.1).C_Y), -0.01, rtol=1e-12)


def test_surrogate_reproduces_training_points(baseline_model, baseline_surrogates):
    prov, _ = baseline_model
    X = surrogate_doe(11)
    Y = prov.coefficient_means(X)
    Yp = baseline_surrogates.coefficient_means(X)
    assert np.max(np.abs(Y - Yp)) < 1e-6


def test_surrogate_leave_one_out(baseline_model, baseline_surrogates):
    prov, _ = baseline_model
    X = surrogate_doe(11)
    Y = prov.coefficient_means(X)
    # refit with frozen hyperparameters, one point held out each time
    i_coef = COEFF_NAMES.index("C_Z")
    model = baseline_surrogates.models["C_Z"]
    errs = []
    for i in range(0, len(X), 5):
        keep = np.ones(len(X), bool)
        keep[i] = False
        sub = gp.fit_gpi(X[keep], Y[keep, i_coef], log10_ls=model.log10_ls)
        mu, _ = sub.predict(X[i : i + 1])
        errs.append(mu[0] - Y[i, i_coef])
    rms = float(np.sqrt(np.mean(np.square(errs))))
    rng_span = Y[:, i_coef].max() - Y[:, i_coef].min()
    assert rms < 0.05 * rng_span


def test_surrogate_gradient_near_domain_center(baseline_model, baseline_surrogates):
    prov, _ = baseline_model
    x0 = np.zeros(7)
    x0[0] = math.radians(2.0)
    h = 1e-3
    for j in [0, 2]:  # alpha and delta1 directions
        e = np.zeros(7)
        e[j] = h
        g_sur = (baseline_surrogates.coefficient_means(x0 + e) - baseline_surrogates.coefficient_means(x0 - e)) / (2 * h)
        g_prov = (prov.coefficient_means(x0 + e) - prov.coefficient_means(x0 - e)) / (2 * h)
        gz_s, gz_p = g_sur[0, 2], g_prov[0, 2]  # lift coefficient
        assert abs(gz_s - gz_p) / abs(gz_p) < 0.10


def test_hifi_zero_dynamic_pressure(baseline_model, baseline_surrogates):
    _, params = baseline_model
    xi = np.zeros(12)
    u = np.array([3.0, 4.0, 0.1, -0.1])
    f, tau = hifi_forces(xi, u, baseline_surrogates, params.planform)
    assert np.allclose(f, [7.0, 0.0, 0.0], atol=1e-12)
    assert np.allclose(tau, [0.0, 0.0, params.planform.l_T_y * 1.0], atol=1e-12)


def test_hifi_matches_bypass_oracle(baseline_model, baseline_surrogates):
    prov, params = baseline_model
    xi = np.zeros(12)
    xi[6:9] = [18.0, 0.5, 1.0]
    xi[3:6] = [0.05, -0.02, -0.06]
    xi[9:12] = [0.1, -0.2, 0.05]
    u = np.array([3.0, 4.0, 0.08, -0.03])
    f_s, tau_s = hifi_forces(xi, u, baseline_surrogates, params.planform)
    f_p, tau_p = hifi_forces(xi, u, prov, params.planform)
    assert np.linalg.norm(f_s - f_p) / np.linalg.norm(f_p) < 0.02
    assert np.linalg.norm(tau_s - tau_p) < 0.02 * (np.linalg.norm(tau_p) + 1.0)


def test_hifi_direct_assembly_equation(baseline_model):
    # hand-assembled dynamic-pressure form against the implementation
    prov, params = baseline_model
    p = params.planform
    xi = np.zeros(12)
    xi[6:9] = [20.0, 0.0, 1.5]
    u = np.array([2.0, 5.0, 0.05, 0.02])
    f, tau = hifi_forces(xi, u, prov, p)
    v = xi[6:9]
    alpha, beta, speed = aero_angles(v)
    cs = prov.coefficients(alpha=alpha, beta=beta, delta1=u[2], delta2=u[3],
                           omega_hat=np.zeros(3))
    qS = 0.5 * ENV.rho * speed**2 * p.S
    assert np.allclose(f, [u[0] + u[1] - cs.C_X * qS, cs.C_Y * qS, -cs.C_Z * qS], rtol=1e-12)
    assert np.allclose(
        tau,
        [cs.C_phi * qS * p.c, cs.C_theta * qS * p.b, cs.C_psi * qS * p.c + p.l_T_y * (u[1] - u[0])],
        rtol=1e-12, atol=1e-12,
    )


def test_episode_determinism(baseline_model, baseline_surrogates):
    _, params = baseline_model
    cfg = EmulatorConfig()
    ep1 = cfg.episode(1234)
    ep2 = cfg.episode(1234)
    xi = np.zeros(12)
    xi[6:9] = [15.0, 1.0, 0.5]
    u = np.array([3.0, 3.0, 0.02, 0.01])
    f1, t1 = hifi_forces(xi, u, baseline_surrogates, params.planform, episode=ep1)
    f2, t2 = hifi_forces(xi, u, baseline_surrogates, params.planform, episode=ep2)
    assert np.array_equal(f1, f2) and np.array_equal(t1, t2)
    ep3 = cfg.episode(1235)
    f3, _ = hifi_forces(xi, u, baseline_surrogates, params.planform, episode=ep3)
    assert not np.array_equal(f1, f3)


class _ConstantCoeffs:
    def __init__(self, values):
        self.values = np.asarray(values, dtype=float)

    def coefficient_means(self, X):
        return np.tile(self.values, (len(np.atleast_2d(X)), 1))


def test_quadratic_speed_scaling(baseline_model):
    _, params = baseline_model
    src = _ConstantCoeffs([0.01, 0.002, 0.4, 0.001, -0.02, 0.0005])
    u = np.zeros(4)
    xi1 = np.zeros(12)
    xi1[6:9] = [10.0, 0.0, 0.0]
    xi2 = np.zeros(12)
    xi2[6:9] = [20.0, 0.0, 0.0]
    f1, t1 = hifi_forces(xi1, u, src, params.planform)
    f2, t2 = hifi_forces(xi2, u, src, params.planform)
    assert np.allclose(f2, 4.0 * f1, rtol=1e-12)
    assert np.allclose(t2, 4.0 * t1, rtol=1e-12)


def test_fidelity_gap_pitch_slope(baseline_model):
    # low- and high-fidelity pitch response to symmetric deflection agree to
    # first order at the trim point
    prov, params = baseline_model
    p = params.planform
    V = 20.0
    alpha = params.trim.alpha
    dl = params.trim.delta
    h = 1e-4
    cm_up = prov.coefficients(alpha=alpha, delta1=dl + h, delta2=dl + h).C_theta
    cm_dn = prov.coefficients(alpha=alpha, delta1=dl - h, delta2=dl - h).C_theta
    hifi_slope = (cm_up - cm_dn) / (2 * h) * 0.5 * ENV.rho * V**2 * p.S * p.b
    vx = V * math.cos(alpha)
    lofi_slope = 2.0 * params.phi.K_theta * vx * V  # both elevons together
    assert abs(hifi_slope - lofi_slope) / abs(lofi_slope) < 0.25


def test_adapter_formats_and_stub(baseline_model):
    _, params = baseline_model
    geom = avl_adapter.write_geometry_case(BASELINE, params.planform)
    assert "SECTION" in geom and "CONTROL" in geom
    run = avl_adapter.write_run_case(0.05, 0.01, 0.1, -0.1, (0.0, 0.1, 0.0))
    assert "ALPHA" in run and "RATES" in run
    out = "CX = 0.01\nCY = 0.0\nCZ = 0.42\nCl = 0.001\nCm = -0.02 # trimmed\nCn = 0.0003\n"
    parsed = avl_adapter.parse_coefficient_table(out)
    assert parsed["C_Z"] == 0.42 and parsed["C_theta"] == -0.02
    with pytest.raises(ValueError):
        avl_adapter.parse_coefficient_table("CX = 0.01\n")
    stub = avl_adapter.ExternalVortexLatticeProvider(BASELINE, params.planform)
    with pytest.raises(avl_adapter.AdapterUnavailableError):
        stub.coefficients(alpha=0.0)


def test_emulator_config_validation():
    with pytest.raises(ValueError):
        EmulatorConfig(coeff_noise_std=-0.1)
    quiet = EmulatorConfig.quiet().episode(0)
    assert np.allclose(quiet.coeff_scale, 1.0) and np.allclose(quiet.wind, 0.0)
