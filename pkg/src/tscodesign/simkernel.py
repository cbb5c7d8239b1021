"""JIT-compiled closed-loop simulation kernel.

Numerically mirrors control.simulate_closed_loop's numpy path for a single
episode: 100 Hz delayed first-order-hold commands around the feedforward,
1 kHz RK4 plant with per-step-frozen high-fidelity coefficients, conditional
integrator freezing, and the divergence envelope. The numpy engine remains
the readable reference; an equivalence test keeps the two in lockstep.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

SQRT5 = math.sqrt(5.0)


@njit(cache=True)
def _wrap(a):
    m = (a + np.pi) % (2.0 * np.pi)
    return m - np.pi


@njit(cache=True)
def _rot_rows(psi, phi, theta):
    """Rows of the global-to-local rotation matrix."""
    cz, sz = math.cos(psi), math.sin(psi)
    cx, sx = math.cos(phi), math.sin(phi)
    cy, sy = math.cos(theta), math.sin(theta)
    r00 = cy * cz - sy * sx * sz
    r01 = cy * sz + sy * sx * cz
    r02 = -sy * cx
    r10 = -cx * sz
    r11 = cx * cz
    r12 = sx
    r20 = sy * cz + cy * sx * sz
    r21 = sy * sz - cy * sx * cz
    r22 = cy * cx
    return r00, r01, r02, r10, r11, r12, r20, r21, r22


@njit(cache=True)
def _coeff_eval(x, Xn, inv_ls2, alphas, betas, y_mean, y_std, x_lo, x_span, out):
    """Matern-5/2 surrogate means for one 7-dim query into out[0:6]."""
    n = Xn.shape[0]
    xq = np.empty(7)
    for k in range(7):
        xq[k] = (x[k] - x_lo[k]) / x_span[k]
    for g in range(6):
        acc = 0.0
        for i in range(n):
            r2 = 0.0
            for k in range(7):
                d = xq[k] - Xn[i, k]
                r2 += d * d * inv_ls2[g, k]
            r = math.sqrt(r2)
            kern = (1.0 + SQRT5 * r + (5.0 / 3.0) * r2) * math.exp(-SQRT5 * r)
            acc += kern * alphas[g, i]
        out[g] = y_mean[g] + y_std[g] * (betas[g] + acc)


@njit(cache=True)
def _rhs(
    x, u, hifi, coeffs, wind,
    mass, Ixx, Iyy, Izz, K_L, K_D, K_phi, K_theta, K_psi, l_T_y,
    g, rho, S, b_span, c_chord, out,
):
    """Rigid-body right-hand side; returns False at the roll singularity."""
    psi, phi, theta = x[3], x[4], x[5]
    cphi = math.cos(phi)
    if abs(cphi) < 1e-6:
        return False
    r00, r01, r02, r10, r11, r12, r20, r21, r22 = _rot_rows(psi, phi, theta)
    vax = x[6] - wind[0]
    vay = x[7] - wind[1]
    vaz = x[8] - wind[2]
    vlx = r00 * vax + r01 * vay + r02 * vaz
    vly = r10 * vax + r11 * vay + r12 * vaz
    vlz = r20 * vax + r21 * vay + r22 * vaz
    speed = math.sqrt(vlx * vlx + vly * vly + vlz * vlz)
    T1, T2, d1, d2 = u[0], u[1], u[2], u[3]
    if hifi:
        qS = 0.5 * rho * speed * speed * S
        flx = T1 + T2 - coeffs[0] * qS
        fly = coeffs[1] * qS
        flz = -coeffs[2] * qS
        tx = coeffs[3] * qS * c_chord
        ty = coeffs[4] * qS * b_span
        tz = coeffs[5] * qS * c_chord + l_T_y * (T2 - T1)
    else:
        vxs = vlx * speed
        flx = T1 + T2 - K_D * vxs
        fly = 0.0
        flz = -K_L * vlz * speed
        tx = K_phi * vxs * (d2 - d1)
        ty = K_theta * vxs * (d1 + d2)
        tz = K_psi * vxs * (d2 - d1) + l_T_y * (T2 - T1)

    fgx = r00 * flx + r10 * fly + r20 * flz
    fgy = r01 * flx + r11 * fly + r21 * flz
    fgz = r02 * flx + r12 * fly + r22 * flz

    ox, oy, oz = x[9], x[10], x[11]
    cy_, sy_ = math.cos(theta), math.sin(theta)
    phid = cy_ * ox + sy_ * oz
    psid = (cy_ * oz - sy_ * ox) / cphi
    thed = oy - math.sin(phi) * psid

    out[0] = x[6]
    out[1] = x[7]
    out[2] = x[8]
    out[3] = psid
    out[4] = phid
    out[5] = thed
    out[6] = fgx / mass
    out[7] = fgy / mass
    out[8] = fgz / mass - g
    # diagonal inertia
    out[9] = (tx - (oy * Izz * oz - oz * Iyy * oy)) / Ixx
    out[10] = (ty - (oz * Ixx * ox - ox * Izz * oz)) / Iyy
    out[11] = (tz - (ox * Iyy * oy - oy * Ixx * ox)) / Izz
    return True


@njit(cache=True)
def _allocate(
    fx, fy, fz, tx, ty, tz, psi_c, phi_c, theta_c, vx, vy, vz,
    K_L, K_D, K_phi, K_theta, K_psi, l_T_y, alloc_eps, out,
):
    cz, sz = math.cos(psi_c), math.sin(psi_c)
    cx, sx = math.cos(phi_c), math.sin(phi_c)
    fpx = cz * fx + sz * fy
    fpy = -sz * fx + cz * fy
    fppx = fpx
    fppz = -sx * fpy + cx * fz
    vpx = cz * vx + sz * vy
    vpy = -sz * vx + cz * vy
    vppx = vpx
    vppz = -sx * vpy + cx * vz
    speed = math.sqrt(vx * vx + vy * vy + vz * vz)
    ct, st = math.cos(theta_c), math.sin(theta_c)
    thrust = -(fppz + K_D * vppz * speed) * st + (fppx + K_D * vppx * speed) * ct
    vpppx = ct * vppx - st * vppz
    den = vpppx * speed
    if abs(den) < alloc_eps:
        den = alloc_eps if den >= 0 else -alloc_eps
    split = (K_psi / K_phi * tx - tz) / (2.0 * l_T_y)
    out[0] = 0.5 * thrust + split
    out[1] = 0.5 * thrust - split
    out[2] = (ty / K_theta - tx / K_phi) / (2.0 * den)
    out[3] = (tx / K_phi + ty / K_theta) / (2.0 * den)


@njit(cache=True)
def simulate_episode(
    ref_xi, ref_u, ref_acc, t, steps_per_tick,
    gains,  # att_p, att_d, att_i, pos_p, pos_d, pos_i
    mass, Idiag, phi_k,  # K_L, K_D, K_phi, K_theta, K_psi
    l_T_y, T_min, T_max, delta_max,
    g, rho, S, b_span, c_chord,
    hifi, Xn, inv_ls2, alphas, betas, y_mean, y_std, x_lo, x_span,
    coeff_scale, wind, anti_windup, xi0,
    hover_eps, alloc_eps, div_radius, roll_margin, rate_limit,
    xi_log, u_log, u_cmd, sat_log,
):
    n = ref_xi.shape[0]
    n_ticks = u_cmd.shape[0]
    att_p, att_d, att_i = gains[0], gains[1], gains[2]
    pos_p, pos_d, pos_i = gains[3], gains[4], gains[5]
    K_L, K_D, K_phi, K_theta, K_psi = phi_k[0], phi_k[1], phi_k[2], phi_k[3], phi_k[4]
    Ixx, Iyy, Izz = Idiag[0], Idiag[1], Idiag[2]
    tick = steps_per_tick * (t[1] - t[0])

    xi = xi0.copy()
    xi_sample = xi.copy()
    for j in range(12):
        xi_log[0, j] = xi[j]
    u_prev = ref_u[0].copy()
    for j in range(4):
        u_log[0, j] = u_prev[j]
    gamma_p = np.zeros(3)
    gamma_q = np.zeros(3)
    prev_qc = ref_xi[0, 3:6].copy()
    raw = np.empty(4)
    ff_raw = np.empty(4)
    u_k = np.empty(4)
    coeffs = np.zeros(6)
    query = np.empty(7)
    k1 = np.empty(12)
    k2 = np.empty(12)
    k3 = np.empty(12)
    k4 = np.empty(12)
    stage = np.empty(12)
    u_stage = np.empty(4)
    alive = True
    div_time = np.inf

    for kk in range(n_ticks):
        i0 = kk * steps_per_tick
        i_s = i0 - steps_per_tick
        if i_s < 0:
            i_s = 0
        i_ff = i0 + steps_per_tick
        if i_ff > n - 1:
            i_ff = n - 1

        # outer loop
        fcx = mass * (ref_acc[i_s, 0] - pos_d * (xi_sample[6] - ref_xi[i_s, 6])
                      - pos_p * (xi_sample[0] - ref_xi[i_s, 0]) - pos_i * gamma_p[0])
        fcy = mass * (ref_acc[i_s, 1] - pos_d * (xi_sample[7] - ref_xi[i_s, 7])
                      - pos_p * (xi_sample[1] - ref_xi[i_s, 1]) - pos_i * gamma_p[1])
        fcz = mass * (ref_acc[i_s, 2] - pos_d * (xi_sample[8] - ref_xi[i_s, 8])
                      - pos_p * (xi_sample[2] - ref_xi[i_s, 2]) - pos_i * gamma_p[2]) + mass * g

        # attitude setpoint from f_c and the measured velocity
        vmx, vmy, vmz = xi_sample[6], xi_sample[7], xi_sample[8]
        speed_m = math.sqrt(vmx * vmx + vmy * vmy + vmz * vmz)
        psi_c = math.atan2(ref_xi[i_s, 7], ref_xi[i_s, 6])
        cz, sz = math.cos(psi_c), math.sin(psi_c)
        fpy = -sz * fcx + cz * fcy
        phi_c = -math.atan2(fpy, fcz)
        cx, sx = math.cos(phi_c), math.sin(phi_c)
        fppx = cz * fcx + sz * fcy
        fppz = -sx * fpy + cx * fcz
        vpx = cz * vmx + sz * vmy
        vpy = -sz * vmx + cz * vmy
        vppx = vpx
        vppz = -sx * vpy + cx * vmz
        theta_c = math.atan2(-(fppz + K_L * vppz * speed_m), fppx + K_L * vppx * speed_m)
        if speed_m < hover_eps:
            psi_c, phi_c, theta_c = prev_qc[0], prev_qc[1], prev_qc[2]
        else:
            psi_c = prev_qc[0] + _wrap(psi_c - prev_qc[0])
            phi_c = prev_qc[1] + _wrap(phi_c - prev_qc[1])
            theta_c = prev_qc[2] + _wrap(theta_c - prev_qc[2])
        prev_qc[0], prev_qc[1], prev_qc[2] = psi_c, phi_c, theta_c

        # inner loop: J(q)-mapped angle errors
        qpsi, qphi, qthe = xi_sample[3], xi_sample[4], xi_sample[5]
        dpsi = _wrap(qpsi - psi_c)
        dphi = _wrap(qphi - phi_c)
        dthe = _wrap(qthe - theta_c)
        cphi_s, sphi_s = math.cos(qphi), math.sin(qphi)
        cthe_s, sthe_s = math.cos(qthe), math.sin(qthe)
        # J rows: (-st cph, ct, 0), (sph, 0, 1), (ct cph, st, 0)
        dq_bx = -sthe_s * cphi_s * dpsi + cthe_s * dphi
        dq_by = sphi_s * dpsi + dthe
        dq_bz = cthe_s * cphi_s * dpsi + sthe_s * dphi
        gq_bx = -sthe_s * cphi_s * gamma_q[0] + cthe_s * gamma_q[1]
        gq_by = sphi_s * gamma_q[0] + gamma_q[2]
        gq_bz = cthe_s * cphi_s * gamma_q[0] + sthe_s * gamma_q[1]
        ox, oy, oz = xi_sample[9], xi_sample[10], xi_sample[11]
        odx = -att_d * (ox - ref_xi[i_s, 9]) - att_p * dq_bx - att_i * gq_bx
        ody = -att_d * (oy - ref_xi[i_s, 10]) - att_p * dq_by - att_i * gq_by
        odz = -att_d * (oz - ref_xi[i_s, 11]) - att_p * dq_bz - att_i * gq_bz
        tcx = Ixx * odx + (oy * Izz * oz - oz * Iyy * oy)
        tcy = Iyy * ody + (oz * Ixx * ox - ox * Izz * oz)
        tcz = Izz * odz + (ox * Iyy * oy - oy * Ixx * ox)

        _allocate(fcx, fcy, fcz, tcx, tcy, tcz, psi_c, phi_c, theta_c,
                  vmx, vmy, vmz, K_L, K_D, K_phi, K_theta, K_psi, l_T_y, alloc_eps, raw)

        # zero-error feedforward in identical frames
        ffx = mass * ref_acc[i_s, 0]
        ffy = mass * ref_acc[i_s, 1]
        ffz = mass * (ref_acc[i_s, 2] + g)
        orx, ory, orz = ref_xi[i_s, 9], ref_xi[i_s, 10], ref_xi[i_s, 11]
        tfx = ory * Izz * orz - orz * Iyy * ory
        tfy = orz * Ixx * orx - orx * Izz * orz
        tfz = orx * Iyy * ory - ory * Ixx * orx
        _allocate(ffx, ffy, ffz, tfx, tfy, tfz, psi_c, phi_c, theta_c,
                  vmx, vmy, vmz, K_L, K_D, K_phi, K_theta, K_psi, l_T_y, alloc_eps, ff_raw)

        sat_thrust = False
        sat_elevon = False
        for j in range(4):
            comb = ref_u[i_ff, j] + (raw[j] - ff_raw[j])
            lo = T_min if j < 2 else -delta_max
            hi = T_max if j < 2 else delta_max
            val = comb
            if val < lo:
                val = lo
            if val > hi:
                val = hi
            if val != comb:
                if j < 2:
                    sat_thrust = True
                else:
                    sat_elevon = True
            u_k[j] = val
            u_cmd[kk, j] = val
        sat_log[kk] = sat_thrust or sat_elevon

        # per-loop anti-windup: each integrator freezes with its own channel
        if alive and not (sat_thrust and anti_windup):
            gamma_p[0] += (xi_sample[0] - ref_xi[i_s, 0]) * tick
            gamma_p[1] += (xi_sample[1] - ref_xi[i_s, 1]) * tick
            gamma_p[2] += (xi_sample[2] - ref_xi[i_s, 2]) * tick
        if alive and not (sat_elevon and anti_windup):
            gamma_q[0] += _wrap(xi_sample[3] - ref_xi[i_s, 3]) * tick
            gamma_q[1] += _wrap(xi_sample[4] - ref_xi[i_s, 4]) * tick
            gamma_q[2] += _wrap(xi_sample[5] - ref_xi[i_s, 5]) * tick

        for j in range(12):
            xi_sample[j] = xi[j]

        for jj in range(steps_per_tick):
            idx = i0 + jj
            if idx + 1 >= n:
                break
            dt = t[idx + 1] - t[idx]
            if alive:
                if abs(xi[4]) > np.pi / 2 - roll_margin:
                    alive = False
                    div_time = t[idx]
                elif (abs(xi[9]) > rate_limit or abs(xi[10]) > rate_limit
                      or abs(xi[11]) > rate_limit):
                    alive = False
                    div_time = t[idx]
            if alive:
                frac0 = jj / steps_per_tick
                frac1 = (jj + 1) / steps_per_tick
                fracm = 0.5 * (frac0 + frac1)
                ok = True
                if hifi:
                    # frozen coefficients at the step-start state and command
                    psi0, phi0, the0 = xi[3], xi[4], xi[5]
                    r00, r01, r02, r10, r11, r12, r20, r21, r22 = _rot_rows(psi0, phi0, the0)
                    vax = xi[6] - wind[0]
                    vay = xi[7] - wind[1]
                    vaz = xi[8] - wind[2]
                    vlx = r00 * vax + r01 * vay + r02 * vaz
                    vly = r10 * vax + r11 * vay + r12 * vaz
                    vlz = r20 * vax + r21 * vay + r22 * vaz
                    sp = math.sqrt(vlx * vlx + vly * vly + vlz * vlz)
                    query[0] = math.atan2(vlz, vlx)
                    sb = vly / sp if sp > 1e-9 else 0.0
                    if sb > 1.0:
                        sb = 1.0
                    if sb < -1.0:
                        sb = -1.0
                    query[1] = math.asin(sb)
                    for j in range(2):
                        u_stage[j] = u_prev[j] + frac0 * (u_k[j] - u_prev[j])
                    query[2] = u_prev[2] + frac0 * (u_k[2] - u_prev[2])
                    query[3] = u_prev[3] + frac0 * (u_k[3] - u_prev[3])
                    vref = sp if sp > 0.5 else 0.5
                    q4 = xi[9] * b_span / (2.0 * vref)
                    q5 = xi[10] * c_chord / (2.0 * vref)
                    q6 = xi[11] * b_span / (2.0 * vref)
                    query[4] = max(-2.0, min(2.0, q4))
                    query[5] = max(-2.0, min(2.0, q5))
                    query[6] = max(-2.0, min(2.0, q6))
                    _coeff_eval(query, Xn, inv_ls2, alphas, betas, y_mean, y_std,
                                x_lo, x_span, coeffs)
                    for j in range(6):
                        coeffs[j] *= coeff_scale[j]

                for j in range(4):
                    u_stage[j] = u_prev[j] + frac0 * (u_k[j] - u_prev[j])
                ok = ok and _rhs(xi, u_stage, hifi, coeffs, wind, mass, Ixx, Iyy, Izz,
                                 K_L, K_D, K_phi, K_theta, K_psi, l_T_y, g, rho, S,
                                 b_span, c_chord, k1)
                for j in range(4):
                    u_stage[j] = u_prev[j] + fracm * (u_k[j] - u_prev[j])
                for j in range(12):
                    stage[j] = xi[j] + 0.5 * dt * k1[j]
                ok = ok and _rhs(stage, u_stage, hifi, coeffs, wind, mass, Ixx, Iyy, Izz,
                                 K_L, K_D, K_phi, K_theta, K_psi, l_T_y, g, rho, S,
                                 b_span, c_chord, k2)
                for j in range(12):
                    stage[j] = xi[j] + 0.5 * dt * k2[j]
                ok = ok and _rhs(stage, u_stage, hifi, coeffs, wind, mass, Ixx, Iyy, Izz,
                                 K_L, K_D, K_phi, K_theta, K_psi, l_T_y, g, rho, S,
                                 b_span, c_chord, k3)
                for j in range(4):
                    u_stage[j] = u_prev[j] + frac1 * (u_k[j] - u_prev[j])
                for j in range(12):
                    stage[j] = xi[j] + dt * k3[j]
                ok = ok and _rhs(stage, u_stage, hifi, coeffs, wind, mass, Ixx, Iyy, Izz,
                                 K_L, K_D, K_phi, K_theta, K_psi, l_T_y, g, rho, S,
                                 b_span, c_chord, k4)
                if ok:
                    finite = True
                    for j in range(12):
                        xi[j] = xi[j] + (dt / 6.0) * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
                        if not math.isfinite(xi[j]):
                            finite = False
                    ex = xi[0] - ref_xi[idx + 1, 0]
                    ey = xi[1] - ref_xi[idx + 1, 1]
                    ez = xi[2] - ref_xi[idx + 1, 2]
                    if (not finite) or math.sqrt(ex * ex + ey * ey + ez * ez) > div_radius:
                        alive = False
                        div_time = t[idx + 1]
                        for j in range(12):
                            xi[j] = xi_log[idx, j]
                else:
                    alive = False
                    div_time = t[idx]
                    for j in range(12):
                        xi[j] = xi_log[idx, j]
            for j in range(12):
                xi_log[idx + 1, j] = xi[j]
            if alive:
                for j in range(4):
                    u_log[idx + 1, j] = u_prev[j] + ((jj + 1) / steps_per_tick) * (u_k[j] - u_prev[j])
            else:
                for j in range(4):
                    u_log[idx + 1, j] = u_log[idx, j]
        for j in range(4):
            u_prev[j] = u_k[j]

    return alive, div_time
