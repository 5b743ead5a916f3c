"""Compiled per-member Dormand-Prince integration for analytic mode fields.

Same step controller and node policy as ``guidance.integrate_batch``; used
whenever a handle can express its velocity as a compiled kernel.
"""
import math

import numpy as np
from numba import njit

# basis codes
BOX, PLANE = 0, 1
# coupling observables
MOMENTUM, KINETIC = 0, 1

NODE_GRAZED, STEP_CLAMPED, STUCK = 1, 2, 4

C2, C3, C4, C5 = 1 / 5, 3 / 10, 4 / 5, 8 / 9
A21 = 1 / 5
A31, A32 = 3 / 40, 9 / 40
A41, A42, A43 = 44 / 45, -56 / 15, 32 / 9
A51, A52, A53, A54 = 19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729
A61, A62, A63, A64, A65 = 9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656
B1, B3, B4, B5, B6 = 35 / 384, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84
E1 = 35 / 384 - 5179 / 57600
E3 = 500 / 1113 - 7571 / 16695
E4 = 125 / 192 - 393 / 640
E5 = -2187 / 6784 + 92097 / 339200
E6 = 11 / 84 - 187 / 2100
E7 = -1 / 40


@njit(cache=True)
def _basis(kind, n, x, lo, L, order):
    if kind == BOX:
        k = n * math.pi / L
        arg = k * (x - lo) + order * math.pi / 2
        return complex(math.sqrt(2.0 / L) * k**order * math.sin(arg), 0.0)
    k = 2 * math.pi * n / L
    return (1j * k) ** order * complex(math.cos(k * x), math.sin(k * x)) / math.sqrt(L)


@njit(cache=True)
def _axis_table(kind, nmax, x, lo, L, f, df):
    """Basis values and first derivatives for n = -nmax..nmax along one axis.

    Uses the angle-addition recurrence from a single sin/cos pair.
    """
    if kind == BOX:
        th = math.pi * (x - lo) / L
        norm = math.sqrt(2.0 / L)
    else:
        th = 2 * math.pi * x / L
        norm = 1.0 / math.sqrt(L)
    c1 = math.cos(th)
    s1 = math.sin(th)
    c = 1.0
    s = 0.0
    for n in range(nmax + 1):
        if kind == BOX:
            k = n * math.pi / L
            f[nmax + n] = norm * s
            df[nmax + n] = norm * k * c
        else:
            k = 2 * math.pi * n / L
            e = complex(c, s) * norm
            f[nmax + n] = e
            df[nmax + n] = 1j * k * e
            f[nmax - n] = e.conjugate()
            df[nmax - n] = -1j * k * e.conjugate()
        c, s = c * c1 - s * s1, s * c1 + c * s1


@njit(cache=True)
def eigen_velocity(q, t, coef, energies, qn, kind, lo, L, masses, v):
    d = q.shape[0]
    M = coef.shape[0]
    nmax = 0
    for n in range(M):
        for a in range(d):
            nmax = max(nmax, abs(qn[n, a]))
    W = 2 * nmax + 1
    f = np.empty((d, W), dtype=np.complex128)
    df = np.empty((d, W), dtype=np.complex128)
    for a in range(d):
        _axis_table(kind, nmax, q[a], lo[a], L[a], f[a], df[a])
    psi = 0j
    g0 = 0j
    g1 = 0j
    g2 = 0j
    for n in range(M):
        ph = coef[n] * complex(math.cos(energies[n] * t), -math.sin(energies[n] * t))
        i0 = nmax + qn[n, 0]
        if d == 1:
            psi += ph * f[0, i0]
            g0 += ph * df[0, i0]
        elif d == 2:
            i1 = nmax + qn[n, 1]
            psi += ph * f[0, i0] * f[1, i1]
            g0 += ph * df[0, i0] * f[1, i1]
            g1 += ph * f[0, i0] * df[1, i1]
        else:
            i1 = nmax + qn[n, 1]
            i2 = nmax + qn[n, 2]
            psi += ph * f[0, i0] * f[1, i1] * f[2, i2]
            g0 += ph * df[0, i0] * f[1, i1] * f[2, i2]
            g1 += ph * f[0, i0] * df[1, i1] * f[2, i2]
            g2 += ph * f[0, i0] * f[1, i1] * df[2, i2]
    rho = psi.real**2 + psi.imag**2
    cp = psi.conjugate()
    v[0] = (cp * g0).imag / (masses[0] * rho)
    if d > 1:
        v[1] = (cp * g1).imag / (masses[1] * rho)
    if d > 2:
        v[2] = (cp * g2).imag / (masses[2] * rho)
    return rho


@njit(cache=True)
def _gauss(y, sigma, order):
    g = (2 * math.pi * sigma**2) ** -0.25 * math.exp(-(y**2) / (4 * sigma**2))
    if order == 0:
        return g
    return -y / (2 * sigma**2) * g


@njit(cache=True)
def coupling_velocity(q, t, coef, energies, eigenvalues, qn, kind, lo, L, mass, a, tau, sigma, observable, v):
    x = q[0]
    y = q[1]
    u = min(t, tau)
    s = max(t - tau, 0.0)
    psi = 0j
    px = 0j
    py = 0j
    pxy = 0j
    pxx = 0j
    for n in range(coef.shape[0]):
        ph = coef[n] * complex(math.cos(energies[n] * s), -math.sin(energies[n] * s))
        f0 = _basis(kind, qn[n], x, lo, L, 0)
        f1 = _basis(kind, qn[n], x, lo, L, 1)
        Y = y - a * eigenvalues[n] * u
        gg = _gauss(Y, sigma, 0)
        g1 = _gauss(Y, sigma, 1)
        psi += ph * f0 * gg
        px += ph * f1 * gg
        py += ph * f0 * g1
        pxy += ph * f1 * g1
        if observable == KINETIC:
            pxx += ph * _basis(kind, qn[n], x, lo, L, 2) * gg
    rho = psi.real**2 + psi.imag**2
    cp = psi.conjugate()
    if t > tau:
        v[0] = (cp * px).imag / (mass * rho)
        v[1] = 0.0
    elif observable == MOMENTUM:
        v[0] = a * (cp * py).imag / rho
        v[1] = a * (cp * px).imag / rho
    else:
        v[0] = a / (2 * mass) * ((py.conjugate() * px).real - (cp * pxy).real) / rho
        v[1] = -a / (2 * mass) * (cp * pxx).real / rho
    return rho


@njit(cache=True)
def _vel(code, q, t, rev, t_end, P, v):
    tt = t_end - t if rev else t
    if code == 0:
        rho = eigen_velocity(q, tt, P[0], P[1], P[3], P[4], P[5], P[6], P[7], v)
    else:
        rho = coupling_velocity(q, tt, P[0], P[1], P[2], P[3][:, 0], P[4], P[5][0], P[6][0], P[7][0],
                                P[8], P[9], P[10], P[11], v)
    if rev:
        for i in range(q.shape[0]):
            v[i] = -v[i]
    ok = rho >= 0.0
    for i in range(q.shape[0]):
        if not math.isfinite(v[i]):
            ok = False
    return rho, ok


@njit(cache=True)
def integrate_members(code, P, Q0, t0, t_out, tol, rho_floor, dt_min, dx_min, v_cap, max_retries, max_clamped,
                      max_iters, periodic, lo, L, rev, t_end, out, flags, member_flags, n_acc, n_rej):
    M, d = Q0.shape
    K = t_out.shape[0]
    span = t_out[K - 1] - t0
    k1 = np.empty(d)
    k2 = np.empty(d)
    k3 = np.empty(d)
    k4 = np.empty(d)
    k5 = np.empty(d)
    k6 = np.empty(d)
    k7 = np.empty(d)
    y = np.empty(d)
    y5 = np.empty(d)
    q = np.empty(d)
    for m in range(M):
        for a in range(d):
            q[a] = Q0[m, a]
        t = t0
        nxt = 0
        while nxt < K and abs(t_out[nxt] - t) <= 1e-12 * max(1.0, abs(t0)):
            for a in range(d):
                out[m, nxt, a] = q[a]
            nxt += 1
        rho, ok = _vel(code, q, t, rev, t_end, P, k1)
        pf = 0
        if not (ok and rho >= rho_floor):
            for a in range(d):
                k1[a] = 0.0
            pf |= NODE_GRAZED
        speed = 1e-12
        for a in range(d):
            speed = max(speed, abs(k1[a]))
        h = min(0.01 * span, tol**0.2 * dx_min / speed)
        h = max(h, dt_min)
        errold = 1e-4
        retries = 0
        clamped_run = 0
        cur = 0
        acc = 0
        rej = 0
        iters = 0
        while nxt < K:
            target = t_out[nxt]
            hh = min(h, target - t)
            node = False
            for a in range(d):
                y[a] = q[a] + hh * A21 * k1[a]
            rho, ok = _vel(code, y, t + C2 * hh, rev, t_end, P, k2)
            node |= not (ok and rho >= rho_floor)
            for a in range(d):
                y[a] = q[a] + hh * (A31 * k1[a] + A32 * k2[a])
            rho, ok = _vel(code, y, t + C3 * hh, rev, t_end, P, k3)
            node |= not (ok and rho >= rho_floor)
            for a in range(d):
                y[a] = q[a] + hh * (A41 * k1[a] + A42 * k2[a] + A43 * k3[a])
            rho, ok = _vel(code, y, t + C4 * hh, rev, t_end, P, k4)
            node |= not (ok and rho >= rho_floor)
            for a in range(d):
                y[a] = q[a] + hh * (A51 * k1[a] + A52 * k2[a] + A53 * k3[a] + A54 * k4[a])
            rho, ok = _vel(code, y, t + C5 * hh, rev, t_end, P, k5)
            node |= not (ok and rho >= rho_floor)
            for a in range(d):
                y[a] = q[a] + hh * (A61 * k1[a] + A62 * k2[a] + A63 * k3[a] + A64 * k4[a] + A65 * k5[a])
            rho, ok = _vel(code, y, t + hh, rev, t_end, P, k6)
            node |= not (ok and rho >= rho_floor)
            for a in range(d):
                y5[a] = q[a] + hh * (B1 * k1[a] + B3 * k3[a] + B4 * k4[a] + B5 * k5[a] + B6 * k6[a])
            rho, ok = _vel(code, y5, t + hh, rev, t_end, P, k7)
            node |= not (ok and rho >= rho_floor)
            errn = 0.0
            for a in range(d):
                e = hh * (E1 * k1[a] + E3 * k3[a] + E4 * k4[a] + E5 * k5[a] + E6 * k6[a] + E7 * k7[a])
                errn = max(errn, abs(e))
            errn /= tol
            if not math.isfinite(errn) or (errn > 1.0 and hh <= 2 * dt_min):
                node = True
            moved = False
            if (not node) and errn <= 1.0:
                for a in range(d):
                    qa = y5[a]
                    if periodic[a]:
                        qa = lo[a] + ((qa - lo[a]) % L[a])
                    q[a] = qa
                    k1[a] = k7[a]
                t = t + hh
                acc += 1
                fac = 0.9 * max(errn, 1e-10) ** (-0.7 / 5) * errold ** (0.4 / 5)
                fac = min(5.0, max(0.2, fac))
                if hh < h * (1 - 1e-12):
                    h = max(h, hh * fac)
                else:
                    h = hh * fac
                errold = max(errn, 1e-4)
                retries = 0
                clamped_run = 0
                moved = True
            elif node and retries >= max_retries:
                sp = 0.0
                for a in range(d):
                    sp += k1[a] ** 2
                sp = math.sqrt(sp)
                scale = v_cap / sp if sp > v_cap else 1.0
                hc = max(hh, min(dt_min * 1e3, target - t))
                for a in range(d):
                    qa = q[a] + hc * k1[a] * scale
                    if periodic[a]:
                        qa = lo[a] + ((qa - lo[a]) % L[a])
                    q[a] = qa
                t = t + hc
                rho, ok = _vel(code, q, t, rev, t_end, P, k1)
                if not (ok and rho >= rho_floor):
                    for a in range(d):
                        k1[a] = 0.0
                cur |= NODE_GRAZED | STEP_CLAMPED
                pf |= NODE_GRAZED | STEP_CLAMPED
                retries = 0
                clamped_run += 1
                h = max(hc, dt_min) * 2
                moved = True
            else:
                rej += 1
                if node:
                    h = hh * 0.5
                    retries += 1
                    cur |= NODE_GRAZED
                    pf |= NODE_GRAZED
                else:
                    h = hh * min(0.9, max(0.1, 0.9 * errn ** -0.2))
                h = max(h, dt_min)
            iters += 1
            if iters > max_iters:
                clamped_run = max_clamped + 1
            if moved and abs(t - t_out[nxt]) <= 1e-12 * max(1.0, abs(t)):
                t = t_out[nxt]
                for a in range(d):
                    out[m, nxt, a] = q[a]
                flags[m, nxt] = cur
                cur = 0
                nxt += 1
            if clamped_run > max_clamped:
                while nxt < K:
                    for a in range(d):
                        out[m, nxt, a] = q[a]
                    flags[m, nxt] = STUCK | NODE_GRAZED
                    nxt += 1
                pf |= STUCK
        member_flags[m] = pf
        n_acc[m] = acc
        n_rej[m] = rej
