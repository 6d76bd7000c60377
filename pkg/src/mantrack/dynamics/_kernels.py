"""Compiled force-model and integrator kernels.

Everything here operates on plain float arrays so numba can compile it.
The packed parameter vector layout is defined by the ``P_*`` indices and
built by :meth:`mantrack.dynamics.ForceModelConfig.packed`.
"""
import math

import numpy as np
from numba import njit
from scipy.integrate._ivp import dop853_coefficients as _dop

P_MU = 0
P_RE = 1
P_OMEGA = 2
P_DEGREE = 3
P_SUN = 4
P_MOON = 5
P_EPOCH_JD = 6
P_CDAM = 7
P_RHO0 = 8
P_H0 = 9
P_HSCALE = 10
P_CRAM = 11
P_RIC = 12
P_IMPACT = 13
P_THETA0 = 14
P_ZONAL = 15
N_PARAMS = 16

MU_SUN = 1.32712440018e11
MU_MOON = 4902.800066
AU_KM = 149597870.700
P_SOLAR = 4.56e-6
_ARCSEC = math.pi / (180.0 * 3600.0)
_DEG = math.pi / 180.0
_EPS = 23.43929111 * _DEG

_N_STAGES = _dop.N_STAGES
_A = np.ascontiguousarray(_dop.A[:_N_STAGES, :_N_STAGES])
_B = np.ascontiguousarray(_dop.B)
_C = np.ascontiguousarray(_dop.C[:_N_STAGES])
_E3 = np.ascontiguousarray(_dop.E3)
_E5 = np.ascontiguousarray(_dop.E5)

STATUS_OK = 0
STATUS_IMPACT = 1
STATUS_UNDERFLOW = 2


@njit(cache=True)
def sun_position(jd):
    """Low-precision geocentric Sun position, equatorial frame [km]."""
    T = (jd - 2451545.0) / 36525.0
    M = (357.5256 + 35999.049 * T) * _DEG
    lam = (282.94 * _DEG + M + (6892.0 * math.sin(M) + 72.0 * math.sin(2 * M)) * _ARCSEC)
    r = (149.619 - 2.499 * math.cos(M) - 0.021 * math.cos(2 * M)) * 1e6
    x = r * math.cos(lam)
    y = r * math.sin(lam)
    out = np.empty(3)
    out[0] = x
    out[1] = y * math.cos(_EPS)
    out[2] = y * math.sin(_EPS)
    return out


@njit(cache=True)
def moon_position(jd):
    """Low-precision geocentric Moon position, equatorial frame [km]."""
    T = (jd - 2451545.0) / 36525.0
    L0 = (218.31617 + 481267.88088 * T) % 360.0 * _DEG
    l = (134.96292 + 477198.86753 * T) % 360.0 * _DEG
    lp = (357.52543 + 35999.04944 * T) % 360.0 * _DEG
    F = (93.27283 + 483202.01873 * T) % 360.0 * _DEG
    D = (297.85027 + 445267.11135 * T) % 360.0 * _DEG
    dl = (22640 * math.sin(l) + 769 * math.sin(2 * l) - 4586 * math.sin(l - 2 * D)
          + 2370 * math.sin(2 * D) - 668 * math.sin(lp) - 412 * math.sin(2 * F)
          - 212 * math.sin(2 * l - 2 * D) - 206 * math.sin(l + lp - 2 * D)
          + 192 * math.sin(l + 2 * D) - 165 * math.sin(lp - 2 * D)
          + 148 * math.sin(l - lp) - 125 * math.sin(D) - 110 * math.sin(l + lp)
          - 55 * math.sin(2 * F - 2 * D))
    lam = L0 + dl * _ARCSEC
    S = F + (dl + 412 * math.sin(2 * F) + 541 * math.sin(lp)) * _ARCSEC
    h = F - 2 * D
    N = (-526 * math.sin(h) + 44 * math.sin(l + h) - 31 * math.sin(-l + h)
         - 23 * math.sin(lp + h) + 11 * math.sin(-lp + h) - 25 * math.sin(-2 * l + F)
         + 21 * math.sin(-l + F))
    beta = (18520.0 * math.sin(S) + N) * _ARCSEC
    r = (385000.0 - 20905 * math.cos(l) - 3699 * math.cos(2 * D - l)
         - 2956 * math.cos(2 * D) - 570 * math.cos(2 * l) + 246 * math.cos(2 * l - 2 * D)
         - 205 * math.cos(lp - 2 * D) - 171 * math.cos(l + 2 * D)
         - 152 * math.cos(l + lp - 2 * D))
    xe = r * math.cos(lam) * math.cos(beta)
    ye = r * math.sin(lam) * math.cos(beta)
    ze = r * math.sin(beta)
    out = np.empty(3)
    ce = math.cos(_EPS)
    se = math.sin(_EPS)
    out[0] = xe
    out[1] = ce * ye - se * ze
    out[2] = se * ye + ce * ze
    return out


@njit(cache=True)
def _harmonics_body(xb, yb, zb, mu, Re, nmax, C, S, out):
    """Cunningham V/W recursion with unnormalized coefficients (body frame)."""
    r2 = xb * xb + yb * yb + zb * zb
    rho = Re * Re / r2
    x0 = Re * xb / r2
    y0 = Re * yb / r2
    z0 = Re * zb / r2
    n1 = nmax + 2
    V = np.zeros((n1 + 1, n1 + 1))
    W = np.zeros((n1 + 1, n1 + 1))
    V[0, 0] = Re / math.sqrt(r2)
    W[0, 0] = 0.0
    V[1, 0] = z0 * V[0, 0]
    W[1, 0] = 0.0
    for n in range(2, n1 + 1):
        V[n, 0] = ((2 * n - 1) * z0 * V[n - 1, 0] - (n - 1) * rho * V[n - 2, 0]) / n
        W[n, 0] = 0.0
    for m in range(1, n1 + 1):
        V[m, m] = (2 * m - 1) * (x0 * V[m - 1, m - 1] - y0 * W[m - 1, m - 1])
        W[m, m] = (2 * m - 1) * (x0 * W[m - 1, m - 1] + y0 * V[m - 1, m - 1])
        if m + 1 <= n1:
            V[m + 1, m] = (2 * m + 1) * z0 * V[m, m]
            W[m + 1, m] = (2 * m + 1) * z0 * W[m, m]
        for n in range(m + 2, n1 + 1):
            V[n, m] = ((2 * n - 1) * z0 * V[n - 1, m] - (n + m - 1) * rho * V[n - 2, m]) / (n - m)
            W[n, m] = ((2 * n - 1) * z0 * W[n - 1, m] - (n + m - 1) * rho * W[n - 2, m]) / (n - m)
    ax = 0.0
    ay = 0.0
    az = 0.0
    for n in range(0, nmax + 1):
        for m in range(0, n + 1):
            c = C[n, m]
            s = S[n, m]
            if c == 0.0 and s == 0.0:
                continue
            if m == 0:
                ax -= c * V[n + 1, 1]
                ay -= c * W[n + 1, 1]
                az += (n + 1) * (-c * V[n + 1, 0])
            else:
                fac = 1.0
                for k in range(n - m + 1, n - m + 3):
                    fac *= k
                ax += 0.5 * ((-c * V[n + 1, m + 1] - s * W[n + 1, m + 1])
                             + fac * (c * V[n + 1, m - 1] + s * W[n + 1, m - 1]))
                ay += 0.5 * ((-c * W[n + 1, m + 1] + s * V[n + 1, m + 1])
                             + fac * (-c * W[n + 1, m - 1] + s * V[n + 1, m - 1]))
                az += (n - m + 1) * (-c * V[n + 1, m] - s * W[n + 1, m])
    g = mu / (Re * Re)
    out[0] = g * ax
    out[1] = g * ay
    out[2] = g * az


@njit(cache=True)
def gravity_accel(t, r, p, C, S, out):
    mu = p[P_MU]
    Re = p[P_RE]
    nmax = int(p[P_DEGREE])
    x = r[0]
    y = r[1]
    z = r[2]
    if nmax == 0:
        r3 = (x * x + y * y + z * z) ** 1.5
        out[0] = -mu * x / r3
        out[1] = -mu * y / r3
        out[2] = -mu * z / r3
        return
    if p[P_ZONAL] > 0.5:
        # two-body + J2 closed form, rotation invariant
        J2 = -C[2, 0]
        r2 = x * x + y * y + z * z
        rn = math.sqrt(r2)
        r3 = r2 * rn
        k = 1.5 * J2 * (Re * Re) / r2
        z2 = z * z / r2
        out[0] = -mu * x / r3 * (1.0 + k * (1.0 - 5.0 * z2))
        out[1] = -mu * y / r3 * (1.0 + k * (1.0 - 5.0 * z2))
        out[2] = -mu * z / r3 * (1.0 + k * (3.0 - 5.0 * z2))
        return
    th = p[P_THETA0] + p[P_OMEGA] * t
    ct = math.cos(th)
    st = math.sin(th)
    xb = ct * x + st * y
    yb = -st * x + ct * y
    tmp = np.empty(3)
    _harmonics_body(xb, yb, z, mu, Re, nmax, C, S, tmp)
    out[0] = ct * tmp[0] - st * tmp[1]
    out[1] = st * tmp[0] + ct * tmp[1]
    out[2] = tmp[2]


@njit(cache=True)
def total_accel(t, y, p, C, S, out):
    """Non-thrust acceleration for a 6-vector state ``y`` at time ``t``."""
    r = y[:3]
    gravity_accel(t, r, p, C, S, out)
    jd = p[P_EPOCH_JD] + t / 86400.0
    if p[P_SUN] > 0.5 or p[P_CRAM] > 0.0:
        s = sun_position(jd)
        if p[P_SUN] > 0.5:
            dx = s[0] - r[0]
            dy = s[1] - r[1]
            dz = s[2] - r[2]
            d3 = (dx * dx + dy * dy + dz * dz) ** 1.5
            s3 = (s[0] * s[0] + s[1] * s[1] + s[2] * s[2]) ** 1.5
            out[0] += MU_SUN * (dx / d3 - s[0] / s3)
            out[1] += MU_SUN * (dy / d3 - s[1] / s3)
            out[2] += MU_SUN * (dz / d3 - s[2] / s3)
        if p[P_CRAM] > 0.0:
            dx = r[0] - s[0]
            dy = r[1] - s[1]
            dz = r[2] - s[2]
            d = math.sqrt(dx * dx + dy * dy + dz * dz)
            # m/s^2 -> km/s^2
            k = P_SOLAR * p[P_CRAM] * (AU_KM / d) ** 2 * 1e-3
            out[0] += k * dx / d
            out[1] += k * dy / d
            out[2] += k * dz / d
    if p[P_MOON] > 0.5:
        s = moon_position(jd)
        dx = s[0] - r[0]
        dy = s[1] - r[1]
        dz = s[2] - r[2]
        d3 = (dx * dx + dy * dy + dz * dz) ** 1.5
        s3 = (s[0] * s[0] + s[1] * s[1] + s[2] * s[2]) ** 1.5
        out[0] += MU_MOON * (dx / d3 - s[0] / s3)
        out[1] += MU_MOON * (dy / d3 - s[1] / s3)
        out[2] += MU_MOON * (dz / d3 - s[2] / s3)
    if p[P_CDAM] > 0.0:
        w = p[P_OMEGA]
        vx = y[3] + w * r[1]
        vy = y[4] - w * r[0]
        vz = y[5]
        vr = math.sqrt(vx * vx + vy * vy + vz * vz)
        h = math.sqrt(r[0] * r[0] + r[1] * r[1] + r[2] * r[2]) - p[P_RE]
        rho = p[P_RHO0] * math.exp(-(h - p[P_H0]) / p[P_HSCALE])
        # rho [kg/m^3], v in km/s: a = -0.5 rho CdA/m |v| v * 1e3 [km/s^2]
        k = -0.5 * rho * p[P_CDAM] * vr * 1e3
        out[0] += k * vx
        out[1] += k * vy
        out[2] += k * vz


@njit(cache=True)
def _deriv(t, y, thrust, p, C, S, dy):
    a = np.empty(3)
    total_accel(t, y, p, C, S, a)
    if thrust[0] != 0.0 or thrust[1] != 0.0 or thrust[2] != 0.0:
        if p[P_RIC] > 0.5:
            rx, ry, rz = y[0], y[1], y[2]
            vx, vy, vz = y[3], y[4], y[5]
            rn = math.sqrt(rx * rx + ry * ry + rz * rz)
            Rx, Ry, Rz = rx / rn, ry / rn, rz / rn
            hx = ry * vz - rz * vy
            hy = rz * vx - rx * vz
            hz = rx * vy - ry * vx
            hn = math.sqrt(hx * hx + hy * hy + hz * hz)
            Cx, Cy, Cz = hx / hn, hy / hn, hz / hn
            Ix = Cy * Rz - Cz * Ry
            Iy = Cz * Rx - Cx * Rz
            Iz = Cx * Ry - Cy * Rx
            a[0] += Rx * thrust[0] + Ix * thrust[1] + Cx * thrust[2]
            a[1] += Ry * thrust[0] + Iy * thrust[1] + Cy * thrust[2]
            a[2] += Rz * thrust[0] + Iz * thrust[1] + Cz * thrust[2]
        else:
            a[0] += thrust[0]
            a[1] += thrust[1]
            a[2] += thrust[2]
    dy[0] = y[3]
    dy[1] = y[4]
    dy[2] = y[5]
    dy[3] = a[0]
    dy[4] = a[1]
    dy[5] = a[2]


@njit(cache=True)
def integrate_ensemble(Y0, t0, stops, seg_index, acc, p, C, S, rtol, atol, h_init):
    """Shared-step DOP853 over an ensemble.

    Parameters
    ----------
    Y0 : (n, 6) initial states at ``t0``.
    stops : (k,) strictly increasing epochs > t0; the integrator lands on each.
    seg_index : (k,) thrust segment active on (stops[j-1], stops[j]), -1 for none.
    acc : (n, nseg, 3) thrust accelerations per particle and segment.

    Returns (out (n, k, 6), status (n,), n_steps).
    """
    n = Y0.shape[0]
    k = stops.shape[0]
    out = np.empty((n, k, 6))
    status = np.zeros(n, dtype=np.int64)
    y = Y0.copy()
    K = np.empty((_N_STAGES + 1, n, 6))
    ytmp = np.empty(6)
    dy = np.empty(6)
    f = np.empty((n, 6))
    ynew = np.empty((n, 6))
    thrust = np.zeros(3)
    zero3 = np.zeros(3)
    impact_r2 = p[P_IMPACT] * p[P_IMPACT]
    t = t0
    h_abs = h_init
    n_steps = 0
    for j in range(k):
        t_stop = stops[j]
        sj = seg_index[j]
        for i in range(n):
            if status[i] != STATUS_OK:
                continue
            if sj >= 0:
                for q in range(3):
                    thrust[q] = acc[i, sj, q]
            else:
                thrust[:] = zero3
            _deriv(t, y[i], thrust, p, C, S, dy)
            f[i] = dy
        while t < t_stop:
            min_step = 10.0 * (np.nextafter(t, np.inf) - t)
            if h_abs < min_step:
                h_abs = min_step
            accepted = False
            rejected = False
            while not accepted:
                if h_abs < min_step:
                    for i in range(n):
                        if status[i] == STATUS_OK:
                            status[i] = STATUS_UNDERFLOW
                    break
                h_want = h_abs
                t_new = t + h_want
                clipped = False
                if t_new >= t_stop:
                    t_new = t_stop
                    clipped = True
                h = t_new - t
                h_abs = h
                err_max = 0.0
                for i in range(n):
                    if status[i] != STATUS_OK:
                        continue
                    if sj >= 0:
                        for q in range(3):
                            thrust[q] = acc[i, sj, q]
                    else:
                        thrust[:] = zero3
                    K[0, i] = f[i]
                    for s in range(1, _N_STAGES):
                        for q in range(6):
                            acc_s = 0.0
                            for m in range(s):
                                acc_s += _A[s, m] * K[m, i, q]
                            ytmp[q] = y[i, q] + h * acc_s
                        _deriv(t + _C[s] * h, ytmp, thrust, p, C, S, dy)
                        K[s, i] = dy
                    for q in range(6):
                        acc_s = 0.0
                        for m in range(_N_STAGES):
                            acc_s += _B[m] * K[m, i, q]
                        ynew[i, q] = y[i, q] + h * acc_s
                    _deriv(t_new, ynew[i], thrust, p, C, S, dy)
                    K[_N_STAGES, i] = dy
                    e5 = 0.0
                    e3 = 0.0
                    for q in range(6):
                        sc = atol + max(abs(y[i, q]), abs(ynew[i, q])) * rtol
                        a5 = 0.0
                        a3 = 0.0
                        for m in range(_N_STAGES + 1):
                            a5 += _E5[m] * K[m, i, q]
                            a3 += _E3[m] * K[m, i, q]
                        a5 /= sc
                        a3 /= sc
                        e5 += a5 * a5
                        e3 += a3 * a3
                    if e5 == 0.0 and e3 == 0.0:
                        en = 0.0
                    else:
                        en = h * e5 / math.sqrt((e5 + 0.01 * e3) * 6.0)
                    if not (en == en):
                        en = 1e10
                    if en > err_max:
                        err_max = en
                if err_max < 1.0:
                    if err_max == 0.0:
                        factor = 10.0
                    else:
                        factor = min(10.0, 0.9 * err_max ** (-1.0 / 8.0))
                    if rejected:
                        factor = min(1.0, factor)
                    accepted = True
                    t = t_new
                    n_steps += 1
                    for i in range(n):
                        if status[i] != STATUS_OK:
                            continue
                        y[i] = ynew[i]
                        f[i] = K[_N_STAGES, i]
                        r2 = y[i, 0] ** 2 + y[i, 1] ** 2 + y[i, 2] ** 2
                        if r2 < impact_r2:
                            status[i] = STATUS_IMPACT
                    if clipped:
                        # landing on a stop shortens the step; do not let it shrink the next one
                        h_abs = max(h_want, h * factor) if not rejected else h * factor
                    else:
                        h_abs = h * factor
                else:
                    h_abs *= max(0.2, 0.9 * err_max ** (-1.0 / 8.0))
                    rejected = True
            if not accepted:
                break
        for i in range(n):
            out[i, j] = y[i]
    return out, status, n_steps
