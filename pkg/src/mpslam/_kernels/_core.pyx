# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled implementation of the pairwise likelihood kernel.

Mirrors mpslam._kernels._fallback.eval_loglik; see that module for the
contract. Kept in lockstep with the numpy version, enforced by a parity test.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY, M_PI, atan2, erfc, exp, fabs, fmod, hypot, log, sqrt

cnp.import_array()

cdef double C_LIGHT = 299792458.0
cdef double LOG_SQRT_2PI = 0.9189385332046727
cdef double INV_SQRT2 = 0.7071067811865476
cdef double GATE_SIGMAS = 10.0
cdef double LOG_2 = 0.6931471805599453


cdef inline double _wrap(double a) nogil:
    cdef double r = fmod(M_PI - a, 2.0 * M_PI)
    if r < 0.0:
        r += 2.0 * M_PI
    return M_PI - r


cdef inline double _ndtr(double x) nogil:
    return 0.5 * erfc(-x * INV_SQRT2)


cdef inline double _cdf_diff(double a, double b) nogil:
    if b > 0.0:
        return _ndtr(-b) - _ndtr(-a)
    return _ndtr(a) - _ndtr(b)


cdef inline double _logaddexp(double a, double b) nogil:
    cdef double m
    if a == -INFINITY:
        return b
    if b == -INFINITY:
        return a
    m = a if a > b else b
    return m + log(exp(a - m) + exp(b - m))


def eval_loglik(
    agent_pos,
    agent_vel,
    feat_pos,
    psi,
    pa_pos,
    is_pa,
    z,
    double beta_bw,
    double k_theta,
    double k_vartheta,
    log_mu,
    double log_fp_norm,
    double gate_slack_m,
):
    """Log likelihood-ratio matrix, shape (particles, measurements)."""
    cdef double[:, ::1] ap = np.ascontiguousarray(agent_pos, dtype=np.float64)
    cdef double[:, ::1] av = np.ascontiguousarray(agent_vel, dtype=np.float64)
    cdef double[:, ::1] fp = np.ascontiguousarray(feat_pos, dtype=np.float64)
    cdef double[:, ::1] ps = np.ascontiguousarray(psi, dtype=np.float64)
    cdef double[::1] pa = np.ascontiguousarray(pa_pos, dtype=np.float64)
    cdef double[:, ::1] zz = np.ascontiguousarray(np.atleast_2d(z), dtype=np.float64)
    cdef double[::1] lmu = np.ascontiguousarray(log_mu, dtype=np.float64)
    cdef bint pa_feature = bool(is_pa)

    cdef Py_ssize_t n = ps.shape[0]
    cdef Py_ssize_t m = zz.shape[0]
    out_arr = np.full((n, m), -INFINITY)
    cdef double[:, ::1] out = out_arr
    if n == 0 or m == 0:
        return out_arr

    tau_arr = np.empty(n)
    theta_arr = np.empty(n)
    vt_arr = np.empty(n)
    valid_arr = np.zeros(n, dtype=np.uint8)
    cdef double[::1] tau = tau_arr
    cdef double[::1] theta = theta_arr
    cdef double[::1] vt = vt_arr
    cdef unsigned char[::1] valid = valid_arr

    cdef Py_ssize_t i, j
    cdef double dx, dy, dist, ux, uy, sep, den, scale, qx, qy
    cdef double z_tau, z_theta, z_vt, z_u, sig_t, sig_th, sig_vt
    cdef double dt, dth, dvt, guard, slack_s, log_main, sub, log_sub
    cdef double pt, pth, pvt

    slack_s = gate_slack_m / C_LIGHT

    for i in range(n):
        dx = fp[i, 0] - ap[i, 0]
        dy = fp[i, 1] - ap[i, 1]
        dist = hypot(dx, dy)
        tau[i] = dist / C_LIGHT
        theta[i] = _wrap(atan2(dy, dx) - atan2(av[i, 1], av[i, 0]))
        if pa_feature:
            vt[i] = atan2(ap[i, 1] - pa[1], ap[i, 0] - pa[0])
            valid[i] = 1
        else:
            ux = pa[0] - fp[i, 0]
            uy = pa[1] - fp[i, 1]
            sep = hypot(ux, uy)
            if sep <= 1e-12:
                continue
            ux /= sep
            uy /= sep
            dx = ap[i, 0] - fp[i, 0]
            dy = ap[i, 1] - fp[i, 1]
            den = 2.0 * (dx * ux + dy * uy)
            if fabs(den) <= 1e-12:
                continue
            scale = sep / den
            qx = fp[i, 0] + scale * dx
            qy = fp[i, 1] + scale * dy
            vt[i] = atan2(qy - pa[1], qx - pa[0])
            valid[i] = 1

    for j in range(m):
        z_tau = zz[j, 0]
        z_theta = zz[j, 1]
        z_vt = zz[j, 2]
        z_u = zz[j, 3]
        sig_t = 1.0 / (sqrt(8.0) * M_PI * beta_bw * z_u)
        sig_th = k_theta / z_u
        sig_vt = k_vartheta / z_u
        guard = GATE_SIGMAS * sig_t + slack_s
        for i in range(n):
            if not valid[i]:
                continue
            dt = z_tau - tau[i]
            pt = ps[i, 0]
            if dt < -guard or dt > pt + guard:
                continue
            pth = ps[i, 1]
            pvt = ps[i, 2]
            dth = _wrap(z_theta - theta[i])
            dvt = _wrap(z_vt - vt[i])
            log_main = (
                -0.5 * ((dt / sig_t) ** 2 + (dth / sig_th) ** 2 + (dvt / sig_vt) ** 2)
                - 3.0 * LOG_SQRT_2PI
                - log(sig_t)
                - log(sig_th)
                - log(sig_vt)
            )
            sub = (
                _cdf_diff(dt / sig_t, (dt - pt) / sig_t) / pt
                * (_cdf_diff((dth + 0.5 * pth) / sig_th, (dth - 0.5 * pth) / sig_th) / pth)
                * (_cdf_diff((dvt + 0.5 * pvt) / sig_vt, (dvt - 0.5 * pvt) / sig_vt) / pvt)
            )
            log_sub = log(sub) if sub > 0.0 else -INFINITY
            out[i, j] = lmu[i] + _logaddexp(log_main, log_sub) - LOG_2 - log_fp_norm
    return out_arr
