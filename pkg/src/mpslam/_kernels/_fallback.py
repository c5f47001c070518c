"""Numpy implementation of the hot likelihood-ratio kernel.

Evaluates, for every (agent particle, feature particle) pair and every
measurement, the log of mu(psi) * f(z | pair) / (mu_fp * f_fp): the mixture
of the exact geometric component and the erf-form dispersed component,
normalized by the false-positive density. Pairs whose delay residual falls
outside the dispersion interval plus a 10-sigma guard band are exact zeros
(log -inf); the guard keeps sums over hypotheses unchanged to well below
arithmetic precision while skipping most of the erf work.

The compiled backend (mpslam._kernels._core) implements the same contract.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import ndtr

SPEED_OF_LIGHT = 299792458.0
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
_GATE_SIGMAS = 10.0


def _wrap(a):
    return np.pi - np.mod(np.pi - a, 2.0 * np.pi)


def _cdf_diff(a, b):
    """Phi(a) - Phi(b), a >= b, evaluated on the small-magnitude side."""
    flip = b > 0
    hi = np.where(flip, -b, a)
    lo = np.where(flip, -a, b)
    return ndtr(hi) - ndtr(lo)


def pair_geometry(agent_pos, agent_vel, feat_pos, pa_pos, is_pa):
    """Per-pair geometric (tau, theta, vartheta) means and validity mask."""
    agent_pos = np.ascontiguousarray(agent_pos, dtype=float)
    agent_vel = np.ascontiguousarray(agent_vel, dtype=float)
    feat_pos = np.ascontiguousarray(feat_pos, dtype=float)
    pa = np.asarray(pa_pos, dtype=float)

    d = feat_pos - agent_pos
    dist = np.hypot(d[:, 0], d[:, 1])
    tau = dist / SPEED_OF_LIGHT
    kappa = np.arctan2(agent_vel[:, 1], agent_vel[:, 0])
    theta = _wrap(np.arctan2(d[:, 1], d[:, 0]) - kappa)

    valid = np.ones(len(agent_pos), dtype=bool)
    if is_pa:
        rel = agent_pos - pa
        vartheta = np.arctan2(rel[:, 1], rel[:, 0])
    else:
        diff = pa - feat_pos
        sep = np.hypot(diff[:, 0], diff[:, 1])
        ok = sep > 1e-12
        u = np.where(ok[:, None], diff / np.maximum(sep, 1e-300)[:, None], 0.0)
        rel = agent_pos - feat_pos
        den = 2.0 * (rel[:, 0] * u[:, 0] + rel[:, 1] * u[:, 1])
        ok &= np.abs(den) > 1e-12
        scale = np.where(ok, sep / np.where(ok, den, 1.0), 0.0)
        q = feat_pos + scale[:, None] * rel
        vartheta = np.arctan2(q[:, 1] - pa[1], q[:, 0] - pa[0])
        valid = ok
    return tau, theta, vartheta, valid


def eval_loglik(
    agent_pos,
    agent_vel,
    feat_pos,
    psi,
    pa_pos,
    is_pa,
    z,
    beta_bw,
    k_theta,
    k_vartheta,
    log_mu,
    log_fp_norm,
    gate_slack_m,
):
    """Log likelihood-ratio matrix, shape (particles, measurements)."""
    psi = np.ascontiguousarray(psi, dtype=float)
    z = np.atleast_2d(np.asarray(z, dtype=float))
    log_mu = np.asarray(log_mu, dtype=float)
    n = len(psi)
    m = len(z)
    out = np.full((n, m), -np.inf)
    if m == 0 or n == 0:
        return out

    tau, theta, vartheta, valid = pair_geometry(agent_pos, agent_vel, feat_pos, pa_pos, is_pa)
    psi_t, psi_th, psi_vt = psi[:, 0], psi[:, 1], psi[:, 2]
    slack_s = gate_slack_m / SPEED_OF_LIGHT

    for j in range(m):
        z_tau, z_theta, z_vartheta, z_u = z[j]
        sig_t = 1.0 / (math.sqrt(8.0) * math.pi * beta_bw * z_u)
        sig_th = k_theta / z_u
        sig_vt = k_vartheta / z_u

        dt = z_tau - tau
        guard = _GATE_SIGMAS * sig_t + slack_s
        live = valid & (dt >= -guard) & (dt <= psi_t + guard)
        if not np.any(live):
            continue
        idx = np.nonzero(live)[0]

        dti = dt[idx]
        dthi = _wrap(z_theta - theta[idx])
        dvti = _wrap(z_vartheta - vartheta[idx])
        pt, pth, pvt = psi_t[idx], psi_th[idx], psi_vt[idx]

        log_main = (
            -0.5 * ((dti / sig_t) ** 2 + (dthi / sig_th) ** 2 + (dvti / sig_vt) ** 2)
            - 3.0 * _LOG_SQRT_2PI
            - math.log(sig_t)
            - math.log(sig_th)
            - math.log(sig_vt)
        )
        sub = (
            _cdf_diff(dti / sig_t, (dti - pt) / sig_t) / pt
            * (_cdf_diff((dthi + 0.5 * pth) / sig_th, (dthi - 0.5 * pth) / sig_th) / pth)
            * (_cdf_diff((dvti + 0.5 * pvt) / sig_vt, (dvti - 0.5 * pvt) / sig_vt) / pvt)
        )
        with np.errstate(divide="ignore"):
            log_sub = np.log(sub)
        out[idx, j] = log_mu[idx] + np.logaddexp(log_main, log_sub) - math.log(2.0) - log_fp_norm
    return out
