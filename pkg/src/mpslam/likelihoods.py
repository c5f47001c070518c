"""Measurement densities for dispersed multipath components.

A reflective surface with roughness spreads one geometric path into a cloud
of sub-components whose delay offsets are uniform on [0, psi_tau] and whose
angle offsets are uniform on [-psi/2, psi/2]. Convolving those uniform
spreads with amplitude-dependent Gaussian estimation noise gives closed-form
erf (normal-CDF difference) densities. A detected component is modeled as an
equal-weight mixture of the exact geometric component and one dispersed
sub-component.

Measurement vectors are (z_tau [s], z_theta [rad], z_vartheta [rad],
z_u [normalized amplitude]); the amplitude enters only through the noise
standard deviations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .geometry import SPEED_OF_LIGHT, wrap_angle

# dispersion floor in reporting units (meters / radians); keeps Gamma
# transitions and erf denominators away from the degenerate point mass
PSI_FLOOR_M = 1e-6
PSI_FLOOR_RAD = 1e-6
PSI_FLOOR = np.array([PSI_FLOOR_M / SPEED_OF_LIGHT, PSI_FLOOR_RAD, PSI_FLOOR_RAD])


@dataclass(frozen=True)
class NoiseModel:
    """Amplitude-to-standard-deviation calibration of the measurement noise."""

    beta_bw: float  # root-mean-square signal bandwidth, Hz
    k_theta: float  # sigma_theta = k_theta / u, rad
    k_vartheta: float  # sigma_vartheta = k_vartheta / u, rad

    def __post_init__(self) -> None:
        if min(self.beta_bw, self.k_theta, self.k_vartheta) <= 0:
            raise ValueError("noise-model constants must be positive")


def default_noise_model(constants) -> NoiseModel:
    """Flat-spectrum rms bandwidth B/sqrt(12); angle noise 1 deg at the 1 m amplitude."""
    u_ref = 10.0 ** (constants.snr_1m_db / 20.0)
    k = u_ref * math.radians(1.0)
    return NoiseModel(beta_bw=constants.bandwidth_hz / math.sqrt(12.0), k_theta=k, k_vartheta=k)


def sigma_tau(u, noise: NoiseModel):
    """Delay noise standard deviation in seconds: 1/(sqrt(8) pi beta_bw u).

    Equivalently a range standard deviation of c/(sqrt(8) pi beta_bw u)
    meters; larger amplitude means a sharper delay estimate.
    """
    u = np.asarray(u, dtype=float)
    if np.any(u <= 0):
        raise ValueError("amplitude must be positive")
    return 1.0 / (math.sqrt(8.0) * math.pi * noise.beta_bw * u)


def sigma_angle(u, k):
    """Angle noise standard deviation in radians: k/u."""
    u = np.asarray(u, dtype=float)
    if np.any(u <= 0):
        raise ValueError("amplitude must be positive")
    return k / u


def _norm_cdf_diff(a, b):
    """Phi(a) - Phi(b) for a >= b, evaluated on the side with small magnitudes."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    flip = b > 0
    hi = np.where(flip, -b, a)
    lo = np.where(flip, -a, b)
    return ndtr(hi) - ndtr(lo)


def main_pdf(z, mean, sigma, angular: bool = False):
    """Gaussian density of a main component; angular=True wraps the residual."""
    z = np.asarray(z, dtype=float)
    d = wrap_angle(z - mean) if angular else z - mean
    sigma = np.asarray(sigma, dtype=float)
    return np.exp(-0.5 * (d / sigma) ** 2) / (math.sqrt(2.0 * math.pi) * sigma)


def dispersed_delay_pdf(z_tau, tau_geo, psi_tau, sig_tau):
    """Density of uniform-on-[tau_geo, tau_geo+psi_tau] offset plus Gaussian noise.

    Closed form (Phi((z-tau)/sigma) - Phi((z-tau-psi)/sigma)) / psi, the
    convolution of the one-sided uniform delay spread with the noise.
    """
    z = np.asarray(z_tau, dtype=float)
    sig = np.asarray(sig_tau, dtype=float)
    a = (z - tau_geo) / sig
    b = (z - tau_geo - psi_tau) / sig
    return _norm_cdf_diff(a, b) / psi_tau


def dispersed_angle_pdf(z, mean_geo, psi, sigma):
    """Density of uniform-on-[-psi/2, psi/2] angular offset plus Gaussian noise.

    Uses the wrapped residual; when psi + 6 sigma approaches a full circle the
    neighbouring wrap images are summed explicitly.
    """
    z = np.asarray(z, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    d = wrap_angle(z - mean_geo)
    half = 0.5 * psi
    dens = _norm_cdf_diff((d + half) / sigma, (d - half) / sigma) / psi
    wide = psi + 6.0 * np.asarray(sigma) >= 2.0 * math.pi
    if np.any(wide):
        for shift in (-2.0 * math.pi, 2.0 * math.pi):
            ds = d + shift
            dens = np.where(
                wide,
                dens + _norm_cdf_diff((ds + half) / sigma, (ds - half) / sigma) / psi,
                dens,
            )
    return dens


def _aod_mean_virtual(p_agent, p_feat, p_pa):
    """Departure bearing for a mirror-image feature hypothesis.

    The mirror line is the perpendicular bisector between the physical anchor
    and the hypothesized image position; the bearing runs from the physical
    anchor to the bounce point on that line.
    """
    diff = p_pa - p_feat
    dist = np.hypot(diff[0], diff[1])
    if dist < 1e-12:
        return None
    u = diff / dist
    den = 2.0 * np.dot(p_agent - p_feat, u)
    if abs(den) < 1e-12:
        return None
    q = p_feat + (dist / den) * (p_agent - p_feat)
    return math.atan2(q[1] - p_pa[1], q[0] - p_pa[0])


def geometric_means(p_agent, v_agent, p_feat, p_pa, is_pa_feature: bool):
    """(tau, theta, vartheta) of the exact geometric component, or None if degenerate."""
    p_agent = np.asarray(p_agent, dtype=float)
    p_feat = np.asarray(p_feat, dtype=float)
    p_pa = np.asarray(p_pa, dtype=float)
    d = p_feat - p_agent
    tau = np.hypot(d[0], d[1]) / SPEED_OF_LIGHT
    kappa = math.atan2(v_agent[1], v_agent[0])
    theta = wrap_angle(math.atan2(d[1], d[0]) - kappa)
    if is_pa_feature:
        vartheta = math.atan2(p_agent[1] - p_pa[1], p_agent[0] - p_pa[0])
    else:
        vartheta = _aod_mean_virtual(p_agent, p_feat, p_pa)
        if vartheta is None:
            return None
    return float(tau), float(theta), float(vartheta)


def feature_likelihood(z, p_agent, v_agent, p_feat, psi, p_pa, is_pa_feature, noise: NoiseModel):
    """Scalar mixture density of one measurement under one feature hypothesis.

    Half weight on the exact geometric component, half on a dispersed
    sub-component; psi = (psi_tau [s], psi_theta [rad], psi_vartheta [rad])
    floored by the caller. Reference implementation; batch evaluation lives
    in mpslam._kernels.
    """
    z_tau, z_theta, z_vartheta, z_u = (float(v) for v in np.asarray(z, dtype=float)[:4])
    means = geometric_means(p_agent, v_agent, p_feat, p_pa, is_pa_feature)
    if means is None:
        return 0.0
    tau, theta, vartheta = means
    st = float(sigma_tau(z_u, noise))
    sth = float(sigma_angle(z_u, noise.k_theta))
    svt = float(sigma_angle(z_u, noise.k_vartheta))
    main = (
        main_pdf(z_tau, tau, st)
        * main_pdf(z_theta, theta, sth, angular=True)
        * main_pdf(z_vartheta, vartheta, svt, angular=True)
    )
    sub = (
        dispersed_delay_pdf(z_tau, tau, psi[0], st)
        * dispersed_angle_pdf(z_theta, theta, psi[1], sth)
        * dispersed_angle_pdf(z_vartheta, vartheta, psi[2], svt)
    )
    return float(0.5 * main + 0.5 * sub)


def mean_measurements(psi, constants):
    """Expected number of detected measurements a feature generates per step.

    (1 + N_tau B psi_tau + psi_theta/N_theta + psi_vartheta/N_vartheta) p_d,
    i.e. one main component plus spread-proportional sub-components, thinned
    by the detection probability. psi_tau in seconds (N_tau B psi_tau equals
    the delay spread in distance units over the delay resolution c/B).
    """
    psi = np.asarray(psi, dtype=float)
    spread = (
        constants.n_ny_tau * constants.bandwidth_hz * psi[..., 0]
        + psi[..., 1] / constants.n_ny_theta
        + psi[..., 2] / constants.n_ny_vartheta
    )
    return (1.0 + spread) * constants.p_d


def fp_base_density(constants) -> float:
    """Uniform (tau, theta, vartheta) density of a false positive."""
    return 1.0 / (constants.tau_max_s * (2.0 * math.pi) ** 2)


def false_positive_pdf(z, constants):
    """Full false-positive density including the amplitude law gamma_det + Exp(1)."""
    z = np.asarray(z, dtype=float)
    z_tau, z_u = z[..., 0], z[..., 3]
    in_range = (z_tau >= 0.0) & (z_tau <= constants.tau_max_s) & (z_u >= constants.gamma_det)
    amp = np.exp(-(z_u - constants.gamma_det))
    return np.where(in_range, fp_base_density(constants) * amp, 0.0)
