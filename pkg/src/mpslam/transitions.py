"""State-evolution models: agent constant-velocity dynamics, feature
survival, mean-preserving Gamma dispersion dynamics, and the birth prior."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import SPEED_OF_LIGHT
from .likelihoods import PSI_FLOOR


@dataclass(frozen=True)
class TransitionParams:
    """Process-model constants shared by the generator and the filter."""

    sigma_w: float = 0.05  # driving acceleration std, m/s^2
    q_tau: float = 1e4  # Gamma shape of the delay-spread dynamics
    q_theta: float = 1e4
    q_vartheta: float = 1e4
    p_s: float = 0.999  # per-step survival probability
    mu_n: float = 0.01  # mean number of newly appearing features per step
    birth_lo: float = -15.0  # axis-aligned square birth region, m
    birth_hi: float = 15.0
    sigma_a: float = 1e-3  # per-step position regularization std, m
    psi_birth_max: tuple = (2.0 / SPEED_OF_LIGHT, math.radians(20.0), math.radians(20.0))

    def __post_init__(self) -> None:
        if min(self.q_tau, self.q_theta, self.q_vartheta) <= 0:
            raise ValueError("Gamma shapes must be positive")
        if not 0.0 < self.p_s <= 1.0:
            raise ValueError("survival probability must be in (0, 1]")
        if self.birth_hi < self.birth_lo:
            raise ValueError("birth region is inverted")

    @property
    def q_vector(self) -> np.ndarray:
        return np.array([self.q_tau, self.q_theta, self.q_vartheta])

    @property
    def birth_area(self) -> float:
        return (self.birth_hi - self.birth_lo) ** 2


def cv_matrices(dt: float) -> tuple[np.ndarray, np.ndarray]:
    """State matrix A and noise-input matrix B of the discretized
    constant-velocity model with stochastic acceleration."""
    eye = np.eye(2)
    a = np.block([[eye, dt * eye], [np.zeros((2, 2)), eye]])
    b = np.vstack([0.5 * dt * dt * eye, dt * eye])
    return a, b


def agent_transition_sample(x, dt: float, sigma_w: float, rng) -> np.ndarray:
    """Propagate agent states [p; v] one step; x may be (4,) or (n, 4)."""
    x = np.asarray(x, dtype=float)
    a, b = cv_matrices(dt)
    out = x @ a.T
    if sigma_w > 0.0:
        w = rng.normal(scale=sigma_w, size=x.shape[:-1] + (2,))
        out = out + w @ b.T
    return out


def dispersion_transition_sample(psi, q, rng) -> np.ndarray:
    """Mean-preserving Gamma step: draw Gamma(shape q, scale psi/q).

    psi is floored componentwise first; a zero spread would make the Gamma a
    frozen point mass at zero. Broadcasts over leading axes of psi.
    """
    psi = np.maximum(np.asarray(psi, dtype=float), PSI_FLOOR)
    q = np.asarray(q, dtype=float)
    return rng.gamma(shape=np.broadcast_to(q, psi.shape), scale=psi / q)


def survival_split(existence: float, p_s: float) -> tuple[float, float]:
    """Prior mass reaching the survived branch and the nonexistent branch.

    Nonexistence is absorbing: a feature that does not exist cannot re-enter,
    so the dead branch collects both the never-existed and the dying mass.
    """
    return p_s * existence, (1.0 - existence) + (1.0 - p_s) * existence


def birth_prior_sample(params: TransitionParams, rng, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Positions uniform on the birth square, spreads uniform on [0, psi_max]."""
    pos = rng.uniform(params.birth_lo, params.birth_hi, size=(n, 2))
    psi = rng.uniform(0.0, 1.0, size=(n, 3)) * np.asarray(params.psi_birth_max)
    return pos, np.maximum(psi, PSI_FLOOR)


def birth_position_density(params: TransitionParams) -> float:
    """Uniform birth density over the square, per square meter."""
    return 1.0 / params.birth_area


def regularize_position(p, sigma_a: float, rng) -> np.ndarray:
    """Add zero-mean isotropic Gaussian jitter to feature positions."""
    p = np.asarray(p, dtype=float)
    if sigma_a <= 0.0:
        return p
    return p + rng.normal(scale=sigma_a, size=p.shape)
