"""Particle-based sum-product filter over the agent state and mirror-image
features.

The filter keeps one weighted particle set for the agent and one per
feature, with particle i of every set treated as a joint draw from the
product of the beliefs. Each step predicts all beliefs forward, exchanges
scalar association messages between feature hypotheses and measurements
for a fixed number of iterations, and then updates existence
probabilities, feature weights, and agent weights in closed form. Every
measurement also spawns a candidate new feature whose particles come from
a mixture of the uniform birth prior and an inversion of the measured
delay and departure angle around each agent particle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp as _scipy_logsumexp

from ._kernels import eval_loglik
from .geometry import SPEED_OF_LIGHT
from .likelihoods import (
    PSI_FLOOR,
    default_noise_model,
    fp_base_density,
    mean_measurements,
    sigma_angle,
    sigma_tau,
)
from .transitions import (
    TransitionParams,
    agent_transition_sample,
    birth_position_density,
    birth_prior_sample,
    dispersion_transition_sample,
    regularize_position,
    survival_split,
)
from .world import ModelConstants

# Linear-domain ratios are capped so the association sums stay finite; the
# cap sits far above any ratio that can influence a normalized marginal.
_LOG_RATIO_CAP = 650.0
_INIT_POS_HALF = 0.1  # half-width of the uniform initial position cube, m
_INIT_VEL_HALF = 0.5  # half-width of the uniform initial velocity cube, m/s
_PROP_RADIAL_SIGMAS = 1.5
_PROP_TANGENT_SIGMAS = 2.0
_PSI_REDRAW_CANDIDATES = 16
_PSI_SHRINKAGE = 0.98


@dataclass(frozen=True)
class EngineParams:
    """Knobs of the inference loop (model constants live elsewhere)."""

    n_particles: int = 10000
    mp_iterations: int = 3  # message-passing sweeps per step
    da_max_iterations: int = 200
    da_tolerance: float = 1e-6
    p_prune: float = 1e-3  # existence threshold for mature features
    birth_grace: int = 10  # steps a newborn is shielded from p_prune
    existence_floor: float = 1e-3  # promotion bar and hard prune floor at any age
    gate_slack_m: float = 6.0  # extra delay-gate width, meters
    pa_dispersion: str = "unknown"  # "known" pins the anchor dispersion

    def __post_init__(self) -> None:
        if self.n_particles < 1:
            raise ValueError("need at least one particle")
        if self.mp_iterations < 1:
            raise ValueError("need at least one message-passing iteration")
        if self.da_max_iterations < 1:
            raise ValueError("need at least one association iteration")
        if not 0.0 < self.p_prune < 1.0:
            raise ValueError("prune threshold must be in (0, 1)")
        if not 0.0 < self.existence_floor <= self.p_prune:
            raise ValueError("existence floor must be in (0, p_prune]")
        if self.birth_grace < 0:
            raise ValueError("grace window cannot be negative")
        if self.pa_dispersion not in ("known", "unknown"):
            raise ValueError("pa_dispersion must be 'known' or 'unknown'")


@dataclass
class AgentBelief:
    x: np.ndarray  # (n, 4) position and velocity particles
    logw: np.ndarray  # (n,) normalized log weights


@dataclass
class PvaBelief:
    """Feature belief with separately weighted position and dispersion axes.

    logw weighs the (pos, psi) pairs for the association and existence
    integrals and drives position resampling. The dispersion triples carry
    their own accumulator logw_psi: per-frame dispersion evidence is a
    fraction of a nat while position evidence is many nats, so letting psi
    ride the joint resample replaces its posterior with selection noise.
    Between dispersion resamples the psi columns stay in place and
    logw_psi integrates the evidence until it is worth selecting on.
    """

    pos: np.ndarray  # (n, 2)
    psi: np.ndarray  # (n, 3) dispersion extents, native units (s, rad, rad)
    logw: np.ndarray  # (n,) normalized log weights
    existence: float
    logw_psi: np.ndarray | None = None  # (n,) dispersion weights; None if pinned


@dataclass
class TrackedFeature:
    label: str
    belief: PvaBelief
    is_pa: bool = False
    birth_step: int = 0
    psi_fixed: bool = False


@dataclass
class StepDiagnostics:
    time_index: int
    measurement_count: int = 0
    features_before_prune: int = 0
    promoted: int = 0
    pruned: int = 0
    da_converged: bool = True
    agent_divergence: bool = False
    underflow_labels: list = field(default_factory=list)


@dataclass
class LegacyWork:
    """Per-feature quantities fixed across the message iterations."""

    a1: float  # survived-and-undetected existence mass
    a0: float  # nonexistence mass
    log_w_pred: np.ndarray  # (n,) predicted feature weights
    log_pair: np.ndarray  # (n,) normalized agent-feature pair weights
    logc: np.ndarray  # (n, m) log likelihood ratios
    feature: TrackedFeature | None = None
    mu: np.ndarray | None = None  # (n,) expected measurement counts


@dataclass
class NewWork:
    """Candidate feature spawned by measurement m."""

    m: int
    logv1: np.ndarray  # (n,) birth weight x survival x own-measurement ratio
    logc: np.ndarray  # (n, m_total); only columns before m are consulted
    pos: np.ndarray | None = None
    psi: np.ndarray | None = None


@dataclass
class MessageResult:
    kappa: np.ndarray  # (hypotheses, measurements) association messages
    ratios: np.ndarray  # matching association ratios; nonassociation is 1
    totals: np.ndarray  # (measurements,) normalization totals
    converged: bool


def _log(x: float) -> float:
    return math.log(x) if x > 0.0 else -np.inf


def logsumexp(a, axis=None):
    """Max-shifted log-sum-exp without the scipy dispatch overhead."""
    a = np.asarray(a, dtype=float)
    if a.size == 0:
        return _scipy_logsumexp(a, axis=axis)
    hi = np.max(a, axis=axis, keepdims=True)
    shift = np.where(np.isfinite(hi), hi, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - shift), axis=axis)) + np.squeeze(shift, axis=axis)
    return float(out) if axis is None else out


def _exp_clip(x):
    return np.exp(np.minimum(x, _LOG_RATIO_CAP))


def _normalize_logw(logw) -> tuple[np.ndarray, bool]:
    """Shift log weights to sum to one; uniform fallback on total underflow."""
    logw = np.asarray(logw, dtype=float)
    total = logsumexp(logw)
    if not np.isfinite(total):
        return np.full(logw.size, -math.log(logw.size)), False
    return logw - total, True


def _ess(logw) -> float:
    return float(np.exp(-logsumexp(2.0 * np.asarray(logw))))


def _systematic_indices(logw, rng) -> np.ndarray:
    w = np.exp(logw - np.max(logw))
    w /= w.sum()
    n = w.size
    u = (rng.random() + np.arange(n)) / n
    return np.minimum(np.searchsorted(np.cumsum(w), u), n - 1)


def _shrink_resample_psi(psi, logw, idx, hi, rng) -> np.ndarray:
    """Kernel-smoothed resampling for the quasi-static dispersion triples.

    Plain index selection impoverishes a nearly static parameter: weight
    noise that carries no dispersion information still removes support,
    and the tiny transition kernel cannot rebuild it. Shrinking survivors
    toward the weighted mean and re-injecting the variance the shrinkage
    removed keeps the first two weighted moments while refreshing support.
    Samples are clipped to the birth box so kernel noise cannot push the
    cloud outside the supported spread range.
    """
    w = np.exp(logw - np.max(logw))
    w /= w.sum()
    mean = np.average(psi, axis=0, weights=w)
    var = np.average((psi - mean) ** 2, axis=0, weights=w)
    a = _PSI_SHRINKAGE
    noise = rng.standard_normal(psi.shape) * np.sqrt((1.0 - a * a) * var)
    return np.clip(a * psi[idx] + (1.0 - a) * mean + noise, PSI_FLOOR, hi)


def extrinsic_log_loo(log_gamma: np.ndarray) -> np.ndarray:
    """Leave-one-out sums of per-measurement log association factors."""
    return log_gamma.sum(axis=1, keepdims=True) - log_gamma


def associate(ratios, mask, max_iterations: int = 200, tolerance: float = 1e-6):
    """Scalar association messages from the hypothesis-ratio matrix.

    Iterates kappa[h, l] = 1 / (1 + sum of the other ratios in column l)
    to a fixed point; with the nonassociation entry pinned at 1 the totals
    depend only on the ratios, so the sweep settles immediately, but the
    loop and tolerance keep the convergence contract explicit.
    """
    ratios = np.where(mask, ratios, 0.0)
    totals = 1.0 + ratios.sum(axis=0)
    kappa = np.zeros_like(ratios)
    converged = ratios.size == 0
    for _ in range(max_iterations):
        totals = 1.0 + ratios.sum(axis=0)
        updated = np.where(mask, 1.0 / (totals[None, :] - ratios), 0.0)
        delta = float(np.max(np.abs(updated - kappa))) if kappa.size else 0.0
        kappa = updated
        if delta <= tolerance:
            converged = True
            break
    return kappa, totals, converged


def _log_gamma(kappa_row, logc):
    """log(1 + kappa * ratio) per particle and measurement."""
    with np.errstate(divide="ignore"):
        logk = np.log(kappa_row)
    return np.logaddexp(0.0, logk[None, :] + logc)


def _legacy_ratios(work: LegacyWork, kappa_row) -> np.ndarray:
    if work.a1 <= 0.0 or work.logc.shape[1] == 0:
        return np.zeros(work.logc.shape[1])
    lg = _log_gamma(kappa_row, work.logc)
    base = work.log_pair[:, None] + extrinsic_log_loo(lg)
    log_num = _log(work.a1) + logsumexp(base + work.logc, axis=0)
    log_den = np.logaddexp(_log(work.a1) + logsumexp(base, axis=0), _log(work.a0))
    return np.where(np.isfinite(log_den), _exp_clip(log_num - log_den), 0.0)


def _new_ratios(nw: NewWork, kappa_row, logw_agent) -> np.ndarray:
    m = nw.m
    out = np.zeros(nw.logc.shape[1])
    if m > 0:
        lg_u = _log_gamma(kappa_row[:m], nw.logc[:, :m])
    else:
        lg_u = np.zeros((nw.logv1.size, 0))
    sum_u = lg_u.sum(axis=1)
    out[m] = float(_exp_clip(logsumexp(logw_agent + sum_u + nw.logv1)))
    if m > 0:
        with np.errstate(divide="ignore"):
            log_gv = np.log(kappa_row[m]) + nw.logv1
        base = logw_agent[:, None] + sum_u[:, None] - lg_u + log_gv[:, None]
        s = _exp_clip(logsumexp(base, axis=0))
        sq = _exp_clip(logsumexp(base + nw.logc[:, :m], axis=0))
        out[:m] = sq / (s + 1.0)
    return out


def message_iterations(
    legacy,
    new,
    logw_agent,
    n_measurements: int,
    n_iterations: int,
    da_max_iterations: int = 200,
    da_tolerance: float = 1e-6,
) -> MessageResult:
    """Alternate ratio evaluation and association for a fixed sweep count.

    The first sweep sees zero messages, so a birth row starts with only
    its own-measurement entry; its earlier-column entries activate from
    the second sweep on. Every later sweep rebuilds the ratios from the
    previous sweep's messages. Rows of the result stack the legacy
    hypotheses, then the per-measurement birth hypotheses, whose row only
    reaches measurements up to its own.
    """
    k_count = len(legacy)
    h_count = k_count + len(new)
    mask = np.zeros((h_count, n_measurements), dtype=bool)
    mask[:k_count] = True
    for j, nw in enumerate(new):
        mask[k_count + j, : nw.m + 1] = True
    kappa = np.zeros((h_count, n_measurements))
    ratios = np.zeros_like(kappa)
    totals = np.ones(n_measurements)
    converged = True
    for _ in range(max(1, n_iterations)):
        ratios = np.zeros((h_count, n_measurements))
        for k, work in enumerate(legacy):
            ratios[k] = _legacy_ratios(work, kappa[k])
        for j, nw in enumerate(new):
            ratios[k_count + j] = _new_ratios(nw, kappa[k_count + j], logw_agent)
        kappa, totals, ok = associate(ratios, mask, da_max_iterations, da_tolerance)
        converged = converged and ok
    return MessageResult(kappa=kappa, ratios=ratios, totals=totals, converged=converged)


def legacy_posterior(work: LegacyWork, kappa_row) -> tuple[np.ndarray, float, bool]:
    """Updated weights and existence; ok=False marks total weight underflow."""
    lg = _log_gamma(kappa_row, work.logc)
    tot = lg.sum(axis=1)
    logw, ok = _normalize_logw(work.log_w_pred + tot)
    if not ok:
        return logw, 0.0, False
    log_b1 = _log(work.a1) + logsumexp(work.log_pair + tot)
    b1 = float(np.exp(min(log_b1, _LOG_RATIO_CAP)))
    denom = b1 + work.a0
    existence = b1 / denom if denom > 0.0 else 0.0
    return logw, min(existence, 1.0), True


def new_posterior(nw: NewWork, kappa_row, logw_agent) -> tuple[np.ndarray, float, bool]:
    m = nw.m
    if m > 0:
        sum_u = _log_gamma(kappa_row[:m], nw.logc[:, :m]).sum(axis=1)
    else:
        sum_u = 0.0
    with np.errstate(divide="ignore"):
        log_b1 = logw_agent + np.log(kappa_row[m]) + nw.logv1 + sum_u
    logw, ok = _normalize_logw(log_b1)
    if not ok:
        return logw, 0.0, False
    b1 = float(np.exp(min(logsumexp(log_b1), _LOG_RATIO_CAP)))
    return logw, b1 / (b1 + 1.0), True


def agent_factor(work: LegacyWork, kappa_row) -> np.ndarray:
    """Log reweighting factor the feature contributes to each agent particle.

    Per measurement: (a1 + a0) + a1 * kappa * n * w_pred * ratio; the
    association-free branch integrates the predicted feature belief exactly,
    the associated branch uses the paired feature particle.
    """
    n = work.log_w_pred.size
    if work.logc.shape[1] == 0 or work.a1 <= 0.0:
        return np.zeros(n)
    base = _log(work.a1 + work.a0)
    with np.errstate(divide="ignore"):
        logk = np.log(kappa_row)
    terms = np.logaddexp(
        base,
        _log(work.a1) + math.log(n) + logk[None, :] + work.log_w_pred[:, None] + work.logc,
    )
    return terms.sum(axis=1)


def invert_delay_aod(agent_pos, pa_pos, z_tau: float, z_vartheta: float):
    """Mirror-image position implied by a delay and departure angle.

    The bounce point sits along the departure ray from the anchor where the
    two path legs add up to the measured range; the image then lies on the
    agent-to-bounce ray at the full range. Invalid when the range does not
    exceed the agent-anchor separation.
    """
    agent_pos = np.asarray(agent_pos, dtype=float)
    pa = np.asarray(pa_pos, dtype=float)
    r = SPEED_OF_LIGHT * float(z_tau)
    e = np.array([math.cos(z_vartheta), math.sin(z_vartheta)])
    delta = agent_pos - pa
    dist = np.hypot(delta[:, 0], delta[:, 1])
    ok = r > dist + 1e-9
    den = 2.0 * (r - delta @ e)
    ok &= den > 1e-12
    s = (r * r - dist * dist) / np.where(ok, den, 1.0)
    qhat = pa[None, :] + s[:, None] * e[None, :]
    w = qhat - agent_pos
    wn = np.hypot(w[:, 0], w[:, 1])
    ok &= wn > 1e-9
    pos = agent_pos + r * w / np.maximum(wn, 1e-300)[:, None]
    pos = np.where(ok[:, None], pos, agent_pos + 1.0)
    return pos, ok


class Filter:
    """Joint agent and feature tracker driven by per-step measurement sets."""

    def __init__(
        self,
        pa_positions,
        agent_start,
        constants: ModelConstants | None = None,
        transition: TransitionParams | None = None,
        params: EngineParams | None = None,
        pa_psi=None,
        rng=None,
    ):
        self.constants = constants if constants is not None else ModelConstants()
        self.transition = transition if transition is not None else TransitionParams()
        self.params = params if params is not None else EngineParams()
        if self.constants.mu_fp <= 0.0:
            raise ValueError("the likelihood ratios need a positive clutter mean")
        self.noise = default_noise_model(self.constants)
        self._log_fp_norm = math.log(self.constants.mu_fp * fp_base_density(self.constants))
        self._rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)

        n = self.params.n_particles
        start = np.asarray(agent_start, dtype=float)
        pos = start[None, :] + self._rng.uniform(-_INIT_POS_HALF, _INIT_POS_HALF, (n, 2))
        vel = self._rng.uniform(-_INIT_VEL_HALF, _INIT_VEL_HALF, (n, 2))
        self.agent = AgentBelief(
            x=np.concatenate([pos, vel], axis=1), logw=np.full(n, -math.log(n))
        )

        self._pa_positions = [np.asarray(p, dtype=float) for p in pa_positions]
        self._features: list[list[TrackedFeature]] = []
        pin_psi = self.params.pa_dispersion == "known"
        for j, pa in enumerate(self._pa_positions):
            if pin_psi:
                given = np.zeros(3) if pa_psi is None else np.asarray(pa_psi[j], float)
                psi = np.tile(np.maximum(given, PSI_FLOOR), (n, 1))
            else:
                _, psi = birth_prior_sample(self.transition, self._rng, n)
            belief = PvaBelief(
                pos=np.tile(pa, (n, 1)),
                psi=psi,
                logw=np.full(n, -math.log(n)),
                existence=1.0,
                logw_psi=None if pin_psi else np.full(n, -math.log(n)),
            )
            self._features.append(
                [
                    TrackedFeature(
                        label=f"pa{j}",
                        belief=belief,
                        is_pa=True,
                        birth_step=-(10**9),
                        psi_fixed=pin_psi,
                    )
                ]
            )
        self._counters = [0] * len(self._pa_positions)
        self.step_index = 0

    @property
    def features_by_pa(self) -> list[list[TrackedFeature]]:
        return self._features

    def step(self, frame) -> StepDiagnostics:
        """Advance one time step given this step's measurements.

        Accepts a measurement frame or a plain sequence with one (m, 4)
        array per anchor.
        """
        z_list = getattr(frame, "z_by_pa", frame)
        if len(z_list) != len(self._pa_positions):
            raise ValueError("one measurement array per anchor is required")
        rng = self._rng
        params = self.params
        n = params.n_particles
        diag = StepDiagnostics(time_index=self.step_index)

        self.agent.x = agent_transition_sample(
            self.agent.x, self.constants.dt_s, self.transition.sigma_w, rng
        )
        apos = np.ascontiguousarray(self.agent.x[:, :2])
        avel = np.ascontiguousarray(self.agent.x[:, 2:])
        acc = np.zeros(n)
        born = []
        psi_pending = []

        for j, (pa, features) in enumerate(zip(self._pa_positions, self._features)):
            z = np.asarray(z_list[j], dtype=float).reshape(-1, 4)
            m_count = len(z)
            diag.measurement_count += m_count
            diag.features_before_prune += len(features) + m_count

            works = [self._predict_feature(f, rng) for f in features]
            for f, work in zip(features, works):
                work.logc = self._eval_logc(
                    apos, avel, f.belief.pos, f.belief.psi, pa, f.is_pa, z, work.mu
                )
                work.log_pair = _normalize_logw(self.agent.logw + work.log_w_pred)[0]
            news = [self._propose(apos, avel, pa, z, m, rng) for m in range(m_count)]

            # Births compete in the association used for feature posteriors,
            # but the agent reweighting uses a legacy-only pass so candidate
            # proposals can never feed back into the agent belief.
            result_agent = message_iterations(
                works,
                [],
                self.agent.logw,
                m_count,
                params.mp_iterations,
                params.da_max_iterations,
                params.da_tolerance,
            )
            result = message_iterations(
                works,
                news,
                self.agent.logw,
                m_count,
                params.mp_iterations,
                params.da_max_iterations,
                params.da_tolerance,
            )
            diag.da_converged = diag.da_converged and result.converged and result_agent.converged

            for k, (f, work) in enumerate(zip(features, works)):
                logw, existence, ok = legacy_posterior(work, result.kappa[k])
                if ok:
                    f.belief.logw = logw
                    f.belief.existence = 1.0 if f.is_pa else existence
                    if f.belief.logw_psi is not None:
                        psi_pending.append((f, pa, work, result.kappa[k], z))
                else:
                    f.belief.existence = 1.0 if f.is_pa else params.p_prune / 2.0
                    diag.underflow_labels.append(f.label)
                acc += agent_factor(work, result_agent.kappa[k])

            for jn, nw in enumerate(news):
                logw, existence, ok = new_posterior(
                    nw, result.kappa[len(works) + jn], self.agent.logw
                )
                if ok and existence >= params.existence_floor:
                    self._counters[j] += 1
                    features.append(
                        TrackedFeature(
                            label=f"f{j}-{self._counters[j]:04d}",
                            belief=PvaBelief(
                                pos=nw.pos,
                                psi=nw.psi,
                                logw=logw,
                                existence=existence,
                                logw_psi=np.full(n, -math.log(n)),
                            ),
                            birth_step=self.step_index,
                        )
                    )
                    born.append((features[-1], pa, np.array(z[nw.m])))
                    diag.promoted += 1

        logw, ok = _normalize_logw(self.agent.logw + acc)
        self.agent.logw = logw
        if not ok:
            diag.agent_divergence = True
        # Dispersion evidence is folded in only after the agent weights have
        # absorbed this step's measurements: the arrival-angle axis is scored
        # against the agent heading, and the predicted heading lags the true
        # one through every turn, which would keep the angle windows inflated.
        for f, pa, work, kappa_row, z in psi_pending:
            self._accumulate_psi_evidence(f, pa, work, kappa_row, z)
        if _ess(self.agent.logw) < n / 2.0:
            idx = _systematic_indices(self.agent.logw, rng)
            self.agent.x = self.agent.x[idx]
            self.agent.logw = np.full(n, -math.log(n))

        for j, features in enumerate(self._features):
            kept = []
            for f in features:
                b = f.belief
                if _ess(b.logw) < n / 2.0:
                    # Positions resample on the joint weights; the psi
                    # columns stay in place under their own accumulator.
                    idx = _systematic_indices(b.logw, rng)
                    b.pos = b.pos[idx]
                    if f.psi_fixed:
                        b.psi = b.psi[idx]
                    b.logw = np.full(n, -math.log(n))
                if b.logw_psi is not None and _ess(b.logw_psi) < n / 2.0:
                    idx = _systematic_indices(b.logw_psi, rng)
                    b.psi = _shrink_resample_psi(
                        b.psi, b.logw_psi, idx, self.transition.psi_birth_max, rng
                    )
                    b.logw_psi = np.full(n, -math.log(n))
                age = self.step_index - f.birth_step
                mature_ok = b.existence >= params.p_prune
                young_ok = age <= params.birth_grace and b.existence >= params.existence_floor
                if f.is_pa or mature_ok or young_ok:
                    kept.append(f)
                else:
                    diag.pruned += 1
            for f in kept:
                if not f.is_pa:
                    f.belief.pos = regularize_position(f.belief.pos, self.transition.sigma_a, rng)
            self._features[j] = kept

        apos = np.ascontiguousarray(self.agent.x[:, :2])
        avel = np.ascontiguousarray(self.agent.x[:, 2:])
        for f, pa, z_row in born:
            self._redraw_dispersion(apos, avel, f.belief, pa, z_row, rng)

        self.step_index += 1
        return diag

    def _predict_feature(self, f: TrackedFeature, rng) -> LegacyWork:
        b = f.belief
        if not f.psi_fixed:
            # Gamma draws around a floored mean can still dip below the
            # floor or diffuse past the birth ceiling, so clamp the
            # samples themselves to the supported box.
            b.psi = np.clip(
                dispersion_transition_sample(b.psi, self.transition.q_vector, rng),
                PSI_FLOOR,
                self.transition.psi_birth_max,
            )
        mu = mean_measurements(b.psi, self.constants)
        log_w_pred, ok = _normalize_logw(b.logw - mu)
        e_surv = float(np.exp(logsumexp(b.logw - mu))) if ok else 0.0
        if f.is_pa:
            survived, dead = survival_split(1.0, 1.0)
        else:
            survived, dead = survival_split(b.existence, self.transition.p_s)
        b.logw = log_w_pred
        return LegacyWork(
            a1=survived * e_surv,
            a0=dead,
            log_w_pred=log_w_pred,
            log_pair=log_w_pred,
            logc=np.zeros((log_w_pred.size, 0)),
            feature=f,
            mu=mu,
        )

    def _eval_logc(self, apos, avel, fpos, fpsi, pa, is_pa, z, mu) -> np.ndarray:
        if len(z) == 0:
            return np.zeros((len(fpos), 0))
        return eval_loglik(
            apos,
            avel,
            np.ascontiguousarray(fpos),
            np.ascontiguousarray(fpsi),
            pa,
            bool(is_pa),
            np.ascontiguousarray(z),
            self.noise.beta_bw,
            self.noise.k_theta,
            self.noise.k_vartheta,
            np.log(mu),
            self._log_fp_norm,
            self.params.gate_slack_m,
        )

    def _propose(self, apos, avel, pa, z, m: int, rng) -> NewWork:
        """Mixture proposal for the feature behind measurement m.

        Half the particles come from the uniform birth prior, half from the
        delay and departure-angle inversion around their paired agent
        particle, jittered radially to the delay scale plus the drawn
        dispersion extent and tangentially to the departure-angle scale.
        The draw layout is fixed so the stream does not depend on values.
        """
        n = self.params.n_particles
        tr = self.transition
        z_tau, _, z_vartheta, z_u = z[m]
        pos_birth, psi = birth_prior_sample(tr, rng, n)
        coin = rng.random(n)
        eps_r = rng.standard_normal(n)
        eps_t = rng.standard_normal(n)

        inv_pos, inv_ok = invert_delay_aod(apos, pa, z_tau, z_vartheta)
        u_amp = max(float(z_u), 1e-3)
        sig_r = SPEED_OF_LIGHT * float(sigma_tau(u_amp, self.noise))
        sig_vt = float(sigma_angle(u_amp, self.noise.k_vartheta))
        r_range = max(SPEED_OF_LIGHT * float(z_tau), 0.1)
        psi_d = SPEED_OF_LIGHT * psi[:, 0]
        s_r = np.maximum(_PROP_RADIAL_SIGMAS * sig_r + 0.5 * psi_d, 1e-6)
        s_t = np.maximum(r_range * (_PROP_TANGENT_SIGMAS * sig_vt + 0.6 * psi[:, 2]), 1e-6)

        diff = inv_pos - apos
        norm = np.where(inv_ok, np.hypot(diff[:, 0], diff[:, 1]), 1.0)
        r_hat = diff / norm[:, None]
        t_hat = np.column_stack([-r_hat[:, 1], r_hat[:, 0]])
        center = inv_pos - (0.4 * psi_d)[:, None] * r_hat
        prop_pos = center + (s_r * eps_r)[:, None] * r_hat + (s_t * eps_t)[:, None] * t_hat
        use_inv = inv_ok & (coin < 0.5)
        pos = np.where(use_inv[:, None], prop_pos, pos_birth)

        log_ub = math.log(birth_position_density(tr))
        inside = np.all((pos >= tr.birth_lo) & (pos <= tr.birth_hi), axis=1)
        log_birth_part = np.where(inside, math.log(0.5) + log_ub, -np.inf)
        d = pos - center
        a_r = (d * r_hat).sum(axis=1) / s_r
        a_t = (d * t_hat).sum(axis=1) / s_t
        log_gauss = -0.5 * (a_r**2 + a_t**2) - np.log(2.0 * math.pi * s_r * s_t)
        log_prop = np.where(
            inv_ok,
            np.logaddexp(log_birth_part, math.log(0.5) + log_gauss),
            log_ub,
        )
        with np.errstate(divide="ignore"):
            log_h = _log(tr.mu_n) + np.where(inside, log_ub, -np.inf) - log_prop

        mu = mean_measurements(psi, self.constants)
        logc = self._eval_logc(apos, avel, pos, psi, pa, False, z, mu)
        logv1 = log_h - mu + logc[:, m]
        return NewWork(m=m, logv1=logv1, logc=logc, pos=pos, psi=psi)

    def _redraw_dispersion(self, apos, avel, belief, pa, z_row, rng) -> None:
        """Refresh a newborn's dispersion cloud given its resampled positions.

        Birth weights are dominated by how well a particle's position fits
        the claimed measurement, so the resampled cloud carries only a
        handful of distinct dispersion draws. Positions stay; every particle
        picks a fresh triple among prior candidates in proportion to the
        claimed measurement's likelihood at that particle.
        """
        n = len(belief.pos)
        z = np.ascontiguousarray(z_row.reshape(1, 4))
        pos = np.ascontiguousarray(belief.pos)
        psi_max = np.asarray(self.transition.psi_birth_max)
        scores = np.empty((_PSI_REDRAW_CANDIDATES, n))
        cands = np.empty((_PSI_REDRAW_CANDIDATES, n, 3))
        for s in range(_PSI_REDRAW_CANDIDATES):
            psi = np.maximum(rng.uniform(0.0, 1.0, size=(n, 3)) * psi_max, PSI_FLOOR)
            mu = mean_measurements(psi, self.constants)
            logc = self._eval_logc(apos, avel, pos, psi, pa, False, z, mu)
            scores[s] = logc[:, 0] - mu
            cands[s] = psi
        pick = np.argmax(scores + rng.gumbel(size=scores.shape), axis=0)
        belief.psi = cands[pick, np.arange(n)]

    def _accumulate_psi_evidence(self, f, pa, work, kappa_row, z) -> None:
        """Fold this step's dispersion evidence into the psi accumulator.

        A particle's full log-weight increment is dominated by how its
        position pair fits the claimed measurements, and that pairing noise
        is far larger than the fraction of a nat the dispersion axes
        contribute. Scoring every triple at the same point estimates of the
        agent and feature positions removes the pairing noise entirely: the
        score varies across particles through the triple alone, so the
        accumulator ESS decays only as fast as genuine dispersion evidence
        arrives and the triples survive long enough for it to add up.
        """
        b = f.belief
        w = np.exp(b.logw - np.max(b.logw))
        w /= w.sum()
        pos_ref = np.ascontiguousarray(np.broadcast_to(w @ b.pos, b.pos.shape))
        wa = np.exp(self.agent.logw - np.max(self.agent.logw))
        wa /= wa.sum()
        apos_ref = np.ascontiguousarray(
            np.broadcast_to(wa @ self.agent.x[:, :2], pos_ref.shape)
        )
        avel_ref = np.ascontiguousarray(
            np.broadcast_to(wa @ self.agent.x[:, 2:], pos_ref.shape)
        )
        logc = self._eval_logc(apos_ref, avel_ref, pos_ref, b.psi, pa, f.is_pa, z, work.mu)
        score = _log_gamma(kappa_row, logc).sum(axis=1) - work.mu
        logw_psi, ok = _normalize_logw(b.logw_psi + score)
        if ok:
            b.logw_psi = logw_psi
