"""Point estimation from particle beliefs and the run-level metrics.

Estimates are posterior means; feature weights are stored conditioned on
existence, so the feature mean needs no extra renormalization. Feature
sets are scored against the per-step visible ground truth with the
optimal-subpattern-assignment metric; its assignment also pairs each
estimated feature to a true one for the dispersion error report.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import is_visible
from .world import Scenario, psi_from_native

OSPA_CUTOFF_M = 5.0
OSPA_ORDER = 2.0
P_CONFIRM = 0.5
DIVERGENCE_THRESHOLD_M = 1.0


@dataclass(frozen=True)
class FeatureEstimate:
    """Point estimate of one confirmed feature; psi in (s, rad, rad)."""

    label: str
    position: np.ndarray
    psi: np.ndarray
    existence: float
    is_pa: bool = False


@dataclass
class EstimateRecord:
    """Per-step snapshot: agent mean, confirmed features, all existences."""

    time_index: int
    agent: np.ndarray
    confirmed_by_pa: list
    existences_by_pa: list
    diagnostics: object | None = None


@dataclass
class RunMetrics:
    """Per-step scalar errors of one run against ground truth."""

    time: np.ndarray
    pos_err_m: np.ndarray
    ospa_m: np.ndarray
    ospa_card_m: np.ndarray
    card_err: np.ndarray
    psi_err: dict  # label -> (T, 3) estimate minus truth in (m, deg, deg)
    feature_labels: list
    converged: bool


@dataclass
class MetricSeries:
    """Across-run aggregation over the converged subset."""

    time: np.ndarray
    rmse_pos_m: np.ndarray
    mospa_m: np.ndarray
    ospa_card_m: np.ndarray
    card_err: np.ndarray
    psi_rmse: dict  # label -> (T, 3) in (m, deg, deg)
    feature_labels: list = field(default_factory=list)
    n_runs: int = 0
    n_converged: int = 0


def mmse(particles, logw) -> np.ndarray:
    """Weighted posterior mean of log-weighted particles."""
    particles = np.asarray(particles, dtype=float)
    logw = np.asarray(logw, dtype=float)
    w = np.exp(logw - np.max(logw))
    return np.average(particles, axis=0, weights=w)


def feature_estimate(f) -> FeatureEstimate:
    b = f.belief
    logw_psi = b.logw if b.logw_psi is None else b.logw_psi
    return FeatureEstimate(
        label=f.label,
        position=mmse(b.pos, b.logw),
        psi=mmse(b.psi, logw_psi),
        existence=b.existence,
        is_pa=f.is_pa,
    )


def confirm_and_extract(features, p_cf: float = P_CONFIRM) -> list:
    """Point estimates of the features whose existence strictly exceeds p_cf."""
    return [feature_estimate(f) for f in features if f.belief.existence > p_cf]


def record_step(filt, time_index: int, diagnostics=None, p_cf: float = P_CONFIRM) -> EstimateRecord:
    """Snapshot the filter right after a step."""
    return EstimateRecord(
        time_index=time_index,
        agent=mmse(filt.agent.x, filt.agent.logw),
        confirmed_by_pa=[confirm_and_extract(fs, p_cf) for fs in filt.features_by_pa],
        existences_by_pa=[
            {f.label: f.belief.existence for f in fs} for fs in filt.features_by_pa
        ],
        diagnostics=diagnostics,
    )


def ospa_with_assignment(est, truth, cutoff: float = OSPA_CUTOFF_M, order: float = OSPA_ORDER):
    """Metric value, its cardinality component, and the gated assignment.

    Returns (total, card_component, pairs); pairs lists (est_index,
    truth_index) for assigned pairs closer than the cutoff, which is the
    matching used for per-feature error reporting.
    """
    est = np.asarray(est, dtype=float).reshape(-1, 2)
    truth = np.asarray(truth, dtype=float).reshape(-1, 2)
    n_est, n_truth = len(est), len(truth)
    n_max = max(n_est, n_truth)
    if n_max == 0:
        return 0.0, 0.0, []
    card = (cutoff**order * abs(n_est - n_truth) / n_max) ** (1.0 / order)
    if n_est == 0 or n_truth == 0:
        return cutoff, card, []
    d = np.linalg.norm(est[:, None, :] - truth[None, :, :], axis=2)
    cost = np.minimum(d, cutoff) ** order
    rows, cols = linear_sum_assignment(cost)
    loc_sum = float(cost[rows, cols].sum())
    total = ((loc_sum + cutoff**order * abs(n_est - n_truth)) / n_max) ** (1.0 / order)
    pairs = [(int(i), int(j)) for i, j in zip(rows, cols) if d[i, j] < cutoff]
    return min(total, cutoff), card, pairs


def ospa(est, truth, cutoff: float = OSPA_CUTOFF_M, order: float = OSPA_ORDER) -> float:
    return ospa_with_assignment(est, truth, cutoff, order)[0]


def _psi_report(psi_native) -> np.ndarray:
    """(s, rad, rad) to the reporting triple (m, deg, deg)."""
    rep = psi_from_native(psi_native)
    rep[1:] = np.degrees(rep[1:])
    return rep


def evaluate_run(
    records,
    scenario: Scenario,
    pa_index: int = 0,
    cutoff: float = OSPA_CUTOFF_M,
    order: float = OSPA_ORDER,
    divergence_threshold_m: float = DIVERGENCE_THRESHOLD_M,
) -> RunMetrics:
    """Score one run's records against the scenario ground truth."""
    truth_feats = scenario.features(pa_index)
    labels = [f.label for f in truth_feats]
    walls = scenario.walls()
    truth_psi_rep = {}
    for f in truth_feats:
        rep = np.asarray(f.psi_m, dtype=float).copy()
        rep[1:] = np.degrees(rep[1:])
        truth_psi_rep[f.label] = rep

    n = len(records)
    time = np.array([r.time_index for r in records], dtype=int)
    pos_err = np.zeros(n)
    ospa_m = np.zeros(n)
    ospa_card = np.zeros(n)
    card_err = np.zeros(n)
    psi_err = {lab: np.full((n, 3), np.nan) for lab in labels}

    for t, rec in enumerate(records):
        truth_row = scenario.trajectory[rec.time_index]
        pos_err[t] = float(np.hypot(*(np.asarray(rec.agent)[:2] - truth_row[:2])))
        visible = [f for f in truth_feats if is_visible(truth_row[:2], f.anchor, walls)]
        est = rec.confirmed_by_pa[pa_index]
        est_pos = np.array([e.position for e in est], dtype=float).reshape(-1, 2)
        truth_pos = np.array([f.anchor.position for f in visible], dtype=float).reshape(-1, 2)
        total, card_comp, pairs = ospa_with_assignment(est_pos, truth_pos, cutoff, order)
        ospa_m[t] = total
        ospa_card[t] = card_comp
        card_err[t] = abs(len(est) - len(visible))
        for ei, ti in pairs:
            lab = visible[ti].label
            psi_err[lab][t] = _psi_report(est[ei].psi) - truth_psi_rep[lab]

    converged = n > 0 and pos_err[-1] < divergence_threshold_m
    return RunMetrics(
        time=time,
        pos_err_m=pos_err,
        ospa_m=ospa_m,
        ospa_card_m=ospa_card,
        card_err=card_err,
        psi_err=psi_err,
        feature_labels=labels,
        converged=bool(converged),
    )


def _nan_rmse(stack: np.ndarray) -> np.ndarray:
    """Root mean square over axis 0, skipping NaN; all-NaN slices stay NaN."""
    valid = ~np.isnan(stack)
    counts = valid.sum(axis=0)
    sums = np.where(valid, np.square(np.where(valid, stack, 0.0)), 0.0).sum(axis=0)
    out = np.full(stack.shape[1:], np.nan)
    np.divide(sums, counts, out=out, where=counts > 0)
    return np.sqrt(out)


def aggregate(runs) -> MetricSeries:
    """Across-run series over the converged subset of runs."""
    if not runs:
        raise ValueError("need at least one run to aggregate")
    time = runs[0].time
    labels = runs[0].feature_labels
    for r in runs:
        if not np.array_equal(r.time, time):
            raise ValueError("runs cover different time grids")
    used = [r for r in runs if r.converged]
    n_t = len(time)
    if used:
        rmse_pos = _nan_rmse(np.stack([r.pos_err_m for r in used]))
        mospa = np.mean(np.stack([r.ospa_m for r in used]), axis=0)
        ospa_card = np.mean(np.stack([r.ospa_card_m for r in used]), axis=0)
        card = np.mean(np.stack([r.card_err for r in used]), axis=0)
        psi_rmse = {
            lab: _nan_rmse(np.stack([r.psi_err[lab] for r in used])) for lab in labels
        }
    else:
        rmse_pos = np.full(n_t, np.nan)
        mospa = np.full(n_t, np.nan)
        ospa_card = np.full(n_t, np.nan)
        card = np.full(n_t, np.nan)
        psi_rmse = {lab: np.full((n_t, 3), np.nan) for lab in labels}
    return MetricSeries(
        time=time,
        rmse_pos_m=rmse_pos,
        mospa_m=mospa,
        ospa_card_m=ospa_card,
        card_err=card,
        psi_rmse=psi_rmse,
        feature_labels=list(labels),
        n_runs=len(runs),
        n_converged=len(used),
    )


def _fmt(x) -> str:
    return repr(float(x))


def _meta_line(metadata: dict) -> str:
    return "# " + " ".join(f"{k}={v}" for k, v in metadata.items())


def write_results_csv(path, series: MetricSeries, metadata: dict) -> None:
    """Aggregated series as CSV with one metadata header line."""
    header = ["t", "rmse_pos_m", "mospa_m", "ospa_card_m", "card_err"]
    for lab in series.feature_labels:
        header += [
            f"psi_d_rmse_m_{lab}",
            f"psi_theta_rmse_deg_{lab}",
            f"psi_vartheta_rmse_deg_{lab}",
        ]
    lines = [_meta_line(metadata), ",".join(header)]
    for i, t in enumerate(series.time):
        row = [
            str(int(t)),
            _fmt(series.rmse_pos_m[i]),
            _fmt(series.mospa_m[i]),
            _fmt(series.ospa_card_m[i]),
            _fmt(series.card_err[i]),
        ]
        for lab in series.feature_labels:
            row += [_fmt(v) for v in series.psi_rmse[lab][i]]
        lines.append(",".join(row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_run_estimates_csv(path, records, metrics: RunMetrics, metadata: dict) -> None:
    """Per-run agent track and per-step scores."""
    header = [
        "t",
        "agent_x_m",
        "agent_y_m",
        "agent_vx_mps",
        "agent_vy_mps",
        "pos_err_m",
        "ospa_m",
        "card_err",
        "n_confirmed",
    ]
    lines = [_meta_line(metadata), ",".join(header)]
    for i, rec in enumerate(records):
        agent = np.asarray(rec.agent, dtype=float)
        n_conf = sum(len(c) for c in rec.confirmed_by_pa)
        row = [str(int(rec.time_index))]
        row += [_fmt(v) for v in agent[:4]]
        row += [_fmt(metrics.pos_err_m[i]), _fmt(metrics.ospa_m[i]), _fmt(metrics.card_err[i])]
        row.append(str(int(n_conf)))
        lines.append(",".join(row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_run_features_csv(path, records, pa_index: int = 0, metadata: dict | None = None) -> None:
    """Long-format dump of confirmed feature estimates, one row per feature."""
    header = [
        "t",
        "label",
        "x_m",
        "y_m",
        "existence",
        "psi_d_m",
        "psi_theta_deg",
        "psi_vartheta_deg",
    ]
    lines = [_meta_line(metadata or {}), ",".join(header)]
    for rec in records:
        for e in rec.confirmed_by_pa[pa_index]:
            rep = _psi_report(e.psi)
            lines.append(
                ",".join(
                    [
                        str(int(rec.time_index)),
                        e.label,
                        _fmt(e.position[0]),
                        _fmt(e.position[1]),
                        _fmt(e.existence),
                        _fmt(rep[0]),
                        _fmt(rep[1]),
                        _fmt(rep[2]),
                    ]
                )
            )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
