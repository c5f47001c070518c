"""Scenario container and synthetic measurement generator.

A scenario is a set of walls, one or more fixed radio anchors, a ground-truth
agent trajectory, and the shared model constants. Each wall carries the true
dispersion triple of its mirror-image feature; the generator produces, per
time step, the detected main components, dispersed sub-components, and
false positives seen by each anchor.

Dispersion triples are kept in reporting units (meters, radians, radians)
everywhere outside the density code; delay spreads convert via psi_tau =
psi_d / c.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .geometry import (
    SPEED_OF_LIGHT,
    AgentPose,
    Anchor,
    Surface,
    is_visible,
    mirror_anchor,
    true_aoa,
    true_aod,
    true_delay,
    wrap_angle,
)
from .likelihoods import NoiseModel, default_noise_model, mean_measurements, sigma_angle, sigma_tau


@dataclass(frozen=True)
class ModelConstants:
    """Shared physical and statistical constants of the measurement model."""

    dt_s: float = 1.0
    snr_1m_db: float = 40.0
    bandwidth_hz: float = 500e6
    carrier_hz: float = 6e9
    reflection_loss_db: float = 3.0
    beta_sub: float = 0.9  # sub-component amplitude ratio
    mu_fp: float = 5.0  # mean false positives per frame
    p_d: float = 0.98
    n_ny_tau: float = 4.0  # sub-component rate per resolution cell, delay
    n_ny_theta: float = 2.0
    n_ny_vartheta: float = 2.0
    gamma_det: float = 2.0  # detection threshold on normalized amplitude
    tau_max_s: float = 2e-7

    def __post_init__(self) -> None:
        if not 0.0 < self.p_d <= 1.0:
            raise ValueError("detection probability must be in (0, 1]")
        if self.mu_fp < 0.0:
            raise ValueError("false-positive mean must be nonnegative")
        if self.bandwidth_hz <= 0.0:
            raise ValueError("bandwidth must be positive")
        if self.gamma_det <= 0.0:
            raise ValueError("detection threshold must be positive")
        if self.tau_max_s <= 0.0 or self.dt_s <= 0.0:
            raise ValueError("tau_max and dt must be positive")


def psi_to_native(psi_m) -> np.ndarray:
    """(m, rad, rad) reporting triple to (s, rad, rad) used by densities."""
    psi_m = np.asarray(psi_m, dtype=float)
    out = psi_m.copy()
    out[..., 0] = psi_m[..., 0] / SPEED_OF_LIGHT
    return out


def psi_from_native(psi) -> np.ndarray:
    """(s, rad, rad) back to the (m, rad, rad) reporting triple."""
    psi = np.asarray(psi, dtype=float)
    out = psi.copy()
    out[..., 0] = psi[..., 0] * SPEED_OF_LIGHT
    return out


@dataclass(frozen=True)
class ScenarioPa:
    """Fixed physical anchor with the true dispersion of its direct path."""

    position: np.ndarray
    psi_m: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        object.__setattr__(self, "psi_m", np.asarray(self.psi_m, dtype=float))
        if self.psi_m.shape != (3,) or np.any(self.psi_m < 0):
            raise ValueError("dispersion triple must be 3 nonnegative components")

    @property
    def anchor(self) -> Anchor:
        return Anchor(self.position)


@dataclass(frozen=True)
class ScenarioSurface:
    """Wall plus the true dispersion triple of its mirror-image feature."""

    surface: Surface
    psi_m: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        object.__setattr__(self, "psi_m", np.asarray(self.psi_m, dtype=float))
        if self.psi_m.shape != (3,) or np.any(self.psi_m < 0):
            raise ValueError("dispersion triple must be 3 nonnegative components")


@dataclass(frozen=True)
class FeatureTruth:
    """One ground-truth feature as seen by one anchor."""

    label: str
    anchor: Anchor
    psi_m: np.ndarray
    bounces: int


@dataclass(frozen=True)
class Scenario:
    pas: tuple
    surfaces: tuple
    trajectory: np.ndarray  # (N, 4) rows [x, y, vx, vy]
    constants: ModelConstants

    def __post_init__(self) -> None:
        object.__setattr__(self, "pas", tuple(self.pas))
        object.__setattr__(self, "surfaces", tuple(self.surfaces))
        traj = np.asarray(self.trajectory, dtype=float)
        object.__setattr__(self, "trajectory", traj)
        if traj.ndim != 2 or traj.shape[1] != 4 or traj.shape[0] < 2:
            raise ValueError("trajectory must be (N >= 2, 4)")
        if not self.pas:
            raise ValueError("scenario needs at least one anchor")

    @property
    def n_steps(self) -> int:
        return len(self.trajectory)

    def pose(self, n: int) -> AgentPose:
        row = self.trajectory[n]
        return AgentPose(row[:2], row[2:])

    def features(self, pa_index: int = 0) -> list[FeatureTruth]:
        """Ground-truth feature list for one anchor: itself plus one
        mirror image per wall, labeled va1.. in wall order."""
        pa = self.pas[pa_index]
        out = [FeatureTruth("pa", pa.anchor, pa.psi_m, 0)]
        for i, ss in enumerate(self.surfaces):
            out.append(FeatureTruth(f"va{i + 1}", mirror_anchor(pa.anchor, ss.surface), ss.psi_m, 1))
        return out

    def walls(self) -> list[Surface]:
        return [ss.surface for ss in self.surfaces]


def true_amplitude(dist: float, n_bounces: int, constants: ModelConstants) -> float:
    """Free-space inverse-distance amplitude with a fixed per-bounce loss."""
    if dist <= 0.0:
        raise ValueError("distance must be positive")
    u_1m = 10.0 ** (constants.snr_1m_db / 20.0)
    return u_1m * (1.0 / dist) * 10.0 ** (-n_bounces * constants.reflection_loss_db / 20.0)


@dataclass(frozen=True)
class MeasurementFrame:
    """Measurements of one time step, grouped per anchor.

    Each entry of z_by_pa is an (M, 4) array with columns (z_tau [s],
    z_theta [rad], z_vartheta [rad], z_u). origin_by_pa carries ground-truth
    labels for diagnostics; the inference engine never reads it.
    """

    z_by_pa: tuple
    origin_by_pa: tuple

    @property
    def total(self) -> int:
        return sum(len(z) for z in self.z_by_pa)


def _noised_measurement(rng, tau, theta, vartheta, amplitude, noise: NoiseModel, constants):
    """Apply the amplitude threshold and amplitude-dependent estimation noise."""
    z_u = max(constants.gamma_det, amplitude + rng.standard_normal())
    st = float(sigma_tau(z_u, noise))
    sth = float(sigma_angle(z_u, noise.k_theta))
    svt = float(sigma_angle(z_u, noise.k_vartheta))
    z_tau = float(np.clip(tau + st * rng.standard_normal(), 0.0, constants.tau_max_s))
    z_theta = float(wrap_angle(theta + sth * rng.standard_normal()))
    z_vartheta = float(wrap_angle(vartheta + svt * rng.standard_normal()))
    return (z_tau, z_theta, z_vartheta, z_u)


def synthesize_frame(scenario: Scenario, n: int, rng) -> MeasurementFrame:
    """Generate the measurement frame of time step n.

    Draw order per anchor is fixed (features in scenario order, then false
    positives, then one permutation), which makes frames bit-identical for a
    given generator state. Per feature: main-detection coin, then its
    amplitude and noise draws; sub-component count; per sub-component the
    three uniform offsets, detection coin, amplitude and noise draws.
    """
    constants = scenario.constants
    noise = default_noise_model(constants)
    pose = scenario.pose(n)
    walls = scenario.walls()
    z_by_pa = []
    origin_by_pa = []
    for j in range(len(scenario.pas)):
        rows: list[tuple] = []
        labels: list[str] = []
        for feat in scenario.features(j):
            if not is_visible(pose.position, feat.anchor, walls):
                continue
            tau = true_delay(pose.position, feat.anchor.position)
            theta = true_aoa(pose, feat.anchor.position)
            vartheta = true_aod(pose.position, feat.anchor)
            u_main = true_amplitude(tau * SPEED_OF_LIGHT, feat.bounces, constants)
            psi = psi_to_native(feat.psi_m)
            if rng.random() < constants.p_d:
                rows.append(_noised_measurement(rng, tau, theta, vartheta, u_main, noise, constants))
                labels.append(feat.label)
            mu_m = float(mean_measurements(psi, constants))
            n_sub = rng.poisson(max(0.0, mu_m / constants.p_d - 1.0))
            for _ in range(n_sub):
                nu = rng.uniform(0.0, psi[0]) if psi[0] > 0 else 0.0
                eta = rng.uniform(-0.5 * psi[1], 0.5 * psi[1]) if psi[1] > 0 else 0.0
                zeta = rng.uniform(-0.5 * psi[2], 0.5 * psi[2]) if psi[2] > 0 else 0.0
                if rng.random() < constants.p_d:
                    rows.append(
                        _noised_measurement(
                            rng,
                            tau + nu,
                            theta + eta,
                            vartheta + zeta,
                            constants.beta_sub * u_main,
                            noise,
                            constants,
                        )
                    )
                    labels.append(feat.label + "-sub")
        for _ in range(rng.poisson(constants.mu_fp)):
            rows.append(
                (
                    rng.uniform(0.0, constants.tau_max_s),
                    float(wrap_angle(rng.uniform(-math.pi, math.pi))),
                    float(wrap_angle(rng.uniform(-math.pi, math.pi))),
                    constants.gamma_det + rng.exponential(1.0),
                )
            )
            labels.append("fp")
        z = np.array(rows, dtype=float) if rows else np.zeros((0, 4))
        perm = rng.permutation(len(rows))
        z_by_pa.append(z[perm])
        origin_by_pa.append(tuple(labels[i] for i in perm))
    return MeasurementFrame(tuple(z_by_pa), tuple(origin_by_pa))


def synthesize_frames(scenario: Scenario, seed) -> list[MeasurementFrame]:
    """All frames of a scenario, one child RNG stream per time step."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = ss.spawn(scenario.n_steps)
    return [
        synthesize_frame(scenario, n, np.random.default_rng(children[n]))
        for n in range(scenario.n_steps)
    ]


def _loop_trajectory(waypoints, speed: float, dt: float, n_steps: int) -> np.ndarray:
    """Closed smooth path through waypoints, sampled at constant speed.

    A periodic cubic spline over the chord-length parameter is resampled
    uniformly in arc length, so consecutive poses are exactly speed * dt
    apart along the path and the velocity is the path tangent.
    """
    pts = np.vstack([waypoints, waypoints[:1]])
    chord = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(pts, axis=0).T))])
    spline = CubicSpline(chord, pts, bc_type="periodic")
    t_dense = np.linspace(0.0, chord[-1], 20000)
    seg = np.hypot(*np.diff(spline(t_dense), axis=0).T)
    s_dense = np.concatenate([[0.0], np.cumsum(seg)])
    total = s_dense[-1]
    s_n = (speed * dt * np.arange(n_steps)) % total
    t_n = np.interp(s_n, s_dense, t_dense)
    pos = spline(t_n)
    tan = spline(t_n, 1)
    tan /= np.hypot(tan[:, 0], tan[:, 1])[:, None]
    return np.hstack([pos, speed * tan])


def reference_scenario(n_steps: int = 300) -> Scenario:
    """Built-in single-room scenario.

    Rectangular room x in [-6, 6], y in [-2, 7]; one anchor at (0.1, 6); the
    agent rides a smooth waypoint loop at a constant 0.3 m/s, passing within
    about a meter of every wall each lap. Wall order (left, top, right,
    bottom) fixes the feature labels va1..va4; the top and right walls carry
    the nonzero dispersion triples.
    """
    toward = np.array([0.0, 2.2])
    corners = {
        "left": (np.array([-6.0, -2.0]), np.array([-6.0, 7.0])),
        "top": (np.array([-6.0, 7.0]), np.array([6.0, 7.0])),
        "right": (np.array([6.0, 7.0]), np.array([6.0, -2.0])),
        "bottom": (np.array([6.0, -2.0]), np.array([-6.0, -2.0])),
    }
    psi = {
        "left": np.zeros(3),
        "top": np.array([0.2, math.radians(10.0), math.radians(10.0)]),
        "right": np.array([0.1, math.radians(5.0), math.radians(5.0)]),
        "bottom": np.zeros(3),
    }
    surfaces = tuple(
        ScenarioSurface(Surface.from_endpoints(a, b, toward=toward), psi[name])
        for name, (a, b) in corners.items()
    )
    waypoints = np.array(
        [
            [-4.8, -0.8],
            [0.0, -1.0],
            [4.8, -0.8],
            [5.0, 2.5],
            [4.8, 5.8],
            [2.3, 6.2],
            [-2.3, 6.2],
            [-4.8, 5.8],
            [-5.0, 2.5],
        ]
    )
    return Scenario(
        pas=(ScenarioPa(np.array([0.1, 6.0])),),
        surfaces=surfaces,
        trajectory=_loop_trajectory(waypoints, speed=0.3, dt=1.0, n_steps=n_steps),
        constants=ModelConstants(),
    )


class ScenarioParseError(ValueError):
    """Scenario file rejected, with line and field diagnostics."""


def save_scenario(scenario: Scenario, path) -> None:
    """Write the sectioned text form; angles in degrees, distances in meters."""
    lines = ["[constants]"]
    c = scenario.constants
    for name in ModelConstants.__dataclass_fields__:
        lines.append(f"{name} = {getattr(c, name)!r}")
    for pa in scenario.pas:
        lines += [
            "",
            "[pa]",
            f"position = {float(pa.position[0])!r} {float(pa.position[1])!r}",
            f"psi_d_m = {float(pa.psi_m[0])!r}",
            f"psi_theta_deg = {math.degrees(pa.psi_m[1])!r}",
            f"psi_vartheta_deg = {math.degrees(pa.psi_m[2])!r}",
        ]
    for ss in scenario.surfaces:
        s = ss.surface
        toward = s.endpoint_a + s.normal
        lines += [
            "",
            "[surface]",
            f"endpoint_a = {float(s.endpoint_a[0])!r} {float(s.endpoint_a[1])!r}",
            f"endpoint_b = {float(s.endpoint_b[0])!r} {float(s.endpoint_b[1])!r}",
            f"toward = {float(toward[0])!r} {float(toward[1])!r}",
            f"psi_d_m = {float(ss.psi_m[0])!r}",
            f"psi_theta_deg = {math.degrees(ss.psi_m[1])!r}",
            f"psi_vartheta_deg = {math.degrees(ss.psi_m[2])!r}",
        ]
    lines += ["", "[trajectory]"]
    for row in scenario.trajectory:
        lines.append(f"pose = {float(row[0])!r} {float(row[1])!r} {float(row[2])!r} {float(row[3])!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _parse_floats(value: str, count: int, lineno: int, key: str) -> list[float]:
    parts = value.split()
    if len(parts) != count:
        raise ScenarioParseError(f"line {lineno}: field '{key}' needs {count} numbers")
    try:
        return [float(p) for p in parts]
    except ValueError as exc:
        raise ScenarioParseError(f"line {lineno}: field '{key}' is not numeric: {value}") from exc


def _psi_from_record(rec: dict, lineno: int) -> np.ndarray:
    triple = []
    for key, convert in (
        ("psi_d_m", float),
        ("psi_theta_deg", math.radians),
        ("psi_vartheta_deg", math.radians),
    ):
        if key not in rec:
            raise ScenarioParseError(f"line {lineno}: missing field '{key}'")
        triple.append(convert(rec[key][0]))
    return np.array(triple)


def load_scenario(path) -> Scenario:
    """Parse the sectioned text form written by save_scenario."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = fh.readlines()

    constants: dict = {}
    pas: list[ScenarioPa] = []
    surface_records: list[tuple[dict, int]] = []
    poses: list[list[float]] = []
    section = None
    record: dict = {}
    record_line = 0

    known_constants = set(ModelConstants.__dataclass_fields__)
    pa_keys = {"position": 2, "psi_d_m": 1, "psi_theta_deg": 1, "psi_vartheta_deg": 1}
    surface_keys = {
        "endpoint_a": 2,
        "endpoint_b": 2,
        "toward": 2,
        "psi_d_m": 1,
        "psi_theta_deg": 1,
        "psi_vartheta_deg": 1,
    }

    def close_record(lineno: int) -> None:
        nonlocal record
        if section == "pa" and record:
            if "position" not in record:
                raise ScenarioParseError(f"line {lineno}: missing field 'position'")
            pas.append(ScenarioPa(np.array(record["position"]), _psi_from_record(record, lineno)))
        elif section == "surface" and record:
            surface_records.append((record, lineno))
        record = {}

    for lineno, rawline in enumerate(raw, start=1):
        line = rawline.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            close_record(lineno)
            section = line[1:-1].strip().lower()
            record_line = lineno
            if section not in ("constants", "pa", "surface", "trajectory"):
                raise ScenarioParseError(f"line {lineno}: unknown section '[{section}]'")
            continue
        if section is None:
            raise ScenarioParseError(f"line {lineno}: content before any section header")
        if "=" not in line:
            raise ScenarioParseError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if section == "constants":
            if key not in known_constants:
                raise ScenarioParseError(f"line {lineno}: unknown constant '{key}'")
            constants[key] = _parse_floats(value, 1, lineno, key)[0]
        elif section == "pa":
            if key not in pa_keys:
                raise ScenarioParseError(f"line {lineno}: unknown anchor field '{key}'")
            record[key] = _parse_floats(value, pa_keys[key], lineno, key)
        elif section == "surface":
            if key not in surface_keys:
                raise ScenarioParseError(f"line {lineno}: unknown surface field '{key}'")
            record[key] = _parse_floats(value, surface_keys[key], lineno, key)
        elif section == "trajectory":
            if key != "pose":
                raise ScenarioParseError(f"line {lineno}: unknown trajectory field '{key}'")
            poses.append(_parse_floats(value, 4, lineno, key))
    close_record(len(raw))

    surfaces = []
    for rec, lineno in surface_records:
        for key in ("endpoint_a", "endpoint_b", "toward"):
            if key not in rec:
                raise ScenarioParseError(f"line {lineno}: missing field '{key}'")
        surfaces.append(
            ScenarioSurface(
                Surface.from_endpoints(
                    np.array(rec["endpoint_a"]),
                    np.array(rec["endpoint_b"]),
                    toward=np.array(rec["toward"]),
                ),
                _psi_from_record(rec, lineno),
            )
        )
    if not poses or len(poses) < 2:
        raise ScenarioParseError("trajectory needs at least 2 poses")
    if not pas:
        raise ScenarioParseError("scenario needs at least one [pa] section")
    try:
        mc = ModelConstants(**constants)
    except (TypeError, ValueError) as exc:
        raise ScenarioParseError(f"bad [constants] section: {exc}") from exc
    return Scenario(tuple(pas), tuple(surfaces), np.array(poses), mc)


def save_frames(frames, path) -> None:
    """Dump frames as CSV for inspection; one row per measurement."""
    import csv

    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "pa", "z_tau_s", "z_theta_rad", "z_vartheta_rad", "z_u", "origin_label"])
        for t, frame in enumerate(frames):
            for j, (z, labels) in enumerate(zip(frame.z_by_pa, frame.origin_by_pa)):
                for row, label in zip(z, labels):
                    writer.writerow([t, j, *(repr(float(v)) for v in row[:4]), label])
