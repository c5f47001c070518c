"""Generator and scenario-IO tests with statistical oracles."""

from __future__ import annotations

import csv
import dataclasses
import math

import numpy as np
import pytest
from scipy import stats

from mpslam.geometry import SPEED_OF_LIGHT, is_visible
from mpslam.likelihoods import mean_measurements
from mpslam.world import (
    ModelConstants,
    Scenario,
    ScenarioPa,
    ScenarioParseError,
    ScenarioSurface,
    load_scenario,
    psi_from_native,
    psi_to_native,
    reference_scenario,
    save_frames,
    save_scenario,
    synthesize_frame,
    synthesize_frames,
    true_amplitude,
)

C = ModelConstants()


def _zero_psi(scenario: Scenario, **const_overrides) -> Scenario:
    return Scenario(
        pas=tuple(ScenarioPa(pa.position, np.zeros(3)) for pa in scenario.pas),
        surfaces=tuple(ScenarioSurface(ss.surface, np.zeros(3)) for ss in scenario.surfaces),
        trajectory=scenario.trajectory,
        constants=dataclasses.replace(scenario.constants, **const_overrides),
    )


def _remote_scenario(**const_overrides) -> Scenario:
    """Agent far outside the room: every feature is occluded."""
    ref = reference_scenario(5)
    traj = np.tile([100.0, 100.0, 0.05, 0.0], (5, 1))
    return Scenario(ref.pas, ref.surfaces, traj, dataclasses.replace(C, **const_overrides))


class TestAmplitude:
    def test_reference_point(self):
        assert true_amplitude(1.0, 0, C) == pytest.approx(100.0, rel=1e-12)

    def test_inverse_distance(self):
        assert true_amplitude(2.0, 0, C) == pytest.approx(50.0, rel=1e-12)

    def test_bounce_loss(self):
        assert true_amplitude(1.0, 1, C) == pytest.approx(100.0 * 10.0 ** (-3.0 / 20.0), rel=1e-12)

    def test_domain_error(self):
        with pytest.raises(ValueError):
            true_amplitude(0.0, 0, C)


class TestPsiUnits:
    def test_round_trip(self):
        psi_m = np.array([0.2, 0.1, 0.3])
        native = psi_to_native(psi_m)
        assert native[0] == pytest.approx(0.2 / SPEED_OF_LIGHT, rel=1e-15)
        assert np.allclose(psi_from_native(native), psi_m, rtol=1e-15)


class TestReferenceScenario:
    def test_shape(self):
        sc = reference_scenario()
        assert len(sc.pas) == 1
        assert np.allclose(sc.pas[0].position, [0.1, 6.0])
        assert len(sc.surfaces) == 4
        assert sc.n_steps == 300

    def test_all_features_always_visible(self):
        sc = reference_scenario()
        walls = sc.walls()
        for n in (0, 75, 150, 299):
            pose = sc.pose(n)
            feats = sc.features(0)
            assert len(feats) == 5
            assert all(is_visible(pose.position, f.anchor, walls) for f in feats)

    def test_trajectory_inside_room_and_smooth(self):
        sc = reference_scenario()
        p = sc.trajectory[:, :2]
        assert np.all(p[:, 0] > -6) and np.all(p[:, 0] < 6)
        assert np.all(p[:, 1] > -2) and np.all(p[:, 1] < 7)
        speed = np.hypot(sc.trajectory[:, 2], sc.trajectory[:, 3])
        np.testing.assert_allclose(speed, 0.3, atol=1e-9)
        # constant step length along the path and bounded turn acceleration
        dp = np.diff(p, axis=0)
        np.testing.assert_allclose(np.hypot(dp[:, 0], dp[:, 1]), 0.3, atol=5e-3)
        dv = np.diff(sc.trajectory[:, 2:], axis=0) / C.dt_s
        assert np.max(np.hypot(dv[:, 0], dv[:, 1])) < 0.12
        # every wall gets a close pass within one lap
        for wall in sc.walls():
            d = np.abs((p - wall.endpoint_a) @ wall.normal)
            assert d.min() < 1.5

    def test_dispersed_walls(self):
        sc = reference_scenario()
        psi = np.array([ss.psi_m for ss in sc.surfaces])
        assert np.allclose(psi[1], [0.2, math.radians(10), math.radians(10)])
        assert np.allclose(psi[2], [0.1, math.radians(5), math.radians(5)])
        assert np.all(psi[0] == 0) and np.all(psi[3] == 0)


class TestSynthesize:
    def test_point_features_give_one_measurement_each(self):
        sc = _zero_psi(reference_scenario(5), p_d=1.0, mu_fp=0.0)
        rng = np.random.default_rng(3)
        for n in range(5):
            frame = synthesize_frame(sc, n, rng)
            assert frame.total == 5
            assert sorted(frame.origin_by_pa[0]) == ["pa", "va1", "va2", "va3", "va4"]

    def test_detected_count_matches_mean_formula(self):
        sc = reference_scenario(200)
        rng = np.random.default_rng(4)
        psi = psi_to_native(sc.surfaces[1].psi_m)
        want = float(mean_measurements(psi, sc.constants))
        counts = []
        for _ in range(10_000):
            frame = synthesize_frame(sc, 150, rng)
            counts.append(sum(1 for lab in frame.origin_by_pa[0] if lab.startswith("va2")))
        counts = np.asarray(counts, dtype=float)
        se = counts.std(ddof=1) / math.sqrt(len(counts))
        assert abs(counts.mean() - want) < 3.0 * se

    def test_false_positive_rate_when_occluded(self):
        sc = _remote_scenario()
        rng = np.random.default_rng(5)
        sizes = []
        for _ in range(10_000):
            frame = synthesize_frame(sc, 0, rng)
            assert all(lab == "fp" for lab in frame.origin_by_pa[0])
            sizes.append(frame.total)
        sizes = np.asarray(sizes, dtype=float)
        se = sizes.std(ddof=1) / math.sqrt(len(sizes))
        assert abs(sizes.mean() - 5.0) < 3.0 * se

    def test_false_positive_angles_uniform(self):
        sc = _remote_scenario(mu_fp=25.0)
        rng = np.random.default_rng(6)
        angles = []
        while len(angles) < 100_000:
            frame = synthesize_frame(sc, 0, rng)
            angles.extend(frame.z_by_pa[0][:, 1])
        counts, _ = np.histogram(angles, bins=10, range=(-math.pi, math.pi))
        assert stats.chisquare(counts).pvalue > 0.01

    def test_sub_offsets_follow_dispersion_boxes(self):
        # huge SNR makes the delay noise negligible next to the delay spread,
        # so the one-sided delay box can be checked hard; angle noise scales
        # with distance regardless of SNR, so angles are checked by moments
        sc = reference_scenario(5)
        sc = Scenario(
            sc.pas,
            sc.surfaces,
            sc.trajectory,
            dataclasses.replace(C, snr_1m_db=150.0, p_d=1.0, mu_fp=0.0),
        )
        rng = np.random.default_rng(7)
        pose = sc.pose(2)
        feats = {f.label: f for f in sc.features(0)}
        from mpslam.geometry import true_aoa, true_aod, true_delay, wrap_angle
        from mpslam.likelihoods import default_noise_model

        f2 = feats["va2"]
        tau = true_delay(pose.position, f2.anchor.position)
        theta = true_aoa(pose, f2.anchor.position)
        vartheta = true_aod(pose.position, f2.anchor)
        psi = psi_to_native(f2.psi_m)
        nm = default_noise_model(sc.constants)
        d_tau, d_theta, sig_theta = [], [], []
        for _ in range(800):
            frame = synthesize_frame(sc, 2, rng)
            for row, lab in zip(frame.z_by_pa[0], frame.origin_by_pa[0]):
                if lab != "va2-sub":
                    continue
                assert -1e-12 <= row[0] - tau <= psi[0] + 1e-12
                d_tau.append(row[0] - tau)
                d_theta.append(wrap_angle(row[1] - theta))
                sig_theta.append(nm.k_theta / row[3])
                # departure angle offsets live in the same symmetric box
                assert abs(wrap_angle(row[2] - vartheta)) < 0.5 * psi[2] + 6.5 * nm.k_vartheta / row[3]
        d_tau, d_theta, sig_theta = map(np.asarray, (d_tau, d_theta, sig_theta))
        n = len(d_tau)
        assert n > 800
        # one-sided delay box: mean offset psi_tau/2
        se = psi[0] / math.sqrt(12.0 * n)
        assert abs(d_tau.mean() - 0.5 * psi[0]) < 3.5 * se
        # symmetric angle box: zero-mean, variance psi^2/12 plus noise power
        want_var = psi[1] ** 2 / 12.0 + np.mean(sig_theta**2)
        assert abs(d_theta.mean()) < 3.5 * math.sqrt(want_var / n)
        assert d_theta.var() == pytest.approx(want_var, rel=0.15)

    def test_determinism(self):
        sc = reference_scenario(10)
        a = synthesize_frames(sc, 42)
        b = synthesize_frames(sc, 42)
        for fa, fb in zip(a, b):
            assert fa.origin_by_pa == fb.origin_by_pa
            for za, zb in zip(fa.z_by_pa, fb.z_by_pa):
                assert np.array_equal(za, zb)

    def test_different_seeds_differ(self):
        sc = reference_scenario(10)
        a = synthesize_frames(sc, 42)
        b = synthesize_frames(sc, 43)
        assert any(
            not np.array_equal(fa.z_by_pa[0], fb.z_by_pa[0]) for fa, fb in zip(a, b)
        )

    def test_los_only_scenario(self):
        ref = reference_scenario(5)
        sc = Scenario(ref.pas, (), ref.trajectory, dataclasses.replace(C, mu_fp=0.0, p_d=1.0))
        frame = synthesize_frame(sc, 0, np.random.default_rng(8))
        assert frame.total == 1
        assert frame.origin_by_pa[0] == ("pa",)

    def test_measurement_ranges(self):
        sc = reference_scenario(5)
        frames = synthesize_frames(sc, 9)
        for frame in frames:
            z = frame.z_by_pa[0]
            assert np.all(z[:, 0] >= 0) and np.all(z[:, 0] <= C.tau_max_s)
            assert np.all(z[:, 1] > -math.pi) and np.all(z[:, 1] <= math.pi)
            assert np.all(z[:, 2] > -math.pi) and np.all(z[:, 2] <= math.pi)
            assert np.all(z[:, 3] >= C.gamma_det)


class TestScenarioIO:
    def test_round_trip(self, tmp_path):
        sc = reference_scenario(7)
        path = tmp_path / "scene.txt"
        save_scenario(sc, path)
        back = load_scenario(path)
        assert len(back.pas) == 1 and len(back.surfaces) == 4
        assert np.array_equal(back.trajectory, sc.trajectory)
        assert np.array_equal(back.pas[0].position, sc.pas[0].position)
        assert np.array_equal(back.pas[0].psi_m, sc.pas[0].psi_m)
        for sa, sb in zip(sc.surfaces, back.surfaces):
            assert np.array_equal(sa.surface.endpoint_a, sb.surface.endpoint_a)
            assert np.array_equal(sa.surface.endpoint_b, sb.surface.endpoint_b)
            assert np.array_equal(sa.surface.normal, sb.surface.normal)
            assert np.allclose(sa.psi_m, sb.psi_m, rtol=0, atol=1e-15)
        assert back.constants == sc.constants

    def test_malformed_dispersion_field(self, tmp_path):
        sc = reference_scenario(3)
        path = tmp_path / "scene.txt"
        save_scenario(sc, path)
        text = path.read_text().replace("psi_theta_deg = 10.0", "psi_theta_deg = ten")
        path.write_text(text)
        with pytest.raises(ScenarioParseError, match="psi_theta_deg"):
            load_scenario(path)

    def test_missing_field(self, tmp_path):
        sc = reference_scenario(3)
        path = tmp_path / "scene.txt"
        save_scenario(sc, path)
        text = "\n".join(
            line for line in path.read_text().splitlines() if not line.startswith("position")
        )
        path.write_text(text)
        with pytest.raises(ScenarioParseError, match="position"):
            load_scenario(path)

    def test_unknown_key_and_stray_content(self, tmp_path):
        path = tmp_path / "scene.txt"
        path.write_text("[constants]\nwarp_factor = 9\n")
        with pytest.raises(ScenarioParseError, match="warp_factor"):
            load_scenario(path)
        path.write_text("dt_s = 1\n")
        with pytest.raises(ScenarioParseError, match="before any section"):
            load_scenario(path)

    def test_too_few_poses(self, tmp_path):
        path = tmp_path / "scene.txt"
        path.write_text(
            "[pa]\nposition = 0 0\npsi_d_m = 0\npsi_theta_deg = 0\npsi_vartheta_deg = 0\n"
            "[trajectory]\npose = 0 0 1 0\n"
        )
        with pytest.raises(ScenarioParseError, match="at least 2"):
            load_scenario(path)


class TestFrameDump:
    def test_csv_shape(self, tmp_path):
        sc = reference_scenario(4)
        frames = synthesize_frames(sc, 11)
        path = tmp_path / "frames.csv"
        save_frames(frames, path)
        with open(path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["t", "pa", "z_tau_s", "z_theta_rad", "z_vartheta_rad", "z_u", "origin_label"]
        assert len(rows) - 1 == sum(f.total for f in frames)
        first = rows[1]
        assert int(first[0]) == 0 and int(first[1]) == 0
        assert float(first[2]) >= 0.0
