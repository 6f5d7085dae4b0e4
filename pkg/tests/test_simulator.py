import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pedfusion.simulator import (
    ConfigurationError,
    SceneConfig,
    SimulationWarning,
    footstep_events,
    generate_dataset,
    generate_trajectory,
    ground_truth_box,
    load_manifest,
    project_person,
    render_frame,
    synthesize_audio,
    to_rig,
)

from conftest import stationary

QUIET = dict(noise_snr_db=math.inf)


def brute_force_lag(a, b, max_lag):
    """Lag L maximizing sum_n a[n] b[n + L]: b lags a by L samples."""
    best, best_lag = -np.inf, 0
    n = len(a)
    for lag in range(-max_lag, max_lag + 1):
        if lag >= 0:
            v = float(np.dot(a[:n - lag], b[lag:]))
        else:
            v = float(np.dot(a[-lag:], b[:n + lag]))
        if v > best:
            best, best_lag = v, lag
    return best_lag


class TestConfig:
    def test_defaults_match_rig(self):
        cfg = SceneConfig()
        assert cfg.area_extent == (4.5, 3.5, 3.0)
        assert cfg.sample_rate == 48000
        radii = np.linalg.norm(cfg.mics[:, :2], axis=1)
        np.testing.assert_allclose(radii, 0.5)
        # opposite pairs 1 m apart on perpendicular axes
        assert np.linalg.norm(cfg.mics[0] - cfg.mics[2]) == pytest.approx(1.0)
        assert np.linalg.norm(cfg.mics[1] - cfg.mics[3]) == pytest.approx(1.0)
        assert abs(np.dot(cfg.mics[0] - cfg.mics[2], cfg.mics[1] - cfg.mics[3])) < 1e-12

    @pytest.mark.parametrize("bad", [dict(sample_rate=0), dict(area_extent=(1, -1, 1)),
                                     dict(camera_hfov=180), dict(person_dims=(0, 1, 1)),
                                     dict(mic_positions=((0, 0, 0),))])
    def test_invalid(self, bad):
        with pytest.raises(ConfigurationError):
            SceneConfig(**bad)

    def test_roundtrip(self):
        cfg = SceneConfig(seed=11, noise_snr_db=15)
        assert SceneConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ConfigurationError):
            SceneConfig.from_dict({"nonsense": 1})


class TestTrajectory:
    def test_deterministic(self):
        cfg = SceneConfig(seed=7)
        a = generate_trajectory(cfg, 30.0)
        b = generate_trajectory(cfg, 30.0)
        np.testing.assert_array_equal(a.positions, b.positions)
        c = generate_trajectory(cfg, 30.0, seed=8)
        assert not np.array_equal(a.positions, c.positions)

    def test_count(self):
        assert len(generate_trajectory(SceneConfig(), 10.0)) == 200

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), duration=st.floats(1.0, 40.0))
    def test_bounds_and_speed(self, seed, duration):
        cfg = SceneConfig()
        traj = generate_trajectory(cfg, duration, seed=seed)
        p = traj.positions
        assert np.all(p >= 0) and np.all(p[:, 0] <= 4.5) and np.all(p[:, 1] <= 3.5)
        speed = np.linalg.norm(np.diff(p, axis=0), axis=1) * cfg.frame_rate
        assert np.all(speed <= cfg.max_speed + 1e-9)
        assert np.all(np.abs(traj.headings) <= math.pi)

    @pytest.mark.parametrize("duration", [0.0, -3.0])
    def test_nonpositive_duration(self, duration):
        with pytest.raises(ConfigurationError):
            generate_trajectory(SceneConfig(), duration)


class TestAudio:
    def test_equidistant_zero_lag(self):
        cfg = SceneConfig(**QUIET)
        # on the bisector between front (0) and left (1) microphones
        traj = stationary(cfg, (1.2, 1.2))
        x = synthesize_audio(traj, cfg)
        assert brute_force_lag(x[0], x[1], 200) == 0

    def test_on_axis_lag(self):
        # source on the floor-level axis through front/back mics, beyond the front one
        cfg = SceneConfig(source_height=1.0, **QUIET)
        traj = stationary(cfg, (1.5, 0.0))
        x = synthesize_audio(traj, cfg)
        lag = brute_force_lag(x[0], x[2], 300)
        assert abs(lag - 1.0 / 343.0 * 48000) <= 1.0
        assert lag in (139, 140)

    def test_tdoa_random_positions(self):
        cfg = SceneConfig(**QUIET)
        rng = np.random.default_rng(0)
        mics = cfg.mics
        for _ in range(20):
            xy = rng.uniform([-2.0, -1.5], [2.0, 1.5])
            traj = stationary(cfg, xy, duration=0.6)
            x = synthesize_audio(traj, cfg)
            src = np.array([xy[0], xy[1], 0.0])
            d = np.linalg.norm(mics - src, axis=1)
            for i, j in [(0, 1), (0, 2), (1, 3), (2, 3)]:
                expected = (d[j] - d[i]) / cfg.speed_of_sound * cfg.sample_rate
                assert abs(brute_force_lag(x[i], x[j], 200) - expected) <= 1.0

    def test_amplitude_inverse_distance(self):
        cfg = SceneConfig(**QUIET)
        xy = (1.3, -0.4)
        x = synthesize_audio(stationary(cfg, xy, duration=0.6), cfg)
        d = np.linalg.norm(cfg.mics - np.array([*xy, 0.0]), axis=1)
        amp = np.sqrt(np.sum(x ** 2, axis=1))
        for i in range(1, 4):
            assert amp[i] / amp[0] == pytest.approx(d[0] / d[i], rel=0.01)

    def test_farther_never_louder(self):
        cfg = SceneConfig(**QUIET)
        direction = np.array([0.6, 0.8])
        energies = [np.sum(synthesize_audio(stationary(cfg, r * direction, 0.6), cfg) ** 2, axis=1)
                    for r in (0.8, 1.1, 1.4, 1.7)]
        for near, far in zip(energies, energies[1:]):
            assert np.all(far <= near)

    def test_chunks_match_full_render(self):
        cfg = SceneConfig(seed=5)
        traj = generate_trajectory(cfg, 3.0)
        full = synthesize_audio(traj, cfg)
        part = synthesize_audio(traj, cfg, 50_000, 70_000)
        np.testing.assert_array_equal(full[:, 50_000:70_000], part)

    def test_noise_level(self):
        cfg = SceneConfig(noise_snr_db=20.0)
        far = stationary(cfg, (100.0, 0.0), duration=2.0)  # footsteps negligible
        x = synthesize_audio(far, cfg)
        from pedfusion.simulator import noise_sigma
        assert np.std(x) == pytest.approx(noise_sigma(cfg), rel=0.02)

    def test_step_schedule(self):
        cfg = SceneConfig()
        traj = generate_trajectory(cfg, 60.0)
        times = np.array([s.time for s in footstep_events(traj, cfg)])
        gaps = np.diff(times)
        assert np.all((gaps >= 0.45 - 1e-9) & (gaps <= 0.55 + 1e-9))
        assert len(times) == pytest.approx(120, abs=8)

    def test_clamped_distance_warns(self):
        cfg = SceneConfig(source_height=1.0, **QUIET)
        traj = stationary(cfg, cfg.mics[0][:2])
        with pytest.warns(SimulationWarning):
            x = synthesize_audio(traj, cfg)
        assert np.all(np.isfinite(x))
        assert np.max(np.abs(x[0])) <= cfg.footstep_amplitude * 1.15 / 0.01 + 1e-9


class TestCamera:
    def test_behind_camera_empty(self):
        cfg = SceneConfig()
        traj = stationary(cfg, (-1.5, 0.3))
        _, mask = render_frame(traj, 0.0, cfg, return_mask=True)
        assert project_person((-1.5, 0.3), cfg) is None
        assert not mask.any()

    def test_in_view_person(self):
        cfg = SceneConfig()
        traj = stationary(cfg, (1.8, 0.0))
        img, mask = render_frame(traj, 0.0, cfg, return_mask=True)
        assert img.shape == (240, 320, 3) and img.dtype == np.float32
        assert mask.any()
        cols = np.where(mask.any(axis=0))[0]
        assert abs(cols.mean() - 159.5) < 1.0

    def test_brightness(self):
        cfg = SceneConfig()
        traj = stationary(cfg, (1.8, 0.2))
        full, m1 = render_frame(traj, 0.0, cfg, 1.0, return_mask=True)
        half, m2 = render_frame(traj, 0.0, cfg, 0.5, return_mask=True)
        dark = render_frame(traj, 0.0, cfg, 0.0)
        np.testing.assert_array_equal(m1, m2)
        np.testing.assert_allclose(half, full * 0.5, atol=1e-7)
        assert not dark.any()
        with pytest.raises(ConfigurationError):
            render_frame(traj, 0.0, cfg, 1.5)

    def test_box_matches_trajectory(self):
        cfg = SceneConfig(seed=4)
        traj = generate_trajectory(cfg, 5.0)
        box = ground_truth_box(traj, 2.5, cfg)
        xy = to_rig(traj.position_at(2.5), cfg)
        np.testing.assert_allclose(box.center, (*xy, 0.85))
        assert box.size == cfg.person_dims


class TestDataset:
    def test_layout_and_counts(self, small_dataset):
        root, manifest, cfg = small_dataset
        assert len(manifest["frames"]) == 24 * 20
        assert manifest["audio"]["num_samples"] == 24 * 48000
        assert manifest["audio"]["sample_format"] == "S16LE"
        from scipy.io import wavfile
        rate, data = wavfile.read(root / "audio.wav")
        assert rate == 48000 and data.shape == (24 * 48000, 4) and data.dtype == np.int16
        traj = generate_trajectory(cfg, 24.0)
        for f in manifest["frames"][::37]:
            xy = to_rig(traj.positions[f["index"]], cfg)
            np.testing.assert_allclose(f["box3d"]["center"][:2], xy, atol=1e-6)
            assert (root / f["image"]).exists() and (root / f["mask"]).exists()

    def test_in_fov_flag_matches_mask(self, small_dataset):
        root, manifest, _ = small_dataset
        from PIL import Image
        for f in manifest["frames"][::11]:
            m = np.asarray(Image.open(root / f["mask"])) > 0
            assert f["in_fov"] == bool(m.any())

    def test_same_seed_identical_manifest(self, tmp_path):
        cfg = SceneConfig(seed=9)
        generate_dataset(cfg, 2.0, tmp_path / "a")
        generate_dataset(cfg, 2.0, tmp_path / "b")
        assert (tmp_path / "a/manifest.json").read_bytes() == (tmp_path / "b/manifest.json").read_bytes()
        assert (tmp_path / "a/audio.wav").read_bytes() == (tmp_path / "b/audio.wav").read_bytes()
        assert load_manifest(tmp_path / "a") == json.loads((tmp_path / "a/manifest.json").read_text())

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError):
            generate_dataset(SceneConfig(), 1.0, blocker / "sub")
