from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adapos.errors import AntennaIdError, ConfigurationError, DegenerateSampleError, FormatError
from adapos.sim import (N_TAPS, SPEED_OF_LIGHT, CirDataset, Environment, array_antennas, complex_taps,
                        default_environment, generate_dataset, generate_trajectory, normalize_cir,
                        read_dataset, read_dataset_csv, synthesize_cir, write_dataset, write_dataset_csv)


def los_env(antenna=(0.0, 0.0), bandwidth=100e6):
    """One antenna plus a far-away dummy, no scatterers, no noise: a pure LOS channel."""
    return Environment((0.0, 0.0, 100.0, 100.0), [antenna, (100.0, 100.0)], [], bandwidth, 0.0)


@pytest.fixture(scope="module")
def env():
    return default_environment(seed=3)


@pytest.fixture(scope="module")
def small_dataset(env):
    return generate_dataset(env, generate_trajectory(env, 10.0, 6.6, 1.0, seed=4))


class TestEnvironment:
    def test_defaults(self, env):
        assert env.a_max == 6
        assert env.area == (0.0, 0.0, 20.0, 20.0)
        assert len(env.scatterers) == 24
        assert env.bandwidth_hz == 100e6 and env.noise_std == 0.01

    def test_array_layout(self):
        env = default_environment(layout="arrays", n_antennas=32)
        assert env.a_max == 32
        centers = env.antennas.reshape(4, 8, 2).mean(axis=1)
        assert len(np.unique(centers.round(9), axis=0)) == 4

    def test_array_spacing(self):
        ants = array_antennas((0, 0, 20, 20), 4, 8, 0.5).reshape(4, 8, 2)
        gaps = np.linalg.norm(np.diff(ants, axis=1), axis=-1)
        np.testing.assert_allclose(gaps, 0.5)

    @pytest.mark.parametrize("kwargs", [
        dict(area=(0, 0, 0, 5), antennas=[(0, 0), (1, 1)], scatterers=[]),
        dict(area=(0, 0, 5, 5), antennas=[(0, 0)], scatterers=[]),
        dict(area=(0, 0, 5, 5), antennas=[(0, 0), (1, 1)], scatterers=[(500, 0)]),
        dict(area=(0, 0, 5, 5), antennas=[(0, 0), (1, 1)], scatterers=[], bandwidth_hz=0.0),
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigurationError):
            Environment(**kwargs)


class TestTrajectory:
    def test_sample_count(self, env):
        assert len(generate_trajectory(env, 10.0, 6.6, 1.0, seed=0)) == 66

    def test_zero_speed(self, env):
        tr = generate_trajectory(env, 5.0, 6.6, 0.0, seed=1)
        assert np.all(tr.positions == tr.positions[0])

    def test_deterministic(self, env):
        a = generate_trajectory(env, 20.0, 6.6, 1.0, seed=5)
        b = generate_trajectory(env, 20.0, 6.6, 1.0, seed=5)
        assert a.positions.tobytes() == b.positions.tobytes()

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32), st.floats(0.1, 5.0), st.floats(1.0, 20.0))
    def test_speed_bound_and_area(self, seed, speed, rate):
        env = default_environment()
        tr = generate_trajectory(env, 30.0, rate, speed, seed)
        steps = np.linalg.norm(np.diff(tr.positions, axis=0), axis=1)
        assert np.all(steps <= speed * np.diff(tr.timestamps) + 1e-9)
        assert np.all(np.diff(tr.timestamps) > 0)
        assert np.all(tr.positions >= 0) and np.all(tr.positions <= 20)

    def test_too_small_area(self, env):
        with pytest.raises(ConfigurationError):
            generate_trajectory(env, 10.0, 1.0, 50.0, seed=0)

    def test_too_few_samples(self, env):
        with pytest.raises(ConfigurationError):
            generate_trajectory(env, 0.1, 6.6, 1.0, seed=0)


class TestSynthesis:
    def test_los_peak_index(self):
        # tau * bandwidth = 29.97 / c * 1e8 = 9.997 tap spacings
        cir = synthesize_cir(los_env(), (29.97, 0.0), 0)
        assert cir.shape == (N_TAPS,)
        assert int(np.argmax(np.abs(cir))) == 10
        assert abs(29.97 / SPEED_OF_LIGHT * 1e8 - 10) < 0.01

    def test_zero_distance(self):
        assert int(np.argmax(np.abs(synthesize_cir(los_env(), (0.0, 0.0), 0)))) == 0

    @pytest.mark.parametrize("dist", [6.0, 15.0, 24.0, 33.0])
    def test_doubling_distance_doubles_peak(self, dist):
        k1 = int(np.argmax(np.abs(synthesize_cir(los_env(), (dist, 0.0), 0))))
        k2 = int(np.argmax(np.abs(synthesize_cir(los_env(), (2 * dist, 0.0), 0))))
        assert abs(k2 - 2 * k1) <= 1

    def test_peak_monotone_in_distance(self):
        dists = np.linspace(0.0, 60.0, 200)
        peaks = [int(np.argmax(np.abs(synthesize_cir(los_env(), (d, 0.0), 0)))) for d in dists]
        assert all(b >= a for a, b in zip(peaks, peaks[1:]))

    def test_bad_antenna(self, env):
        with pytest.raises(AntennaIdError):
            synthesize_cir(env, (1.0, 1.0), 6)

    def test_spatial_continuity(self):
        env = default_environment(seed=7, noise_std=0.0)
        rng = np.random.default_rng(0)
        wins, probes = 0, 200
        for _ in range(probes):
            p = rng.uniform(2, 18, 2)
            a = int(rng.integers(0, 6))
            theta = rng.uniform(0, 2 * np.pi)
            u = np.array([np.cos(theta), np.sin(theta)])
            base = normalize_cir(synthesize_cir(env, p, a))
            near = normalize_cir(synthesize_cir(env, p + 0.01 * u, a))
            far = normalize_cir(synthesize_cir(env, p + 5.0 * u, a))
            wins += np.linalg.norm(base - near) < np.linalg.norm(base - far)
        assert wins / probes >= 0.95


class TestNormalize:
    def test_peak_is_one(self):
        raw = np.random.default_rng(0).normal(size=80) + 1j * np.random.default_rng(1).normal(size=80)
        out = normalize_cir(raw)
        assert out.shape == (3, 80)
        assert out[2].max() == 1.0

    def test_pure_real(self):
        out = normalize_cir(np.random.default_rng(0).normal(size=80).astype(complex))
        np.testing.assert_array_equal(out[1], 0.5)

    def test_all_zero(self):
        with pytest.raises(DegenerateSampleError):
            normalize_cir(np.zeros(80, dtype=complex))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32))
    def test_range_and_magnitude_channel(self, seed):
        rng = np.random.default_rng(seed)
        raw = rng.normal(size=(4, 80)) + 1j * rng.normal(size=(4, 80))
        out = normalize_cir(raw)
        assert np.all(out >= 0) and np.all(out <= 1)
        z = complex_taps(out)
        np.testing.assert_allclose(np.abs(z), out[:, 2], atol=1e-12)
        np.testing.assert_allclose(z, raw / np.abs(raw).max(axis=-1, keepdims=True), atol=1e-12)


class TestDataset:
    def test_cardinality(self, small_dataset):
        assert len(small_dataset) == 66
        assert len(small_dataset.samples()) == 396

    def test_tap_range(self, small_dataset):
        assert np.all(small_dataset.taps >= 0) and np.all(small_dataset.taps <= 1)

    def test_antennas_see_different_cirs(self, small_dataset):
        t = small_dataset.taps[0]
        for a in range(1, 6):
            assert not np.allclose(t[0], t[a])

    def test_deterministic(self, env):
        tr = generate_trajectory(env, 5.0, 6.6, 1.0, seed=9)
        assert generate_dataset(env, tr).taps.tobytes() == generate_dataset(env, tr).taps.tobytes()

    def test_sample_order(self, small_dataset):
        keys = [(s.timestamp, s.antenna_id) for s in small_dataset.samples()]
        assert keys == sorted(keys)

    def test_from_samples_roundtrip(self, small_dataset):
        back = CirDataset.from_samples(small_dataset.samples()[::-1])
        assert back.taps.tobytes() == small_dataset.taps.tobytes()


class TestFileFormats:
    def test_binary_roundtrip_is_bitwise(self, small_dataset, tmp_path):
        path = tmp_path / "d.cirds"
        write_dataset(path, small_dataset)
        back = read_dataset(path)
        for name in ("taps", "timestamps", "positions"):
            assert getattr(back, name).tobytes() == getattr(small_dataset, name).tobytes()

    def test_binary_header_and_records(self, small_dataset, tmp_path):
        path = tmp_path / "d.cirds"
        write_dataset(path, small_dataset)
        raw = path.read_bytes()
        header, _, body = raw.partition(b"\n")
        assert header.startswith(b"ADAPOS-CIR version=1")
        assert b"a_max=6" in header and b"taps=80" in header and b"channels=3" in header
        record = 4 + 4 + 8 * 3 + 8 * 240
        assert len(body) == 396 * record
        assert int.from_bytes(body[:4], "little") == record - 4

    def test_truncated_file(self, small_dataset, tmp_path):
        path = tmp_path / "d.cirds"
        write_dataset(path, small_dataset)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(FormatError):
            read_dataset(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.cirds"
        path.write_bytes(b"NOPE\n")
        with pytest.raises(FormatError):
            read_dataset(path)

    def test_csv_is_lossless(self, small_dataset, tmp_path):
        path = tmp_path / "d.csv"
        write_dataset_csv(path, small_dataset)
        back = read_dataset_csv(path)
        assert back.taps.tobytes() == small_dataset.taps.tobytes()
        assert back.positions.tobytes() == small_dataset.positions.tobytes()
