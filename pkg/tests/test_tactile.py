"""Tactile pipeline tests: normalization, stitching, resize, synchronization."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vtla import tactile
from vtla.errors import ShapeError, ValidationError
from vtla.numerics import SeededRng


def make_frame(forces, ts=0, sensor=0):
    return tactile.ForceFrame(sensor, ts, np.asarray(forces, dtype=np.float64))


def random_frames(seed, n, gh=4, gw=3, lo=-1.0, hi=6.0):
    rng = SeededRng(seed, "tactile-frames")
    return [
        tactile.ForceFrame(0, 1000 * i, rng.uniform((gh, gw, 3), low=lo, high=hi, dtype=np.float64))
        for i in range(n)
    ]


class TestNormalizeForces:
    def test_constant_grid_is_all_zero(self):
        frames = [make_frame(np.full((4, 3, 3), 2.5))]
        out = tactile.normalize_forces(frames, "per-frame")
        assert out.shape == (1, 4, 3, 3)
        assert (out == 0).all()

    def test_analytic_three_values_round_half_up(self):
        grid = np.zeros((1, 3, 3))
        grid[0, :, 0] = [0.0, 5.0, 10.0]
        out = tactile.normalize_forces([make_frame(grid)], "fixed-range", fixed_range=(0.0, 10.0))
        assert list(out[0, 0, :, 0]) == [0, 128, 255]

    def test_episode_scope_min_max_and_order(self):
        frames = random_frames(11, 6)
        out = tactile.normalize_forces(frames, "per-episode")
        stack = np.stack([f.forces for f in frames])
        for c in range(3):
            ch = stack[..., c]
            u = out[..., c]
            assert u[np.unravel_index(ch.argmin(), ch.shape)] == 0
            assert u[np.unravel_index(ch.argmax(), ch.shape)] == 255
        # elementwise oracle
        lo = stack.min(axis=(0, 1, 2))
        hi = stack.max(axis=(0, 1, 2))
        expected = np.clip(np.floor(255.0 * (stack - lo) / (hi - lo) + 0.5), 0, 255).astype(np.uint8)
        assert np.array_equal(out, expected)

    def test_non_finite_rejected_with_index(self):
        frames = random_frames(12, 3)
        frames[1].forces[0, 0, 0] = np.nan
        with pytest.raises(ValidationError, match="index 1"):
            tactile.normalize_forces(frames, "per-episode")

    def test_empty_window(self):
        with pytest.raises(ValidationError):
            tactile.normalize_forces([], "per-episode")

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 9999))
    def test_monotone_per_channel(self, seed):
        frames = random_frames(seed, 3)
        out = tactile.normalize_forces(frames, "per-episode")
        stack = np.stack([f.forces for f in frames])
        for c in range(3):
            f = stack[..., c].reshape(-1)
            u = out[..., c].reshape(-1).astype(int)
            order = np.argsort(f, kind="stable")
            assert (np.diff(u[order]) >= 0).all()


class TestStitch:
    def test_single_sensor_identity(self):
        layout = tactile.SensorLayout(sensor_count=1, stitch_order=(0,))
        grid = np.arange(36, dtype=np.uint8).reshape(4, 3, 3)
        img = tactile.stitch_sensors([grid], layout)
        assert np.array_equal(img.pixels, grid)

    def test_two_sensors_left_block(self):
        layout = tactile.SensorLayout(sensor_count=2, stitch_order=(1, 0))
        g0 = np.zeros((4, 3, 3), dtype=np.uint8)
        g1 = np.full((4, 3, 3), 9, dtype=np.uint8)
        img = tactile.stitch_sensors([g0, g1], layout)
        assert img.pixels.shape == (4, 6, 3)
        assert (img.pixels[:, :3] == 9).all()  # stitch_order[0] == sensor 1
        assert (img.pixels[:, 3:] == 0).all()

    def test_eleven_sensors(self):
        layout = tactile.SensorLayout(sensor_count=11, stitch_order=tuple(range(11)))
        grids = [np.full((4, 3, 3), i, dtype=np.uint8) for i in range(11)]
        img = tactile.stitch_sensors(grids, layout)
        assert img.pixels.shape == (4, 33, 3)

    def test_count_mismatch(self):
        layout = tactile.SensorLayout(sensor_count=2, stitch_order=(0, 1))
        with pytest.raises(ShapeError):
            tactile.stitch_sensors([np.zeros((4, 3, 3), dtype=np.uint8)], layout)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 999), n=st.integers(1, 6))
    def test_crop_recovers_each_sensor(self, seed, n):
        rng = SeededRng(seed, "stitch")
        perm = tuple(int(x) for x in rng.permutation(n))
        layout = tactile.SensorLayout(sensor_count=n, stitch_order=perm)
        grids = [rng.integers(0, 256, (4, 3, 3)).astype(np.uint8) for _ in range(n)]
        img = tactile.stitch_sensors(grids, layout)
        for i, sid in enumerate(perm):
            block = img.pixels[:, i * 3:(i + 1) * 3]
            assert np.array_equal(block, grids[sid])


class TestResize:
    def test_identity(self):
        rng = SeededRng(0, "resize")
        img = tactile.TactileImage(rng.integers(0, 256, (224, 224, 3)).astype(np.uint8))
        out = tactile.resize_nearest(img, 224, 224)
        assert np.array_equal(out.pixels, img.pixels)

    def test_exact_double_duplicates_blocks(self):
        rng = SeededRng(1, "resize2")
        img = tactile.TactileImage(rng.integers(0, 256, (4, 6, 3)).astype(np.uint8))
        out = tactile.resize_nearest(img, 8, 12)
        for i in range(8):
            for j in range(12):
                assert np.array_equal(out.pixels[i, j], img.pixels[i // 2, j // 2])

    def test_membership_upscale(self):
        rng = SeededRng(2, "resize3")
        img = tactile.TactileImage(rng.integers(0, 256, (4, 33, 3)).astype(np.uint8))
        out = tactile.resize_nearest(img, 224, 224)
        assert out.pixels.shape == (224, 224, 3)
        in_set = set(np.unique(img.pixels))
        assert set(np.unique(out.pixels)) <= in_set

    def test_zero_target_rejected(self):
        img = tactile.TactileImage(np.zeros((4, 3, 3), dtype=np.uint8))
        with pytest.raises(ShapeError):
            tactile.resize_nearest(img, 0, 10)


class TestSynchronize:
    def test_identical_timestamps_zero_skew(self):
        ts = [1000 * i for i in range(10)]
        frames = [make_frame(np.zeros((1, 1, 3)), ts=t) for t in ts]
        pairs = tactile.synchronize(frames, ts)
        assert len(pairs) == 10
        assert all(p.skew_us == 0 for p in pairs)

    def test_60hz_vs_30fps(self):
        t0 = 5_000
        tac = np.array([t0 + round(i * 1e6 / 60) for i in range(600)], dtype=np.int64)
        vid = [t0 + round(j * 1e6 / 30) for j in range(300)]
        pairs = tactile.synchronize(tac, vid)
        assert len(pairs) == 300
        assert max(p.skew_us for p in pairs) <= 8334
        picked = [p.tactile_index for p in pairs]
        assert picked == [2 * j for j in range(300)]

    def test_tie_breaks_earlier(self):
        tac = np.array([0, 100], dtype=np.int64)
        pairs = tactile.synchronize(tac, [50])
        assert pairs[0].tactile_index == 0

    def test_empty_streams_rejected(self):
        with pytest.raises(ValidationError):
            tactile.synchronize(np.array([], dtype=np.int64), [0])
        with pytest.raises(ValidationError):
            tactile.synchronize(np.array([0], dtype=np.int64), [])

    def test_output_length_equals_video_frames(self):
        tac = np.arange(0, 100_000, 700, dtype=np.int64)
        vid = list(range(0, 100_000, 1100))
        pairs = tactile.synchronize(tac, vid)
        assert len(pairs) == len(vid)

    @settings(max_examples=25, deadline=None)
    @given(rate_mult=st.integers(1, 6), offset=st.integers(0, 8000))
    def test_skew_bounded_by_half_period(self, rate_mult, offset):
        video_period = 33_333
        tac_period = video_period // rate_mult
        tac = np.arange(offset, 2_000_000 + offset, tac_period, dtype=np.int64)
        vid = list(range(video_period, 1_900_000, video_period))
        pairs = tactile.synchronize(tac, vid, period_us=tac_period)
        assert all(p.skew_us <= tac_period // 2 + 1 for p in pairs)
        assert not any(p.degraded for p in pairs)


class TestFileFormats:
    def test_force_jsonl_round_trip(self, tmp_path):
        frames = random_frames(3, 5)
        path = tmp_path / "force.jsonl"
        tactile.write_force_jsonl(path, frames)
        loaded = tactile.read_force_jsonl(path)
        assert len(loaded) == 5
        for a, b in zip(frames, loaded):
            assert a.sensor_id == b.sensor_id
            assert a.timestamp_us == b.timestamp_us
            assert np.allclose(a.forces, b.forces, atol=1e-5)

    def test_bad_line_reports_number(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"sensor_id": 0, "timestamp_us": 1, "forces": [1, 2, 3], "grid": [1, 1]}\nnot json\n')
        with pytest.raises(ValidationError, match=":2"):
            tactile.read_force_jsonl(path)

    def test_image_blob_round_trip(self, tmp_path):
        rng = SeededRng(4, "blob")
        pixels = rng.integers(0, 256, (7, 9, 3)).astype(np.uint8)
        path = tmp_path / "img.blob"
        tactile.write_image_blob(path, pixels)
        data = path.read_bytes()
        assert len(data) == 12 + 7 * 9 * 3
        assert np.array_equal(tactile.read_image_blob(path), pixels)


class TestPipelineDeterminism:
    def test_same_bytes_in_same_bytes_out(self):
        frames = random_frames(9, 4)
        layout = tactile.SensorLayout(sensor_count=2, grid_h=4, grid_w=3, stitch_order=(0, 1))
        windows = [frames, [make_frame(f.forces + 1.0, f.timestamp_us) for f in frames]]
        img1 = tactile.force_window_to_image(windows, layout, target=24)
        img2 = tactile.force_window_to_image(windows, layout, target=24)
        assert np.array_equal(img1.pixels, img2.pixels)
        assert img1.pixels.shape == (24, 24, 3)
