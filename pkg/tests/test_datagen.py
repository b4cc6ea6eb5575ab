import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emdc.config import SceneGenParams
from emdc.datagen import (
    Scene,
    build_samples,
    generate_dataset,
    generate_scene,
    load_dataset,
    load_sample,
    make_sequence,
    read_depth_png,
    sample_spots,
    save_sample,
    write_depth_png,
)


@pytest.fixture(scope="module")
def scene():
    return generate_scene(0, 192, 256, SceneGenParams(hole_prob=0.0))


@pytest.fixture(scope="module")
def holed_scene():
    return generate_scene(0, 192, 256, SceneGenParams(hole_prob=1.0))


class TestGenerateScene:
    def test_hole_forced(self, holed_scene):
        assert not holed_scene.valid_mask.all()

    def test_deterministic(self):
        a = generate_scene(5, 64, 96)
        b = generate_scene(5, 64, 96)
        np.testing.assert_array_equal(a.rgb, b.rgb)
        np.testing.assert_array_equal(a.gt_depth, b.gt_depth)
        np.testing.assert_array_equal(a.valid_mask, b.valid_mask)

    def test_depth_range(self):
        s = generate_scene(1, 192, 256, SceneGenParams(d_min=0.3, d_max=8.0))
        v = s.gt_depth[s.valid_mask]
        assert v.min() >= 0.3 and v.max() <= 8.0

    def test_invalid_is_zero(self, holed_scene):
        assert np.all(holed_scene.gt_depth[~holed_scene.valid_mask] == 0)

    def test_rgb_range(self, scene):
        assert np.all(np.isfinite(scene.rgb))
        assert scene.rgb.min() >= 0 and scene.rgb.max() <= 1
        assert scene.rgb.shape == (192, 256, 3)

    @pytest.mark.parametrize("h,w", [(100, 128), (64, 48), (16, 32)])
    def test_stride_error(self, h, w):
        with pytest.raises(ValueError, match="divisible by 32"):
            generate_scene(0, h, w)

    def test_has_planes_and_edges(self, scene):
        d = scene.gt_depth
        gx = np.abs(np.diff(d, axis=1))
        # flat or linearly varying surfaces: most second differences vanish
        assert np.mean(np.abs(np.diff(d, 2, axis=1)) < 1e-6) > 0.3
        assert gx.max() > 0.2

    def test_color_edges_not_only_at_depth_edges(self):
        hits = 0
        for seed in range(10):
            s = generate_scene(seed, 64, 64, SceneGenParams(hole_prob=0))
            color_edge = np.abs(np.diff(s.rgb, axis=1)).sum(-1) > 0.3
            depth_flat = np.abs(np.diff(s.gt_depth, axis=1)) < 0.01
            hits += (color_edge & depth_flat).sum()
        assert hits > 0

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10_000))
    def test_invariants_any_seed(self, seed):
        s = generate_scene(seed, 32, 64, SceneGenParams(hole_prob=0.5))
        assert np.all((s.gt_depth > 0) == s.valid_mask)
        v = s.gt_depth[s.valid_mask]
        assert v.min() >= 0.3 and v.max() <= 8.0


class TestSampleSpots:
    def test_exact_without_noise(self, scene):
        sp = sample_spots(scene, (24, 24), jitter_px=0, noise_sigma_rel=0, seed=0)
        np.testing.assert_array_equal(sp.depth[sp.sample_mask], scene.gt_depth[sp.sample_mask])

    def test_count(self, scene):
        assert sample_spots(scene, (24, 24), 2.0, 0.01, 3).count == 576

    def test_hole_drops(self, holed_scene):
        sp = sample_spots(holed_scene, (24, 24), 0, 0, 0)
        assert sp.count < 576
        assert not np.any(sp.sample_mask & ~holed_scene.valid_mask)

    def test_mask_iff_positive(self, scene):
        sp = sample_spots(scene, (24, 24), 3.0, 0.05, 9)
        np.testing.assert_array_equal(sp.sample_mask, sp.depth > 0)

    def test_grid_too_large(self, scene):
        with pytest.raises(ValueError):
            sample_spots(scene, (193, 10))

    def test_noise_is_relative(self, scene):
        sp = sample_spots(scene, (24, 24), 0, 0.01, 1)
        rel = sp.depth[sp.sample_mask] / scene.gt_depth[sp.sample_mask] - 1
        assert 0.005 < rel.std() < 0.015


class TestSequence:
    def test_identical_seeds(self, scene):
        seq = make_sequence(scene, 2, [4, 4])
        np.testing.assert_array_equal(seq.frames[0][1].depth, seq.frames[1][1].depth)

    def test_distinct_frames(self, scene):
        seq = make_sequence(scene, 8, list(range(8)))
        maps = [f.depth.tobytes() for _, f in seq.frames]
        assert len(set(maps)) == 8

    def test_shared_gt(self, scene):
        seq = make_sequence(scene, 3, [1, 2, 3])
        assert all(rgb is scene.rgb for rgb, _ in seq.frames)
        assert seq.gt is scene.gt_depth

    def test_too_short(self, scene):
        with pytest.raises(ValueError):
            make_sequence(scene, 1, [0])


class TestDiskFormat:
    def test_round_trip(self, tmp_path, holed_scene):
        sp = sample_spots(holed_scene, (24, 24), 1, 0.01, 0)
        save_sample(tmp_path, "x", holed_scene, sp)
        sc2, sp2 = load_sample(tmp_path, "x")
        assert np.abs(sc2.gt_depth - holed_scene.gt_depth).max() <= 0.0005
        assert np.abs(sp2.depth - sp.depth).max() <= 0.0005
        np.testing.assert_array_equal(sc2.valid_mask, holed_scene.valid_mask)
        np.testing.assert_array_equal(sp2.sample_mask, sp.sample_mask)
        assert np.abs(sc2.rgb - holed_scene.rgb).max() <= 0.5 / 255 + 1e-12

    def test_overflow(self, tmp_path):
        with pytest.raises(ValueError, match="overflow"):
            write_depth_png(tmp_path / "d.png", np.full((4, 4), 70.0))

    def test_zero_sentinel(self, tmp_path):
        d = np.array([[0.0, 1.5], [2.25, 0.0]])
        write_depth_png(tmp_path / "d.png", d)
        np.testing.assert_array_equal(read_depth_png(tmp_path / "d.png") == 0, d == 0)

    def test_dataset_layout(self, tmp_path):
        m = generate_dataset(tmp_path, 2, (64, 64), seed=1, spots=(8, 8), seq_len=3)
        for sid in ("00000", "00001"):
            for suffix in ("rgb", "gt", "sparse"):
                assert (tmp_path / f"{sid}_{suffix}.png").exists()
            for t in range(3):
                assert (tmp_path / sid / f"frame_{t}_sparse.png").exists()
        on_disk = json.loads((tmp_path / "manifest.json").read_text())
        assert on_disk == m
        loaded = load_dataset(tmp_path)
        mem = build_samples(2, (64, 64), seed=1, spots=(8, 8), seq_len=3)
        for a, b in zip(loaded, mem):
            assert np.abs(a.gt - b.gt).max() <= 0.0005
            assert len(a.frames) == 3
