"""Tests for phantoms, the projection pipeline and the synthetic dataset."""

import json

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from src.metrics.quality import rmse
from src.synth.dataset import (MANIFEST_NAME, SIZE_GROUPS, CorruptionConfig, SamplePair, generate_sample,
                               load_dataset, load_manifest, simulate_pair, synth_dataset, to_uint8)
from src.synth.phantom import (Ellipse, MetalDisk, MetalSpec, PhantomSpec, disk_centers,
                               make_phantom, metal_pair_spec, preset_radius, random_phantom_spec)
from src.synth.tomography import (SinogramConfig, corrupt_metal, directional_streak_ratio, disk_mask,
                                  fbp, radon)
from src.tensor.serialization import read_mart
from src.utils.errors import ConfigurationError, DatasetError, ShapeError


# =============================================================================
# Phantoms and metal
# =============================================================================

class TestPhantom:

    def test_random_phantom_in_range(self, rng):
        image = make_phantom(random_phantom_spec(64, rng))
        assert image.shape == (64, 64)
        assert image.min() >= 0.0 and image.max() <= 1.0
        # corners lie outside the body ellipse
        assert image[0, 0] == 0.0 and image[-1, -1] == 0.0

    def test_single_ellipse_intensity(self):
        image = make_phantom(PhantomSpec(n=32, ellipses=[Ellipse((0.0, 0.0), (0.5, 0.5), 0.0, 0.3)]))
        assert image[16, 16] == pytest.approx(0.3)
        assert set(np.unique(image)) == {0.0, 0.3}

    @pytest.mark.parametrize("ellipse", [
        Ellipse((0.0, 0.0), (0.5, 0.5), 0.0, 0.9),
        Ellipse((0.7, 0.0), (0.5, 0.2), 0.0, 0.5),
    ])
    def test_invalid_ellipses(self, ellipse):
        with pytest.raises(ConfigurationError):
            PhantomSpec(n=32, ellipses=[ellipse])

    def test_preset_radius_scales_with_grid(self):
        assert preset_radius("large", 416) == pytest.approx(20.0)
        assert preset_radius("large", 208) == pytest.approx(10.0)
        assert preset_radius("tiny", 416) < preset_radius("small", 416) < preset_radius("medium", 416)

    def test_unknown_group(self):
        with pytest.raises(ConfigurationError):
            preset_radius("huge", 128)

    def test_metal_mask(self):
        spec = MetalSpec(disks=[MetalDisk(10.0, 10.0, 2.0)])
        mask = spec.mask(32)
        assert mask.dtype == bool
        assert mask.sum() == 13
        assert mask[10, 10] and mask[12, 10] and not mask[12, 12]

    def test_pair_on_midline(self):
        spec = metal_pair_spec(64, "medium")
        (r1, c1), (r2, c2) = disk_centers(spec)
        assert r1 == r2
        assert c2 - c1 == pytest.approx(32.0)


# =============================================================================
# Projection and reconstruction
# =============================================================================

class TestTomography:

    def test_radon_shape_and_zero(self):
        cfg = SinogramConfig(n_angles=30)
        assert radon(np.zeros((16, 16)), cfg).shape == (30, 16)
        assert not radon(np.zeros((16, 16)), cfg).any()

    def test_radon_mass_is_angle_independent(self):
        disk = disk_mask(64, 0.5).astype(np.float64)
        totals = radon(disk, SinogramConfig(n_angles=12)).sum(axis=1)
        assert_allclose(totals, totals[0], rtol=0.05)

    def test_radon_rejects_rectangles(self):
        with pytest.raises(ShapeError):
            radon(np.zeros((8, 10)))

    def test_too_few_angles(self):
        with pytest.raises(ConfigurationError):
            SinogramConfig(n_angles=1)

    def test_fbp_round_trip(self, rng):
        cfg = SinogramConfig(n_angles=180)
        tissue = make_phantom(random_phantom_spec(64, rng))
        restored = fbp(radon(tissue, cfg), cfg)
        assert rmse(tissue, restored, disk_mask(64, 0.8)) < 0.05

    def test_fbp_clip_range(self, rng):
        cfg = SinogramConfig(n_angles=20)
        image = fbp(rng.normal(0.0, 5.0, size=(20, 32)), cfg)
        assert image.min() >= 0.0 and image.max() <= 1.5

    def test_fbp_rejects_wrong_angle_count(self):
        with pytest.raises(ShapeError):
            fbp(np.zeros((10, 16)), SinogramConfig(n_angles=12))

    def test_corruption_without_metal_is_a_copy(self, rng):
        sino = rng.random((10, 16))
        out = corrupt_metal(sino, np.zeros_like(sino), rng=rng)
        assert_array_equal(out, sino)
        assert out is not sino

    def test_corruption_saturates_metal_rays(self):
        tissue = np.full((4, 8), 0.4)
        metal = np.zeros((4, 8))
        metal[:, 3:5] = 2.0
        out = corrupt_metal(tissue, metal, gamma=0.3, cap=1.0, noise_fraction=0.0)
        assert_array_equal(out[:, 3:5], 1.0)
        assert_array_equal(out[:, :3], 0.4)

    def test_corruption_shape_mismatch(self):
        with pytest.raises(ShapeError):
            corrupt_metal(np.zeros((4, 8)), np.zeros((4, 9)))

    def test_metal_free_pipeline_matches_gt(self, rng):
        tissue = make_phantom(random_phantom_spec(64, rng))
        image, gt, mask = simulate_pair(tissue, MetalSpec(), SinogramConfig(), CorruptionConfig(), rng)
        assert not mask.any()
        assert rmse(gt, image, disk_mask(64, 0.8)) < 0.05

    def test_metal_streaks_are_directional(self):
        n = 64
        tissue = make_phantom(random_phantom_spec(n, np.random.default_rng(0)))
        pair = metal_pair_spec(n, "large")
        image, gt, _ = simulate_pair(tissue, pair, SinogramConfig(), CorruptionConfig(),
                                     np.random.default_rng(0))
        ratio = directional_streak_ratio(image - gt, disk_centers(pair), support=disk_mask(n, 0.9))
        assert ratio >= 2.0

    def test_streak_ratio_needs_two_centers(self):
        with pytest.raises(ConfigurationError):
            directional_streak_ratio(np.zeros((16, 16)), [(8.0, 8.0)])


# =============================================================================
# Dataset
# =============================================================================

class TestSamples:

    def test_generation_is_deterministic(self):
        a = generate_sample(3, 7, 32, "large", SinogramConfig(n_angles=40))
        b = generate_sample(3, 7, 32, "large", SinogramConfig(n_angles=40))
        assert_array_equal(a.input, b.input)
        assert_array_equal(a.gt, b.gt)
        assert_array_equal(a.mask, b.mask)

    def test_sample_id_changes_the_draw(self):
        a = generate_sample(0, 7, 32, "large", SinogramConfig(n_angles=40))
        b = generate_sample(1, 7, 32, "large", SinogramConfig(n_angles=40))
        assert not np.array_equal(a.gt, b.gt)

    def test_measured_group(self):
        sample = generate_sample(0, 0, 128, "large")
        assert sample.group == "large"
        assert sample.metadata["preset"] == "large"
        assert sample.metal_px == int(sample.mask.sum())

    def test_pair_shapes_must_match(self):
        with pytest.raises(DatasetError):
            SamplePair(0, np.zeros((4, 4)), np.zeros((4, 4)), np.zeros((4, 5)))

    def test_to_uint8(self):
        out = to_uint8(np.array([-1.0, 0.0, 0.5, 1.0, 2.0]))
        assert_array_equal(out, [0, 0, 128, 255, 255])
        assert out.dtype == np.uint8


class TestDataset:

    @pytest.fixture
    def dataset(self, tmp_path):
        root = tmp_path / "data"
        manifest = synth_dataset(4, root, seed=5, n=32, n_angles=30, export_pgm=True)
        return root, manifest

    def test_manifest_layout(self, dataset):
        root, manifest = dataset
        assert (root / MANIFEST_NAME).is_file()
        assert manifest["grid"] == 32 and manifest["n_angles"] == 30
        assert [s["id"] for s in manifest["samples"]] == [0, 1, 2, 3]
        assert manifest["calibration"] == {"slope": 2000.0, "intercept": -1000.0}
        for entry in manifest["samples"]:
            assert (root / entry["input"]).is_file()
            assert entry["seed"] == [5, entry["id"]]
        assert load_manifest(root) == json.loads((root / MANIFEST_NAME).read_text())

    def test_previews_written(self, dataset):
        root, _ = dataset
        assert sorted(p.name for p in (root / "previews").iterdir())[:2] == ["00000_gt.pgm", "00000_input.pgm"]

    def test_load_matches_generation(self, dataset):
        root, manifest = dataset
        pairs = load_dataset(root)
        assert len(pairs) == 4
        expected = generate_sample(2, 5, 32, "small", SinogramConfig(n_angles=30))
        assert_array_equal(pairs[2].input, expected.input)
        assert_array_equal(pairs[2].mask, expected.mask)
        assert pairs[2].group == manifest["samples"][2]["group"]

    def test_entry_seed_regenerates_its_sample(self, dataset):
        root, manifest = dataset
        entry = manifest["samples"][3]
        master_seed, sample_id = entry["seed"]
        regenerated = generate_sample(sample_id, master_seed, 32, SIZE_GROUPS[sample_id % len(SIZE_GROUPS)],
                                      SinogramConfig(n_angles=30))
        assert regenerated.seed == (5, 3)
        assert_array_equal(regenerated.input, read_mart(root / entry["input"]))
        assert load_dataset(root)[3].seed == (5, 3)

    def test_load_limit(self, dataset):
        root, _ = dataset
        assert [p.sample_id for p in load_dataset(root, limit=2)] == [0, 1]

    def test_parallel_matches_serial(self, tmp_path):
        synth_dataset(3, tmp_path / "a", seed=1, n=16, n_angles=20, max_workers=1)
        synth_dataset(3, tmp_path / "b", seed=1, n=16, n_angles=20, max_workers=3)
        for a, b in zip(load_dataset(tmp_path / "a"), load_dataset(tmp_path / "b")):
            assert_array_equal(a.input, b.input)

    @pytest.mark.parametrize("kwargs", [dict(count=0), dict(count=2, size_mix=["huge"]),
                                        dict(count=2, size_mix=[])])
    def test_invalid_requests(self, tmp_path, kwargs):
        with pytest.raises(DatasetError):
            synth_dataset(out_dir=tmp_path, n=16, n_angles=20, **kwargs)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetError):
            load_dataset(tmp_path)

    def test_manifest_schema_violation(self, dataset):
        root, manifest = dataset
        manifest["version"] = 99
        (root / MANIFEST_NAME).write_text(json.dumps(manifest))
        with pytest.raises(DatasetError):
            load_manifest(root)

    def test_missing_sample_file(self, dataset):
        root, manifest = dataset
        (root / manifest["samples"][1]["gt"]).unlink()
        with pytest.raises(DatasetError):
            load_dataset(root)
