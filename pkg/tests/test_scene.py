"""Scene sampling, rasterization, and dataset generation tests."""

import numpy as np
import pytest

from rpsfloc import io
from rpsfloc.errors import CapacityError, ConfigurationError, DomainError
from rpsfloc.forward import NoiseModel, add_noise, apply_forward
from rpsfloc.scene import (
    DatasetSpec,
    FLUX_STREAM,
    NOISE_STREAM,
    PLACEMENT_STREAM,
    generate_dataset,
    rasterize,
    sample_scene,
    substream,
)


def _spec(**kwargs):
    base = dict(
        num_images=4,
        image_size=(32, 32),
        num_planes=5,
        density=6,
        flux_mean=2000.0,
        margin=4.0,
        seed=7,
    )
    base.update(kwargs)
    return DatasetSpec(**base)


class TestDatasetSpec:
    def test_validation(self):
        with pytest.raises(ConfigurationError):
            _spec(num_images=0)
        with pytest.raises(ConfigurationError):
            _spec(flux_mean=0.0)
        with pytest.raises(ConfigurationError):
            _spec(margin=20.0)  # 2*margin >= min(h, w) - 1
        with pytest.raises(ConfigurationError):
            _spec(density=(10, 5))  # inverted range
        with pytest.raises(ConfigurationError):
            _spec(density_schedule=(1, 2))  # wrong length

    def test_describe_roundtrip(self):
        spec = _spec(density=(3, 9), min_separation=2.0)
        assert DatasetSpec.from_dict(spec.describe()) == spec

    def test_schedule_roundtrip(self):
        spec = _spec(density_schedule=(2, 4, 6, 8))
        assert DatasetSpec.from_dict(spec.describe()) == spec


class TestSubstreams:
    def test_independent_purposes(self):
        a = substream(7, PLACEMENT_STREAM, 0).uniform(size=5)
        b = substream(7, FLUX_STREAM, 0).uniform(size=5)
        c = substream(7, NOISE_STREAM, 0).uniform(size=5)
        assert not np.allclose(a, b)
        assert not np.allclose(b, c)

    def test_reproducible(self):
        x = substream(7, PLACEMENT_STREAM, 3).uniform(size=4)
        y = substream(7, PLACEMENT_STREAM, 3).uniform(size=4)
        np.testing.assert_array_equal(x, y)


class TestSampleScene:
    def test_deterministic_per_index(self):
        spec = _spec()
        a = sample_scene(spec, 1)
        b = sample_scene(spec, 1)
        c = sample_scene(spec, 2)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_count_and_bounds(self):
        spec = _spec(density=6, margin=4.0)
        s = sample_scene(spec, 0)
        assert s.shape == (6, 4)
        assert s[:, 0].min() >= 4.0 and s[:, 0].max() <= 27.0
        assert s[:, 1].min() >= 4.0 and s[:, 1].max() <= 27.0
        assert s[:, 2].min() >= 0.0 and s[:, 2].max() <= 4.0
        assert (s[:, 3] > 0).all()

    def test_density_range_varies(self):
        spec = _spec(num_images=12, density=(2, 9))
        counts = [sample_scene(spec, i).shape[0] for i in range(12)]
        assert min(counts) >= 2 and max(counts) <= 9
        assert len(set(counts)) > 1

    def test_density_schedule_exact(self):
        spec = _spec(density_schedule=(1, 3, 5, 7))
        for i, want in enumerate((1, 3, 5, 7)):
            assert sample_scene(spec, i).shape[0] == want

    def test_min_separation_respected(self):
        spec = _spec(density=8, min_separation=3.0)
        s = sample_scene(spec, 0)
        d = np.sqrt(((s[:, None, :3] - s[None, :, :3]) ** 2).sum(-1))
        np.fill_diagonal(d, np.inf)
        assert d.min() >= 3.0

    def test_impossible_packing_raises(self):
        spec = _spec(density=40, min_separation=15.0)
        with pytest.raises(CapacityError):
            sample_scene(spec, 0)

    def test_single_plane_z_is_zero(self):
        spec = _spec(num_planes=1)
        s = sample_scene(spec, 0)
        assert (s[:, 2] == 0.0).all()

    def test_index_out_of_range(self):
        with pytest.raises(ConfigurationError):
            sample_scene(_spec(), 4)

    def test_fluxes_are_positive_counts(self):
        s = sample_scene(_spec(density=20, image_size=(64, 64)), 0)
        np.testing.assert_array_equal(s[:, 3], np.round(s[:, 3]))
        assert s[:, 3].min() >= 1.0


class TestRasterize:
    def test_half_up_rounding(self):
        grid = (8, 8, 3)
        vol = rasterize(np.array([[2.5, 2.49, 1.5, 10.0]]), grid)
        assert vol[3, 2, 2] == 10.0  # .5 rounds up, .49 rounds down

    def test_top_edge_clips_to_last_voxel(self):
        vol = rasterize(np.array([[6.7, 6.5, 1.9, 4.0]]), (7, 7, 2))
        assert vol[6, 6, 1] == 4.0

    def test_accumulates_shared_voxel(self):
        vol = rasterize(
            np.array([[1.1, 1.0, 0.0, 3.0], [0.9, 1.2, 0.1, 5.0]]), (4, 4, 1)
        )
        assert vol[1, 1, 0] == 8.0

    def test_empty_scene(self):
        vol = rasterize(np.zeros((0, 4)), (4, 4, 2))
        assert vol.shape == (4, 4, 2)
        assert vol.sum() == 0.0

    def test_flux_conserved(self, rng):
        n = 30
        src = np.column_stack(
            [
                rng.uniform(0, 15, n),
                rng.uniform(0, 15, n),
                rng.uniform(0, 4, n),
                rng.uniform(1, 100, n),
            ]
        )
        vol = rasterize(src, (16, 16, 5))
        assert vol.sum() == pytest.approx(src[:, 3].sum())

    def test_rejects_bad_sources(self):
        with pytest.raises(DomainError):
            rasterize(np.array([[1.0, 1.0, 0.0, 0.0]]), (4, 4, 1))  # flux 0
        with pytest.raises(DomainError):
            rasterize(np.array([[9.0, 1.0, 0.0, 5.0]]), (4, 4, 1))  # out of grid


class TestGenerateDataset:
    def test_files_and_manifest(self, tmp_path, small_dictionary):
        spec = _spec(num_images=2)
        noise = NoiseModel("gaussian", sigma=2.0, background=5.0)
        manifest = generate_dataset(spec, small_dictionary, noise, tmp_path / "ds")
        assert manifest["format"] == "rpsfloc-dataset"
        assert len(manifest["images"]) == 2
        for entry in manifest["images"]:
            for key in ("scene", "clean", "observed"):
                assert (tmp_path / "ds" / entry[key]).is_file()
        stored = io.load_json(tmp_path / "ds" / "dataset_manifest.json")
        assert stored == manifest

    def test_clean_image_matches_forward_model(self, tmp_path, small_dictionary):
        spec = _spec(num_images=1)
        noise = NoiseModel("poisson", background=3.0)
        manifest = generate_dataset(spec, small_dictionary, noise, tmp_path / "ds")
        entry = manifest["images"][0]
        scene = io.load_scene(tmp_path / "ds" / entry["scene"])
        clean, _ = io.load_image(tmp_path / "ds" / entry["clean"])
        vol = rasterize(scene, small_dictionary.volume_shape)
        np.testing.assert_allclose(
            clean, apply_forward(small_dictionary, vol, 3.0), atol=1e-12
        )

    def test_observed_uses_noise_substream(self, tmp_path, small_dictionary):
        spec = _spec(num_images=2)
        noise = NoiseModel("poisson", background=1.0)
        manifest = generate_dataset(spec, small_dictionary, noise, tmp_path / "ds")
        entry = manifest["images"][1]
        clean, _ = io.load_image(tmp_path / "ds" / entry["clean"])
        observed, _ = io.load_image(tmp_path / "ds" / entry["observed"])
        again = add_noise(clean, noise, [spec.seed, NOISE_STREAM, 1])
        np.testing.assert_array_equal(observed, again)

    def test_hashes_recorded_match_files(self, tmp_path, small_dictionary):
        spec = _spec(num_images=1)
        noise = NoiseModel("gaussian", sigma_frac=0.05)
        manifest = generate_dataset(spec, small_dictionary, noise, tmp_path / "ds")
        entry = manifest["images"][0]
        for key in ("scene", "clean", "observed"):
            assert entry["sha256"][key] == io.sha256_file(tmp_path / "ds" / entry[key])

    def test_regeneration_is_byte_identical(self, tmp_path, small_dictionary):
        spec = _spec(num_images=2)
        noise = NoiseModel("gaussian", sigma=1.0)
        m1 = generate_dataset(spec, small_dictionary, noise, tmp_path / "d1")
        m2 = generate_dataset(spec, small_dictionary, noise, tmp_path / "d2")
        for e1, e2 in zip(m1["images"], m2["images"]):
            assert e1["sha256"] == e2["sha256"]
