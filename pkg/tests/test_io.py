"""Array container and JSON round-trip tests."""

import json

import numpy as np
import pytest

from rpsfloc import io
from rpsfloc.errors import DataError


class TestImageRoundtrip:
    def test_exact_values_and_meta(self, tmp_path, rng):
        img = rng.normal(size=(12, 17))
        path = tmp_path / "a.rimg"
        io.save_image(path, img, {"label": "x", "n": 3})
        loaded, meta = io.load_image(path)
        np.testing.assert_array_equal(loaded, img)
        assert loaded.dtype == np.float64
        assert meta["label"] == "x"
        assert meta["n"] == 3

    def test_header_is_single_json_line(self, tmp_path):
        path = tmp_path / "a.rimg"
        io.save_image(path, np.zeros((4, 5)))
        first = path.read_bytes().split(b"\n", 1)[0]
        header = json.loads(first)
        assert header["format"] == "rpsfloc-array"
        assert header["kind"] == "image"
        assert header["shape"] == [4, 5]
        assert header["dtype"] == "<f8"

    def test_deterministic_bytes(self, tmp_path):
        img = np.arange(20.0).reshape(4, 5)
        p1, p2 = tmp_path / "1.rimg", tmp_path / "2.rimg"
        io.save_image(p1, img, {"b": 1, "a": 2})
        io.save_image(p2, img, {"a": 2, "b": 1})
        assert p1.read_bytes() == p2.read_bytes()


class TestVolumeRoundtrip:
    def test_hwd_convention(self, tmp_path, rng):
        vol = rng.normal(size=(8, 9, 4))  # (H, W, D)
        path = tmp_path / "v.rvol"
        io.save_volume(path, vol)
        loaded, _ = io.load_volume(path)
        np.testing.assert_array_equal(loaded, vol)

    def test_stored_depth_major(self, tmp_path, rng):
        vol = rng.normal(size=(8, 9, 4))
        path = tmp_path / "v.rvol"
        io.save_volume(path, vol)
        header = json.loads(path.read_bytes().split(b"\n", 1)[0])
        assert header["shape"] == [4, 8, 9]  # (D, H, W) on disk

    def test_kind_mismatch_rejected(self, tmp_path):
        path = tmp_path / "v.rimg"
        io.save_image(path, np.zeros((4, 4)))
        with pytest.raises(DataError):
            io.load_volume(path)


class TestDictionaryRoundtrip:
    def test_config_and_slices_survive(self, tmp_path, small_dictionary):
        path = tmp_path / "d.rpsf"
        io.save_dictionary(path, small_dictionary)
        loaded = io.load_dictionary(path)
        assert loaded.config == small_dictionary.config
        np.testing.assert_array_equal(loaded.slices, small_dictionary.slices)
        np.testing.assert_array_equal(loaded.zetas, small_dictionary.zetas)


class TestCorruptFiles:
    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            io.load_image(tmp_path / "nope.rimg")

    def test_bad_header(self, tmp_path):
        path = tmp_path / "bad.rimg"
        path.write_bytes(b"not json\n\x00\x00")
        with pytest.raises(DataError):
            io.load_image(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "t.rimg"
        io.save_image(path, np.ones((6, 6)))
        raw = path.read_bytes()
        path.write_bytes(raw[:-16])
        with pytest.raises(DataError):
            io.load_image(path)

    def test_wrong_version(self, tmp_path):
        path = tmp_path / "v.rimg"
        io.save_image(path, np.ones((2, 2)))
        head, body = path.read_bytes().split(b"\n", 1)
        header = json.loads(head)
        header["version"] = 999
        path.write_bytes(json.dumps(header, sort_keys=True).encode() + b"\n" + body)
        with pytest.raises(DataError):
            io.load_image(path)


class TestJson:
    def test_canonical_output(self, tmp_path):
        path = tmp_path / "c.json"
        io.save_json(path, {"b": 1, "a": [1, 2]})
        text = path.read_text()
        assert text.endswith("\n")
        assert text.index('"a"') < text.index('"b"')
        assert io.load_json(path) == {"a": [1, 2], "b": 1}

    def test_sha256_stable(self, tmp_path):
        path = tmp_path / "c.json"
        io.save_json(path, {"k": 1})
        assert io.sha256_file(path) == io.sha256_file(path)
        assert len(io.sha256_file(path)) == 64


class TestSceneAndPoints:
    def test_scene_roundtrip(self, tmp_path):
        sources = np.array([[4.5, 8.25, 2.0, 1900.0], [10.0, 3.0, 0.0, 2100.0]])
        path = tmp_path / "s.scene.json"
        io.save_scene(path, sources)
        np.testing.assert_array_equal(io.load_scene(path), sources)

    def test_empty_scene(self, tmp_path):
        path = tmp_path / "e.scene.json"
        io.save_scene(path, np.zeros((0, 4)))
        loaded = io.load_scene(path)
        assert loaded.shape == (0, 4)

    def test_points_roundtrip(self, tmp_path):
        pts = np.array([[1.0, 2.0, 3.0, 140.5]])
        path = tmp_path / "p.points.json"
        io.save_points(path, pts)
        np.testing.assert_array_equal(io.load_points(path), pts)


class TestPreview:
    def test_pgm_magic_and_size(self, tmp_path, rng):
        img = rng.uniform(size=(10, 14))
        path = tmp_path / "prev.pgm"
        io.export_preview_pgm(path, img)
        raw = path.read_bytes()
        assert raw.startswith(b"P5")
        assert b"14 10" in raw[:32]
