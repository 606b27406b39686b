"""File formats: binary arrays, scene/point JSON, manifests, previews.

Array container: a single file holding one UTF-8 JSON header line
terminated by ``\\n`` followed by raw little-endian float64 bytes in C
order.  The header records the format name, version, dtype tag,
byte order, stored shape, a kind tag ("image", "volume",
"psf_dictionary"), and a free-form ``meta`` object.  Volumes are stored
in (plane, row, col) order and returned as (H, W, D); images are stored
as (H, W).

Conventional extensions: ``.rimg`` images, ``.rvol`` volumes, ``.rpsf``
dictionaries.  All writers are deterministic (no timestamps, sorted
JSON keys) so byte-identical reproduction only requires identical
inputs.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import DataError, ShapeError
from .optics import OpticalConfig, PsfDictionary

FORMAT_NAME = "rpsfloc-array"
FORMAT_VERSION = 1
_DTYPE = "<f8"


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(", ", ": "))


def save_json(path, obj) -> None:
    """Write canonical JSON (sorted keys, 2-space indent, trailing newline)."""
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    Path(path).write_text(text, encoding="utf-8")


def load_json(path):
    p = Path(path)
    if not p.is_file():
        raise DataError(f"missing JSON file: {p}")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed JSON in {p}: {exc}") from exc


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _save_array(path, stored: np.ndarray, kind: str, meta: dict | None) -> None:
    arr = np.ascontiguousarray(stored, dtype=np.float64)
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "dtype": _DTYPE,
        "byteorder": "little",
        "kind": kind,
        "shape": list(arr.shape),
        "meta": meta or {},
    }
    with open(path, "wb") as fh:
        fh.write(_dump_json(header).encode("utf-8"))
        fh.write(b"\n")
        fh.write(arr.astype("<f8", copy=False).tobytes(order="C"))


def _load_array(path, expect_kind: str | None = None):
    p = Path(path)
    if not p.is_file():
        raise DataError(f"missing array file: {p}")
    with open(p, "rb") as fh:
        line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"unreadable array header in {p}: {exc}") from exc
    if header.get("format") != FORMAT_NAME:
        raise DataError(f"{p} is not a {FORMAT_NAME} file")
    if header.get("version") != FORMAT_VERSION:
        raise DataError(f"{p}: unsupported format version {header.get('version')}")
    if header.get("dtype") != _DTYPE:
        raise DataError(f"{p}: unsupported dtype {header.get('dtype')}")
    shape = tuple(header.get("shape", ()))
    expected = int(np.prod(shape, dtype=np.int64)) * 8 if shape else 0
    if len(payload) != expected:
        raise DataError(
            f"{p}: payload is {len(payload)} bytes, header implies {expected}"
        )
    if expect_kind is not None and header.get("kind") != expect_kind:
        raise DataError(
            f"{p}: kind is {header.get('kind')!r}, expected {expect_kind!r}"
        )
    arr = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    return arr, header


def save_image(path, image: np.ndarray, meta: dict | None = None) -> None:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeError("image must be 2-D")
    _save_array(path, img, "image", meta)


def load_image(path):
    """Return (image (H, W), meta dict)."""
    arr, header = _load_array(path, expect_kind="image")
    return arr, header["meta"]


def save_volume(path, volume: np.ndarray, meta: dict | None = None) -> None:
    vol = np.asarray(volume, dtype=np.float64)
    if vol.ndim != 3:
        raise ShapeError("volume must be 3-D (H, W, D)")
    _save_array(path, np.moveaxis(vol, 2, 0), "volume", meta)


def load_volume(path):
    """Return (volume (H, W, D), meta dict)."""
    arr, header = _load_array(path, expect_kind="volume")
    return np.ascontiguousarray(np.moveaxis(arr, 0, 2)), header["meta"]


def save_dictionary(path, dictionary: PsfDictionary) -> None:
    cfg = dictionary.config
    meta = {
        "num_zones": cfg.num_zones,
        "num_planes": cfg.num_planes,
        "image_shape": list(cfg.image_shape),
        "pixel_pitch": cfg.pixel_pitch,
        "pupil_samples": cfg.pupil_samples,
        "zetas": [float(z) for z in dictionary.zetas],
    }
    _save_array(path, dictionary.slices, "psf_dictionary", meta)


def load_dictionary(path) -> PsfDictionary:
    arr, header = _load_array(path, expect_kind="psf_dictionary")
    meta = header["meta"]
    try:
        cfg = OpticalConfig(
            num_zones=int(meta["num_zones"]),
            num_planes=int(meta["num_planes"]),
            image_shape=tuple(int(v) for v in meta["image_shape"]),
            pixel_pitch=float(meta["pixel_pitch"]),
            pupil_samples=int(meta["pupil_samples"]),
        )
        zetas = np.asarray(meta["zetas"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: incomplete dictionary metadata: {exc}") from exc
    return PsfDictionary(slices=arr, zetas=zetas, config=cfg)


def save_scene(path, sources: np.ndarray) -> None:
    """Write a source list as a JSON array of {x, y, z, flux}."""
    arr = np.asarray(sources, dtype=np.float64).reshape(-1, 4)
    rows = [
        {"x": float(x), "y": float(y), "z": float(z), "flux": float(f)}
        for x, y, z, f in arr
    ]
    save_json(path, rows)


def load_scene(path) -> np.ndarray:
    """Read a scene file back as an (N, 4) array [x, y, z, flux]."""
    rows = load_json(path)
    if not isinstance(rows, list):
        raise DataError(f"{path}: scene file must hold a JSON array")
    try:
        return np.array(
            [[r["x"], r["y"], r["z"], r["flux"]] for r in rows], dtype=np.float64
        ).reshape(-1, 4)
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}: malformed scene entry: {exc}") from exc


def save_points(path, points: np.ndarray) -> None:
    """Write an extracted point set as a JSON array of {x, y, z, weight}."""
    arr = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    rows = [
        {"x": float(x), "y": float(y), "z": float(z), "weight": float(w)}
        for x, y, z, w in arr
    ]
    save_json(path, rows)


def load_points(path) -> np.ndarray:
    rows = load_json(path)
    if not isinstance(rows, list):
        raise DataError(f"{path}: point file must hold a JSON array")
    try:
        return np.array(
            [[r["x"], r["y"], r["z"], r["weight"]] for r in rows], dtype=np.float64
        ).reshape(-1, 4)
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}: malformed point entry: {exc}") from exc


def export_preview_pgm(path, image: np.ndarray) -> None:
    """8-bit max-normalized PGM preview, for eyeballing only."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeError("preview expects a 2-D image")
    peak = img.max()
    scaled = np.zeros_like(img) if peak <= 0 else np.clip(img / peak, 0, 1)
    data = (scaled * 255).round().astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5 {w} {h} 255\n".encode("ascii"))
        fh.write(data.tobytes(order="C"))
