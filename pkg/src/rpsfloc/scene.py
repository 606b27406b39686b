"""Synthetic ground truth: random scenes, rasterization, dataset files.

A scene is an (N, 4) float64 array of rows (x, y, z, flux) in
voxel-grid units: x is the image row coordinate in [0, H), y the
column coordinate in [0, W), z the depth-plane coordinate in [0, D),
flux a positive photon count.  Transverse positions keep a border
margin (default 4 px) so PSF lobes stay mostly in frame.

All randomness flows from ``DatasetSpec.seed`` through fixed purpose
substreams: placement draws use stream (seed, 1, image_index), flux
draws (seed, 2, image_index), and noise sampling (seed, 3, image_index).
This makes each image reproducible in isolation and keeps flux
statistics independent of the rejection history of position sampling.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import io
from .errors import CapacityError, ConfigurationError, DomainError, ShapeError
from .forward import NoiseModel, add_noise, apply_forward
from .optics import PsfDictionary

PLACEMENT_STREAM = 1
FLUX_STREAM = 2
NOISE_STREAM = 3

_MAX_PLACEMENT_ATTEMPTS = 100_000
DATASET_MANIFEST_NAME = "dataset_manifest.json"


@dataclass(frozen=True)
class DatasetSpec:
    """Recipe for a synthetic dataset.

    density is either a fixed per-image count or an inclusive uniform
    integer range (lo, hi); density_schedule, when given, overrides it
    with an explicit per-image count list (len == num_images), which is
    how multi-density test protocols are expressed.
    """

    num_images: int
    image_size: tuple[int, int] = (96, 96)
    num_planes: int = 21
    density: int | tuple[int, int] = 10
    density_schedule: tuple[int, ...] | None = None
    flux_mean: float = 2000.0
    min_separation: float = 0.0
    margin: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.num_images < 1:
            raise ConfigurationError("num_images must be positive")
        h, w = self.image_size
        if h < 1 or w < 1 or self.num_planes < 1:
            raise ConfigurationError("grid dimensions must be positive")
        if isinstance(self.density, tuple):
            lo, hi = self.density
            if lo < 0 or lo > hi:
                raise ConfigurationError("density range must satisfy 0 <= lo <= hi")
        elif self.density < 0:
            raise ConfigurationError("density must be nonnegative")
        if self.density_schedule is not None:
            if len(self.density_schedule) != self.num_images:
                raise ConfigurationError(
                    "density_schedule length must equal num_images"
                )
            if any(d < 0 for d in self.density_schedule):
                raise ConfigurationError("scheduled densities must be nonnegative")
        if not (self.flux_mean > 0):
            raise ConfigurationError("flux_mean must be positive")
        if self.min_separation < 0:
            raise ConfigurationError("min_separation must be nonnegative")
        if self.margin < 0 or 2 * self.margin >= min(h, w) - 1:
            raise ConfigurationError("margin leaves no room for sources")

    def describe(self) -> dict:
        d = asdict(self)
        d["density"] = list(self.density) if isinstance(self.density, tuple) else self.density
        if self.density_schedule is not None:
            d["density_schedule"] = list(self.density_schedule)
        d["image_size"] = list(self.image_size)
        return d

    @staticmethod
    def from_dict(d: dict) -> "DatasetSpec":
        density = d.get("density", 10)
        if isinstance(density, list):
            density = tuple(density)
        schedule = d.get("density_schedule")
        return DatasetSpec(
            num_images=int(d["num_images"]),
            image_size=tuple(int(v) for v in d.get("image_size", (96, 96))),
            num_planes=int(d.get("num_planes", 21)),
            density=density,
            density_schedule=tuple(int(v) for v in schedule) if schedule else None,
            flux_mean=float(d.get("flux_mean", 2000.0)),
            min_separation=float(d.get("min_separation", 0.0)),
            margin=float(d.get("margin", 4.0)),
            seed=int(d.get("seed", 0)),
        )


def substream(seed: int, purpose: int, index: int) -> np.random.Generator:
    """Deterministic per-purpose, per-image random stream."""
    return np.random.default_rng([int(seed), int(purpose), int(index)])


def _resolve_density(spec: DatasetSpec, image_index: int, rng) -> int:
    if spec.density_schedule is not None:
        return int(spec.density_schedule[image_index])
    if isinstance(spec.density, tuple):
        lo, hi = spec.density
        return int(rng.integers(lo, hi + 1))
    return int(spec.density)


def sample_scene(spec: DatasetSpec, image_index: int) -> np.ndarray:
    """Draw one random scene, deterministic in (spec.seed, image_index).

    Positions are uniform over [margin, H-1-margin] x [margin, W-1-margin]
    x [0, D-1], rejected until pairwise 3D distance >= min_separation;
    fluxes are Poisson(flux_mean) redrawn while zero.
    """
    if not (0 <= image_index < spec.num_images):
        raise ConfigurationError(
            f"image_index {image_index} outside 0..{spec.num_images - 1}"
        )
    h, w = spec.image_size
    d = spec.num_planes
    place_rng = substream(spec.seed, PLACEMENT_STREAM, image_index)
    count = _resolve_density(spec, image_index, place_rng)
    if count == 0:
        return np.zeros((0, 4))

    accepted = np.empty((count, 3))
    n_accepted = 0
    attempts = 0
    min_sep_sq = spec.min_separation**2
    while n_accepted < count:
        attempts += 1
        if attempts > _MAX_PLACEMENT_ATTEMPTS:
            raise CapacityError(
                f"could not place {count} sources with min_separation "
                f"{spec.min_separation} after {_MAX_PLACEMENT_ATTEMPTS} attempts"
            )
        cand = np.array(
            [
                place_rng.uniform(spec.margin, h - 1 - spec.margin),
                place_rng.uniform(spec.margin, w - 1 - spec.margin),
                place_rng.uniform(0.0, d - 1) if d > 1 else 0.0,
            ]
        )
        if min_sep_sq > 0 and n_accepted:
            deltas = accepted[:n_accepted] - cand
            if np.min(np.einsum("ij,ij->i", deltas, deltas)) < min_sep_sq:
                continue
        accepted[n_accepted] = cand
        n_accepted += 1

    flux_rng = substream(spec.seed, FLUX_STREAM, image_index)
    fluxes = np.empty(count)
    for i in range(count):
        f = flux_rng.poisson(spec.flux_mean)
        while f == 0:
            f = flux_rng.poisson(spec.flux_mean)
        fluxes[i] = f
    return np.column_stack([accepted, fluxes])


def rasterize(sources: np.ndarray, grid: tuple[int, int, int]) -> np.ndarray:
    """Deposit each source's flux at its nearest voxel.

    Half-up rounding (floor(c + 0.5)) with the top half-voxel clipped to
    the last index, so every in-bounds coordinate lands on its nearest
    grid voxel.  Coincident snaps accumulate; total mass is conserved
    exactly.
    """
    h, w, d = grid
    src = np.asarray(sources, dtype=np.float64).reshape(-1, 4)
    volume = np.zeros((h, w, d))
    if src.shape[0] == 0:
        return volume
    coords = src[:, :3]
    fluxes = src[:, 3]
    if np.any(fluxes <= 0):
        raise DomainError("source fluxes must be positive")
    bounds = np.array([h, w, d], dtype=np.float64)
    if np.any(coords < 0) or np.any(coords >= bounds):
        raise DomainError("source coordinates outside the voxel grid")
    idx = np.floor(coords + 0.5).astype(np.int64)
    idx = np.minimum(idx, np.array([h - 1, w - 1, d - 1]))
    np.add.at(volume, (idx[:, 0], idx[:, 1], idx[:, 2]), fluxes)
    return volume


def generate_dataset(
    spec: DatasetSpec,
    dictionary: PsfDictionary,
    noise: NoiseModel,
    out_dir,
) -> dict:
    """Write scene/clean/observed triples plus a dataset manifest.

    Purely deterministic in (spec, dictionary, noise): rerunning into a
    fresh directory reproduces every file byte for byte.  Returns the
    manifest dict (also written as dataset_manifest.json).
    """
    h, w = spec.image_size
    if dictionary.image_shape != (h, w):
        raise ShapeError(
            f"dictionary image shape {dictionary.image_shape} != spec {spec.image_size}"
        )
    if dictionary.num_planes != spec.num_planes:
        raise ShapeError(
            f"dictionary has {dictionary.num_planes} planes, spec wants {spec.num_planes}"
        )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = dictionary.volume_shape

    entries = []
    for i in range(spec.num_images):
        sources = sample_scene(spec, i)
        volume = rasterize(sources, grid)
        clean = apply_forward(dictionary, volume, noise.background)
        noise_seed = [spec.seed, NOISE_STREAM, i]
        observed = add_noise(clean, noise, noise_seed)

        stem = f"img_{i:04d}"
        scene_name = f"{stem}.scene.json"
        clean_name = f"{stem}.clean.rimg"
        observed_name = f"{stem}.observed.rimg"

        meta_common = {"image_index": i, "noise": noise.describe()}
        if noise.variant == "gaussian":
            meta_common["sigma_resolved"] = noise.sigma_for(clean)
        io.save_scene(out / scene_name, sources)
        io.save_image(out / clean_name, clean, {**meta_common, "role": "clean"})
        io.save_image(
            out / observed_name,
            observed,
            {**meta_common, "role": "observed", "noise_seed": noise_seed},
        )
        entry = {
            "index": i,
            "scene": scene_name,
            "clean": clean_name,
            "observed": observed_name,
            "density": int(sources.shape[0]),
            "sha256": {
                "scene": io.sha256_file(out / scene_name),
                "clean": io.sha256_file(out / clean_name),
                "observed": io.sha256_file(out / observed_name),
            },
        }
        if noise.variant == "gaussian":
            entry["sigma_resolved"] = float(noise.sigma_for(clean))
        entries.append(entry)

    cfg = dictionary.config
    manifest = {
        "format": "rpsfloc-dataset",
        "version": 1,
        "spec": spec.describe(),
        "noise": noise.describe(),
        "dictionary": {
            "num_zones": cfg.num_zones,
            "num_planes": cfg.num_planes,
            "image_shape": list(cfg.image_shape),
            "pixel_pitch": cfg.pixel_pitch,
            "pupil_samples": cfg.pupil_samples,
        },
        "substreams": {
            "placement": PLACEMENT_STREAM,
            "flux": FLUX_STREAM,
            "noise": NOISE_STREAM,
            "rule": "np.random.default_rng([seed, stream, image_index])",
        },
        "images": entries,
    }
    io.save_json(out / DATASET_MANIFEST_NAME, manifest)
    return manifest
