"""Linear image formation, its adjoint, and the two noise channels.

A source volume ``x`` of shape (H, W, D) maps to a clean image

    clean = sum_k conv2d(slices[k], x[:, :, k]) + b

where the convolution is linear (zero-padded, never circular) and the
full (2H-1, 2W-1) result is cropped to the H x W detector window so
that a unit impulse at voxel (i, j, k) produces slice k with its origin
pixel (H//2, W//2) moved to (i, j).  Slices near the border lose the
mass that falls outside the window, which is exactly why the per-voxel
column norms computed here shrink near edges.

Convolutions run in the Fourier domain with transforms of the PSF
slices cached per dictionary; :class:`ForwardOperator` owns that cache
and the module-level functions reuse one operator per dictionary
instance.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass

import numpy as np
from scipy import fft as spfft

from .errors import ConfigurationError, DomainError, ShapeError
from .optics import PsfDictionary


def _as_image(arr, shape, name: str) -> np.ndarray:
    out = np.asarray(arr, dtype=np.float64)
    if out.shape != tuple(shape):
        raise ShapeError(f"{name} has shape {out.shape}, expected {tuple(shape)}")
    return out


class ForwardOperator:
    """Cached-spectrum implementation of the imaging map and its adjoint."""

    def __init__(self, dictionary: PsfDictionary):
        self.dictionary = dictionary
        h, w = dictionary.image_shape
        self._fft_shape = (spfft.next_fast_len(2 * h - 1), spfft.next_fast_len(2 * w - 1))
        self._slices_f = spfft.rfft2(dictionary.slices, s=self._fft_shape)
        self._norms: np.ndarray | None = None
        self._op_norm: float | None = None

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.dictionary.image_shape

    @property
    def volume_shape(self) -> tuple[int, int, int]:
        return self.dictionary.volume_shape

    def forward(self, volume: np.ndarray, background: float = 0.0) -> np.ndarray:
        """T(A * x) + b as an (H, W) float64 image."""
        if background < 0:
            raise DomainError("background must be nonnegative")
        x = np.asarray(volume, dtype=np.float64)
        if x.shape != self.volume_shape:
            raise ShapeError(
                f"volume has shape {x.shape}, expected {self.volume_shape}"
            )
        h, w = self.image_shape
        cy, cx = self.dictionary.config.center
        planes = np.moveaxis(x, 2, 0)
        vf = spfft.rfft2(planes, s=self._fft_shape)
        acc = np.einsum("kij,kij->ij", vf, self._slices_f)
        full = spfft.irfft2(acc, s=self._fft_shape)
        return full[cy : cy + h, cx : cx + w] + background

    def adjoint(self, image: np.ndarray) -> np.ndarray:
        """Adjoint of the linear (background-free) part; may be signed."""
        y = _as_image(image, self.image_shape, "image")
        h, w = self.image_shape
        cy, cx = self.dictionary.config.center
        padded = np.zeros(self._fft_shape)
        padded[cy : cy + h, cx : cx + w] = y
        yf = spfft.rfft2(padded)
        planes = spfft.irfft2(np.conj(self._slices_f) * yf[None], s=self._fft_shape)
        return np.ascontiguousarray(np.moveaxis(planes[:, :h, :w], 0, 2))

    def column_norms(self) -> np.ndarray:
        """(H, W, D) Frobenius norms of the forward image of each impulse.

        With the crop-to-window boundary policy, the norm of voxel
        (i, j, k) is the root sum of squares of slice k restricted to
        the part that stays inside the detector, i.e. a cross
        correlation of an all-ones image with the squared slice.
        """
        if self._norms is None:
            h, w = self.image_shape
            cy, cx = self.dictionary.config.center
            padded = np.zeros(self._fft_shape)
            padded[cy : cy + h, cx : cx + w] = 1.0
            onesf = spfft.rfft2(padded)
            sqf = spfft.rfft2(self.dictionary.slices**2, s=self._fft_shape)
            normsq = spfft.irfft2(np.conj(sqf) * onesf[None], s=self._fft_shape)
            normsq = normsq[:, :h, :w]
            norms = np.sqrt(np.maximum(normsq, 0.0))
            self._norms = np.ascontiguousarray(np.moveaxis(norms, 0, 2))
            self._norms.setflags(write=False)
        return self._norms

    def operator_norm(self, iterations: int = 30) -> float:
        """Power-method estimate of the largest singular value (cached)."""
        if self._op_norm is None:
            v = np.ones(self.volume_shape)
            v /= np.linalg.norm(v)
            est = 0.0
            for _ in range(iterations):
                u = self.adjoint(self.forward(v))
                nu = np.linalg.norm(u)
                if nu == 0:
                    break
                est = nu
                v = u / nu
            self._op_norm = float(np.sqrt(est))
        return self._op_norm


_operators: "weakref.WeakKeyDictionary[PsfDictionary, ForwardOperator]" = (
    weakref.WeakKeyDictionary()
)


def operator_for(dictionary: PsfDictionary) -> ForwardOperator:
    """Shared ForwardOperator for a dictionary (one cache per instance)."""
    op = _operators.get(dictionary)
    if op is None:
        op = ForwardOperator(dictionary)
        _operators[dictionary] = op
    return op


def apply_forward(
    dictionary: PsfDictionary, volume: np.ndarray, background: float = 0.0
) -> np.ndarray:
    """Clean image T(A * x) + b for a source volume."""
    return operator_for(dictionary).forward(volume, background)


def adjoint_apply(dictionary: PsfDictionary, image: np.ndarray) -> np.ndarray:
    """Adjoint of the linear imaging map applied to an image."""
    return operator_for(dictionary).adjoint(image)


def psf_column_norms(dictionary: PsfDictionary) -> np.ndarray:
    """Per-voxel norms ||forward(delta_ijk)||_F as an (H, W, D) array."""
    return operator_for(dictionary).column_norms()


@dataclass(frozen=True)
class NoiseModel:
    """Pixelwise noise channel applied to a clean image.

    variant      "gaussian" or "poisson"
    sigma        absolute Gaussian standard deviation (exclusive with
                 sigma_frac; exactly one must be set for "gaussian")
    sigma_frac   Gaussian std as a fraction of the clean image's maximum,
                 resolved per image at sampling time
    background   constant photon background b already present in the
                 clean image; carried here so datasets are self-describing
    """

    variant: str
    sigma: float | None = None
    sigma_frac: float | None = None
    background: float = 0.0

    def __post_init__(self):
        if self.variant not in ("gaussian", "poisson"):
            raise ConfigurationError(f"unknown noise variant: {self.variant!r}")
        if self.background < 0:
            raise ConfigurationError("background must be nonnegative")
        if self.variant == "gaussian":
            given = (self.sigma is not None) + (self.sigma_frac is not None)
            if given != 1:
                raise ConfigurationError(
                    "gaussian noise needs exactly one of sigma or sigma_frac"
                )
            value = self.sigma if self.sigma is not None else self.sigma_frac
            if not (value > 0):
                raise ConfigurationError("gaussian noise scale must be positive")
        else:
            if self.sigma is not None or self.sigma_frac is not None:
                raise ConfigurationError("poisson noise takes no sigma parameters")

    def sigma_for(self, clean: np.ndarray) -> float:
        """Absolute sigma for one clean image (resolves sigma_frac)."""
        if self.variant != "gaussian":
            raise ConfigurationError("sigma_for is only defined for gaussian noise")
        if self.sigma is not None:
            return float(self.sigma)
        return float(self.sigma_frac * np.max(clean))

    def noise_level(self) -> float:
        """Scalar used as the report/sweep axis for this model."""
        if self.variant == "gaussian":
            return float(self.sigma if self.sigma is not None else self.sigma_frac)
        return float(self.background)

    def describe(self) -> dict:
        out = {"variant": self.variant, "background": self.background}
        if self.sigma is not None:
            out["sigma"] = self.sigma
        if self.sigma_frac is not None:
            out["sigma_frac"] = self.sigma_frac
        return out

    @staticmethod
    def from_dict(d: dict) -> "NoiseModel":
        return NoiseModel(
            variant=d["variant"],
            sigma=d.get("sigma"),
            sigma_frac=d.get("sigma_frac"),
            background=float(d.get("background", 0.0)),
        )


def add_noise(clean: np.ndarray, model: NoiseModel, seed) -> np.ndarray:
    """Sample an observed image from the noise channel.

    Deterministic given (clean, model, seed); seed may be an int or a
    sequence of ints (a substream path).  Gaussian output is clamped at
    zero since photon counts cannot be negative; Poisson output is
    integer-valued (as float64).
    """
    img = np.asarray(clean, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeError("clean image must be 2-D")
    if not np.all(np.isfinite(img)):
        raise DomainError("clean image contains non-finite values")
    rng = np.random.default_rng(seed)
    if model.variant == "gaussian":
        sigma = model.sigma_for(img)
        noisy = img + rng.normal(0.0, 1.0, size=img.shape) * sigma
        return np.maximum(noisy, 0.0)
    if np.any(img < 0):
        raise DomainError("poisson noise requires a nonnegative clean image")
    return rng.poisson(img).astype(np.float64)
