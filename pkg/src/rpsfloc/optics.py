"""Single-lobe rotating PSF synthesis from a spiral-phase pupil.

The point-spread function at normalized defocus ``zeta`` is

    A_zeta(s) = (1/pi) * | integral_Omega exp[i (2*pi*u.s + zeta*|u|^2
                                                - psi(u))] du |^2

where ``Omega`` is the unit-disk pupil, ``s`` is the image-plane
coordinate in Rayleigh units and ``psi`` is a spiral phase mask: the
pupil is split into ``L`` equal-area annular zones with boundaries
``u_l = sqrt(l / L)``, and zone ``l`` carries ``l`` full cycles of
azimuthal phase, ``psi(u) = l * phi_u``.  The winding number increasing
by one per zone makes the main intensity lobe rotate about the optical
axis at a nearly uniform rate as ``zeta`` sweeps ``[-pi*L, pi*L]``.

Discretization: the pupil is sampled on a cell-centered ``n x n``
Cartesian grid over ``[-1, 1]^2`` (points outside the disk are zeroed)
and the Fourier kernel is applied as a separable matrix product, which
evaluates the integral exactly at the requested pixel positions for any
``pixel_pitch``.  Each rendered slice is normalized to unit sum, so the
``1/pi`` prefactor carries no information and is dropped.

Image-plane conventions used throughout the package: an image has shape
``(H, W)``; row index increases downward, column index to the right.
The geometric center pixel is ``(H // 2, W // 2)``.  Angles reported by
:func:`lobe_centroid_angle` use mathematical convention, measured from
the +x axis (increasing column), counterclockwise with "up" meaning
decreasing row.  The pupil azimuth origin below is chosen so that the
in-focus (``zeta = 0``) lobe lies on the +x axis, which makes the lobe
angle an odd function of ``zeta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DomainError, ShapeError

# Pupil azimuth offset (radians) applied inside the zone phase.  Rotating
# the azimuth origin rigidly rotates every rendered slice; this value
# aligns the in-focus lobe with the +x image axis (see module docstring).
AZIMUTH_ORIGIN = -math.pi / 2


@dataclass(frozen=True)
class OpticalConfig:
    """Geometry of the PSF dictionary.

    num_zones       number of equal-area pupil zones L; sets the usable
                    defocus range [-pi*L, pi*L]
    num_planes      number of depth slices D in the dictionary
    image_shape     (H, W) of each rendered slice, in pixels
    pixel_pitch     pixel size in Rayleigh units
    pupil_samples   pupil grid resolution n (n x n cells over [-1, 1]^2)
    """

    num_zones: int = 7
    num_planes: int = 21
    image_shape: tuple[int, int] = (96, 96)
    pixel_pitch: float = 0.5
    pupil_samples: int = 256

    def __post_init__(self):
        if self.num_zones < 1:
            raise ConfigurationError("num_zones must be >= 1")
        if self.num_planes < 1:
            raise ConfigurationError("num_planes must be >= 1")
        h, w = self.image_shape
        if h < 4 or w < 4:
            raise ConfigurationError("image_shape must be at least 4 x 4")
        if not (self.pixel_pitch > 0):
            raise ConfigurationError("pixel_pitch must be positive")
        if self.pupil_samples < 64:
            raise ConfigurationError(
                "pupil_samples must be >= 64 for adequate pupil sampling"
            )

    @property
    def zeta_limit(self) -> float:
        """Half-width of the valid defocus interval, pi * num_zones."""
        return math.pi * self.num_zones

    @property
    def center(self) -> tuple[int, int]:
        """(row, col) of the on-axis source pixel."""
        return (self.image_shape[0] // 2, self.image_shape[1] // 2)


def zeta_grid(config: OpticalConfig) -> np.ndarray:
    """Uniform defocus grid for the dictionary planes.

    D values spanning [-pi*L, pi*L] inclusive; the single-plane
    degenerate case returns [0.0] (in focus).
    """
    if config.num_planes == 1:
        return np.zeros(1)
    return np.linspace(-config.zeta_limit, config.zeta_limit, config.num_planes)


def zone_index(radius_sq, num_zones: int):
    """Equal-area zone index for squared pupil radius.

    Zone l in 1..L occupies sqrt((l-1)/L) < |u| <= sqrt(l/L), i.e.
    l = ceil(L * |u|^2), clipped to 1 at the origin.  Accepts scalars or
    arrays; values with |u|^2 > 1 are outside the pupil and raise.
    """
    r2 = np.asarray(radius_sq, dtype=float)
    if np.any(r2 < 0) or np.any(r2 > 1.0):
        raise DomainError("squared pupil radius must lie in [0, 1]")
    idx = np.ceil(num_zones * r2).astype(int)
    idx = np.clip(idx, 1, num_zones)
    if np.isscalar(radius_sq):
        return int(idx)
    return idx


def spiral_phase(radius_sq, azimuth, num_zones: int):
    """Spiral phase psi(u) = l(u) * phi_u for pupil points.

    radius_sq   squared pupil radius |u|^2, in [0, 1]
    azimuth     pupil azimuth phi_u in radians (any branch; the zone
                index is an integer so whole turns drop out of exp(-i*psi))
    num_zones   number of equal-area zones L

    Returns the unreduced phase l * phi_u (not taken modulo 2*pi).
    """
    return zone_index(radius_sq, num_zones) * np.asarray(azimuth, dtype=float)


def _pupil_field(config: OpticalConfig, zeta: float) -> tuple[np.ndarray, np.ndarray]:
    """Complex pupil function on the sampling grid.

    Returns (coords, pupil) where coords is the 1-D cell-centered grid
    over [-1, 1] and pupil is the (n, n) complex transmission
    exp(i * (zeta*|u|^2 - psi(u))) masked to the unit disk.
    """
    n = config.pupil_samples
    step = 2.0 / n
    coords = -1.0 + (np.arange(n) + 0.5) * step
    uy = coords[:, None]
    ux = coords[None, :]
    r2 = ux * ux + uy * uy
    inside = r2 <= 1.0
    r2c = np.where(inside, r2, 0.0)
    zone = np.clip(np.ceil(config.num_zones * r2c).astype(int), 1, config.num_zones)
    azimuth = np.arctan2(uy, ux) - AZIMUTH_ORIGIN
    phase = zeta * r2c - zone * azimuth
    pupil = np.where(inside, np.exp(1j * phase), 0.0 + 0.0j)
    return coords, pupil


def render_psf_slice(config: OpticalConfig, zeta: float) -> np.ndarray:
    """Render one PSF slice at defocus ``zeta``.

    The diffraction integral is evaluated as E_y @ P @ E_x^T where
    E_y[r, m] = exp(i*2*pi*s_r*u_m) and similarly for columns, i.e. an
    exact discrete Fourier sum at the pixel coordinates
    s = (index - center) * pixel_pitch.  The returned (H, W) float64
    intensity is nonnegative and normalized to unit sum.
    """
    if not np.isfinite(zeta):
        raise DomainError("zeta must be finite")
    limit = config.zeta_limit
    if not (-limit <= zeta <= limit):
        raise DomainError(
            f"zeta = {zeta:g} outside valid defocus range [-{limit:g}, {limit:g}]"
        )
    coords, pupil = _pupil_field(config, float(zeta))
    h, w = config.image_shape
    cy, cx = config.center
    sy = (np.arange(h) - cy) * config.pixel_pitch
    sx = (np.arange(w) - cx) * config.pixel_pitch
    ey = np.exp(2j * np.pi * np.outer(sy, coords))
    ex = np.exp(2j * np.pi * np.outer(sx, coords))
    field = ey @ pupil @ ex.T
    intensity = field.real**2 + field.imag**2
    total = intensity.sum()
    if not (total > 0):
        raise DomainError("rendered slice has no energy; check configuration")
    return intensity / total


@dataclass(eq=False)
class PsfDictionary:
    """Stack of unit-sum PSF slices indexed by depth plane.

    slices  (D, H, W) float64, slices[k] rendered at zetas[k]
    zetas   (D,) defocus value per plane
    config  the generating OpticalConfig
    """

    slices: np.ndarray
    zetas: np.ndarray
    config: OpticalConfig = field(repr=False)

    def __post_init__(self):
        self.slices = np.ascontiguousarray(self.slices, dtype=np.float64)
        self.zetas = np.asarray(self.zetas, dtype=np.float64)
        if self.slices.ndim != 3:
            raise ShapeError("dictionary slices must be a (D, H, W) stack")
        if self.slices.shape[0] != self.zetas.shape[0]:
            raise ShapeError("number of slices must match number of zeta values")
        if self.slices.shape[0] != self.config.num_planes:
            raise ShapeError("number of slices does not match config.num_planes")
        if self.slices.shape[1:] != tuple(self.config.image_shape):
            raise ShapeError("slice shape does not match config.image_shape")

    @property
    def num_planes(self) -> int:
        return self.slices.shape[0]

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.slices.shape[1], self.slices.shape[2]

    @property
    def volume_shape(self) -> tuple[int, int, int]:
        """(H, W, D) shape of source volumes this dictionary acts on."""
        return self.slices.shape[1], self.slices.shape[2], self.slices.shape[0]


def build_dictionary(config: OpticalConfig) -> PsfDictionary:
    """Render all D slices over the uniform defocus grid."""
    zetas = zeta_grid(config)
    h, w = config.image_shape
    slices = np.empty((config.num_planes, h, w))
    for k, z in enumerate(zetas):
        slices[k] = render_psf_slice(config, float(z))
    return PsfDictionary(slices=slices, zetas=zetas, config=config)


def lobe_centroid_angle(image: np.ndarray) -> float:
    """Orientation of the brightest lobe of a PSF-like image.

    Takes the intensity-weighted centroid of the pixels in the top
    quartile of the image's intensity range and returns its angle about
    the center pixel (H//2, W//2), in radians in (-pi, pi], measured
    from +x (increasing column) toward +y (decreasing row).
    """
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise ShapeError("lobe_centroid_angle expects a 2-D image")
    if not np.all(np.isfinite(img)):
        raise DomainError("image contains non-finite values")
    lo = float(img.min())
    hi = float(img.max())
    if not (hi > lo) or hi <= 0:
        raise DomainError("image has no intensity contrast")
    thr = lo + 0.75 * (hi - lo)
    rows, cols = np.nonzero(img >= thr)
    weights = img[rows, cols]
    cy, cx = img.shape[0] // 2, img.shape[1] // 2
    y = (cy - rows).astype(float)
    x = (cols - cx).astype(float)
    wsum = weights.sum()
    yc = float((weights * y).sum() / wsum)
    xc = float((weights * x).sum() / wsum)
    angle = math.atan2(yc, xc)
    if angle <= -math.pi:
        angle = math.pi
    return angle
