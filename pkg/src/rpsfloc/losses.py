"""Objectives, gradients, and proximal maps for the variational models.

Fidelities (z = forward(x) + b against observed image g):

- Gaussian:  ||z - g||_F^2, gradient 2 * adjoint(z - g).
- KL:        D_KL(z, g) = <g, ln(g/z)> + <1, z - g>, gradient
             adjoint(1 - g/z).  The solver-facing form <1, z - g*ln z>
             differs only by the x-independent constant <g, ln g - 1>;
             both are exposed and share the gradient.

Penalties (elementwise over voxels u with per-voxel norm a > 0):

- CEL0:      phi(a, mu; u) = mu - (a^2/2) * (|u| - sqrt(2*mu)/a)^2 for
             |u| <= sqrt(2*mu)/a, else mu.  Its nonnegative proximal map
             has a closed form evaluated here through the exact
             candidate set of the piecewise objective.
- NC theta:  theta(a; u) = |u| / (a + |u|), with IRL1 linearization
             weights a / (a + |u|)^2.

The smoothed-MSE term ||G3 * (x - gt)||_F^2 uses a truncated, unit-sum
3D Gaussian kernel; same-size convolution with an odd symmetric kernel
is self-adjoint, giving gradient 2 * G3 * (G3 * (x - gt)).

Weighted-penalty identity used by the solvers: w * phi(a, mu; u) =
phi(sqrt(w)*a, w*mu; u), so a weighted CEL0 prox is the plain prox with
rescaled (a, mu).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.signal import fftconvolve

from .errors import ConfigurationError, DomainError, ShapeError
from .forward import apply_forward, adjoint_apply, psf_column_norms
from .optics import PsfDictionary

GAUSSIAN_WEIGHTS = (1.0, 700.0, 1000.0)
POISSON_WEIGHTS = (1.0, 1.0, 500.0)


def default_weights(noise: str) -> tuple[float, float, float]:
    """Composite weight ratios (w1, w2, w3) for a noise channel."""
    if noise == "gaussian":
        return GAUSSIAN_WEIGHTS
    if noise == "poisson":
        return POISSON_WEIGHTS
    raise ConfigurationError(f"unknown noise channel: {noise!r}")


@dataclass(frozen=True)
class LossConfig:
    """Parameters of the composite objective.

    noise selects both the fidelity (Gaussian l2 vs KL) and the
    regularizer branch (CEL0 vs NC theta).  w2 scales the whole
    regularizer while mu stays an independent knob inside it (CEL0
    nonconvexity parameter, NC multiplier).
    """

    noise: str = "gaussian"
    w1: float = GAUSSIAN_WEIGHTS[0]
    w2: float = GAUSSIAN_WEIGHTS[1]
    w3: float = GAUSSIAN_WEIGHTS[2]
    mu: float = 1.0
    a: float = 100.0
    b: float = 0.0
    kernel_sigma: float = 1.0
    kernel_radius: int = 3

    def __post_init__(self):
        if self.noise not in ("gaussian", "poisson"):
            raise ConfigurationError(f"unknown noise channel: {self.noise!r}")
        if min(self.w1, self.w2, self.w3) < 0:
            raise ConfigurationError("loss weights must be nonnegative")
        if self.w1 == self.w2 == self.w3 == 0:
            raise ConfigurationError("at least one loss weight must be positive")
        if not (self.mu > 0 and self.a > 0):
            raise ConfigurationError("mu and a must be positive")
        if self.b < 0:
            raise ConfigurationError("background must be nonnegative")
        if not (self.kernel_sigma > 0):
            raise ConfigurationError("kernel_sigma must be positive")
        if self.kernel_radius < 1:
            raise ConfigurationError("kernel_radius must be a positive integer")

    def describe(self) -> dict:
        return {
            "noise": self.noise,
            "w1": self.w1,
            "w2": self.w2,
            "w3": self.w3,
            "mu": self.mu,
            "a": self.a,
            "b": self.b,
            "kernel_sigma": self.kernel_sigma,
            "kernel_radius": self.kernel_radius,
        }

    @staticmethod
    def from_dict(d: dict) -> "LossConfig":
        return LossConfig(**d)


@dataclass
class LossValue:
    """Composite objective value with its three unweighted parts."""

    total: float
    fidelity: float
    regularizer: float
    mse: float
    gradient: Optional[np.ndarray] = None

    @property
    def parts(self) -> dict:
        return {
            "fidelity": self.fidelity,
            "regularizer": self.regularizer,
            "mse": self.mse,
        }


def _check_volume_image(x, dictionary: PsfDictionary, g):
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if x.shape != dictionary.volume_shape:
        raise ShapeError(f"volume shape {x.shape} != {dictionary.volume_shape}")
    if g.shape != dictionary.image_shape:
        raise ShapeError(f"image shape {g.shape} != {dictionary.image_shape}")
    return x, g


def gaussian_fidelity(x, dictionary: PsfDictionary, b: float, g, want_grad: bool = False):
    """Squared Frobenius data misfit ||forward(x) + b - g||^2.

    Returns (value, gradient or None).
    """
    x, g = _check_volume_image(x, dictionary, g)
    residual = apply_forward(dictionary, x, b) - g
    value = float(np.sum(residual * residual))
    grad = 2.0 * adjoint_apply(dictionary, residual) if want_grad else None
    return value, grad


def _kl_pieces(x, dictionary, b, g):
    x, g = _check_volume_image(x, dictionary, g)
    z = apply_forward(dictionary, x, b)
    pos = g > 0
    if np.any(z[pos] <= 0):
        raise DomainError(
            "KL fidelity undefined: forward + background is nonpositive at an "
            "observed-positive pixel (increase background b)"
        )
    return z, g, pos


def kl_fidelity(x, dictionary: PsfDictionary, b: float, g, want_grad: bool = False):
    """Kullback-Leibler divergence D_KL(forward(x) + b, g).

    Full divergence form: nonnegative, zero exactly at z = g.  Returns
    (value, gradient or None); pixels with g = 0 contribute z alone.
    """
    z, g, pos = _kl_pieces(x, dictionary, b, g)
    value = float(np.sum(g[pos] * np.log(g[pos] / z[pos])) + np.sum(z - g))
    grad = None
    if want_grad:
        ratio = np.zeros_like(z)
        np.divide(g, z, out=ratio, where=pos)
        grad = adjoint_apply(dictionary, 1.0 - ratio)
    return value, grad


def kl_solver_objective(x, dictionary: PsfDictionary, b: float, g, want_grad: bool = False):
    """Constant-shifted KL form <1, z - g*ln z> used inside the solver.

    Equals kl_fidelity up to the x-independent constant <g, ln g - 1>
    (so it can be negative); the gradients coincide.
    """
    z, g, pos = _kl_pieces(x, dictionary, b, g)
    value = float(np.sum(z) - np.sum(g[pos] * np.log(z[pos])))
    grad = None
    if want_grad:
        ratio = np.zeros_like(z)
        np.divide(g, z, out=ratio, where=pos)
        grad = adjoint_apply(dictionary, 1.0 - ratio)
    return value, grad


def _cel0_threshold(norms, mu):
    return np.sqrt(2.0 * mu) / norms


def cel0_penalty(x, norms, mu: float, mode: str = "value", step: float | None = None):
    """CEL0 penalty: value, smooth-branch gradient, or proximal map.

    x       voxel array (any shape)
    norms   per-voxel positive column norms a (broadcastable to x)
    mu      nonconvexity parameter, > 0
    mode    "value" -> scalar sum; "grad" -> elementwise derivative using
            the smooth quadratic branch (0 at the |u| = sqrt(2 mu)/a kink
            and at u = 0); "prox" -> argmin_{v >= 0} (v-u)^2/2 +
            step * phi(a, mu; v), elementwise, ties resolved toward 0
    step    required for mode "prox", > 0
    """
    u = np.asarray(x, dtype=np.float64)
    a = np.asarray(norms, dtype=np.float64)
    if np.any(a <= 0):
        raise DomainError("column norms must be strictly positive")
    if not (mu > 0):
        raise DomainError("mu must be positive")
    thr = _cel0_threshold(a, mu)

    if mode == "value":
        inside = np.abs(u) <= thr
        terms = np.where(inside, mu - 0.5 * a**2 * (np.abs(u) - thr) ** 2, mu)
        return float(np.sum(terms))

    if mode == "grad":
        absu = np.abs(u)
        inner = absu < thr
        grad = np.where(inner, -(a**2) * (absu - thr) * np.sign(u), 0.0)
        return grad

    if mode == "prox":
        if step is None or not (step > 0):
            raise ConfigurationError("prox mode requires a positive step")
        return _cel0_prox(u, a, float(mu), float(step), thr)

    raise ConfigurationError(f"unknown cel0_penalty mode: {mode!r}")


def _cel0_prox(u, a, mu, step, thr):
    """Exact candidate-set evaluation of the nonnegative CEL0 prox.

    h(v) = (v - u)^2 / 2 + step * phi(a, mu; v) over v >= 0 is piecewise
    quadratic with breakpoint at v = thr.  Minimizers can only be: 0,
    the inner-branch stationary point (when the branch is convex), the
    breakpoint thr, or max(u, thr) on the flat branch.  Evaluating h at
    all four and taking the smallest v among exact minimizers gives the
    prox with ties resolved toward sparsity.
    """
    u = np.asarray(u, dtype=np.float64)
    shape = np.broadcast_shapes(u.shape, np.shape(a))
    u = np.broadcast_to(u, shape)
    a = np.broadcast_to(np.asarray(a, dtype=np.float64), shape)
    thr = np.broadcast_to(thr, shape)

    sa2 = step * a**2
    with np.errstate(divide="ignore", invalid="ignore"):
        interior = (u - sa2 * thr) / (1.0 - sa2)
    interior = np.where(np.isfinite(interior), interior, 0.0)
    interior = np.clip(interior, 0.0, thr)
    # concave inner branch: stationary point is a maximizer, drop it to 0
    interior = np.where(sa2 < 1.0, interior, 0.0)

    candidates = np.stack(
        [np.zeros(shape), interior, thr, np.maximum(u, thr)], axis=0
    )

    def h(v):
        inside = v <= thr
        phi = np.where(inside, mu - 0.5 * a**2 * (v - thr) ** 2, mu)
        return 0.5 * (v - u) ** 2 + step * phi

    values = h(candidates)
    best = values.min(axis=0)
    is_best = values <= best
    chosen = np.where(is_best, candidates, np.inf).min(axis=0)
    return chosen


def nc_penalty(x, a: float, mode: str = "value"):
    """Nonconvex ratio penalty theta(a; u) = |u| / (a + |u|).

    mode "value" -> scalar sum; "grad" -> elementwise derivative
    sign(u) * a / (a + |u|)^2 (0 chosen at the u = 0 kink);
    "irl1_weights" -> linearization weights a / (a + |u|)^2 in (0, 1/a].
    """
    if not (a > 0):
        raise DomainError("nc_penalty requires a > 0")
    u = np.asarray(x, dtype=np.float64)
    absu = np.abs(u)
    if mode == "value":
        return float(np.sum(absu / (a + absu)))
    if mode == "grad":
        return np.sign(u) * a / (a + absu) ** 2
    if mode == "irl1_weights":
        return a / (a + absu) ** 2
    raise ConfigurationError(f"unknown nc_penalty mode: {mode!r}")


def gaussian_kernel_3d(sigma: float, radius: int) -> np.ndarray:
    """Truncated, unit-sum separable 3D Gaussian kernel of odd size."""
    if not (sigma > 0) or radius < 1:
        raise ConfigurationError("kernel needs sigma > 0 and radius >= 1")
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k1 = np.exp(-0.5 * (t / sigma) ** 2)
    k1 /= k1.sum()
    kernel = k1[:, None, None] * k1[None, :, None] * k1[None, None, :]
    return kernel / kernel.sum()


def _smooth(vol, kernel):
    return fftconvolve(vol, kernel, mode="same")


def mse_smoothed(
    x,
    gt,
    kernel_sigma: float = 1.0,
    kernel_radius: int = 3,
    want_grad: bool = False,
):
    """Smoothed squared error ||G3 * (x - gt)||_F^2.

    Returns (value, gradient or None); the gradient is
    2 * G3 * (G3 * (x - gt)) since same-size convolution with the odd
    symmetric kernel is self-adjoint.
    """
    xv = np.asarray(x, dtype=np.float64)
    gv = np.asarray(gt, dtype=np.float64)
    if xv.shape != gv.shape:
        raise ShapeError(f"volume shapes differ: {xv.shape} vs {gv.shape}")
    kernel = gaussian_kernel_3d(kernel_sigma, kernel_radius)
    smoothed = _smooth(xv - gv, kernel)
    value = float(np.sum(smoothed * smoothed))
    grad = 2.0 * _smooth(smoothed, kernel) if want_grad else None
    return value, grad


def composite_loss(
    x,
    gt,
    g,
    dictionary: PsfDictionary,
    cfg: LossConfig,
    want_grad: bool = False,
) -> LossValue:
    """w1 * fidelity + w2 * regularizer + w3 * smoothed MSE.

    The noise channel picks the branches: "gaussian" pairs the l2
    fidelity with the CEL0 penalty (per-voxel column norms from the
    dictionary); "poisson" pairs the KL fidelity with mu * NC theta.
    The CEL0 contribution to the gradient uses the smooth-branch
    derivative (see cel0_penalty).
    """
    x = np.asarray(x, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if gt.shape != dictionary.volume_shape:
        raise ShapeError(f"gt shape {gt.shape} != {dictionary.volume_shape}")

    grad = np.zeros_like(x) if want_grad else None

    if cfg.noise == "gaussian":
        fid, fid_grad = gaussian_fidelity(x, dictionary, cfg.b, g, want_grad)
        norms = psf_column_norms(dictionary)
        reg = cel0_penalty(x, norms, cfg.mu, "value")
        reg_grad = cel0_penalty(x, norms, cfg.mu, "grad") if want_grad else None
    else:
        fid, fid_grad = kl_fidelity(x, dictionary, cfg.b, g, want_grad)
        reg = cfg.mu * nc_penalty(x, cfg.a, "value")
        reg_grad = cfg.mu * nc_penalty(x, cfg.a, "grad") if want_grad else None

    mse, mse_grad = mse_smoothed(x, gt, cfg.kernel_sigma, cfg.kernel_radius, want_grad)

    total = cfg.w1 * fid + cfg.w2 * reg + cfg.w3 * mse
    if want_grad:
        grad = cfg.w1 * fid_grad + cfg.w2 * reg_grad + cfg.w3 * mse_grad
    return LossValue(
        total=float(total),
        fidelity=float(fid),
        regularizer=float(reg),
        mse=float(mse),
        gradient=grad,
    )
