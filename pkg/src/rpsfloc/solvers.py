"""Variational reconstruction: prox-gradient l2-CEL0, IRL1 KL-NC, and
ground-truth-aided composite refinement.

All three solvers share one backtracking proximal-gradient engine.  A
trial step from x with smooth part f and prox-handled penalty P is
accepted only if both

    f(x+) <= f(x) + <grad f, x+ - x> + ||x+ - x||^2 / (2 * tau)
    f(x+) + P(x+) <= f(x) + P(x)

hold as evaluated in floating point.  The first is the standard
majorization test that guarantees descent mathematically; the second
re-checks the actual objective so reported traces are nonincreasing
exactly, not merely up to rounding.  When the step size underflows
without an acceptable move the iterate is already a numerical fixed
point and the solve terminates.

The KL-NC solver follows the majorize-minimize pattern: the concave
penalty theta is linearized at the current iterate (weights
a / (a + |x|)^2), the resulting weighted-l1 + KL subproblem runs a few
prox-gradient steps (weighted soft threshold), and the true objective
is re-checked at every outer round, which preserves outer monotonicity
even with inexact inner solves.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError, DivergenceError, ShapeError
from .forward import ForwardOperator, operator_for
from .losses import (
    LossConfig,
    cel0_penalty,
    gaussian_kernel_3d,
    nc_penalty,
    _smooth,
)
from .optics import PsfDictionary

_STEP_GROW = 1.2
_STEP_CAP_FACTOR = 1e3
_STEP_FLOOR_FACTOR = 1e-16
_TOL_STREAK = 5


@dataclass(frozen=True)
class SolverParams:
    """Iteration controls shared by all solvers.

    max_outer/max_inner: IRL1 outer and inner budgets; the single-loop
    solvers run up to max_outer * max_inner flat iterations.
    step_rule "backtracking" adapts the step (shrink on rejection, mild
    growth after acceptance); "fixed" uses step_init verbatim and can
    legitimately diverge.  step_init None picks an automatic scale from
    an operator-norm estimate.  mu None resolves to the declared default
    0.1 * max(column_norms)^2 * max(g) at solve time.
    init "adjoint" starts from the clipped adjoint image rescaled to
    match total counts; "zeros" starts from the zero volume.
    """

    max_outer: int = 10
    max_inner: int = 50
    step_rule: str = "backtracking"
    step_init: Optional[float] = None
    shrink: float = 0.5
    tolerance: float = 1e-6
    mu: Optional[float] = None
    a: float = 100.0
    b: float = 0.0
    init: str = "adjoint"
    seed: Optional[int] = None

    def __post_init__(self):
        if self.max_outer < 1 or self.max_inner < 1:
            raise ConfigurationError("iteration budgets must be positive")
        if self.step_rule not in ("backtracking", "fixed"):
            raise ConfigurationError(f"unknown step rule: {self.step_rule!r}")
        if not (0.0 < self.shrink < 1.0):
            raise ConfigurationError("shrink factor must lie in (0, 1)")
        if not (self.tolerance > 0):
            raise ConfigurationError("tolerance must be positive")
        if self.step_init is not None and not (self.step_init > 0):
            raise ConfigurationError("step_init must be positive")
        if self.mu is not None and not (self.mu > 0):
            raise ConfigurationError("mu must be positive")
        if not (self.a > 0):
            raise ConfigurationError("a must be positive")
        if self.b < 0:
            raise ConfigurationError("background must be nonnegative")
        if self.init not in ("adjoint", "zeros"):
            raise ConfigurationError(f"unknown init: {self.init!r}")

    def describe(self) -> dict:
        return {
            "max_outer": self.max_outer,
            "max_inner": self.max_inner,
            "step_rule": self.step_rule,
            "step_init": self.step_init,
            "shrink": self.shrink,
            "tolerance": self.tolerance,
            "mu": self.mu,
            "a": self.a,
            "b": self.b,
            "init": self.init,
            "seed": self.seed,
        }


@dataclass
class SolveReport:
    """Result of one variational solve."""

    volume: np.ndarray
    trace: list[float]
    iterations: int
    termination: str
    wall_time: float
    method: str
    resolved: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def to_json(self, max_trace_points: int = 1000) -> dict:
        """Deterministic summary (timings excluded so reruns byte-match)."""
        trace = self.trace
        if len(trace) > max_trace_points:
            idx = np.unique(
                np.linspace(0, len(trace) - 1, max_trace_points).round().astype(int)
            )
            trace = [trace[i] for i in idx]
        return {
            "method": self.method,
            "iterations": self.iterations,
            "termination": self.termination,
            "objective_initial": self.trace[0] if self.trace else None,
            "objective_final": self.trace[-1] if self.trace else None,
            "trace": [float(v) for v in trace],
            "resolved": self.resolved,
        }


def resolve_mu(
    params: SolverParams, norms: np.ndarray, g: np.ndarray, scale: float = 0.1
) -> float:
    """params.mu, or the data-adaptive default scale * max(norms)^2 * max(g).

    The scale differs per model because the two penalties sit against
    fidelities with very different curvature: 0.1 suits the CEL0 least
    squares pairing, while the KL + theta pairing needs a much larger
    mu before weak ghost activations are suppressed.
    """
    if params.mu is not None:
        return float(params.mu)
    return float(scale * np.max(norms) ** 2 * np.max(g))


def _initial_volume(op: ForwardOperator, g, params: SolverParams) -> np.ndarray:
    if params.init == "zeros":
        return np.zeros(op.volume_shape)
    x0 = np.maximum(op.adjoint(g - params.b), 0.0)
    produced = float(np.sum(op.forward(x0)))
    target = float(np.sum(np.maximum(g - params.b, 0.0)))
    if produced <= 0 or target <= 0:
        return np.zeros(op.volume_shape)
    return x0 * (target / produced)


def _descend(
    x: np.ndarray,
    value_of: Callable,
    grad_of: Callable,
    prox: Callable,
    penalty_of: Callable,
    params: SolverParams,
    max_iters: int,
    tau0: float,
    offset: float = 0.0,
    iteration_base: int = 0,
):
    """Shared proximal-gradient loop; see module docstring for the
    acceptance tests.  Returns (x, trace, iterations, termination, tau).

    value_of(x) -> (smooth value, aux); grad_of(aux) -> gradient;
    prox(y, tau) -> projected/thresholded iterate; penalty_of(x) ->
    prox-handled penalty value.  The trace holds smooth + penalty +
    offset at x0 and after every iteration.
    """
    backtracking = params.step_rule == "backtracking"
    tau = float(params.step_init if params.step_init is not None else tau0)
    tau_floor = tau * _STEP_FLOOR_FACTOR
    tau_cap = tau * _STEP_CAP_FACTOR

    f, aux = value_of(x)
    pen = penalty_of(x)
    total = f + pen + offset
    if not np.isfinite(total):
        raise DivergenceError(
            f"objective non-finite at iteration {iteration_base}", iteration_base
        )
    trace = [float(total)]
    streak = 0
    iterations = 0
    termination = "max_iter"

    for it in range(max_iters):
        grad = grad_of(aux)
        moved = False
        while True:
            y = x - tau * grad
            xp = prox(y, tau)
            delta = xp - x
            if not np.any(delta):
                break
            fp, auxp = value_of(xp)
            penp = penalty_of(xp)
            totalp = fp + penp + offset
            if not backtracking:
                if not np.isfinite(totalp):
                    raise DivergenceError(
                        f"objective non-finite at iteration {iteration_base + it}",
                        iteration_base + it,
                    )
                moved = True
                break
            if np.isfinite(totalp):
                dn = float(np.vdot(delta, delta))
                quad = f + float(np.vdot(grad, delta)) + dn / (2.0 * tau)
                if fp <= quad and totalp <= total:
                    moved = True
                    break
            tau *= params.shrink
            if tau < tau_floor:
                break

        iterations = it + 1
        if not moved:
            trace.append(trace[-1])
            termination = "tolerance"
            break

        rel_change = abs(total - totalp) <= params.tolerance * max(1.0, abs(total))
        step_small = float(np.linalg.norm(delta)) <= params.tolerance * max(
            1.0, float(np.linalg.norm(x))
        )
        x, f, aux, pen, total = xp, fp, auxp, penp, totalp
        trace.append(float(total))
        if backtracking:
            tau = min(tau * _STEP_GROW, tau_cap)
        streak = streak + 1 if (rel_change and step_small) else 0
        if streak >= _TOL_STREAK:
            termination = "tolerance"
            break

    return x, trace, iterations, termination, tau


def solve_l2_cel0(g, dictionary: PsfDictionary, params: SolverParams) -> SolveReport:
    """Nonnegative prox-gradient descent on ||forward(x)+b-g||^2 + CEL0.

    Gradient step on the quadratic fidelity, closed-form CEL0 prox
    (which embeds the x >= 0 constraint), flat iteration budget
    max_outer * max_inner.
    """
    start = time.perf_counter()
    op = operator_for(dictionary)
    g = np.asarray(g, dtype=np.float64)
    if g.shape != op.image_shape:
        raise ShapeError(f"image shape {g.shape} != {op.image_shape}")
    norms = op.column_norms()
    mu = resolve_mu(params, norms, g)
    b = params.b

    def value_of(x):
        r = op.forward(x, b) - g
        return float(np.vdot(r, r)), r

    def grad_of(r):
        return 2.0 * op.adjoint(r)

    def prox(y, tau):
        return cel0_penalty(y, norms, mu, "prox", step=tau)

    def penalty_of(x):
        return cel0_penalty(x, norms, mu, "value")

    lip = 2.0 * op.operator_norm() ** 2
    x0 = _initial_volume(op, g, params)
    x, trace, iters, termination, _ = _descend(
        x0,
        value_of,
        grad_of,
        prox,
        penalty_of,
        params,
        params.max_outer * params.max_inner,
        tau0=1.0 / lip,
    )
    return SolveReport(
        volume=x,
        trace=trace,
        iterations=iters,
        termination=termination,
        wall_time=time.perf_counter() - start,
        method="l2-cel0",
        resolved={**params.describe(), "mu": mu, "a": None, "b": b},
    )


def _kl_terms(op: ForwardOperator, g, b):
    """Shared KL plumbing: solver-form value/grad and the full-KL offset."""
    pos = g > 0
    offset = float(np.sum(g[pos] * np.log(g[pos])) - np.sum(g))

    def value_of(x):
        z = op.forward(x, b)
        val = float(np.sum(z) - np.sum(g[pos] * np.log(z[pos])))
        return val, z

    def grad_of(z):
        ratio = np.zeros_like(z)
        np.divide(g, z, out=ratio, where=pos)
        return op.adjoint(1.0 - ratio)

    return value_of, grad_of, offset


def solve_kl_nc(g, dictionary: PsfDictionary, params: SolverParams) -> SolveReport:
    """IRL1 on KL fidelity + mu * theta penalty, x >= 0.

    Outer rounds relinearize theta; inner rounds run prox-gradient with
    a weighted soft threshold.  The reported trace is the true
    objective (full KL + mu * theta) at the initial point and after each
    outer round, guaranteed nonincreasing; per-round inner surrogate
    traces are exposed in extras["inner_traces"].
    """
    start = time.perf_counter()
    op = operator_for(dictionary)
    g = np.asarray(g, dtype=np.float64)
    if g.shape != op.image_shape:
        raise ShapeError(f"image shape {g.shape} != {op.image_shape}")
    if not (params.b > 0):
        raise ConfigurationError(
            "solve_kl_nc requires background b > 0 to keep the KL log defined"
        )
    b = params.b
    norms = op.column_norms()
    mu = resolve_mu(params, norms, g, scale=3.0)
    a = params.a

    value_of, grad_of, offset = _kl_terms(op, g, b)

    def true_objective(x, smooth_val=None):
        val = smooth_val if smooth_val is not None else value_of(x)[0]
        return val + offset + mu * nc_penalty(x, a, "value")

    # initial step from the KL curvature bound max(g)/b^2 at feasible iterates
    lip0 = op.operator_norm() ** 2 * float(np.max(g)) / (b * b)
    tau = float(params.step_init) if params.step_init is not None else 1.0 / max(lip0, 1e-12)

    x = _initial_volume(op, g, params)
    current = true_objective(x)
    if not np.isfinite(current):
        raise DivergenceError("objective non-finite at iteration 0", 0)
    trace = [float(current)]
    inner_traces = []
    total_inner = 0
    termination = "max_iter"

    for outer in range(params.max_outer):
        weights = mu * nc_penalty(x, a, "irl1_weights")

        def prox(y, tau_, w=weights):
            return np.maximum(y - tau_ * w, 0.0)

        def penalty_of(v, w=weights):
            return float(np.sum(w * np.abs(v)))

        inner_params = replace(params, step_init=tau, mu=mu)
        x_new, inner_trace, inner_iters, _, tau = _descend(
            x,
            value_of,
            grad_of,
            prox,
            penalty_of,
            inner_params,
            params.max_inner,
            tau0=tau,
            iteration_base=total_inner,
        )
        total_inner += inner_iters
        inner_traces.append([float(v) for v in inner_trace])

        new_val = true_objective(x_new)
        if not np.isfinite(new_val):
            raise DivergenceError(
                f"objective non-finite after outer round {outer}", total_inner
            )
        if new_val > current:
            # float-level plateau: keep the previous iterate
            termination = "tolerance"
            break
        moved = bool(np.any(x_new != x))
        x = x_new
        rel_change = abs(current - new_val) <= params.tolerance * max(1.0, abs(current))
        current = new_val
        trace.append(float(current))
        if rel_change or not moved:
            termination = "tolerance"
            break

    return SolveReport(
        volume=x,
        trace=trace,
        iterations=total_inner,
        termination=termination,
        wall_time=time.perf_counter() - start,
        method="kl-nc",
        resolved={**params.describe(), "mu": mu, "a": a, "b": b},
        extras={"inner_traces": inner_traces},
    )


def refine_with_composite(
    g,
    gt,
    dictionary: PsfDictionary,
    cfg: LossConfig,
    params: SolverParams,
) -> SolveReport:
    """Descent on the composite loss with ground truth in the MSE term.

    The smooth part collects w1 * fidelity + w3 * smoothed MSE (plus
    w2 * mu * theta for the Poisson branch); the Gaussian branch handles
    w2 * CEL0 through its prox using the rescaling identity
    w * phi(a, mu; .) = phi(sqrt(w) * a, w * mu; .).  Iterates stay
    nonnegative, and the trace equals composite_loss totals.
    """
    start = time.perf_counter()
    op = operator_for(dictionary)
    g = np.asarray(g, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if g.shape != op.image_shape:
        raise ShapeError(f"image shape {g.shape} != {op.image_shape}")
    if gt.shape != op.volume_shape:
        raise ShapeError(f"gt shape {gt.shape} != {op.volume_shape}")

    kernel = gaussian_kernel_3d(cfg.kernel_sigma, cfg.kernel_radius)
    w1, w2, w3 = cfg.w1, cfg.w2, cfg.w3
    use_fid = w1 > 0
    gaussian = cfg.noise == "gaussian"
    norms = op.column_norms() if gaussian and w2 > 0 else None
    offset = 0.0
    kl_value = kl_grad = None
    if use_fid and not gaussian:
        if not (cfg.b > 0):
            raise ConfigurationError(
                "poisson refinement with w1 > 0 requires background b > 0"
            )
        kl_value, kl_grad, offset = _kl_terms(op, g, cfg.b)
        offset *= w1

    def value_of(x):
        aux = {}
        val = 0.0
        if use_fid:
            if gaussian:
                r = op.forward(x, cfg.b) - g
                val += w1 * float(np.vdot(r, r))
                aux["residual"] = r
            else:
                kl_val, z = kl_value(x)
                val += w1 * kl_val
                aux["z"] = z
        if not gaussian and w2 > 0:
            val += w2 * cfg.mu * nc_penalty(x, cfg.a, "value")
            aux["x"] = x
        if w3 > 0:
            sm = _smooth(x - gt, kernel)
            val += w3 * float(np.vdot(sm, sm))
            aux["smoothed"] = sm
        return val, aux

    def grad_of(aux):
        grad = np.zeros(op.volume_shape)
        if use_fid:
            if gaussian:
                grad += w1 * 2.0 * op.adjoint(aux["residual"])
            else:
                grad += w1 * kl_grad(aux["z"])
        if not gaussian and w2 > 0:
            grad += w2 * cfg.mu * nc_penalty(aux["x"], cfg.a, "grad")
        if w3 > 0:
            grad += w3 * 2.0 * _smooth(aux["smoothed"], kernel)
        return grad

    if gaussian and w2 > 0:
        scaled_norms = norms * np.sqrt(w2)
        scaled_mu = w2 * cfg.mu

        def prox(y, tau):
            return cel0_penalty(y, scaled_norms, scaled_mu, "prox", step=tau)

        def penalty_of(x):
            return cel0_penalty(x, scaled_norms, scaled_mu, "value")

    else:

        def prox(y, tau):
            return np.maximum(y, 0.0)

        def penalty_of(x):
            return 0.0

    lip = 2.0 * w3  # unit-sum kernel: ||G3||_2 <= 1
    if use_fid:
        if gaussian:
            lip += w1 * 2.0 * op.operator_norm() ** 2
        else:
            lip += w1 * op.operator_norm() ** 2 * float(np.max(g)) / (cfg.b**2)
    if not gaussian and w2 > 0:
        lip += w2 * cfg.mu * 2.0 / (cfg.a**2)

    x0 = _initial_volume(op, g, params) if use_fid else (
        np.zeros(op.volume_shape) if params.init == "zeros" else gt * 0.0
    )
    x, trace, iters, termination, _ = _descend(
        x0,
        value_of,
        grad_of,
        prox,
        penalty_of,
        params,
        params.max_outer * params.max_inner,
        tau0=1.0 / max(lip, 1e-12),
        offset=offset,
    )
    return SolveReport(
        volume=x,
        trace=trace,
        iterations=iters,
        termination=termination,
        wall_time=time.perf_counter() - start,
        method="refine",
        resolved={**cfg.describe(), **params.describe()},
    )
