"""Online primal-dual steppers, the regularized saddle-point oracle, and tracking constants.

Notation: primal ``x`` (length n), dual ``lam`` (length M), output
``y = h_k(x)`` (length m).  The regularized Lagrangian is

    L_pd(x, lam) = f(x) + f0(y) + lam . g(y) + p/2 |x|^2 - d/2 |lam|^2.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import InvalidArgument, NumericError, UnsupportedOperation
from .plant import SLOT_APPLIED, SLOT_MINUS, SLOT_PLUS, measure, numerical_jacobian
from .sets import DualBox, project_dual, project_primal
from .zograd import probe_points

log = logging.getLogger(__name__)

Array = np.ndarray


@dataclass
class TimeVaryingProblem:
    """Per-step providers for the sampled network problem.

    Every callable takes the step index ``k`` first.  ``f0`` and ``g`` are
    evaluated at (measured) outputs; ``grad_f0``, ``jac_g`` and ``model``
    (the output Jacobian ``C``) are only needed by the model-based baseline.
    ``set_lead`` selects which step's primal sets the update at step ``k``
    projects onto: ``k + set_lead``.  Use 1 when the new iterate is applied
    at the next step and the sets move with time.
    """

    n: int
    local_grad: Callable[[int, Array], Array]
    f0: Callable[[int, Array], float]
    g: Callable[[int, Array], Array] | None = None
    n_constraints: int = 0
    local_cost: Callable[[int, Array], float] | None = None
    primal_sets: Callable[[int], Sequence] | None = None
    dual_set: Callable[[int], DualBox] | None = None
    grad_f0: Callable[[int, Array], Array] | None = None
    jac_g: Callable[[int, Array], Array] | None = None
    model: Callable[[int], Array] | None = None
    p: float = 0.0
    d: float = 0.0
    set_lead: int = 0

    def __post_init__(self):
        if self.p < 0 or self.d < 0:
            raise InvalidArgument(f"regularization must be non-negative (p={self.p}, d={self.d})")
        if self.g is None and self.n_constraints:
            raise InvalidArgument("n_constraints > 0 but no constraint function")
        if self.dual_set is None and self.n_constraints:
            default = DualBox.uniform(self.n_constraints)
            self.dual_set = lambda k: default

    def constraints(self, k, y):
        if self.g is None:
            return np.zeros(0)
        return np.asarray(self.g(k, y), dtype=float)

    def blocks(self, k):
        return [] if self.primal_sets is None else self.primal_sets(k)

    def project_dual(self, k, lam):
        if self.n_constraints == 0:
            return lam
        return project_dual(lam, self.dual_set(k))


@dataclass(frozen=True)
class PrimalDualState:
    x: Array
    lam: Array
    k: int = 0
    t: float = 0.0


@dataclass(frozen=True)
class StepSizes:
    """Step sizes and probing options.

    ``alpha`` and ``alpha_dual`` may be scalars or per-coordinate vectors.
    ``project_mode="every-period"`` applies the primal projection only at
    the end of each exploration period of ``period_steps`` steps.
    ``average_third`` replaces the third measurement with the mean of the two
    probe measurements.
    """

    alpha: float | Array
    alpha_dual: float | Array | None = None
    epsilon: float = 1e-3
    project_mode: str = "every-step"
    period_steps: int | None = None
    average_third: bool = False

    def __post_init__(self):
        if np.any(np.asarray(self.alpha) <= 0):
            raise InvalidArgument("primal step sizes must be positive")
        if self.alpha_dual is not None and np.any(np.asarray(self.alpha_dual) <= 0):
            raise InvalidArgument("dual step sizes must be positive")
        if not self.epsilon > 0:
            raise InvalidArgument("probe radius epsilon must be positive")
        if self.project_mode not in ("every-step", "every-period"):
            raise InvalidArgument(f"unknown project_mode {self.project_mode!r}")
        if self.project_mode == "every-period" and not self.period_steps:
            raise InvalidArgument("every-period projection needs period_steps")

    @property
    def dual(self):
        return self.alpha if self.alpha_dual is None else self.alpha_dual

    def projects_at(self, k):
        if self.project_mode == "every-step":
            return True
        return (k + 1) % self.period_steps == 0


@dataclass(frozen=True)
class StepRecord:
    k: int
    t: float
    x: Array
    lam: Array
    y: Array
    y_hat: Array
    grad_norm: float
    objective: float
    xi: Array | None = None


class StepOutcome(NamedTuple):
    state: PrimalDualState
    record: StepRecord


@dataclass(frozen=True)
class TrackingAnalysis:
    eta_phi: float
    L_phi: float
    e_f: float = 0.0
    e_y: float = 0.0
    sigma: float = 0.0
    eps_phi: float = 0.0

    def __post_init__(self):
        if not 0 < self.eta_phi <= self.L_phi:
            raise InvalidArgument(f"need 0 < eta_phi <= L_phi, got {self.eta_phi}, {self.L_phi}")


def regularized_lagrangian(problem, k, x, lam, y):
    x = np.asarray(x, dtype=float)
    lam = np.asarray(lam, dtype=float)
    val = float(problem.f0(k, y))
    if problem.local_cost is not None:
        val += float(problem.local_cost(k, x))
    if lam.size:
        val += float(lam @ problem.constraints(k, y))
    return val + 0.5 * problem.p * float(x @ x) - 0.5 * problem.d * float(lam @ lam)


def _primal_update(problem, state, sizes, direction, set_step=None):
    x = state.x
    alpha = np.asarray(sizes.alpha, dtype=float)
    z = (1.0 - alpha * problem.p) * x - alpha * direction
    if sizes.projects_at(state.k):
        step = state.k + problem.set_lead if set_step is None else set_step
        z = project_primal(z, problem.blocks(step))
    return z


def _dual_update(problem, state, sizes, g_hat):
    if problem.n_constraints == 0:
        return state.lam
    a = np.asarray(sizes.dual, dtype=float)
    return problem.project_dual(state.k, (1.0 - a * problem.d) * state.lam + a * g_hat)


def model_free_step(state, problem, plant, signal, sizes, noise=None):
    """One step of the model-free primal-dual algorithm.

    Forward probe, backward probe and the control application are evaluated
    on ``plant`` in that order with the exogenous input of step ``k`` held
    fixed.  The primal direction uses the two-point estimate of the output
    terms of the Lagrangian; the dual step uses the measurement at ``x``.
    Plant failures propagate and leave ``state`` untouched.
    """
    k, x, lam = state.k, state.x, state.lam
    xi = signal.sample(state.t)
    pair = probe_points(x, xi, sizes.epsilon)
    y_plus = measure(plant.evaluate(pair.x_plus, k), noise, k, SLOT_PLUS)
    y_minus = measure(plant.evaluate(pair.x_minus, k), noise, k, SLOT_MINUS)
    y_true = plant.apply(x, k) if hasattr(plant, "apply") else plant.evaluate(x, k)
    if sizes.average_third:
        y_hat = 0.5 * (y_plus + y_minus)
    else:
        y_hat = measure(y_true, noise, k, SLOT_APPLIED)

    diff = problem.f0(k, y_plus) - problem.f0(k, y_minus)
    if lam.size:
        diff += lam @ (problem.constraints(k, y_plus) - problem.constraints(k, y_minus))
    grad = np.asarray(problem.local_grad(k, x), dtype=float) + xi * (diff / (2.0 * sizes.epsilon))

    new = PrimalDualState(
        _primal_update(problem, state, sizes, grad),
        _dual_update(problem, state, sizes, problem.constraints(k, y_hat)),
        k + 1,
        state.t + signal.dt,
    )
    rec = StepRecord(
        k, state.t, x, lam, y_true, y_hat, float(np.linalg.norm(grad)),
        regularized_lagrangian(problem, k, x, lam, y_hat), xi,
    )
    return StepOutcome(new, rec)


def lagrangian_gradient(problem, k, x, lam, y, C):
    """Model-based ``grad_x L_pd`` without the ``p x`` term."""
    if problem.grad_f0 is None or (problem.n_constraints and problem.jac_g is None):
        raise UnsupportedOperation("model-based gradient needs grad_f0 (and jac_g when constrained)")
    out_grad = np.asarray(problem.grad_f0(k, y), dtype=float)
    if problem.n_constraints:
        out_grad = out_grad + np.asarray(problem.jac_g(k, y)).T @ lam
    return np.asarray(problem.local_grad(k, x), dtype=float) + C.T @ out_grad


def _model_matrix(problem, k, C):
    if C is not None:
        return np.atleast_2d(np.asarray(C, dtype=float))
    if problem.model is None:
        raise UnsupportedOperation("problem has no model matrix C")
    return np.atleast_2d(np.asarray(problem.model(k), dtype=float))


def _model_based_update(problem, state, sizes, y_hat, C, set_step=None):
    grad = lagrangian_gradient(problem, state.k, state.x, state.lam, y_hat, C)
    x_new = _primal_update(problem, state, sizes, grad, set_step)
    lam_new = _dual_update(problem, state, sizes, problem.constraints(state.k, y_hat))
    return x_new, lam_new, grad


def model_based_step(state, problem, plant, sizes, noise=None, C=None):
    """One step of the measurement-based primal-dual method using the model ``C``."""
    k = state.k
    C = _model_matrix(problem, k, C)
    y_true = plant.apply(state.x, k) if hasattr(plant, "apply") else plant.evaluate(state.x, k)
    y_hat = measure(y_true, noise, k, SLOT_APPLIED)
    x_new, lam_new, grad = _model_based_update(problem, state, sizes, y_hat, C)
    rec = StepRecord(
        k, state.t, state.x, state.lam, y_true, y_hat, float(np.linalg.norm(grad)),
        regularized_lagrangian(problem, k, state.x, state.lam, y_hat),
    )
    return StepOutcome(PrimalDualState(x_new, lam_new, k + 1, state.t), rec)


def primal_dual_operator(problem, k, x, lam, plant, C):
    """``phi(z) = (grad_x L_pd(z), -g(y(x)) + d lam)`` with model outputs."""
    y = plant.evaluate(x, k)
    gx = lagrangian_gradient(problem, k, x, lam, y, C) + problem.p * x
    if problem.n_constraints:
        return gx, -problem.constraints(k, y) + problem.d * lam
    return gx, np.zeros(0)


def estimate_operator_constants(problem, k, plant, C=None, n_pairs=200, scale=1.0, rng=None, center=None):
    """Estimate strong-monotonicity and Lipschitz constants of the primal-dual operator.

    A finite-difference Jacobian of ``phi`` at ``center`` gives
    ``lambda_min`` of its symmetric part and its spectral norm; random point
    pairs around ``center`` tighten both (minimum ratio for monotonicity,
    maximum ratio for Lipschitz).  Exact for affine operators.
    """
    C = _model_matrix(problem, k, C)
    rng = np.random.default_rng(0) if rng is None else rng
    n, M = problem.n, problem.n_constraints
    dim = n + M
    z0 = np.zeros(dim) if center is None else np.asarray(center, dtype=float)

    def phi(z):
        return np.concatenate(primal_dual_operator(problem, k, z[:n], z[n:], plant, C))

    h = 1e-6 * max(1.0, scale)
    jac = np.empty((dim, dim))
    for j in range(dim):
        e = np.zeros(dim)
        e[j] = h
        jac[:, j] = (phi(z0 + e) - phi(z0 - e)) / (2 * h)
    eta = float(np.linalg.eigvalsh(0.5 * (jac + jac.T)).min())
    lip = float(np.linalg.norm(jac, 2))
    for _ in range(n_pairs):
        a = z0 + scale * rng.standard_normal(dim)
        b = z0 + scale * rng.standard_normal(dim)
        dz = a - b
        dphi = phi(a) - phi(b)
        nrm2 = float(dz @ dz)
        if nrm2 == 0:
            continue
        eta = min(eta, float(dphi @ dz) / nrm2)
        lip = max(lip, math.sqrt(float(dphi @ dphi) / nrm2))
    return eta, lip


def oracle_step_size(eta, lip):
    """Inner step for the saddle-point oracle: half of 0.9 times the admissible bound."""
    return 0.9 * (2.0 * eta / lip**2) * 0.5


class _FrozenPlant:
    """Noise-free view of a plant at a fixed step, with no side effects."""

    def __init__(self, plant, k):
        self._plant, self._k = plant, k

    def evaluate(self, x, k=None):
        return self._plant.evaluate(x, self._k)


def saddle_point_oracle(problem, k, plant, tol=1e-10, max_iter=10**6, C=None, x0=None,
                        alpha=None, alpha_dual=None, lam0=None):
    """Unique saddle point of the regularized Lagrangian at a frozen step ``k``.

    Iterates the model-based primal-dual map with a constant step until
    successive iterates differ by less than ``tol``.  When ``alpha`` is not
    given it is derived from empirically estimated operator constants.  A
    missing analytic model is replaced by a numerical Jacobian at ``x0``.

    Raises
    ------
    NumericError
        After ``max_iter`` iterations without meeting ``tol``.
    """
    frozen = _FrozenPlant(plant, k)
    x = np.zeros(problem.n) if x0 is None else np.array(x0, dtype=float)
    if C is None:
        C = problem.model(k) if problem.model is not None else numerical_jacobian(frozen, x, k)
    C = np.atleast_2d(np.asarray(C, dtype=float))
    if alpha is None:
        eta, lip = estimate_operator_constants(problem, k, frozen, C)
        if eta <= 0:
            raise NumericError(f"operator not strongly monotone (eta estimate {eta:.3e})")
        alpha = oracle_step_size(eta, lip)
    sizes = StepSizes(alpha=alpha, alpha_dual=alpha if alpha_dual is None else alpha_dual)
    lam = np.zeros(problem.n_constraints) if lam0 is None else np.array(lam0, dtype=float)
    state = PrimalDualState(project_primal(x, problem.blocks(k)), lam, k)
    tol2 = tol * tol
    for it in range(1, max_iter + 1):
        x_new, lam_new, _ = _model_based_update(problem, state, sizes, frozen.evaluate(state.x), C, k)
        dx = x_new - state.x
        dl = lam_new - state.lam
        state = PrimalDualState(x_new, lam_new, k)
        if float(dx @ dx) + float(dl @ dl) < tol2:
            return state.x, state.lam
    raise NumericError(f"saddle-point oracle did not converge in {max_iter} iterations", iterations=max_iter)


def _check_alpha(alpha, analysis):
    bound = 2.0 * analysis.eta_phi / analysis.L_phi**2
    if not 0 < alpha < bound:
        raise InvalidArgument(f"step size {alpha} outside (0, 2 eta/L^2) = (0, {bound:.6g})")


def contraction_constant(alpha, analysis):
    """``c = sqrt(1 - 2 alpha eta + alpha^2 L^2)`` for ``0 < alpha < 2 eta / L^2``."""
    _check_alpha(alpha, analysis)
    return math.sqrt(max(0.0, 1.0 - 2.0 * alpha * analysis.eta_phi + (alpha * analysis.L_phi) ** 2))


def tracking_error_bound(alpha, analysis):
    """Asymptotic tracking bound ``(alpha eps_phi + sigma) / (1 - c)``."""
    if analysis.eps_phi < 0 or analysis.sigma < 0:
        raise InvalidArgument("eps_phi and sigma must be non-negative")
    c = contraction_constant(alpha, analysis)
    return (alpha * analysis.eps_phi + analysis.sigma) / (1.0 - c)


def period_averaged_displacement(trace, x_start, problem, plant, alpha, period_steps, k=0, lam=None, C=None):
    """Realized displacement over one exploration period and its averaged-gradient reference.

    ``trace`` holds the primal iterates ``x`` (or states) from the start of
    the period to its end, inclusive (``period_steps + 1`` entries).  The
    reference is ``-alpha * period_steps * grad_x L_pd(x_start)``.
    """
    if len(trace) != period_steps + 1:
        raise InvalidArgument(f"trace has {len(trace)} entries, expected {period_steps + 1}")
    xs = [np.asarray(getattr(s, "x", s), dtype=float) for s in trace]
    x_start = np.asarray(x_start, dtype=float)
    lam = np.zeros(problem.n_constraints) if lam is None else np.asarray(lam, dtype=float)
    frozen = _FrozenPlant(plant, k)
    C = _model_matrix(problem, k, C) if (C is not None or problem.model is not None) else numerical_jacobian(frozen, x_start, k)
    y = frozen.evaluate(x_start)
    grad = lagrangian_gradient(problem, k, x_start, lam, y, C) + problem.p * x_start
    return xs[-1] - xs[0], -alpha * period_steps * grad
