import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfopf.engine import (
    PrimalDualState,
    StepSizes,
    TimeVaryingProblem,
    TrackingAnalysis,
    contraction_constant,
    estimate_operator_constants,
    lagrangian_gradient,
    model_based_step,
    model_free_step,
    period_averaged_displacement,
    regularized_lagrangian,
    saddle_point_oracle,
    tracking_error_bound,
)
from mfopf.errors import InvalidArgument, NumericError, PowerFlowDivergence, UnsupportedOperation
from mfopf.plant import LinearPlant, NoiseModel
from mfopf.sets import Box, primal_violation
from mfopf.signals import assign_frequencies, make_sinusoid_bank
from problems import (
    ConstantSignal,
    exp_benchmark_error,
    random_static_instance,
    scalar_qp,
    scalar_qp_solution,
)


def scalar_problem(constraint=False, p=0.1, d=0.1):
    kw = dict(
        n=1,
        local_grad=lambda k, x: np.zeros(1),
        f0=lambda k, y: float(y[0] ** 2),
        grad_f0=lambda k, y: np.array([2.0 * y[0]]),
        primal_sets=lambda k: [([0], Box([-1.0], [1.0]))],
        model=lambda k: np.eye(1),
        p=p,
        d=d,
    )
    if constraint:
        kw.update(g=lambda k, y: np.array([y[0] - 0.3]), jac_g=lambda k, y: np.eye(1), n_constraints=1)
    return TimeVaryingProblem(**kw)


def test_lagrangian_examples():
    prob = TimeVaryingProblem(n=1, local_grad=lambda k, x: np.zeros(1), f0=lambda k, y: float(y[0] ** 2), p=0.2, d=0.1)
    assert regularized_lagrangian(prob, 0, [1.0], [], [1.0]) == pytest.approx(1.1)
    zero = TimeVaryingProblem(n=1, local_grad=lambda k, x: np.zeros(1), f0=lambda k, y: 0.0)
    assert regularized_lagrangian(zero, 0, [0.0], [], [0.0]) == 0.0
    con = TimeVaryingProblem(
        n=1, local_grad=lambda k, x: np.zeros(1), f0=lambda k, y: 0.0,
        g=lambda k, y: np.array([y[0] - 1.0]), n_constraints=1,
    )
    assert regularized_lagrangian(con, 0, [0.0], [3.0], [2.0]) == pytest.approx(3.0)


def test_model_free_scalar_step():
    out = model_free_step(
        PrimalDualState(np.array([0.5]), np.zeros(0)), scalar_problem(), LinearPlant([[1.0]]),
        ConstantSignal((1.0,)), StepSizes(alpha=0.1, epsilon=0.01),
    )
    assert out.state.x[0] == pytest.approx(0.395, abs=1e-12)
    assert out.record.grad_norm == pytest.approx(1.0, abs=1e-12)
    assert out.state.k == 1 and out.state.t == 1.0


def test_model_free_fixed_point():
    out = model_free_step(
        PrimalDualState(np.array([0.0]), np.zeros(0)), scalar_problem(), LinearPlant([[1.0]]),
        ConstantSignal((1.0,)), StepSizes(alpha=0.1, epsilon=0.01),
    )
    assert out.state.x[0] == 0.0


def test_model_free_dual_step():
    out = model_free_step(
        PrimalDualState(np.array([0.5]), np.zeros(1)), scalar_problem(constraint=True), LinearPlant([[1.0]]),
        ConstantSignal((1.0,)), StepSizes(alpha=0.1, alpha_dual=1.0, epsilon=0.01),
    )
    assert out.state.lam[0] == pytest.approx(0.2, abs=1e-12)


def test_model_based_matches_model_free_on_quadratic():
    state = PrimalDualState(np.array([0.5]), np.zeros(0))
    out = model_based_step(state, scalar_problem(), LinearPlant([[1.0]]), StepSizes(alpha=0.1))
    assert out.state.x[0] == pytest.approx(0.395, abs=1e-12)


def test_model_based_dual_matches_model_free():
    prob = scalar_problem(constraint=True)
    state = PrimalDualState(np.array([0.5]), np.zeros(1))
    sizes = StepSizes(alpha=0.1, alpha_dual=1.0, epsilon=0.01)
    a = model_based_step(state, prob, LinearPlant([[1.0]]), sizes).state.lam
    b = model_free_step(state, prob, LinearPlant([[1.0]]), ConstantSignal((1.0,)), sizes).state.lam
    np.testing.assert_array_equal(a, b)


def test_model_based_zero_model():
    prob = TimeVaryingProblem(
        n=1, local_grad=lambda k, x: np.array([0.3]), f0=lambda k, y: float(y[0] ** 2),
        grad_f0=lambda k, y: np.array([2.0 * y[0]]), p=0.1,
    )
    out = model_based_step(PrimalDualState(np.array([0.5]), np.zeros(0)), prob, LinearPlant([[0.0]]),
                           StepSizes(alpha=0.1), C=np.zeros((1, 1)))
    assert out.state.x[0] == pytest.approx(0.99 * 0.5 - 0.1 * 0.3)


def test_model_based_needs_model():
    prob = TimeVaryingProblem(n=1, local_grad=lambda k, x: np.zeros(1), f0=lambda k, y: 0.0)
    with pytest.raises(UnsupportedOperation):
        model_based_step(PrimalDualState(np.zeros(1), np.zeros(0)), prob, LinearPlant([[1.0]]), StepSizes(alpha=0.1))


def test_plant_failure_propagates():
    class Broken:
        def evaluate(self, x, k):
            raise PowerFlowDivergence("boom", 3)

    state = PrimalDualState(np.array([0.5]), np.zeros(0))
    with pytest.raises(PowerFlowDivergence):
        model_free_step(state, scalar_problem(), Broken(), ConstantSignal((1.0,)), StepSizes(alpha=0.1))
    assert state.x[0] == 0.5 and state.k == 0


def test_oracle_scalar_qp():
    prob, plant = scalar_qp(0.01, 0.01)
    x, lam = saddle_point_oracle(prob, 0, plant, tol=1e-12)
    xs, ls = scalar_qp_solution(0.01, 0.01)
    assert x[0] == pytest.approx(0.980296, abs=1e-6) and x[0] == pytest.approx(xs, abs=1e-9)
    assert lam[0] == pytest.approx(1.97040, abs=1e-5) and lam[0] == pytest.approx(ls, abs=1e-8)


def test_oracle_approaches_unregularized_kkt():
    # the oracle step scales with d, so the limit is checked along a short ladder
    gaps = []
    for reg in (0.08, 0.04, 0.02, 0.01):
        prob, plant = scalar_qp(reg, reg)
        x, lam = saddle_point_oracle(prob, 0, plant, tol=1e-11)
        gaps.append(abs(x[0] - 1.0) + abs(lam[0] - 2.0))
    assert np.all(np.diff(gaps) < 0)
    assert gaps[-1] < 0.05


def test_oracle_unconstrained():
    prob, plant = scalar_qp(0.01, 0.01, constrained=False)
    x, lam = saddle_point_oracle(prob, 0, plant, x0=[1.5])
    assert abs(x[0]) < 1e-9 and lam.size == 0


def test_oracle_reports_nonconvergence():
    prob, plant = scalar_qp(0.01, 0.01)
    with pytest.raises(NumericError):
        saddle_point_oracle(prob, 0, plant, max_iter=5)


def test_oracle_uses_numerical_jacobian_without_model():
    prob, plant = scalar_qp(0.01, 0.01)
    prob.model = None
    x, _ = saddle_point_oracle(prob, 0, plant, tol=1e-12)
    assert x[0] == pytest.approx(scalar_qp_solution(0.01, 0.01)[0], abs=1e-7)


def test_contraction_examples():
    an = TrackingAnalysis(1.0, 2.0)
    assert contraction_constant(0.1, an) == pytest.approx(math.sqrt(0.84))
    assert contraction_constant(1e-9, an) == pytest.approx(1.0, abs=1e-8)
    assert contraction_constant(1e-9, an) < 1.0
    with pytest.raises(InvalidArgument):
        contraction_constant(0.6, an)
    with pytest.raises(InvalidArgument):
        contraction_constant(0.0, an)


def test_tracking_bound_examples():
    an = TrackingAnalysis(1.0, 2.0, eps_phi=0.05, sigma=0.01)
    assert tracking_error_bound(0.1, an) == pytest.approx(0.015 / (1 - math.sqrt(0.84)))
    assert tracking_error_bound(0.1, an) == pytest.approx(0.17968, abs=1e-5)
    assert tracking_error_bound(0.1, TrackingAnalysis(1.0, 2.0)) == 0.0
    near = TrackingAnalysis(1.0, 2.0, eps_phi=0.05)
    alphas = np.linspace(0.3, 0.49, 20)
    bounds = [tracking_error_bound(a, near) for a in alphas]
    assert np.all(np.diff(bounds) > 0)


def test_analysis_validation():
    with pytest.raises(InvalidArgument):
        TrackingAnalysis(2.0, 1.0)
    with pytest.raises(InvalidArgument):
        tracking_error_bound(0.1, TrackingAnalysis(1.0, 2.0, eps_phi=-1.0))


def test_step_sizes_validation():
    with pytest.raises(InvalidArgument):
        StepSizes(alpha=0.0)
    with pytest.raises(InvalidArgument):
        StepSizes(alpha=0.1, epsilon=0.0)
    with pytest.raises(InvalidArgument):
        StepSizes(alpha=0.1, project_mode="never")
    with pytest.raises(InvalidArgument):
        StepSizes(alpha=0.1, project_mode="every-period")


def test_every_period_projection():
    prob = scalar_problem(p=0.0)
    sizes = StepSizes(alpha=1.0, epsilon=0.01, project_mode="every-period", period_steps=3)
    state = PrimalDualState(np.array([0.9]), np.zeros(0))
    prob.local_grad = lambda k, x: np.array([-1.0])
    prob.f0 = lambda k, y: 0.0
    xs = []
    for _ in range(3):
        state = model_free_step(state, prob, LinearPlant([[1.0]]), ConstantSignal((1.0,)), sizes).state
        xs.append(state.x[0])
    assert xs == pytest.approx([1.9, 2.9, 1.0])


def test_average_third_measurement():
    prob = scalar_problem(constraint=True)
    sizes = StepSizes(alpha=0.1, alpha_dual=1.0, epsilon=0.01, average_third=True)
    out = model_free_step(PrimalDualState(np.array([0.5]), np.zeros(1)), prob, LinearPlant([[1.0]]),
                          ConstantSignal((1.0,)), sizes)
    assert out.record.y_hat[0] == pytest.approx(0.5, abs=1e-15)


def test_operator_constants_exact_for_affine():
    prob, plant = scalar_qp(0.01, 0.01)
    eta, lip = estimate_operator_constants(prob, 0, plant)
    # phi(x, lam) = ((2 + p) x - lam, x - 1 + d lam): symmetric part diag(2 + p, d)
    J = np.array([[2.01, -1.0], [1.0, 0.01]])
    assert eta == pytest.approx(0.01, rel=1e-6)
    assert lip == pytest.approx(np.linalg.norm(J, 2), rel=1e-6)


def test_displacement_length_mismatch():
    prob, plant = scalar_qp(0.01, 0.01, constrained=False)
    with pytest.raises(InvalidArgument):
        period_averaged_displacement([np.zeros(1)] * 3, np.zeros(1), prob, plant, 0.1, 5)


def quadratic_period_run(alpha, epsilon, x0, xi_zero=False, T=20):
    c = np.array([1.0, -0.5])
    prob = TimeVaryingProblem(
        n=2, local_grad=lambda k, x: np.zeros(2), f0=lambda k, y: 0.5 * float((y - c) @ (y - c)),
        grad_f0=lambda k, y: y - c, model=lambda k: np.eye(2),
    )
    plant = LinearPlant(np.eye(2))
    sig = ConstantSignal((0.0, 0.0)) if xi_zero else make_sinusoid_bank(2, [1 / T, 2 / T])
    state = PrimalDualState(np.array(x0, dtype=float), np.zeros(0))
    trace = [state.x]
    for _ in range(T):
        state = model_free_step(state, prob, plant, sig, StepSizes(alpha=alpha, epsilon=epsilon)).state
        trace.append(state.x)
    return period_averaged_displacement(trace, x0, prob, plant, alpha, T)


def test_displacement_zero_probe():
    disp, _ = quadratic_period_run(0.01, 0.01, [0.3, 0.2], xi_zero=True)
    np.testing.assert_array_equal(disp, 0.0)


def test_displacement_zero_gradient():
    disp, ref = quadratic_period_run(0.01, 0.01, [1.0, -0.5])
    np.testing.assert_allclose(ref, 0.0, atol=1e-15)
    assert np.linalg.norm(disp) < 1e-12


def test_displacement_error_linear_in_alpha():
    rel = []
    for alpha in (0.004, 0.002, 0.001):
        disp, ref = quadratic_period_run(alpha, 0.01, [0.0, 0.0])
        rel.append(np.linalg.norm(disp - ref) / np.linalg.norm(ref))
    for a, b in zip(rel, rel[1:]):
        assert 1.7 <= a / b <= 2.4


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), eps=st.floats(1e-3, 0.5))
def test_model_free_is_xi_xi_weighted_model_gradient(seed, eps):
    rng = np.random.default_rng(seed)
    prob, plant = random_static_instance(rng)
    prob.primal_sets = None
    prob.p = 0.0
    x = rng.uniform(-1, 1, prob.n)
    lam = rng.uniform(0, 3, prob.n_constraints)
    xi = rng.standard_normal(prob.n)
    out = model_free_step(PrimalDualState(x, lam), prob, plant, ConstantSignal(tuple(xi)),
                          StepSizes(alpha=1.0, epsilon=eps))
    est = x - out.state.x
    C = prob.model(0)
    y = plant.evaluate(x)
    local = prob.local_grad(0, x)
    model = lagrangian_gradient(prob, 0, x, lam, y, C) - local
    np.testing.assert_allclose(est, local + np.outer(xi, xi) @ model, atol=1e-9 * (1 + np.linalg.norm(est)))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10**6), sigma=st.sampled_from([0.0, 1e-3, 0.05]))
def test_iterates_stay_feasible(seed, sigma):
    rng = np.random.default_rng(seed)
    prob, plant = random_static_instance(rng)
    sig = make_sinusoid_bank(prob.n, assign_frequencies(prob.n, "integer-cycles", period=20.0))
    sizes = StepSizes(alpha=0.5, alpha_dual=0.5, epsilon=0.05)
    state = PrimalDualState(rng.uniform(-5, 5, prob.n), np.zeros(prob.n_constraints))
    noise = NoiseModel(sigma, seed)
    caps = prob.dual_set(0)
    for _ in range(60):
        state = model_free_step(state, prob, plant, sig, sizes, noise).state
        assert primal_violation(state.x, prob.blocks(0)) <= 1e-9
        assert caps.contains(state.lam)


def test_neighborhood_shrinks_with_epsilon():
    big = exp_benchmark_error(0.005, 0.2)
    small = exp_benchmark_error(0.005, 0.1)
    assert np.isfinite(big) and small < big


def test_model_based_contracts_on_random_instance():
    rng = np.random.default_rng(11)
    prob, plant = random_static_instance(rng)
    eta, lip = estimate_operator_constants(prob, 0, plant)
    alpha = eta / lip**2
    c = contraction_constant(alpha, TrackingAnalysis(eta, lip))
    x_star, lam_star = saddle_point_oracle(prob, 0, plant, tol=1e-13, alpha=alpha)
    state = PrimalDualState(rng.uniform(-2, 2, prob.n), rng.uniform(0, 5, prob.n_constraints))
    sizes = StepSizes(alpha=alpha)
    for _ in range(50):
        dist = math.hypot(np.linalg.norm(state.x - x_star), np.linalg.norm(state.lam - lam_star))
        state = model_based_step(state, prob, plant, sizes).state
        new = math.hypot(np.linalg.norm(state.x - x_star), np.linalg.norm(state.lam - lam_star))
        assert new <= c * dist + 1e-8
