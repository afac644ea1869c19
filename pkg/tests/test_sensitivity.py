from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
import scipy.sparse as sp

from gridplan.compile import (
    AffineMatrix,
    AffineVector,
    ParametricQP,
    VarIndex,
    compile_static,
    instantiate,
)
from gridplan.model import (
    GenOptions,
    InvestmentBounds,
    LineSpec,
    ParamSpace,
    gen_synthetic,
    investment_space,
    make_garver_case,
)
from gridplan.objectives import cost, emissions, profit, ratepayer, weighted
from gridplan.sensitivity import (
    BoundaryTooClose,
    SingularKKT,
    fd_check,
    grad_J,
    kkt_jacobians,
    kkt_operator,
    kkt_point,
    vjp,
)
from gridplan.solver import SolverSettings, solve_qp
from tests.test_compile import two_node_case


def scalar_pqp():
    """min x^2 subject to x <= -eta, as a hand-built parametric problem."""
    space = ParamSpace(
        eta_min=np.array([0.5]), eta_max=np.array([2.0]),
        gamma=np.array([0.0]), binary=np.array([False]),
        labels=(("line", 0),))
    idx = VarIndex(n_nodes=1, n_lines=0, n_batteries=0, horizon=1,
                   p=np.zeros((1, 1), dtype=int), g=np.zeros((1, 1), dtype=int),
                   theta=np.zeros((1, 1), dtype=int), f=np.zeros((1, 0), dtype=int),
                   v=np.zeros((1, 0), dtype=int), s=np.zeros((1, 0), dtype=int))
    return ParametricQP(
        n=1, m=1, n_eq=0,
        q=np.array([0.0]), Qdiag=np.array([1.0]),
        A=AffineMatrix(shape=(1, 1), const=sp.csr_matrix(np.array([[1.0]])),
                       rows=np.zeros(0, dtype=int), cols=np.zeros(0, dtype=int),
                       params=np.zeros(0, dtype=int), vals=np.zeros(0)),
        b=AffineVector(const=np.array([0.0]), rows=np.array([0]),
                       params=np.array([0]), vals=np.array([-1.0])),
        G=AffineMatrix(shape=(0, 1), const=sp.csr_matrix((0, 1)),
                       rows=np.zeros(0, dtype=int), cols=np.zeros(0, dtype=int),
                       params=np.zeros(0, dtype=int), vals=np.zeros(0)),
        h=np.zeros(0),
        param_space=space, var_index=idx,
        ineq_labels=("cap",), eq_labels=(),
        offset=0.0, scenario=0,
        balance_rows=np.zeros((1, 1), dtype=int))


def test_kkt_zero_at_scalar_optimum():
    pqp = scalar_pqp()
    eta = np.array([1.0])
    residual = kkt_operator(pqp, (np.array([-1.0]), np.array([2.0]), np.zeros(0)), eta)
    np.testing.assert_allclose(residual, 0.0, atol=1e-15)


def test_kkt_zero_alone_does_not_certify_optimality():
    """(x, lam) = (0, 0) also zeroes the operator for min x^2, x <= -1: the
    sign conditions lam >= 0 and A x <= b are side information the residual
    cannot carry."""
    pqp = scalar_pqp()
    residual = kkt_operator(pqp, (np.zeros(1), np.zeros(1), np.zeros(0)), np.array([1.0]))
    np.testing.assert_allclose(residual, 0.0)
    # yet x = 0 violates x <= -1, so this point is not even feasible


def test_kkt_residual_small_at_solver_output():
    case = make_garver_case()
    pqp = compile_static(case)
    space = pqp.param_space
    eta = np.where(space.eta_min == space.eta_max, space.eta_min,
                   0.4 * space.eta_max)
    sol = solve_qp(instantiate(pqp, eta), SolverSettings(tol=1e-11))
    residual = kkt_operator(pqp, kkt_point(pqp, eta, sol), eta)
    n, m = pqp.n, pqp.m
    assert np.max(np.abs(residual[:n])) <= 1e-8
    assert np.max(np.abs(residual[n + m:])) <= 1e-8
    # the lam_i w_i products converge to the barrier parameter, not to zero,
    # so the complementarity block is judged against mu
    assert np.max(np.abs(residual[n:n + m])) <= 100 * sol.mu


def test_hand_jacobians_scalar():
    """At eta = 1 the optimum is (x, lam) = (-1, 2); the partial Jacobians
    are [[2, 1], [2, 0]] and [[0], [2]]."""
    pqp = scalar_pqp()
    eta = np.array([1.0])
    point = (np.array([-1.0]), np.array([2.0]), np.zeros(0))
    jac = kkt_jacobians(pqp, point, eta)
    np.testing.assert_allclose(jac.d1.toarray(), [[2.0, 1.0], [2.0, 0.0]])
    np.testing.assert_allclose(jac.d2.toarray(), [[0.0], [2.0]])


def test_vjp_scalar_solution_map():
    """x*(eta) = -eta and lam*(eta) = 2 eta, so pulling back the unit vectors
    gives exactly -1 and 2."""
    pqp = scalar_pqp()
    eta = np.array([1.0])
    sol = solve_qp(instantiate(pqp, eta))
    point = kkt_point(pqp, eta, sol)
    jac = kkt_jacobians(pqp, point, eta)
    dx = vjp(pqp, point, jac, np.array([1.0, 0.0]))
    dlam = vjp(pqp, point, jac, np.array([0.0, 1.0]))
    assert dx[0] == pytest.approx(-1.0, abs=1e-7)
    assert dlam[0] == pytest.approx(2.0, abs=1e-7)


def test_d2_matches_exact_eta_differences():
    """kappa is affine in eta at fixed z, so d2 kappa reproduces finite eta
    moves exactly, not just to first order."""
    case = make_garver_case()
    pqp = compile_static(case)
    rng = np.random.default_rng(2)
    x = rng.normal(size=pqp.n)
    lam = rng.uniform(0.1, 2.0, size=pqp.m)
    nu = rng.normal(size=pqp.n_eq)
    space = pqp.param_space
    eta = np.where(space.eta_min == space.eta_max, space.eta_min, 1.0)
    d_eta = np.where(space.eta_min == space.eta_max, 0.0,
                     rng.normal(size=space.size))
    jac = kkt_jacobians(pqp, (x, lam, nu), eta)
    lhs = kkt_operator(pqp, (x, lam, nu), eta + d_eta) - kkt_operator(pqp, (x, lam, nu), eta)
    np.testing.assert_allclose(lhs, jac.d2 @ d_eta, atol=1e-9)


def test_vjp_equals_dense_jacobian_extraction():
    """On a problem small enough to invert densely, the VJP must agree with
    forming -(d1)^(-T) then projecting, coordinate for coordinate."""
    pqp = compile_static(two_node_case(lines=(
        LineSpec(0, 1, susceptance_per_unit=2.0, flow_limit_per_susceptance=25.0,
                 investment=InvestmentBounds(eta_min=0.2, eta_max=2.0,
                                             unit_cost=30.0)),)))
    eta = np.array([1.0, 1.0])
    sol = solve_qp(instantiate(pqp, eta))
    point = kkt_point(pqp, eta, sol)
    jac = kkt_jacobians(pqp, point, eta)
    rng = np.random.default_rng(8)
    dense = np.linalg.solve(jac.d1.toarray().T, np.eye(pqp.n + pqp.m + pqp.n_eq))
    full = -jac.d2.toarray().T @ dense  # K x (n+m+p) Jacobian transpose action
    for _ in range(5):
        g = rng.normal(size=pqp.n + pqp.m + pqp.n_eq)
        np.testing.assert_allclose(vjp(pqp, point, jac, g), full @ g, atol=1e-10)


def test_vjp_matches_fd_of_solution_functional():
    """Random linear functional of z*(eta), differenced at step 1e-5."""
    pqp = compile_static(two_node_case(lines=(
        LineSpec(0, 1, susceptance_per_unit=2.0, flow_limit_per_susceptance=25.0,
                 investment=InvestmentBounds(eta_min=0.2, eta_max=2.0,
                                             unit_cost=30.0)),)))
    eta = np.array([1.0, 1.0])
    settings = SolverSettings(tol=1e-12)
    sol = solve_qp(instantiate(pqp, eta), settings)
    point = kkt_point(pqp, eta, sol)
    jac = kkt_jacobians(pqp, point, eta)
    rng = np.random.default_rng(4)
    g = rng.normal(size=pqp.n + pqp.m + pqp.n_eq)
    grad = vjp(pqp, point, jac, g)

    def functional(e):
        s = solve_qp(instantiate(pqp, e), settings)
        return float(g @ np.concatenate([s.x, s.lam, s.nu]))

    step = 1e-5
    up, down = eta.copy(), eta.copy()
    up[0] += step
    down[0] -= step
    fd = (functional(up) - functional(down)) / (2 * step)
    assert abs(grad[0] - fd) / max(1.0, abs(fd)) <= 1e-4


def test_grad_of_pure_investment_is_gamma():
    case = make_garver_case()
    space = investment_space(case)
    eta = np.where(space.eta_min == space.eta_max, space.eta_min, 0.5)
    null_objective = weighted([])  # h == 0
    grad = grad_J(case, null_objective, eta)
    np.testing.assert_array_equal(grad, space.gamma)


def test_grad_J_matches_manual_single_scenario():
    case = make_garver_case()
    pqp = compile_static(case)
    space = pqp.param_space
    eta = np.where(space.eta_min == space.eta_max, space.eta_min, 0.6)
    sol = solve_qp(instantiate(pqp, eta))
    from gridplan.objectives import grad_objective

    point = kkt_point(pqp, eta, sol)
    jac = kkt_jacobians(pqp, point, eta)
    gx, glam, gnu = grad_objective(cost(), case, pqp, sol)
    manual = space.gamma + vjp(pqp, point, jac, np.concatenate([gx, glam, gnu]))
    auto = grad_J(case, cost(), eta, solutions=[sol], pqps=[pqp])
    np.testing.assert_allclose(auto, manual, rtol=0, atol=0)


def test_fd_check_garver_cost_interior():
    case = make_garver_case()
    pqp = compile_static(case)
    space = pqp.param_space
    rng = np.random.default_rng(12)
    eta = np.where(space.eta_min == space.eta_max, space.eta_min,
                   rng.uniform(0.35, 0.8, size=space.size))
    report = fd_check(case, cost(), eta, step=1e-3, pqps=[pqp])
    assert report.max_rel_error <= 1e-4, report.rel_error


def test_fd_check_multiple_objectives():
    case = make_garver_case()
    pqp = compile_static(case)
    space = pqp.param_space
    eta = np.where(space.eta_min == space.eta_max, space.eta_min, 0.55)
    for obj in (emissions(20.0), profit([2]), ratepayer(case=case)):
        report = fd_check(case, obj, eta, step=1e-3, pqps=[pqp],
                          indices=[6, 10, 14])
        assert report.max_rel_error <= 1e-4, (obj.kind, report.rel_error)


def test_fd_check_boundary_guard():
    case = make_garver_case()
    pqp = compile_static(case)
    space = pqp.param_space
    eta = space.eta_min.copy()  # candidates at the lower edge
    with pytest.raises(BoundaryTooClose):
        fd_check(case, cost(), eta, step=1e-3, pqps=[pqp])
    interior = np.where(space.eta_min == space.eta_max, space.eta_min, 0.5)
    with pytest.raises(BoundaryTooClose):
        fd_check(case, cost(), interior, pqps=[pqp], indices=[0])  # fixed slot


def test_singular_kkt_on_duplicated_active_rows():
    """Two identical active inequalities make the complementarity rows of d1
    linearly dependent; the factorization must refuse rather than silently
    return a garbage gradient."""
    pqp = scalar_pqp()
    dup = ParametricQP(
        n=1, m=2, n_eq=0,
        q=pqp.q, Qdiag=pqp.Qdiag,
        A=AffineMatrix(shape=(2, 1), const=sp.csr_matrix(np.array([[1.0], [1.0]])),
                       rows=np.zeros(0, dtype=int), cols=np.zeros(0, dtype=int),
                       params=np.zeros(0, dtype=int), vals=np.zeros(0)),
        b=AffineVector(const=np.zeros(2), rows=np.array([0, 1]),
                       params=np.array([0, 0]), vals=np.array([-1.0, -1.0])),
        G=pqp.G, h=pqp.h, param_space=pqp.param_space, var_index=pqp.var_index,
        ineq_labels=("cap", "cap2"), eq_labels=(),
        offset=0.0, scenario=0, balance_rows=pqp.balance_rows)
    eta = np.array([1.0])
    point = (np.array([-1.0]), np.array([1.0, 1.0]), np.zeros(0))
    jac = kkt_jacobians(dup, point, eta)
    with pytest.raises(SingularKKT):
        vjp(dup, point, jac, np.array([1.0, 0.0, 0.0]))


def test_grad_J_threaded_is_bitwise_deterministic():
    case = gen_synthetic(10, seed=6, opts=GenOptions(scenario_count=3))
    space = investment_space(case)
    eta = np.where(space.eta_min == space.eta_max, space.eta_min,
                   0.5 * (space.eta_min + space.eta_max))
    serial = grad_J(case, cost(), eta)
    with ThreadPoolExecutor(max_workers=3) as pool:
        threaded = grad_J(case, cost(), eta, executor=pool)
    assert np.array_equal(serial, threaded)
    repeat = grad_J(case, cost(), eta)
    assert np.array_equal(serial, repeat)
