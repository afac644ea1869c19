"""Differentiation of dispatch outcomes with respect to investment decisions.

At a regular optimum the KKT operator

    kappa(z, eta) = [ 2 Q x + q + A(eta)' lam + G(eta)' nu ;
                      diag(lam) (A(eta) x - b(eta)) ;
                      G(eta) x - h ]

vanishes, and the implicit function theorem turns its two partial Jacobians
into derivatives of the solution map: d z*/d eta = -(d1 kappa)^{-1} d2 kappa.
Planner gradients only ever need vector-Jacobian products, so the package
factors d1 kappa once per (scenario, eta) and back-substitutes per objective
gradient; the parameter Jacobian d2 kappa comes straight from the affine
constraint increments and is exact, not differenced.
"""

from __future__ import annotations

from concurrent.futures import Executor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from gridplan.compile import ParametricQP, compile_dynamic, instantiate
from gridplan.model import NetworkCase, investment_space
from gridplan.objectives import Objective, eval_objective, grad_objective
from gridplan.solver import DimensionMismatch, DispatchSolution, SolverSettings, solve_qp

__all__ = [
    "SingularKKT",
    "BoundaryTooClose",
    "KKTPoint",
    "KKTJacobians",
    "kkt_point",
    "kkt_operator",
    "kkt_jacobians",
    "vjp",
    "grad_J",
    "fd_check",
    "FDReport",
]


class SingularKKT(RuntimeError):
    """The KKT Jacobian cannot be inverted; regularity fails at this eta."""


class BoundaryTooClose(ValueError):
    """A finite-difference probe would step outside the investment box."""


@dataclass(frozen=True)
class KKTPoint:
    """Primal-dual point (x, lam, nu) together with the eta it was solved at."""

    x: np.ndarray
    lam: np.ndarray
    nu: np.ndarray
    eta: np.ndarray
    active: np.ndarray

    @property
    def z(self) -> np.ndarray:
        return np.concatenate([self.x, self.lam, self.nu])


def kkt_point(pqp: ParametricQP, eta: np.ndarray, sol: DispatchSolution) -> KKTPoint:
    return KKTPoint(x=sol.x, lam=sol.lam, nu=sol.nu,
                    eta=np.asarray(eta, dtype=float), active=sol.active)


def _point_arrays(pqp: ParametricQP, z) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if isinstance(z, KKTPoint):
        return z.x, z.lam, z.nu
    x, lam, nu = z
    x, lam, nu = (np.asarray(v, dtype=float) for v in (x, lam, nu))
    if x.shape != (pqp.n,) or lam.shape != (pqp.m,) or nu.shape != (pqp.n_eq,):
        raise DimensionMismatch(
            f"point shapes {(x.shape, lam.shape, nu.shape)} do not match "
            f"problem sizes {(pqp.n, pqp.m, pqp.n_eq)}")
    return x, lam, nu


def kkt_operator(pqp: ParametricQP, z, eta: np.ndarray) -> np.ndarray:
    """Stacked KKT residual at (z, eta).

    A zero residual alone does not certify optimality: the sign conditions
    lam >= 0 and A x <= b are side constraints the operator cannot see.
    """
    x, lam, nu = _point_arrays(pqp, z)
    eta = np.asarray(eta, dtype=float)
    A = pqp.A.value(eta)
    G = pqp.G.value(eta)
    b = pqp.b.value(eta)
    stationarity = 2.0 * pqp.Qdiag * x + pqp.q + A.T @ lam + G.T @ nu
    comp = lam * (A @ x - b)
    primal_eq = G @ x - pqp.h
    return np.concatenate([stationarity, comp, primal_eq])


@dataclass
class KKTJacobians:
    """Partial Jacobians of kappa, with a lazily cached factorization of d1.

    ``d1`` is square over (x, lam, nu); ``d2`` has one column per investment
    coordinate.  ``solve_transpose`` backsolves d1' y = g, reusing one LU
    factorization across every objective gradient at this (scenario, eta).
    """

    d1: sp.csc_matrix
    d2: sp.csr_matrix
    _lu: object = None

    def solve_transpose(self, g: np.ndarray) -> np.ndarray:
        if self._lu is None:
            try:
                self._lu = splu(self.d1)
            except RuntimeError as exc:
                raise SingularKKT(
                    f"KKT Jacobian factorization failed ({exc}); the active "
                    "set is degenerate at this eta") from None
        y = self._lu.solve(g, trans="T")
        if not np.all(np.isfinite(y)):
            raise SingularKKT("KKT transpose solve produced non-finite values")
        return y


def kkt_jacobians(pqp: ParametricQP, z, eta: np.ndarray) -> KKTJacobians:
    """Assemble d1 kappa and d2 kappa at (z, eta) from the affine structure."""
    x, lam, nu = _point_arrays(pqp, z)
    eta = np.asarray(eta, dtype=float)
    n, m, p = pqp.n, pqp.m, pqp.n_eq
    A = pqp.A.value(eta)
    G = pqp.G.value(eta)
    b = pqp.b.value(eta)

    top = [sp.diags(2.0 * pqp.Qdiag)]
    if m:
        top.append(A.T)
    if p:
        top.append(G.T)
    rows = [top]
    if m:
        rows.append([sp.diags(lam) @ A, sp.diags(A @ x - b)] + ([None] if p else []))
    if p:
        rows.append([G] + ([None] if m else []) + [None])
    d1 = sp.bmat(rows, format="csc")

    K = pqp.param_space.size
    ent_r: list[np.ndarray] = []
    ent_c: list[np.ndarray] = []
    ent_v: list[np.ndarray] = []

    ar, ac, ak, av = pqp.A.rows, pqp.A.cols, pqp.A.params, pqp.A.vals
    if av.size:
        # dA' lam lands in the stationarity block, lam o (dA x) in complementarity
        ent_r.append(ac)
        ent_c.append(ak)
        ent_v.append(av * lam[ar])
        ent_r.append(n + ar)
        ent_c.append(ak)
        ent_v.append(lam[ar] * av * x[ac])
    br, bk, bv = pqp.b.rows, pqp.b.params, pqp.b.vals
    if bv.size:
        ent_r.append(n + br)
        ent_c.append(bk)
        ent_v.append(-lam[br] * bv)
    gr, gc, gk, gv = pqp.G.rows, pqp.G.cols, pqp.G.params, pqp.G.vals
    if gv.size:
        ent_r.append(gc)
        ent_c.append(gk)
        ent_v.append(gv * nu[gr])
        ent_r.append(n + m + gr)
        ent_c.append(gk)
        ent_v.append(gv * x[gc])

    if ent_r:
        d2 = sp.coo_matrix(
            (np.concatenate(ent_v),
             (np.concatenate(ent_r), np.concatenate(ent_c))),
            shape=(n + m + p, K)).tocsr()
    else:
        d2 = sp.csr_matrix((n + m + p, K))
    return KKTJacobians(d1=d1, d2=d2)


def vjp(pqp: ParametricQP, point: KKTPoint, jac: KKTJacobians,
        g: np.ndarray) -> np.ndarray:
    """Pull an outcome gradient g back through the solution map.

    Returns -d2' y where d1' y = g, which by the implicit function theorem
    is the gradient of g' z*(eta).
    """
    g = np.asarray(g, dtype=float)
    expect = pqp.n + pqp.m + pqp.n_eq
    if g.shape != (expect,):
        raise DimensionMismatch(f"g has shape {g.shape}, expected ({expect},)")
    y = jac.solve_transpose(g)
    return -(jac.d2.T @ y)


def _scenario_pqps(case: NetworkCase, pqps=None) -> list[ParametricQP]:
    if pqps is not None:
        return list(pqps)
    return [compile_dynamic(case, s) for s in range(case.scenario_count())]


def _solve_all(pqps: Sequence[ParametricQP], eta: np.ndarray,
               settings: SolverSettings | None,
               executor: Executor | None,
               scenarios: Sequence[int] | None = None) -> list[DispatchSolution]:
    chosen = range(len(pqps)) if scenarios is None else list(scenarios)

    def solve_one(s):
        return solve_qp(instantiate(pqps[s], eta), settings)

    if executor is None:
        solved = [solve_one(s) for s in chosen]
    else:
        solved = list(executor.map(solve_one, chosen))
    out: list[DispatchSolution] = [None] * len(pqps)
    for s, sol in zip(chosen, solved):
        out[s] = sol
    return out


def grad_J(case: NetworkCase, objective: Objective, eta: np.ndarray,
           solutions: Sequence[DispatchSolution] | None = None,
           pqps: Sequence[ParametricQP] | None = None,
           settings: SolverSettings | None = None,
           executor: Executor | None = None,
           scenarios: Sequence[int] | None = None,
           weight_scale: float = 1.0) -> np.ndarray:
    """Planner gradient: gamma plus the scenario-weighted chain rule.

    ``solutions`` can carry dispatches already solved at this eta; otherwise
    every needed scenario is solved here (concurrently when an executor is
    given).  ``scenarios`` restricts the sum to a subset and ``weight_scale``
    rescales its weights, which is how stochastic batches keep the estimator
    unbiased.  The reduction runs in ascending scenario order regardless of
    executor scheduling, so results are bitwise reproducible.
    """
    eta = np.asarray(eta, dtype=float)
    pqps = _scenario_pqps(case, pqps)
    weights = case.scenario_weights()
    chosen = (list(range(len(pqps))) if scenarios is None
              else sorted(int(s) for s in scenarios))
    if solutions is None:
        solutions = _solve_all(pqps, eta, settings, executor,
                               None if scenarios is None else chosen)

    def contribution(s: int) -> np.ndarray:
        pqp, sol = pqps[s], solutions[s]
        point = kkt_point(pqp, eta, sol)
        jac = kkt_jacobians(pqp, point, eta)
        gx, glam, gnu = grad_objective(objective, case, pqp, sol)
        g = np.concatenate([gx, glam, gnu])
        try:
            return vjp(pqp, point, jac, g)
        except SingularKKT as exc:
            raise SingularKKT(f"scenario {s}: {exc}") from None

    if executor is None:
        parts = [contribution(s) for s in chosen]
    else:
        parts = list(executor.map(contribution, chosen))

    grad = investment_space(case).gamma.astype(float).copy()
    for s, part in zip(chosen, parts):
        grad += (weight_scale * weights[s]) * part
    return grad


@dataclass(frozen=True)
class FDReport:
    """Comparison of the implicit gradient against central differences."""

    grad: np.ndarray
    fd: np.ndarray
    rel_error: np.ndarray
    indices: np.ndarray
    step: np.ndarray

    @property
    def max_rel_error(self) -> float:
        return float(np.max(self.rel_error)) if self.rel_error.size else 0.0


def fd_check(case: NetworkCase, objective: Objective, eta: np.ndarray,
             step: float = 1e-3,
             indices: Sequence[int] | None = None,
             pqps: Sequence[ParametricQP] | None = None,
             settings: SolverSettings | None = None) -> FDReport:
    """Central-difference probe of grad_J over the free coordinates.

    ``step`` is relative to max(1, |eta_k|).  Probes must stay strictly
    inside the box (BoundaryTooClose otherwise).  Large errors at a point
    usually mean the active set changes inside the probe interval; the
    solution map has a kink there and one-sided behavior is expected.
    """
    eta = np.asarray(eta, dtype=float)
    pqps = _scenario_pqps(case, pqps)
    space = pqps[0].param_space
    st = settings or SolverSettings(tol=1e-11)
    weights = case.scenario_weights()

    free = np.flatnonzero(space.eta_max > space.eta_min)
    if indices is None:
        probe = free
    else:
        probe = np.asarray(list(indices), dtype=int)
        fixed = set(probe) - set(free)
        if fixed:
            raise BoundaryTooClose(f"coordinates {sorted(fixed)} are fixed-width")

    steps = step * np.maximum(1.0, np.abs(eta))
    lo_gap = eta[probe] - steps[probe] - space.eta_min[probe]
    hi_gap = space.eta_max[probe] - (eta[probe] + steps[probe])
    if np.any(lo_gap < 0) or np.any(hi_gap < 0):
        bad = probe[(lo_gap < 0) | (hi_gap < 0)]
        raise BoundaryTooClose(
            f"eta coordinates {bad.tolist()} are within one step of the box edge")

    def J(at: np.ndarray) -> float:
        sols = _solve_all(pqps, at, st, None)
        total = float(space.gamma @ at)
        for s, (pqp, sol) in enumerate(zip(pqps, sols)):
            total += weights[s] * eval_objective(objective, case, pqp, sol)
        return total

    grad = grad_J(case, objective, eta, pqps=pqps, settings=st)
    fd = np.zeros(probe.size)
    for i, k in enumerate(probe):
        up = eta.copy()
        up[k] += steps[k]
        down = eta.copy()
        down[k] -= steps[k]
        fd[i] = (J(up) - J(down)) / (2.0 * steps[k])
    rel = np.abs(grad[probe] - fd) / np.maximum(1.0, np.abs(fd))
    return FDReport(grad=grad[probe], fd=fd, rel_error=rel,
                    indices=probe, step=steps[probe])
