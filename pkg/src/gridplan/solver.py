"""Interior-point solver for the dispatch QPs and its regularity checks.

A Mehrotra predictor-corrector method on the problem

    minimize    q'x + x' diag(Q) x
    subject to  A x <= b,   G x = h

with slacks w = b - A x and multipliers (lam >= 0, nu free).  Each iteration
factorizes one sparse augmented system and reuses the factors for the
predictor and corrector solves.  The method is deterministic: identical
inputs produce bit-identical iterates.

``check_regularity`` probes the assumptions the sensitivity machinery relies
on: strict feasibility (via an explicit phase-I problem), independence of the
active constraint gradients, and strict complementarity at the solution.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from gridplan.compile import ConjugateCost, ParametricQP, QPInstance, conjugate_cost, instantiate

__all__ = [
    "SolverError",
    "Infeasible",
    "MaxIterations",
    "NumericalFailure",
    "DimensionMismatch",
    "SolverSettings",
    "DispatchSolution",
    "RegularityReport",
    "solve_qp",
    "dual_objective",
    "check_regularity",
]


class SolverError(RuntimeError):
    pass


class Infeasible(SolverError):
    """The constraints admit no feasible point (dual iterates diverged)."""


class MaxIterations(SolverError):
    """Iteration limit hit before the residuals met tolerance."""


class NumericalFailure(SolverError):
    """A linear solve failed or produced non-finite values."""


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class SolverSettings:
    tol: float = 1e-9
    tol_active: float = 1e-6
    max_iters: int = 100
    step_fraction: float = 0.9995


@dataclass(frozen=True)
class DispatchSolution:
    """Primal-dual optimum of one instantiated dispatch problem.

    ``qp_value`` is the bare quadratic objective; ``value`` adds the
    instance's constant offset (the cost of shedding all demand), making it
    the dispatch cost of the market outcome.
    """

    x: np.ndarray
    lam: np.ndarray
    nu: np.ndarray
    w: np.ndarray
    qp_value: float
    value: float
    iterations: int
    mu: float
    residual_dual: float
    residual_primal: float
    residual_eq: float
    active: np.ndarray

    def active_rows(self, labels: tuple[str, ...] | None = None) -> list:
        rows = np.flatnonzero(self.active)
        if labels is None:
            return list(rows)
        return [labels[i] for i in rows]


def _check_dims(inst: QPInstance) -> tuple[int, int, int]:
    n = inst.q.shape[0]
    m, p = inst.A.shape[0], inst.G.shape[0]
    if inst.Qdiag.shape != (n,):
        raise DimensionMismatch(f"Qdiag has shape {inst.Qdiag.shape}, expected ({n},)")
    if inst.A.shape[1] != n or inst.G.shape[1] != n:
        raise DimensionMismatch("constraint matrices disagree with q on variable count")
    if inst.b.shape != (m,):
        raise DimensionMismatch(f"b has shape {inst.b.shape}, expected ({m},)")
    if inst.h.shape != (p,):
        raise DimensionMismatch(f"h has shape {inst.h.shape}, expected ({p},)")
    return n, m, p


def _factor(Qdiag, A, G, d) -> Callable[[np.ndarray, np.ndarray, np.ndarray], tuple]:
    """LU-factor the augmented KKT matrix for diagonal scaling d ~ w/lam.

    Returns a solver mapping residual blocks (r1, r2, r3) to (dx, dlam, dnu).
    """
    n, m, p = Qdiag.shape[0], A.shape[0], G.shape[0]
    H = sp.diags(2.0 * Qdiag)
    rows = [[H]]
    if m:
        rows[0].append(A.T)
    if p:
        rows[0].append(G.T)
    if m:
        rows.append([A, sp.diags(-d)] + ([None] if p else []))
    if p:
        rows.append([G] + ([None] if m else []) + [None])
    K = sp.bmat(rows, format="csc")
    try:
        lu = splu(K)
    except RuntimeError as exc:
        raise NumericalFailure(f"augmented system factorization failed: {exc}") from None

    def solve(r1, r2, r3):
        rhs = np.concatenate([r1, r2, r3])
        sol = lu.solve(rhs)
        if not np.all(np.isfinite(sol)):
            raise NumericalFailure("augmented solve produced non-finite values")
        return sol[:n], sol[n:n + m], sol[n + m:]

    return solve


def _max_step(z: np.ndarray, dz: np.ndarray) -> float:
    neg = dz < 0
    if not np.any(neg):
        return np.inf
    return float(np.min(-z[neg] / dz[neg]))


def solve_qp(inst: QPInstance, settings: SolverSettings | None = None) -> DispatchSolution:
    """Solve one instantiated dispatch QP to interior-point optimality.

    Raises MaxIterations, Infeasible, or NumericalFailure; a returned
    solution always satisfies the scaled KKT residual tolerances.
    """
    st = settings or SolverSettings()
    n, m, p = _check_dims(inst)
    q, Qdiag, b, h = inst.q, inst.Qdiag, inst.b, inst.h
    A = inst.A.tocsr()
    G = inst.G.tocsr()

    scale_q = 1.0 + float(np.max(np.abs(q))) if n else 1.0
    scale_b = 1.0 + (float(np.max(np.abs(b))) if m else 0.0)
    scale_h = 1.0 + (float(np.max(np.abs(h))) if p else 0.0)

    def residuals(x, lam, nu, w):
        r_dual = 2.0 * Qdiag * x + q
        if m:
            r_dual = r_dual + A.T @ lam
        if p:
            r_dual = r_dual + G.T @ nu
        r_pri = (A @ x + w - b) if m else np.zeros(0)
        r_eq = (G @ x - h) if p else np.zeros(0)
        return r_dual, r_pri, r_eq

    def finish(x, lam, nu, w, iters, mu):
        r_dual, r_pri, r_eq = residuals(x, lam, nu, w)
        qp_value = float(q @ x + x @ (Qdiag * x))
        slack = b - A @ x if m else np.zeros(0)
        active = slack <= st.tol_active * (1.0 + np.abs(b)) if m else np.zeros(0, dtype=bool)
        return DispatchSolution(
            x=x, lam=lam, nu=nu, w=w,
            qp_value=qp_value,
            value=qp_value + inst.offset,
            iterations=iters,
            mu=mu,
            residual_dual=float(np.max(np.abs(r_dual)) / scale_q) if n else 0.0,
            residual_primal=float(np.max(np.abs(r_pri)) / scale_b) if m else 0.0,
            residual_eq=float(np.max(np.abs(r_eq)) / scale_h) if p else 0.0,
            active=active,
        )

    if m == 0:
        # pure equality-constrained QP: one saddle-point solve
        solve = _factor(Qdiag, sp.csr_matrix((0, n)), G, np.zeros(0))
        x, _, nu = solve(-q, np.zeros(0), h.copy())
        sol = finish(x, np.zeros(0), nu, np.zeros(0), 1, 0.0)
        if max(sol.residual_dual, sol.residual_eq) > st.tol * 10:
            raise NumericalFailure("equality-constrained solve left large residuals")
        return sol

    # starting point: one least-squares-flavored solve with unit scaling,
    # then shift slacks and multipliers safely positive
    solve = _factor(Qdiag, A, G, np.ones(m))
    x, y, nu = solve(-q, b.copy(), h.copy())
    w_raw = b - A @ x
    lam_raw = -y
    shift_w = max(0.0, -1.5 * float(np.min(w_raw)))
    shift_l = max(0.0, -1.5 * float(np.min(lam_raw)))
    w = w_raw + shift_w
    lam = lam_raw + shift_l
    cross = float(w @ lam)
    sum_l = float(np.sum(lam))
    sum_w = float(np.sum(w))
    w = w + (0.5 * cross / sum_l if sum_l > 0 else 1.0)
    lam = lam + (0.5 * cross / sum_w if sum_w > 0 else 1.0)
    w = np.maximum(w, 1e-8 * scale_b)
    lam = np.maximum(lam, 1e-8)

    for it in range(1, st.max_iters + 1):
        r_dual, r_pri, r_eq = residuals(x, lam, nu, w)
        mu = float(w @ lam) / m
        rel_dual = np.max(np.abs(r_dual)) / scale_q
        rel_pri = np.max(np.abs(r_pri)) / scale_b if m else 0.0
        rel_eq = np.max(np.abs(r_eq)) / scale_h if p else 0.0
        qp_value = float(q @ x + x @ (Qdiag * x))
        rel_gap = mu / (1.0 + abs(qp_value))

        if max(rel_dual, rel_pri, rel_eq, rel_gap) <= st.tol:
            return finish(x, lam, nu, w, it - 1, mu)
        if np.max(lam) > 1e10 * (1.0 + scale_q) and rel_pri > 1e-6:
            raise Infeasible(
                "dual iterates diverged with a persistent primal residual; "
                "the constraints appear to have no feasible point")

        d = np.clip(w / lam, 1e-16, 1e16)
        solve = _factor(Qdiag, A, G, d)

        # predictor: pure Newton step on the complementarity target 0
        r_comp = lam * w
        dx_a, dlam_a, dnu_a = solve(-r_dual, -r_pri + r_comp / lam, -r_eq)
        dw_a = -r_pri - A @ dx_a

        alpha_w = min(1.0, _max_step(w, dw_a))
        alpha_l = min(1.0, _max_step(lam, dlam_a))
        mu_aff = float((w + alpha_w * dw_a) @ (lam + alpha_l * dlam_a)) / m
        sigma = (max(mu_aff, 0.0) / mu) ** 3 if mu > 0 else 0.0

        # corrector recenters and compensates the predictor's curvature
        r_comp = lam * w + dlam_a * dw_a - sigma * mu
        dx, dlam, dnu = solve(-r_dual, -r_pri + r_comp / lam, -r_eq)
        dw = -r_pri - A @ dx

        alpha_p = min(1.0, st.step_fraction * _max_step(w, dw))
        alpha_d = min(1.0, st.step_fraction * _max_step(lam, dlam))
        x = x + alpha_p * dx
        w = w + alpha_p * dw
        lam = lam + alpha_d * dlam
        nu = nu + alpha_d * dnu
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(lam))):
            raise NumericalFailure("iterates became non-finite")

    raise MaxIterations(
        f"no convergence in {st.max_iters} iterations "
        f"(dual {rel_dual:.2e}, primal {rel_pri:.2e}, eq {rel_eq:.2e}, gap {rel_gap:.2e})")


def dual_objective(inst: QPInstance, lam: np.ndarray,
                   conj: ConjugateCost, nu: np.ndarray | None = None) -> float:
    """Lagrangian dual value u(lam, nu) of the bare QP (offset excluded).

    Any lam >= 0 gives a lower bound on the optimal qp_value; nu is free and
    defaults to zero, which keeps the bound valid (just looser when the
    equality multipliers matter).
    """
    lam = np.asarray(lam, dtype=float)
    m, p = inst.A.shape[0], inst.G.shape[0]
    if lam.shape != (m,):
        raise DimensionMismatch(f"lam has shape {lam.shape}, expected ({m},)")
    if np.any(lam < 0):
        raise ValueError("dual_objective needs lam >= 0")
    if nu is None:
        nu = np.zeros(p)
    nu = np.asarray(nu, dtype=float)
    if nu.shape != (p,):
        raise DimensionMismatch(f"nu has shape {nu.shape}, expected ({p},)")
    y = -(inst.A.T @ lam) - (inst.G.T @ nu)
    return float(-(lam @ inst.b) - (nu @ inst.h) - conj.value(y))


@dataclass(frozen=True)
class RegularityReport:
    """Solution-quality diagnostics for one instantiated problem."""

    slater_margin: float
    licq_sigma_min: float
    min_active_multiplier: float
    weakly_active: tuple[str, ...]
    duality_gap: float
    strongly_convex: bool
    ok: bool
    notes: tuple[str, ...]

    def __str__(self) -> str:
        lines = [
            f"slater margin          {self.slater_margin:.3e}",
            f"active-set sigma_min   {self.licq_sigma_min:.3e}",
            f"min active multiplier  {self.min_active_multiplier:.3e}",
            f"duality gap            {self.duality_gap:.3e}",
            f"strongly convex        {self.strongly_convex}",
            f"ok                     {self.ok}",
        ]
        for note in self.notes:
            lines.append(f"  - {note}")
        return "\n".join(lines)


def _slater_margin(inst: QPInstance, settings: SolverSettings) -> float:
    """Minimize the worst inequality violation tau subject to the equalities.

    A positive return means a strictly feasible point exists with that much
    room; a negative one certifies the inequalities cannot all be met.
    """
    n = inst.q.shape[0]
    m, p = inst.A.shape[0], inst.G.shape[0]
    if m == 0:
        return np.inf
    reg = 1e-8
    q_aux = np.zeros(n + 1)
    q_aux[-1] = 1.0
    aux = QPInstance(
        eta=inst.eta,
        q=q_aux,
        Qdiag=np.full(n + 1, reg),
        A=sp.hstack([inst.A, sp.csr_matrix(-np.ones((m, 1)))], format="csr"),
        b=inst.b.copy(),
        G=sp.hstack([inst.G, sp.csr_matrix((p, 1))], format="csr") if p else sp.csr_matrix((0, n + 1)),
        h=inst.h.copy(),
        offset=0.0,
    )
    relaxed = replace(settings, tol=max(settings.tol, 1e-9))
    sol = solve_qp(aux, relaxed)
    return float(-sol.x[-1])


def check_regularity(pqp: ParametricQP, eta: np.ndarray,
                     sol: DispatchSolution | None = None,
                     settings: SolverSettings | None = None,
                     licq_size_limit: int = 4000) -> RegularityReport:
    """Verify the assumptions differentiation relies on at one eta.

    Checks strict feasibility, linear independence of active constraint
    gradients (smallest singular value of the row-normalized active stack),
    strict complementarity, strong convexity, and the realized duality gap.
    """
    st = settings or SolverSettings()
    inst = instantiate(pqp, eta)
    notes: list[str] = []
    if sol is None:
        sol = solve_qp(inst, st)

    margin = _slater_margin(inst, st)
    scale_b = 1.0 + (float(np.max(np.abs(inst.b))) if inst.b.size else 0.0)
    if margin <= st.tol_active * scale_b:
        notes.append(f"slater margin {margin:.3e} is not clearly positive")

    active_idx = np.flatnonzero(sol.active)
    stack_rows = len(active_idx) + inst.G.shape[0]
    sigma_min = np.nan
    if stack_rows == 0:
        sigma_min = np.inf
    elif stack_rows <= licq_size_limit and inst.q.shape[0] <= licq_size_limit:
        stack = sp.vstack([inst.A[active_idx], inst.G]) if active_idx.size else inst.G
        dense = stack.toarray()
        norms = np.linalg.norm(dense, axis=1)
        norms[norms == 0] = 1.0
        dense = dense / norms[:, None]
        sigma_min = float(np.linalg.svd(dense, compute_uv=False)[-1])
        if stack_rows > inst.q.shape[0]:
            notes.append(
                f"{stack_rows} active gradients exceed {inst.q.shape[0]} variables")
        if sigma_min < 1e-8:
            notes.append(f"active gradients nearly dependent (sigma_min {sigma_min:.3e})")
    else:
        notes.append(f"active stack {stack_rows} rows; independence check skipped")

    if active_idx.size:
        min_mult = float(np.min(sol.lam[active_idx]))
        weak_mask = sol.lam[active_idx] < np.sqrt(st.tol) * (1.0 + np.abs(inst.b[active_idx]))
        weak = tuple(pqp.ineq_labels[i] for i in active_idx[weak_mask])
        if weak:
            notes.append(f"{len(weak)} active rows have near-zero multipliers")
    else:
        min_mult = np.inf
        weak = ()

    conj = conjugate_cost(pqp)
    gap = sol.qp_value - dual_objective(inst, sol.lam, conj, sol.nu)
    if abs(gap) > 1e-6 * (1.0 + abs(sol.qp_value)):
        notes.append(f"duality gap {gap:.3e} larger than expected")

    convex = bool(np.all(pqp.Qdiag > 0))
    if not convex:
        notes.append("cost is not strongly convex")

    ok = (
        margin > st.tol_active * scale_b
        and (np.isinf(sigma_min) or sigma_min >= 1e-8)
        and not weak
        and convex
        and abs(gap) <= 1e-6 * (1.0 + abs(sol.qp_value))
        and not np.isnan(sigma_min)
    )
    # a skipped independence check still counts against full confidence
    if np.isnan(sigma_min):
        ok = False
    return RegularityReport(
        slater_margin=margin,
        licq_sigma_min=sigma_min,
        min_active_multiplier=min_mult,
        weakly_active=weak,
        duality_gap=float(gap),
        strongly_convex=convex,
        ok=bool(ok),
        notes=tuple(notes),
    )
