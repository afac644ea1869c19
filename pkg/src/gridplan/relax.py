"""Convex lower bounds on the planning problem.

The bilevel problem is first written as a single nonconvex program by
replacing "x solves the dispatch" with primal feasibility plus a
delta-slackened strong-duality row.  Every product of an investment
parameter with a primal or dual variable is then replaced by an auxiliary
variable constrained to the McCormick envelope of the product, which yields
a convex program whose optimum certifies a lower bound over every feasible
plan.

The compiled dispatch structure keeps the inequality matrix constant and
the equality right side at zero, so the primal block A x <= b(eta) is
exactly linear in (x, eta) and needs no auxiliaries at all.  Lifts appear
in three places only: eta times x in the parameter-scaled equality rows,
eta times lambda in the lambda' b pairing, and eta times nu in the
conjugate argument.  Bilinear planner objectives add nu-times-x products
of their own.

The strong-duality row is convex quadratic, which the dispatch solver does
not take natively; it is enforced by cutting planes around the QP solve.
"""

from __future__ import annotations

import itertools
import math
from collections.abc import Sequence
from concurrent.futures import Executor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .compile import (
    ConjugateCost,
    ParametricQP,
    QPInstance,
    compile_dynamic,
    conjugate_cost,
    instantiate,
)
from .model import InvalidOptions, NetworkCase
from .objectives import Objective, cost, eval_objective
from .solver import (
    DispatchSolution,
    Infeasible,
    MaxIterations,
    SolverError,
    SolverSettings,
    solve_qp,
)


class UnsupportedObjective(ValueError):
    """The objective cannot be expressed in the single-level program."""


class MissingBounds(ValueError):
    """A variable that enters a bilinear product has no finite box."""


class RelaxationInfeasible(RuntimeError):
    """The relaxation has no feasible point; delta or the caps are too tight."""


class NonpositiveBound(ValueError):
    """The relative gap J/J_lower - 1 needs a positive lower bound."""


class TooManyBinaries(ValueError):
    """Exhaustive enumeration refused; the pattern count is 2^k."""


def subopt_gap(value: float, bound: float) -> float:
    """Relative suboptimality J/J_lower - 1 against a positive lower bound."""
    if not bound > 0:
        raise NonpositiveBound(
            f"lower bound {bound} is not positive; report the absolute "
            f"difference {value - bound} instead")
    return float(value) / float(bound) - 1.0


@dataclass(frozen=True)
class EnvelopeBox:
    """Factor ranges for one bilinear product alpha * beta."""

    a_lo: float
    a_hi: float
    b_lo: float
    b_hi: float

    def __post_init__(self) -> None:
        if self.a_lo > self.a_hi or self.b_lo > self.b_hi:
            raise InvalidOptions(f"envelope box is empty: {self}")

    def corners(self) -> tuple[float, float, float, float]:
        return (self.a_lo * self.b_lo, self.a_lo * self.b_hi,
                self.a_hi * self.b_lo, self.a_hi * self.b_hi)


def mccormick_env(box: EnvelopeBox) -> tuple[tuple[float, float, float, float], ...]:
    """Four inequalities ca*alpha + cb*beta + cy*y <= rhs valid for y = alpha*beta.

    The first two rows are the under-estimator planes, the last two the
    over-estimators.  A factor pinned at an endpoint collapses the planes
    and forces y to the exact product.
    """
    al, ah, bl, bh = box.a_lo, box.a_hi, box.b_lo, box.b_hi
    return (
        (bl, al, -1.0, al * bl),
        (bh, ah, -1.0, ah * bh),
        (-bl, -ah, 1.0, -ah * bl),
        (-bh, -al, 1.0, -al * bh),
    )


@dataclass
class RelaxBounds:
    """Boxes for the dispatch variables inside the relaxation.

    ``x_lo``/``x_hi`` are per coordinate; the dual caps are single scalars
    (lambda in [0, lam_max], nu in [-nu_abs, nu_abs]).  The caps must
    contain the true optimizers for the bound to be sound, so derived caps
    are widened by a generous margin.
    """

    x_lo: np.ndarray
    x_hi: np.ndarray
    lam_max: float
    nu_abs: float

    def validate(self, n: int) -> None:
        if self.x_lo.shape != (n,) or self.x_hi.shape != (n,):
            raise MissingBounds(
                f"x bounds have shapes {self.x_lo.shape}/{self.x_hi.shape}, "
                f"expected ({n},)")
        if not (np.all(np.isfinite(self.x_lo)) and np.all(np.isfinite(self.x_hi))
                and math.isfinite(self.lam_max) and math.isfinite(self.nu_abs)):
            raise MissingBounds("bounds must be finite")
        if np.any(self.x_lo > self.x_hi) or self.lam_max < 0 or self.nu_abs < 0:
            raise MissingBounds("bounds describe an empty box")


def _as_pqps(case: NetworkCase, pqps) -> list[ParametricQP]:
    if pqps is None:
        return [compile_dynamic(case, s) for s in range(case.scenario_count())]
    if isinstance(pqps, ParametricQP):
        return [pqps]
    return list(pqps)


def corner_bounds(case: NetworkCase,
                  pqps: Sequence[ParametricQP] | None = None,
                  settings: SolverSettings | None = None,
                  executor: Executor | None = None,
                  margin: float = 10.0) -> RelaxBounds:
    """Derive variable boxes from dispatches at the box corners and center.

    Observed ranges are widened about their midpoint by ``margin`` plus an
    absolute pad, since variables can move beyond their corner values at
    intermediate investment levels.
    """
    pqps = _as_pqps(case, pqps)
    space = pqps[0].param_space
    probes = [space.eta_min, space.eta_max,
              0.5 * (space.eta_min + space.eta_max)]

    def solve_at(job):
        pqp, eta = job
        return solve_qp(instantiate(pqp, eta), settings)

    jobs = [(pqp, eta) for pqp in pqps for eta in probes]
    if executor is None:
        sols = [solve_at(job) for job in jobs]
    else:
        sols = list(executor.map(solve_at, jobs))

    xs = np.stack([sol.x for sol in sols])
    lo, hi = xs.min(axis=0), xs.max(axis=0)
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    pad = 1e-2 * (1.0 + np.maximum(np.abs(lo), np.abs(hi)))
    lam_max = margin * max(float(sol.lam.max(initial=0.0)) for sol in sols) + 1.0
    nu_abs = margin * max(float(np.max(np.abs(sol.nu), initial=0.0))
                          for sol in sols) + 1.0
    return RelaxBounds(x_lo=mid - margin * half - pad,
                       x_hi=mid + margin * half + pad,
                       lam_max=lam_max, nu_abs=nu_abs)


# objective decomposition: linear plus diagonal quadratic on x, and nu*x
# products for the bilinear planner objectives

@dataclass
class _ObjectiveTerms:
    linear: np.ndarray
    quad: np.ndarray
    products: list[tuple[int, int, float]]  # (eq row, x col, coefficient)


def _objective_terms(objective: Objective, case: NetworkCase | None,
                     pqp: ParametricQP, mult: float,
                     sink: _ObjectiveTerms) -> None:
    kind = objective.kind
    if kind == "cost":
        sink.linear += mult * pqp.q
        sink.quad += mult * pqp.Qdiag
        return
    if case is None:
        raise UnsupportedObjective(
            f"objective kind {kind!r} needs the network case for row lookup")
    if kind == "emissions":
        sink.linear += mult * pqp.q
        sink.quad += mult * pqp.Qdiag
        for gen in case.generators:
            cols = pqp.var_index.g[:, gen.node]
            sink.linear[cols] += mult * objective.w * gen.emissions_rate
    elif kind == "profit":
        for j in objective.gens:
            gen = case.generators[j]
            for t in range(case.horizon):
                row = int(pqp.balance_rows[t, gen.node])
                col = int(pqp.var_index.g[t, gen.node])
                sink.products.append((row, col, mult))
                sink.linear[col] += mult * gen.marginal_cost
    elif kind == "ratepayer":
        nodes = sorted({case.loads[j].node for j in objective.loads})
        for node in nodes:
            for t in range(case.horizon):
                row = int(pqp.balance_rows[t, node])
                col = int(pqp.var_index.p[t, node])
                sink.products.append((row, col, -mult))
    elif kind == "weighted":
        for part, wt in objective.parts:
            _objective_terms(part, case, pqp, mult * wt, sink)
    else:
        raise UnsupportedObjective(f"objective kind {kind!r}")


def _has_products(objective: Objective) -> bool:
    if objective.kind in ("profit", "ratepayer"):
        return True
    if objective.kind == "weighted":
        return any(_has_products(part) for part, _ in objective.parts)
    return False


# delta-strong-duality single-level program

@dataclass(frozen=True)
class SDReport:
    ok: bool
    violations: dict[str, float]

    def __str__(self) -> str:
        worst = max(self.violations.values(), default=0.0)
        return f"SDReport(ok={self.ok}, worst violation {worst:.3e})"


@dataclass
class SDProgram:
    """The nonconvex single-level form: primal rows plus strong duality.

    Holds the data only; no nonlinear solver is attached.  ``check``
    verifies a candidate (eta, x, lambda, nu) against every row.
    """

    pqp: ParametricQP
    objective: Objective
    delta: float
    conjugate: ConjugateCost
    bilinear_objective: bool

    def check(self, eta: np.ndarray, x: np.ndarray, lam: np.ndarray,
              nu: np.ndarray | None = None, tol: float = 1e-8) -> SDReport:
        pqp = self.pqp
        eta = np.asarray(eta, dtype=float)
        x = np.asarray(x, dtype=float)
        lam = np.asarray(lam, dtype=float)
        nu = np.zeros(pqp.n_eq) if nu is None else np.asarray(nu, dtype=float)
        inst = instantiate(pqp, eta)
        scale = 1.0 + float(np.max(np.abs(inst.b), initial=0.0))
        viol = {
            "box": float(np.max(np.maximum(
                pqp.param_space.eta_min - eta, eta - pqp.param_space.eta_max),
                initial=0.0)),
            "primal": float(np.max(inst.A @ x - inst.b, initial=0.0)),
            "equality": float(np.max(np.abs(inst.G @ x - inst.h), initial=0.0)),
            "sign": float(np.max(-lam, initial=0.0)),
        }
        dispatch_cost = float(inst.q @ x + inst.Qdiag @ (x * x))
        dual = (-float(inst.b @ lam) - float(inst.h @ nu)
                - self.conjugate.value(-(inst.A.T @ lam) - (inst.G.T @ nu)))
        viol["strong_duality"] = dispatch_cost - dual - self.delta
        ok = all(v <= tol * scale for v in viol.values())
        return SDReport(ok=ok, violations=viol)


def build_sd(pqp: ParametricQP, objective: Objective,
             delta: float) -> SDProgram:
    """Describe the delta-strong-duality program for one scenario."""
    if delta < 0:
        raise InvalidOptions("delta must be nonnegative")
    if objective.kind not in ("cost", "emissions", "profit", "ratepayer",
                              "weighted"):
        raise UnsupportedObjective(f"objective kind {objective.kind!r}")
    if pqp.A.vals.size:
        raise UnsupportedObjective(
            "inequality coefficients vary with eta; only bound variation "
            "is supported")
    return SDProgram(pqp=pqp, objective=objective, delta=delta,
                     conjugate=conjugate_cost(pqp),
                     bilinear_objective=_has_products(objective))


# the assembled convex relaxation

@dataclass
class _ScenarioBlock:
    pqp: ParametricQP
    conjugate: ConjugateCost
    x: int       # variable offsets into the stacked vector
    lam: int
    nu: int
    w_map: dict[tuple[int, int], int]    # (x col, param)    -> lift var
    u_map: dict[tuple[int, int], int]    # (eq row, param)   -> lift var
    m_map: dict[tuple[int, int], int]    # (ineq row, param) -> lift var
    z_map: dict[tuple[int, int], int]    # (eq row, x col)   -> objective lift
    m_vars: np.ndarray                   # lift var per m_map entry, in order
    m_coef: np.ndarray                   # aggregated b increment per m lift
    weight: float


@dataclass
class RelaxationProgram:
    """Convex relaxation data: one QP plus per-scenario strong-duality rows.

    Variables stack as [eta, then per scenario x, lambda, nu, lifts].
    ``to_instance`` renders the current cut set into a plain QP;
    ``sd_violation`` and ``sd_cut`` drive the cutting loop.
    """

    size: int
    n_eta: int
    q: np.ndarray
    quad: np.ndarray
    a_rows: sp.csr_matrix
    a_rhs: np.ndarray
    g_rows: sp.csr_matrix
    g_rhs: np.ndarray
    blocks: list[_ScenarioBlock]
    delta: float
    cuts: list[tuple[np.ndarray, float]] = field(default_factory=list)

    @property
    def lift_count(self) -> int:
        return sum(len(b.w_map) + len(b.u_map) + len(b.m_map) + len(b.z_map)
                   for b in self.blocks)

    def to_instance(self) -> QPInstance:
        if self.cuts:
            extra = sp.csr_matrix(np.stack([c for c, _ in self.cuts]))
            a = sp.vstack([self.a_rows, extra], format="csr")
            rhs = np.concatenate([self.a_rhs,
                                  np.array([r for _, r in self.cuts])])
        else:
            a, rhs = self.a_rows.copy(), self.a_rhs
        # row equilibration; scaling rows changes neither the feasible set
        # nor the variables, and the mixed magnitudes (unit boxes next to
        # dual caps) otherwise stall the interior point tail
        sa = np.maximum(np.abs(a).max(axis=1).toarray().ravel(), 1e-12)
        a = sp.diags(1.0 / sa) @ a
        g = self.g_rows
        sg = np.maximum(np.abs(g).max(axis=1).toarray().ravel(), 1e-12)
        g = sp.diags(1.0 / sg) @ g
        return QPInstance(eta=np.zeros(0), q=self.q, Qdiag=self.quad,
                          A=a.tocsr(), b=rhs / sa, G=g.tocsr(),
                          h=self.g_rhs / sg, offset=0.0)

    def _sd_parts(self, v: np.ndarray, blk: _ScenarioBlock):
        pqp = blk.pqp
        x = v[blk.x:blk.x + pqp.n]
        lam = v[blk.lam:blk.lam + pqp.m]
        nu = v[blk.nu:blk.nu + pqp.n_eq]
        y = -(pqp.A.const.T @ lam) - (pqp.G.const.T @ nu)
        for r, c, k, val in zip(pqp.G.rows, pqp.G.cols, pqp.G.params,
                                pqp.G.vals):
            y[int(c)] -= val * v[blk.u_map[(int(r), int(k))]]
        return x, lam, nu, y

    def sd_violation(self, v: np.ndarray, s: int) -> float:
        """Value of c(x) + lam' b(eta) + c*(y) - delta with lifted products."""
        blk = self.blocks[s]
        pqp = blk.pqp
        x, lam, _, y = self._sd_parts(v, blk)
        total = float(pqp.q @ x + pqp.Qdiag @ (x * x))
        total += float(pqp.b.const @ lam)
        if blk.m_vars.size:
            total += float(blk.m_coef @ v[blk.m_vars])
        total += blk.conjugate.value(y)
        return total - self.delta

    def sd_cut(self, v: np.ndarray, s: int) -> tuple[np.ndarray, float]:
        """Linearize the strong-duality row at v as coefs' w <= rhs."""
        blk = self.blocks[s]
        pqp = blk.pqp
        x, lam, _, y = self._sd_parts(v, blk)
        slope = blk.conjugate.grad(y)
        coefs = np.zeros(self.size)
        coefs[blk.x:blk.x + pqp.n] = pqp.q + 2.0 * pqp.Qdiag * x
        coefs[blk.lam:blk.lam + pqp.m] = pqp.b.const - pqp.A.const @ slope
        coefs[blk.nu:blk.nu + pqp.n_eq] = -(pqp.G.const @ slope)
        if blk.m_vars.size:
            coefs[blk.m_vars] += blk.m_coef
        for r, c, k, val in zip(pqp.G.rows, pqp.G.cols, pqp.G.params,
                                pqp.G.vals):
            coefs[blk.u_map[(int(r), int(k))]] += -val * slope[int(c)]
        rhs = float(coefs @ v) - self.sd_violation(v, s)
        return coefs, rhs

    def embed(self, eta: np.ndarray,
              solutions: Sequence[DispatchSolution]) -> np.ndarray:
        """Lift exact dispatch solutions into the stacked variable vector."""
        v = np.zeros(self.size)
        v[:self.n_eta] = eta
        for blk, sol in zip(self.blocks, solutions):
            pqp = blk.pqp
            v[blk.x:blk.x + pqp.n] = sol.x
            v[blk.lam:blk.lam + pqp.m] = sol.lam
            v[blk.nu:blk.nu + pqp.n_eq] = sol.nu
            for (j, k), idx in blk.w_map.items():
                v[idx] = sol.x[j] * eta[k]
            for (r, k), idx in blk.u_map.items():
                v[idx] = sol.nu[r] * eta[k]
            for (i, k), idx in blk.m_map.items():
                v[idx] = sol.lam[i] * eta[k]
            for (r, c), idx in blk.z_map.items():
                v[idx] = sol.nu[r] * sol.x[c]
        return v


def build_relaxation(pqps, objective: Objective,
                     bounds: RelaxBounds, delta: float,
                     weights: Sequence[float] | None = None,
                     case: NetworkCase | None = None) -> RelaxationProgram:
    """Assemble the McCormick relaxation across scenarios.

    Rows whose coefficients do not involve eta stay exact; only the
    parameter-scaled products receive envelope variables.  ``weights``
    defaults to a uniform average over the given programs.  Objectives
    other than plain cost need ``case`` to locate their rows.
    """
    if isinstance(pqps, ParametricQP):
        pqps = [pqps]
    pqps = list(pqps)
    space = pqps[0].param_space
    n_eta = space.eta_min.size
    if weights is None:
        weights = np.full(len(pqps), 1.0 / len(pqps))
    bounds.validate(pqps[0].n)
    if delta < 0:
        raise InvalidOptions("delta must be nonnegative")

    # variable layout
    offset = n_eta
    blocks: list[_ScenarioBlock] = []
    all_terms: list[_ObjectiveTerms] = []
    for s, pqp in enumerate(pqps):
        if pqp.A.vals.size:
            raise UnsupportedObjective(
                "inequality coefficients vary with eta; only bound "
                "variation is supported")
        terms = _ObjectiveTerms(linear=np.zeros(pqp.n), quad=np.zeros(pqp.n),
                                products=[])
        _objective_terms(objective, case, pqp, 1.0, terms)
        if np.any(terms.quad < 0):
            raise UnsupportedObjective(
                "negative quadratic weight; the relaxation must stay convex")
        x0 = offset
        lam0 = x0 + pqp.n
        nu0 = lam0 + pqp.m
        offset = nu0 + pqp.n_eq
        w_map: dict[tuple[int, int], int] = {}
        u_map: dict[tuple[int, int], int] = {}
        for r, c, k in zip(pqp.G.rows, pqp.G.cols, pqp.G.params):
            if (int(c), int(k)) not in w_map:
                w_map[(int(c), int(k))] = offset
                offset += 1
            if (int(r), int(k)) not in u_map:
                u_map[(int(r), int(k))] = offset
                offset += 1
        m_pairs: dict[tuple[int, int], float] = {}
        for i, k, val in zip(pqp.b.rows, pqp.b.params, pqp.b.vals):
            key = (int(i), int(k))
            m_pairs[key] = m_pairs.get(key, 0.0) + float(val)
        m_map: dict[tuple[int, int], int] = {}
        for pair in m_pairs:
            m_map[pair] = offset
            offset += 1
        z_map: dict[tuple[int, int], int] = {}
        for r, c, _ in terms.products:
            if (r, c) not in z_map:
                z_map[(r, c)] = offset
                offset += 1
        blocks.append(_ScenarioBlock(
            pqp=pqp, conjugate=conjugate_cost(pqp),
            x=x0, lam=lam0, nu=nu0, w_map=w_map, u_map=u_map, m_map=m_map,
            z_map=z_map,
            m_vars=np.array(list(m_map.values()), dtype=int),
            m_coef=np.array([m_pairs[p] for p in m_map]),
            weight=float(weights[s])))
        all_terms.append(terms)
    size = offset

    q = np.zeros(size)
    quad = np.zeros(size)
    q[:n_eta] += space.gamma
    ar: list[int] = []
    ac: list[int] = []
    av: list[float] = []
    rhs: list[float] = []
    gr: list[int] = []
    gc: list[int] = []
    gv: list[float] = []
    geq: list[float] = []

    def ineq(cols, vals, bound):
        row = len(rhs)
        ar.extend([row] * len(cols))
        ac.extend(cols)
        av.extend(vals)
        rhs.append(bound)

    def eqrow(cols, vals, bound):
        row = len(geq)
        gr.extend([row] * len(cols))
        gc.extend(cols)
        gv.extend(vals)
        geq.append(bound)

    def box(var, lo, hi):
        # a zero-width box written as two opposing inequalities leaves the
        # interior-point path no slack; pin it with an equality instead
        if hi == lo:
            eqrow([var], [1.0], lo)
        else:
            ineq([var], [1.0], hi)
            ineq([var], [-1.0], -lo)

    def envelope(idx, a_var, b_var, ebox):
        pinned_a = ebox.a_hi == ebox.a_lo
        pinned_b = ebox.b_hi == ebox.b_lo
        if pinned_a and pinned_b:
            eqrow([idx], [1.0], ebox.a_lo * ebox.b_lo)
        elif pinned_a:
            eqrow([idx, b_var], [1.0, -ebox.a_lo], 0.0)
        elif pinned_b:
            eqrow([idx, a_var], [1.0, -ebox.b_lo], 0.0)
        else:
            for ca, cb, cy, bound in mccormick_env(ebox):
                ineq([a_var, b_var, idx], [ca, cb, cy], bound)
            corners = ebox.corners()
            box(idx, min(corners), max(corners))

    for k in range(n_eta):
        box(k, space.eta_min[k], space.eta_max[k])

    for blk, terms in zip(blocks, all_terms):
        pqp = blk.pqp
        wgt = blk.weight
        q[blk.x:blk.x + pqp.n] += wgt * terms.linear
        quad[blk.x:blk.x + pqp.n] += wgt * terms.quad
        for r, c, coef in terms.products:
            q[blk.z_map[(r, c)]] += wgt * coef

        # primal inequalities A x - Delta_b eta <= b_const, exactly linear
        acoo = pqp.A.const.tocoo()
        base = len(rhs)
        ar.extend((base + acoo.row).tolist())
        ac.extend((blk.x + acoo.col).tolist())
        av.extend(acoo.data.tolist())
        for i, k, val in zip(pqp.b.rows, pqp.b.params, pqp.b.vals):
            ar.append(base + int(i))
            ac.append(int(k))
            av.append(-float(val))
        rhs.extend(pqp.b.const.tolist())

        # relaxed equality rows: constant part on x, lifts for the rest
        gcoo = pqp.G.const.tocoo()
        gbase = len(geq)
        gr.extend((gbase + gcoo.row).tolist())
        gc.extend((blk.x + gcoo.col).tolist())
        gv.extend(gcoo.data.tolist())
        for r, c, k, val in zip(pqp.G.rows, pqp.G.cols, pqp.G.params,
                                pqp.G.vals):
            gr.append(gbase + int(r))
            gc.append(blk.w_map[(int(c), int(k))])
            gv.append(float(val))
        geq.extend(pqp.h.tolist())

        for j in range(pqp.n):
            box(blk.x + j, bounds.x_lo[j], bounds.x_hi[j])
        for i in range(pqp.m):
            box(blk.lam + i, 0.0, bounds.lam_max)
        for r in range(pqp.n_eq):
            box(blk.nu + r, -bounds.nu_abs, bounds.nu_abs)

        for (j, k), idx in blk.w_map.items():
            envelope(idx, blk.x + j, k,
                     EnvelopeBox(bounds.x_lo[j], bounds.x_hi[j],
                                 space.eta_min[k], space.eta_max[k]))
        for (r, k), idx in blk.u_map.items():
            envelope(idx, blk.nu + r, k,
                     EnvelopeBox(-bounds.nu_abs, bounds.nu_abs,
                                 space.eta_min[k], space.eta_max[k]))
        for (i, k), idx in blk.m_map.items():
            envelope(idx, blk.lam + i, k,
                     EnvelopeBox(0.0, bounds.lam_max,
                                 space.eta_min[k], space.eta_max[k]))
        for (r, c), idx in blk.z_map.items():
            envelope(idx, blk.nu + r, blk.x + c,
                     EnvelopeBox(-bounds.nu_abs, bounds.nu_abs,
                                 bounds.x_lo[c], bounds.x_hi[c]))

    a_rows = sp.coo_matrix((av, (ar, ac)), shape=(len(rhs), size)).tocsr()
    g_rows = sp.coo_matrix((gv, (gr, gc)), shape=(len(geq), size)).tocsr()
    return RelaxationProgram(
        size=size, n_eta=n_eta, q=q, quad=quad,
        a_rows=a_rows, a_rhs=np.array(rhs), g_rows=g_rows,
        g_rhs=np.array(geq), blocks=blocks, delta=delta)


@dataclass(frozen=True)
class BoundResult:
    """Certified lower bound and the relaxation's investment suggestion."""

    value: float
    eta: np.ndarray
    status: str  # "optimal" | "cut_limit"
    gap_vs: float | None = None
    cut_rounds: int = 0


def _planner_value(case, objective, eta, pqps, settings, executor) -> float:
    weights = case.scenario_weights()
    space = pqps[0].param_space

    def one(pqp):
        return solve_qp(instantiate(pqp, eta), settings)

    if executor is None:
        sols = [one(pqp) for pqp in pqps]
    else:
        sols = list(executor.map(one, pqps))
    total = float(space.gamma @ eta)
    for s, (pqp, sol) in enumerate(zip(pqps, sols)):
        total += weights[s] * eval_objective(objective, case, pqp, sol)
    return float(total)


def default_delta(case: NetworkCase,
                  pqps: Sequence[ParametricQP] | None = None,
                  settings: SolverSettings | None = None) -> float:
    """delta = 1e-6 (1 + |dispatch value at the lower corner|)."""
    pqps = _as_pqps(case, pqps)
    space = pqps[0].param_space
    base = _planner_value(case, cost(), space.eta_min, pqps, settings, None)
    return 1e-6 * (1.0 + abs(base))


def lower_bound(case: NetworkCase, objective: Objective,
                delta: float | None = None,
                bounds: RelaxBounds | None = None,
                settings: SolverSettings | None = None,
                executor: Executor | None = None,
                incumbent: float | None = None,
                max_cuts: int = 50) -> BoundResult:
    """Solve the relaxation for a certified lower bound on the plan value.

    The quadratic strong-duality rows are enforced lazily: solve the QP,
    linearize the violated rows at the optimizer, repeat.  Every round's
    optimum is already a valid bound (an outer approximation only ever
    enlarges the feasible set), so the loop keeps the best certified value
    and stops early once extra cuts no longer move it.  That happens
    immediately for dispatch-aligned objectives, where the duals carry no
    objective weight and the rows bind nothing at the optimum.
    """
    objective.validate(case)
    pqps = _as_pqps(case, None)
    if bounds is None:
        bounds = corner_bounds(case, pqps, settings, executor)
    if delta is None:
        delta = default_delta(case, pqps, settings)
    program = build_relaxation(pqps, objective, bounds, delta,
                               weights=case.scenario_weights(), case=case)
    tol = 1e-7 * (1.0 + abs(delta))
    status = "cut_limit"
    rounds = 0
    best = -math.inf
    best_v = np.zeros(program.size)
    stalled = 0
    for rounds in range(max_cuts + 1):
        inst = program.to_instance()
        try:
            sol = _solve_relax(inst, settings)
        except Infeasible as exc:
            raise RelaxationInfeasible(
                f"relaxation infeasible after {rounds} cut rounds: {exc}"
            ) from exc
        except SolverError as exc:
            if math.isfinite(best):
                break
            raise RelaxationInfeasible(str(exc)) from exc
        v = sol.x
        # subtract the solve's remaining duality gap so the reported value
        # certifies the relaxation minimum from below
        slack_gap = float(sol.lam @ np.abs(inst.b - inst.A @ v))
        eq_gap = float(np.abs(sol.nu) @ np.abs(inst.G @ v - inst.h))
        value = float(sol.qp_value) - slack_gap - eq_gap
        if value > best:
            improved = value - best
            best, best_v = value, v
        else:
            improved = 0.0
        violated = [s for s in range(len(program.blocks))
                    if program.sd_violation(v, s) > tol]
        if not violated:
            status = "optimal"
            break
        if rounds == max_cuts:
            break
        stalled = stalled + 1 if improved <= 1e-9 * (1.0 + abs(best)) else 0
        if rounds > 0 and stalled >= 2:
            break
        for s in violated:
            program.cuts.append(program.sd_cut(v, s))
    space = pqps[0].param_space
    eta = np.clip(best_v[:program.n_eta], space.eta_min, space.eta_max)
    gap_vs = None
    if incumbent is not None and best > 0:
        gap_vs = subopt_gap(incumbent, best)
    return BoundResult(value=best, eta=eta, status=status, gap_vs=gap_vs,
                       cut_rounds=rounds)


def _solve_relax(inst: QPInstance, settings: SolverSettings | None):
    """Solve one relaxation QP, relaxing the gap tolerance on a stall."""
    if settings is not None:
        return solve_qp(inst, settings)
    last: MaxIterations | None = None
    for tol in (1e-9, 1e-8, 1e-7):
        try:
            return solve_qp(inst, SolverSettings(tol=tol, max_iters=300))
        except MaxIterations as exc:
            last = exc
    raise last


def enumerate_binary(case: NetworkCase, objective: Objective,
                     limit: int = 16,
                     pqps: Sequence[ParametricQP] | None = None,
                     settings: SolverSettings | None = None,
                     executor: Executor | None = None,
                     ) -> tuple[np.ndarray, float]:
    """Exact optimum over binary patterns by exhaustive dispatch solves."""
    objective.validate(case)
    pqps = _as_pqps(case, pqps)
    space = pqps[0].param_space
    free = space.eta_max > space.eta_min
    if np.any(free & ~space.binary):
        raise InvalidOptions(
            "enumeration needs every free coordinate to be binary")
    slots = np.flatnonzero(free & space.binary)
    if slots.size > limit:
        raise TooManyBinaries(
            f"{slots.size} binary coordinates exceed the limit {limit}")
    best_eta, best_val = space.eta_min.copy(), math.inf
    for pattern in itertools.product((False, True), repeat=slots.size):
        eta = space.eta_min.copy()
        for slot, high in zip(slots, pattern):
            if high:
                eta[slot] = space.eta_max[slot]
        val = _planner_value(case, objective, eta, pqps, settings, executor)
        if val < best_val:
            best_eta, best_val = eta, val
    return best_eta, best_val
