"""Compile a network case into a parametric convex QP.

The dispatch problem for one scenario is

    minimize    q'x + x' diag(Q) x
    subject to  A x <= b(eta),   G(eta) x = h

over x = per-period blocks [p, g, theta, f] (+ [v, s] when batteries are
present).  Constraint coefficients are affine in the investment vector eta:
``b`` picks up capacity terms (generator, flow, and storage limits scale with
the build level) and ``G`` picks up the voltage-law couplings
f = beta * eta * (theta_from - theta_to).  ``A`` and ``h`` are constant.
Contributions of fixed devices (eta_min == eta_max) are baked into the
constant parts, so increments only ever reference free investment slots.

Every eta-scaled bound carries a small constant slack floor sigma.  Without it
a corner of the investment box collapses ranges like |f| <= cap * eta to a
point, the collapsed bounds duplicate the voltage equality, and the active
constraint set loses linear independence; the floor keeps those bounds
strictly slack at the corner while moving the optimum by at most sigma.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
import scipy.sparse as sp

from gridplan.model import NetworkCase, ParamSpace, investment_space, series_at

__all__ = [
    "CompileError",
    "OutOfBounds",
    "SingularCost",
    "AffineVector",
    "AffineMatrix",
    "VarIndex",
    "ParametricQP",
    "QPInstance",
    "ConjugateCost",
    "compile_static",
    "compile_dynamic",
    "instantiate",
    "conjugate_cost",
    "describe",
]

DEFAULT_SLACK_FLOOR = 1e-5


class CompileError(ValueError):
    """Raised when a case cannot be expressed as a parametric dispatch QP."""


class OutOfBounds(ValueError):
    """Raised when instantiating at an eta outside the investment box."""


class SingularCost(ValueError):
    """Raised when the quadratic cost has a non-positive diagonal entry."""


@dataclass(frozen=True)
class AffineVector:
    """b(eta) = const + sum over increments of val * eta[param] at row."""

    const: np.ndarray
    rows: np.ndarray
    params: np.ndarray
    vals: np.ndarray

    def value(self, eta: np.ndarray) -> np.ndarray:
        out = self.const.copy()
        if self.rows.size:
            np.add.at(out, self.rows, self.vals * eta[self.params])
        return out

    def active_params(self) -> np.ndarray:
        return np.unique(self.params)

    def deriv(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Rows and values of the constant vector d b / d eta_k."""
        mask = self.params == k
        return self.rows[mask], self.vals[mask]


@dataclass(frozen=True)
class AffineMatrix:
    """M(eta) = const + sum over increments of val * eta[param] at (row, col)."""

    shape: tuple[int, int]
    const: sp.csr_matrix
    rows: np.ndarray
    cols: np.ndarray
    params: np.ndarray
    vals: np.ndarray

    def value(self, eta: np.ndarray) -> sp.csr_matrix:
        if not self.rows.size:
            return self.const.copy()
        bump = sp.coo_matrix(
            (self.vals * eta[self.params], (self.rows, self.cols)), shape=self.shape
        )
        return (self.const + bump.tocsr()).tocsr()

    def active_params(self) -> np.ndarray:
        return np.unique(self.params)

    def deriv(self, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Triplets of the constant matrix d M / d eta_k."""
        mask = self.params == k
        return self.rows[mask], self.cols[mask], self.vals[mask]


class _VecBuilder:
    def __init__(self):
        self.const: list[float] = []
        self.rows: list[int] = []
        self.params: list[int] = []
        self.vals: list[float] = []

    def add_row(self, const: float, terms: Iterable[tuple[int, float]] = ()) -> int:
        row = len(self.const)
        self.const.append(const)
        for param, val in terms:
            self.rows.append(row)
            self.params.append(param)
            self.vals.append(val)
        return row

    def freeze(self) -> AffineVector:
        return AffineVector(
            const=np.array(self.const, dtype=float),
            rows=np.array(self.rows, dtype=np.int64),
            params=np.array(self.params, dtype=np.int64),
            vals=np.array(self.vals, dtype=float),
        )


class _MatBuilder:
    def __init__(self, n_cols: int):
        self.n_cols = n_cols
        self.n_rows = 0
        self.c_rows: list[int] = []
        self.c_cols: list[int] = []
        self.c_vals: list[float] = []
        self.i_rows: list[int] = []
        self.i_cols: list[int] = []
        self.i_params: list[int] = []
        self.i_vals: list[float] = []

    def set_rows(self, n: int):
        self.n_rows = n

    def const_entry(self, row: int, col: int, val: float):
        self.c_rows.append(row)
        self.c_cols.append(col)
        self.c_vals.append(val)

    def incr_entry(self, row: int, col: int, param: int, val: float):
        self.i_rows.append(row)
        self.i_cols.append(col)
        self.i_params.append(param)
        self.i_vals.append(val)

    def freeze(self) -> AffineMatrix:
        shape = (self.n_rows, self.n_cols)
        const = sp.coo_matrix(
            (self.c_vals, (self.c_rows, self.c_cols)), shape=shape
        ).tocsr()
        return AffineMatrix(
            shape=shape,
            const=const,
            rows=np.array(self.i_rows, dtype=np.int64),
            cols=np.array(self.i_cols, dtype=np.int64),
            params=np.array(self.i_params, dtype=np.int64),
            vals=np.array(self.i_vals, dtype=float),
        )


@dataclass(frozen=True)
class VarIndex:
    """Column lookup for the flat decision vector.

    All arrays are indexed [t, device]; ``g`` has a column for every node
    (pinned to zero where no generator sits) so balance rows are uniform.
    """

    n_nodes: int
    n_lines: int
    n_batteries: int
    horizon: int
    p: np.ndarray
    g: np.ndarray
    theta: np.ndarray
    f: np.ndarray
    v: np.ndarray
    s: np.ndarray

    @property
    def size(self) -> int:
        return self.horizon * (3 * self.n_nodes + self.n_lines + 2 * self.n_batteries)


def _make_var_index(n: int, L: int, B: int, T: int) -> VarIndex:
    per_t = 3 * n + L + 2 * B
    base = np.arange(T)[:, None] * per_t
    return VarIndex(
        n_nodes=n, n_lines=L, n_batteries=B, horizon=T,
        p=base + np.arange(n)[None, :],
        g=base + n + np.arange(n)[None, :],
        theta=base + 2 * n + np.arange(n)[None, :],
        f=base + 3 * n + np.arange(L)[None, :],
        v=base + 3 * n + L + np.arange(B)[None, :],
        s=base + 3 * n + L + B + np.arange(B)[None, :],
    )


@dataclass(frozen=True)
class ParametricQP:
    """Dispatch QP with affine-in-eta constraint data for one scenario."""

    n: int                      # decision variables
    m: int                      # inequality rows
    n_eq: int                   # equality rows
    q: np.ndarray
    Qdiag: np.ndarray
    A: AffineMatrix
    b: AffineVector
    G: AffineMatrix
    h: np.ndarray               # constant (all-zero for dispatch problems)
    param_space: ParamSpace
    var_index: VarIndex
    ineq_labels: tuple[str, ...]
    eq_labels: tuple[str, ...]
    offset: float               # constant cost term (curtailment of full demand)
    scenario: int
    balance_rows: np.ndarray    # [t, node] -> equality row of the balance constraint
    sigma: dict[str, float] = field(default_factory=dict)

    def instantiate(self, eta: np.ndarray) -> "QPInstance":
        return instantiate(self, eta)


@dataclass(frozen=True)
class QPInstance:
    """Concrete QP data at a fixed investment vector."""

    eta: np.ndarray
    q: np.ndarray
    Qdiag: np.ndarray
    A: sp.csr_matrix
    b: np.ndarray
    G: sp.csr_matrix
    h: np.ndarray
    offset: float

    @property
    def n(self) -> int:
        return self.q.shape[0]

    def objective(self, x: np.ndarray) -> float:
        return float(self.q @ x + x @ (self.Qdiag * x))


def instantiate(pqp: ParametricQP, eta: np.ndarray) -> QPInstance:
    eta = np.asarray(eta, dtype=float)
    if eta.shape != (pqp.param_space.size,):
        raise OutOfBounds(
            f"eta has shape {eta.shape}, expected ({pqp.param_space.size},)")
    if not pqp.param_space.contains(eta):
        raise OutOfBounds("eta lies outside the investment box")
    return QPInstance(
        eta=eta.copy(),
        q=pqp.q,
        Qdiag=pqp.Qdiag,
        A=pqp.A.value(eta),
        b=pqp.b.value(eta),
        G=pqp.G.value(eta),
        h=pqp.h,
        offset=pqp.offset,
    )


@dataclass(frozen=True)
class ConjugateCost:
    """Convex conjugate of c(x) = q'x + x' diag(Q) x.

    c*(y) = sum_i (y_i - q_i)^2 / (4 Q_ii), finite everywhere because the
    quadratic is strongly convex.
    """

    q: np.ndarray
    Qdiag: np.ndarray

    def value(self, y: np.ndarray) -> float:
        d = np.asarray(y, dtype=float) - self.q
        return float(np.sum(d * d / (4.0 * self.Qdiag)))

    def grad(self, y: np.ndarray) -> np.ndarray:
        return (np.asarray(y, dtype=float) - self.q) / (2.0 * self.Qdiag)


def conjugate_cost(pqp: ParametricQP) -> ConjugateCost:
    if np.any(pqp.Qdiag <= 0):
        bad = int(np.argmin(pqp.Qdiag))
        raise SingularCost(
            f"Q[{bad},{bad}] = {pqp.Qdiag[bad]} is not positive; the conjugate "
            "cost needs a strongly convex quadratic")
    return ConjugateCost(q=pqp.q.copy(), Qdiag=pqp.Qdiag.copy())


def compile_static(case: NetworkCase, scenario: int = 0,
                   slack_floor: float = DEFAULT_SLACK_FLOOR) -> ParametricQP:
    """Single-period dispatch QP.  Cases with batteries or a horizon beyond
    one period need :func:`compile_dynamic`."""
    if case.horizon != 1:
        raise CompileError(
            f"static compile needs horizon 1, case has {case.horizon}; "
            "use compile_dynamic")
    if case.batteries:
        raise CompileError("case has batteries; use compile_dynamic")
    return compile_dynamic(case, scenario, slack_floor)


def compile_dynamic(case: NetworkCase, scenario: int = 0,
                    slack_floor: float = DEFAULT_SLACK_FLOOR,
                    terminal_empty: bool = False) -> ParametricQP:
    """Multi-period dispatch QP with battery state-of-charge dynamics.

    ``terminal_empty`` adds s_{T-1} = 0, forcing storage to return its energy
    within the horizon.  ``slack_floor`` scales the constant sigma added to
    every eta-dependent bound (relative to the bound's widest range, floored
    at 1); 0 disables the floors, which is only safe away from box corners.
    """
    n_scen = case.scenario_count()
    if not 0 <= scenario < n_scen:
        raise CompileError(f"scenario {scenario} out of range [0, {n_scen})")
    if slack_floor < 0:
        raise CompileError(f"slack_floor must be >= 0, got {slack_floor}")

    n, T = case.nodes, case.horizon
    L, B = len(case.lines), len(case.batteries)
    space = investment_space(case)

    gen_at: dict[int, int] = {}
    for j, gen in enumerate(case.generators):
        if gen.node in gen_at:
            raise CompileError(
                f"generators {gen_at[gen.node]} and {j} share node {gen.node}; "
                "aggregate them or move one")
        gen_at[gen.node] = j
    load_at: dict[int, list[int]] = {}
    for j, load in enumerate(case.loads):
        load_at.setdefault(load.node, []).append(j)
    bats_at: dict[int, list[int]] = {}
    for bidx, bat in enumerate(case.batteries):
        bats_at.setdefault(bat.node, []).append(bidx)

    idx = _make_var_index(n, L, B, T)
    N = idx.size
    eps = case.regularization()
    delta = case.curtailment_cost

    # demand per (t, node) after scenario overrides
    demand = np.zeros((T, n))
    for j, load in enumerate(case.loads):
        series = case.demand_series(j, scenario)
        for t in range(T):
            demand[t, load.node] += series_at(series, t)
    offset = delta * float(demand.sum())

    def capacity(j: int) -> list[float]:
        series = case.capacity_series(j, scenario)
        return [series_at(series, t) for t in range(T)]

    def sigma_for(widest: float) -> float:
        return slack_floor * max(1.0, widest)

    # eta slot of each device kind; fixed slots are folded into constants
    line_slot = {k: i for i, (kind, k) in enumerate(space.labels) if kind == "line"}
    gen_slot = {k: i for i, (kind, k) in enumerate(space.labels) if kind == "generator"}
    bat_slot = {k: i for i, (kind, k) in enumerate(space.labels) if kind == "battery"}

    def bound_terms(slot: int, per_unit: float) -> tuple[float, list[tuple[int, float]]]:
        """cap * eta as (const, increments), folding fixed eta into const."""
        if space.eta_min[slot] == space.eta_max[slot]:
            return per_unit * space.eta_min[slot], []
        return 0.0, [(slot, per_unit)]

    q = np.zeros(N)
    Qdiag = np.full(N, eps)
    A = _MatBuilder(N)
    bvec = _VecBuilder()
    G = _MatBuilder(N)
    eq_const: list[float] = []
    ineq_labels: list[str] = []
    eq_labels: list[str] = []
    sigma_used: dict[str, float] = {}

    def ineq(label: str, cols: list[tuple[int, float]], const: float,
             terms: Iterable[tuple[int, float]] = ()):
        row = bvec.add_row(const, terms)
        for col, val in cols:
            A.const_entry(row, col, val)
        ineq_labels.append(label)

    def eq_row(label: str, const: float = 0.0) -> int:
        row = len(eq_const)
        eq_const.append(const)
        eq_labels.append(label)
        return row

    balance_rows = np.zeros((T, n), dtype=np.int64)

    for t in range(T):
        for i in range(n):
            col_p, col_g = int(idx.p[t, i]), int(idx.g[t, i])
            has_load = i in load_at
            has_gen = i in gen_at
            if has_load:
                d_ti = demand[t, i]
                sig = sigma_for(float(demand[:, i].max()))
                sigma_used.setdefault("p", sig)
                q[col_p] = -delta
                ineq(f"t{t}:p_lo:n{i}", [(col_p, -1.0)], sig)
                ineq(f"t{t}:p_hi:n{i}", [(col_p, 1.0)], d_ti)
            if has_gen:
                j = gen_at[i]
                gen = case.generators[j]
                caps = capacity(j)
                slot = gen_slot[j]
                widest = max(caps) * max(space.eta_max[slot], 1.0)
                sig = sigma_for(widest)
                sigma_used.setdefault("g", sig)
                q[col_g] = gen.marginal_cost
                const, terms = bound_terms(slot, caps[t])
                ineq(f"t{t}:g_lo:n{i}", [(col_g, -1.0)], sig)
                ineq(f"t{t}:g_hi:n{i}", [(col_g, 1.0)], const + sig, terms)
            elif not has_load:
                # devoid nodes: a sigma box on g instead of a zero pin, so the
                # pin cannot shadow the balance row when every attached line is
                # built down to zero
                sig = sigma_for(1.0)
                ineq(f"t{t}:g_lo:n{i}", [(col_g, -1.0)], sig)
                ineq(f"t{t}:g_hi:n{i}", [(col_g, 1.0)], sig)

        for k, line in enumerate(case.lines):
            col_f = int(idx.f[t, k])
            slot = line_slot[k]
            cap_per_unit = line.flow_limit_per_susceptance * line.susceptance_per_unit
            widest = cap_per_unit * max(space.eta_max[slot], 1.0)
            sig = sigma_for(widest)
            sigma_used.setdefault("f", sig)
            const, terms = bound_terms(slot, cap_per_unit)
            ineq(f"t{t}:f_lo:l{k}", [(col_f, -1.0)], const + sig, terms)
            ineq(f"t{t}:f_hi:l{k}", [(col_f, 1.0)], const + sig, terms)

        for bidx, bat in enumerate(case.batteries):
            col_v, col_s = int(idx.v[t, bidx]), int(idx.s[t, bidx])
            slot = bat_slot[bidx]
            sig_v = sigma_for(bat.power_limit * max(space.eta_max[slot], 1.0))
            sig_s = sigma_for(bat.duration * bat.power_limit * max(space.eta_max[slot], 1.0))
            sigma_used.setdefault("v", sig_v)
            sigma_used.setdefault("s", sig_s)
            const_v, terms_v = bound_terms(slot, bat.power_limit)
            ineq(f"t{t}:v_lo:b{bidx}", [(col_v, -1.0)], const_v + sig_v, terms_v)
            ineq(f"t{t}:v_hi:b{bidx}", [(col_v, 1.0)], const_v + sig_v, terms_v)
            const_s, terms_s = bound_terms(slot, bat.duration * bat.power_limit)
            ineq(f"t{t}:s_lo:b{bidx}", [(col_s, -1.0)], sig_s)
            ineq(f"t{t}:s_hi:b{bidx}", [(col_s, 1.0)], const_s + sig_s, terms_s)

    # equalities: balance, voltage law, angle reference, zero pins, dynamics
    for t in range(T):
        for i in range(n):
            row = eq_row(f"t{t}:balance:n{i}")
            balance_rows[t, i] = row
            G.const_entry(row, int(idx.g[t, i]), 1.0)
            G.const_entry(row, int(idx.p[t, i]), -1.0)
            for bidx in bats_at.get(i, ()):
                G.const_entry(row, int(idx.v[t, bidx]), -1.0)
        for k, line in enumerate(case.lines):
            balance_from = balance_rows[t, line.from_node]
            balance_to = balance_rows[t, line.to_node]
            col_f = int(idx.f[t, k])
            # flow leaves the from node and arrives at the to node
            G.const_entry(int(balance_from), col_f, -1.0)
            G.const_entry(int(balance_to), col_f, 1.0)

            row = eq_row(f"t{t}:voltage:l{k}")
            G.const_entry(row, col_f, 1.0)
            slot = line_slot[k]
            beta = line.susceptance_per_unit
            c_from, c_to = int(idx.theta[t, line.from_node]), int(idx.theta[t, line.to_node])
            if space.eta_min[slot] == space.eta_max[slot]:
                scale = beta * space.eta_min[slot]
                G.const_entry(row, c_from, -scale)
                G.const_entry(row, c_to, scale)
            else:
                G.incr_entry(row, c_from, slot, -beta)
                G.incr_entry(row, c_to, slot, beta)

        row = eq_row(f"t{t}:ref:n0")
        G.const_entry(row, int(idx.theta[t, 0]), 1.0)

        for i in range(n):
            if i not in load_at:
                row = eq_row(f"t{t}:pin_p:n{i}")
                G.const_entry(row, int(idx.p[t, i]), 1.0)
            if i not in gen_at and i in load_at:
                row = eq_row(f"t{t}:pin_g:n{i}")
                G.const_entry(row, int(idx.g[t, i]), 1.0)

    for bidx in range(B):
        for t in range(T):
            col_s, col_v = int(idx.s[t, bidx]), int(idx.v[t, bidx])
            if t == 0:
                row = eq_row(f"t0:soc:b{bidx}")
                G.const_entry(row, col_s, 1.0)
                G.const_entry(row, col_v, -1.0)
            else:
                row = eq_row(f"t{t}:soc:b{bidx}")
                G.const_entry(row, col_s, 1.0)
                G.const_entry(row, int(idx.s[t - 1, bidx]), -1.0)
                G.const_entry(row, col_v, -1.0)
        if terminal_empty and T > 0:
            row = eq_row(f"t{T - 1}:soc_end:b{bidx}")
            G.const_entry(row, int(idx.s[T - 1, bidx]), 1.0)

    A.set_rows(len(ineq_labels))
    G.set_rows(len(eq_labels))
    return ParametricQP(
        n=N,
        m=len(ineq_labels),
        n_eq=len(eq_labels),
        q=q,
        Qdiag=Qdiag,
        A=A.freeze(),
        b=bvec.freeze(),
        G=G.freeze(),
        h=np.array(eq_const, dtype=float),
        param_space=space,
        var_index=idx,
        ineq_labels=tuple(ineq_labels),
        eq_labels=tuple(eq_labels),
        offset=offset,
        scenario=scenario,
        balance_rows=balance_rows,
        sigma=sigma_used,
    )


def describe(pqp: ParametricQP) -> str:
    """Human-readable sketch of a compiled problem, for debugging."""
    space = pqp.param_space
    lines = [
        f"variables        {pqp.n}",
        f"inequalities     {pqp.m}",
        f"equalities       {pqp.n_eq}",
        f"investment slots {space.size} "
        f"({int((~(space.eta_min == space.eta_max)).sum())} free)",
        f"scenario         {pqp.scenario}",
        f"cost offset      {pqp.offset:.6g}",
        f"A increments     {pqp.A.vals.size}",
        f"b increments     {pqp.b.vals.size}",
        f"G increments     {pqp.G.vals.size}",
    ]
    if pqp.sigma:
        floors = ", ".join(f"{k}={v:.3g}" for k, v in sorted(pqp.sigma.items()))
        lines.append(f"slack floors     {floors}")
    for i, (kind, k) in enumerate(space.labels):
        lo, hi = space.eta_min[i], space.eta_max[i]
        tag = "binary" if space.binary[i] else "continuous"
        state = "fixed" if lo == hi else tag
        lines.append(f"  eta[{i}] {kind}[{k}] in [{lo:g}, {hi:g}] "
                     f"gamma={space.gamma[i]:g} ({state})")
    return "\n".join(lines)
