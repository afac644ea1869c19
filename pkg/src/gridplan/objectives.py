"""Planner objectives h(x, lam, nu) over dispatch outcomes, with gradients.

Four base objectives and their weighted combinations.  All of them are
minimized by the planner:

* cost: the dispatch objective itself (fuel, curtailment reward, and the
  quadratic regularization), so that planner cost and market cost coincide.
* emissions: cost plus an implied carbon price w times total emissions.
* profit: negated merchant revenue net of fuel cost for an owned generator
  set, priced at locational marginal prices.
* ratepayer: consumer energy payments at those prices.

Prices come from the equality duals: with the balance row written
g - p - M f = 0, the price at a node is minus the balance multiplier.
Profit and ratepayer are bilinear in (x, nu), so their gradients fill both
the x block and the nu block.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from gridplan.compile import ParametricQP
from gridplan.model import NetworkCase
from gridplan.solver import DispatchSolution

__all__ = [
    "UnresolvedDevice",
    "Objective",
    "cost",
    "emissions",
    "profit",
    "profit_for_owner",
    "ratepayer",
    "weighted",
    "eval_objective",
    "grad_objective",
    "lmp",
    "dispatch_breakdown",
]


class UnresolvedDevice(ValueError):
    """An objective references devices the case does not have."""


@dataclass(frozen=True)
class Objective:
    """Immutable planner objective description.

    ``gens`` and ``loads`` are device indices into the case lists; ``parts``
    holds (objective, weight) pairs for the weighted combination.
    """

    kind: str
    w: float = 0.0
    gens: tuple[int, ...] = ()
    loads: tuple[int, ...] = ()
    parts: tuple[tuple["Objective", float], ...] = ()

    def validate(self, case: NetworkCase) -> None:
        if self.kind == "emissions" and self.w < 0:
            raise UnresolvedDevice(f"emissions price must be >= 0, got {self.w}")
        if self.kind == "profit":
            if not self.gens:
                raise UnresolvedDevice("profit objective needs a nonempty generator set")
            for j in self.gens:
                if not 0 <= j < len(case.generators):
                    raise UnresolvedDevice(f"profit references missing generator {j}")
        if self.kind == "ratepayer":
            if not self.loads:
                raise UnresolvedDevice("ratepayer objective needs a nonempty load set")
            for j in self.loads:
                if not 0 <= j < len(case.loads):
                    raise UnresolvedDevice(f"ratepayer references missing load {j}")
        for part, _ in self.parts:
            part.validate(case)


def cost() -> Objective:
    return Objective(kind="cost")


def emissions(w: float) -> Objective:
    return Objective(kind="emissions", w=float(w))


def profit(gens) -> Objective:
    return Objective(kind="profit", gens=tuple(sorted(set(int(j) for j in gens))))


def profit_for_owner(case: NetworkCase, owner: str) -> Objective:
    gens = [j for j, g in enumerate(case.generators) if g.owner == owner]
    if not gens:
        raise UnresolvedDevice(f"no generator has owner {owner!r}")
    return profit(gens)


def ratepayer(loads=None, case: NetworkCase | None = None) -> Objective:
    if loads is None:
        if case is None:
            raise UnresolvedDevice("ratepayer needs a load set or a case to take all loads from")
        loads = range(len(case.loads))
    return Objective(kind="ratepayer", loads=tuple(sorted(set(int(j) for j in loads))))


def weighted(parts) -> Objective:
    frozen = tuple((obj, float(wt)) for obj, wt in parts)
    return Objective(kind="weighted", parts=frozen)


def lmp(pqp: ParametricQP, sol: DispatchSolution) -> np.ndarray:
    """Locational marginal prices, shaped [horizon, node]."""
    return -sol.nu[pqp.balance_rows]


def _gen_columns(case: NetworkCase, pqp: ParametricQP, gens) -> tuple[np.ndarray, np.ndarray]:
    """g columns and balance rows for the given generators, shaped [T, |gens|]."""
    nodes = np.array([case.generators[j].node for j in gens], dtype=int)
    return pqp.var_index.g[:, nodes], pqp.balance_rows[:, nodes]


def eval_objective(obj: Objective, case: NetworkCase, pqp: ParametricQP,
                   sol: DispatchSolution) -> float:
    """Value of h at the dispatch outcome (curtailment constant excluded)."""
    obj.validate(case)
    x, nu = sol.x, sol.nu
    if obj.kind == "cost":
        return float(pqp.q @ x + x @ (pqp.Qdiag * x))
    if obj.kind == "emissions":
        rates = np.array([g.emissions_rate for g in case.generators])
        cols = pqp.var_index.g[:, [g.node for g in case.generators]]
        total = float(np.sum(x[cols] * rates[None, :]))
        return eval_objective(cost(), case, pqp, sol) + obj.w * total
    if obj.kind == "profit":
        cols, rows = _gen_columns(case, pqp, obj.gens)
        costs = np.array([case.generators[j].marginal_cost for j in obj.gens])
        # price = -nu at the balance row; negated net revenue = (nu + c) g
        return float(np.sum((nu[rows] + costs[None, :]) * x[cols]))
    if obj.kind == "ratepayer":
        nodes = sorted({case.loads[j].node for j in obj.loads})
        p_cols = pqp.var_index.p[:, nodes]
        rows = pqp.balance_rows[:, nodes]
        # payments at price -nu
        return float(-np.sum(nu[rows] * x[p_cols]))
    if obj.kind == "weighted":
        return float(sum(wt * eval_objective(part, case, pqp, sol)
                         for part, wt in obj.parts))
    raise UnresolvedDevice(f"unknown objective kind {obj.kind!r}")


def grad_objective(obj: Objective, case: NetworkCase, pqp: ParametricQP,
                   sol: DispatchSolution) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradient of h with respect to (x, lam, nu), as three dense blocks."""
    obj.validate(case)
    x, nu = sol.x, sol.nu
    gx = np.zeros(pqp.n)
    glam = np.zeros(pqp.m)
    gnu = np.zeros(pqp.n_eq)
    if obj.kind == "cost":
        gx += pqp.q + 2.0 * pqp.Qdiag * x
    elif obj.kind == "emissions":
        gx += pqp.q + 2.0 * pqp.Qdiag * x
        for j, gen in enumerate(case.generators):
            gx[pqp.var_index.g[:, gen.node]] += obj.w * gen.emissions_rate
    elif obj.kind == "profit":
        cols, rows = _gen_columns(case, pqp, obj.gens)
        costs = np.array([case.generators[j].marginal_cost for j in obj.gens])
        np.add.at(gx, cols, nu[rows] + costs[None, :])
        np.add.at(gnu, rows, x[cols])
    elif obj.kind == "ratepayer":
        nodes = sorted({case.loads[j].node for j in obj.loads})
        p_cols = pqp.var_index.p[:, nodes]
        rows = pqp.balance_rows[:, nodes]
        np.add.at(gx, p_cols, -nu[rows])
        np.add.at(gnu, rows, -x[p_cols])
    elif obj.kind == "weighted":
        for part, wt in obj.parts:
            part_gx, part_glam, part_gnu = grad_objective(part, case, pqp, sol)
            gx += wt * part_gx
            glam += wt * part_glam
            gnu += wt * part_gnu
    else:
        raise UnresolvedDevice(f"unknown objective kind {obj.kind!r}")
    return gx, glam, gnu


def dispatch_breakdown(case: NetworkCase, pqp: ParametricQP,
                       sol: DispatchSolution) -> dict[str, float]:
    """Reporting helper: the pieces a dispatch cost is made of."""
    x = sol.x
    idx = pqp.var_index
    fuel = 0.0
    emitted = 0.0
    for gen in case.generators:
        output = float(np.sum(x[idx.g[:, gen.node]]))
        fuel += gen.marginal_cost * output
        emitted += gen.emissions_rate * output
    served = float(np.sum(x[idx.p]))
    total_demand = pqp.offset / case.curtailment_cost if case.curtailment_cost > 0 else 0.0
    reg = float(x @ (pqp.Qdiag * x))
    return {
        "fuel_cost": fuel,
        "emissions": emitted,
        "served": served,
        "unserved": max(total_demand - served, 0.0),
        "curtailment_penalty": case.curtailment_cost * max(total_demand - served, 0.0),
        "regularization": reg,
        "dispatch_cost": sol.value,
    }
