"""Projected gradient descent over the investment box.

The planner minimizes J(eta) = gamma' eta + sum_s w_s h_s(eta) by stepping
against the implicit gradient and clamping back into the box after every
step.  A stochastic variant estimates the gradient from scenario batches.
Binary investments are handled afterwards by probabilistic rounding of the
continuous solution.
"""

from __future__ import annotations

import csv
import math
import time
from collections.abc import Sequence
from concurrent.futures import Executor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .compile import ParametricQP, compile_dynamic, instantiate
from .model import InvalidOptions, NetworkCase, ParamSpace, investment_space
from .objectives import Objective, cost, emissions, eval_objective
from .sensitivity import SingularKKT, grad_J
from .solver import DispatchSolution, SolverError, SolverSettings, solve_qp


class SolverFailure(RuntimeError):
    """A dispatch solve failed inside a planner iteration.

    ``trace`` holds the rows logged before the failure so callers can flush
    partial progress to disk.
    """

    trace: tuple = ()


_PERTURB = 1e-8  # relative nudge used to step off a nonsmooth point


@dataclass(eq=False)
class PlanOptions:
    """Knobs for the descent loop.

    ``init`` selects the starting point: "random" draws ``multistart_k``
    uniform samples and keeps the best, "relaxation" warm-starts from the
    convex lower-bound program, "given" uses ``init_eta`` as is.  When
    ``lower_bound`` is provided (or produced by the relaxation init), the
    run also stops once the suboptimality gap falls below ``gap_target``.
    """

    step: float = 1e-3
    max_iters: int = 2000
    batch_size: int | None = None
    stationarity_tol: float = 1e-6
    gap_target: float = 0.10
    lower_bound: float | None = None
    seed: int = 0
    multistart_k: int = 1
    init: str = "random"
    init_eta: np.ndarray | None = None
    trace_every: int = 1
    batch_mode: str = "epoch"
    solver: SolverSettings | None = None

    def __post_init__(self) -> None:
        if not self.step > 0:
            raise InvalidOptions("step must be positive")
        if self.max_iters < 0:
            raise InvalidOptions("max_iters must be nonnegative")
        if self.batch_size is not None and self.batch_size < 1:
            raise InvalidOptions("batch_size must be at least 1")
        if self.stationarity_tol < 0:
            raise InvalidOptions("stationarity_tol must be nonnegative")
        if not self.gap_target > 0:
            raise InvalidOptions("gap_target must be positive")
        if self.trace_every < 1:
            raise InvalidOptions("trace_every must be at least 1")
        if self.multistart_k < 1:
            raise InvalidOptions("multistart_k must be at least 1")
        if self.init not in ("random", "relaxation", "given"):
            raise InvalidOptions(f"unknown init strategy {self.init!r}")
        if self.init == "given" and self.init_eta is None:
            raise InvalidOptions("init='given' requires init_eta")
        if self.batch_mode not in ("epoch", "sample"):
            raise InvalidOptions(f"unknown batch_mode {self.batch_mode!r}")


class TracePoint(NamedTuple):
    iteration: int
    j_batch: float
    j_full: float | None
    stationarity: float
    wall_ms: float


@dataclass
class PlanResult:
    """Outcome of one planner run.

    ``value`` is always the full-scenario objective at ``eta``; trace rows
    with a ``j_full`` entry likewise report the true objective, while
    ``j_batch`` may be a batch estimate during stochastic descent.
    """

    eta: np.ndarray
    value: float
    stop_reason: str  # "stationary" | "gap_reached" | "max_iters"
    trace: list[TracePoint] = field(default_factory=list)
    lower_bound: float | None = None
    subopt_gap: float | None = None

    @property
    def iterations(self) -> int:
        return self.trace[-1].iteration if self.trace else 0

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["iter", "J_batch", "J_full", "stationarity",
                             "wall_ms"])
            for row in self.trace:
                writer.writerow([
                    row.iteration, repr(float(row.j_batch)),
                    "" if row.j_full is None else repr(float(row.j_full)),
                    repr(float(row.stationarity)), f"{row.wall_ms:.3f}"])

    def to_dict(self) -> dict:
        return {
            "eta": [float(v) for v in self.eta],
            "value": self.value,
            "stop_reason": self.stop_reason,
            "iterations": self.iterations,
            "lower_bound": self.lower_bound,
            "subopt_gap": self.subopt_gap,
        }


def project_box(eta: np.ndarray, space: ParamSpace) -> np.ndarray:
    """Coordinatewise clamp to [eta_min, eta_max]."""
    return np.clip(np.asarray(eta, dtype=float), space.eta_min, space.eta_max)


def stationarity(eta: np.ndarray, grad: np.ndarray, alpha: float,
                 space: ParamSpace) -> float:
    """Norm of the projected-gradient step, zero exactly at fixed points.

    Unlike the raw gradient norm this goes to zero on the boundary when the
    descent direction points out of the box.
    """
    if not alpha > 0:
        raise InvalidOptions("alpha must be positive")
    eta = np.asarray(eta, dtype=float)
    return float(np.linalg.norm(eta - project_box(eta - alpha * grad, space)))


def _scenario_pqps(case: NetworkCase, pqps) -> list[ParametricQP]:
    if pqps is not None:
        return list(pqps)
    return [compile_dynamic(case, s) for s in range(case.scenario_count())]


def _solved(pqps: Sequence[ParametricQP], eta: np.ndarray,
            settings: SolverSettings | None, executor: Executor | None,
            scenarios: Sequence[int],
            have: Sequence[DispatchSolution | None] | None = None,
            ) -> list[DispatchSolution | None]:
    need = [s for s in scenarios if have is None or have[s] is None]

    def one(s: int) -> DispatchSolution:
        return solve_qp(instantiate(pqps[s], eta), settings)

    if executor is None:
        fresh = [one(s) for s in need]
    else:
        fresh = list(executor.map(one, need))
    out = list(have) if have is not None else [None] * len(pqps)
    for s, sol in zip(need, fresh):
        out[s] = sol
    return out


def _value(case: NetworkCase, objective: Objective, eta: np.ndarray,
           pqps: Sequence[ParametricQP],
           sols: Sequence[DispatchSolution | None],
           scenarios: Sequence[int], scale: float) -> float:
    weights = case.scenario_weights()
    space = pqps[0].param_space
    total = float(space.gamma @ eta)
    for s in scenarios:
        total += (scale * weights[s]) * eval_objective(
            objective, case, pqps[s], sols[s])
    return float(total)


def _eval_and_grad(case, objective, eta, pqps, settings, executor, rng,
                   space, scenarios, scale, iteration):
    # one perturb-and-retry on a singular KKT system; these live on
    # measure-zero active-set boundaries, so a nudge almost surely clears them
    for attempt in range(2):
        try:
            sols = _solved(pqps, eta, settings, executor, scenarios)
            value = _value(case, objective, eta, pqps, sols, scenarios, scale)
            grad = grad_J(case, objective, eta, solutions=sols, pqps=pqps,
                          settings=settings, executor=executor,
                          scenarios=scenarios, weight_scale=scale)
            return eta, value, sols, grad
        except SingularKKT as exc:
            if attempt:
                raise SingularKKT(f"iteration {iteration}: {exc}") from exc
            span = space.eta_max - space.eta_min
            eta = project_box(
                eta + _PERTURB * span * rng.uniform(-1.0, 1.0, space.size),
                space)
        except SolverError as exc:
            raise SolverFailure(f"iteration {iteration}: {exc}") from exc


def _gap_against(value: float, bound: float | None) -> float | None:
    if bound is None:
        return None
    from .relax import NonpositiveBound, subopt_gap

    try:
        return subopt_gap(value, bound)
    except NonpositiveBound:
        return None


def init_random(case: NetworkCase, objective: Objective, k: int, seed: int,
                pqps: Sequence[ParametricQP] | None = None,
                settings: SolverSettings | None = None,
                executor: Executor | None = None) -> np.ndarray:
    """Best of k uniform samples from the box, judged by the full objective."""
    if k < 1:
        raise InvalidOptions("k must be at least 1")
    pqps = _scenario_pqps(case, pqps)
    space = pqps[0].param_space
    rng = np.random.default_rng([seed, 0])
    span = space.eta_max - space.eta_min
    everything = list(range(len(pqps)))
    best_eta, best_val = None, math.inf
    for _ in range(k):
        eta = space.eta_min + rng.uniform(0.0, 1.0, space.size) * span
        sols = _solved(pqps, eta, settings, executor, everything)
        val = _value(case, objective, eta, pqps, sols, everything, 1.0)
        if val < best_val:
            best_eta, best_val = eta, val
    return best_eta


def _initial_eta(case, objective, opts: PlanOptions, space: ParamSpace,
                 pqps, executor) -> tuple[np.ndarray, float | None]:
    bound = opts.lower_bound
    if opts.init == "given":
        eta0 = np.asarray(opts.init_eta, dtype=float)
        if eta0.shape != (space.size,):
            raise InvalidOptions(
                f"init_eta has shape {eta0.shape}, expected ({space.size},)")
        return project_box(eta0, space), bound
    if opts.init == "relaxation":
        from .relax import lower_bound

        result = lower_bound(case, objective)
        if bound is None:
            bound = result.value
        return project_box(result.eta, space), bound
    eta0 = init_random(case, objective, opts.multistart_k, opts.seed,
                       pqps=pqps, settings=opts.solver, executor=executor)
    return eta0, bound


def projected_gd(case: NetworkCase, objective: Objective,
                 opts: PlanOptions | None = None,
                 pqps: Sequence[ParametricQP] | None = None,
                 executor: Executor | None = None) -> PlanResult:
    """Full-gradient descent with box projection.

    Stops on the first of: stationarity below tolerance, suboptimality gap
    below target (when a lower bound is known), or the iteration limit.
    Every iterate stays inside the box and the whole run is deterministic
    for a fixed seed.
    """
    opts = opts if opts is not None else PlanOptions()
    objective.validate(case)
    pqps = _scenario_pqps(case, pqps)
    space = pqps[0].param_space
    everything = list(range(len(pqps)))
    rng = np.random.default_rng([opts.seed, 3])
    eta, bound = _initial_eta(case, objective, opts, space, pqps, executor)
    started = time.perf_counter()
    trace: list[TracePoint] = []
    value = math.nan
    stop = "max_iters"
    try:
        for i in range(opts.max_iters + 1):
            eta, value, _, grad = _eval_and_grad(
                case, objective, eta, pqps, opts.solver, executor, rng, space,
                everything, 1.0, i)
            stat = stationarity(eta, grad, opts.step, space)
            reason = None
            if stat <= opts.stationarity_tol:
                reason = "stationary"
            elif (gap := _gap_against(value, bound)) is not None \
                    and gap <= opts.gap_target:
                reason = "gap_reached"
            elif i == opts.max_iters:
                reason = "max_iters"
            if reason is not None or i % opts.trace_every == 0:
                wall = (time.perf_counter() - started) * 1e3
                trace.append(TracePoint(i, value, value, stat, wall))
            if reason is not None:
                stop = reason
                break
            eta = project_box(eta - opts.step * grad, space)
    except SolverFailure as exc:
        exc.trace = tuple(trace)
        raise
    return PlanResult(eta=eta.copy(), value=value, stop_reason=stop,
                      trace=trace, lower_bound=bound,
                      subopt_gap=_gap_against(value, bound))


def _epoch_batches(rng: np.random.Generator, count: int,
                   size: int) -> list[list[int]]:
    perm = rng.permutation(count)
    return [sorted(int(s) for s in perm[j:j + size])
            for j in range(0, count, size)]


def stochastic_gd(case: NetworkCase, objective: Objective,
                  opts: PlanOptions | None = None,
                  pqps: Sequence[ParametricQP] | None = None,
                  executor: Executor | None = None) -> PlanResult:
    """Batched descent: each step uses batch_size scenarios.

    In "epoch" mode the scenario set is randomly partitioned once per epoch
    and the batches consumed in order, so every scenario is visited exactly
    once per epoch; "sample" mode draws a fresh uniform batch every
    iteration.  Batch weights are rescaled by S/R, which keeps the gradient
    estimator unbiased.  The true objective and the stopping tests run every
    ``trace_every`` iterations; in between, the trace carries the batch
    estimate and only the iteration limit applies.
    """
    opts = opts if opts is not None else PlanOptions()
    objective.validate(case)
    pqps = _scenario_pqps(case, pqps)
    count = len(pqps)
    if count < 2:
        raise InvalidOptions("stochastic descent needs at least 2 scenarios")
    if opts.batch_size is None:
        raise InvalidOptions("stochastic descent requires batch_size")
    if opts.batch_size > count:
        raise InvalidOptions(
            f"batch_size {opts.batch_size} exceeds scenario count {count}")
    space = pqps[0].param_space
    everything = list(range(count))
    rng_batch = np.random.default_rng([opts.seed, 1])
    rng_perturb = np.random.default_rng([opts.seed, 3])
    eta, bound = _initial_eta(case, objective, opts, space, pqps, executor)
    started = time.perf_counter()
    trace: list[TracePoint] = []
    queue: list[list[int]] = []
    value = math.nan
    stop = "max_iters"
    try:
        for i in range(opts.max_iters + 1):
            if opts.batch_mode == "sample":
                batch = sorted(int(s) for s in rng_batch.choice(
                    count, size=opts.batch_size, replace=False))
            else:
                if not queue:
                    queue = _epoch_batches(rng_batch, count, opts.batch_size)
                batch = queue.pop(0)
            scale = count / len(batch)
            eta, j_batch, sols, grad = _eval_and_grad(
                case, objective, eta, pqps, opts.solver, executor, rng_perturb,
                space, batch, scale, i)
            if i % opts.trace_every == 0 or i == opts.max_iters:
                full_sols = _solved(pqps, eta, opts.solver, executor,
                                    everything, have=sols)
                value = _value(case, objective, eta, pqps, full_sols,
                               everything, 1.0)
                full_grad = grad_J(case, objective, eta, solutions=full_sols,
                                   pqps=pqps, settings=opts.solver,
                                   executor=executor)
                stat = stationarity(eta, full_grad, opts.step, space)
                reason = None
                if stat <= opts.stationarity_tol:
                    reason = "stationary"
                elif (gap := _gap_against(value, bound)) is not None \
                        and gap <= opts.gap_target:
                    reason = "gap_reached"
                elif i == opts.max_iters:
                    reason = "max_iters"
                wall = (time.perf_counter() - started) * 1e3
                trace.append(TracePoint(i, j_batch, value, stat, wall))
                if reason is not None:
                    stop = reason
                    break
            else:
                stat = stationarity(eta, grad, opts.step, space)
                wall = (time.perf_counter() - started) * 1e3
                trace.append(TracePoint(i, j_batch, None, stat, wall))
            eta = project_box(eta - opts.step * grad, space)
    except SolverFailure as exc:
        exc.trace = tuple(trace)
        raise
    return PlanResult(eta=eta.copy(), value=value, stop_reason=stop,
                      trace=trace, lower_bound=bound,
                      subopt_gap=_gap_against(value, bound))


def round_integer(case: NetworkCase, objective: Objective,
                  eta_cont: np.ndarray, rounds: int = 25, seed: int = 0,
                  pqps: Sequence[ParametricQP] | None = None,
                  settings: SolverSettings | None = None,
                  executor: Executor | None = None) -> PlanResult:
    """Probabilistic rounding of binary coordinates.

    Each binary coordinate lands on eta_max with probability equal to its
    relative position in [eta_min, eta_max], independently per candidate.
    Duplicates are evaluated once; the best candidate under the full
    objective wins.  Continuous coordinates pass through untouched.
    """
    if rounds < 1:
        raise InvalidOptions("rounds must be at least 1")
    pqps = _scenario_pqps(case, pqps)
    space = pqps[0].param_space
    if not np.any(space.binary):
        raise InvalidOptions("case has no binary investment to round")
    eta_cont = project_box(np.asarray(eta_cont, dtype=float), space)
    span = space.eta_max - space.eta_min
    mask = space.binary & (span > 0)
    prob = np.zeros(space.size)
    prob[mask] = (eta_cont[mask] - space.eta_min[mask]) / span[mask]
    rng = np.random.default_rng([seed, 2])
    everything = list(range(len(pqps)))
    started = time.perf_counter()
    seen: set[bytes] = set()
    trace: list[TracePoint] = []
    best_eta, best_val = None, math.inf
    for r in range(rounds):
        draw = rng.uniform(0.0, 1.0, space.size)
        cand = eta_cont.copy()
        cand[mask] = np.where(draw[mask] < prob[mask],
                              space.eta_max[mask], space.eta_min[mask])
        key = cand.tobytes()
        if key in seen:
            continue
        seen.add(key)
        sols = _solved(pqps, cand, settings, executor, everything)
        val = _value(case, objective, cand, pqps, sols, everything, 1.0)
        wall = (time.perf_counter() - started) * 1e3
        trace.append(TracePoint(r, val, val, math.nan, wall))
        if val < best_val:
            best_eta, best_val = cand, val
    return PlanResult(eta=best_eta, value=best_val, stop_reason="max_iters",
                      trace=trace)


@dataclass(frozen=True)
class ParetoPoint:
    weight: float
    cost: float
    emissions: float
    eta: np.ndarray
    result: PlanResult


def pareto_sweep(case: NetworkCase, weights: Sequence[float],
                 opts: PlanOptions | None = None,
                 executor: Executor | None = None) -> list[ParetoPoint]:
    """One plan per emissions weight, reporting cost and physical emissions.

    The w = 0 entry is the plain cost plan.  Physical emissions are the
    scenario-weighted e'g of the final dispatch, recovered exactly as the
    difference between the w = 1 and w = 0 dispatch objectives.
    """
    if any(w < 0 for w in weights):
        raise InvalidOptions("emissions weights must be nonnegative")
    opts = opts if opts is not None else PlanOptions()
    pqps = _scenario_pqps(case, None)
    everything = list(range(len(pqps)))
    points = []
    for w in weights:
        objective = cost() if w == 0 else emissions(float(w))
        result = projected_gd(case, objective, opts, pqps=pqps,
                              executor=executor)
        sols = _solved(pqps, result.eta, opts.solver, executor, everything)
        plain = _value(case, cost(), result.eta, pqps, sols, everything, 1.0)
        with_rate = _value(case, emissions(1.0), result.eta, pqps, sols,
                           everything, 1.0)
        points.append(ParetoPoint(weight=float(w), cost=plain,
                                  emissions=with_rate - plain,
                                  eta=result.eta, result=result))
    return points
