"""Command-line front end: case I/O, planning runs, and experiment sweeps.

Each command writes machine-readable JSON or CSV under ``--out`` (validate
prints its JSON to stdout) and, where a figure is natural, a PNG next to the
delimited output unless ``--no-figures`` is passed.  A ``--config`` file
mirrors the flags: JSON keys are flag names, explicitly passed flags win.

Exit codes: 0 success, 2 infeasible model, 3 unusable input, 1 solver
breakdown mid-run.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path
from typing import Sequence

import numpy as np

from gridplan import __version__
from gridplan.compile import CompileError, compile_dynamic, instantiate
from gridplan.model import (
    GenOptions,
    InvalidOptions,
    NetworkCase,
    ParamSpace,
    ParseError,
    ValidationError,
    gen_synthetic,
    investment_space,
    load_case,
    make_garver_case,
    serialize_case,
    validate_case,
)
from gridplan.objectives import (
    Objective,
    UnresolvedDevice,
    cost,
    emissions,
    eval_objective,
    lmp,
    profit,
    profit_for_owner,
    ratepayer,
)
from gridplan.plan import (
    PlanOptions,
    SolverFailure,
    pareto_sweep,
    projected_gd,
    round_integer,
    stochastic_gd,
)
from gridplan.relax import (
    MissingBounds,
    NonpositiveBound,
    RelaxationInfeasible,
    TooManyBinaries,
    UnsupportedObjective,
    default_delta,
    lower_bound,
    subopt_gap,
)
from gridplan.sensitivity import SingularKKT
from gridplan.solver import (
    Infeasible,
    SolverError,
    SolverSettings,
    check_regularity,
    solve_qp,
)

SCHEMA_VERSION = 1
EXIT_INFEASIBLE = 2
EXIT_USAGE = 3

BUILTIN_CASES = {
    "garver": lambda: make_garver_case(),
    "garver-continuous": lambda: make_garver_case(line_kind="continuous"),
}


class CliError(Exception):
    """Unusable input; the message goes to stderr and the run exits 3."""


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags; route through CliError so every input
    # problem lands on the documented exit code instead
    def error(self, message):
        raise CliError(message)


# ---------------------------------------------------------------- inputs


def resolve_case(ref: str) -> NetworkCase:
    if ref in BUILTIN_CASES:
        return BUILTIN_CASES[ref]()
    path = Path(ref)
    if not path.exists():
        names = ", ".join(sorted(BUILTIN_CASES))
        raise CliError(
            f"case {ref!r} is neither a builtin ({names}) nor an existing file")
    try:
        return load_case(path.read_text())
    except OSError as exc:
        raise CliError(f"{ref}: {exc}") from exc
    except (ParseError, ValidationError) as exc:
        raise CliError(f"{ref}: {exc}") from exc


def _objective_params(text: str) -> dict[str, list[str]]:
    # commas separate key=value pairs; a bare token extends the previous
    # key's list, so gens=0,2 reads as gens=[0, 2]
    out: dict[str, list[str]] = {}
    key = None
    for token in text.split(","):
        token = token.strip()
        if not token:
            continue
        if "=" in token:
            key, _, head = token.partition("=")
            key = key.strip()
            out.setdefault(key, []).append(head.strip())
        elif key is None:
            raise CliError(f"objective parameter {token!r} lacks a key")
        else:
            out[key].append(token)
    return out


def parse_objective(spec: str, case: NetworkCase) -> Objective:
    """Build an objective from kind[:key=value,...] notation."""
    kind, _, rest = spec.partition(":")
    kind = kind.strip()
    params = _objective_params(rest)
    allowed = {"cost": set(), "emissions": {"w"}, "profit": {"gens", "owner"},
               "ratepayer": {"loads"}}
    if kind not in allowed:
        raise CliError(f"unknown objective kind {kind!r} "
                       "(choose cost, emissions, profit, or ratepayer)")
    stray = set(params) - allowed[kind]
    if stray:
        raise CliError(f"objective {kind!r} does not take "
                       f"{', '.join(sorted(stray))}")
    try:
        if kind == "cost":
            return cost()
        if kind == "emissions":
            if "w" not in params:
                raise CliError("emissions needs a weight, e.g. emissions:w=400")
            return emissions(float(params["w"][0]))
        if kind == "profit":
            if "owner" in params:
                return profit_for_owner(case, params["owner"][0])
            if "gens" in params:
                return profit(int(v) for v in params["gens"])
            return profit(range(len(case.generators)))
        loads = [int(v) for v in params["loads"]] if "loads" in params else None
        return ratepayer(loads, case=case)
    except (ValueError, UnresolvedDevice) as exc:
        raise CliError(f"objective {spec!r}: {exc}") from exc


def describe_objective(obj: Objective) -> dict:
    doc: dict = {"kind": obj.kind}
    if obj.kind == "emissions":
        doc["w"] = obj.w
    if obj.gens:
        doc["gens"] = list(obj.gens)
    if obj.loads:
        doc["loads"] = list(obj.loads)
    if obj.parts:
        doc["parts"] = [[describe_objective(part), wt]
                        for part, wt in obj.parts]
    return doc


def _eta_from_document(ref: str, doc) -> tuple[list, float | None]:
    if isinstance(doc, dict):
        if "eta" not in doc:
            raise CliError(f"{ref}: JSON has no 'eta' field")
        value = doc.get("value")
        return doc["eta"], float(value) if isinstance(value, (int, float)) else None
    if isinstance(doc, list):
        return doc, None
    raise CliError(f"{ref}: expected a JSON object or array")


def parse_eta(ref, space: ParamSpace) -> np.ndarray:
    eta, _ = parse_eta_with_value(ref, space)
    return eta


def parse_eta_with_value(ref, space: ParamSpace) -> tuple[np.ndarray, float | None]:
    """Read an investment vector from a name, a file, or inline numbers.

    Names min/mid/max pick box corners or the midpoint.  A path may hold a
    bare JSON array or any command output with an ``eta`` field; a plan or
    round document also yields its ``value`` for downstream reporting.
    """
    value = None
    if isinstance(ref, (list, tuple)):
        eta = np.asarray([float(v) for v in ref], dtype=float)
    elif ref == "min":
        eta = space.eta_min.copy()
    elif ref == "max":
        eta = space.eta_max.copy()
    elif ref == "mid":
        eta = 0.5 * (space.eta_min + space.eta_max)
    elif Path(ref).exists():
        try:
            doc = json.loads(Path(ref).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"{ref}: {exc}") from exc
        raw, value = _eta_from_document(ref, doc)
        eta = np.asarray([float(v) for v in raw], dtype=float)
    else:
        try:
            eta = np.asarray([float(tok) for tok in str(ref).split(",")],
                             dtype=float)
        except ValueError:
            raise CliError(
                f"eta {ref!r} is not min/mid/max, a readable file, "
                "or comma-separated numbers") from None
    if eta.shape != (space.size,):
        raise CliError(f"eta has {eta.shape[0]} entries, case has "
                       f"{space.size} investment slots")
    if not space.contains(eta):
        raise CliError("eta lies outside the investment box")
    return eta, value


def _int_list(value, flag: str) -> list[int]:
    items = value if isinstance(value, (list, tuple)) else str(value).split(",")
    try:
        out = [int(v) for v in items if str(v).strip() != ""]
    except (TypeError, ValueError):
        raise CliError(f"{flag} wants comma-separated integers, got {value!r}") \
            from None
    if not out:
        raise CliError(f"{flag} is empty")
    return out


def _float_list(value, flag: str) -> list[float]:
    items = value if isinstance(value, (list, tuple)) else str(value).split(",")
    try:
        out = [float(v) for v in items if str(v).strip() != ""]
    except (TypeError, ValueError):
        raise CliError(f"{flag} wants comma-separated numbers, got {value!r}") \
            from None
    if not out:
        raise CliError(f"{flag} is empty")
    return out


def thread_count(args) -> int:
    requested = getattr(args, "threads", None)
    if requested is not None:
        if requested < 1:
            raise CliError("--threads must be at least 1")
        return requested
    env = os.environ.get("GRIDPLAN_THREADS", "").strip()
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise CliError(f"GRIDPLAN_THREADS={env!r} is not an integer") \
                from None
    return 1


@contextmanager
def worker_pool(count: int):
    if count <= 1:
        yield None
        return
    pool = ThreadPoolExecutor(max_workers=count)
    try:
        yield pool
    finally:
        pool.shutdown()


# ---------------------------------------------------------------- outputs


def _jsonable(value):
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (np.floating, float)):
        v = float(value)
        return v if math.isfinite(v) else repr(v)
    if isinstance(value, (np.integer, int)):
        return int(value)
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    return value


def write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(_jsonable(doc), indent=2, allow_nan=False) + "\n")


def ensure_out(args) -> Path:
    path = Path(args.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_trace(path: Path, trace) -> None:
    with path.open("w", newline="") as fh:
        rows = csv.writer(fh)
        rows.writerow(["iteration", "j_batch", "j_full", "stationarity",
                       "wall_ms"])
        for pt in trace:
            rows.writerow([pt.iteration, repr(pt.j_batch),
                           "" if pt.j_full is None else repr(pt.j_full),
                           repr(pt.stationarity), f"{pt.wall_ms:.3f}"])


def plan_value(case: NetworkCase, objective: Objective, eta: np.ndarray,
               pqps, settings=None, executor=None) -> float:
    """gamma'eta plus the scenario-weighted dispatch outcome at eta."""
    weights = case.scenario_weights()

    def one(pqp):
        return solve_qp(instantiate(pqp, eta), settings)

    sols = [one(p) for p in pqps] if executor is None \
        else list(executor.map(one, pqps))
    total = float(pqps[0].param_space.gamma @ eta)
    for w, pqp, sol in zip(weights, pqps, sols):
        total += w * eval_objective(objective, case, pqp, sol)
    return total


# ---------------------------------------------------------------- figures


def _agg_pyplot():
    import matplotlib

    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt

    return plt


def figure_dispatch(out: Path, case: NetworkCase, prices: np.ndarray,
                    flows: np.ndarray) -> Path:
    plt = _agg_pyplot()
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(9.0, 3.4))
    ax0.bar(np.arange(case.nodes), prices[0], color="tab:blue")
    ax0.set_xlabel("node")
    ax0.set_ylabel("LMP")
    ax0.set_title("prices, first period")
    if flows.shape[1]:
        labels = [f"{ln.from_node}-{ln.to_node}" for ln in case.lines]
        ax1.bar(np.arange(len(labels)), flows[0], color="tab:orange")
        ax1.set_xticks(np.arange(len(labels)))
        ax1.set_xticklabels(labels, rotation=90, fontsize=7)
    ax1.set_xlabel("line")
    ax1.set_ylabel("flow")
    ax1.set_title("flows, first period")
    fig.tight_layout()
    target = out / "dispatch.png"
    fig.savefig(target, dpi=150)
    plt.close(fig)
    return target


def figure_convergence(out: Path, trace) -> Path:
    plt = _agg_pyplot()
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(9.0, 3.4))
    iters = [pt.iteration for pt in trace]
    ax0.plot(iters, [pt.j_batch for pt in trace], ".", ms=3,
             color="tab:gray", label="batch")
    full = [(pt.iteration, pt.j_full) for pt in trace if pt.j_full is not None]
    if full:
        ax0.plot(*zip(*full), color="tab:blue", label="full")
    ax0.set_xlabel("iteration")
    ax0.set_ylabel("objective")
    ax0.legend(fontsize=8)
    stat = [(pt.iteration, pt.stationarity) for pt in trace
            if math.isfinite(pt.stationarity) and pt.stationarity > 0]
    if stat:
        ax1.semilogy(*zip(*stat), color="tab:red")
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("stationarity")
    fig.tight_layout()
    target = out / "convergence.png"
    fig.savefig(target, dpi=150)
    plt.close(fig)
    return target


def figure_pareto(out: Path, points) -> Path:
    plt = _agg_pyplot()
    fig, ax = plt.subplots(figsize=(5.2, 3.8))
    ax.plot([p.cost for p in points], [p.emissions for p in points],
            "o-", color="tab:green")
    for p in points:
        ax.annotate(f"w={p.weight:g}", (p.cost, p.emissions), fontsize=7,
                    xytext=(4, 4), textcoords="offset points")
    ax.set_xlabel("dispatch + investment cost")
    ax.set_ylabel("emissions")
    fig.tight_layout()
    target = out / "pareto.png"
    fig.savefig(target, dpi=150)
    plt.close(fig)
    return target


def figure_scaling(out: Path, rows: list[dict]) -> Path:
    plt = _agg_pyplot()
    fig, ax = plt.subplots(figsize=(5.2, 3.8))
    ok = [r for r in rows if r["status"] == "ok"]
    combos = sorted({(r["scenarios"], r["threads"]) for r in ok})
    for S, th in combos:
        pts = sorted((r["n_nodes"], r["ms_per_iter"]) for r in ok
                     if r["scenarios"] == S and r["threads"] == th)
        if pts:
            ax.loglog(*zip(*pts), "o-", label=f"S={S}, threads={th}")
    ax.set_xlabel("nodes")
    ax.set_ylabel("ms per iteration")
    if combos:
        ax.legend(fontsize=8)
    fig.tight_layout()
    target = out / "scaling.png"
    fig.savefig(target, dpi=150)
    plt.close(fig)
    return target


# ---------------------------------------------------------------- commands


def cmd_dispatch(args) -> int:
    case = resolve_case(args.case)
    pqp = compile_dynamic(case, args.scenario)
    eta = parse_eta(args.eta, pqp.param_space)
    settings = SolverSettings()
    sol = solve_qp(instantiate(pqp, eta), settings)
    report = check_regularity(pqp, eta, sol=sol, settings=settings)
    prices = lmp(pqp, sol)
    flows = sol.x[pqp.var_index.f]
    binding = [{"row": pqp.ineq_labels[i], "multiplier": float(sol.lam[i])}
               for i in np.flatnonzero(sol.active)]
    out = ensure_out(args)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "command": "dispatch",
        "case": args.case,
        "scenario": args.scenario,
        "eta": eta,
        "objective": sol.value,
        "qp_value": sol.qp_value,
        "solver_iterations": sol.iterations,
        "lmp": prices,
        "flows": flows,
        "generation": sol.x[pqp.var_index.g],
        "served_load": sol.x[pqp.var_index.p],
        "binding": binding,
        "regularity": {
            "slater_margin": report.slater_margin,
            "licq_sigma_min": report.licq_sigma_min,
            "min_active_multiplier": report.min_active_multiplier,
            "weakly_active": list(report.weakly_active),
            "duality_gap": report.duality_gap,
            "strongly_convex": report.strongly_convex,
            "ok": report.ok,
            "notes": list(report.notes),
        },
    }
    write_json(out / "dispatch.json", doc)
    if not args.no_figures:
        figure_dispatch(out, case, prices, flows)
    print(f"dispatch: objective {sol.value:.6g}, {len(binding)} binding rows "
          f"-> {out / 'dispatch.json'}")
    return 0


def _descent_options(args, space: ParamSpace, batch: int | None) -> PlanOptions:
    init, init_eta = args.init, None
    if init == "relax":
        init = "relaxation"
    elif init != "random":
        init_eta = parse_eta(init, space)
        init = "given"
    return PlanOptions(
        step=args.step,
        max_iters=args.iters,
        batch_size=batch,
        stationarity_tol=args.stat_tol,
        gap_target=args.gap_target,
        lower_bound=getattr(args, "lower_bound", None),
        seed=args.seed,
        multistart_k=args.multistart,
        init=init,
        init_eta=init_eta,
        trace_every=args.trace_every,
        batch_mode=getattr(args, "batch_mode", "epoch"),
    )


def _options_doc(opts: PlanOptions, threads: int) -> dict:
    return {
        "step": opts.step,
        "max_iters": opts.max_iters,
        "batch_size": opts.batch_size,
        "batch_mode": opts.batch_mode,
        "stationarity_tol": opts.stationarity_tol,
        "gap_target": opts.gap_target,
        "seed": opts.seed,
        "multistart_k": opts.multistart_k,
        "init": opts.init,
        "trace_every": opts.trace_every,
        "threads": threads,
    }


def cmd_plan(args) -> int:
    case = resolve_case(args.case)
    objective = parse_objective(args.objective, case)
    space = investment_space(case)
    opts = _descent_options(args, space, args.batch)
    threads = thread_count(args)
    out = ensure_out(args)
    with worker_pool(threads) as pool:
        try:
            if opts.batch_size is not None:
                result = stochastic_gd(case, objective, opts, executor=pool)
            else:
                result = projected_gd(case, objective, opts, executor=pool)
        except SolverFailure as exc:
            write_trace(out / "trace.csv", exc.trace)
            raise
    write_trace(out / "trace.csv", result.trace)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "command": "plan",
        "case": args.case,
        "objective": describe_objective(objective),
        "options": _options_doc(opts, threads),
        "eta": result.eta,
        "value": result.value,
        "stop_reason": result.stop_reason,
        "lower_bound": result.lower_bound,
        "subopt_gap": result.subopt_gap,
        "iterations": result.trace[-1].iteration if result.trace else None,
        "wall_ms": result.trace[-1].wall_ms if result.trace else None,
    }
    write_json(out / "plan.json", doc)
    if not args.no_figures:
        figure_convergence(out, result.trace)
    gap = "" if result.subopt_gap is None else f", gap {result.subopt_gap:.2%}"
    print(f"plan: J {result.value:.6g} after {doc['iterations']} iterations "
          f"({result.stop_reason}{gap}) -> {out / 'plan.json'}")
    return 0


def cmd_pareto(args) -> int:
    case = resolve_case(args.case)
    weights = _float_list(args.weights, "--weights")
    space = investment_space(case)
    opts = _descent_options(args, space, None)
    threads = thread_count(args)
    out = ensure_out(args)
    with worker_pool(threads) as pool:
        points = pareto_sweep(case, weights, opts, executor=pool)
    with (out / "pareto.csv").open("w", newline="") as fh:
        rows = csv.writer(fh)
        rows.writerow(["weight", "cost", "emissions"])
        for p in points:
            rows.writerow([repr(p.weight), repr(p.cost), repr(p.emissions)])
    pqps = [compile_dynamic(case, s) for s in range(case.scenario_count())]
    shed_constant = float(case.scenario_weights()
                          @ np.array([p.offset for p in pqps]))
    doc = {
        "schema_version": SCHEMA_VERSION,
        "command": "pareto",
        "case": args.case,
        "weights": weights,
        "options": _options_doc(opts, threads),
        # cost columns share the planner convention: the constant cost of
        # shedding all demand is left out; add this to recover absolute cost
        "shed_constant": shed_constant,
        "points": [{
            "weight": p.weight,
            "cost": p.cost,
            "emissions": p.emissions,
            "value": p.result.value,
            "stop_reason": p.result.stop_reason,
            "eta": p.eta,
        } for p in points],
    }
    write_json(out / "pareto.json", doc)
    if not args.no_figures:
        figure_pareto(out, points)
    print(f"pareto: {len(points)} weights -> {out / 'pareto.csv'}")
    return 0


def cmd_relax(args) -> int:
    case = resolve_case(args.case)
    objective = parse_objective(args.objective, case)
    threads = thread_count(args)
    out = ensure_out(args)
    with worker_pool(threads) as pool:
        delta = args.delta if args.delta is not None \
            else default_delta(case, settings=None)
        result = lower_bound(case, objective, delta=delta,
                             executor=pool, incumbent=args.incumbent,
                             max_cuts=args.max_cuts)
        pqps = [compile_dynamic(case, s) for s in range(case.scenario_count())]
        at_eta = plan_value(case, objective, result.eta, pqps, executor=pool)
    try:
        gap = subopt_gap(at_eta, result.value)
    except NonpositiveBound:
        gap = None
    doc = {
        "schema_version": SCHEMA_VERSION,
        "command": "relax",
        "case": args.case,
        "objective": describe_objective(objective),
        "delta": delta,
        "max_cuts": args.max_cuts,
        "value": result.value,
        "status": result.status,
        "cut_rounds": result.cut_rounds,
        "eta": result.eta,
        "value_at_eta": at_eta,
        "gap_at_eta": gap,
        "incumbent": args.incumbent,
        "gap_vs_incumbent": result.gap_vs,
    }
    write_json(out / "relax.json", doc)
    print(f"relax: bound {result.value:.6g} ({result.status}, "
          f"{result.cut_rounds} cut rounds) -> {out / 'relax.json'}")
    return 0


def cmd_round(args) -> int:
    case = resolve_case(args.case)
    objective = parse_objective(args.objective, case)
    space = investment_space(case)
    eta_cont, continuous = parse_eta_with_value(args.eta, space)
    threads = thread_count(args)
    out = ensure_out(args)
    with worker_pool(threads) as pool:
        result = round_integer(case, objective, eta_cont, rounds=args.samples,
                               seed=args.seed, executor=pool)
    ratio = None
    if continuous is not None and continuous > 0:
        ratio = result.value / continuous
    doc = {
        "schema_version": SCHEMA_VERSION,
        "command": "round",
        "case": args.case,
        "objective": describe_objective(objective),
        "samples": args.samples,
        "seed": args.seed,
        "distinct_candidates": len(result.trace),
        "value": result.value,
        "eta": result.eta,
        "continuous_value": continuous,
        "ratio_vs_continuous": ratio,
    }
    write_json(out / "round.json", doc)
    print(f"round: best {result.value:.6g} over {len(result.trace)} distinct "
          f"candidates -> {out / 'round.json'}")
    return 0


def _bench_cell(n: int, scenarios: int, threads: int, seed: int,
                step: float, iters: int) -> dict:
    case = gen_synthetic(n, seed, GenOptions(scenario_count=scenarios))
    pqps = [compile_dynamic(case, s) for s in range(scenarios)]
    space = pqps[0].param_space
    opts = PlanOptions(step=step, max_iters=iters, stationarity_tol=0.0,
                       seed=seed, init="given",
                       init_eta=0.5 * (space.eta_min + space.eta_max),
                       trace_every=1)
    with worker_pool(threads) as pool:
        result = projected_gd(case, cost(), opts, pqps=pqps, executor=pool)
    evals = len(result.trace)
    return {
        "n_nodes": n,
        "scenarios": scenarios,
        "threads": threads,
        "iterations": evals,
        "ms_per_iter": result.trace[-1].wall_ms / max(1, evals),
        "status": "ok",
    }


def cmd_bench_scaling(args) -> int:
    sizes = _int_list(args.sizes, "--sizes")
    scen_counts = _int_list(args.scenarios, "--scenarios")
    thread_counts = _int_list(args.threads, "--threads")
    out = ensure_out(args)
    rows: list[dict] = []
    for n in sizes:
        for S in scen_counts:
            for th in thread_counts:
                try:
                    rows.append(_bench_cell(n, S, th, args.seed, args.step,
                                            args.min_iters))
                except Exception as exc:  # failed cells marked, never fatal
                    rows.append({"n_nodes": n, "scenarios": S, "threads": th,
                                 "iterations": 0, "ms_per_iter": None,
                                 "status": f"failed: {type(exc).__name__}"})
                tag = rows[-1]
                ms = tag["ms_per_iter"]
                shown = f"{ms:.2f} ms/iter" if ms is not None else tag["status"]
                print(f"bench: n={n} S={S} threads={th}: {shown}")
    with (out / "scaling.csv").open("w", newline="") as fh:
        table = csv.writer(fh)
        table.writerow(["n_nodes", "scenarios", "threads", "iterations",
                        "ms_per_iter", "status"])
        for r in rows:
            ms = "" if r["ms_per_iter"] is None else f"{r['ms_per_iter']:.3f}"
            table.writerow([r["n_nodes"], r["scenarios"], r["threads"],
                            r["iterations"], ms, r["status"]])
    doc = {
        "schema_version": SCHEMA_VERSION,
        "command": "bench-scaling",
        "seed": args.seed,
        "step": args.step,
        "min_iters": args.min_iters,
        "rows": rows,
    }
    write_json(out / "scaling.json", doc)
    if not args.no_figures:
        figure_scaling(out, rows)
    print(f"bench: {len(rows)} cells -> {out / 'scaling.csv'}")
    return 0


def cmd_gen_case(args) -> int:
    if args.builtin is not None:
        case = BUILTIN_CASES[args.builtin]()
        default_name = f"{args.builtin}.json"
    elif args.nodes is not None:
        opts = GenOptions(scenario_count=args.scenarios,
                          line_density=args.density,
                          horizon=args.horizon,
                          battery_fraction=args.battery_fraction)
        case = gen_synthetic(args.nodes, args.seed, opts)
        default_name = f"synthetic_n{args.nodes}_s{args.scenarios}.json"
    else:
        raise CliError("gen-case needs --nodes or --builtin")
    target = Path(args.out) if args.out else Path(default_name)
    if target.parent != Path():
        target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(serialize_case(case))
    print(f"gen-case: {case.nodes} nodes, {len(case.lines)} lines, "
          f"{case.scenario_count()} scenarios -> {target}")
    return 0


def cmd_validate(args) -> int:
    stage = "parse"
    errors: list[dict] = []
    ok = False
    if args.case in BUILTIN_CASES:
        case = BUILTIN_CASES[args.case]()
    else:
        path = Path(args.case)
        if not path.exists():
            raise CliError(f"no such file: {args.case}")
        try:
            case = load_case(path.read_text())
        except (ParseError, ValidationError) as exc:
            case = None
            errors.append({"path": "", "message": str(exc)})
    if case is not None:
        stage = "validate"
        report = validate_case(case)
        ok = report.ok
        errors = [{"path": p, "message": m} for p, m in report.entries]
    doc = {
        "schema_version": SCHEMA_VERSION,
        "command": "validate",
        "case": args.case,
        "stage": stage,
        "ok": ok,
        "errors": errors,
    }
    print(json.dumps(_jsonable(doc), indent=2))
    return 0 if ok else EXIT_USAGE


# ---------------------------------------------------------------- wiring


def _add_case(p, default="garver"):
    p.add_argument("--case", default=default,
                   help="builtin name (garver, garver-continuous) or a case "
                        "JSON path (default: %(default)s)")


def _add_out(p):
    p.add_argument("--out", default="gridplan-out",
                   help="output directory (default: %(default)s)")
    p.add_argument("--no-figures", action="store_true",
                   help="skip PNG rendering")


def _add_threads(p):
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: GRIDPLAN_THREADS or 1)")


def _add_descent(p):
    p.add_argument("--step", type=float, default=1e-3,
                   help="gradient step size (default: %(default)s)")
    p.add_argument("--iters", type=int, default=2000,
                   help="iteration cap (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0,
                   help="RNG seed (default: %(default)s)")
    p.add_argument("--stat-tol", type=float, default=1e-6,
                   help="stationarity stop tolerance (default: %(default)s)")
    p.add_argument("--gap-target", type=float, default=0.10,
                   help="suboptimality gap stop (default: %(default)s)")
    p.add_argument("--multistart", type=int, default=1,
                   help="random starts scored for init (default: %(default)s)")
    p.add_argument("--trace-every", type=int, default=1,
                   help="full evaluation period (default: %(default)s)")
    p.add_argument("--init", default="random",
                   help="starting point: random, relax, min/mid/max, a file "
                        "with an eta field, or inline numbers "
                        "(default: %(default)s)")


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = _Parser(prog="gridplan",
                     description="Plan grid investments by gradient descent "
                                 "on market dispatch outcomes.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="command")
    subs: dict[str, argparse.ArgumentParser] = {}

    def register(name, run, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(run=run)
        subs[name] = p
        return p

    p = register("dispatch", cmd_dispatch,
                 "solve one scenario at fixed investments")
    _add_case(p)
    p.add_argument("--scenario", type=int, default=0,
                   help="scenario index (default: %(default)s)")
    p.add_argument("--eta", default="min",
                   help="investment vector: min/mid/max, a file, or "
                        "comma-separated numbers (default: %(default)s)")
    _add_out(p)

    p = register("plan", cmd_plan, "descend to an investment plan")
    _add_case(p)
    p.add_argument("--objective", default="cost",
                   help="kind[:key=value,...] (default: %(default)s)")
    _add_descent(p)
    p.add_argument("--batch", type=int, default=None,
                   help="scenarios per stochastic step (default: full batch)")
    p.add_argument("--batch-mode", choices=("epoch", "sample"),
                   default="epoch", help="batch draw (default: %(default)s)")
    p.add_argument("--lower-bound", type=float, default=None,
                   help="known bound for the gap stop")
    _add_threads(p)
    _add_out(p)

    p = register("pareto", cmd_pareto, "sweep the emissions weight")
    _add_case(p)
    p.add_argument("--weights", default="0,2,4,6,8,10",
                   help="comma-separated emission weights "
                        "(default: %(default)s)")
    _add_descent(p)
    _add_threads(p)
    _add_out(p)

    p = register("relax", cmd_relax, "certified lower bound on the plan value")
    _add_case(p)
    p.add_argument("--objective", default="cost",
                   help="kind[:key=value,...] (default: %(default)s)")
    p.add_argument("--delta", type=float, default=None,
                   help="strong-duality slack (default: scaled from the case)")
    p.add_argument("--max-cuts", type=int, default=50,
                   help="cut round cap (default: %(default)s)")
    p.add_argument("--incumbent", type=float, default=None,
                   help="feasible value to report a gap against")
    _add_threads(p)
    p.add_argument("--out", default="gridplan-out",
                   help="output directory (default: %(default)s)")

    p = register("round", cmd_round, "integer rounding of a continuous plan")
    _add_case(p)
    p.add_argument("--objective", default="cost",
                   help="kind[:key=value,...] (default: %(default)s)")
    p.add_argument("--eta", required=True,
                   help="continuous plan: a file with an eta field or "
                        "comma-separated numbers")
    p.add_argument("--samples", type=int, default=25,
                   help="rounding draws (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0,
                   help="RNG seed (default: %(default)s)")
    _add_threads(p)
    p.add_argument("--out", default="gridplan-out",
                   help="output directory (default: %(default)s)")

    p = register("bench-scaling", cmd_bench_scaling,
                 "per-iteration wall time across synthetic sizes")
    p.add_argument("--sizes", default="50,100,200",
                   help="node counts (default: %(default)s)")
    p.add_argument("--scenarios", default="1",
                   help="scenario counts (default: %(default)s)")
    p.add_argument("--threads", default="1",
                   help="thread counts to sweep (default: %(default)s)")
    p.add_argument("--min-iters", type=int, default=100,
                   help="iterations averaged per cell (default: %(default)s)")
    p.add_argument("--step", type=float, default=1e-3,
                   help="gradient step size (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0,
                   help="case generation seed (default: %(default)s)")
    _add_out(p)

    p = register("gen-case", cmd_gen_case, "write a case file")
    p.add_argument("--nodes", type=int, default=None,
                   help="synthetic case size")
    p.add_argument("--seed", type=int, default=0,
                   help="generation seed (default: %(default)s)")
    p.add_argument("--scenarios", type=int, default=1,
                   help="scenario count (default: %(default)s)")
    p.add_argument("--density", type=float, default=2.2,
                   help="lines per node (default: %(default)s)")
    p.add_argument("--horizon", type=int, default=1,
                   help="periods per scenario (default: %(default)s)")
    p.add_argument("--battery-fraction", type=float, default=0.0,
                   help="nodes carrying a candidate battery "
                        "(default: %(default)s)")
    p.add_argument("--builtin", choices=sorted(BUILTIN_CASES), default=None,
                   help="dump a builtin case instead of generating")
    p.add_argument("--out", default=None,
                   help="target file (default: a name derived from the case)")

    p = register("validate", cmd_validate, "check a case file, print a report")
    _add_case(p)

    for p in subs.values():
        p.add_argument("--config", default=None,
                       help="JSON file of flag defaults; explicit flags win")
    return parser, subs


def _apply_config(sub: argparse.ArgumentParser, path: str) -> None:
    target = Path(path)
    if not target.exists():
        raise CliError(f"config file {path!r} not found")
    try:
        doc = json.loads(target.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise CliError(f"{path}: config must be a JSON object")
    dests = {action.dest for action in sub._actions}
    values = {}
    for key, val in doc.items():
        dest = key.replace("-", "_")
        if dest in ("help", "config") or dest not in dests:
            raise CliError(f"{path}: unknown option {key!r}")
        values[dest] = val
    sub.set_defaults(**values)


_USAGE_ERRORS = (CliError, ParseError, ValidationError, InvalidOptions,
                 CompileError, UnresolvedDevice, UnsupportedObjective,
                 MissingBounds, TooManyBinaries)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser, subs = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "config", None):
            _apply_config(subs[args.command], args.config)
            args = parser.parse_args(argv)
        return args.run(args)
    except _USAGE_ERRORS as exc:
        print(f"gridplan: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (Infeasible, RelaxationInfeasible) as exc:
        print(f"gridplan: infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (SolverFailure, SolverError, SingularKKT) as exc:
        print(f"gridplan: solver failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
