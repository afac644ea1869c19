import csv

import numpy as np
import pytest

from gridplan.compile import compile_static, instantiate
from gridplan.model import (
    GenOptions,
    InvalidOptions,
    gen_synthetic,
    investment_space,
    make_garver_case,
)
from gridplan.objectives import cost, emissions, eval_objective, weighted
from gridplan.plan import (
    PlanOptions,
    PlanResult,
    TracePoint,
    init_random,
    pareto_sweep,
    project_box,
    projected_gd,
    round_integer,
    stationarity,
    stochastic_gd,
)
from gridplan.sensitivity import grad_J
from gridplan.solver import solve_qp
from tests.test_compile import two_node_case


def small_case(scenarios=1, seed=3):
    return gen_synthetic(6, seed=seed, opts=GenOptions(
        scenario_count=scenarios, line_density=1.8))


def test_project_box_clamps():
    space = investment_space(make_garver_case())
    inside = 0.5 * (space.eta_min + space.eta_max)
    np.testing.assert_array_equal(project_box(inside, space), inside)
    np.testing.assert_array_equal(project_box(space.eta_max + 1.0, space),
                                  space.eta_max)
    once = project_box(space.eta_min - 3.0, space)
    np.testing.assert_array_equal(project_box(once, space), once)


def test_stationarity_measure():
    space = investment_space(make_garver_case())
    free = space.eta_max > space.eta_min
    interior = np.where(free, 0.5 * (space.eta_min + space.eta_max),
                        space.eta_min)
    zero = np.zeros(space.size)
    assert stationarity(interior, zero, 0.1, space) == 0.0
    # at the lower edge an outward gradient projects straight back
    assert stationarity(space.eta_min, np.ones(space.size), 0.1, space) == 0.0
    g = np.where(free, 1e-3, 0.0)  # small enough that nothing clips
    expected = 0.1 * np.linalg.norm(g)
    assert stationarity(interior, g, 0.1, space) == pytest.approx(expected)
    with pytest.raises(InvalidOptions):
        stationarity(interior, g, 0.0, space)


def test_options_validation():
    with pytest.raises(InvalidOptions):
        PlanOptions(step=0.0)
    with pytest.raises(InvalidOptions):
        PlanOptions(trace_every=0)
    with pytest.raises(InvalidOptions):
        PlanOptions(init="warmish")
    with pytest.raises(InvalidOptions):
        PlanOptions(init="given")  # missing init_eta
    with pytest.raises(InvalidOptions):
        PlanOptions(batch_mode="shuffle")


def expandable_two_node():
    from gridplan.model import InvestmentBounds, LineSpec

    return two_node_case(lines=(LineSpec(
        0, 1, susceptance_per_unit=2.0, flow_limit_per_susceptance=25.0,
        investment=InvestmentBounds(eta_min=0.2, eta_max=2.0,
                                    unit_cost=30.0)),))


def test_null_objective_descends_to_floor():
    """With h == 0 the objective is gamma' eta, so descent walks straight to
    the lower corner and the projected step vanishes there."""
    case = expandable_two_node()
    space = investment_space(case)
    start = space.eta_max.copy()
    opts = PlanOptions(step=1e-2, init="given", init_eta=start,
                       stationarity_tol=1e-12, max_iters=500)
    result = projected_gd(case, weighted([]), opts)
    assert result.stop_reason == "stationary"
    np.testing.assert_array_equal(result.eta, space.eta_min)
    assert result.value == pytest.approx(float(space.gamma @ space.eta_min))
    # gamma = 30 on the one free slot: 1.8 of travel at 0.3 per step
    assert result.iterations == pytest.approx(6, abs=1)
    values = [row.j_full for row in result.trace]
    assert all(b <= a + 1e-12 for a, b in zip(values, values[1:]))


def test_iterates_stay_in_box():
    case = small_case()
    space = investment_space(case)
    for seed in (0, 1):
        opts = PlanOptions(step=1e-2, max_iters=25, seed=seed,
                           stationarity_tol=0.0)
        result = projected_gd(case, cost(), opts)
        assert space.contains(result.eta)
        assert result.stop_reason in ("stationary", "max_iters")


def test_same_seed_same_run():
    case = small_case()
    opts = PlanOptions(step=5e-3, max_iters=15, seed=7, stationarity_tol=0.0)
    a = projected_gd(case, cost(), opts)
    b = projected_gd(case, cost(), opts)
    assert np.array_equal(a.eta, b.eta)
    assert a.value == b.value
    assert [r.j_full for r in a.trace] == [r.j_full for r in b.trace]
    assert [r.stationarity for r in a.trace] == [r.stationarity for r in b.trace]


def test_small_step_descends_monotonically():
    """Of the swept steps only the smallest is guaranteed monotone; the
    larger ones may overshoot and are only required to finish."""
    case = small_case()
    finals = {}
    for step in (1e-5, 1e-4, 1e-3):
        opts = PlanOptions(step=step, max_iters=30, seed=2,
                           stationarity_tol=0.0)
        result = projected_gd(case, cost(), opts)
        finals[step] = result.value
        if step == 1e-5:
            values = [row.j_full for row in result.trace]
            tol = 1e-9 * (1.0 + abs(values[0]))
            assert all(b <= a + tol for a, b in zip(values, values[1:]))
    assert set(finals) == {1e-5, 1e-4, 1e-3}


def test_descent_lemma_bound():
    """J(next) <= J(current) - (L/2) ||step||^2 when the step size is 1/L,
    with L estimated from sampled gradient differences."""
    case = small_case()
    space = investment_space(case)
    rng = np.random.default_rng(11)
    span = space.eta_max - space.eta_min
    center = np.where(span == 0, space.eta_min,
                      0.5 * (space.eta_min + space.eta_max))
    ratios = []
    for _ in range(6):
        a = project_box(center + 0.05 * span * rng.uniform(-1, 1, space.size),
                        space)
        b = project_box(a + 0.01 * span * rng.uniform(-1, 1, space.size),
                        space)
        if np.linalg.norm(b - a) == 0:
            continue
        diff = grad_J(case, cost(), a) - grad_J(case, cost(), b)
        ratios.append(np.linalg.norm(diff) / np.linalg.norm(a - b))
    lips = 1.5 * max(ratios)
    opts = PlanOptions(step=1.0 / lips, max_iters=10, init="given",
                       init_eta=center, stationarity_tol=0.0)
    result = projected_gd(case, cost(), opts)
    values = [row.j_full for row in result.trace]
    eta = center.copy()  # the eta path is not traced, so walk it again
    tol = 1e-7 * (1.0 + abs(values[0]))
    for i in range(len(values) - 1):
        g = grad_J(case, cost(), eta)
        nxt = project_box(eta - opts.step * g, space)
        drop = (lips / 2.0) * np.linalg.norm(nxt - eta) ** 2
        assert values[i + 1] <= values[i] - drop + tol
        eta = nxt


def test_stochastic_full_batch_matches_deterministic():
    case = small_case(scenarios=3, seed=5)
    base = dict(step=5e-3, max_iters=12, seed=4, stationarity_tol=0.0,
                trace_every=1)
    det = projected_gd(case, cost(), PlanOptions(**base))
    sto = stochastic_gd(case, cost(), PlanOptions(batch_size=3, **base))
    assert np.array_equal(det.eta, sto.eta)
    assert det.value == sto.value
    assert det.stop_reason == sto.stop_reason
    assert [r.j_full for r in det.trace] == [r.j_full for r in sto.trace]


def test_epoch_batches_average_to_full_gradient():
    case = small_case(scenarios=4, seed=9)
    space = investment_space(case)
    eta = np.where(space.eta_min == space.eta_max, space.eta_min,
                   0.5 * (space.eta_min + space.eta_max))
    full = grad_J(case, cost(), eta)
    batches = ([0, 2], [1, 3])  # one partition of the four scenarios
    acc = np.zeros_like(full)
    for batch in batches:
        acc += grad_J(case, cost(), eta, scenarios=batch, weight_scale=2.0)
    np.testing.assert_allclose(acc / len(batches), full, rtol=1e-12, atol=1e-12)


def test_stochastic_close_to_deterministic():
    case = small_case(scenarios=4, seed=5)
    base = dict(step=5e-3, max_iters=40, seed=1, stationarity_tol=0.0)
    det = projected_gd(case, cost(), PlanOptions(**base))
    sto = stochastic_gd(case, cost(), PlanOptions(
        batch_size=2, trace_every=10, **base))
    assert abs(sto.value - det.value) <= 0.05 * abs(det.value)
    # batch rows carry the estimate only; full rows carry both
    assert any(row.j_full is None for row in sto.trace)
    assert sto.trace[0].j_full is not None


def test_stochastic_guards():
    single = small_case(scenarios=1)
    with pytest.raises(InvalidOptions):
        stochastic_gd(single, cost(), PlanOptions(batch_size=1))
    multi = small_case(scenarios=3, seed=5)
    with pytest.raises(InvalidOptions):
        stochastic_gd(multi, cost(), PlanOptions())  # no batch_size
    with pytest.raises(InvalidOptions):
        stochastic_gd(multi, cost(), PlanOptions(batch_size=5))


def test_init_random_best_of_k():
    case = small_case()
    space = investment_space(case)
    one = init_random(case, cost(), 1, seed=13)
    again = init_random(case, cost(), 1, seed=13)
    np.testing.assert_array_equal(one, again)
    assert space.contains(one)

    best = init_random(case, cost(), 10, seed=13)
    pqp = compile_static(case)
    rng = np.random.default_rng([13, 0])
    span = space.eta_max - space.eta_min
    values = []
    for _ in range(10):
        eta = space.eta_min + rng.uniform(0.0, 1.0, space.size) * span
        sol = solve_qp(instantiate(pqp, eta))
        values.append(float(space.gamma @ eta)
                      + eval_objective(cost(), case, pqp, sol))
    best_sol = solve_qp(instantiate(pqp, best))
    best_value = float(space.gamma @ best) + eval_objective(
        cost(), case, pqp, best_sol)
    assert best_value == pytest.approx(min(values), rel=1e-12)


def test_init_random_degenerate_box():
    case = two_node_case()  # all investments fixed, zero-width box
    space = investment_space(case)
    assert np.array_equal(space.eta_min, space.eta_max)
    eta = init_random(case, cost(), 5, seed=0)
    np.testing.assert_array_equal(eta, space.eta_min)


def test_round_integer_degenerate_probabilities():
    case = make_garver_case(line_kind="binary")
    space = investment_space(case)
    at_floor = round_integer(case, cost(), space.eta_min, rounds=6, seed=0)
    np.testing.assert_array_equal(at_floor.eta, space.eta_min)
    assert len(at_floor.trace) == 1  # every draw collapses to one candidate
    at_cap = round_integer(case, cost(), space.eta_max, rounds=6, seed=0)
    np.testing.assert_array_equal(at_cap.eta, space.eta_max)


def test_round_integer_picks_best_candidate():
    case = make_garver_case(line_kind="binary")
    space = investment_space(case)
    mid = np.where(space.binary & (space.eta_max > space.eta_min),
                   space.eta_min + 0.5 * (space.eta_max - space.eta_min),
                   space.eta_min)
    result = round_integer(case, cost(), mid, rounds=8, seed=3)
    assert result.value == pytest.approx(min(r.j_full for r in result.trace))
    binary = space.binary & (space.eta_max > space.eta_min)
    corners = np.isclose(result.eta[binary], space.eta_min[binary]) \
        | np.isclose(result.eta[binary], space.eta_max[binary])
    assert corners.all()
    assert space.contains(result.eta)


def test_round_integer_requires_binaries():
    case = make_garver_case(line_kind="continuous")
    space = investment_space(case)
    with pytest.raises(InvalidOptions):
        round_integer(case, cost(), space.eta_min)


def test_pareto_sweep_reports_tradeoff():
    case = small_case()
    opts = PlanOptions(step=5e-3, max_iters=25, seed=2, stationarity_tol=0.0)
    points = pareto_sweep(case, [0.0, 200.0], opts)
    assert [p.weight for p in points] == [0.0, 200.0]
    direct = projected_gd(case, cost(), opts)
    np.testing.assert_array_equal(points[0].eta, direct.eta)
    assert points[0].cost == pytest.approx(direct.value)
    assert all(p.emissions >= 0 for p in points)
    assert points[1].emissions <= points[0].emissions + 1e-9
    with pytest.raises(InvalidOptions):
        pareto_sweep(case, [-1.0], opts)


def test_trace_csv_round_trip(tmp_path):
    case = small_case(scenarios=3, seed=5)
    result = stochastic_gd(case, cost(), PlanOptions(
        step=5e-3, max_iters=9, batch_size=2, trace_every=4,
        stationarity_tol=0.0, seed=0))
    path = tmp_path / "trace.csv"
    result.write_trace(path)
    with open(path, newline="") as handle:
        rows = list(csv.reader(handle))
    assert rows[0] == ["iter", "J_batch", "J_full", "stationarity", "wall_ms"]
    assert len(rows) == len(result.trace) + 1
    fulls = [row[2] for row in rows[1:]]
    assert "" in fulls  # batch-only rows leave the full column blank
    for row, point in zip(rows[1:], result.trace):
        assert int(row[0]) == point.iteration
        assert float(row[1]) == point.j_batch
        if row[2]:
            assert float(row[2]) == point.j_full


def test_result_to_dict():
    result = PlanResult(eta=np.array([1.0, 2.0]), value=3.5,
                        stop_reason="stationary",
                        trace=[TracePoint(0, 3.5, 3.5, 0.0, 1.0)])
    payload = result.to_dict()
    assert payload["eta"] == [1.0, 2.0]
    assert payload["stop_reason"] == "stationary"
    assert payload["iterations"] == 0
    assert payload["lower_bound"] is None


def test_gap_target_stops_early():
    # relative gaps need positive values, so plan against negated cost
    case = expandable_two_node()
    space = investment_space(case)
    objective = weighted([(cost(), -1.0)])
    mid = 0.5 * (space.eta_min + space.eta_max)
    pqp = compile_static(case)
    sol = solve_qp(instantiate(pqp, mid))
    j_mid = float(space.gamma @ mid) - eval_objective(cost(), case, pqp, sol)
    assert j_mid > 0

    shared = dict(step=1e-12, max_iters=4, init="given", init_eta=mid,
                  gap_target=0.10, stationarity_tol=0.0)
    near = projected_gd(case, objective,
                        PlanOptions(lower_bound=j_mid / 1.05, **shared))
    assert near.stop_reason == "gap_reached"
    assert near.iterations == 0
    assert near.subopt_gap == pytest.approx(0.05, rel=1e-6)

    far = projected_gd(case, objective,
                       PlanOptions(lower_bound=j_mid / 1.5, **shared))
    assert far.stop_reason == "max_iters"
    assert far.subopt_gap == pytest.approx(0.5, rel=1e-6)


def test_relaxation_init_seeds_start_and_bound():
    from gridplan.relax import lower_bound

    case = expandable_two_node()
    space = investment_space(case)
    reference = lower_bound(case, cost())
    result = projected_gd(case, cost(), PlanOptions(
        init="relaxation", step=1e-4, max_iters=3, stationarity_tol=0.0))
    assert result.lower_bound == pytest.approx(reference.value, rel=1e-9)
    # the first trace row evaluates J at the relaxation's suggestion
    start = project_box(reference.eta, space)
    pqp = compile_static(case)
    sol = solve_qp(instantiate(pqp, start))
    j_start = float(space.gamma @ start) + eval_objective(cost(), case, pqp, sol)
    assert result.trace[0].j_full == pytest.approx(j_start, rel=1e-9)
    # negative values leave the ratio gap unreported
    assert result.subopt_gap is None
