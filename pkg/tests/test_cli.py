import csv
import json
import subprocess
import sys

import numpy as np
import pytest

import gridplan.plan as plan_mod
from gridplan.cli import (
    CliError,
    main,
    parse_eta,
    parse_objective,
)
from gridplan.model import investment_space, load_case, make_garver_case
from gridplan.solver import Infeasible


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def strip_wall(doc):
    if isinstance(doc, dict):
        return {k: strip_wall(v) for k, v in doc.items() if k != "wall_ms"}
    if isinstance(doc, list):
        return [strip_wall(v) for v in doc]
    return doc


# ---------------------------------------------------------------- parsing


def test_parse_objective_forms():
    case = make_garver_case()
    assert parse_objective("cost", case).kind == "cost"
    obj = parse_objective("emissions:w=400", case)
    assert obj.kind == "emissions" and obj.w == 400.0
    assert parse_objective("profit:gens=0,2", case).gens == (0, 2)
    assert parse_objective("profit", case).gens == tuple(
        range(len(case.generators)))
    assert parse_objective("ratepayer", case).loads == tuple(
        range(len(case.loads)))
    assert parse_objective("ratepayer:loads=1", case).loads == (1,)


def test_parse_objective_rejects_garbage():
    case = make_garver_case()
    with pytest.raises(CliError):
        parse_objective("entropy", case)
    with pytest.raises(CliError):
        parse_objective("emissions", case)
    with pytest.raises(CliError):
        parse_objective("cost:w=1", case)
    with pytest.raises(CliError):
        parse_objective("emissions:w=abc", case)


def test_parse_eta_forms(tmp_path):
    space = investment_space(make_garver_case())
    np.testing.assert_array_equal(parse_eta("min", space), space.eta_min)
    np.testing.assert_array_equal(parse_eta("max", space), space.eta_max)
    mid = 0.5 * (space.eta_min + space.eta_max)
    np.testing.assert_array_equal(parse_eta("mid", space), mid)
    inline = ",".join(str(v) for v in mid)
    np.testing.assert_allclose(parse_eta(inline, space), mid)
    saved = tmp_path / "eta.json"
    saved.write_text(json.dumps({"eta": list(mid), "value": 1.5}))
    np.testing.assert_allclose(parse_eta(str(saved), space), mid)
    with pytest.raises(CliError):
        parse_eta("1,2,3", space)
    with pytest.raises(CliError):
        parse_eta(",".join("1e9" for _ in range(space.size)), space)


# ---------------------------------------------------------------- dispatch


def test_dispatch_garver_shape(tmp_path):
    out = tmp_path / "run"
    code = main(["dispatch", "--case", "garver", "--out", str(out),
                 "--no-figures"])
    assert code == 0
    doc = read_json(out / "dispatch.json")
    assert doc["schema_version"] == 1
    assert len(doc["lmp"]) == 1 and len(doc["lmp"][0]) == 6
    assert len(doc["flows"][0]) == len(make_garver_case().lines)
    assert doc["regularity"]["ok"] is True
    assert doc["binding"]


def test_dispatch_more_capacity_never_costs_more(tmp_path):
    lo, hi = tmp_path / "lo", tmp_path / "hi"
    assert main(["dispatch", "--case", "garver", "--out", str(lo),
                 "--no-figures"]) == 0
    assert main(["dispatch", "--case", "garver", "--eta", "max",
                 "--out", str(hi), "--no-figures"]) == 0
    a = read_json(lo / "dispatch.json")["objective"]
    b = read_json(hi / "dispatch.json")["objective"]
    assert b <= a + 1e-6 * (1 + abs(a))


def test_dispatch_missing_file_exits_3(tmp_path, capsys):
    code = main(["dispatch", "--case", str(tmp_path / "nope.json"),
                 "--out", str(tmp_path / "o"), "--no-figures"])
    assert code == 3
    assert "neither a builtin" in capsys.readouterr().err


def test_dispatch_infeasible_exits_2(tmp_path, monkeypatch, capsys):
    def bomb(inst, settings=None):
        raise Infeasible("no strictly feasible point")

    monkeypatch.setattr("gridplan.cli.solve_qp", bomb)
    code = main(["dispatch", "--case", "garver", "--out",
                 str(tmp_path / "o"), "--no-figures"])
    assert code == 2
    assert "infeasible" in capsys.readouterr().err


def test_unknown_command_exits_3(capsys):
    assert main(["transmogrify"]) == 3
    capsys.readouterr()


# ---------------------------------------------------------------- plan


def test_plan_relax_init_reports_bound(tmp_path):
    out = tmp_path / "run"
    code = main(["plan", "--case", "garver-continuous", "--objective", "cost",
                 "--init", "relax", "--iters", "6", "--step", "2e-5",
                 "--out", str(out), "--no-figures"])
    assert code == 0
    doc = read_json(out / "plan.json")
    assert doc["lower_bound"] is not None
    assert "subopt_gap" in doc
    assert doc["options"]["init"] == "relaxation"
    rows = list(csv.reader((out / "trace.csv").open()))
    assert rows[0] == ["iteration", "j_batch", "j_full", "stationarity",
                       "wall_ms"]
    assert len(rows) == 2 + doc["iterations"]
    # warm start cannot be looser than its own certificate
    assert doc["value"] >= doc["lower_bound"] - 1e-6 * (1 + abs(doc["value"]))


def test_plan_objective_spec_recorded(tmp_path):
    out = tmp_path / "run"
    code = main(["plan", "--case", "garver", "--objective", "emissions:w=400",
                 "--init", "mid", "--iters", "2", "--step", "2e-5",
                 "--out", str(out), "--no-figures"])
    assert code == 0
    doc = read_json(out / "plan.json")
    assert doc["objective"] == {"kind": "emissions", "w": 400.0}


def test_plan_batch_partitioning(tmp_path):
    case_file = tmp_path / "case.json"
    assert main(["gen-case", "--nodes", "6", "--seed", "3", "--scenarios",
                 "8", "--out", str(case_file)]) == 0
    out = tmp_path / "run"
    code = main(["plan", "--case", str(case_file), "--batch", "4",
                 "--init", "mid", "--iters", "2", "--step", "2e-5",
                 "--out", str(out), "--no-figures"])
    assert code == 0
    doc = read_json(out / "plan.json")
    assert doc["options"]["batch_size"] == 4
    assert doc["value"] == pytest.approx(doc["value"])


def test_plan_rerun_bitwise_identical(tmp_path):
    args = ["plan", "--case", "garver", "--init", "random", "--seed", "7",
            "--iters", "3", "--step", "2e-5", "--no-figures"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b)]) == 0
    left = strip_wall(read_json(a / "plan.json"))
    right = strip_wall(read_json(b / "plan.json"))
    left["options"].pop("threads"), right["options"].pop("threads")
    assert left == right
    rows_a = [r[:-1] for r in csv.reader((a / "trace.csv").open())]
    rows_b = [r[:-1] for r in csv.reader((b / "trace.csv").open())]
    assert rows_a == rows_b


def test_plan_flushes_partial_trace_on_failure(tmp_path, monkeypatch, capsys):
    real = plan_mod._eval_and_grad

    def dying(case, objective, eta, pqps, settings, executor, rng, space,
              scenarios, scale, iteration):
        if iteration >= 2:
            raise plan_mod.SolverFailure(f"iteration {iteration}: boom")
        return real(case, objective, eta, pqps, settings, executor, rng,
                    space, scenarios, scale, iteration)

    monkeypatch.setattr(plan_mod, "_eval_and_grad", dying)
    out = tmp_path / "run"
    code = main(["plan", "--case", "garver", "--init", "mid", "--iters", "9",
                 "--step", "2e-5", "--out", str(out), "--no-figures"])
    assert code == 1
    assert "solver failure" in capsys.readouterr().err
    rows = list(csv.reader((out / "trace.csv").open()))
    assert len(rows) == 3  # header + the two iterations that finished
    assert not (out / "plan.json").exists()


def test_threads_flag_and_env(tmp_path, monkeypatch):
    monkeypatch.setenv("GRIDPLAN_THREADS", "2")
    out_env = tmp_path / "env"
    assert main(["plan", "--case", "garver", "--init", "mid", "--iters", "2",
                 "--step", "2e-5", "--out", str(out_env),
                 "--no-figures"]) == 0
    assert read_json(out_env / "plan.json")["options"]["threads"] == 2
    out_flag = tmp_path / "flag"
    assert main(["plan", "--case", "garver", "--init", "mid", "--iters", "2",
                 "--step", "2e-5", "--threads", "1", "--out", str(out_flag),
                 "--no-figures"]) == 0
    assert read_json(out_flag / "plan.json")["options"]["threads"] == 1
    env_doc = strip_wall(read_json(out_env / "plan.json"))
    flag_doc = strip_wall(read_json(out_flag / "plan.json"))
    assert env_doc["eta"] == flag_doc["eta"]
    monkeypatch.setenv("GRIDPLAN_THREADS", "lots")
    assert main(["plan", "--case", "garver", "--init", "mid", "--iters", "1",
                 "--out", str(tmp_path / "bad"), "--no-figures"]) == 3


def test_config_file_defaults_flags_win(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"iters": 3, "step": 2e-5, "init": "mid",
                               "no_figures": True}))
    out = tmp_path / "a"
    assert main(["plan", "--case", "garver", "--config", str(cfg),
                 "--out", str(out)]) == 0
    assert read_json(out / "plan.json")["options"]["max_iters"] == 3
    out2 = tmp_path / "b"
    assert main(["plan", "--case", "garver", "--config", str(cfg),
                 "--iters", "1", "--out", str(out2)]) == 0
    assert read_json(out2 / "plan.json")["options"]["max_iters"] == 1
    cfg.write_text(json.dumps({"itres": 3}))
    assert main(["plan", "--case", "garver", "--config", str(cfg),
                 "--out", str(tmp_path / "c")]) == 3


# ---------------------------------------------------------------- pareto


def test_pareto_rows_duplicates_and_cost_match(tmp_path):
    shared = ["--init", "mid", "--iters", "4", "--step", "2e-5",
              "--no-figures"]
    out = tmp_path / "sweep"
    code = main(["pareto", "--case", "garver", "--weights", "0,0,3",
                 "--out", str(out)] + shared)
    assert code == 0
    rows = list(csv.reader((out / "pareto.csv").open()))
    assert rows[0] == ["weight", "cost", "emissions"]
    assert len(rows) == 4
    assert rows[1] == rows[2]  # duplicate weights are kept
    doc = read_json(out / "pareto.json")
    assert doc["shed_constant"] > 0

    out_plan = tmp_path / "plan"
    assert main(["plan", "--case", "garver", "--objective", "cost",
                 "--out", str(out_plan)] + shared) == 0
    plan_value = read_json(out_plan / "plan.json")["value"]
    assert float(rows[1][1]) == pytest.approx(plan_value, rel=1e-12)


# ---------------------------------------------------------------- relax


def test_relax_bound_is_sound_for_its_own_eta(tmp_path):
    out = tmp_path / "run"
    code = main(["relax", "--case", "garver-continuous", "--objective",
                 "cost", "--out", str(out)])
    assert code == 0
    doc = read_json(out / "relax.json")
    assert doc["status"] in ("optimal", "cut_limit")
    assert doc["value"] <= doc["value_at_eta"] + 1e-6 * (1 + abs(doc["value"]))
    assert doc["delta"] > 0
    assert len(doc["eta"]) == investment_space(make_garver_case()).size


# ---------------------------------------------------------------- round


def test_round_lands_on_box_corners(tmp_path):
    out = tmp_path / "run"
    code = main(["round", "--case", "garver", "--eta", "mid",
                 "--samples", "8", "--out", str(out)])
    assert code == 0
    doc = read_json(out / "round.json")
    assert doc["distinct_candidates"] <= 8
    space = investment_space(make_garver_case())
    eta = np.array(doc["eta"])
    on_corner = (eta == space.eta_min) | (eta == space.eta_max)
    assert np.all(on_corner[space.binary])
    assert np.isfinite(doc["value"])


def test_round_without_binaries_exits_3(tmp_path, capsys):
    code = main(["round", "--case", "garver-continuous", "--eta", "mid",
                 "--out", str(tmp_path / "o")])
    assert code == 3
    capsys.readouterr()


# ---------------------------------------------------------------- cases


def test_gen_case_roundtrip_and_validate(tmp_path, capsys):
    target = tmp_path / "case.json"
    assert main(["gen-case", "--nodes", "9", "--seed", "1", "--scenarios",
                 "2", "--out", str(target)]) == 0
    case = load_case(target.read_text())
    assert case.nodes == 9 and case.scenario_count() == 2
    capsys.readouterr()
    assert main(["validate", "--case", str(target)]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["ok"] is True and doc["errors"] == []

    target.write_text(target.read_text().replace('"nodes"', '"nodez"', 1))
    assert main(["validate", "--case", str(target)]) == 3
    doc = json.loads(capsys.readouterr().out)
    assert doc["ok"] is False and doc["stage"] == "parse"
    assert doc["errors"]


def test_gen_case_builtin_dump(tmp_path):
    target = tmp_path / "garver.json"
    assert main(["gen-case", "--builtin", "garver", "--out",
                 str(target)]) == 0
    dumped = load_case(target.read_text())
    assert dumped.nodes == make_garver_case().nodes
    assert main(["gen-case", "--out", str(tmp_path / "x.json")]) == 3


# ---------------------------------------------------------------- bench


def test_bench_scaling_rows(tmp_path):
    out = tmp_path / "run"
    code = main(["bench-scaling", "--sizes", "8,12", "--scenarios", "1",
                 "--threads", "1", "--min-iters", "3", "--out", str(out),
                 "--no-figures"])
    assert code == 0
    rows = list(csv.DictReader((out / "scaling.csv").open()))
    assert [r["n_nodes"] for r in rows] == ["8", "12"]
    assert all(r["status"] == "ok" for r in rows)
    assert all(float(r["ms_per_iter"]) > 0 for r in rows)
    assert main(["bench-scaling", "--sizes", "a,b",
                 "--out", str(out), "--no-figures"]) == 3


# ---------------------------------------------------------------- figures


def test_report_paths_render_figures(tmp_path):
    out_p = tmp_path / "plan"
    assert main(["plan", "--case", "garver", "--init", "mid", "--iters", "2",
                 "--step", "2e-5", "--out", str(out_p)]) == 0
    assert (out_p / "convergence.png").stat().st_size > 0
    out_d = tmp_path / "dispatch"
    assert main(["dispatch", "--case", "garver", "--out", str(out_d)]) == 0
    assert (out_d / "dispatch.png").stat().st_size > 0
    out_skip = tmp_path / "skip"
    assert main(["dispatch", "--case", "garver", "--out", str(out_skip),
                 "--no-figures"]) == 0
    assert not (out_skip / "dispatch.png").exists()


def test_console_module_runs():
    proc = subprocess.run(
        [sys.executable, "-m", "gridplan.cli", "validate", "--case",
         "garver"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["ok"] is True
