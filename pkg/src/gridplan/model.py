"""Network case data model: devices, scenarios, investment space, case I/O.

A :class:`NetworkCase` is an immutable description of an electricity network
(nodes, lines, generators, loads, batteries), the demand/capacity scenarios it
can face, and the box of investment decisions open to a planner.  Cases come
from JSON files (:func:`load_case`), the built-in 6-bus benchmark
(:func:`make_garver_case`), or the synthetic generator (:func:`gen_synthetic`).

Node and device indices are 0-based everywhere, including case files.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "ParseError",
    "ValidationError",
    "InvalidOptions",
    "InvestmentBounds",
    "LineSpec",
    "GenSpec",
    "LoadSpec",
    "BatterySpec",
    "ScenarioData",
    "NetworkCase",
    "ParamSpace",
    "ValidationReport",
    "GenOptions",
    "load_case",
    "serialize_case",
    "make_garver_case",
    "gen_synthetic",
    "validate_case",
    "investment_space",
]


class ParseError(ValueError):
    """Raised when a case file is not structurally valid JSON-with-schema."""


class ValidationError(ValueError):
    """Raised when a parsed case violates a model invariant.

    Carries the full :class:`ValidationReport` in ``report``.
    """

    def __init__(self, report: "ValidationReport"):
        self.report = report
        head = "; ".join(f"{path}: {msg}" for path, msg in report.entries[:4])
        more = "" if len(report.entries) <= 4 else f" (+{len(report.entries) - 4} more)"
        super().__init__(f"invalid case: {head}{more}")


class InvalidOptions(ValueError):
    """Raised for unusable synthetic-generator options."""


Series = tuple[float, ...]  # length 1 (static value) or exactly the case horizon


def _as_series(value) -> Series:
    if isinstance(value, (int, float)):
        return (float(value),)
    return tuple(float(v) for v in value)


def series_at(series: Sequence[float], t: int) -> float:
    """Value of a (possibly length-1 broadcast) time series at period t."""
    return series[0] if len(series) == 1 else series[t]


@dataclass(frozen=True)
class InvestmentBounds:
    """Box (and cost) for one device's expandable quantity.

    ``kind == "binary"`` restricts the feasible set to the two endpoints
    {eta_min, eta_max}; planners operate on the continuous hull and round.
    A fixed (non-expandable) device has eta_min == eta_max.
    """

    eta_min: float = 1.0
    eta_max: float = 1.0
    unit_cost: float = 0.0
    kind: str = "continuous"

    @property
    def fixed(self) -> bool:
        return self.eta_min == self.eta_max

    @staticmethod
    def fixed_at(value: float) -> "InvestmentBounds":
        return InvestmentBounds(eta_min=value, eta_max=value, unit_cost=0.0)


@dataclass(frozen=True)
class LineSpec:
    """Transmission corridor between two nodes.

    ``susceptance_per_unit`` is the susceptance contributed by one unit of the
    investment variable (one circuit, say); the line's installed susceptance is
    susceptance_per_unit * eta.  ``flow_limit_per_susceptance`` converts
    installed susceptance to a MW flow limit, so both the voltage law and the
    flow bound scale linearly with the same eta.
    """

    from_node: int
    to_node: int
    susceptance_per_unit: float
    flow_limit_per_susceptance: float
    investment: InvestmentBounds = field(default_factory=InvestmentBounds)


@dataclass(frozen=True)
class GenSpec:
    node: int
    marginal_cost: float
    emissions_rate: float = 0.0
    capacity: Series = (0.0,)
    investment: InvestmentBounds = field(default_factory=InvestmentBounds)
    owner: str | None = None


@dataclass(frozen=True)
class LoadSpec:
    node: int
    demand: Series


@dataclass(frozen=True)
class BatterySpec:
    """Storage device: power limit v_max (MW) and duration omega (hours).

    Energy capacity is omega * v_max * eta; the state of charge starts empty.
    """

    node: int
    power_limit: float
    duration: float
    investment: InvestmentBounds = field(default_factory=InvestmentBounds)


@dataclass(frozen=True)
class ScenarioData:
    """Overrides applied on top of the base time series.

    ``demand`` maps load index -> series, ``capacity`` maps generator index ->
    series.  Weights are normalized to probabilities across the scenario list.
    """

    id: str
    demand: Mapping[int, Series] = field(default_factory=dict)
    capacity: Mapping[int, Series] = field(default_factory=dict)
    weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "demand", dict(self.demand))
        object.__setattr__(self, "capacity", dict(self.capacity))

    def __eq__(self, other):
        if not isinstance(other, ScenarioData):
            return NotImplemented
        return (
            self.id == other.id
            and dict(self.demand) == dict(other.demand)
            and dict(self.capacity) == dict(other.capacity)
            and self.weight == other.weight
        )


@dataclass(frozen=True)
class NetworkCase:
    nodes: int
    lines: tuple[LineSpec, ...] = ()
    generators: tuple[GenSpec, ...] = ()
    loads: tuple[LoadSpec, ...] = ()
    batteries: tuple[BatterySpec, ...] = ()
    scenarios: tuple[ScenarioData, ...] = ()
    horizon: int = 1
    epsilon: float | None = None
    curtailment_cost: float = 500.0

    def scenario_count(self) -> int:
        return max(1, len(self.scenarios))

    def scenario(self, index: int) -> ScenarioData:
        if self.scenarios:
            return self.scenarios[index]
        if index != 0:
            raise IndexError(f"scenario {index} of a single-scenario case")
        return ScenarioData(id="base")

    def scenario_weights(self) -> np.ndarray:
        if not self.scenarios:
            return np.array([1.0])
        w = np.array([s.weight for s in self.scenarios], dtype=float)
        return w / w.sum()

    def regularization(self) -> float:
        """Effective quadratic regularization coefficient.

        Defaults to 1e-4 times the median generator marginal cost; falls back
        to 1e-4 when that median is not positive (e.g. an all-free fleet), so
        the dispatch cost stays strongly convex.
        """
        if self.epsilon is not None:
            return self.epsilon
        costs = [g.marginal_cost for g in self.generators]
        scale = float(np.median(costs)) if costs else 0.0
        return 1e-4 * (scale if scale > 0 else 1.0)

    def demand_series(self, load_index: int, scenario: int) -> Series:
        base = self.loads[load_index].demand
        if self.scenarios:
            return self.scenarios[scenario].demand.get(load_index, base)
        return base

    def capacity_series(self, gen_index: int, scenario: int) -> Series:
        base = self.generators[gen_index].capacity
        if self.scenarios:
            return self.scenarios[scenario].capacity.get(gen_index, base)
        return base


@dataclass(frozen=True)
class ParamSpace:
    """Investment vector layout: lines first (by index), then generators,
    then batteries.  Fixed devices keep a zero-width slot so eta indices are
    stable across case variants."""

    eta_min: np.ndarray
    eta_max: np.ndarray
    gamma: np.ndarray
    binary: np.ndarray  # bool mask
    labels: tuple[tuple[str, int], ...]

    @property
    def size(self) -> int:
        return self.eta_min.shape[0]

    def contains(self, eta: np.ndarray, tol: float = 1e-9) -> bool:
        eta = np.asarray(eta, dtype=float)
        if eta.shape != self.eta_min.shape:
            return False
        span = np.maximum(1.0, self.eta_max - self.eta_min)
        return bool(
            np.all(eta >= self.eta_min - tol * span)
            and np.all(eta <= self.eta_max + tol * span)
        )


def investment_space(case: NetworkCase) -> ParamSpace:
    los, his, costs, binary, labels = [], [], [], [], []
    for kind, devices in (
        ("line", case.lines),
        ("generator", case.generators),
        ("battery", case.batteries),
    ):
        for idx, dev in enumerate(devices):
            inv = dev.investment
            los.append(inv.eta_min)
            his.append(inv.eta_max)
            costs.append(inv.unit_cost)
            binary.append(inv.kind == "binary")
            labels.append((kind, idx))
    return ParamSpace(
        eta_min=np.array(los, dtype=float),
        eta_max=np.array(his, dtype=float),
        gamma=np.array(costs, dtype=float),
        binary=np.array(binary, dtype=bool),
        labels=tuple(labels),
    )


@dataclass
class ValidationReport:
    entries: list[tuple[str, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.entries

    def add(self, path: str, message: str) -> None:
        self.entries.append((path, message))

    def __str__(self) -> str:
        if self.ok:
            return "case valid"
        return "\n".join(f"{path}: {msg}" for path, msg in self.entries)


def _check_series(report: ValidationReport, path: str, series: Series, horizon: int,
                  nonnegative: bool = False) -> None:
    if len(series) not in (1, horizon):
        report.add(path, f"series length {len(series)} is neither 1 nor horizon {horizon}")
    for v in series:
        if not math.isfinite(v):
            report.add(path, "non-finite value")
            break
        if nonnegative and v < 0:
            report.add(path, f"negative value {v}")
            break


def _check_bounds(report: ValidationReport, path: str, inv: InvestmentBounds) -> None:
    if not (math.isfinite(inv.eta_min) and math.isfinite(inv.eta_max)):
        report.add(path, "non-finite investment bounds")
        return
    if inv.eta_min < 0:
        report.add(path, f"eta_min {inv.eta_min} < 0")
    if inv.eta_max < inv.eta_min:
        report.add(path, f"eta_max {inv.eta_max} < eta_min {inv.eta_min}")
    if inv.unit_cost < 0:
        report.add(path, f"unit cost {inv.unit_cost} < 0")
    if inv.kind not in ("continuous", "binary"):
        report.add(path, f"unknown investment kind {inv.kind!r}")


def validate_case(case: NetworkCase) -> ValidationReport:
    """Check every model invariant; the report is empty iff the case is valid."""
    rep = ValidationReport()
    n, T = case.nodes, case.horizon
    if n < 2:
        rep.add("nodes", f"need at least 2 nodes, got {n}")
    if T < 1:
        rep.add("horizon", f"horizon must be >= 1, got {T}")

    def check_node(path: str, i: int) -> None:
        if not (0 <= i < n):
            rep.add(path, f"node index {i} outside [0, {n})")

    for k, line in enumerate(case.lines):
        p = f"lines[{k}]"
        check_node(p + ".from", line.from_node)
        check_node(p + ".to", line.to_node)
        if line.from_node == line.to_node:
            rep.add(p, "line endpoints must be distinct")
        if not line.susceptance_per_unit > 0:
            rep.add(p, f"susceptance_per_unit must be > 0, got {line.susceptance_per_unit}")
        if line.flow_limit_per_susceptance < 0:
            rep.add(p, f"flow limit {line.flow_limit_per_susceptance} < 0")
        _check_bounds(rep, p + ".investment", line.investment)

    for k, gen in enumerate(case.generators):
        p = f"generators[{k}]"
        check_node(p + ".node", gen.node)
        if gen.marginal_cost < 0:
            rep.add(p, f"marginal cost {gen.marginal_cost} < 0")
        if gen.emissions_rate < 0:
            rep.add(p, f"emissions rate {gen.emissions_rate} < 0")
        _check_series(rep, p + ".capacity", gen.capacity, T, nonnegative=True)
        _check_bounds(rep, p + ".investment", gen.investment)

    for k, load in enumerate(case.loads):
        p = f"loads[{k}]"
        check_node(p + ".node", load.node)
        _check_series(rep, p + ".demand", load.demand, T, nonnegative=True)

    for k, bat in enumerate(case.batteries):
        p = f"batteries[{k}]"
        check_node(p + ".node", bat.node)
        if bat.power_limit < 0:
            rep.add(p, f"power limit {bat.power_limit} < 0")
        if bat.duration < 0:
            rep.add(p, f"duration {bat.duration} < 0")
        _check_bounds(rep, p + ".investment", bat.investment)
        active = bat.power_limit > 0 or not bat.investment.fixed
        if active and T < 2:
            rep.add(p, "battery requires T >= 2")

    total_weight = 0.0
    for k, scen in enumerate(case.scenarios):
        p = f"scenarios[{k}]"
        if scen.weight < 0:
            rep.add(p + ".weight", f"negative weight {scen.weight}")
        total_weight += max(scen.weight, 0.0)
        for li, series in scen.demand.items():
            if not (0 <= li < len(case.loads)):
                rep.add(f"{p}.demand[{li}]", "references a missing load")
            else:
                _check_series(rep, f"{p}.demand[{li}]", series, T, nonnegative=True)
        for gi, series in scen.capacity.items():
            if not (0 <= gi < len(case.generators)):
                rep.add(f"{p}.capacity[{gi}]", "references a missing generator")
            else:
                _check_series(rep, f"{p}.capacity[{gi}]", series, T, nonnegative=True)
    if case.scenarios and total_weight <= 0:
        rep.add("scenarios", "scenario weights must sum to a positive value")

    if case.epsilon is not None and case.epsilon < 0:
        rep.add("epsilon", f"epsilon {case.epsilon} < 0")
    if case.curtailment_cost < 0:
        rep.add("curtailment_cost", f"curtailment cost {case.curtailment_cost} < 0")
    return rep


# ---------------------------------------------------------------------------
# JSON case files


def _inv_to_json(inv: InvestmentBounds) -> dict:
    return {
        "min": inv.eta_min,
        "max": inv.eta_max,
        "cost": inv.unit_cost,
        "kind": inv.kind,
    }


def _series_to_json(series: Series):
    return series[0] if len(series) == 1 else list(series)


def serialize_case(case: NetworkCase) -> str:
    """Render a case to the canonical JSON document (inverse of load_case)."""
    doc = {
        "nodes": case.nodes,
        "lines": [
            {
                "from": l.from_node,
                "to": l.to_node,
                "susceptance": l.susceptance_per_unit,
                "flow_limit": l.flow_limit_per_susceptance,
                "investment": _inv_to_json(l.investment),
            }
            for l in case.lines
        ],
        "generators": [
            {
                "node": g.node,
                "marginal_cost": g.marginal_cost,
                "emissions_rate": g.emissions_rate,
                "capacity": _series_to_json(g.capacity),
                "investment": _inv_to_json(g.investment),
                **({"owner": g.owner} if g.owner is not None else {}),
            }
            for g in case.generators
        ],
        "loads": [
            {"node": l.node, "demand": _series_to_json(l.demand)} for l in case.loads
        ],
        "batteries": [
            {
                "node": b.node,
                "power_limit": b.power_limit,
                "duration": b.duration,
                "investment": _inv_to_json(b.investment),
            }
            for b in case.batteries
        ],
        "scenarios": [
            {
                "id": s.id,
                "demand": {str(k): _series_to_json(v) for k, v in s.demand.items()},
                "capacity": {str(k): _series_to_json(v) for k, v in s.capacity.items()},
                "weight": s.weight,
            }
            for s in case.scenarios
        ],
        "horizon": case.horizon,
        "epsilon": case.epsilon,
        "curtailment_cost": case.curtailment_cost,
    }
    return json.dumps(doc, indent=2)


def _require(cond: bool, msg: str):
    if not cond:
        raise ParseError(msg)


def _parse_inv(obj, path: str) -> InvestmentBounds:
    if obj is None:
        return InvestmentBounds()
    _require(isinstance(obj, dict), f"{path}: investment must be an object")
    try:
        return InvestmentBounds(
            eta_min=float(obj.get("min", 1.0)),
            eta_max=float(obj.get("max", 1.0)),
            unit_cost=float(obj.get("cost", 0.0)),
            kind=str(obj.get("kind", "continuous")),
        )
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{path}: bad investment field ({exc})") from None


def _parse_series(obj, path: str) -> Series:
    if isinstance(obj, (int, float)):
        return (float(obj),)
    _require(isinstance(obj, (list, tuple)) and len(obj) > 0,
             f"{path}: expected a number or non-empty list")
    try:
        return tuple(float(v) for v in obj)
    except (TypeError, ValueError):
        raise ParseError(f"{path}: series entries must be numbers") from None


def load_case(data: bytes | str) -> NetworkCase:
    """Parse and validate a JSON case document.

    Raises ParseError on malformed input and ValidationError (with the path of
    the first offending field) when an invariant is violated.
    """
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise ParseError(f"not valid JSON: {exc}") from None
    _require(isinstance(doc, dict), "top level must be a JSON object")
    _require("nodes" in doc, "missing required key 'nodes'")
    known = {"nodes", "lines", "generators", "loads", "batteries", "scenarios",
             "horizon", "epsilon", "curtailment_cost"}
    unknown = set(doc) - known
    _require(not unknown, f"unknown top-level keys: {sorted(unknown)}")

    def section(key: str) -> list:
        value = doc.get(key, [])
        _require(isinstance(value, list), f"'{key}' must be a list")
        return value

    lines = []
    for k, obj in enumerate(section("lines")):
        p = f"lines[{k}]"
        _require(isinstance(obj, dict), f"{p}: must be an object")
        try:
            lines.append(LineSpec(
                from_node=int(obj["from"]),
                to_node=int(obj["to"]),
                susceptance_per_unit=float(obj["susceptance"]),
                flow_limit_per_susceptance=float(obj["flow_limit"]),
                investment=_parse_inv(obj.get("investment"), p),
            ))
        except KeyError as exc:
            raise ParseError(f"{p}: missing field {exc}") from None
        except (TypeError, ValueError) as exc:
            raise ParseError(f"{p}: {exc}") from None

    gens = []
    for k, obj in enumerate(section("generators")):
        p = f"generators[{k}]"
        _require(isinstance(obj, dict), f"{p}: must be an object")
        try:
            gens.append(GenSpec(
                node=int(obj["node"]),
                marginal_cost=float(obj["marginal_cost"]),
                emissions_rate=float(obj.get("emissions_rate", 0.0)),
                capacity=_parse_series(obj.get("capacity", 0.0), p + ".capacity"),
                investment=_parse_inv(obj.get("investment"), p),
                owner=obj.get("owner"),
            ))
        except KeyError as exc:
            raise ParseError(f"{p}: missing field {exc}") from None
        except (TypeError, ValueError) as exc:
            raise ParseError(f"{p}: {exc}") from None

    loads = []
    for k, obj in enumerate(section("loads")):
        p = f"loads[{k}]"
        _require(isinstance(obj, dict), f"{p}: must be an object")
        try:
            loads.append(LoadSpec(
                node=int(obj["node"]),
                demand=_parse_series(obj["demand"], p + ".demand"),
            ))
        except KeyError as exc:
            raise ParseError(f"{p}: missing field {exc}") from None
        except (TypeError, ValueError) as exc:
            raise ParseError(f"{p}: {exc}") from None

    bats = []
    for k, obj in enumerate(section("batteries")):
        p = f"batteries[{k}]"
        _require(isinstance(obj, dict), f"{p}: must be an object")
        try:
            bats.append(BatterySpec(
                node=int(obj["node"]),
                power_limit=float(obj["power_limit"]),
                duration=float(obj["duration"]),
                investment=_parse_inv(obj.get("investment"), p),
            ))
        except KeyError as exc:
            raise ParseError(f"{p}: missing field {exc}") from None
        except (TypeError, ValueError) as exc:
            raise ParseError(f"{p}: {exc}") from None

    scens = []
    for k, obj in enumerate(section("scenarios")):
        p = f"scenarios[{k}]"
        _require(isinstance(obj, dict), f"{p}: must be an object")

        def overrides(key: str) -> dict[int, Series]:
            raw = obj.get(key, {})
            _require(isinstance(raw, dict), f"{p}.{key}: must be an object")
            out = {}
            for idx_str, series in raw.items():
                try:
                    idx = int(idx_str)
                except ValueError:
                    raise ParseError(f"{p}.{key}: key {idx_str!r} is not an index") from None
                out[idx] = _parse_series(series, f"{p}.{key}[{idx_str}]")
            return out

        scens.append(ScenarioData(
            id=str(obj.get("id", f"s{k}")),
            demand=overrides("demand"),
            capacity=overrides("capacity"),
            weight=float(obj.get("weight", 1.0)),
        ))

    try:
        case = NetworkCase(
            nodes=int(doc["nodes"]),
            lines=tuple(lines),
            generators=tuple(gens),
            loads=tuple(loads),
            batteries=tuple(bats),
            scenarios=tuple(scens),
            horizon=int(doc.get("horizon", 1)),
            epsilon=None if doc.get("epsilon") is None else float(doc["epsilon"]),
            curtailment_cost=float(doc.get("curtailment_cost", 500.0)),
        )
    except (TypeError, ValueError) as exc:
        raise ParseError(f"bad top-level field: {exc}") from None

    report = validate_case(case)
    if not report.ok:
        raise ValidationError(report)
    return case


# ---------------------------------------------------------------------------
# Built-in 6-bus benchmark

# Classical 6-bus planning data: per-corridor reactance (p.u.), thermal limit
# per circuit (MW), and build cost per circuit (investment cost units).  Keys
# are 0-based node pairs.
_CORRIDORS: dict[tuple[int, int], tuple[float, float, float]] = {
    (0, 1): (0.40, 100.0, 40.0),
    (0, 2): (0.38, 100.0, 38.0),
    (0, 3): (0.60, 80.0, 60.0),
    (0, 4): (0.20, 100.0, 20.0),
    (0, 5): (0.68, 70.0, 68.0),
    (1, 2): (0.20, 100.0, 20.0),
    (1, 3): (0.40, 100.0, 40.0),
    (1, 4): (0.31, 100.0, 31.0),
    (1, 5): (0.30, 100.0, 30.0),
    (2, 3): (0.59, 82.0, 59.0),
    (2, 4): (0.20, 100.0, 20.0),
    (2, 5): (0.48, 100.0, 48.0),
    (3, 4): (0.63, 75.0, 63.0),
    (3, 5): (0.30, 100.0, 30.0),
    (4, 5): (0.61, 78.0, 61.0),
}

_EXISTING = ((0, 1), (0, 3), (0, 4), (1, 2), (1, 3), (2, 4))

# Circuit caps per candidate corridor: corridors into the islanded node 5 and
# the cheap relief corridors may take several circuits, matching the classical
# expansion patterns this benchmark is known for.
_CIRCUIT_CAP = {
    (0, 5): 3.0, (1, 5): 3.0, (2, 5): 3.0, (3, 5): 3.0, (4, 5): 3.0,
    (0, 4): 2.0, (1, 2): 2.0, (2, 4): 2.0,
}


def _corridor_line(pair: tuple[int, int], investment: InvestmentBounds) -> LineSpec:
    reactance, limit_mw, _cost = _CORRIDORS[pair]
    susceptance = 1.0 / reactance
    return LineSpec(
        from_node=pair[0],
        to_node=pair[1],
        susceptance_per_unit=susceptance,
        # one circuit (eta = 1) carries limit_mw
        flow_limit_per_susceptance=limit_mw / susceptance,
        investment=investment,
    )


def make_garver_case(
    fuel_costs: bool = True,
    line_kind: str = "binary",
) -> NetworkCase:
    """The classical 6-node planning benchmark.

    Five loaded nodes draw 80/240/40/160/240 MW (760 MW total); generation is
    a 150 MW gas unit at node 0, a 360 MW coal unit at node 2, and a 600 MW
    solar plant at node 5 that starts disconnected from the rest of the grid.
    Six corridors carry existing circuits; all 15 node pairs accept new ones,
    with one investment slot per candidate circuit so corridors that admit
    parallel circuits expose each as a separate 0/1 decision (28 slots total).

    ``fuel_costs=False`` zeroes the marginal costs, the reference setting for
    pure transmission-cost planning studies on this system.  ``line_kind``
    sets the investment kind of the candidate circuits ("binary" by default;
    planners relax binaries to their continuous hull and round afterwards).

    Candidate build costs are the classical per-circuit corridor costs; they
    are not stated in any modern source for this benchmark and are validated
    here only through the planning results they produce.
    """
    if line_kind not in ("continuous", "binary"):
        raise ValueError(f"line_kind must be 'continuous' or 'binary', got {line_kind!r}")

    lines = [
        _corridor_line(pair, InvestmentBounds.fixed_at(1.0)) for pair in _EXISTING
    ]
    for pair in sorted(_CORRIDORS):
        for _ in range(int(_CIRCUIT_CAP.get(pair, 1.0))):
            lines.append(_corridor_line(pair, InvestmentBounds(
                eta_min=0.0,
                eta_max=1.0,
                unit_cost=_CORRIDORS[pair][2],
                kind=line_kind,
            )))

    def cost(c: float) -> float:
        return c if fuel_costs else 0.0

    generators = (
        GenSpec(node=0, marginal_cost=cost(36.8), emissions_rate=0.44,
                capacity=(150.0,), investment=InvestmentBounds.fixed_at(1.0),
                owner="gas"),
        GenSpec(node=2, marginal_cost=cost(22.4), emissions_rate=1.03,
                capacity=(360.0,), investment=InvestmentBounds.fixed_at(1.0),
                owner="coal"),
        GenSpec(node=5, marginal_cost=0.0, emissions_rate=0.0,
                capacity=(600.0,), investment=InvestmentBounds.fixed_at(1.0),
                owner="solar"),
    )
    loads = (
        LoadSpec(node=0, demand=(80.0,)),
        LoadSpec(node=1, demand=(240.0,)),
        LoadSpec(node=2, demand=(40.0,)),
        LoadSpec(node=3, demand=(160.0,)),
        LoadSpec(node=4, demand=(240.0,)),
    )
    return NetworkCase(
        nodes=6,
        lines=tuple(lines),
        generators=generators,
        loads=loads,
        curtailment_cost=500.0,
    )


# ---------------------------------------------------------------------------
# Synthetic cases


@dataclass(frozen=True)
class GenOptions:
    """Knobs for gen_synthetic.  Defaults make a connected transmission grid
    with roughly 2.2 lines per node, generation at ~40% of nodes covering
    total demand with margin, and a slice of the lines open to investment."""

    line_density: float = 2.2
    candidate_fraction: float = 0.3
    gen_node_fraction: float = 0.4
    demand_range: tuple[float, float] = (20.0, 200.0)
    cost_range: tuple[float, float] = (5.0, 50.0)
    emissions_range: tuple[float, float] = (0.0, 1.2)
    capacity_margin: float = 1.3
    line_limit_range: tuple[float, float] = (80.0, 250.0)
    line_cost_range: tuple[float, float] = (15.0, 70.0)
    candidate_max_units: float = 2.0
    scenario_count: int = 1
    horizon: int = 1
    battery_fraction: float = 0.0
    battery_cost_per_mwh: float = 151_940.0
    curtailment_cost: float = 500.0


def gen_synthetic(n_nodes: int, seed: int, opts: GenOptions | None = None) -> NetworkCase:
    """Deterministic random case: a pure function of (n_nodes, seed, opts).

    The existing-line subgraph is always connected, every load can be
    curtailed at the case's curtailment cost, and installed generation covers
    peak demand with margin, so any instantiated dispatch is feasible.
    """
    opts = opts or GenOptions()
    if n_nodes < 2:
        raise InvalidOptions(f"need at least 2 nodes, got {n_nodes}")
    if opts.scenario_count < 1:
        raise InvalidOptions("scenario_count must be >= 1")
    if opts.horizon < 1:
        raise InvalidOptions("horizon must be >= 1")
    if opts.battery_fraction > 0 and opts.horizon < 2:
        raise InvalidOptions("batteries need horizon >= 2")
    if not 0 <= opts.candidate_fraction <= 1:
        raise InvalidOptions("candidate_fraction must lie in [0, 1]")

    rng = np.random.default_rng(seed)
    n = n_nodes
    T = opts.horizon

    # random spanning tree keeps the existing grid connected
    order = rng.permutation(n)
    edges: list[tuple[int, int]] = []
    edge_set = set()
    for i in range(1, n):
        a = int(order[i])
        b = int(order[rng.integers(0, i)])
        pair = (min(a, b), max(a, b))
        edges.append(pair)
        edge_set.add(pair)

    target = max(n - 1, int(round(opts.line_density * n)))
    attempts = 0
    while len(edges) < target and attempts < 50 * target:
        a, b = rng.integers(0, n, size=2)
        attempts += 1
        if a == b:
            continue
        pair = (int(min(a, b)), int(max(a, b)))
        if pair in edge_set:
            continue
        edges.append(pair)
        edge_set.add(pair)

    n_candidates = int(round(opts.candidate_fraction * (len(edges) - (n - 1))))
    lines = []
    for k, (a, b) in enumerate(edges):
        susceptance = float(rng.uniform(1.5, 6.0))
        limit = float(rng.uniform(*opts.line_limit_range))
        # extra edges beyond the spanning tree may be candidates
        is_candidate = k >= len(edges) - n_candidates
        if is_candidate:
            inv = InvestmentBounds(
                eta_min=0.0,
                eta_max=opts.candidate_max_units,
                unit_cost=float(rng.uniform(*opts.line_cost_range)),
                kind="continuous",
            )
        else:
            inv = InvestmentBounds.fixed_at(1.0)
        lines.append(LineSpec(
            from_node=a,
            to_node=b,
            susceptance_per_unit=susceptance,
            flow_limit_per_susceptance=limit / susceptance,
            investment=inv,
        ))

    n_gen = max(1, int(round(opts.gen_node_fraction * n)))
    n_gen = min(n_gen, n - 1)  # leave at least one pure load node
    gen_nodes = sorted(int(v) for v in rng.choice(n, size=n_gen, replace=False))
    load_nodes = [i for i in range(n) if i not in set(gen_nodes)]

    def profile(base: float) -> Series:
        if T == 1:
            return (base,)
        phase = rng.uniform(0, 2 * np.pi)
        t = np.arange(T)
        values = base * (1.0 + 0.3 * np.sin(2 * np.pi * t / T + phase))
        return tuple(float(v) for v in np.maximum(values, 0.0))

    loads = tuple(
        LoadSpec(node=i, demand=profile(float(rng.uniform(*opts.demand_range))))
        for i in load_nodes
    )
    peak_demand = sum(max(l.demand) for l in loads)

    shares = rng.dirichlet(np.ones(n_gen))
    generators = tuple(
        GenSpec(
            node=gen_nodes[j],
            marginal_cost=float(rng.uniform(*opts.cost_range)),
            emissions_rate=float(rng.uniform(*opts.emissions_range)),
            capacity=(float(shares[j] * peak_demand * opts.capacity_margin),),
            investment=InvestmentBounds.fixed_at(1.0),
        )
        for j in range(n_gen)
    )

    batteries = ()
    if opts.battery_fraction > 0:
        n_bat = max(1, int(round(opts.battery_fraction * len(load_nodes))))
        bat_nodes = sorted(int(v) for v in rng.choice(load_nodes, size=min(n_bat, len(load_nodes)), replace=False))
        batteries = tuple(
            BatterySpec(
                node=i,
                power_limit=float(rng.uniform(10.0, 60.0)),
                duration=float(rng.uniform(2.0, 6.0)),
                investment=InvestmentBounds.fixed_at(1.0),
            )
            for i in bat_nodes
        )

    scenarios: tuple[ScenarioData, ...] = ()
    if opts.scenario_count > 1:
        scens = []
        for s in range(opts.scenario_count):
            mult = rng.uniform(0.7, 1.3, size=len(loads))
            demand = {
                i: tuple(float(mult[i] * v) for v in loads[i].demand)
                for i in range(len(loads))
            }
            scens.append(ScenarioData(id=f"s{s}", demand=demand, weight=1.0))
        scenarios = tuple(scens)

    case = NetworkCase(
        nodes=n,
        lines=tuple(lines),
        generators=generators,
        loads=loads,
        batteries=batteries,
        scenarios=scenarios,
        horizon=T,
        curtailment_cost=opts.curtailment_cost,
    )
    report = validate_case(case)
    if not report.ok:  # generator bug, not user error
        raise AssertionError(f"synthetic case failed validation:\n{report}")
    return case
