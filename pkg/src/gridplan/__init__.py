"""Gradient-based planning of grid investments on differentiable dispatch."""

from gridplan.model import (
    NetworkCase,
    LineSpec,
    GenSpec,
    LoadSpec,
    BatterySpec,
    ScenarioData,
    InvestmentBounds,
    load_case,
    serialize_case,
    make_garver_case,
    gen_synthetic,
    validate_case,
    investment_space,
)

__version__ = "0.1.0"

__all__ = [
    "NetworkCase",
    "LineSpec",
    "GenSpec",
    "LoadSpec",
    "BatterySpec",
    "ScenarioData",
    "InvestmentBounds",
    "load_case",
    "serialize_case",
    "make_garver_case",
    "gen_synthetic",
    "validate_case",
    "investment_space",
    "__version__",
]
