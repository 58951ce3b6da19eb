"""Throughput analysis, simulation, and capacity bounds for multi-server
queues with job replication."""

__version__ = "0.1.0"

from . import analytic, bounds, distributions, engine, mdp, policies
from .distributions import (
    Deterministic,
    Exponential,
    FiniteSupport,
    HyperExp,
    Pareto,
    Shifted,
    min_expectation,
    parse_distribution,
)
from .engine import SystemConfig, run_poisson, run_saturated
from .policies import parse_policy

__all__ = [
    "analytic",
    "bounds",
    "distributions",
    "engine",
    "mdp",
    "policies",
    "Deterministic",
    "Exponential",
    "FiniteSupport",
    "HyperExp",
    "Pareto",
    "Shifted",
    "min_expectation",
    "parse_distribution",
    "parse_policy",
    "SystemConfig",
    "run_poisson",
    "run_saturated",
]
