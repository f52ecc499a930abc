"""Fluid model, equilibrium solver and packet-level simulator for Reno and
LEDBAT sharing a RED or DropTail bottleneck."""

from .core_types import (
    ConfigError,
    FlowPopulation,
    LedbatParams,
    LinkParams,
    RedProfile,
    ScenarioConfig,
    load_config,
    queue_delay_s,
    red_drop_prob,
)
from .equilibrium import EquilibriumPoint, Regime, refined_rho, solve
from .fluid_ode import FluidState, Trajectory, converge, integrate

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "EquilibriumPoint",
    "FlowPopulation",
    "FluidState",
    "LedbatParams",
    "LinkParams",
    "RedProfile",
    "Regime",
    "ScenarioConfig",
    "Trajectory",
    "converge",
    "integrate",
    "load_config",
    "queue_delay_s",
    "red_drop_prob",
    "refined_rho",
    "solve",
]
