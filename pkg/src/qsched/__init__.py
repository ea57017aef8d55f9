"""Discrete-time multi-server queueing simulator with MaxWeight scheduling
under discounted-UCB learning of service rates."""

from .capacity import max_slackness, scale_to_slackness
from .config import load_plan, parse_plan
from .engine import Trajectory, simulate_batch, simulate_reference
from .errors import ConfigError, ContractViolation, InfeasibleTarget, SourceExhausted
from .experiments import (
    ExperimentPlan, RunAggregate, aggregate_runs, run_counterexample, run_policy,
    run_simulation, tail_estimate,
)
from .model import NONE, SlotEvents, SystemConfig, SystemState, advance_slot, available_servers
from .policies import EstimatorState, PolicySpec, estimator_update
from .stochastic import (
    ArrivalSpec, ServiceSpec, Timeline, constant_services, two_point_services, weibull_services,
)

__version__ = "0.1.0"
