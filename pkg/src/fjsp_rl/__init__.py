"""Flexible job-shop scheduling with a minimal-state MDP and a dual-branch Transformer policy."""
from .instances import (ConfigError, GeneratorConfig, Instance, InstanceError, Job, OperationSpec,
                        ParseError, generate, lower_bound_static, parse_fjs, write_fjs)
from .env import (Action, RewardMode, SchedulingState, extract_features, feasible_actions, makespan,
                  reset, step)

__version__ = "0.1.0"

__all__ = [
    "Action", "ConfigError", "GeneratorConfig", "Instance", "InstanceError", "Job", "OperationSpec",
    "ParseError", "RewardMode", "SchedulingState", "extract_features", "feasible_actions", "generate",
    "lower_bound_static", "makespan", "parse_fjs", "reset", "step", "write_fjs",
]
