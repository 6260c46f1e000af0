"""Sensor scheduling for continuous-time Kalman filters.

Computes a convex lower bound on the achievable average estimation cost,
Whittle indices for scalar systems, and periodic switching schedules that
approach the bound as the switching period shrinks.
"""
from importlib import resources

__version__ = "0.1.0"


def example_path(name: str = "fig1.json"):
    """Path of a problem file shipped with the package."""
    return resources.files(__name__).joinpath("data", name)


from .model import (  # noqa: E402
    Mode,
    SchedulingProblem,
    SensorLink,
    SystemModel,
    load_problem,
    scalar_problem,
    validate_problem,
)
from .bound import dual_decomposition_solve, evaluate_objective, objective_gradient, solve_bound  # noqa: E402
from .birkhoff import birkhoff_decompose, build_schedule, schedule_from_assignment  # noqa: E402
from .whittle import ScalarSite, scalar_dual_bound, whittle_index  # noqa: E402
from .simulate import compare_policies, run_greedy, run_switching, run_whittle  # noqa: E402

__all__ = [
    "Mode",
    "SchedulingProblem",
    "SensorLink",
    "SystemModel",
    "ScalarSite",
    "birkhoff_decompose",
    "build_schedule",
    "compare_policies",
    "dual_decomposition_solve",
    "evaluate_objective",
    "example_path",
    "load_problem",
    "objective_gradient",
    "run_greedy",
    "run_switching",
    "run_whittle",
    "scalar_dual_bound",
    "scalar_problem",
    "schedule_from_assignment",
    "solve_bound",
    "validate_problem",
    "whittle_index",
]
