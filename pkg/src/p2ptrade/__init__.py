"""Network-aware peer-to-peer energy trading for smart-home prosumers.

Building blocks: a prosumer device model with cost evaluation, an embedded
convex QP solver, prosumer/operator subproblems coordinated by a
synchronous or asynchronous distributed loop, a centralized reference
solver, and scenario tooling with a CLI.
"""

from .agent import (AgentUpdate, CouplingSignals, ProsumerAgent, build_lp,
                    solve_lp)
from .coordinator import (ActivationModel, RunConfig, RunResult,
                          StepsizeSchedule, check_convergence, run, step)
from .estimators import CentralizedSolver, DistributedTradingSolver
from .model import (ProsumerParams, ScheduleDecision, TimeGrid, Violation,
                    ViolationReport, check_feasibility, cost_breakdown,
                    evaluate_schedule_cost, evaluate_trading_cost,
                    simulate_battery, simulate_temperature)
from .network import (NetworkInfeasibleError, NetworkModel, NetworkOperator,
                      NetworkState, OperatorState, build_up, propagate,
                      residuals, update_duals)
from .oracle import solve_centralized
from .qp import (QpSolution, QpSolver, QuadraticProgram, SolverSettings,
                 solve)
from .scenario import (Scenario, ScenarioError, generate_synthetic,
                       load_scenario, run_experiment, save_scenario)

__all__ = [
    "ActivationModel", "AgentUpdate", "CentralizedSolver", "CouplingSignals",
    "DistributedTradingSolver", "NetworkInfeasibleError", "NetworkModel",
    "NetworkOperator", "NetworkState", "OperatorState", "ProsumerAgent",
    "ProsumerParams", "QpSolution", "QpSolver", "QuadraticProgram",
    "RunConfig", "RunResult", "Scenario", "ScenarioError", "ScheduleDecision",
    "SolverSettings", "StepsizeSchedule", "TimeGrid", "Violation",
    "ViolationReport", "build_lp", "build_up", "check_convergence",
    "check_feasibility", "cost_breakdown", "evaluate_schedule_cost",
    "evaluate_trading_cost", "generate_synthetic", "load_scenario",
    "propagate", "residuals", "run", "run_experiment", "save_scenario",
    "simulate_battery", "simulate_temperature", "solve", "solve_centralized",
    "solve_lp", "step", "update_duals",
]

__version__ = "0.1.0"
