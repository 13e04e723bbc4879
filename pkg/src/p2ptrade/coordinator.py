"""Outer coordination loop: activation sampling, agent solves, the operator
solve, dual updates, and the residual-based termination test.

One iteration: (1) draw the set of prosumers whose communication round
trips succeed; (2) those prosumers solve their subproblems against the
operator's current prices and consensus targets and send back their trade
and net-load vectors; (3) the operator keeps the last received vectors for
everyone else; (4) the operator solves its subproblem; (5) prices move
toward agreement; (6) residuals are checked. The whole loop is driven by
one master seed and is deterministic, whether the agent solves run
serially or on a thread pool.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .agent import ProsumerAgent
from .model import (ScheduleDecision, cost_breakdown, evaluate_schedule_cost,
                    evaluate_trading_cost)
from .network import NetworkOperator, NetworkState
from .qp import OPTIMAL, SolverSettings
from .validation import require

SYNC = "sync"
ASYNC = "async"


@dataclass(frozen=True)
class ActivationModel:
    """How the per-iteration communication set is drawn.

    kinds: ``all`` (every prosumer, i.e. synchronous), ``bernoulli``
    (each prosumer independently with probability ``p_active``),
    ``fixed-dropout`` (a fixed fraction is silenced each iteration), and
    ``bounded-delay`` (bernoulli, but anyone about to exceed ``max_staleness``
    iterations of silence is forced to participate).
    """

    kind: str = "bernoulli"
    p_active: float = 0.8
    dropout_fraction: float = 0.2
    max_staleness: int = 3

    def __post_init__(self):
        require(self.kind in ("all", "bernoulli", "fixed-dropout", "bounded-delay"),
                f"unknown activation kind: {self.kind!r}")
        require(0.0 < self.p_active <= 1.0, "p_active must lie in (0, 1]")
        require(0.0 <= self.dropout_fraction < 1.0,
                "dropout_fraction must lie in [0, 1)")
        require(self.max_staleness >= 1, "max_staleness must be at least 1")

    def draw(self, rng: np.random.Generator, n: int, k: int,
             last_active: np.ndarray) -> np.ndarray:
        """Boolean mask of prosumers active at iteration ``k``."""
        if self.kind == "all":
            return np.ones(n, dtype=bool)
        if self.kind == "bernoulli":
            return rng.random(n) < self.p_active
        if self.kind == "fixed-dropout":
            mask = np.ones(n, dtype=bool)
            n_drop = int(self.dropout_fraction * n)
            if n_drop:
                mask[rng.permutation(n)[:n_drop]] = False
            return mask
        mask = rng.random(n) < self.p_active
        mask |= (k - last_active) >= self.max_staleness
        return mask


@dataclass(frozen=True)
class StepsizeSchedule:
    """Penalty/stepsize sequence: ``constant`` keeps ``rho0``; ``harmonic``
    uses ``rho0 / k``."""

    kind: str = "harmonic"
    rho0: float = 1.0

    def __post_init__(self):
        require(self.kind in ("constant", "harmonic"),
                f"unknown stepsize schedule: {self.kind!r}")
        require(self.rho0 > 0, "rho0 must be positive")

    def value(self, k: int) -> float:
        if self.kind == "constant":
            return self.rho0
        return self.rho0 / k


def _subproblem_settings() -> SolverSettings:
    # matches the community-solver tolerances; see oracle.COMMUNITY_SETTINGS
    return SolverSettings(abs_tol=1e-7, rel_tol=1e-7)


@dataclass(frozen=True)
class RunConfig:
    mode: str = SYNC
    activation: ActivationModel = field(default_factory=ActivationModel)
    schedule: StepsizeSchedule = field(default_factory=StepsizeSchedule)
    eps_primal: float = 1e-2
    eps_dual: float = 1e-2
    max_iter: int = 2000
    seed: int = 0
    n_jobs: int | None = None
    solver: SolverSettings = field(default_factory=_subproblem_settings)
    trace_path: str | None = None
    network_dump_dir: str | None = None

    def __post_init__(self):
        require(self.mode in (SYNC, ASYNC), f"unknown mode: {self.mode!r}")
        require(self.eps_primal > 0 and self.eps_dual > 0,
                "convergence thresholds must be positive")
        require(self.max_iter >= 1, "max_iter must be at least 1")


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    n_active: int
    primal_residual: float
    dual_residual: float
    objective: float


@dataclass(frozen=True)
class RunResult:
    iterations: int
    converged: bool
    trace: tuple[TraceRecord, ...]
    schedules: tuple[ScheduleDecision, ...]
    duals: tuple[tuple[np.ndarray, np.ndarray], ...]
    aux: tuple[tuple[np.ndarray, np.ndarray], ...]
    objective: float
    cost_breakdowns: tuple[dict, ...]
    network_state: NetworkState | None
    consumed_ages: tuple[tuple[int, ...], ...]

    @property
    def primal_trace(self) -> np.ndarray:
        return np.array([r.primal_residual for r in self.trace])

    @property
    def dual_trace(self) -> np.ndarray:
        return np.array([r.dual_residual for r in self.trace])


def check_convergence(primal: float, dual: float,
                      eps_primal: float, eps_dual: float) -> bool:
    """Converged when both residuals are at or below their thresholds."""
    return primal <= eps_primal and dual <= eps_dual


@dataclass
class CoordinatorState:
    """Mutable per-run state; exposed for instrumentation and tests."""

    k: int
    agents: list[ProsumerAgent]
    operator: NetworkOperator
    rng: np.random.Generator
    config: RunConfig
    last_active: np.ndarray
    last_network_state: NetworkState | None = None
    trace: list[TraceRecord] = field(default_factory=list)
    consumed_ages: list[tuple[int, ...]] = field(default_factory=list)


def init_state(scenario, config: RunConfig) -> CoordinatorState:
    n = len(scenario.prosumers)
    require(n >= 1, "at least one prosumer is required")
    rho1 = config.schedule.value(1)
    agents = [ProsumerAgent(i, p, scenario.trade_prices, config.solver)
              for i, p in enumerate(scenario.prosumers)]
    q_loads = np.stack([p.q_load for p in scenario.prosumers])
    operator = NetworkOperator(scenario.network, q_loads, rho1, config.solver)
    seed_seq = np.random.SeedSequence(config.seed).spawn(1)[0]
    return CoordinatorState(
        k=1, agents=agents, operator=operator,
        rng=np.random.default_rng(seed_seq), config=config,
        last_active=np.zeros(n, dtype=int))


def _solve_agents(state: CoordinatorState, active_idx, rho: float):
    """Solve the active agents' subproblems, serially or on threads. The
    results depend only on each agent's own data, so execution order does
    not matter."""
    k = state.k
    results = {}

    def solve_one(i):
        sig = state.operator.state.signals[i]
        sig = replace(sig, rho_trade=rho, rho_net=rho)
        return i, state.agents[i].solve(sig, k)

    n_jobs = state.config.n_jobs
    if n_jobs and n_jobs > 1 and len(active_idx) > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            for i, res in pool.map(solve_one, active_idx):
                results[i] = res
    else:
        for i in active_idx:
            _, res = solve_one(i)
            results[i] = res
    return results


def step(state: CoordinatorState, active: np.ndarray | None = None) -> TraceRecord:
    """Run one full outer iteration and append its trace record."""
    cfg = state.config
    n = len(state.agents)
    k = state.k
    activation = cfg.activation if cfg.mode == ASYNC else ActivationModel(kind="all")
    if active is None:
        active = activation.draw(state.rng, n, k, state.last_active)
    active = np.asarray(active, dtype=bool)
    rho = cfg.schedule.value(k)

    results = _solve_agents(state, np.nonzero(active)[0], rho)
    fresh = []
    for i, (decision, update, solution) in sorted(results.items()):
        if solution.status == OPTIMAL:
            fresh.append(update)
            state.last_active[i] = k
        # a failed subproblem counts as a missed update: the operator keeps
        # the previous vectors for this prosumer
    state.operator.receive(fresh)
    state.consumed_ages.append(tuple(
        k - upd.iteration for upd in state.operator.state.updates))

    aux, net_state = state.operator.solve_up((rho, rho))
    state.operator.update_duals((rho, rho))
    state.operator.state.iteration = k
    state.last_network_state = net_state

    primal, dual = state.operator.residuals()
    state.operator.state.residual_history.append((k, primal, dual))
    record = TraceRecord(
        iteration=k, n_active=int(np.sum(active)),
        primal_residual=primal, dual_residual=dual,
        objective=_objective_so_far(state))
    state.trace.append(record)
    if cfg.network_dump_dir:
        net_state.to_csv(f"{cfg.network_dump_dir}/network_{k:05d}.csv")
    state.k = k + 1
    return record


def _objective_so_far(state: CoordinatorState) -> float:
    total = 0.0
    for agent in state.agents:
        d = agent.last_decision
        if d is None:
            continue
        total += evaluate_schedule_cost(d, agent.params)
        total += evaluate_trading_cost(d.p_trade, agent.prices)
    return total


def run(scenario, config: RunConfig) -> RunResult:
    """Drive the loop until both residuals clear their thresholds or the
    iteration budget runs out. Deterministic given the config seed."""
    state = init_state(scenario, config)
    converged = False
    while state.k <= config.max_iter:
        record = step(state)
        if check_convergence(record.primal_residual, record.dual_residual,
                             config.eps_primal, config.eps_dual):
            converged = True
            break

    schedules = []
    breakdowns = []
    for agent in state.agents:
        d = agent.last_decision or ScheduleDecision.zeros(agent.params)
        schedules.append(d)
        breakdowns.append(cost_breakdown(d, agent.params, agent.prices))
    objective = float(sum(b["total"] for b in breakdowns))
    op_state = state.operator.state
    result = RunResult(
        iterations=len(state.trace),
        converged=converged,
        trace=tuple(state.trace),
        schedules=tuple(schedules),
        duals=tuple((s.dual_trade, s.dual_net) for s in op_state.signals),
        aux=tuple((s.aux_trade, s.aux_net) for s in op_state.signals),
        objective=objective,
        cost_breakdowns=tuple(breakdowns),
        network_state=state.last_network_state,
        consumed_ages=tuple(state.consumed_ages),
    )
    if config.trace_path:
        write_trace(result, config.trace_path)
    return result


def write_trace(result: RunResult, path) -> None:
    """Per-iteration trace: iteration, active count, residuals, objective."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "n_active", "primal_res", "dual_res", "objective"])
        for r in result.trace:
            w.writerow([r.iteration, r.n_active, repr(r.primal_residual),
                        repr(r.dual_residual), repr(r.objective)])
