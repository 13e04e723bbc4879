"""Centralized reference solver: the whole community as one QP.

Stacks every prosumer's scheduling block, the per-slot trade clearing
constraint, and the feeder block into a single problem and solves it to
global optimality. It reuses exactly the constraint builders of the
distributed subproblems, so the two paths cannot drift apart; the only
difference is the stacking and the absence of the consensus machinery.

With trading disabled the trade vectors are pinned to zero, which yields
the standalone baseline used in cost-reduction comparisons.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .agent import (FEEDIN, GRID, TRADE, QpBuilder, ScheduleCols,
                    add_scheduling_block, block_size, decision_from_solution)
from .model import ScheduleDecision, evaluate_schedule_cost, evaluate_trading_cost
from .network import NetworkInfeasibleError, NetworkState, add_network_block
from .qp import INFEASIBLE, OPTIMAL, QpSolution, SolverSettings, solve
from .validation import require


def build_centralized(scenario, trading_enabled: bool = True):
    """Stack the community QP; returns the problem plus its column maps.

    With trading disabled the trade caps are pinned to zero, which yields
    the standalone baseline.
    """
    prosumers = scenario.prosumers
    net = scenario.network
    n = len(prosumers)
    require(n >= 1, "at least one prosumer is required")
    require(net.n_branches == n, "network must have one branch per prosumer")
    h = scenario.grid.horizon
    if not trading_enabled:
        zeros = np.zeros(h)
        prosumers = tuple(replace(p, trade_min=zeros, trade_max=zeros)
                          for p in prosumers)

    sizes = [block_size(p.horizon) for p in prosumers]
    grid_vars = 3 * (n + 1) * h
    b = QpBuilder(sum(sizes) + grid_vars)

    cols: list[ScheduleCols] = []
    start = 0
    for p in prosumers:
        c = add_scheduling_block(b, p, scenario.trade_prices, start)
        cols.append(c)
        start += c.size

    # with trading disabled the caps already pin every trade variable, and
    # keeping the clearing rows would only add redundant equalities
    balance_rows = [
        b.add_row([c.var(TRADE, t) for c in cols], [1.0] * n,
                  0.0, 0.0, "trade_balance")
        for t in range(h)] if trading_enabled else []

    base = start

    def inj_cols(node):
        return np.arange(base + node * h, base + (node + 1) * h)

    def q_cols(node):
        off = base + (n + 1) * h
        return np.arange(off + node * h, off + (node + 1) * h)

    def v_cols(node):
        off = base + 2 * (n + 1) * h
        return np.arange(off + node * h, off + (node + 1) * h)

    def output_cols(i, t):
        c = cols[i]
        return ([c.var(FEEDIN, t), c.var(GRID, t), c.var(TRADE, t)],
                [1.0, -1.0, -1.0])

    q_loads = np.stack([p.q_load for p in prosumers])
    add_network_block(b, net, q_loads, output_cols, inj_cols, q_cols, v_cols)
    return b.build(), cols, balance_rows, (inj_cols, q_cols, v_cols)


#: tolerances for the community-scale solves; comfortably tighter than the
#: 1e-6 feasibility contract, but above the splitting iteration's numerical
#: floor on these large, partly degenerate problems
COMMUNITY_SETTINGS = SolverSettings(abs_tol=1e-7, rel_tol=1e-7)


def _solve_built(scenario, qp, settings):
    solution = solve(qp, settings or COMMUNITY_SETTINGS)
    if solution.status == INFEASIBLE:
        raise NetworkInfeasibleError(_dominant_family(solution, qp))
    if solution.status != OPTIMAL:
        raise RuntimeError(
            f"centralized solve ended with status {solution.status} "
            f"(primal {solution.primal_residual:.2e}, "
            f"dual {solution.dual_residual:.2e})")
    return solution


def solve_centralized(scenario, trading_enabled: bool = True,
                      settings: SolverSettings | None = None,
                      ) -> tuple[list[ScheduleDecision], float, NetworkState]:
    """Globally optimal schedules, the total objective, and the feeder state.

    Raises :class:`NetworkInfeasibleError` naming the dominating constraint
    family if the scenario admits no feasible operation.
    """
    prosumers = scenario.prosumers
    n = len(prosumers)
    h = scenario.grid.horizon
    qp, cols, _, (inj_cols, q_cols, v_cols) = build_centralized(
        scenario, trading_enabled)
    solution = _solve_built(scenario, qp, settings)

    decisions = [decision_from_solution(solution.x, c, p)
                 for c, p in zip(cols, prosumers)]
    objective = float(sum(
        evaluate_schedule_cost(d, p) + evaluate_trading_cost(d.p_trade, scenario.trade_prices)
        for d, p in zip(decisions, prosumers)))

    p_inj = np.stack([solution.x[inj_cols(i)] for i in range(n + 1)])
    q_inj = np.stack([solution.x[q_cols(i)] for i in range(n + 1)])
    volt = np.stack([solution.x[v_cols(i)] for i in range(n + 1)])
    out = np.stack([d.p_feedin - d.p_grid - d.p_trade for d in decisions])
    net_state = NetworkState(p_injection=p_inj, q_injection=q_inj,
                             voltage=volt, p_output=out)
    return decisions, objective, net_state


def clearing_prices(scenario, settings: SolverSettings | None = None) -> np.ndarray:
    """Per-slot prices at which the posted trading price carries the whole
    value of a traded unit: the posted price shifted by the multiplier of
    the clearing constraint. Settling at these prices leaves no prosumer
    worse off than standing alone."""
    qp, _, balance_rows, _ = build_centralized(scenario, trading_enabled=True)
    solution = _solve_built(scenario, qp, settings)
    mu = solution.y[np.asarray(balance_rows, dtype=int)]
    return np.asarray(scenario.trade_prices, dtype=float) + mu


def _dominant_family(solution: QpSolution, qp) -> str:
    cert = solution.infeasibility_certificate
    if cert is None or qp.row_labels is None:
        return "unknown"
    weight: dict[str, float] = {}
    for lab, v in zip(qp.row_labels, np.abs(cert)):
        weight[lab] = weight.get(lab, 0.0) + float(v)
    return max(weight, key=weight.get)
