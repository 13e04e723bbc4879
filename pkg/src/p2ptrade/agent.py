"""Prosumer-side subproblem: build and solve the local scheduling QP.

The agent minimizes its scheduling cost plus trading settlement plus the
price/penalty terms received from the operator, subject to its device
constraints. Only the trade and net-load vectors leave the agent; solar
use, HVAC, and battery operation stay private.

The constraint and cost assembly lives in :func:`add_scheduling_block` so
the centralized reference solver can reuse exactly the same model blocks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .model import ProsumerParams, ScheduleDecision, _thermal_coeffs
from .qp import OPTIMAL, QpSolution, QpSolver, QuadraticProgram, SolverSettings
from .validation import as_vector, require

# per-slot decision families, in column order
GRID, SOLAR, FEEDIN, HVAC, CHARGE, DISCHARGE, TRADE, NET = range(8)
N_FAMILIES = 8


@dataclass(frozen=True)
class CouplingSignals:
    """Operator-held quantities a prosumer needs to solve its subproblem."""

    aux_trade: np.ndarray
    aux_net: np.ndarray
    dual_trade: np.ndarray
    dual_net: np.ndarray
    rho_trade: float
    rho_net: float

    def __post_init__(self):
        h = len(np.atleast_1d(self.aux_trade))
        for name in ("aux_trade", "aux_net", "dual_trade", "dual_net"):
            object.__setattr__(self, name, as_vector(getattr(self, name), h, name))
        require(self.rho_trade > 0 and self.rho_net > 0,
                "penalty parameters must be positive")

    @classmethod
    def zeros(cls, horizon: int, rho: float = 1.0) -> "CouplingSignals":
        z = np.zeros(horizon)
        return cls(aux_trade=z, aux_net=z, dual_trade=z, dual_net=z,
                   rho_trade=rho, rho_net=rho)


@dataclass(frozen=True)
class AgentUpdate:
    """The wire record a prosumer sends to the operator: identity, the
    iteration it was computed at, and the two shareable vectors."""

    prosumer: int
    iteration: int
    p_trade: np.ndarray
    p_net: np.ndarray

    def __post_init__(self):
        h = len(np.atleast_1d(self.p_trade))
        object.__setattr__(self, "p_trade", as_vector(self.p_trade, h, "p_trade"))
        object.__setattr__(self, "p_net", as_vector(self.p_net, h, "p_net"))

    def to_record(self) -> dict:
        return {
            "id": int(self.prosumer),
            "k": int(self.iteration),
            "p_trade": [float(v) for v in self.p_trade],
            "p_net": [float(v) for v in self.p_net],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_record())


class QpBuilder:
    """Accumulates a diagonal quadratic cost, linear cost, and sparse
    constraint rows, then emits a :class:`QuadraticProgram`."""

    def __init__(self, n_vars: int):
        self.n = n_vars
        self.p_diag = np.zeros(n_vars)
        self.q = np.zeros(n_vars)
        self._rows: list[int] = []
        self._cols: list[int] = []
        self._vals: list[float] = []
        self._lower: list[float] = []
        self._upper: list[float] = []
        self._labels: list[str] = []

    @property
    def m(self) -> int:
        return len(self._lower)

    def add_row(self, cols, vals, lower: float, upper: float, label: str) -> int:
        r = len(self._lower)
        for c, v in zip(cols, vals):
            if v != 0.0:
                self._rows.append(r)
                self._cols.append(int(c))
                self._vals.append(float(v))
        self._lower.append(float(lower))
        self._upper.append(float(upper))
        self._labels.append(label)
        return r

    def add_box(self, col: int, lower: float, upper: float, label: str) -> int:
        return self.add_row([col], [1.0], lower, upper, label)

    def build(self) -> QuadraticProgram:
        p = sparse.diags(self.p_diag, format="csc", shape=(self.n, self.n))
        a = sparse.csc_matrix(
            (self._vals, (self._rows, self._cols)), shape=(self.m, self.n))
        return QuadraticProgram(
            p_mat=p, q_vec=self.q, a_mat=a,
            lower=np.array(self._lower), upper=np.array(self._upper),
            row_labels=tuple(self._labels))


@dataclass(frozen=True)
class ScheduleCols:
    """Column layout of one prosumer's scheduling block."""

    start: int
    horizon: int

    def var(self, family: int, t: int) -> int:
        return self.start + family * self.horizon + t

    def family(self, family: int) -> np.ndarray:
        base = self.start + family * self.horizon
        return np.arange(base, base + self.horizon)

    def temp(self, t: int) -> int:
        return self.start + N_FAMILIES * self.horizon + t

    def slack(self, t: int) -> int:
        return self.start + (N_FAMILIES + 1) * self.horizon + t

    @property
    def peak(self) -> int:
        return self.start + (N_FAMILIES + 2) * self.horizon

    @property
    def size(self) -> int:
        return (N_FAMILIES + 2) * self.horizon + 1


def block_size(horizon: int) -> int:
    """Variables in one scheduling block: 8 decision families, the indoor
    temperature states, the discomfort slacks, and one peak variable."""
    return (N_FAMILIES + 2) * horizon + 1


def add_scheduling_block(b: QpBuilder, params: ProsumerParams,
                         prices: np.ndarray, start: int) -> ScheduleCols:
    """Emit one prosumer's device constraints and cost terms.

    Covers solar split, grid limits, battery dynamics and limits, the
    thermal recursion with the comfort band, trade caps, the per-slot
    energy balance, the net-load definition, the peak epigraph, and the
    absolute-deviation discomfort slacks. Cost terms: volumetric and peak
    tariff, battery degradation, discomfort, feed-in revenue, and trading
    settlement.
    """
    h = params.horizon
    cols = ScheduleCols(start=start, horizon=h)
    prices = as_vector(prices, h, "prices")

    # costs
    b.q[cols.family(GRID)] += params.energy_rate
    b.q[cols.family(FEEDIN)] -= params.feedin_rate
    b.p_diag[cols.family(DISCHARGE)] += 2.0 * params.degr_coeff
    b.q[[cols.slack(t) for t in range(h)]] += params.discomfort_coeff
    b.q[cols.peak] += params.peak_rate
    b.q[cols.family(TRADE)] += prices

    inf = np.inf
    for t in range(h):
        b.add_box(cols.var(GRID, t), 0.0, params.line_cap[t], "grid_bounds")
        b.add_box(cols.var(SOLAR, t), 0.0, inf, "solar_nonneg")
        b.add_box(cols.var(FEEDIN, t), 0.0, inf, "feedin_nonneg")
        b.add_row([cols.var(SOLAR, t), cols.var(FEEDIN, t)], [1.0, 1.0],
                  -inf, params.solar_cap[t], "solar_cap")
        b.add_box(cols.var(HVAC, t), 0.0, inf, "hvac_nonneg")
        b.add_box(cols.var(CHARGE, t), 0.0, params.ch_cap[t], "charge_cap")
        b.add_box(cols.var(DISCHARGE, t), 0.0, params.dis_cap[t], "discharge_cap")
        b.add_box(cols.var(TRADE, t), params.trade_min[t], params.trade_max[t],
                  "trade_caps")

    # battery level stays inside the state-of-charge band (cumulative form)
    lo = params.soc_min * params.batt_capacity - params.batt_init_level
    hi = params.soc_max * params.batt_capacity - params.batt_init_level
    for t in range(h):
        cs = [cols.var(CHARGE, tau) for tau in range(t + 1)]
        ds = [cols.var(DISCHARGE, tau) for tau in range(t + 1)]
        b.add_row(cs + ds,
                  [params.eff_ch] * (t + 1) + [-1.0 / params.eff_dis] * (t + 1),
                  lo, hi, "battery_level")
    if params.cyclic_battery:
        cs = [cols.var(CHARGE, tau) for tau in range(h)]
        ds = [cols.var(DISCHARGE, tau) for tau in range(h)]
        b.add_row(cs + ds,
                  [params.eff_ch] * h + [-1.0 / params.eff_dis] * h,
                  0.0, 0.0, "battery_terminal")

    # indoor temperature recursion and comfort band
    decay, gain = _thermal_coeffs(params)
    cr = params.hvac_c * params.hvac_r
    drive = params.outdoor_temp / cr
    if params.printed_thermal_form:
        drive = -drive
    for t in range(h):
        if t == 0:
            rhs = decay * params.temp_init + drive[0]
            b.add_row([cols.temp(0), cols.var(HVAC, 0)], [1.0, -gain],
                      rhs, rhs, "thermal_dynamics")
        else:
            b.add_row([cols.temp(t), cols.temp(t - 1), cols.var(HVAC, t)],
                      [1.0, -decay, -gain], drive[t], drive[t], "thermal_dynamics")
        b.add_box(cols.temp(t), params.temp_min[t], params.temp_max[t],
                  "comfort_band")

    for t in range(h):
        b.add_row([cols.var(SOLAR, t), cols.var(GRID, t), cols.var(DISCHARGE, t),
                   cols.var(TRADE, t), cols.var(CHARGE, t), cols.var(HVAC, t)],
                  [1.0, 1.0, 1.0, 1.0, -1.0, -1.0],
                  params.base_load[t], params.base_load[t], "energy_balance")
        b.add_row([cols.var(NET, t), cols.var(GRID, t), cols.var(FEEDIN, t)],
                  [1.0, -1.0, 1.0], 0.0, 0.0, "net_definition")
        b.add_row([cols.var(GRID, t), cols.peak], [1.0, -1.0],
                  -inf, 0.0, "peak_epigraph")
        b.add_row([cols.temp(t), cols.slack(t)], [1.0, -1.0],
                  -inf, params.temp_ref[t], "discomfort_upper")
        b.add_row([cols.temp(t), cols.slack(t)], [-1.0, -1.0],
                  -inf, -params.temp_ref[t], "discomfort_lower")

    return cols


def _apply_coupling(b: QpBuilder, cols: ScheduleCols, sig: CouplingSignals) -> None:
    """Add the operator's price and penalty terms to the block cost."""
    b.p_diag[cols.family(TRADE)] += sig.rho_trade
    b.q[cols.family(TRADE)] += -sig.dual_trade - sig.rho_trade * sig.aux_trade
    b.p_diag[cols.family(NET)] += sig.rho_net
    b.q[cols.family(NET)] += -sig.dual_net - sig.rho_net * sig.aux_net


def build_lp(params: ProsumerParams, prices: np.ndarray,
             sig: CouplingSignals) -> QuadraticProgram:
    """The prosumer subproblem as a standard-form QP."""
    b = QpBuilder(block_size(params.horizon))
    cols = add_scheduling_block(b, params, prices, 0)
    _apply_coupling(b, cols, sig)
    return b.build()


def decision_from_solution(x: np.ndarray, cols: ScheduleCols,
                           params: ProsumerParams) -> ScheduleDecision:
    return ScheduleDecision.from_parts(
        params,
        p_grid=x[cols.family(GRID)],
        p_solar=x[cols.family(SOLAR)],
        p_feedin=x[cols.family(FEEDIN)],
        p_hvac=x[cols.family(HVAC)],
        p_charge=x[cols.family(CHARGE)],
        p_discharge=x[cols.family(DISCHARGE)],
        p_trade=x[cols.family(TRADE)],
        indoor_temp=x[[cols.temp(t) for t in range(cols.horizon)]],
    )


def solve_lp(params: ProsumerParams, prices: np.ndarray, sig: CouplingSignals,
             settings: SolverSettings | None = None, *,
             prosumer: int = 0, iteration: int = 0,
             ) -> tuple[ScheduleDecision, AgentUpdate]:
    """Solve the subproblem and return the private decision plus the
    shareable update record."""
    agent = ProsumerAgent(prosumer, params, prices, settings)
    decision, update, solution = agent.solve(sig, iteration)
    if solution.status != OPTIMAL:
        raise RuntimeError(f"prosumer subproblem did not reach optimality: "
                           f"{solution.status}")
    return decision, update


class ProsumerAgent:
    """One prosumer's solver workspace for repeated subproblem solves.

    Re-solves reuse the cached factorization when the penalty parameters
    are unchanged, and warm-start from the previous solution. Agents are
    independent of each other and may run on separate threads.
    """

    def __init__(self, prosumer: int, params: ProsumerParams,
                 prices: np.ndarray, settings: SolverSettings | None = None):
        self.prosumer = int(prosumer)
        self.params = params
        self.prices = as_vector(prices, params.horizon, "prices")
        self._solver = QpSolver(settings)
        self._base: QuadraticProgram | None = None
        self._cols: ScheduleCols | None = None
        self._rho: tuple[float, float] | None = None
        self.last_decision: ScheduleDecision | None = None
        self.last_update: AgentUpdate | None = None

    def _ensure_problem(self) -> None:
        if self._base is None:
            b = QpBuilder(block_size(self.params.horizon))
            self._cols = add_scheduling_block(b, self.params, self.prices, 0)
            self._base = b.build()
            self._solver.setup(self._base)
            self._rho = None

    def _coupled_cost(self, sig: CouplingSignals) -> tuple[np.ndarray, np.ndarray]:
        cols = self._cols
        q = self._base.q_vec.copy()
        q[cols.family(TRADE)] += -sig.dual_trade - sig.rho_trade * sig.aux_trade
        q[cols.family(NET)] += -sig.dual_net - sig.rho_net * sig.aux_net
        p_diag = self._base.p_mat.diagonal().copy()
        p_diag[cols.family(TRADE)] += sig.rho_trade
        p_diag[cols.family(NET)] += sig.rho_net
        return q, p_diag

    def solve(self, sig: CouplingSignals, iteration: int,
              ) -> tuple[ScheduleDecision, AgentUpdate, QpSolution]:
        self._ensure_problem()
        q, p_diag = self._coupled_cost(sig)
        rho = (sig.rho_trade, sig.rho_net)
        if rho != self._rho:
            n = self._base.n
            self._solver.update(q_vec=q,
                                p_mat=sparse.diags(p_diag, format="csc", shape=(n, n)))
            self._rho = rho
        else:
            self._solver.update(q_vec=q)
        solution = self._solver.solve()
        decision = decision_from_solution(solution.x, self._cols, self.params)
        update = AgentUpdate(prosumer=self.prosumer, iteration=iteration,
                             p_trade=decision.p_trade, p_net=decision.p_net)
        if solution.status == OPTIMAL:
            self.last_decision = decision
            self.last_update = update
        return decision, update, solution
