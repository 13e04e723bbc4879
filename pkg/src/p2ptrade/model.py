"""Domain types, device dynamics, cost evaluation, and feasibility checks.

Everything here is a plain value object or a pure function; nothing holds
mutable state, so all of it is safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .validation import DimensionError, as_vector, frozen, require

#: default absolute tolerance for feasibility checks
DEFAULT_FEAS_TOL = 1e-6


@dataclass(frozen=True)
class TimeGrid:
    """Discrete scheduling horizon: ``horizon`` slots of ``slot_hours`` each."""

    horizon: int
    slot_hours: float = 1.0

    def __post_init__(self):
        require(int(self.horizon) >= 1, "horizon must be at least 1")
        require(self.slot_hours > 0, "slot_hours must be positive")
        object.__setattr__(self, "horizon", int(self.horizon))


@dataclass(frozen=True)
class ProsumerParams:
    """Static physical and economic parameters of one prosumer.

    Per-slot vectors all share the same length (the horizon); scalars apply
    to every slot. ``hvac_eta`` is signed: negative means the unit removes
    heat (cooling mode). ``cyclic_battery`` pins the end-of-horizon battery
    level back to ``batt_init_level`` so day-ahead schedules repeat cleanly.
    ``printed_thermal_form`` switches the indoor-temperature recursion to the
    sign variant that drives the indoor temperature away from outdoor air;
    it exists for sensitivity studies only and defaults to the stable form.
    """

    solar_cap: np.ndarray
    line_cap: np.ndarray
    batt_capacity: float
    soc_min: float
    soc_max: float
    ch_cap: np.ndarray
    dis_cap: np.ndarray
    eff_ch: float
    eff_dis: float
    batt_init_level: float
    hvac_c: float
    hvac_r: float
    hvac_eta: float
    temp_min: np.ndarray
    temp_max: np.ndarray
    temp_ref: np.ndarray
    trade_min: np.ndarray
    trade_max: np.ndarray
    base_load: np.ndarray
    outdoor_temp: np.ndarray
    q_load: np.ndarray
    temp_init: float | None = None
    energy_rate: float = 0.2
    peak_rate: float = 1.2
    feedin_rate: float = 0.1
    degr_coeff: float = 0.01
    discomfort_coeff: float = 0.25
    cyclic_battery: bool = True
    printed_thermal_form: bool = False

    _VECTOR_FIELDS = (
        "solar_cap", "line_cap", "ch_cap", "dis_cap", "temp_min", "temp_max",
        "temp_ref", "trade_min", "trade_max", "base_load", "outdoor_temp",
        "q_load",
    )

    def __post_init__(self):
        first = np.atleast_1d(np.asarray(self.solar_cap, dtype=float))
        h = first.shape[0]
        for name in self._VECTOR_FIELDS:
            object.__setattr__(self, name, as_vector(getattr(self, name), h, name))
        if self.temp_init is None:
            object.__setattr__(self, "temp_init", float(self.temp_ref[0]))

        require(0.0 <= self.soc_min <= self.soc_max <= 1.0,
                "state-of-charge bounds must satisfy 0 <= soc_min <= soc_max <= 1")
        require(self.batt_capacity >= 0, "batt_capacity must be nonnegative")
        lo = self.soc_min * self.batt_capacity
        hi = self.soc_max * self.batt_capacity
        require(lo - 1e-12 <= self.batt_init_level <= hi + 1e-12,
                "batt_init_level must lie within the state-of-charge band")
        require(0.0 < self.eff_ch <= 1.0 and 0.0 < self.eff_dis <= 1.0,
                "charge/discharge efficiencies must lie in (0, 1]")
        require(self.hvac_c > 0 and self.hvac_r > 0, "hvac_c and hvac_r must be positive")
        require(self.hvac_eta != 0, "hvac_eta must be nonzero")
        require(bool(np.all(self.temp_min <= self.temp_ref))
                and bool(np.all(self.temp_ref <= self.temp_max)),
                "temp_ref must lie within [temp_min, temp_max] at every slot")
        require(bool(np.all(self.trade_min <= 0.0)) and bool(np.all(self.trade_max >= 0.0)),
                "trade_min must be <= 0 and trade_max >= 0 at every slot")
        for name in ("solar_cap", "line_cap", "ch_cap", "dis_cap"):
            require(bool(np.all(getattr(self, name) >= 0)), f"{name} must be nonnegative")

    @property
    def horizon(self) -> int:
        return int(self.solar_cap.shape[0])

    @classmethod
    def build(cls, grid: TimeGrid, **kwargs) -> "ProsumerParams":
        """Construct with scalar broadcasting over ``grid.horizon`` slots."""
        h = grid.horizon
        for name in cls._VECTOR_FIELDS:
            if name in kwargs:
                kwargs[name] = as_vector(kwargs[name], h, name)
        if "solar_cap" not in kwargs:
            kwargs["solar_cap"] = np.zeros(h)
        return cls(**kwargs)


def simulate_battery(p_ch: np.ndarray, p_dis: np.ndarray,
                     params: ProsumerParams) -> np.ndarray:
    """Battery level trajectory under charge/discharge schedules.

    level[t] = level[t-1] + eff_ch * p_ch[t] - p_dis[t] / eff_dis, with the
    pre-horizon level equal to ``params.batt_init_level``.
    """
    h = params.horizon
    p_ch = as_vector(p_ch, h, "p_ch")
    p_dis = as_vector(p_dis, h, "p_dis")
    delta = params.eff_ch * p_ch - p_dis / params.eff_dis
    return params.batt_init_level + np.cumsum(delta)


def _thermal_coeffs(params: ProsumerParams) -> tuple[float, float]:
    """(decay, gain) of the one-step indoor temperature recursion."""
    cr = params.hvac_c * params.hvac_r
    gain = params.hvac_eta / params.hvac_c
    if params.printed_thermal_form:
        return 1.0 + 1.0 / cr, gain
    return 1.0 - 1.0 / cr, gain


def simulate_temperature(p_hvac: np.ndarray, params: ProsumerParams) -> np.ndarray:
    """Indoor temperature trajectory under an HVAC energy schedule.

    T[t] = T[t-1] + (T_out[t] - T[t-1] + eta * R * p[t]) / (C * R), with
    T before the horizon equal to ``params.temp_init``.
    """
    h = params.horizon
    p_hvac = as_vector(p_hvac, h, "p_hvac")
    decay, gain = _thermal_coeffs(params)
    cr = params.hvac_c * params.hvac_r
    drive = params.outdoor_temp / cr
    if params.printed_thermal_form:
        drive = -drive
    temps = np.empty(h)
    prev = float(params.temp_init)
    for t in range(h):
        prev = decay * prev + drive[t] + gain * p_hvac[t]
        temps[t] = prev
    return temps


@dataclass(frozen=True)
class ScheduleDecision:
    """One prosumer's full decision bundle over the horizon.

    ``p_net`` is always the definitional net load ``p_grid - p_feedin``;
    ``batt_level`` and ``indoor_temp`` are the trajectories implied by the
    controls (or, for QP outputs, the solver's state variables).
    """

    p_grid: np.ndarray
    p_solar: np.ndarray
    p_feedin: np.ndarray
    p_hvac: np.ndarray
    p_charge: np.ndarray
    p_discharge: np.ndarray
    p_trade: np.ndarray
    p_net: np.ndarray
    batt_level: np.ndarray
    indoor_temp: np.ndarray

    def __post_init__(self):
        h = len(np.atleast_1d(self.p_grid))
        for f in fields(self):
            object.__setattr__(self, f.name, as_vector(getattr(self, f.name), h, f.name))

    @property
    def horizon(self) -> int:
        return int(self.p_grid.shape[0])

    @classmethod
    def from_parts(cls, params: ProsumerParams, *, p_grid, p_solar, p_feedin,
                   p_hvac, p_charge, p_discharge, p_trade,
                   indoor_temp=None) -> "ScheduleDecision":
        """Build a decision from controls, deriving the dependent fields."""
        h = params.horizon
        p_grid = as_vector(p_grid, h, "p_grid")
        p_feedin = as_vector(p_feedin, h, "p_feedin")
        p_charge = as_vector(p_charge, h, "p_charge")
        p_discharge = as_vector(p_discharge, h, "p_discharge")
        p_hvac = as_vector(p_hvac, h, "p_hvac")
        if indoor_temp is None:
            indoor_temp = simulate_temperature(p_hvac, params)
        return cls(
            p_grid=p_grid,
            p_solar=as_vector(p_solar, h, "p_solar"),
            p_feedin=p_feedin,
            p_hvac=p_hvac,
            p_charge=p_charge,
            p_discharge=p_discharge,
            p_trade=as_vector(p_trade, h, "p_trade"),
            p_net=p_grid - p_feedin,
            batt_level=simulate_battery(p_charge, p_discharge, params),
            indoor_temp=as_vector(indoor_temp, h, "indoor_temp"),
        )

    @classmethod
    def zeros(cls, params: ProsumerParams) -> "ScheduleDecision":
        z = np.zeros(params.horizon)
        return cls.from_parts(params, p_grid=z, p_solar=z, p_feedin=z, p_hvac=z,
                              p_charge=z, p_discharge=z, p_trade=z)


@dataclass(frozen=True)
class Violation:
    constraint: str
    slot: int
    magnitude: float


@dataclass(frozen=True)
class ViolationReport:
    """Constraint violations exceeding the feasibility tolerance."""

    violations: tuple[Violation, ...] = ()

    def __len__(self) -> int:
        return len(self.violations)

    @property
    def ok(self) -> bool:
        return not self.violations

    def worst(self) -> Violation | None:
        if not self.violations:
            return None
        return max(self.violations, key=lambda v: v.magnitude)

    def constraints(self) -> set[str]:
        return {v.constraint for v in self.violations}


def evaluate_schedule_cost(decision: ScheduleDecision, params: ProsumerParams) -> float:
    """Scheduling cost: two-part tariff + battery degradation + discomfort
    - feed-in revenue."""
    d = decision
    energy = params.energy_rate * float(np.sum(d.p_grid))
    peak = params.peak_rate * float(np.max(d.p_grid))
    degr = params.degr_coeff * float(np.sum(d.p_discharge ** 2))
    discomfort = params.discomfort_coeff * float(np.sum(np.abs(d.indoor_temp - params.temp_ref)))
    revenue = params.feedin_rate * float(np.sum(d.p_feedin))
    return energy + peak + degr + discomfort - revenue


def evaluate_trading_cost(p_trade: np.ndarray, prices: np.ndarray) -> float:
    """Settlement at the posted trading prices; negative when selling pays."""
    p_trade = np.asarray(p_trade, dtype=float)
    prices = np.asarray(prices, dtype=float)
    if p_trade.shape != prices.shape:
        raise DimensionError(
            f"p_trade and prices must match: {p_trade.shape} vs {prices.shape}")
    return float(prices @ p_trade)


def cost_breakdown(decision: ScheduleDecision, params: ProsumerParams,
                   prices: np.ndarray) -> dict[str, float]:
    d = decision
    parts = {
        "energy": params.energy_rate * float(np.sum(d.p_grid)),
        "peak": params.peak_rate * float(np.max(d.p_grid)),
        "degradation": params.degr_coeff * float(np.sum(d.p_discharge ** 2)),
        "discomfort": params.discomfort_coeff
        * float(np.sum(np.abs(d.indoor_temp - params.temp_ref))),
        "feedin_revenue": -params.feedin_rate * float(np.sum(d.p_feedin)),
        "trading": evaluate_trading_cost(d.p_trade, prices),
    }
    parts["scheduling"] = (parts["energy"] + parts["peak"] + parts["degradation"]
                           + parts["discomfort"] + parts["feedin_revenue"])
    parts["total"] = parts["scheduling"] + parts["trading"]
    return parts


def check_feasibility(decision: ScheduleDecision, params: ProsumerParams,
                      tol_feas: float = DEFAULT_FEAS_TOL) -> ViolationReport:
    """Check a decision against every per-prosumer constraint.

    Returns all violations whose magnitude exceeds ``tol_feas``. Community
    level constraints (trade clearing, network limits) are out of scope here.
    """
    d = decision
    h = params.horizon
    if d.horizon != h:
        raise DimensionError(f"decision horizon {d.horizon} != params horizon {h}")
    found: list[Violation] = []

    def check(constraint: str, excess: np.ndarray) -> None:
        for t in np.nonzero(excess > tol_feas)[0]:
            found.append(Violation(constraint, int(t), float(excess[t])))

    check("solar_nonneg", -d.p_solar)
    check("feedin_nonneg", -d.p_feedin)
    check("solar_cap", d.p_solar + d.p_feedin - params.solar_cap)
    check("grid_bounds", np.maximum(-d.p_grid, d.p_grid - params.line_cap))
    check("hvac_nonneg", -d.p_hvac)
    check("charge_cap", np.maximum(-d.p_charge, d.p_charge - params.ch_cap))
    check("discharge_cap", np.maximum(-d.p_discharge, d.p_discharge - params.dis_cap))

    level = simulate_battery(d.p_charge, d.p_discharge, params)
    check("battery_dynamics", np.abs(d.batt_level - level))
    lo = params.soc_min * params.batt_capacity
    hi = params.soc_max * params.batt_capacity
    check("battery_level", np.maximum(lo - d.batt_level, d.batt_level - hi))
    if params.cyclic_battery:
        gap = abs(float(d.batt_level[-1]) - params.batt_init_level)
        if gap > tol_feas:
            found.append(Violation("battery_terminal", h - 1, gap))

    temps = simulate_temperature(d.p_hvac, params)
    check("thermal_dynamics", np.abs(d.indoor_temp - temps))
    check("comfort_band", np.maximum(params.temp_min - d.indoor_temp,
                                     d.indoor_temp - params.temp_max))

    check("trade_caps", np.maximum(params.trade_min - d.p_trade,
                                   d.p_trade - params.trade_max))
    balance = (d.p_solar + d.p_grid + d.p_discharge + d.p_trade
               - d.p_charge - d.p_hvac - params.base_load)
    check("energy_balance", np.abs(balance))
    check("net_definition", np.abs(d.p_net - (d.p_grid - d.p_feedin)))

    return ViolationReport(tuple(found))
