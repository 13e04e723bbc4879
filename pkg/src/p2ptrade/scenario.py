"""Scenario ingestion, synthetic data generation, and experiment output.

A scenario lives in one JSON config (schema version 1, top-level keys
``timegrid``, ``prosumers``, ``network``, ``prices``, ``run``) plus a
branch CSV and optional per-slot profile CSVs with columns ``slot,value``.
Vector-valued fields accept a scalar (broadcast), an inline list, or
``{"csv": "relative/path.csv"}``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .coordinator import (ActivationModel, RunConfig, StepsizeSchedule, SYNC,
                          run)
from .model import ProsumerParams, TimeGrid, cost_breakdown
from .network import NetworkModel
from .oracle import clearing_prices, solve_centralized
from .validation import as_vector, frozen

SCHEMA_VERSION = 1

#: prosumer fields that may be given per slot
_PROSUMER_VECTORS = ProsumerParams._VECTOR_FIELDS
_PROSUMER_SCALARS = (
    "batt_capacity", "soc_min", "soc_max", "eff_ch", "eff_dis",
    "batt_init_level", "hvac_c", "hvac_r", "hvac_eta", "temp_init",
    "energy_rate", "peak_rate", "feedin_rate", "degr_coeff",
    "discomfort_coeff", "cyclic_battery", "printed_thermal_form",
)

#: values filled in when a prosumer entry omits them
PROSUMER_DEFAULTS = {
    "hvac_c": 3.3,
    "hvac_r": 1.35,
    "temp_min": 15.0,
    "temp_max": 32.0,
    "discomfort_coeff": 0.25,
    "eff_ch": 0.9,
    "eff_dis": 0.9,
    "degr_coeff": 0.01,
    "energy_rate": 0.2,
    "peak_rate": 1.2,
    "feedin_rate": 0.1,
    "q_load": 0.0,
}


class ScenarioError(ValueError):
    """Structured load error: carries the offending field and location."""

    def __init__(self, message: str, *, field: str | None = None,
                 path: str | None = None):
        self.field = field
        self.path = path
        where = f" [{path}]" if path else ""
        what = f" (field: {field})" if field else ""
        super().__init__(f"{message}{what}{where}")


@dataclass(frozen=True)
class Scenario:
    """A fully validated experiment instance."""

    grid: TimeGrid
    prosumers: tuple[ProsumerParams, ...]
    network: NetworkModel
    trade_prices: np.ndarray
    run_defaults: RunConfig

    def __post_init__(self):
        h = self.grid.horizon
        object.__setattr__(self, "prosumers", tuple(self.prosumers))
        object.__setattr__(self, "trade_prices",
                           as_vector(self.trade_prices, h, "trade_prices"))
        for i, p in enumerate(self.prosumers):
            if p.horizon != h:
                raise ScenarioError(
                    f"prosumer {i} has horizon {p.horizon}, expected {h}",
                    field="prosumers")
        if self.network.n_branches != len(self.prosumers):
            raise ScenarioError(
                f"network has {self.network.n_branches} branches for "
                f"{len(self.prosumers)} prosumers", field="network")
        if self.network.horizon != h:
            raise ScenarioError("network root voltage must cover the horizon",
                                field="network")

    @property
    def n_prosumers(self) -> int:
        return len(self.prosumers)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scenario):
            return NotImplemented
        if self.grid != other.grid or self.run_defaults != other.run_defaults:
            return False
        if not np.array_equal(self.trade_prices, other.trade_prices):
            return False
        if len(self.prosumers) != other.n_prosumers:
            return False
        for a, b in zip(self.prosumers, other.prosumers):
            if not _params_equal(a, b):
                return False
        return _network_equal(self.network, other.network)


def _params_equal(a: ProsumerParams, b: ProsumerParams) -> bool:
    for f in fields(ProsumerParams):
        va, vb = getattr(a, f.name), getattr(b, f.name)
        if isinstance(va, np.ndarray):
            if not np.array_equal(va, vb):
                return False
        elif va != vb:
            return False
    return True


def _network_equal(a: NetworkModel, b: NetworkModel) -> bool:
    return (np.array_equal(a.resistance, b.resistance)
            and np.array_equal(a.reactance, b.reactance)
            and np.array_equal(a.root_voltage, b.root_voltage)
            and (a.p_min, a.p_max, a.q_min, a.q_max, a.voltage_tol)
            == (b.p_min, b.p_max, b.q_min, b.q_max, b.voltage_tol))


# -- loading -------------------------------------------------------------


def _read_profile_csv(path: Path, expect: int) -> np.ndarray:
    if not path.exists():
        raise ScenarioError("profile file not found", path=str(path))
    values = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            try:
                values[int(row["slot"])] = float(row["value"])
            except (KeyError, ValueError) as exc:
                raise ScenarioError(f"bad profile row: {row}",
                                    path=str(path)) from exc
    if len(values) != expect or set(values) != set(range(expect)):
        raise ScenarioError(
            f"profile has {len(values)} rows, expected slots 0..{expect - 1}",
            path=str(path))
    return np.array([values[t] for t in range(expect)])


def _resolve_vector(value, h: int, base: Path, field: str) -> np.ndarray:
    if isinstance(value, dict):
        if set(value) != {"csv"}:
            raise ScenarioError("vector spec must be a scalar, list, or "
                                "{'csv': path}", field=field)
        return _read_profile_csv(base / value["csv"], h)
    try:
        return as_vector(value, h, field)
    except ValueError as exc:
        raise ScenarioError(str(exc), field=field) from exc


def load_scenario(config_path, profile_dir=None) -> Scenario:
    """Load and validate a scenario; fills documented defaults."""
    config_path = Path(config_path)
    if not config_path.exists():
        raise ScenarioError("scenario config not found", path=str(config_path))
    base = Path(profile_dir) if profile_dir else config_path.parent
    with open(config_path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"invalid JSON: {exc}",
                                path=str(config_path)) from exc

    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ScenarioError(f"unsupported schema_version {version}",
                            field="schema_version", path=str(config_path))
    for key in ("timegrid", "prosumers", "network"):
        if key not in raw:
            raise ScenarioError(f"missing top-level key {key!r}", field=key,
                                path=str(config_path))

    tg = raw["timegrid"]
    try:
        grid = TimeGrid(horizon=tg["horizon"],
                        slot_hours=tg.get("slot_hours", 1.0))
    except (KeyError, ValueError) as exc:
        raise ScenarioError(f"bad timegrid: {exc}", field="timegrid") from exc
    h = grid.horizon

    prosumers = []
    for i, entry in enumerate(raw["prosumers"]):
        kwargs = {}
        merged = dict(PROSUMER_DEFAULTS)
        merged.update(entry)
        for name, value in merged.items():
            if name in _PROSUMER_VECTORS:
                kwargs[name] = _resolve_vector(value, h, base,
                                               f"prosumers[{i}].{name}")
            elif name in _PROSUMER_SCALARS:
                kwargs[name] = value
            else:
                raise ScenarioError(f"unknown prosumer field {name!r}",
                                    field=f"prosumers[{i}].{name}")
        try:
            prosumers.append(ProsumerParams.build(grid, **kwargs))
        except (ValueError, TypeError) as exc:
            raise ScenarioError(f"invalid prosumer {i}: {exc}",
                                field=f"prosumers[{i}]") from exc

    net_raw = raw["network"]
    try:
        root_v = _resolve_vector(net_raw.get("root_voltage", 1.0), h, base,
                                 "network.root_voltage")
        if "branches_csv" in net_raw:
            network = NetworkModel.from_csv(
                base / net_raw["branches_csv"],
                p_min=net_raw["p_min"], p_max=net_raw["p_max"],
                q_min=net_raw["q_min"], q_max=net_raw["q_max"],
                root_voltage=root_v,
                voltage_tol=net_raw.get("voltage_tolerance", 0.05))
        else:
            network = NetworkModel(
                resistance=np.asarray(net_raw["resistance"], dtype=float),
                reactance=np.asarray(net_raw["reactance"], dtype=float),
                p_min=net_raw["p_min"], p_max=net_raw["p_max"],
                q_min=net_raw["q_min"], q_max=net_raw["q_max"],
                root_voltage=root_v,
                voltage_tol=net_raw.get("voltage_tolerance", 0.05))
    except ScenarioError:
        raise
    except (KeyError, ValueError, OSError) as exc:
        raise ScenarioError(f"bad network section: {exc}", field="network") from exc

    prices_raw = raw.get("prices", {})
    if "trade" in prices_raw:
        prices = _resolve_vector(prices_raw["trade"], h, base, "prices.trade")
    else:
        feedin = float(np.mean([p.feedin_rate for p in prosumers]))
        energy = float(np.mean([p.energy_rate for p in prosumers]))
        prices = np.full(h, 0.5 * (feedin + energy))

    run_cfg = _run_config_from_dict(raw.get("run", {}))
    return Scenario(grid=grid, prosumers=tuple(prosumers), network=network,
                    trade_prices=prices, run_defaults=run_cfg)


def _run_config_from_dict(d: dict) -> RunConfig:
    act = d.get("activation", {})
    activation = ActivationModel(
        kind=act.get("kind", "bernoulli"),
        p_active=act.get("p_active", 0.8),
        dropout_fraction=act.get("dropout_fraction", 0.2),
        max_staleness=act.get("max_staleness", 3))
    schedule = StepsizeSchedule(kind=d.get("rho_schedule", "harmonic"),
                                rho0=d.get("rho0", 1.0))
    return RunConfig(
        mode=d.get("mode", SYNC), activation=activation, schedule=schedule,
        eps_primal=d.get("eps_primal", 1e-2), eps_dual=d.get("eps_dual", 1e-2),
        max_iter=d.get("max_iter", 2000), seed=d.get("seed", 0))


def _run_config_to_dict(cfg: RunConfig) -> dict:
    return {
        "mode": cfg.mode,
        "activation": {
            "kind": cfg.activation.kind,
            "p_active": cfg.activation.p_active,
            "dropout_fraction": cfg.activation.dropout_fraction,
            "max_staleness": cfg.activation.max_staleness,
        },
        "rho_schedule": cfg.schedule.kind,
        "rho0": cfg.schedule.rho0,
        "eps_primal": cfg.eps_primal,
        "eps_dual": cfg.eps_dual,
        "max_iter": cfg.max_iter,
        "seed": cfg.seed,
    }


# -- saving --------------------------------------------------------------


def _write_profile_csv(path: Path, values: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slot", "value"])
        for t, v in enumerate(values):
            w.writerow([t, repr(float(v))])


def save_scenario(scenario: Scenario, out_dir,
                  profile_fields: tuple[str, ...] = ("solar_cap", "base_load",
                                                     "outdoor_temp")) -> Path:
    """Write ``scenario.json`` plus the branch CSV and profile CSVs.

    Fields named in ``profile_fields`` go to per-prosumer CSV files; all
    other vectors are stored inline. Returns the config path.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    h = scenario.grid.horizon

    with open(out / "network.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "r", "x"])
        for i in range(scenario.network.n_branches):
            w.writerow([i + 1, repr(float(scenario.network.resistance[i])),
                        repr(float(scenario.network.reactance[i]))])

    entries = []
    for i, p in enumerate(scenario.prosumers):
        entry: dict = {}
        for name in _PROSUMER_VECTORS:
            vec = getattr(p, name)
            if name in profile_fields:
                fname = f"prosumer{i:02d}_{name}.csv"
                _write_profile_csv(out / fname, vec)
                entry[name] = {"csv": fname}
            elif np.all(vec == vec[0]):
                entry[name] = float(vec[0])
            else:
                entry[name] = [float(v) for v in vec]
        for name in _PROSUMER_SCALARS:
            value = getattr(p, name)
            entry[name] = value if isinstance(value, bool) else float(value)
        entries.append(entry)

    net = scenario.network
    config = {
        "schema_version": SCHEMA_VERSION,
        "timegrid": {"horizon": h, "slot_hours": scenario.grid.slot_hours},
        "prices": {"trade": [float(v) for v in scenario.trade_prices]},
        "network": {
            "branches_csv": "network.csv",
            "p_min": float(net.p_min), "p_max": float(net.p_max),
            "q_min": float(net.q_min), "q_max": float(net.q_max),
            "root_voltage": [float(v) for v in net.root_voltage],
            "voltage_tolerance": float(net.voltage_tol),
        },
        "run": _run_config_to_dict(scenario.run_defaults),
        "prosumers": entries,
    }
    path = out / "scenario.json"
    with open(path, "w") as fh:
        json.dump(config, fh, indent=2)
        fh.write("\n")
    return path


# -- synthetic generation -------------------------------------------------


def generate_synthetic(n: int, seed: int, horizon: int = 24,
                       price_mode: str = "auto") -> Scenario:
    """Deterministic community: bell-shaped solar scaled per prosumer,
    double-peaked base loads with per-prosumer phase jitter, and a
    sinusoidal outdoor temperature.

    ``price_mode`` controls the posted trading prices: ``"midpoint"`` uses
    the feed-in/retail midpoint everywhere; ``"clearing"`` shifts it by the
    per-slot clearing multiplier from one centralized solve, which makes
    trading worthwhile for every participant but costs a community solve;
    ``"auto"`` picks clearing for small communities (n <= 20) and the
    midpoint beyond that.
    """
    if n < 1:
        raise ScenarioError("need at least one prosumer", field="n")
    if price_mode not in ("auto", "clearing", "midpoint"):
        raise ScenarioError(f"unknown price_mode {price_mode!r}",
                            field="price_mode")
    if price_mode == "auto":
        price_mode = "clearing" if n <= 20 else "midpoint"
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    grid = TimeGrid(horizon=horizon, slot_hours=24.0 / horizon)
    t = np.arange(horizon) * 24.0 / horizon

    daylight = (t >= 6.0) & (t <= 18.0)
    bell = np.exp(-0.5 * ((t - 12.0) / 2.8) ** 2) * daylight
    outdoor = 28.0 + 6.0 * np.sin(2 * np.pi * (t - 9.0) / 24.0)

    prosumers = []
    for _ in range(n):
        solar_scale = rng.uniform(0.5, 6.0)
        load_scale = rng.uniform(0.6, 1.4)
        phase = rng.uniform(-3.0, 3.0)
        morning = np.exp(-0.5 * ((t - (7.5 + phase)) / 1.6) ** 2)
        evening = np.exp(-0.5 * ((t - (19.0 + phase)) / 2.2) ** 2)
        base = load_scale * (0.25 + 0.9 * morning + 1.3 * evening)
        batt_cap = float(rng.uniform(2.0, 10.0))
        prosumers.append(ProsumerParams.build(
            grid,
            solar_cap=solar_scale * bell,
            line_cap=8.0,
            batt_capacity=batt_cap,
            soc_min=0.1, soc_max=0.9,
            ch_cap=0.25 * batt_cap, dis_cap=0.25 * batt_cap,
            eff_ch=0.9, eff_dis=0.9,
            batt_init_level=0.5 * batt_cap,
            hvac_c=3.3, hvac_r=1.35, hvac_eta=-2.5,
            temp_min=15.0, temp_max=32.0,
            temp_ref=24.0, temp_init=24.0,
            trade_min=-4.0, trade_max=4.0,
            base_load=base,
            outdoor_temp=outdoor,
            q_load=0.2 * base,
        ))

    # feeder sized to the community: cumulative injections grow with n, so
    # larger communities get proportionally stiffer limits and lighter
    # branch impedances to keep the bundled cases comfortably feasible
    branch_z = 1e-4 if n <= 10 else 1e-2 / n ** 2
    flow_cap = max(60.0, 4.0 * n)
    network = NetworkModel(
        resistance=np.full(n, branch_z), reactance=np.full(n, branch_z),
        p_min=-flow_cap, p_max=flow_cap, q_min=-flow_cap, q_max=flow_cap,
        root_voltage=np.ones(horizon), voltage_tol=0.05)

    # post the trading prices: start from the midpoint of the feed-in and
    # retail rates, optionally shifted to the per-slot clearing level so
    # that trading is worthwhile for every participant
    midpoint = np.full(horizon, 0.5 * (PROSUMER_DEFAULTS["feedin_rate"]
                                       + PROSUMER_DEFAULTS["energy_rate"]))
    scenario = Scenario(grid=grid, prosumers=tuple(prosumers), network=network,
                        trade_prices=frozen(midpoint),
                        run_defaults=_run_config_from_dict({"seed": seed}))
    if price_mode == "clearing":
        scenario = replace(scenario, trade_prices=frozen(clearing_prices(scenario)))
    return scenario


# -- experiment orchestration ---------------------------------------------

ADMM_MODES = ("sync", "async")
ORACLE_MODES = ("oracle", "oracle-notrade")


def write_schedules(decisions, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, d in enumerate(decisions):
        with open(out_dir / f"prosumer{i:02d}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["slot", "p_G", "p_S", "p_feedin", "p_ch", "p_dis",
                        "p_hvac", "p_trade", "T_in"])
            for tt in range(d.horizon):
                w.writerow([tt] + [repr(float(v)) for v in (
                    d.p_grid[tt], d.p_solar[tt], d.p_feedin[tt],
                    d.p_charge[tt], d.p_discharge[tt], d.p_hvac[tt],
                    d.p_trade[tt], d.indoor_temp[tt])])


def run_experiment(scenario: Scenario, modes, out_dir,
                   config: RunConfig | None = None,
                   coordinator_trace: bool = False) -> dict:
    """Run the requested modes and emit trace/report/schedule files.

    Emits per ADMM mode a convergence trace CSV and per-prosumer schedule
    CSVs; when both oracle modes are requested, also a cost report JSON
    with per-prosumer and total reductions. ``coordinator_trace`` adds the
    coordinator's own per-iteration record (with the active count) per
    mode. Returns the summary dict that is also written to ``summary.json``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    modes = list(modes)
    for m in modes:
        if m not in ADMM_MODES + ORACLE_MODES:
            raise ScenarioError(f"unknown mode {m!r}", field="modes")
    base_cfg = config or scenario.run_defaults
    summary: dict = {"modes": {}}

    oracle_results: dict[str, tuple] = {}
    for mode in modes:
        if mode in ORACLE_MODES:
            trading = mode == "oracle"
            decisions, objective, net_state = solve_centralized(
                scenario, trading_enabled=trading)
            oracle_results[mode] = (decisions, objective, net_state)
            write_schedules(decisions, out / mode / "schedules")
            summary["modes"][mode] = {"objective": objective}
        else:
            cfg = RunConfig(
                mode=mode, activation=base_cfg.activation,
                schedule=base_cfg.schedule, eps_primal=base_cfg.eps_primal,
                eps_dual=base_cfg.eps_dual, max_iter=base_cfg.max_iter,
                seed=base_cfg.seed, n_jobs=base_cfg.n_jobs,
                solver=base_cfg.solver,
                trace_path=str(out / f"coordinator_trace_{mode}.csv")
                if coordinator_trace else None)
            result = run(scenario, cfg)
            _write_convergence_csv(result, out / f"trace_{mode}.csv")
            write_schedules(result.schedules, out / mode / "schedules")
            summary["modes"][mode] = {
                "iterations": result.iterations,
                "converged": result.converged,
                "objective": result.objective,
            }

    if "oracle" in oracle_results and "oracle-notrade" in oracle_results:
        report = _cost_report(scenario, oracle_results["oracle"],
                              oracle_results["oracle-notrade"])
        with open(out / "cost_report.json", "w") as fh:
            json.dump(report, fh, indent=2)
            fh.write("\n")
        summary["cost_report"] = report["totals"]

    lines = []
    for mode, info in summary["modes"].items():
        if "iterations" in info:
            lines.append(f"{mode}: {'converged' if info['converged'] else 'stopped'} "
                         f"after {info['iterations']} iterations, "
                         f"objective {info['objective']:.4f}")
        else:
            lines.append(f"{mode}: objective {info['objective']:.4f}")
    summary["summary_lines"] = lines
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    return summary


def _write_convergence_csv(result, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "primal_res", "dual_res", "objective"])
        for r in result.trace:
            w.writerow([r.iteration, repr(r.primal_residual),
                        repr(r.dual_residual), repr(r.objective)])


def _cost_report(scenario: Scenario, with_trade, without_trade) -> dict:
    decisions_t, obj_t, _ = with_trade
    decisions_n, obj_n, _ = without_trade
    per = []
    for i, p in enumerate(scenario.prosumers):
        bt = cost_breakdown(decisions_t[i], p, scenario.trade_prices)
        bn = cost_breakdown(decisions_n[i], p, scenario.trade_prices)
        cost_with = bt["total"]
        cost_without = bn["total"]
        reduction = cost_without - cost_with
        per.append({
            "prosumer": i,
            "cost_with_trading": cost_with,
            "cost_without_trading": cost_without,
            "trading_settlement": bt["trading"],
            "reduction": reduction,
            "reduction_pct": 100.0 * reduction / abs(cost_without)
            if cost_without else 0.0,
        })
    total_with = float(sum(r["cost_with_trading"] for r in per))
    total_without = float(sum(r["cost_without_trading"] for r in per))
    return {
        "per_prosumer": per,
        "totals": {
            "objective_with_trading": obj_t,
            "objective_without_trading": obj_n,
            "cost_with_trading": total_with,
            "cost_without_trading": total_without,
            "total_reduction": total_without - total_with,
            "total_reduction_pct": 100.0 * (total_without - total_with)
            / abs(total_without) if total_without else 0.0,
        },
    }
