"""Command-line surface.

Subcommands:
  run       execute one or more solve modes on a scenario and write reports
  generate  write a deterministic synthetic scenario to disk
  validate  load a scenario and report whether it is well formed
  oracle    solve the centralized problem and print the objective

Failures exit nonzero and print a machine-readable JSON error to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .coordinator import ActivationModel, RunConfig, StepsizeSchedule
from .network import NetworkInfeasibleError
from .oracle import solve_centralized
from .scenario import (ScenarioError, generate_synthetic, load_scenario,
                       run_experiment, save_scenario, write_schedules)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="p2ptrade",
        description="Peer-to-peer energy trading simulator and solvers")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run solve modes and write reports")
    p_run.add_argument("--scenario", required=True, help="scenario.json path")
    p_run.add_argument("--mode", action="append",
                       choices=["sync", "async", "oracle", "oracle-notrade"],
                       help="mode to run; repeat for several (default: sync)")
    p_run.add_argument("--activation-prob", type=float, default=None,
                       help="per-prosumer success probability in async mode")
    p_run.add_argument("--dropout", type=float, default=None,
                       help="use fixed-dropout activation with this fraction")
    p_run.add_argument("--rho-schedule", choices=["constant", "harmonic"],
                       default=None)
    p_run.add_argument("--rho0", type=float, default=None)
    p_run.add_argument("--eps1", type=float, default=None,
                       help="primal residual threshold")
    p_run.add_argument("--eps2", type=float, default=None,
                       help="dual residual threshold")
    p_run.add_argument("--max-iter", type=int, default=None)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out-dir", default="out")
    p_run.add_argument("--trace", action="store_true",
                       help="also write the coordinator trace per mode")

    p_gen = sub.add_parser("generate", help="write a synthetic scenario")
    p_gen.add_argument("--n", type=int, required=True)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--horizon", type=int, default=24)
    p_gen.add_argument("--out-dir", required=True)

    p_val = sub.add_parser("validate", help="check a scenario file")
    p_val.add_argument("--scenario", required=True)

    p_or = sub.add_parser("oracle", help="solve the centralized problem")
    p_or.add_argument("--scenario", required=True)
    p_or.add_argument("--no-trading", action="store_true")
    p_or.add_argument("--out-dir", default=None,
                      help="write per-prosumer schedule CSVs here")
    return parser


def _merged_config(scenario, args) -> RunConfig:
    base = scenario.run_defaults
    activation = base.activation
    if args.dropout is not None:
        activation = ActivationModel(kind="fixed-dropout",
                                     dropout_fraction=args.dropout,
                                     p_active=activation.p_active,
                                     max_staleness=activation.max_staleness)
    elif args.activation_prob is not None:
        activation = ActivationModel(kind="bernoulli",
                                     p_active=args.activation_prob,
                                     dropout_fraction=activation.dropout_fraction,
                                     max_staleness=activation.max_staleness)
    schedule = StepsizeSchedule(
        kind=args.rho_schedule or base.schedule.kind,
        rho0=args.rho0 if args.rho0 is not None else base.schedule.rho0)
    return RunConfig(
        mode=base.mode,
        activation=activation,
        schedule=schedule,
        eps_primal=args.eps1 if args.eps1 is not None else base.eps_primal,
        eps_dual=args.eps2 if args.eps2 is not None else base.eps_dual,
        max_iter=args.max_iter if args.max_iter is not None else base.max_iter,
        seed=args.seed if args.seed is not None else base.seed,
        trace_path=None)


def _cmd_run(args) -> int:
    scenario = load_scenario(args.scenario)
    modes = args.mode or ["sync"]
    config = _merged_config(scenario, args)
    summary = run_experiment(scenario, modes, args.out_dir, config,
                             coordinator_trace=args.trace)
    for line in summary["summary_lines"]:
        print(line)
    return 0


def _cmd_generate(args) -> int:
    scenario = generate_synthetic(args.n, args.seed, args.horizon)
    path = save_scenario(scenario, args.out_dir)
    print(f"wrote {path}")
    return 0


def _cmd_validate(args) -> int:
    scenario = load_scenario(args.scenario)
    print(f"ok: {scenario.n_prosumers} prosumers, "
          f"horizon {scenario.grid.horizon}, "
          f"{scenario.network.n_branches} branches")
    return 0


def _cmd_oracle(args) -> int:
    scenario = load_scenario(args.scenario)
    decisions, objective, _ = solve_centralized(
        scenario, trading_enabled=not args.no_trading)
    print(f"objective: {objective:.6f}")
    if args.out_dir:
        write_schedules(decisions, Path(args.out_dir))
        print(f"schedules written to {args.out_dir}")
    return 0


_COMMANDS = {
    "run": _cmd_run,
    "generate": _cmd_generate,
    "validate": _cmd_validate,
    "oracle": _cmd_oracle,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ScenarioError as exc:
        _emit_error("scenario-error", exc, field=exc.field, path=exc.path)
        return 2
    except NetworkInfeasibleError as exc:
        _emit_error("infeasible", exc, family=exc.family)
        return 3
    except Exception as exc:  # pragma: no cover - catch-all for the CLI
        _emit_error(type(exc).__name__, exc)
        return 1


def _emit_error(kind: str, exc: Exception, **context) -> None:
    payload = {"error": kind, "message": str(exc)}
    payload.update({k: v for k, v in context.items() if v is not None})
    print(json.dumps(payload), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
