import csv
import json

import pytest

from p2ptrade.cli import main


@pytest.fixture(scope="module")
def scenario_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "sc"
    assert main(["generate", "--n", "2", "--seed", "3", "--horizon", "6",
                 "--out-dir", str(out)]) == 0
    return out


class TestGenerateValidate:
    def test_generate_writes_config(self, scenario_dir):
        assert (scenario_dir / "scenario.json").exists()
        assert (scenario_dir / "network.csv").exists()

    def test_validate_ok(self, scenario_dir, capsys):
        assert main(["validate", "--scenario",
                     str(scenario_dir / "scenario.json")]) == 0
        assert "ok: 2 prosumers" in capsys.readouterr().out

    def test_validate_missing_file_machine_readable(self, capsys, tmp_path):
        code = main(["validate", "--scenario", str(tmp_path / "nope.json")])
        assert code != 0
        err = json.loads(capsys.readouterr().err)
        assert err["error"] == "scenario-error"
        assert "nope.json" in err["message"]


class TestRun:
    def test_run_sync_and_oracles(self, scenario_dir, tmp_path, capsys):
        out = tmp_path / "out"
        code = main(["run", "--scenario", str(scenario_dir / "scenario.json"),
                     "--mode", "sync", "--mode", "oracle",
                     "--mode", "oracle-notrade",
                     "--rho-schedule", "constant", "--eps1", "1e-3",
                     "--eps2", "1e-3", "--max-iter", "300",
                     "--seed", "1", "--out-dir", str(out)])
        assert code == 0
        stdout = capsys.readouterr().out
        assert "sync" in stdout and "oracle" in stdout
        assert (out / "trace_sync.csv").exists()
        assert (out / "cost_report.json").exists()
        summary = json.loads((out / "summary.json").read_text())
        assert summary["modes"]["sync"]["converged"]
        with open(out / "trace_sync.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == summary["modes"]["sync"]["iterations"]

    def test_run_async_flags(self, scenario_dir, tmp_path):
        out = tmp_path / "out_async"
        code = main(["run", "--scenario", str(scenario_dir / "scenario.json"),
                     "--mode", "async", "--activation-prob", "0.8",
                     "--max-iter", "300", "--seed", "2",
                     "--out-dir", str(out), "--trace"])
        assert code == 0
        assert (out / "trace_async.csv").exists()
        trace = out / "coordinator_trace_async.csv"
        assert trace.exists()
        with open(trace) as fh:
            header = fh.readline().strip()
        assert header == "iter,n_active,primal_res,dual_res,objective"

    def test_oracle_subcommand(self, scenario_dir, tmp_path, capsys):
        out = tmp_path / "sched"
        code = main(["oracle", "--scenario",
                     str(scenario_dir / "scenario.json"),
                     "--out-dir", str(out)])
        assert code == 0
        assert "objective:" in capsys.readouterr().out
        assert (out / "prosumer00.csv").exists()

    def test_oracle_no_trading_costs_more(self, scenario_dir, capsys):
        main(["oracle", "--scenario", str(scenario_dir / "scenario.json")])
        with_trade = float(capsys.readouterr().out.split()[-1])
        main(["oracle", "--scenario", str(scenario_dir / "scenario.json"),
              "--no-trading"])
        without = float(capsys.readouterr().out.split()[-1])
        assert with_trade <= without + 1e-9
