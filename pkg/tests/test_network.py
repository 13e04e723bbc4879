import numpy as np
import pytest

from p2ptrade.agent import AgentUpdate
from p2ptrade.network import (NetworkInfeasibleError, NetworkModel,
                              NetworkOperator, NetworkState, OperatorState,
                              StateError, build_up, propagate, residuals,
                              update_duals)
from p2ptrade.qp import OPTIMAL, solve


def feeder(n, h, r=1e-3, x=1e-3, p_lim=50.0, q_lim=50.0, eps=0.05):
    return NetworkModel(resistance=np.full(n, r), reactance=np.full(n, x),
                        p_min=-p_lim, p_max=p_lim, q_min=-q_lim, q_max=q_lim,
                        root_voltage=np.ones(h), voltage_tol=eps)


def updates_from(vectors, h):
    return [AgentUpdate(prosumer=i, iteration=1,
                        p_trade=np.asarray(tr, float),
                        p_net=np.asarray(nt, float))
            for i, (tr, nt) in enumerate(vectors)]


def operator_with(net, updates, rho=1.0, q_loads=None):
    n, h = net.n_branches, net.horizon
    q_loads = np.zeros((n, h)) if q_loads is None else q_loads
    op = NetworkOperator(net, q_loads, rho)
    op.receive(updates)
    return op


class TestPropagate:
    def test_zero_outputs_keep_root_voltage(self):
        net = feeder(3, 4)
        state = propagate(net, np.zeros((3, 4)), np.zeros((3, 4)))
        assert np.allclose(state.voltage, 1.0)
        assert np.allclose(state.p_injection, 0.0)

    def test_hand_voltage_drop(self):
        # one branch, r = x = 0.01, unit injections, root voltage 1
        net = feeder(1, 1, r=0.01, x=0.01)
        state = propagate(net, np.array([[1.0]]), np.zeros((1, 1)),
                          p_root=0.0, q_root=1.0)
        # p_inj at node 1 = 0 + 1 = 1; q_inj = 1 - 0 = 1
        assert state.voltage[1, 0] == pytest.approx(0.98, abs=1e-12)

    def test_telescoping_identity(self):
        rng = np.random.default_rng(0)
        net = feeder(5, 6)
        out = rng.normal(size=(5, 6))
        state = propagate(net, out, np.zeros((5, 6)), p_root=rng.normal(size=6))
        assert np.max(np.abs(state.p_injection[-1]
                             - state.p_injection[0] - out.sum(axis=0))) < 1e-9

    def test_voltage_monotone_under_uniform_export(self):
        rng = np.random.default_rng(1)
        net = feeder(6, 4, r=1e-3, x=1e-3)
        out = rng.uniform(0.0, 2.0, size=(6, 4))
        state = propagate(net, out, np.zeros((6, 4)))
        assert np.all(np.diff(state.voltage, axis=0) <= 1e-15)


class TestBuildUp:
    def test_balanced_updates_pass_through(self):
        h = 3
        net = feeder(2, h)
        a = np.array([0.7, -0.2, 0.5])
        ups = updates_from([(a, np.zeros(h)), (-a, np.zeros(h))], h)
        qp, lay = build_up(ups, [(np.zeros(h), np.zeros(h))] * 2, (1.0, 1.0),
                           net, np.zeros((2, h)))
        sol = solve(qp)
        assert sol.status == OPTIMAL
        assert np.max(np.abs(sol.x[lay.aux_trade(0)] - a)) < 1e-7
        assert np.max(np.abs(sol.x[lay.aux_trade(1)] + a)) < 1e-7

    def test_symmetric_updates_project_to_zero(self):
        h = 2
        net = feeder(2, h)
        a = np.array([1.5, 0.4])
        ups = updates_from([(a, np.zeros(h)), (a, np.zeros(h))], h)
        qp, lay = build_up(ups, [(np.zeros(h), np.zeros(h))] * 2, (1.0, 1.0),
                           net, np.zeros((2, h)))
        sol = solve(qp)
        assert np.max(np.abs(sol.x[lay.aux_trade(0)])) < 1e-7
        assert np.max(np.abs(sol.x[lay.aux_trade(1)])) < 1e-7
        # brute check: projection of (a, a) onto the balance plane is (0, 0)
        grid = np.linspace(-2, 2, 161)
        for t in range(h):
            best = min(grid, key=lambda v: (v - a[t]) ** 2 + (-v - a[t]) ** 2)
            assert abs(best) <= 0.05

    def test_zero_output_means_root_voltage_everywhere(self):
        h = 2
        net = feeder(3, h)
        ups = updates_from([(np.zeros(h), np.zeros(h))] * 3, h)
        op = operator_with(net, ups)
        aux, state = op.solve_up((1.0, 1.0))
        assert np.max(np.abs(state.voltage - 1.0)) < 1e-7
        # the root injection is a tie-broken flat direction: zero at solver scale
        assert np.max(np.abs(state.p_injection)) < 1e-5


class TestSolveUp:
    def test_interior_solution_equals_updates(self):
        rng = np.random.default_rng(4)
        h = 4
        n = 10
        net = feeder(n, h, r=1e-4, x=1e-4)
        trades = rng.normal(size=(n, h))
        trades -= trades.mean(axis=0)  # balanced
        nets = rng.normal(size=(n, h))
        ups = updates_from(list(zip(trades, nets)), h)
        op = operator_with(net, ups)
        aux, state = op.solve_up((1.0, 1.0))
        for i in range(n):
            assert np.max(np.abs(aux[i][0] - trades[i])) < 1e-6
            assert np.max(np.abs(aux[i][1] - nets[i])) < 1e-6

    def test_balance_holds_per_slot(self):
        rng = np.random.default_rng(5)
        h = 6
        n = 4
        net = feeder(n, h)
        ups = updates_from([(rng.normal(size=h), rng.normal(size=h))
                            for _ in range(n)], h)
        op = operator_with(net, ups)
        aux, _ = op.solve_up((2.0, 2.0))
        total = sum(a[0] for a in aux)
        assert np.max(np.abs(total)) < 1e-6

    def test_telescoping_from_solution(self):
        rng = np.random.default_rng(6)
        h = 3
        n = 5
        net = feeder(n, h)
        ups = updates_from([(rng.normal(size=h), rng.normal(size=h))
                            for _ in range(n)], h)
        op = operator_with(net, ups)
        _, state = op.solve_up((1.0, 1.0))
        lhs = state.p_injection[-1]
        rhs = state.p_injection[0] + state.p_output.sum(axis=0)
        assert np.max(np.abs(lhs - rhs)) < 1e-9

    def test_forced_injection_voltage(self):
        # pin both injections to 1 via the feeder limits
        h = 1
        net = NetworkModel(resistance=np.array([0.01]), reactance=np.array([0.01]),
                           p_min=1.0, p_max=1.0, q_min=1.0, q_max=1.0,
                           root_voltage=np.ones(1), voltage_tol=0.05)
        ups = updates_from([(np.zeros(1), np.zeros(1))], 1)
        op = operator_with(net, ups)
        _, state = op.solve_up((1.0, 1.0))
        assert state.voltage[1, 0] == pytest.approx(0.98, abs=1e-8)

    def test_infeasible_network_names_family(self):
        # voltage band impossible: huge forced injection on a resistive branch
        h = 1
        net = NetworkModel(resistance=np.array([0.5]), reactance=np.array([0.0]),
                           p_min=1.0, p_max=1.0, q_min=0.0, q_max=0.0,
                           root_voltage=np.ones(1), voltage_tol=0.05)
        ups = updates_from([(np.zeros(1), np.zeros(1))], 1)
        op = operator_with(net, ups)
        with pytest.raises(NetworkInfeasibleError) as err:
            op.solve_up((1.0, 1.0))
        assert err.value.family in ("voltage_band", "voltage_recursion",
                                    "voltage_root", "injection_bounds",
                                    "injection_recursion")


class TestDualsAndResiduals:
    def test_no_gap_no_dual_change(self):
        h = 2
        ups = updates_from([(np.ones(h), np.zeros(h))], h)
        duals = [(np.full(h, 0.3), np.full(h, -0.2))]
        aux = [(np.ones(h), np.zeros(h))]
        new = update_duals(duals, aux, ups, (1.0, 1.0))
        assert np.allclose(new[0][0], 0.3) and np.allclose(new[0][1], -0.2)

    def test_dual_increment_direct(self):
        h = 1
        ups = updates_from([(np.zeros(1), np.zeros(1))], h)
        aux = [(np.array([0.5]), np.array([0.0]))]
        new = update_duals([(np.zeros(1), np.zeros(1))], aux, ups, (1.0, 1.0))
        assert new[0][0][0] == pytest.approx(0.5)

    def test_harmonic_step_increment(self):
        # stepsize 1/k at k = 4 with a gap of 2 moves the dual by 0.5
        h = 1
        rho = 1.0 / 4.0
        ups = updates_from([(np.zeros(1), np.zeros(1))], h)
        aux = [(np.array([2.0]), np.array([0.0]))]
        new = update_duals([(np.zeros(1), np.zeros(1))], aux, ups, (rho, rho))
        assert new[0][0][0] == pytest.approx(0.5)

    def test_dual_update_is_affine_in_duals(self):
        rng = np.random.default_rng(8)
        h = 3
        ups = updates_from([(rng.normal(size=h), rng.normal(size=h))
                            for _ in range(2)], h)
        aux = [(rng.normal(size=h), rng.normal(size=h)) for _ in range(2)]
        lam = [(rng.normal(size=h), rng.normal(size=h)) for _ in range(2)]
        zero = [(np.zeros(h), np.zeros(h))] * 2
        with_lam = update_duals(lam, aux, ups, (0.7, 1.3))
        without = update_duals(zero, aux, ups, (0.7, 1.3))
        for i in range(2):
            assert np.allclose(with_lam[i][0] - without[i][0], lam[i][0])
            assert np.allclose(with_lam[i][1] - without[i][1], lam[i][1])

    def test_residuals_before_first_iteration_raise(self):
        state = OperatorState.initial(2, 3, 1.0)
        with pytest.raises(StateError):
            residuals(state)

    def test_residual_values(self):
        h = 1
        state = OperatorState.initial(2, h, 1.0)
        # prosumer 0: gap 3 in trade; prosumer 1: gap 4 in net
        state.updates[0] = AgentUpdate(prosumer=0, iteration=1,
                                       p_trade=np.array([3.0]), p_net=np.zeros(1))
        state.updates[1] = AgentUpdate(prosumer=1, iteration=1,
                                       p_trade=np.zeros(1), p_net=np.array([4.0]))
        state.last_dual_delta = np.zeros(4)
        state.iteration = 1
        primal, dual = residuals(state)
        assert primal == pytest.approx(7.0)
        assert dual == pytest.approx(0.0)

    def test_single_gap_residual(self):
        h = 1
        state = OperatorState.initial(1, h, 1.0)
        state.updates[0] = AgentUpdate(prosumer=0, iteration=1,
                                       p_trade=np.array([0.3]), p_net=np.zeros(1))
        state.last_dual_delta = np.zeros(2)
        state.iteration = 1
        primal, dual = residuals(state)
        assert primal == pytest.approx(0.3)
        assert dual == pytest.approx(0.0)


class TestNetworkModelIO:
    def test_from_csv(self, tmp_path):
        path = tmp_path / "net.csv"
        path.write_text("id,r,x\n2,0.02,0.002\n1,0.01,0.001\n")
        net = NetworkModel.from_csv(path, p_min=-1, p_max=1, q_min=-1, q_max=1,
                                    root_voltage=np.ones(2))
        assert net.n_branches == 2
        assert net.resistance[0] == pytest.approx(0.01)  # sorted by id
        assert net.reactance[1] == pytest.approx(0.002)

    def test_state_csv_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        state = NetworkState(p_injection=rng.normal(size=(3, 2)),
                             q_injection=rng.normal(size=(3, 2)),
                             voltage=1 + 0.01 * rng.normal(size=(3, 2)),
                             p_output=rng.normal(size=(2, 2)))
        path = tmp_path / "state.csv"
        state.to_csv(path)
        import csv as _csv
        with open(path) as fh:
            rows = list(_csv.DictReader(fh))
        assert len(rows) == 3 * 2
        got = float(rows[3]["voltage"])
        assert got == pytest.approx(state.voltage[1, 1], abs=0)
