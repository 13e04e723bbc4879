"""Operator-side subproblem: consensus variables on a radial feeder.

The operator reconciles the prosumers' trade and net-load proposals with
the community clearing constraint and a linearized distribution-network
model (active/reactive injection recursions along the feeder plus a
voltage-drop recursion around the root-bus voltage), then moves the dual
prices toward agreement.

Feeder layout: node 0 is the slack root behind the transformer; prosumer
``i`` sits at node ``i`` on branch ``i`` with impedance ``(r_i, x_i)``.
The root injection is a free variable within the feeder limits, and
prosumer ``i``'s output power enters the running injection at node ``i``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .agent import AgentUpdate, CouplingSignals, QpBuilder
from .qp import INFEASIBLE, OPTIMAL, QpSolver, QuadraticProgram, SolverSettings
from .validation import InputError, as_vector, frozen, require


class NetworkInfeasibleError(RuntimeError):
    """The operator subproblem admits no balanced allocation within the
    feeder limits; carries the constraint family that certifies it."""

    def __init__(self, family: str, detail: str = ""):
        self.family = family
        super().__init__(
            f"network subproblem infeasible; binding constraint family: {family}"
            + (f" ({detail})" if detail else ""))


class StateError(RuntimeError):
    """Raised when residuals are requested before any completed iteration."""


@dataclass(frozen=True)
class NetworkModel:
    """Radial feeder data: one branch per prosumer plus feeder-wide limits."""

    resistance: np.ndarray
    reactance: np.ndarray
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    root_voltage: np.ndarray
    voltage_tol: float = 0.05

    def __post_init__(self):
        r = np.atleast_1d(np.asarray(self.resistance, dtype=float))
        x = as_vector(self.reactance, r.shape[0], "reactance")
        object.__setattr__(self, "resistance", frozen(r))
        object.__setattr__(self, "reactance", x)
        object.__setattr__(self, "root_voltage",
                           frozen(np.atleast_1d(np.asarray(self.root_voltage, dtype=float))))
        require(bool(np.all(self.resistance >= 0)) and bool(np.all(self.reactance >= 0)),
                "branch impedances must be nonnegative")
        require(self.p_min <= self.p_max, "active-power bounds are inverted")
        require(self.q_min <= self.q_max, "reactive-power bounds are inverted")
        require(0 < self.voltage_tol < 1, "voltage tolerance must lie in (0, 1)")

    @property
    def n_branches(self) -> int:
        return int(self.resistance.shape[0])

    @property
    def horizon(self) -> int:
        return int(self.root_voltage.shape[0])

    @classmethod
    def from_csv(cls, path, *, p_min, p_max, q_min, q_max, root_voltage,
                 voltage_tol=0.05) -> "NetworkModel":
        """Read branch rows ``id,r,x`` (ordered by id from the root)."""
        rows = []
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                rows.append((int(rec["id"]), float(rec["r"]), float(rec["x"])))
        if not rows:
            raise InputError(f"{path}: no branch rows")
        rows.sort()
        r = np.array([rec[1] for rec in rows])
        x = np.array([rec[2] for rec in rows])
        return cls(resistance=r, reactance=x, p_min=p_min, p_max=p_max,
                   q_min=q_min, q_max=q_max, root_voltage=root_voltage,
                   voltage_tol=voltage_tol)


@dataclass(frozen=True)
class NetworkState:
    """Feeder quantities per node (0 = root) and slot."""

    p_injection: np.ndarray   # (n_nodes, H)
    q_injection: np.ndarray   # (n_nodes, H)
    voltage: np.ndarray       # (n_nodes, H)
    p_output: np.ndarray      # (n_prosumers, H)

    def __post_init__(self):
        for name in ("p_injection", "q_injection", "voltage", "p_output"):
            arr = np.asarray(getattr(self, name), dtype=float).copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_nodes(self) -> int:
        return int(self.p_injection.shape[0])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["node", "slot", "p_injection", "q_injection",
                        "voltage", "p_output"])
            for i in range(self.n_nodes):
                for t in range(self.p_injection.shape[1]):
                    out = self.p_output[i - 1, t] if i >= 1 else 0.0
                    w.writerow([i, t,
                                repr(float(self.p_injection[i, t])),
                                repr(float(self.q_injection[i, t])),
                                repr(float(self.voltage[i, t])),
                                repr(float(out))])


def propagate(net: NetworkModel, p_output: np.ndarray, q_load: np.ndarray,
              p_root=0.0, q_root=0.0) -> NetworkState:
    """Run the feeder recursions for given prosumer outputs and loads.

    Pure arithmetic; no limits are enforced. Useful as an independent check
    of the constraint rows the subproblems impose.
    """
    n = net.n_branches
    h = net.horizon
    p_output = np.asarray(p_output, dtype=float).reshape(n, h)
    q_load = np.asarray(q_load, dtype=float).reshape(n, h)
    p_inj = np.zeros((n + 1, h))
    q_inj = np.zeros((n + 1, h))
    volt = np.zeros((n + 1, h))
    p_inj[0] = as_vector(p_root, h, "p_root")
    q_inj[0] = as_vector(q_root, h, "q_root")
    volt[0] = net.root_voltage
    for i in range(1, n + 1):
        p_inj[i] = p_inj[i - 1] + p_output[i - 1]
        q_inj[i] = q_inj[i - 1] - q_load[i - 1]
        volt[i] = volt[i - 1] - (net.resistance[i - 1] * p_inj[i]
                                 + net.reactance[i - 1] * q_inj[i]) / net.root_voltage
    return NetworkState(p_injection=p_inj, q_injection=q_inj, voltage=volt,
                        p_output=p_output)


@dataclass
class OperatorState:
    """Everything the operator holds between iterations."""

    signals: list[CouplingSignals]
    updates: list[AgentUpdate]
    last_dual_delta: np.ndarray | None = None
    residual_history: list[tuple[int, float, float]] = field(default_factory=list)
    iteration: int = 0

    @classmethod
    def initial(cls, n_prosumers: int, horizon: int, rho: float) -> "OperatorState":
        z = np.zeros(horizon)
        return cls(
            signals=[CouplingSignals.zeros(horizon, rho) for _ in range(n_prosumers)],
            updates=[AgentUpdate(prosumer=i, iteration=0, p_trade=z, p_net=z)
                     for i in range(n_prosumers)],
        )

    @property
    def n_prosumers(self) -> int:
        return len(self.signals)


@dataclass(frozen=True)
class UpLayout:
    """Column layout of the operator QP."""

    n_prosumers: int
    horizon: int

    def aux_trade(self, i: int) -> np.ndarray:
        return np.arange(i * self.horizon, (i + 1) * self.horizon)

    def aux_net(self, i: int) -> np.ndarray:
        base = (self.n_prosumers + i) * self.horizon
        return np.arange(base, base + self.horizon)

    def _grid_base(self) -> int:
        return 2 * self.n_prosumers * self.horizon

    def p_inj(self, node: int) -> np.ndarray:
        base = self._grid_base() + node * self.horizon
        return np.arange(base, base + self.horizon)

    def q_inj(self, node: int) -> np.ndarray:
        base = self._grid_base() + (self.n_prosumers + 1 + node) * self.horizon
        return np.arange(base, base + self.horizon)

    def volt(self, node: int) -> np.ndarray:
        base = self._grid_base() + 2 * (self.n_prosumers + 1) * self.horizon \
            + node * self.horizon
        return np.arange(base, base + self.horizon)

    @property
    def size(self) -> int:
        return (2 * self.n_prosumers + 3 * (self.n_prosumers + 1)) * self.horizon


def add_network_block(b: QpBuilder, net: NetworkModel, q_loads: np.ndarray,
                      output_cols, inj_cols, q_cols, v_cols) -> None:
    """Emit the feeder constraints.

    ``output_cols(i, t)`` returns the ``(columns, coefficients)`` whose
    combination equals prosumer ``i``'s output power at slot ``t``;
    ``inj_cols``/``q_cols``/``v_cols`` map a node index to its per-slot
    column arrays. This indirection lets the operator subproblem wire the
    outputs to consensus variables and the centralized solver wire them to
    the prosumers' own decision variables.
    """
    n = net.n_branches
    h = net.horizon
    q_loads = np.asarray(q_loads, dtype=float).reshape(n, h)

    for node in range(n + 1):
        pi = inj_cols(node)
        qi = q_cols(node)
        # tiny tie-break: the root injection is otherwise a costless flat
        # direction; this pins it to the minimum-norm choice
        b.p_diag[pi] += 2e-9
        b.p_diag[qi] += 2e-9
        for t in range(h):
            b.add_box(pi[t], net.p_min, net.p_max, "injection_bounds")
            b.add_box(qi[t], net.q_min, net.q_max, "reactive_bounds")

    for i in range(1, n + 1):
        prev_p, cur_p = inj_cols(i - 1), inj_cols(i)
        prev_q, cur_q = q_cols(i - 1), q_cols(i)
        for t in range(h):
            ocols, ocoef = output_cols(i - 1, t)
            b.add_row([cur_p[t], prev_p[t], *ocols], [1.0, -1.0, *(-c for c in ocoef)],
                      0.0, 0.0, "injection_recursion")
            b.add_row([cur_q[t], prev_q[t]], [1.0, -1.0],
                      -q_loads[i - 1, t], -q_loads[i - 1, t], "reactive_recursion")

    v0 = v_cols(0)
    for t in range(h):
        b.add_row([v0[t]], [1.0], net.root_voltage[t], net.root_voltage[t],
                  "voltage_root")
    for i in range(1, n + 1):
        prev_v, cur_v = v_cols(i - 1), v_cols(i)
        pi, qi = inj_cols(i), q_cols(i)
        for t in range(h):
            b.add_row([cur_v[t], prev_v[t], pi[t], qi[t]],
                      [1.0, -1.0,
                       net.resistance[i - 1] / net.root_voltage[t],
                       net.reactance[i - 1] / net.root_voltage[t]],
                      0.0, 0.0, "voltage_recursion")
            b.add_box(cur_v[t], 1.0 - net.voltage_tol, 1.0 + net.voltage_tol,
                      "voltage_band")


def build_up(updates: list[AgentUpdate], duals: list[tuple[np.ndarray, np.ndarray]],
             rhos: tuple[float, float], net: NetworkModel,
             q_loads: np.ndarray) -> tuple[QuadraticProgram, UpLayout]:
    """The operator subproblem as a standard-form QP.

    Minimizes the dual-price plus proximity terms over the consensus
    variables, subject to the per-slot trade clearing constraint and the
    feeder model with prosumer outputs ``-aux_net - aux_trade``.
    """
    n = net.n_branches
    h = net.horizon
    require(len(updates) == n, "one update per prosumer is required")
    require(len(duals) == n, "one dual pair per prosumer is required")
    lay = UpLayout(n_prosumers=n, horizon=h)
    b = QpBuilder(lay.size)
    rho_trade, rho_net = rhos

    for i, upd in enumerate(updates):
        lam_t, lam_n = duals[i]
        b.p_diag[lay.aux_trade(i)] += rho_trade
        b.q[lay.aux_trade(i)] += lam_t - rho_trade * upd.p_trade
        b.p_diag[lay.aux_net(i)] += rho_net
        b.q[lay.aux_net(i)] += lam_n - rho_net * upd.p_net

    for t in range(h):
        b.add_row([lay.aux_trade(i)[t] for i in range(n)], [1.0] * n,
                  0.0, 0.0, "trade_balance")

    def output_cols(i, t):
        return ([lay.aux_net(i)[t], lay.aux_trade(i)[t]], [-1.0, -1.0])

    add_network_block(b, net, q_loads, output_cols, lay.p_inj, lay.q_inj, lay.volt)
    return b.build(), lay


def state_from_solution(x: np.ndarray, lay: UpLayout) -> NetworkState:
    n, h = lay.n_prosumers, lay.horizon
    p_inj = np.stack([x[lay.p_inj(i)] for i in range(n + 1)])
    q_inj = np.stack([x[lay.q_inj(i)] for i in range(n + 1)])
    volt = np.stack([x[lay.volt(i)] for i in range(n + 1)])
    out = np.stack([-x[lay.aux_net(i)] - x[lay.aux_trade(i)] for i in range(n)])
    return NetworkState(p_injection=p_inj, q_injection=q_inj, voltage=volt,
                        p_output=out)


def update_duals(duals: list[tuple[np.ndarray, np.ndarray]],
                 aux: list[tuple[np.ndarray, np.ndarray]],
                 updates: list[AgentUpdate],
                 rhos: tuple[float, float]) -> list[tuple[np.ndarray, np.ndarray]]:
    """Price ascent on the agreement gaps, elementwise per prosumer."""
    rho_trade, rho_net = rhos
    out = []
    for (lam_t, lam_n), (aux_t, aux_n), upd in zip(duals, aux, updates):
        out.append((lam_t + rho_trade * (aux_t - upd.p_trade),
                    lam_n + rho_net * (aux_n - upd.p_net)))
    return out


def residuals(state: OperatorState) -> tuple[float, float]:
    """(primal, dual) residuals of the latest completed iteration.

    Primal: sum over prosumers of the Euclidean norm of the stacked
    trade/net agreement gap. Dual: Euclidean norm of the stacked dual
    increments of all prosumers.
    """
    if state.iteration < 1 or state.last_dual_delta is None:
        raise StateError("residuals requested before the first iteration")
    primal = 0.0
    for sig, upd in zip(state.signals, state.updates):
        gap = np.concatenate([upd.p_trade - sig.aux_trade, upd.p_net - sig.aux_net])
        primal += float(np.linalg.norm(gap))
    dual = float(np.linalg.norm(state.last_dual_delta))
    return primal, dual


class NetworkOperator:
    """Operator workspace: holds the authoritative coupling state and the
    subproblem solver. Owned and driven by a single coordinator thread."""

    def __init__(self, net: NetworkModel, q_loads: np.ndarray, rho0: float,
                 settings: SolverSettings | None = None):
        self.net = net
        self.q_loads = np.asarray(q_loads, dtype=float).reshape(
            net.n_branches, net.horizon)
        self.state = OperatorState.initial(net.n_branches, net.horizon, rho0)
        self._solver = QpSolver(settings)
        self._layout: UpLayout | None = None
        self._qp: QuadraticProgram | None = None
        self._rhos: tuple[float, float] | None = None

    def receive(self, updates: list[AgentUpdate]) -> None:
        for upd in updates:
            self.state.updates[upd.prosumer] = upd

    def _unconstrained_aux(self, rhos: tuple[float, float]
                           ) -> tuple[np.ndarray, np.ndarray]:
        """The subproblem optimum ignoring the feeder limits: net targets
        shift by their price, trade targets additionally project onto the
        per-slot clearing plane."""
        st = self.state
        trades = np.stack([u.p_trade for u in st.updates])
        nets = np.stack([u.p_net for u in st.updates])
        lam_t = np.stack([s.dual_trade for s in st.signals])
        lam_n = np.stack([s.dual_net for s in st.signals])
        centered = trades - lam_t / rhos[0]
        aux_t = centered - centered.mean(axis=0)
        aux_n = nets - lam_n / rhos[1]
        return aux_t, aux_n

    def _fast_path(self, rhos: tuple[float, float],
                   ) -> tuple[list[tuple[np.ndarray, np.ndarray]], NetworkState] | None:
        """Exact solution when no feeder limit binds.

        If the unconstrained optimum, completed with minimum-norm root
        injections, satisfies every feeder constraint, it is the optimum of
        the full subproblem (all limit multipliers vanish), so the quadratic
        program can be skipped.
        """
        net = self.net
        aux_t, aux_n = self._unconstrained_aux(rhos)
        outputs = -aux_n - aux_t
        h = net.horizon
        zero = np.zeros((1, h))
        cum_p = np.vstack([zero, np.cumsum(outputs, axis=0)])
        p_root = np.clip(-cum_p.mean(axis=0), net.p_min, net.p_max)
        cum_q = np.vstack([zero, -np.cumsum(self.q_loads, axis=0)])
        q_root = np.clip(-cum_q.mean(axis=0), net.q_min, net.q_max)
        state = propagate(net, outputs, self.q_loads,
                          p_root=p_root, q_root=q_root)
        if np.any(state.p_injection < net.p_min) \
                or np.any(state.p_injection > net.p_max):
            return None
        if np.any(state.q_injection < net.q_min) \
                or np.any(state.q_injection > net.q_max):
            return None
        volt = state.voltage[1:]
        if np.any(volt < 1.0 - net.voltage_tol) \
                or np.any(volt > 1.0 + net.voltage_tol):
            return None
        aux = [(aux_t[i], aux_n[i]) for i in range(net.n_branches)]
        return aux, state

    def solve_up(self, rhos: tuple[float, float],
                 ) -> tuple[list[tuple[np.ndarray, np.ndarray]], NetworkState]:
        """Solve for the consensus variables, refresh the held signals, and
        return them together with the implied feeder state."""
        st = self.state
        fast = self._fast_path(rhos)
        if fast is not None:
            aux, net_state = fast
            for i, sig in enumerate(st.signals):
                st.signals[i] = CouplingSignals(
                    aux_trade=aux[i][0], aux_net=aux[i][1],
                    dual_trade=sig.dual_trade, dual_net=sig.dual_net,
                    rho_trade=rhos[0], rho_net=rhos[1])
            return aux, net_state
        duals = [(sig.dual_trade, sig.dual_net) for sig in st.signals]
        if self._qp is None:
            self._qp, self._layout = build_up(st.updates, duals, rhos,
                                              self.net, self.q_loads)
            self._solver.setup(self._qp)
            self._rhos = rhos
        else:
            lay = self._layout
            q = np.zeros(lay.size)
            for i, (sig, upd) in enumerate(zip(st.signals, st.updates)):
                q[lay.aux_trade(i)] = sig.dual_trade - rhos[0] * upd.p_trade
                q[lay.aux_net(i)] = sig.dual_net - rhos[1] * upd.p_net
            if rhos != self._rhos:
                p_diag = np.zeros(lay.size)
                for i in range(lay.n_prosumers):
                    p_diag[lay.aux_trade(i)] = rhos[0]
                    p_diag[lay.aux_net(i)] = rhos[1]
                self._solver.update(
                    q_vec=q,
                    p_mat=sparse.diags(p_diag, format="csc",
                                       shape=(lay.size, lay.size)))
                self._rhos = rhos
            else:
                self._solver.update(q_vec=q)
        solution = self._solver.solve()
        if solution.status == INFEASIBLE:
            raise NetworkInfeasibleError(self._diagnose(solution))
        if solution.status != OPTIMAL:
            raise NetworkInfeasibleError(
                "unknown", f"operator solve ended with status {solution.status}")
        lay = self._layout
        aux = []
        for i, sig in enumerate(st.signals):
            pair = (solution.x[lay.aux_trade(i)], solution.x[lay.aux_net(i)])
            aux.append(pair)
            st.signals[i] = CouplingSignals(
                aux_trade=pair[0], aux_net=pair[1],
                dual_trade=sig.dual_trade, dual_net=sig.dual_net,
                rho_trade=rhos[0], rho_net=rhos[1])
        return aux, state_from_solution(solution.x, lay)

    def update_duals(self, rhos: tuple[float, float]) -> None:
        st = self.state
        duals = [(sig.dual_trade, sig.dual_net) for sig in st.signals]
        aux = [(sig.aux_trade, sig.aux_net) for sig in st.signals]
        new = update_duals(duals, aux, st.updates, rhos)
        delta = np.concatenate([
            np.concatenate([nt - ot, nn - on])
            for (nt, nn), (ot, on) in zip(new, duals)])
        st.last_dual_delta = delta
        for i, sig in enumerate(st.signals):
            st.signals[i] = CouplingSignals(
                aux_trade=sig.aux_trade, aux_net=sig.aux_net,
                dual_trade=new[i][0], dual_net=new[i][1],
                rho_trade=sig.rho_trade, rho_net=sig.rho_net)

    def residuals(self) -> tuple[float, float]:
        return residuals(self.state)

    def _diagnose(self, solution) -> str:
        cert = solution.infeasibility_certificate
        labels = self._qp.row_labels
        if cert is None or labels is None:
            return "unknown"
        weight: dict[str, float] = {}
        for lab, v in zip(labels, np.abs(cert)):
            weight[lab] = weight.get(lab, 0.0) + float(v)
        return max(weight, key=weight.get)
