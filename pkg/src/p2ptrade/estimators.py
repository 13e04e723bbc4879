"""Estimator-style entry points for the two community solvers.

Both classes follow the scikit-learn protocol: hyperparameters are plain
constructor arguments stored verbatim, ``get_params``/``set_params`` allow
grid search and cloning, ``fit`` takes a :class:`~p2ptrade.scenario.Scenario`
and returns ``self``, and fitted attributes carry a trailing underscore.
"""

from __future__ import annotations

import inspect

from .coordinator import ActivationModel, RunConfig, StepsizeSchedule, run
from .oracle import solve_centralized
from .validation import InputError


class BaseSolver:
    """Minimal scikit-learn-compatible parameter handling."""

    @classmethod
    def _param_names(cls):
        sig = inspect.signature(cls.__init__)
        return [name for name in sig.parameters if name != "self"]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params):
        valid = set(self._param_names())
        for name, value in params.items():
            if name not in valid:
                raise InputError(
                    f"invalid parameter {name!r} for {type(self).__name__}")
            setattr(self, name, value)
        return self


class DistributedTradingSolver(BaseSolver):
    """Iterative distributed solver for community energy trading.

    Parameters mirror :class:`~p2ptrade.coordinator.RunConfig`. After
    ``fit`` the instance exposes ``result_``, ``schedules_``, ``n_iter_``,
    ``converged_``, and ``objective_``.
    """

    def __init__(self, mode="sync", activation="bernoulli", activation_prob=0.8,
                 dropout_fraction=0.2, max_staleness=3, rho_schedule="harmonic",
                 rho0=1.0, eps_primal=1e-2, eps_dual=1e-2, max_iter=2000,
                 seed=0, n_jobs=None):
        self.mode = mode
        self.activation = activation
        self.activation_prob = activation_prob
        self.dropout_fraction = dropout_fraction
        self.max_staleness = max_staleness
        self.rho_schedule = rho_schedule
        self.rho0 = rho0
        self.eps_primal = eps_primal
        self.eps_dual = eps_dual
        self.max_iter = max_iter
        self.seed = seed
        self.n_jobs = n_jobs

    def _config(self) -> RunConfig:
        return RunConfig(
            mode=self.mode,
            activation=ActivationModel(
                kind=self.activation, p_active=self.activation_prob,
                dropout_fraction=self.dropout_fraction,
                max_staleness=self.max_staleness),
            schedule=StepsizeSchedule(kind=self.rho_schedule, rho0=self.rho0),
            eps_primal=self.eps_primal, eps_dual=self.eps_dual,
            max_iter=self.max_iter, seed=self.seed, n_jobs=self.n_jobs)

    def fit(self, scenario, y=None):
        result = run(scenario, self._config())
        self.result_ = result
        self.schedules_ = result.schedules
        self.n_iter_ = result.iterations
        self.converged_ = result.converged
        self.objective_ = result.objective
        return self


class CentralizedSolver(BaseSolver):
    """Monolithic reference solver. After ``fit``: ``schedules_``,
    ``objective_``, and ``network_state_``."""

    def __init__(self, trading=True):
        self.trading = trading

    def fit(self, scenario, y=None):
        decisions, objective, net_state = solve_centralized(
            scenario, trading_enabled=self.trading)
        self.schedules_ = tuple(decisions)
        self.objective_ = objective
        self.network_state_ = net_state
        return self
