import numpy as np
import pytest

from p2ptrade import (CentralizedSolver, DistributedTradingSolver,
                      solve_centralized)
from p2ptrade.validation import InputError


class TestParamsProtocol:
    def test_get_params_round_trip(self):
        est = DistributedTradingSolver(mode="async", rho0=2.0, seed=42)
        params = est.get_params()
        clone = DistributedTradingSolver(**params)
        assert clone.get_params() == params

    def test_set_params_returns_self(self):
        est = DistributedTradingSolver()
        assert est.set_params(max_iter=50) is est
        assert est.max_iter == 50

    def test_set_params_rejects_unknown(self):
        with pytest.raises(InputError):
            DistributedTradingSolver().set_params(warp_factor=9)

    def test_params_stored_verbatim(self):
        est = CentralizedSolver(trading=False)
        assert est.get_params() == {"trading": False}


class TestFitting:
    def test_distributed_fit_sets_attributes(self, tiny_scenario):
        est = DistributedTradingSolver(mode="sync", rho_schedule="constant",
                                       eps_primal=1e-2, eps_dual=1e-2,
                                       max_iter=100, seed=0)
        out = est.fit(tiny_scenario)
        assert out is est
        assert est.converged_
        assert est.n_iter_ == est.result_.iterations
        assert len(est.schedules_) == tiny_scenario.n_prosumers
        assert np.isfinite(est.objective_)

    def test_centralized_fit_matches_function(self, tiny_scenario):
        est = CentralizedSolver().fit(tiny_scenario)
        _, objective, _ = solve_centralized(tiny_scenario)
        assert est.objective_ == pytest.approx(objective, rel=1e-9)
        assert est.network_state_.voltage.shape[0] == tiny_scenario.n_prosumers + 1

    def test_estimators_compose_with_sklearn_clone(self, tiny_scenario):
        sklearn = pytest.importorskip("sklearn")
        from sklearn.base import clone
        est = DistributedTradingSolver(max_iter=20, seed=3)
        cloned = clone(est)
        assert cloned.get_params() == est.get_params()
