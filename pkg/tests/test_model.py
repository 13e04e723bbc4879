import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from p2ptrade import (ScheduleDecision, check_feasibility,
                      evaluate_schedule_cost, evaluate_trading_cost,
                      simulate_battery, simulate_temperature)
from p2ptrade.model import _thermal_coeffs
from p2ptrade.validation import DimensionError, InputError

from conftest import rand_feasible_controls, small_params


class TestBattery:
    def test_idle_battery_holds_level(self, params4):
        traj = simulate_battery(np.zeros(4), np.zeros(4), params4)
        assert np.allclose(traj, 5.0)

    def test_charge_efficiency(self):
        p = small_params(1, batt_init_level=1.0)
        traj = simulate_battery([1.0], [0.0], p)
        assert traj[0] == pytest.approx(1.0 + 0.9)

    def test_discharge_efficiency(self):
        p = small_params(1, batt_init_level=2.0)
        traj = simulate_battery([0.0], [0.9], p)
        assert traj[0] == pytest.approx(2.0 - 0.9 / 0.9)

    def test_length_mismatch_raises(self, params4):
        with pytest.raises(DimensionError):
            simulate_battery(np.zeros(3), np.zeros(4), params4)

    def test_affine_in_controls(self, params4):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a_ch, a_dis = rng.uniform(0, 2, 4), rng.uniform(0, 2, 4)
            b_ch, b_dis = rng.uniform(0, 2, 4), rng.uniform(0, 2, 4)
            c_ch, c_dis = rng.uniform(0, 2, 4), rng.uniform(0, 2, 4)
            d1 = (simulate_battery(a_ch + b_ch, a_dis + b_dis, params4)
                  - simulate_battery(a_ch, a_dis, params4))
            d2 = (simulate_battery(c_ch + b_ch, c_dis + b_dis, params4)
                  - simulate_battery(c_ch, c_dis, params4))
            assert np.allclose(d1, d2, atol=1e-12)

    def test_finite_difference_sensitivity(self, params4):
        # the dynamics are affine, so central differences are exact
        base_ch = np.ones(4)
        for tau in range(4):
            bump = np.zeros(4)
            bump[tau] = 1.0
            grad = (simulate_battery(base_ch + bump, np.zeros(4), params4)
                    - simulate_battery(base_ch - bump, np.zeros(4), params4)) / 2
            expected = np.where(np.arange(4) >= tau, params4.eff_ch, 0.0)
            assert np.max(np.abs(grad - expected)) < 1e-9


class TestTemperature:
    def test_equilibrium_is_steady(self):
        p = small_params(6, outdoor_temp=24.0, temp_init=24.0)
        traj = simulate_temperature(np.zeros(6), p)
        assert np.allclose(traj, 24.0)

    def test_one_step_drift(self):
        p = small_params(1, hvac_c=3.3, hvac_r=1.35, outdoor_temp=30.0,
                         temp_init=20.0)
        traj = simulate_temperature([0.0], p)
        assert traj[0] == pytest.approx(20.0 + 10.0 / 4.455, abs=1e-12)

    def test_steady_hold_fixed_point(self):
        # pick hvac power that exactly cancels the outdoor pull
        p = small_params(1, hvac_eta=-2.5, outdoor_temp=30.0, temp_init=20.0)
        hold = (20.0 - 30.0) / (p.hvac_eta * p.hvac_r)
        traj = simulate_temperature([hold], p)
        assert traj[0] == pytest.approx(20.0, abs=1e-12)

    def test_affine_and_lag_sensitivity(self):
        p = small_params(6)
        decay, gain = _thermal_coeffs(p)
        base = np.full(6, 0.5)
        for tau in range(6):
            bump = np.zeros(6)
            bump[tau] = 1.0
            grad = (simulate_temperature(base + bump, p)
                    - simulate_temperature(base - bump, p)) / 2
            for t in range(6):
                expected = gain * decay ** (t - tau) if t >= tau else 0.0
                assert abs(grad[t] - expected) < 1e-9

    def test_printed_form_is_unstable(self):
        p = small_params(8, printed_thermal_form=True, outdoor_temp=30.0,
                         temp_init=20.0)
        traj = simulate_temperature(np.zeros(8), p)
        # the as-printed sign convention pushes indoors away from outdoors
        assert traj[-1] < 20.0
        assert np.all(np.diff(traj) < 0)


class TestCosts:
    def test_zero_decision_zero_cost(self):
        p = small_params(3, base_load=0.0, outdoor_temp=24.0, temp_init=24.0)
        d = ScheduleDecision.zeros(p)
        assert evaluate_schedule_cost(d, p) == pytest.approx(0.0)

    def test_two_part_tariff(self):
        p = small_params(3, energy_rate=0.2, peak_rate=1.2,
                         outdoor_temp=24.0, temp_init=24.0)
        d = ScheduleDecision.from_parts(
            p, p_grid=[1, 2, 1], p_solar=0, p_feedin=0, p_hvac=0,
            p_charge=0, p_discharge=0, p_trade=0)
        assert evaluate_schedule_cost(d, p) == pytest.approx(0.2 * 4 + 1.2 * 2)

    def test_degradation_coefficient(self):
        p = small_params(1, energy_rate=0.0, peak_rate=0.0, degr_coeff=0.01,
                         outdoor_temp=24.0, temp_init=24.0)
        d = ScheduleDecision.from_parts(
            p, p_grid=0, p_solar=0, p_feedin=0, p_hvac=0,
            p_charge=0, p_discharge=[1.0], p_trade=0)
        assert evaluate_schedule_cost(d, p) == pytest.approx(0.01)

    def test_trading_cost_zero(self):
        assert evaluate_trading_cost(np.zeros(4), np.full(4, 0.3)) == 0.0

    def test_trading_cost_sign(self):
        assert evaluate_trading_cost(np.array([-2.0]), np.array([0.3])) \
            == pytest.approx(-0.6)

    def test_trading_cost_dot(self):
        assert evaluate_trading_cost(np.array([1.0, -1.0]),
                                     np.array([0.1, 0.2])) == pytest.approx(-0.1)

    def test_trading_cost_length_mismatch(self):
        with pytest.raises(DimensionError):
            evaluate_trading_cost(np.zeros(3), np.zeros(4))

    @settings(max_examples=25, deadline=None)
    @given(lam=st.floats(0.0, 1.0), seed=st.integers(0, 10_000))
    def test_cost_convexity(self, lam, seed):
        p = small_params(4)
        rng = np.random.default_rng(seed)
        c1 = rand_feasible_controls(p, rng)
        c2 = rand_feasible_controls(p, rng)
        mix = {k: lam * c1[k] + (1 - lam) * c2[k] for k in c1}
        d1 = ScheduleDecision.from_parts(p, **c1)
        d2 = ScheduleDecision.from_parts(p, **c2)
        dm = ScheduleDecision.from_parts(p, **mix)
        bound = (lam * evaluate_schedule_cost(d1, p)
                 + (1 - lam) * evaluate_schedule_cost(d2, p))
        assert evaluate_schedule_cost(dm, p) <= bound + 1e-9


class TestFeasibility:
    def test_zero_decision_with_zero_load_is_feasible(self):
        p = small_params(4, base_load=0.0, outdoor_temp=24.0, temp_init=24.0,
                         cyclic_battery=True)
        report = check_feasibility(ScheduleDecision.zeros(p), p)
        assert report.ok and len(report) == 0

    def test_solar_cap_violation_magnitude(self):
        p = small_params(3, base_load=0.0, outdoor_temp=24.0, temp_init=24.0,
                         solar_cap=2.0)
        d = ScheduleDecision.from_parts(
            p, p_grid=0, p_solar=[3.0, 0, 0], p_feedin=0, p_hvac=0,
            p_charge=0, p_discharge=0, p_trade=[-3.0, 0, 0])
        report = check_feasibility(d, p)
        viols = {(v.constraint, v.slot): v.magnitude for v in report.violations}
        assert viols[("solar_cap", 0)] == pytest.approx(1.0)

    def test_balance_violation_detected(self, params4):
        d = ScheduleDecision.zeros(params4)  # base load of 1.0 is unmet
        report = check_feasibility(d, params4)
        assert "energy_balance" in report.constraints()

    def test_tolerance_respected(self):
        p = small_params(2, base_load=0.0, outdoor_temp=24.0, temp_init=24.0)
        d = ScheduleDecision.from_parts(
            p, p_grid=0, p_solar=[1e-8, 0], p_feedin=0, p_hvac=0,
            p_charge=0, p_discharge=0, p_trade=[1e-8, 0])
        assert check_feasibility(d, p, tol_feas=1e-6).ok
        assert not check_feasibility(d, p, tol_feas=1e-10).ok

    def test_empty_report_implies_trajectories_in_bounds(self):
        rng = np.random.default_rng(3)
        hits = 0
        for _ in range(200):
            p = small_params(4, base_load=0.0, cyclic_battery=False)
            p_solar = rng.uniform(0, 1.0, 4)
            p_hvac = rng.uniform(0, 1.5, 4)
            p_charge = rng.uniform(0, 1.0, 4)
            p_discharge = rng.uniform(0, 1.0, 4)
            p_grid = p_charge + p_hvac - p_solar - p_discharge
            if np.any(p_grid < 0):
                continue
            d = ScheduleDecision.from_parts(
                p, p_grid=p_grid, p_solar=p_solar, p_feedin=0, p_hvac=p_hvac,
                p_charge=p_charge, p_discharge=p_discharge, p_trade=0)
            if check_feasibility(d, p).ok:
                hits += 1
                level = simulate_battery(d.p_charge, d.p_discharge, p)
                temps = simulate_temperature(d.p_hvac, p)
                assert np.all(level >= p.soc_min * p.batt_capacity - 1e-6)
                assert np.all(level <= p.soc_max * p.batt_capacity + 1e-6)
                assert np.all(temps >= p.temp_min - 1e-6)
                assert np.all(temps <= p.temp_max + 1e-6)
        assert hits >= 20


class TestTimeGrid:
    def test_rejects_empty_horizon(self):
        from p2ptrade import TimeGrid
        with pytest.raises(InputError):
            TimeGrid(horizon=0)
        with pytest.raises(InputError):
            TimeGrid(horizon=4, slot_hours=0.0)

    def test_defaults(self):
        from p2ptrade import TimeGrid
        grid = TimeGrid(horizon=24)
        assert grid.slot_hours == 1.0


class TestParamsValidation:
    def test_soc_band_must_contain_init(self):
        with pytest.raises(InputError):
            small_params(2, batt_init_level=9.5)  # above soc_max * capacity

    def test_trade_bounds_signs(self):
        with pytest.raises(InputError):
            small_params(2, trade_min=0.5)

    def test_temp_ref_inside_band(self):
        with pytest.raises(InputError):
            small_params(2, temp_ref=40.0)

    def test_temp_init_defaults_to_reference(self):
        p = small_params(2, temp_init=None)
        assert p.temp_init == pytest.approx(24.0)

    def test_vectors_are_read_only(self, params4):
        with pytest.raises(ValueError):
            params4.solar_cap[0] = 99.0
