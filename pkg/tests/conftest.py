from pathlib import Path

import pytest

from p2ptrade import ProsumerParams, TimeGrid, generate_synthetic, load_scenario

REPO_ROOT = Path(__file__).resolve().parent.parent
SCENARIO_DIR = REPO_ROOT / "scenarios"


def small_params(h=4, **overrides):
    grid = TimeGrid(horizon=h)
    kwargs = dict(
        solar_cap=2.0, line_cap=8.0,
        batt_capacity=10.0, soc_min=0.1, soc_max=0.9,
        ch_cap=2.5, dis_cap=2.5, eff_ch=0.9, eff_dis=0.9,
        batt_init_level=5.0,
        hvac_c=3.3, hvac_r=1.35, hvac_eta=-2.5,
        temp_min=15.0, temp_max=32.0, temp_ref=24.0, temp_init=24.0,
        trade_min=-3.0, trade_max=3.0,
        base_load=1.0, outdoor_temp=28.0, q_load=0.2,
    )
    kwargs.update(overrides)
    return ProsumerParams.build(grid, **kwargs)


@pytest.fixture
def params4():
    return small_params(4)


@pytest.fixture
def params24():
    return small_params(24)


@pytest.fixture(scope="session")
def scenario_n2():
    return load_scenario(SCENARIO_DIR / "n2" / "scenario.json")


@pytest.fixture(scope="session")
def scenario_n10():
    return load_scenario(SCENARIO_DIR / "n10" / "scenario.json")


@pytest.fixture(scope="session")
def tiny_scenario():
    """Two prosumers, short horizon: quick end-to-end runs."""
    return generate_synthetic(2, seed=1, horizon=6)


def rand_feasible_controls(params, rng):
    """Random controls that respect the box constraints (not necessarily
    the couplings); good enough for cost/affinity property checks."""
    h = params.horizon
    return dict(
        p_grid=rng.uniform(0, params.line_cap),
        p_solar=rng.uniform(0, params.solar_cap / 2),
        p_feedin=rng.uniform(0, params.solar_cap / 2),
        p_hvac=rng.uniform(0, 2, size=h),
        p_charge=rng.uniform(0, params.ch_cap),
        p_discharge=rng.uniform(0, params.dis_cap),
        p_trade=rng.uniform(params.trade_min, params.trade_max),
    )
