import sys

import numpy as np
import pytest
from hypothesis import strategies as st

from bloatline.core_types import FlowPopulation, LedbatParams, LinkParams, RedProfile, ScenarioConfig


@st.composite
def red_scenarios(draw, max_p_lo=0.001, n_ledbat_min=0, min_ramp=1.0):
    """Any valid RED scenario on a 100-packet buffer."""
    min_th = draw(st.floats(0.0, 80.0))
    max_th = draw(st.floats(min_th + min_ramp, 100.0))
    max_p = draw(st.floats(max_p_lo, 1.0))
    tp = draw(st.floats(0.005, 0.3))
    cap = draw(st.sampled_from([5e5, 1e6, 2e6, 1e7]))
    tau = draw(st.floats(0.005, 2.0))
    n_tcp = draw(st.integers(1, 10))
    n_led = draw(st.integers(n_ledbat_min, 10))
    return ScenarioConfig(
        link=LinkParams(capacity_bits_per_s=cap, prop_delay_s=tp),
        red=RedProfile(min_th, max_th, max_p),
        ledbat=LedbatParams(tau),
        flows=FlowPopulation(n_tcp, n_led),
    )


def moderate_red_scenario(rng: np.random.Generator) -> ScenarioConfig:
    """RED with a moderate drop slope, where the fluid equilibrium is an attractor."""
    min_th = rng.uniform(5, 30)
    max_th = rng.uniform(60, 100)
    return ScenarioConfig(
        link=LinkParams(prop_delay_s=rng.uniform(0.02, 0.1)),
        red=RedProfile(min_th, max_th, rng.uniform(0.02, 0.2)),
        ledbat=LedbatParams(rng.uniform(0.02, 1.0)),
        flows=FlowPopulation(int(rng.integers(1, 6)), int(rng.integers(0, 6))),
    )


@pytest.fixture
def red_cfg():
    return ScenarioConfig(red=RedProfile())


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
