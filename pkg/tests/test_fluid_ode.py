import io

import numpy as np
import pytest
from hypothesis import HealthCheck, assume, given, settings, strategies as st

from bloatline import equilibrium as eq
from bloatline.core_types import FlowPopulation, LedbatParams, LinkParams, RedProfile, ScenarioConfig
from bloatline.fluid_ode import (
    DivergenceError,
    FluidState,
    HistoryError,
    StateHistory,
    converge,
    derivatives,
    ewma_relaxation,
    integrate,
    share_ratio,
    stationary_state,
)
from conftest import red_scenarios


def rates_at(cfg, state, t=0.0, **kw):
    return derivatives(t, state, StateHistory.constant(state, cfg), cfg, **kw)


def equilibrium_state(point):
    return stationary_state(point.w_star_packets, point.z_star_packets, point.q_star_packets)


def test_window_growth_without_loss():
    cfg = ScenarioConfig(red=RedProfile())
    r = rates_at(cfg, FluidState(1.0, 0.0, 0.0, 0.0))
    assert r.w_packets == pytest.approx(20.0, abs=1e-12)
    assert r.q_avg_packets == 0.0


def test_drift_vanishes_at_target():
    # delay exactly tau and Q below min_th, so there is no loss term at all
    cfg = ScenarioConfig(red=RedProfile(), ledbat=LedbatParams(0.3))
    q = 0.3 * cfg.link.capacity_pkts_per_s
    assert rates_at(cfg, FluidState(4.0, 3.0, q, 5.0)).z_packets == 0.0
    assert rates_at(cfg, FluidState(4.0, 3.0, q, 60.0)).z_packets < 0.0


def test_negative_drift_unless_clamped():
    cfg = ScenarioConfig(red=RedProfile(), ledbat=LedbatParams(0.1))
    state = FluidState(4.0, 3.0, 50.0, 0.0)
    assert rates_at(cfg, state).z_packets < 0.0
    assert rates_at(cfg, state, clamp_drift=True).z_packets == 0.0


@given(st.floats(0.1, 200), st.floats(0, 100), st.floats(0, 100), st.floats(0.01, 2.0))
def test_ledbat_never_outpaces_tcp(x, q, q_avg, tau):
    cfg = ScenarioConfig(red=RedProfile(), ledbat=LedbatParams(tau))
    r = rates_at(cfg, FluidState(x, x, q, q_avg))
    assert r.z_packets <= r.w_packets + 1e-12
    if q == 0:
        assert r.z_packets == pytest.approx(r.w_packets, abs=1e-12)
    elif q > 1e-6:
        assert r.z_packets < r.w_packets


def float_grid_step(cfg, point):
    """Spread of dq/dt over the equilibrium points built on the floats either
    side of q*: the best residual any double-precision root can reach."""
    q = point.q_star_packets
    rates = [rates_at(cfg, equilibrium_state(eq._point(np.nextafter(q, s), cfg, True, 2.0))).q_packets
             for s in (-np.inf, np.inf)]
    return abs(rates[1] - rates[0])


@settings(max_examples=1000, deadline=None, suppress_health_check=[HealthCheck.filter_too_much])
@given(red_scenarios())
def test_stationary_at_solver_root(cfg):
    assume(eq.existence_check(cfg))
    point = eq.solve(cfg)
    # q* just above min_th: f(q) cancels and one ulp of q exceeds the bound
    assume(float_grid_step(cfg, point) <= 1e-9)
    r = rates_at(cfg, equilibrium_state(point))
    assert np.max(np.abs(r.as_array())) <= 1e-9


def test_equilibrium_is_held():
    cfg = ScenarioConfig(red=RedProfile(), ledbat=LedbatParams(0.5), horizon_s=60)
    point = eq.solve(cfg)
    start = equilibrium_state(point)
    tr = integrate(cfg, start)
    ref = start.as_array()
    drift = np.abs(np.column_stack([tr.w, tr.z, tr.q, tr.q_avg]) - ref) / np.abs(ref)
    assert drift.max() <= 1e-6


def test_converge_from_equilibrium_is_immediate():
    cfg = ScenarioConfig(red=RedProfile(), ledbat=LedbatParams(0.3))
    point = eq.solve(cfg)
    result = converge(cfg, equilibrium_state(point))
    assert result.settled
    assert result.estimate.t_s <= cfg.link.prop_delay_s + point.q_star_delay_s


def test_converge_reports_failure():
    cfg = ScenarioConfig(red=RedProfile(), ledbat=LedbatParams(0.3))
    result = converge(cfg, FluidState.zeros(), t_max=2.0)
    assert not result.settled
    assert result.estimate.t_s == pytest.approx(2.0)
    with pytest.raises(ValueError):
        converge(cfg, FluidState.zeros(), tol=0.0)


def test_ewma_relaxation_closed_form():
    # a 1 Gb/s link keeps the instantaneous queue at zero, so Q simply decays
    cfg = ScenarioConfig(link=LinkParams(capacity_bits_per_s=1e9), red=RedProfile(), horizon_s=20)
    tr = integrate(cfg, FluidState(1.0, 1.0, 0.0, 80.0))
    assert tr.q.max() == 0.0
    exact = ewma_relaxation(0.0, 80.0, tr.t, cfg.red.ewma_rate)
    assert np.max(np.abs(tr.q_avg - exact)) <= 1e-6


def test_ewma_rate_value():
    assert RedProfile().ewma_rate == pytest.approx(-np.log(1 - 0.002) / 0.01)


@settings(max_examples=25, deadline=None)
@given(red_scenarios(), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_queue_stays_in_buffer(cfg, a, b, c):
    cfg = cfg.replace(link=LinkParams(capacity_bits_per_s=cfg.link.capacity_bits_per_s,
                                      prop_delay_s=max(cfg.link.prop_delay_s, 0.02)))
    B = cfg.link.buffer_packets
    tr = integrate(cfg, FluidState(200 * a, 200 * b, B * c, B * c), horizon_s=10.0)
    assert tr.q.min() >= 0.0 and tr.q.max() <= B
    assert tr.w.min() >= 0.0 and tr.z.min() >= 0.0


def test_droptail_buffer_fills_without_overflow():
    cfg = ScenarioConfig(flows=FlowPopulation(10, 10), horizon_s=30)
    tr = integrate(cfg, FluidState.zeros())
    assert tr.q.max() == cfg.link.buffer_packets
    assert np.array_equal(tr.q, tr.q_avg)


def test_fourth_order_on_smooth_segment():
    # one second at Tp = 1 s: every delayed lookup hits the constant pre-history,
    # and the queue neither empties nor fills
    cfg = ScenarioConfig(link=LinkParams(prop_delay_s=1.0), red=RedProfile(),
                         ledbat=LedbatParams(0.5), horizon_s=20)
    start = FluidState(70.0, 50.0, 20.0, 12.0)
    finals = [integrate(cfg, start, step_s=h, horizon_s=1.0).final.as_array()
              for h in (0.02, 0.01, 0.005)]
    e1 = np.linalg.norm(finals[0] - finals[1])
    e2 = np.linalg.norm(finals[1] - finals[2])
    assert e1 / e2 >= 8.0


def test_step_bounds():
    cfg = ScenarioConfig(red=RedProfile())
    with pytest.raises(ValueError):
        integrate(cfg, FluidState.zeros(), step_s=0.006)
    with pytest.raises(ValueError):
        integrate(cfg, FluidState.zeros(), step_s=0.0)


def test_lookahead_is_rejected():
    cfg = ScenarioConfig(red=RedProfile())
    hist = StateHistory.constant(FluidState(1, 1, 0, 0), cfg)
    with pytest.raises(HistoryError):
        derivatives(1.0, FluidState(1, 1, 0, 0), hist, cfg)
    with pytest.raises(HistoryError):
        hist.lookup(0.5, cfg)


def test_divergence_keeps_last_finite_state():
    cfg = ScenarioConfig(red=RedProfile())
    start = FluidState(1e200, 1.0, 50.0, 50.0)
    with pytest.raises(DivergenceError) as info:
        integrate(cfg, start, horizon_s=1.0)
    assert info.value.last_state == start
    assert info.value.t == 0.0


def test_csv_layout():
    cfg = ScenarioConfig(red=RedProfile(), horizon_s=1.0)
    tr = integrate(cfg, FluidState(1.0, 1.0, 0.0, 0.0), step_s=0.005)
    buf = io.StringIO()
    tr.to_csv(buf, every=20, header_comment="config_hash=abc")
    lines = buf.getvalue().splitlines()
    assert lines[0] == "# config_hash=abc"
    assert lines[1] == "t,W,Z,q,Q,p,rho"
    assert len(lines) == 2 + len(range(0, len(tr), 20))
    assert lines[2] == "0,1,1,0,0,0,0.5"
    assert lines[-1].split(",")[1] == f"{tr.w[-1]:.9g}"


def test_share_ratio_edges():
    assert share_ratio(3.0, 1.0) == 0.75
    assert share_ratio(2.0, 0.0) == 1.0
    assert np.isnan(share_ratio(0.0, 0.0))


@pytest.mark.parametrize("cfg, check", [
    (ScenarioConfig(ledbat=LedbatParams(0.1)), lambda w: np.nanmean(w.rho) > 0.9),
    (ScenarioConfig(red=RedProfile(max_p=1.0), ledbat=LedbatParams(0.1)),
     lambda w: w.z.mean() < 0.1 * w.w.mean()),
    (ScenarioConfig(red=RedProfile(max_p=1.0), ledbat=LedbatParams(0.5)),
     lambda w: np.nanmean(w.rho) < 0.65),
], ids=["droptail-yields", "red-starves-ledbat", "red-large-target-fair"])
def test_long_run_shares(cfg, check):
    tr = integrate(cfg, FluidState.zeros(), horizon_s=300)
    assert check(tr.window(150))
