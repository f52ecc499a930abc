import io
import random

import numpy as np
import pytest

from bloatline import packet_sim as ps
from bloatline.core_types import FlowPopulation, LedbatParams, LinkParams, RedProfile, ScenarioConfig


def flow(kind=ps.FlowKind.TCP, cwnd=1.0, **kw):
    return ps.FlowState(kind=kind, prop_delay_s=0.05, cwnd_packets=cwnd, **kw)


@pytest.mark.parametrize("cwnd, expected", [(10.0, 10.1), (1.0, 2.0)])
def test_reno_increase(cwnd, expected):
    assert ps.on_ack_tcp(flow(cwnd=cwnd)).cwnd_packets == pytest.approx(expected)


def test_reno_one_packet_per_window():
    f = flow(cwnd=20.0)
    for _ in range(20):
        ps.on_ack_tcp(f)
    assert f.cwnd_packets == pytest.approx(21.0, abs=0.05)


def test_ledbat_base_delay_tracking():
    f = flow(ps.FlowKind.LEDBAT, cwnd=10.0)
    seen = []
    for d in (0.050, 0.060, 0.055):
        ps.on_ack_ledbat(f, d, 0.1)
        seen.append(d - f.base_owd_s)
    assert f.base_owd_s == 0.050
    assert seen == pytest.approx([0.0, 0.010, 0.005])


def test_ledbat_empty_queue_matches_reno():
    led = ps.on_ack_ledbat(flow(ps.FlowKind.LEDBAT, cwnd=8.0), 0.05, 0.1)
    assert led.cwnd_packets == ps.on_ack_tcp(flow(cwnd=8.0)).cwnd_packets


def test_ledbat_settles_at_target():
    f = flow(ps.FlowKind.LEDBAT, cwnd=8.0, base_owd_s=0.05)
    assert ps.on_ack_ledbat(f, 0.15, 0.1).cwnd_packets == 8.0


def test_ledbat_floor():
    f = flow(ps.FlowKind.LEDBAT, cwnd=1.0, base_owd_s=0.05)
    assert ps.on_ack_ledbat(f, 2.0, 0.1).cwnd_packets == 1.0


def test_loss_halves_once_per_rtt():
    f = flow(cwnd=20.0, rtt_estimate_s=0.2)
    assert ps.on_loss(f, 1.0).cwnd_packets == 10.0
    assert ps.on_loss(f, 1.1).cwnd_packets == 10.0
    assert ps.on_loss(f, 1.3).cwnd_packets == 5.0
    assert ps.on_loss(flow(cwnd=1.5), 0.0).cwnd_packets == 1.0


def test_droptail_full_buffer_rejects():
    q = ps.BottleneckQueue(100.0, 100)
    rng = random.Random(0)
    assert all(ps.enqueue(q, i, rng) for i in range(100))
    assert not ps.enqueue(q, 100, rng)
    assert len(q) == 100 and q.discipline == "droptail"


def test_red_below_min_th_accepts():
    q = ps.BottleneckQueue(100.0, 100, RedProfile())
    rng = random.Random(0)
    assert all(ps.enqueue(q, i, rng) for i in range(50))  # average stays tiny


def test_red_midpoint_drop_frequency():
    red = RedProfile(10, 100, 0.1, ewma_weight=1e-12)
    rng = random.Random(1234)
    drops = 0
    for _ in range(10_000):
        q = ps.BottleneckQueue(100.0, 100, red, ewma_avg=55.0)
        drops += not ps.enqueue(q, 0, rng)
    assert abs(drops / 10_000 - 0.05) <= 0.005


def test_deterministic_per_seed():
    cfg = ScenarioConfig(red=RedProfile(), horizon_s=30)
    a, b = ps.run(cfg, seed=3), ps.run(cfg, seed=3)
    assert np.array_equal(a.cwnd, b.cwnd) and np.array_equal(a.queue_pkts, b.queue_pkts)
    assert a.summary == b.summary
    assert not np.array_equal(a.cwnd, ps.run(cfg, seed=4).cwnd)


@pytest.mark.parametrize("cfg", [
    ScenarioConfig(horizon_s=60, flows=FlowPopulation(3, 3)),
    ScenarioConfig(red=RedProfile(max_p=0.5), horizon_s=60, flows=FlowPopulation(2, 4)),
], ids=["droptail", "red"])
def test_conservation_and_capacity(cfg):
    tr = ps.run(cfg, seed=1, check_invariants=True)
    assert np.array_equal(tr.sent, tr.delivered + tr.dropped + tr.in_flight)
    s = tr.summary
    assert sum(s.goodput_per_flow_pps) <= cfg.link.capacity_pkts_per_s + 1e-9
    assert 0.0 <= s.rho_emp <= 1.0
    assert tr.queue_pkts.max() <= cfg.link.buffer_packets


def test_single_reno_fills_link():
    assert ps.run(ScenarioConfig(flows=FlowPopulation(1, 0))).summary.utilization > 0.95


def test_single_ledbat_holds_target_delay():
    s = ps.run(ScenarioConfig(flows=FlowPopulation(0, 1), ledbat=LedbatParams(0.1))).summary
    assert abs(s.mean_queue_delay_s - 0.1) <= 0.025


HOMOGENEOUS = LinkParams(jitter_s=0.0)


@pytest.mark.parametrize("seed", range(5))
def test_reno_flows_share_fairly_under_red(seed):
    cfg = ScenarioConfig(link=HOMOGENEOUS, red=RedProfile(), flows=FlowPopulation(5, 0))
    g = np.array(ps.run(cfg, seed=seed, measure_from=60 / cfg.horizon_s).summary.goodput_per_flow_pps)
    assert np.max(np.abs(g / g.mean() - 1)) < 0.10


@pytest.mark.xfail(reason="deterministic drop-tail service locks Reno flows into fixed phases",
                   strict=False)
def test_reno_flows_share_fairly_under_droptail():
    cfg = ScenarioConfig(link=HOMOGENEOUS, flows=FlowPopulation(5, 0))
    g = np.array(ps.run(cfg, seed=0, measure_from=60 / cfg.horizon_s).summary.goodput_per_flow_pps)
    assert np.max(np.abs(g / g.mean() - 1)) < 0.10


def test_trace_csv():
    tr = ps.run(ScenarioConfig(horizon_s=1.0), seed=0)
    buf = io.StringIO()
    tr.to_csv(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "t,flow_id,kind,cwnd,queue_pkts,ewma_pkts"
    assert len(lines) == 1 + len(tr.t) * 2
    assert lines[1].startswith("0,0,tcp,")
    assert lines[2].startswith("0,1,ledbat,")
    assert tr.t[1] == pytest.approx(ps.SAMPLE_PERIOD_S)


def test_replicate_uses_seeds():
    cfg = ScenarioConfig(red=RedProfile(), horizon_s=20)
    out = ps.replicate(cfg, [0, 1])
    assert out[0] == ps.run(cfg, seed=0).summary
    assert out[1] == ps.run(cfg, seed=1).summary
