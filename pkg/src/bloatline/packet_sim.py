"""Per-packet discrete-event simulation of Reno and LEDBAT senders sharing a
RED or DropTail bottleneck.

Senders are window-limited and always backlogged. Data packets queue at the
bottleneck and are served at the link rate; acks are size-less and return
after the reverse propagation delay. A drop is reported to its sender by an
explicit notification one reverse propagation delay after the drop; there is
no duplicate-ack or timeout machinery. Slow start and retransmissions are not
modelled: a dropped packet is counted and never resent.
"""

from __future__ import annotations

import heapq
import random
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .core_types import RedProfile, ScenarioConfig, red_drop_prob

SAMPLE_PERIOD_S = 0.01

_DEPART, _ACK, _LOSS = 0, 1, 2


class FlowKind(str, Enum):
    TCP = "tcp"
    LEDBAT = "ledbat"


class SimulationError(RuntimeError):
    pass


@dataclass(slots=True)
class FlowState:
    kind: FlowKind
    prop_delay_s: float
    cwnd_packets: float = 1.0
    in_flight: int = 0
    base_owd_s: float = float("inf")
    last_decrease_t: float = float("-inf")
    rtt_estimate_s: float = 0.0
    sent: int = 0
    delivered: int = 0
    dropped: int = 0

    def __post_init__(self) -> None:
        if self.rtt_estimate_s <= 0:
            self.rtt_estimate_s = self.prop_delay_s


def on_ack_tcp(flow: FlowState) -> FlowState:
    """Congestion-avoidance increase: cwnd += 1/cwnd. Mutates and returns ``flow``."""
    flow.cwnd_packets += 1.0 / flow.cwnd_packets
    return flow


def on_ack_ledbat(flow: FlowState, owd_sample_s: float, tau_s: float, gain: float = 1.0) -> FlowState:
    """Delay-based update from one one-way-delay sample.

    The queuing delay estimate is the sample minus the smallest sample seen so
    far; the window moves by gain * (tau - qd) / (tau * cwnd), so it shrinks
    when the estimate is above target. The window never drops below 1.
    """
    if owd_sample_s < flow.base_owd_s:
        flow.base_owd_s = owd_sample_s
    qd = owd_sample_s - flow.base_owd_s
    flow.cwnd_packets += gain * (tau_s - qd) / (tau_s * flow.cwnd_packets)
    if flow.cwnd_packets < 1.0:
        flow.cwnd_packets = 1.0
    return flow


def on_loss(flow: FlowState, t: float) -> FlowState:
    """Halve the window, at most once per RTT estimate; floor at 1 packet."""
    if t - flow.last_decrease_t > flow.rtt_estimate_s:
        flow.cwnd_packets = max(1.0, flow.cwnd_packets / 2.0)
        flow.last_decrease_t = t
    return flow


@dataclass
class BottleneckQueue:
    capacity_pkts_per_s: float
    limit_packets: int
    red: RedProfile | None = None
    backlog: deque = field(default_factory=deque)
    ewma_avg: float = 0.0

    @property
    def discipline(self) -> str:
        return "droptail" if self.red is None else "red"

    def __len__(self) -> int:
        return len(self.backlog)


def enqueue(queue: BottleneckQueue, pkt, rng: random.Random) -> bool:
    """Admit ``pkt`` or drop it; returns whether it was accepted.

    RED refreshes its average on every arrival and drops i.i.d. with the
    profile's probability; a full buffer always drops.
    """
    n = len(queue.backlog)
    red = queue.red
    if red is not None:
        w = red.ewma_weight
        queue.ewma_avg = (1.0 - w) * queue.ewma_avg + w * n
        p = red_drop_prob(queue.ewma_avg, red)
        if p > 0.0 and rng.random() < p:
            return False
    if n >= queue.limit_packets:
        return False
    queue.backlog.append(pkt)
    return True


@dataclass(frozen=True)
class SimSummary:
    rho_emp: float
    goodput_tcp_pps: float
    goodput_ledbat_pps: float
    drop_rate: float
    utilization: float
    mean_queue_delay_s: float
    window_s: tuple[float, float]
    goodput_per_flow_pps: tuple[float, ...] = ()


@dataclass
class SimTrace:
    t: np.ndarray
    cwnd: np.ndarray  # (samples, flows)
    queue_pkts: np.ndarray
    ewma_pkts: np.ndarray
    kinds: list[FlowKind]
    sent: np.ndarray
    delivered: np.ndarray
    dropped: np.ndarray
    in_flight: np.ndarray
    summary: SimSummary
    seed: int

    @property
    def n_flows(self) -> int:
        return len(self.kinds)

    def trace_rows(self):
        for i, t in enumerate(self.t):
            for f, kind in enumerate(self.kinds):
                yield t, f, kind.value, self.cwnd[i, f], self.queue_pkts[i], self.ewma_pkts[i]

    def to_csv(self, path_or_buf, header_comment: str | None = None) -> None:
        lines = [f"# {header_comment}"] if header_comment else []
        lines.append("t,flow_id,kind,cwnd,queue_pkts,ewma_pkts")
        lines.extend(f"{t:.9g},{f},{k},{c:.9g},{q:.9g},{e:.9g}"
                     for t, f, k, c, q, e in self.trace_rows())
        text = "\n".join(lines) + "\n"
        if hasattr(path_or_buf, "write"):
            path_or_buf.write(text)
        else:
            with open(path_or_buf, "w") as fh:
                fh.write(text)


def make_flows(cfg: ScenarioConfig, rng: random.Random) -> list[FlowState]:
    flows = []
    kinds = [FlowKind.TCP] * cfg.flows.n_tcp + [FlowKind.LEDBAT] * cfg.flows.n_ledbat
    for kind in kinds:
        jitter = rng.uniform(0.0, cfg.link.jitter_s) if cfg.link.jitter_s > 0 else 0.0
        flows.append(FlowState(kind=kind, prop_delay_s=cfg.link.prop_delay_s + jitter))
    return flows


def run(cfg: ScenarioConfig, seed: int | None = None, measure_from: float = 0.5,
        check_invariants: bool = False) -> SimTrace:
    """Simulate ``cfg.horizon_s`` seconds and summarise the last
    ``1 - measure_from`` fraction of the run.

    ``seed`` overrides ``cfg.rng_seed``. With ``check_invariants`` packet
    conservation and work conservation are asserted at every sample.
    """
    seed = cfg.rng_seed if seed is None else seed
    rng = random.Random(seed)
    link = cfg.link
    pt = link.packet_time_s
    horizon = cfg.horizon_s
    tau = cfg.ledbat.target_s
    gain = cfg.ledbat.gain
    flows = make_flows(cfg, rng)
    nf = len(flows)
    queue = BottleneckQueue(link.capacity_pkts_per_s, link.buffer_packets, cfg.red)
    waiting = queue.backlog

    n_samples = int(horizon / SAMPLE_PERIOD_S) + 1
    s_t = np.arange(n_samples) * SAMPLE_PERIOD_S
    s_cwnd = np.empty((n_samples, nf))
    s_q = np.empty(n_samples)
    s_ewma = np.empty(n_samples)
    next_sample = 0

    t_measure = measure_from * horizon
    acked_in_window = [0] * nf
    dropped_in_window = 0
    offered_in_window = 0

    events: list = []
    seq = 0
    busy_until = -1.0  # time current service ends; < now means idle
    in_service = None
    now = 0.0

    def push(t, kind, payload):
        nonlocal seq
        heapq.heappush(events, (t, seq, kind, payload))
        seq += 1

    def start_service(t):
        nonlocal busy_until, in_service
        in_service = waiting.popleft()
        busy_until = t + pt
        push(busy_until, _DEPART, in_service)

    def transmit(fid, t):
        nonlocal dropped_in_window, offered_in_window
        flow = flows[fid]
        while flow.in_flight < int(flow.cwnd_packets):
            flow.sent += 1
            flow.in_flight += 1
            pkt = (fid, t)
            if t >= t_measure:
                offered_in_window += 1
            if in_service is None and not waiting:
                # idle server: the arriving packet still passes the AQM check
                if enqueue(queue, pkt, rng):
                    start_service(t)
                    continue
            elif enqueue(queue, pkt, rng):
                continue
            if t >= t_measure:
                dropped_in_window += 1
            notify = t + flow.prop_delay_s / 2.0
            push(notify, _LOSS, fid)

    # staggered start within one propagation delay
    for fid in range(nf):
        push(rng.uniform(0.0, link.prop_delay_s), _ACK, (fid, None))

    while events:
        t, _, kind, payload = heapq.heappop(events)
        if t < now:
            raise SimulationError(f"event at {t} precedes clock {now}")
        while next_sample < n_samples and s_t[next_sample] <= t:
            s_cwnd[next_sample] = [f.cwnd_packets for f in flows]
            s_q[next_sample] = len(waiting)
            s_ewma[next_sample] = queue.ewma_avg
            if check_invariants:
                _assert_invariants(flows, waiting, in_service, busy_until, s_t[next_sample])
            next_sample += 1
        if t > horizon:
            break
        now = t

        if kind == _DEPART:
            fid, t_sent = payload
            in_service = None
            if waiting:
                start_service(t)
            flow = flows[fid]
            owd = t + flow.prop_delay_s / 2.0 - t_sent
            push(t + flow.prop_delay_s, _ACK, (fid, owd))
        elif kind == _ACK:
            fid, owd = payload
            flow = flows[fid]
            if owd is not None:
                flow.in_flight -= 1
                flow.delivered += 1
                flow.rtt_estimate_s = owd + flow.prop_delay_s / 2.0
                if t >= t_measure:
                    acked_in_window[fid] += 1
                if flow.kind is FlowKind.TCP:
                    on_ack_tcp(flow)
                else:
                    on_ack_ledbat(flow, owd, tau, gain)
            transmit(fid, t)
        else:
            flow = flows[payload]
            flow.in_flight -= 1
            flow.dropped += 1
            on_loss(flow, t)
            transmit(payload, t)

    while next_sample < n_samples:
        s_cwnd[next_sample] = [f.cwnd_packets for f in flows]
        s_q[next_sample] = len(waiting)
        s_ewma[next_sample] = queue.ewma_avg
        next_sample += 1

    duration = horizon - t_measure
    kinds = [f.kind for f in flows]
    per_flow = np.array(acked_in_window, dtype=float) / duration
    tcp = per_flow[[k is FlowKind.TCP for k in kinds]]
    led = per_flow[[k is FlowKind.LEDBAT for k in kinds]]
    g_tcp = float(tcp.mean()) if len(tcp) else 0.0
    g_led = float(led.mean()) if len(led) else 0.0
    if len(led) == 0:
        rho = 1.0
    elif len(tcp) == 0 or g_tcp + g_led == 0:
        rho = 0.0
    else:
        rho = g_tcp / (g_tcp + g_led)
    sel = s_t >= t_measure
    summary = SimSummary(
        rho_emp=rho,
        goodput_tcp_pps=g_tcp,
        goodput_ledbat_pps=g_led,
        drop_rate=dropped_in_window / offered_in_window if offered_in_window else 0.0,
        utilization=float(per_flow.sum()) / link.capacity_pkts_per_s,
        mean_queue_delay_s=float(s_q[sel].mean()) * pt,
        window_s=(t_measure, horizon),
        goodput_per_flow_pps=tuple(float(g) for g in per_flow),
    )
    return SimTrace(
        t=s_t, cwnd=s_cwnd, queue_pkts=s_q, ewma_pkts=s_ewma, kinds=kinds,
        sent=np.array([f.sent for f in flows]),
        delivered=np.array([f.delivered for f in flows]),
        dropped=np.array([f.dropped for f in flows]),
        in_flight=np.array([f.in_flight for f in flows]),
        summary=summary, seed=seed,
    )


def _assert_invariants(flows, waiting, in_service, busy_until, t) -> None:
    for i, f in enumerate(flows):
        if f.sent != f.delivered + f.dropped + f.in_flight:
            raise SimulationError(f"flow {i}: packet conservation broken at t={t}")
        if f.cwnd_packets < 1.0:
            raise SimulationError(f"flow {i}: cwnd below one packet at t={t}")
    if waiting and in_service is None:
        raise SimulationError(f"server idle with backlog at t={t}")


def replicate(cfg: ScenarioConfig, seeds: Sequence[int], measure_from: float = 0.5) -> list[SimSummary]:
    return [run(cfg, seed=s, measure_from=measure_from).summary for s in seeds]
