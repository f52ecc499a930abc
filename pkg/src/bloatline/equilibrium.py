"""Stationary point of the fluid model under RED.

At equilibrium Q* = q*, each Reno window sits at sqrt(c^2 / p*) and each
LEDBAT window at that value scaled by sqrt((tau - d*)/tau), where d* is the
queuing delay and c^2 = 1 / (1 - 1/beta) for window divisor beta on loss
(c^2 = 2 for halving). The queue balance then reduces to one scalar equation
in q,

    (Tp + q/C) sqrt(f(q)) / (1 - f(q)) = c (N_W + N_Z sqrt((tau - d(q))/tau)) / C,

whose left side is non-decreasing and right side non-increasing in q, so
a scan for the sign change followed by bisection finds the unique root.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .core_types import ScenarioConfig, queue_delay_s, red_drop_prob

SCAN_POINTS = 1024


class Regime(str, Enum):
    LEDBAT_ACTIVE = "ledbat_active"
    LEDBAT_STARVED = "ledbat_starved"


class EquilibriumError(RuntimeError):
    """The residual shows no sign change although the existence test passed."""


@dataclass(frozen=True)
class EquilibriumPoint:
    q_star_packets: float
    q_avg_star_packets: float
    p_star: float
    w_star_packets: float
    z_star_packets: float
    rho_star: float
    regime: Regime
    exists: bool
    q_star_delay_s: float = 0.0
    decrease_factor: float = 2.0


def _loss_coefficient(decrease_factor: float) -> float:
    if not decrease_factor > 1:
        raise ValueError("decrease_factor must be > 1")
    return math.sqrt(1.0 / (1.0 - 1.0 / decrease_factor))


def _require_red(cfg: ScenarioConfig) -> None:
    if cfg.red is None:
        raise ValueError("the equilibrium is only defined for a RED bottleneck")


def _ledbat_headroom(delay_s: float, target_s: float) -> float:
    """(tau - d)/tau clipped at zero: how far below target the queue sits."""
    return max(0.0, (target_s - delay_s) / target_s)


def residual_lhs(q_packets: float, cfg: ScenarioConfig) -> float:
    """Loss-side term (Tp + q/C) sqrt(f)/(1 - f); +inf at f = 1."""
    _require_red(cfg)
    f = red_drop_prob(q_packets, cfg.red)
    if f >= 1.0:
        return math.inf
    rtt = cfg.link.prop_delay_s + queue_delay_s(q_packets, cfg.link)
    return rtt * math.sqrt(f) / (1.0 - f)


def residual_rhs(q_packets: float, cfg: ScenarioConfig, decrease_factor: float = 2.0) -> float:
    """Window-side term c (N_W + N_Z sqrt(headroom)) / C."""
    c = _loss_coefficient(decrease_factor)
    headroom = _ledbat_headroom(queue_delay_s(q_packets, cfg.link), cfg.ledbat.target_s)
    flows = cfg.flows
    return c * (flows.n_tcp + math.sqrt(headroom) * flows.n_ledbat) / cfg.link.capacity_pkts_per_s


def fixed_point_residual(q_packets: float, cfg: ScenarioConfig,
                         decrease_factor: float = 2.0) -> float:
    """LHS - RHS of the queue balance; negative below the root, positive above."""
    _require_red(cfg)
    if q_packets < 0:
        raise ValueError("q_packets must be >= 0")
    lhs = residual_lhs(q_packets, cfg)
    if math.isinf(lhs):
        return math.inf
    return lhs - residual_rhs(q_packets, cfg, decrease_factor)


def existence_check(cfg: ScenarioConfig, decrease_factor: float = 2.0) -> bool:
    """True iff the residual is strictly positive at max_th (a root lies in [0, max_th])."""
    _require_red(cfg)
    red = cfg.red
    if red.max_p >= 1.0:
        return True
    rtt = cfg.link.prop_delay_s + queue_delay_s(red.max_th_packets, cfg.link)
    lhs = rtt * math.sqrt(red.max_p) / (1.0 - red.max_p)
    return lhs > residual_rhs(red.max_th_packets, cfg, decrease_factor)


def share_from_queue(q_packets: float, cfg: ScenarioConfig) -> float:
    """rho* = 1 / (1 + sqrt((tau - d)/tau)), equal to 1 once d >= tau."""
    headroom = _ledbat_headroom(queue_delay_s(q_packets, cfg.link), cfg.ledbat.target_s)
    return 1.0 / (1.0 + math.sqrt(headroom))


def _point(q: float, cfg: ScenarioConfig, exists: bool, decrease_factor: float) -> EquilibriumPoint:
    c2 = _loss_coefficient(decrease_factor) ** 2
    p = red_drop_prob(q, cfg.red)
    delay = queue_delay_s(q, cfg.link)
    tau = cfg.ledbat.target_s
    w = math.sqrt(c2 / p) if p > 0 else math.inf
    if delay < tau:
        regime = Regime.LEDBAT_ACTIVE
        z = math.sqrt(c2 / p * (tau - delay) / tau) if p > 0 else math.inf
    else:
        regime = Regime.LEDBAT_STARVED
        z = 0.0
    return EquilibriumPoint(
        q_star_packets=q,
        q_avg_star_packets=q,
        p_star=p,
        w_star_packets=w,
        z_star_packets=z,
        rho_star=share_from_queue(q, cfg),
        regime=regime,
        exists=exists,
        q_star_delay_s=delay,
        decrease_factor=decrease_factor,
    )


def _bisect(cfg: ScenarioConfig, lo: float, hi: float, decrease_factor: float,
            xtol: float = 0.0) -> float:
    # residual(lo) < 0 < residual(hi); shrink until adjacent floats (or xtol)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi or hi - lo < xtol:
            break
        r = fixed_point_residual(mid, cfg, decrease_factor)
        if r == 0.0:
            return mid
        if r < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def solve(cfg: ScenarioConfig, decrease_factor: float = 2.0) -> EquilibriumPoint:
    """Locate q* by a coarse scan of [0, max_th] and bisection, then fill in
    the closed-form windows and share.

    When no root exists in [0, max_th] the point is reported at the boundary
    q = max_th with ``exists=False``.
    """
    _require_red(cfg)
    if cfg.flows.n_tcp < 1:
        raise ValueError("the TCP share is undefined without TCP flows")
    max_th = cfg.red.max_th_packets
    if not existence_check(cfg, decrease_factor):
        return _point(max_th, cfg, False, decrease_factor)

    grid = np.linspace(0.0, max_th, SCAN_POINTS)
    prev_q, prev_r = grid[0], fixed_point_residual(grid[0], cfg, decrease_factor)
    if prev_r == 0.0:
        return _point(prev_q, cfg, True, decrease_factor)
    for q in grid[1:]:
        r = fixed_point_residual(q, cfg, decrease_factor)
        if r == 0.0:
            return _point(float(q), cfg, True, decrease_factor)
        if prev_r < 0 < r:
            root = _bisect(cfg, float(prev_q), float(q), decrease_factor)
            return _point(root, cfg, True, decrease_factor)
        prev_q, prev_r = q, r
    end_r = fixed_point_residual(max_th, cfg, decrease_factor)
    raise EquilibriumError(
        f"no sign change on [0, {max_th}]: residual(0)={fixed_point_residual(0.0, cfg, decrease_factor)!r}, "
        f"residual(max_th)={end_r!r}"
    )


REFINED_DECREASE_FACTOR = 1.5


def ledbat_floor_cap(q_packets: float, cfg: ScenarioConfig) -> float:
    """Upper bound on rho when each LEDBAT flow keeps one packet per RTT in flight."""
    return 1.0 - cfg.flows.n_ledbat / (cfg.link.bdp_packets + q_packets)


def refined_rho(cfg: ScenarioConfig, decrease_factor: float = REFINED_DECREASE_FACTOR) -> float:
    """Share ratio with two corrections to the plain fluid model.

    The loss response uses window divisor 1.5 instead of 2 for both classes,
    which raises q* (the queue is needed to hold larger windows). The result
    is then capped by the one-packet-per-RTT LEDBAT floor.
    """
    point = solve(cfg, decrease_factor)
    rho = point.rho_star
    if cfg.flows.n_ledbat > 0:
        rho = min(rho, ledbat_floor_cap(point.q_star_packets, cfg))
    return rho
