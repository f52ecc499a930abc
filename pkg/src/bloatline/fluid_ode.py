"""Delay-ODE fluid model of N_W Reno and N_Z LEDBAT flows through one bottleneck.

Flows of a class are homogeneous, so one representative window per class is
integrated and the queue equation scales it by the flow count. Delayed terms
``x(t - R(t))`` are read from a uniformly sampled history by cubic Hermite
interpolation on the stored states and rates, which keeps the scheme fourth
order; before t0 the history is the initial state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np
from numba import njit

from .core_types import ScenarioConfig

# history row layout: W, Z, q, Q, p, then dW, dZ, dq, dQ at that sample
_NCOLS = 9

# parameter vector layout for the jitted kernel
(P_CAP, P_TP, P_BUF, P_NW, P_NZ, P_TAU, P_RED, P_MINTH, P_MAXTH, P_MAXP,
 P_EWMA, P_CLAMP, P_MD) = range(13)


class HistoryError(ValueError):
    """A delayed lookup asked for a time the history does not cover yet."""


class DivergenceError(RuntimeError):
    def __init__(self, message: str, last_state: FluidState, t: float):
        super().__init__(f"{message} at t={t:.6g}s; last finite state {last_state}")
        self.last_state = last_state
        self.t = t


@dataclass(frozen=True)
class FluidState:
    """Per-flow windows and queue lengths, all in packets.

    The same container carries time derivatives (packets/s) when returned by
    :func:`derivatives`.
    """

    w_packets: float
    z_packets: float
    q_packets: float
    q_avg_packets: float

    def as_array(self) -> np.ndarray:
        return np.array([self.w_packets, self.z_packets, self.q_packets, self.q_avg_packets])

    @classmethod
    def from_array(cls, x) -> FluidState:
        return cls(float(x[0]), float(x[1]), float(x[2]), float(x[3]))

    @classmethod
    def zeros(cls) -> FluidState:
        return cls(0.0, 0.0, 0.0, 0.0)

    def is_valid(self, buffer_packets: float) -> bool:
        vals = self.as_array()
        return bool(np.all(np.isfinite(vals))
                    and 0.0 <= self.q_packets <= buffer_packets
                    and self.w_packets >= 0 and self.z_packets >= 0
                    and self.q_avg_packets >= 0)


def share_ratio(w, z):
    """Per-flow TCP share W/(W+Z); 1 when Z=0 and W>0, NaN when both vanish."""
    w = np.asarray(w, dtype=float)
    z = np.asarray(z, dtype=float)
    total = w + z
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = np.where(total > 0, w / np.where(total > 0, total, 1.0), np.nan)
    return rho if rho.ndim else float(rho)


def kernel_params(cfg: ScenarioConfig, clamp_drift: bool = False,
                  decrease_factor: float = 2.0) -> np.ndarray:
    """Pack a scenario into the flat float vector the jitted kernel consumes."""
    prm = np.zeros(13)
    prm[P_CAP] = cfg.link.capacity_pkts_per_s
    prm[P_TP] = cfg.link.prop_delay_s
    prm[P_BUF] = cfg.link.buffer_packets
    prm[P_NW] = cfg.flows.n_tcp
    prm[P_NZ] = cfg.flows.n_ledbat
    prm[P_TAU] = cfg.ledbat.target_s
    if cfg.red is not None:
        prm[P_RED] = 1.0
        prm[P_MINTH] = cfg.red.min_th_packets
        prm[P_MAXTH] = cfg.red.max_th_packets
        prm[P_MAXP] = cfg.red.max_p
        prm[P_EWMA] = cfg.red.ewma_rate
    prm[P_CLAMP] = 1.0 if clamp_drift else 0.0
    # fraction of the window shed per loss event: 1/2 for halving
    prm[P_MD] = 1.0 - 1.0 / decrease_factor
    return prm


@njit(cache=True)
def _red_f(avg, min_th, max_th, max_p):
    if avg < min_th:
        return 0.0
    if avg > max_th:
        return 1.0
    return max_p * (avg - min_th) / (max_th - min_th)


@njit(cache=True)
def _drop_prob(w, z, q, q_avg, prm):
    """Loss probability seen by arrivals: RED on the averaged queue, plus
    overflow at a full buffer so accepted fluid never exceeds service."""
    p = 0.0
    if prm[P_RED] > 0.5:
        p = _red_f(q_avg, prm[P_MINTH], prm[P_MAXTH], prm[P_MAXP])
    if q >= prm[P_BUF]:
        rtt = prm[P_TP] + q / prm[P_CAP]
        arrival = (prm[P_NW] * w + prm[P_NZ] * z) / rtt
        if arrival * (1.0 - p) > prm[P_CAP]:
            p = 1.0 - prm[P_CAP] / arrival
    return p


@njit(cache=True)
def _hermite(y0, y1, d0, d1, f, h):
    f2 = f * f
    f3 = f2 * f
    return ((2.0 * f3 - 3.0 * f2 + 1.0) * y0 + (f3 - 2.0 * f2 + f) * h * d0
            + (-2.0 * f3 + 3.0 * f2) * y1 + (f3 - f2) * h * d1)


@njit(cache=True)
def _lookup(hist, n, t0, h, t, prm):
    """(W, Z, q, p) at time ``t``; p is re-evaluated on the interpolated state."""
    if t <= t0 or n == 1:
        return hist[0, 0], hist[0, 1], hist[0, 2], hist[0, 4]
    x = (t - t0) / h
    i = int(x)
    if i >= n - 1:
        i = n - 1
        return hist[i, 0], hist[i, 1], hist[i, 2], hist[i, 4]
    f = x - i
    w = _hermite(hist[i, 0], hist[i + 1, 0], hist[i, 5], hist[i + 1, 5], f, h)
    z = _hermite(hist[i, 1], hist[i + 1, 1], hist[i, 6], hist[i + 1, 6], f, h)
    q = _hermite(hist[i, 2], hist[i + 1, 2], hist[i, 7], hist[i + 1, 7], f, h)
    qa = _hermite(hist[i, 3], hist[i + 1, 3], hist[i, 8], hist[i + 1, 8], f, h)
    return w, z, q, _drop_prob(w, z, q, qa, prm)


@njit(cache=True)
def _rates(t, w, z, q, q_avg, hist, n, t0, h, prm):
    cap = prm[P_CAP]
    tp = prm[P_TP]
    rtt = tp + q / cap
    wd, zd, qd, pd = _lookup(hist, n, t0, h, t - rtt, prm)
    rtt_d = tp + qd / cap
    md = prm[P_MD]

    dw = 1.0 / rtt - w * wd / rtt_d * pd * md

    tau = prm[P_TAU]
    drift = (tau - q / cap) / tau
    if prm[P_CLAMP] > 0.5 and drift < 0.0:
        drift = 0.0
    dz = drift / rtt - z * zd / rtt_d * pd * md

    p_now = _drop_prob(w, z, q, q_avg, prm)
    accepted = (prm[P_NW] * w + prm[P_NZ] * z) / rtt * (1.0 - p_now)
    if q > 0.0 or accepted >= cap:
        dq = accepted - cap
    else:
        dq = 0.0

    if prm[P_RED] > 0.5:
        dqa = prm[P_EWMA] * (q - q_avg)
    else:
        dqa = 0.0

    # projection onto the feasible box
    if w <= 0.0 and dw < 0.0:
        dw = 0.0
    if z <= 0.0 and dz < 0.0:
        dz = 0.0
    if q >= prm[P_BUF] and dq > 0.0:
        dq = 0.0
    return dw, dz, dq, dqa


@njit(cache=True)
def _store(hist, k, w, z, q, q_avg, prm):
    if w < 0.0:
        w = 0.0
    if z < 0.0:
        z = 0.0
    if q < 0.0:
        q = 0.0
    elif q > prm[P_BUF]:
        q = prm[P_BUF]
    if prm[P_RED] < 0.5:
        q_avg = q
    elif q_avg < 0.0:
        q_avg = 0.0
    hist[k, 0] = w
    hist[k, 1] = z
    hist[k, 2] = q
    hist[k, 3] = q_avg
    hist[k, 4] = _drop_prob(w, z, q, q_avg, prm)


@njit(cache=True)
def _settled(hist, k, t0, h, prm, tol, window_rtts):
    """Whether every sample in the trailing window sits within ``tol`` (relative)
    of the window mean of (W, Z, q).

    Early in a run the window is whatever history exists, but never less than
    one RTT.
    """
    rtt = prm[P_TP] + hist[k, 2] / prm[P_CAP]
    m = int(math.ceil(window_rtts * rtt / h))
    m_min = int(math.ceil(rtt / h))
    if m_min < 2:
        m_min = 2
    if k + 1 < m_min:
        return False
    if m > k + 1:
        m = k + 1
    lo = k + 1 - m
    mw = 0.0
    mz = 0.0
    mq = 0.0
    for j in range(lo, k + 1):
        mw += hist[j, 0]
        mz += hist[j, 1]
        mq += hist[j, 2]
    mw /= m
    mz /= m
    mq /= m
    scale = math.sqrt(mw * mw + mz * mz + mq * mq)
    if scale < 1.0:
        scale = 1.0
    for j in range(lo, k + 1):
        dw = hist[j, 0] - mw
        dz = hist[j, 1] - mz
        dq = hist[j, 2] - mq
        if math.sqrt(dw * dw + dz * dz + dq * dq) / scale >= tol:
            return False
    return True


@njit(cache=True)
def _rk4_run(hist, n0, t0, h, n_steps, prm, tol, window_rtts, check_every):
    """Advance ``n_steps`` RK4 steps from row ``n0 - 1``.

    Returns (rows filled, status): status 0 = ran to the end, 1 = settled,
    2 = non-finite state produced.
    """
    k = n0 - 1
    early_s = window_rtts * (prm[P_TP] + prm[P_BUF] / prm[P_CAP])
    for s in range(n_steps):
        t = t0 + k * h
        w = hist[k, 0]
        z = hist[k, 1]
        q = hist[k, 2]
        qa = hist[k, 3]
        n = k + 1
        a1, b1, c1, d1 = _rates(t, w, z, q, qa, hist, n, t0, h, prm)
        hist[k, 5] = a1
        hist[k, 6] = b1
        hist[k, 7] = c1
        hist[k, 8] = d1
        hh = 0.5 * h
        a2, b2, c2, d2 = _rates(t + hh, w + hh * a1, z + hh * b1, q + hh * c1,
                                qa + hh * d1, hist, n, t0, h, prm)
        a3, b3, c3, d3 = _rates(t + hh, w + hh * a2, z + hh * b2, q + hh * c2,
                                qa + hh * d2, hist, n, t0, h, prm)
        a4, b4, c4, d4 = _rates(t + h, w + h * a3, z + h * b3, q + h * c3,
                                qa + h * d3, hist, n, t0, h, prm)
        h6 = h / 6.0
        w1 = w + h6 * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
        z1 = z + h6 * (b1 + 2.0 * b2 + 2.0 * b3 + b4)
        q1 = q + h6 * (c1 + 2.0 * c2 + 2.0 * c3 + c4)
        qa1 = qa + h6 * (d1 + 2.0 * d2 + 2.0 * d3 + d4)
        if not (math.isfinite(w1) and math.isfinite(z1)
                and math.isfinite(q1) and math.isfinite(qa1)):
            return k + 1, 2
        k += 1
        _store(hist, k, w1, z1, q1, qa1, prm)
        # every step while the window is still filling, then every check_every
        if tol > 0.0 and ((s + 1) % check_every == 0 or k * h < early_s):
            if _settled(hist, k, t0, h, prm, tol, window_rtts):
                return k + 1, 1
    return k + 1, 0


class StateHistory:
    """Uniformly sampled past of the fluid state, used for delayed arguments.

    Rows hold (W, Z, q, Q, p, dW, dZ, dq, dQ); the rates feed the Hermite
    interpolant. Lookups before ``t0`` return the first row.
    """

    def __init__(self, t0: float, step_s: float, rows: np.ndarray):
        self.t0 = float(t0)
        self.step_s = float(step_s)
        self.rows = np.ascontiguousarray(rows, dtype=float)
        if self.rows.ndim != 2 or self.rows.shape[1] != _NCOLS or len(self.rows) == 0:
            raise ValueError(f"history rows must be a non-empty (n, {_NCOLS}) array")

    @classmethod
    def constant(cls, state: FluidState, cfg: ScenarioConfig, t0: float = 0.0,
                 step_s: float = 1e-3) -> StateHistory:
        row = np.zeros((1, _NCOLS))
        _store(row, 0, state.w_packets, state.z_packets, state.q_packets,
               state.q_avg_packets, kernel_params(cfg))
        return cls(t0, step_s, row)

    @property
    def t_last(self) -> float:
        return self.t0 + (len(self.rows) - 1) * self.step_s

    def lookup(self, t: float, cfg: ScenarioConfig) -> tuple[FluidState, float]:
        """Interpolated (state, drop probability) at time ``t``; Q is not
        needed by the rates and is returned as the nearest earlier sample."""
        if t > self.t_last + 1e-12:
            raise HistoryError(f"lookup at t={t} beyond recorded history ({self.t_last})")
        w, z, q, p = _lookup(self.rows, len(self.rows), self.t0, self.step_s, float(t),
                             kernel_params(cfg))
        i = min(max(int((t - self.t0) / self.step_s), 0), len(self.rows) - 1)
        return FluidState(float(w), float(z), float(q), float(self.rows[i, 3])), float(p)


def derivatives(t: float, state: FluidState, history: StateHistory, cfg: ScenarioConfig,
                clamp_drift: bool = False, decrease_factor: float = 2.0) -> FluidState:
    """Time derivatives (dW, dZ, dq, dQ) in packets/s at ``t``.

    ``clamp_drift`` floors the LEDBAT delay drift at zero instead of letting it
    go negative above the target; ``decrease_factor`` is the window divisor on
    loss (2 for Reno halving).
    """
    rtt = cfg.link.prop_delay_s + state.q_packets / cfg.link.capacity_pkts_per_s
    if t - rtt > history.t_last + 1e-12:
        raise HistoryError(f"delayed time {t - rtt} not covered (history ends {history.t_last})")
    prm = kernel_params(cfg, clamp_drift, decrease_factor)
    rates = _rates(float(t), state.w_packets, state.z_packets, state.q_packets,
                   state.q_avg_packets, history.rows, len(history.rows),
                   history.t0, history.step_s, prm)
    return FluidState(*map(float, rates))


@dataclass(frozen=True)
class Trajectory:
    t: np.ndarray
    w: np.ndarray
    z: np.ndarray
    q: np.ndarray
    q_avg: np.ndarray
    p: np.ndarray

    @property
    def rho(self) -> np.ndarray:
        return share_ratio(self.w, self.z)

    @property
    def states(self) -> Iterator[FluidState]:
        for row in zip(self.w, self.z, self.q, self.q_avg):
            yield FluidState(*map(float, row))

    @property
    def final(self) -> FluidState:
        return FluidState(float(self.w[-1]), float(self.z[-1]),
                          float(self.q[-1]), float(self.q_avg[-1]))

    def __len__(self) -> int:
        return len(self.t)

    def window(self, t_from: float, t_to: float = math.inf) -> Trajectory:
        sel = (self.t >= t_from) & (self.t <= t_to)
        return Trajectory(*(a[sel] for a in (self.t, self.w, self.z, self.q, self.q_avg, self.p)))

    def to_csv(self, path_or_buf, every: int = 1, header_comment: str | None = None) -> None:
        """Write ``t,W,Z,q,Q,p,rho`` rows with 9 significant digits."""
        rows = np.column_stack([self.t, self.w, self.z, self.q, self.q_avg, self.p, self.rho])[::every]
        lines = []
        if header_comment:
            lines.append(f"# {header_comment}")
        lines.append("t,W,Z,q,Q,p,rho")
        lines.extend(",".join(f"{v:.9g}" for v in row) for row in rows)
        text = "\n".join(lines) + "\n"
        if hasattr(path_or_buf, "write"):
            path_or_buf.write(text)
        else:
            with open(path_or_buf, "w") as fh:
                fh.write(text)


def _check_step(cfg: ScenarioConfig, step_s: float) -> None:
    if not step_s > 0:
        raise ValueError("step_s must be > 0")
    if step_s > cfg.link.prop_delay_s / 10 * (1 + 1e-12):
        raise ValueError("step_s must not exceed prop_delay_s / 10")


def _run(cfg, initial, step_s, n_steps, clamp_drift, decrease_factor,
         tol=0.0, window_rtts=10.0, check_every=50):
    prm = kernel_params(cfg, clamp_drift, decrease_factor)
    hist = np.zeros((n_steps + 1, _NCOLS))
    _store(hist, 0, initial.w_packets, initial.z_packets, initial.q_packets,
           initial.q_avg_packets, prm)
    n, status = _rk4_run(hist, 1, 0.0, step_s, n_steps, prm, tol, window_rtts, check_every)
    if status == 2:
        last = FluidState.from_array(hist[n - 1, :4])
        raise DivergenceError("non-finite fluid state", last, (n - 1) * step_s)
    hist = hist[:n]
    t = np.arange(n) * step_s
    traj = Trajectory(t, hist[:, 0].copy(), hist[:, 1].copy(), hist[:, 2].copy(),
                      hist[:, 3].copy(), hist[:, 4].copy())
    return traj, status


def integrate(cfg: ScenarioConfig, initial: FluidState, step_s: float = 1e-3,
              horizon_s: float | None = None, clamp_drift: bool = False,
              decrease_factor: float = 2.0) -> Trajectory:
    """Fixed-step RK4 integration over ``horizon_s`` (defaults to ``cfg.horizon_s``).

    After each step W, Z are floored at 0 and q is clipped to [0, B].
    """
    _check_step(cfg, step_s)
    horizon = cfg.horizon_s if horizon_s is None else horizon_s
    n_steps = int(round(horizon / step_s))
    traj, _ = _run(cfg, initial, step_s, n_steps, clamp_drift, decrease_factor)
    return traj


class EquilibriumEstimate(NamedTuple):
    state: FluidState
    t_s: float


class Convergence(NamedTuple):
    estimate: EquilibriumEstimate
    settled: bool


def converge(cfg: ScenarioConfig, initial: FluidState, tol: float = 1e-3,
             t_max: float = 600.0, step_s: float = 1e-3, window_rtts: float = 10.0,
             clamp_drift: bool = False, decrease_factor: float = 2.0,
             return_trajectory: bool = False):
    """Integrate until the trailing ``window_rtts`` RTTs of (W, Z, q) stay within
    relative distance ``tol`` of their own mean, or until ``t_max``.

    Returns ``Convergence(estimate, settled)``; with ``return_trajectory`` the
    trajectory is appended as a third element.
    """
    if not tol > 0:
        raise ValueError("tol must be > 0")
    _check_step(cfg, step_s)
    n_steps = int(round(t_max / step_s))
    check_every = max(1, int(round(cfg.link.prop_delay_s / step_s)))
    traj, status = _run(cfg, initial, step_s, n_steps, clamp_drift, decrease_factor,
                        tol, window_rtts, check_every)
    result = Convergence(EquilibriumEstimate(traj.final, float(traj.t[-1])), status == 1)
    if return_trajectory:
        return result.estimate, result.settled, traj
    return result


def stationary_state(w: float, z: float, q: float) -> FluidState:
    return FluidState(w, z, q, q)


def ewma_relaxation(q_const: float, q_avg0: float, t, rate: float):
    """Closed-form Q(t) when the instantaneous queue is held at ``q_const``."""
    return q_const + (q_avg0 - q_const) * np.exp(-rate * np.asarray(t, dtype=float))

