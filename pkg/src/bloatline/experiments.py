"""Parameter sweeps and studies built on the solver, the fluid integrator and
the packet simulator. Everything returns plain row dicts ready for CSV."""

from __future__ import annotations

import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from . import equilibrium as eq
from . import fluid_ode, packet_sim
from .core_types import (
    ConfigError,
    ScenarioConfig,
    canonical_key,
    config_from_flat,
    config_hash,
    queue_delay_s,
)

WORKERS_ENV = "BLOATLINE_WORKERS"

VALIDATION_TARGETS_S = (0.05, 0.1, 0.15, 0.2, 0.3, 0.5)
SENSITIVITY_MIN_TH = (10.0, 30.0, 50.0)
SENSITIVITY_MAX_P = (0.1, 0.5, 1.0)
SENSITIVITY_FLOWS = (1, 5)

EQUILIBRIUM_COLUMNS = ("q_star", "p_star", "W_star", "Z_star", "rho_star", "regime",
                       "exists", "rho_refined")
RUN_SUMMARY_COLUMNS = ("scenario_hash", "seed", "rho_emp", "goodput_tcp_pps",
                       "goodput_ledbat_pps", "drop_rate")


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def parallel_map(fn: Callable, items: Sequence, workers: int | None = None) -> list:
    """Order-preserving map, in processes when more than one worker is configured."""
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def with_axis(base: ScenarioConfig, axis: str, value: float) -> ScenarioConfig:
    return config_from_flat({axis: value}, base)


@dataclass(frozen=True)
class SweepSpec:
    base: ScenarioConfig
    axis: str
    values: tuple[float, ...]
    replications: int = 1
    seed: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "axis", canonical_key(self.axis))
        if self.axis == "discipline":
            raise ConfigError("discipline is not a numeric sweep axis")
        if self.replications < 1:
            raise ConfigError("replications must be >= 1")
        object.__setattr__(self, "values", tuple(sorted(float(v) for v in self.values)))
        for v in self.values:
            with_axis(self.base, self.axis, v)

    def configs(self) -> list[ScenarioConfig]:
        return [with_axis(self.base, self.axis, v) for v in self.values]

    @property
    def seeds(self) -> list[int]:
        first = self.base.rng_seed if self.seed is None else self.seed
        return [first + i for i in range(self.replications)]


@dataclass
class SweepResult:
    axis: str
    columns: list[str]
    rows: list[dict[str, Any]]
    config_hash: str
    runs: list[dict[str, Any]] = field(default_factory=list)

    def to_csv(self) -> str:
        return rows_to_csv(self.columns, self.rows, self.config_hash)

    def runs_csv(self) -> str:
        return rows_to_csv(list(RUN_SUMMARY_COLUMNS), self.runs, self.config_hash)


def format_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.9g}"
    if hasattr(v, "value"):
        return str(v.value)
    return str(v)


def rows_to_csv(columns: Sequence[str], rows: Iterable[dict], cfg_hash: str) -> str:
    buf = io.StringIO()
    buf.write(f"# config_hash={cfg_hash}\n")
    buf.write(",".join(columns) + "\n")
    for row in rows:
        buf.write(",".join(format_value(row.get(c, "")) for c in columns) + "\n")
    return buf.getvalue()


def equilibrium_row(cfg: ScenarioConfig) -> dict[str, Any]:
    point = eq.solve(cfg)
    rho_refined = eq.refined_rho(cfg) if point.exists else math.nan
    return {
        "q_star": point.q_star_packets,
        "p_star": point.p_star,
        "W_star": point.w_star_packets,
        "Z_star": point.z_star_packets,
        "rho_star": point.rho_star,
        "regime": point.regime,
        "exists": point.exists,
        "rho_refined": rho_refined,
    }


def _axis_prefix(spec: SweepSpec, cfg: ScenarioConfig, value: float) -> dict[str, Any]:
    row: dict[str, Any] = {spec.axis: value}
    if cfg.red is not None:
        row["tau_over_min_th"] = (cfg.ledbat.target_s
                                  / queue_delay_s(cfg.red.min_th_packets, cfg.link)
                                  if cfg.red.min_th_packets > 0 else math.inf)
    return row


def sweep_equilibrium(spec: SweepSpec) -> SweepResult:
    """Solve the equilibrium at every sweep value; failed existence is a flagged row."""
    rows = []
    for value, cfg in zip(spec.values, spec.configs()):
        if cfg.red is None:
            raise ConfigError("equilibrium sweeps need a RED profile")
        row = _axis_prefix(spec, cfg, value)
        row.update(equilibrium_row(cfg))
        rows.append(row)
    columns = [spec.axis, "tau_over_min_th", *EQUILIBRIUM_COLUMNS]
    return SweepResult(spec.axis, columns, rows, config_hash(spec.base))


def default_target_grid(base: ScenarioConfig, points: int = 50,
                        lo: float = 0.1, hi: float = 5.0) -> tuple[float, ...]:
    """LEDBAT targets spanning ``lo..hi`` times the min_th delay, log-spaced."""
    if base.red is None or base.red.min_th_packets <= 0:
        raise ConfigError("the default target grid needs RED with min_th > 0")
    unit = queue_delay_s(base.red.min_th_packets, base.link)
    return tuple(float(r) * unit for r in np.geomspace(lo, hi, points))


def sensitivity_sweep(base: ScenarioConfig, targets: Sequence[float] | None = None) -> SweepResult:
    """Target sweeps over the min_th x max_p x N grid, stacked into one result.

    The grid is coarse; read it as indicative rather than exhaustive.
    """
    targets = tuple(targets) if targets is not None else tuple(np.linspace(0.02, 1.0, 50))
    rows, columns = [], []
    for min_th in SENSITIVITY_MIN_TH:
        for max_p in SENSITIVITY_MAX_P:
            for n in SENSITIVITY_FLOWS:
                cfg = config_from_flat({"red.min_th_packets": min_th, "red.max_p": max_p,
                                        "flows.n_tcp": n, "flows.n_ledbat": n}, base)
                res = sweep_equilibrium(SweepSpec(cfg, "ledbat.target_s", targets))
                columns = res.columns
                rows.extend({"min_th": min_th, "max_p": max_p, "n": n, **r} for r in res.rows)
    return SweepResult("ledbat.target_s", ["min_th", "max_p", "n", *columns], rows,
                       config_hash(base))


def _sim_job(args):
    cfg, seed = args
    return seed, packet_sim.run(cfg, seed=seed).summary


def sweep_validation(spec: SweepSpec, workers: int | None = None) -> SweepResult:
    """Literal and refined equilibrium share next to the packet-level share,
    averaged over ``spec.replications`` seeded runs per sweep value."""
    if spec.replications < 2:
        raise ConfigError("validation needs at least 2 replications")
    cfgs = spec.configs()
    jobs = [(cfg, s) for cfg in cfgs for s in spec.seeds]
    results = parallel_map(_sim_job, jobs, workers)
    rows, runs = [], []
    reps = spec.replications
    for i, (value, cfg) in enumerate(zip(spec.values, cfgs)):
        row = _axis_prefix(spec, cfg, value)
        row.update(equilibrium_row(cfg))
        chunk = results[i * reps:(i + 1) * reps]
        emp = np.array([s.rho_emp for _, s in chunk])
        row["rho_emp_mean"] = float(emp.mean())
        row["rho_emp_std"] = float(emp.std(ddof=1))
        rows.append(row)
        h = config_hash(cfg)
        for seed, s in chunk:
            runs.append({"scenario_hash": h, "seed": seed, "rho_emp": s.rho_emp,
                         "goodput_tcp_pps": s.goodput_tcp_pps,
                         "goodput_ledbat_pps": s.goodput_ledbat_pps,
                         "drop_rate": s.drop_rate})
    columns = [spec.axis, "tau_over_min_th", *EQUILIBRIUM_COLUMNS, "rho_emp_mean", "rho_emp_std"]
    return SweepResult(spec.axis, columns, rows, config_hash(spec.base), runs)


# --------------------------------------------------------------------------
# convergence

@dataclass
class StartRecord:
    index: int
    initial: fluid_ode.FluidState
    settled: bool
    final: fluid_ode.FluidState
    t_end: float
    t: np.ndarray
    err_w: np.ndarray
    err_q: np.ndarray
    err_rho: np.ndarray


@dataclass
class ConvergenceStudy:
    point: eq.EquilibriumPoint
    starts: list[StartRecord]
    config_hash: str

    @property
    def settled_count(self) -> int:
        return sum(s.settled for s in self.starts)

    def max_distance(self) -> float:
        """Largest relative distance of a settled final (W, Z, q) from the equilibrium."""
        finals = np.array([[s.final.w_packets, s.final.z_packets, s.final.q_packets]
                           for s in self.starts if s.settled])
        if len(finals) == 0:
            return math.inf
        p = self.point
        ref = np.array([p.w_star_packets, p.z_star_packets, p.q_star_packets])
        scale = max(float(np.linalg.norm(ref)), 1.0)
        return float(np.max(np.linalg.norm(finals - ref, axis=1)) / scale)

    def summary_csv(self) -> str:
        rows = [{"start": s.index, "W0": s.initial.w_packets, "Z0": s.initial.z_packets,
                 "q0": s.initial.q_packets, "settled": s.settled, "t_end": s.t_end,
                 "W": s.final.w_packets, "Z": s.final.z_packets, "q": s.final.q_packets}
                for s in self.starts]
        return rows_to_csv(["start", "W0", "Z0", "q0", "settled", "t_end", "W", "Z", "q"],
                           rows, self.config_hash)

    def errors_csv(self) -> str:
        rows = []
        for s in self.starts:
            for t, ew, eq_, er in zip(s.t, s.err_w, s.err_q, s.err_rho):
                rows.append({"start": s.index, "t": t, "err_W": ew, "err_q": eq_, "err_rho": er})
        return rows_to_csv(["start", "t", "err_W", "err_q", "err_rho"], rows, self.config_hash)


def random_initial_states(point: eq.EquilibriumPoint, buffer_packets: float, n: int,
                          seed: int) -> list[fluid_ode.FluidState]:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        w = rng.uniform(0.0, 2.0 * point.w_star_packets)
        z = rng.uniform(0.0, 2.0 * point.z_star_packets)
        q = rng.uniform(0.0, buffer_packets)
        out.append(fluid_ode.FluidState(w, z, q, q))
    return out


def relative_errors(traj: fluid_ode.Trajectory, point: eq.EquilibriumPoint):
    err_w = np.abs(traj.w - point.w_star_packets) / max(point.w_star_packets, 1.0)
    err_q = np.abs(traj.q - point.q_star_packets) / max(point.q_star_packets, 1.0)
    err_rho = traj.rho - point.rho_star
    return err_w, err_q, err_rho


def _converge_job(args):
    index, cfg, point, initial, tol, t_max, step_s, stride = args
    est, settled, traj = fluid_ode.converge(cfg, initial, tol=tol, t_max=t_max, step_s=step_s,
                                            return_trajectory=True)
    ew, eqe, er = relative_errors(traj, point)
    return StartRecord(index, initial, settled, est.state, est.t_s, traj.t[::stride],
                       ew[::stride], eqe[::stride], er[::stride])


def run_convergence_study(cfg: ScenarioConfig, n_starts: int = 100, seed: int = 0,
                          tol: float = 1e-3, t_max: float = 300.0, step_s: float = 1e-3,
                          include_zero: bool = False, sample_every_s: float = 0.1,
                          workers: int | None = None,
                          settle_tol: float | None = None) -> ConvergenceStudy:
    """Integrate from ``n_starts`` random initial states drawn uniformly in
    [0, 2W*] x [0, 2Z*] x [0, B] and record relative errors to the equilibrium.

    A trajectory counts as settled once its trailing window is flat to
    ``settle_tol``. On a slowly decaying mode a flat window can still sit a
    few times that far from the limit, so the default is ``tol / 10``, which
    keeps the settled end points within ``tol`` of the equilibrium. Trajectories
    that never settle are kept and flagged rather than raised.
    """
    settle_tol = tol / 10 if settle_tol is None else settle_tol
    if n_starts < 1:
        raise ValueError("n_starts must be >= 1")
    point = eq.solve(cfg)
    if not point.exists:
        raise eq.EquilibriumError("no equilibrium for this configuration")
    starts = random_initial_states(point, cfg.link.buffer_packets, n_starts, seed)
    if include_zero:
        starts = [fluid_ode.FluidState.zeros(), *starts]
    stride = max(1, int(round(sample_every_s / step_s)))
    jobs = [(i, cfg, point, s, settle_tol, t_max, step_s, stride) for i, s in enumerate(starts)]
    return ConvergenceStudy(point, parallel_map(_converge_job, jobs, workers), config_hash(cfg))


def run_timeplot(cfg: ScenarioConfig, step_s: float = 1e-3, seed: int | None = None,
                 initial: fluid_ode.FluidState | None = None):
    """Fluid trajectory and one packet-level trace for the same scenario."""
    initial = initial or fluid_ode.FluidState.zeros()
    traj = fluid_ode.integrate(cfg, initial, step_s=step_s)
    trace = packet_sim.run(cfg, seed=seed)
    return traj, trace
