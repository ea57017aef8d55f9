"""Seeded experiment runner, cross-run aggregation, tail fits and the
empirical-mean counterexample."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .engine import Trajectory, simulate_batch, simulate_reference
from .model import SystemConfig
from .policies import PolicySpec
from .stochastic import (
    ArrivalSpec, ScriptedSource, ServiceSpec, Timeline, constant_pmf, two_point_pmf,
)

Z95 = 1.96
STABLE_SLOPE = 1e-3


@dataclass
class ExperimentPlan:
    config: SystemConfig
    arrivals: ArrivalSpec
    services: ServiceSpec
    policies: list[PolicySpec] = field(default_factory=list)
    num_runs: int = 1
    seed: int = 0
    sample_stride: int = 10
    tail_slots: tuple[int, ...] = ()
    random_ties: bool = False

    def __post_init__(self):
        if self.num_runs < 1:
            raise ConfigError("num_runs must be >= 1")
        if self.sample_stride < 1:
            raise ConfigError("sample_stride must be >= 1")
        I, J = self.config.num_types, self.config.num_servers
        if self.services.shape != (I, J):
            raise ConfigError(f"service tables are {self.services.shape}, system is {(I, J)}")
        if self.services.service_bound != self.config.service_bound:
            raise ConfigError("service law support does not match service_bound")
        if self.services.laws.horizon < self.config.horizon:
            raise ConfigError("service timeline is shorter than the horizon")
        if self.arrivals.kind == "bernoulli" and self.arrivals.rates.horizon < self.config.horizon:
            raise ConfigError("arrival timeline is shorter than the horizon")
        self.arrivals.validate(I, self.config.arrival_bound)
        for t in self.tail_slots:
            if not 0 <= t <= self.config.horizon:
                raise ConfigError(f"tail slot {t} outside [0, {self.config.horizon}]")
        names = [p.name for p in self.policies]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate policy names: {names}")

    def policy(self, name: str) -> PolicySpec:
        for p in self.policies:
            if p.name == name:
                return p
        raise ConfigError(f"no policy named {name!r}; configured: {[p.name for p in self.policies]}")


def thread_count(default: int = 1) -> int:
    raw = os.environ.get("QSCHED_THREADS")
    if raw is None:
        return default
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"QSCHED_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def run_simulation(plan: ExperimentPlan, policy: PolicySpec, seed: int, run: int = 0,
                   check: bool = False) -> Trajectory:
    """One run; deterministic in (plan, policy, seed, run)."""
    return simulate_batch(plan.config, plan.arrivals, plan.services, policy, seed, [run],
                          stride=plan.sample_stride, tail_slots=plan.tail_slots,
                          random_ties=plan.random_ties, check=check)[0]


def run_policy(plan: ExperimentPlan, policy: PolicySpec, threads: int | None = None,
               check: bool = False, runs: Sequence[int] | None = None) -> list[Trajectory]:
    """All runs of ``plan`` for one policy, in run order.

    Runs are split into contiguous chunks, one per worker thread; each run
    owns its random streams, so the result does not depend on ``threads``.
    """
    runs = list(range(plan.num_runs)) if runs is None else list(runs)
    threads = thread_count() if threads is None else max(1, threads)
    chunks = [c.tolist() for c in np.array_split(np.array(runs), min(threads, len(runs))) if c.size]

    def work(chunk):
        return simulate_batch(plan.config, plan.arrivals, plan.services, policy, plan.seed, chunk,
                              stride=plan.sample_stride, tail_slots=plan.tail_slots,
                              random_ties=plan.random_ties, check=check)

    if len(chunks) == 1:
        results = [work(chunks[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            results = list(pool.map(work, chunks))
    return [tr for part in results for tr in part]


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


def least_squares_slope(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 2:
        return 0.0
    xc = x - x.mean()
    return float(np.dot(xc, y - y.mean()) / np.dot(xc, xc))


def trend_slope(times, values, start: int | None = None) -> float:
    """Least-squares slope of ``values`` over ``times >= start`` (default: last half)."""
    times = np.asarray(times)
    if start is None:
        start = times[-1] / 2
    keep = times >= start
    return least_squares_slope(times[keep], np.asarray(values)[keep])


def window_mean(times, values, lo: int, hi: int) -> float:
    times = np.asarray(times)
    keep = (times >= lo) & (times <= hi)
    return float(np.mean(np.asarray(values)[keep]))


@dataclass
class RunAggregate:
    policy: str
    runs: int
    times: np.ndarray
    mean_total_q: np.ndarray
    half_width: np.ndarray
    time_avg_q: float
    time_avg_half_width: float
    norms: dict[int, np.ndarray]

    @property
    def ci_lo(self) -> np.ndarray:
        return self.mean_total_q - self.half_width

    @property
    def ci_hi(self) -> np.ndarray:
        return self.mean_total_q + self.half_width

    @property
    def final_mean_q(self) -> float:
        return float(self.mean_total_q[-1])

    @property
    def slope(self) -> float:
        return trend_slope(self.times, self.mean_total_q)

    @property
    def stable(self) -> bool:
        return abs(self.slope) < STABLE_SLOPE

    def window_mean(self, lo: int, hi: int) -> float:
        return window_mean(self.times, self.mean_total_q, lo, hi)


def _mean_and_half_width(values: np.ndarray):
    n = values.shape[0]
    mean = values.mean(axis=0)
    if n < 2:
        return mean, np.zeros_like(mean)
    return mean, Z95 * values.std(axis=0, ddof=1) / math.sqrt(n)


def aggregate_runs(trajectories: Sequence[Trajectory]) -> RunAggregate:
    """Pointwise mean and normal-approximation 95% half-widths across runs.

    Runs are folded in ascending (seed, run) order whatever the input order.
    """
    if not trajectories:
        raise ValueError("aggregate_runs needs at least one trajectory")
    trs = sorted(trajectories, key=lambda tr: (tr.seed, tr.run))
    times = trs[0].times
    for tr in trs:
        if not np.array_equal(tr.times, times):
            raise ValueError("trajectories were recorded on different grids")
    totals = np.stack([tr.total_q for tr in trs]).astype(float)
    mean, half = _mean_and_half_width(totals)
    avg, avg_half = _mean_and_half_width(np.array([tr.time_avg_q for tr in trs]))
    norms = {t: np.array([tr.norms[t] for tr in trs]) for t in trs[0].norms}
    return RunAggregate(trs[0].policy, len(trs), times, mean, half, float(avg), float(avg_half), norms)


# ---------------------------------------------------------------------------
# Tail estimates
# ---------------------------------------------------------------------------


@dataclass
class TailFit:
    xs: np.ndarray
    survival: np.ndarray
    exceedances: np.ndarray
    slope: float
    intercept: float
    r2: float
    available: bool

    @property
    def log_survival(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.survival)


def tail_estimate(samples, xs=None, min_exceedances: int = 5, t: int | None = None) -> TailFit:
    """Empirical P(X >= x) and a weighted log-linear fit of the tail.

    ``samples`` is an array of values or a list of trajectories (then the
    ||Q(t)||_2 samples at slot ``t`` are used). By default thresholds span
    the 50th to 99th percentile. Points with fewer than ``min_exceedances``
    exceedances are left out of the fit, which is weighted by exceedance
    counts; fewer than three usable points marks the fit unavailable.
    """
    if len(samples) and isinstance(samples[0], Trajectory):
        if t is None:
            raise ValueError("tail slot t is required when passing trajectories")
        missing = [tr.run for tr in samples if t not in tr.norms]
        if missing:
            raise ConfigError(f"slot {t} was not recorded as a tail slot")
        samples = [tr.norms[t] for tr in sorted(samples, key=lambda tr: (tr.seed, tr.run))]
    values = np.asarray(samples, dtype=float)
    if xs is None:
        lo, hi = np.percentile(values, [50, 99])
        xs = np.linspace(lo, hi, 25)
    xs = np.asarray(xs, dtype=float)
    if np.any(np.diff(xs) < 0):
        raise ValueError("thresholds must be ascending")
    counts = (values[None, :] >= xs[:, None]).sum(axis=1)
    survival = counts / values.size
    use = counts >= min_exceedances
    if np.unique(xs[use]).size < 3:
        return TailFit(xs, survival, counts, float("nan"), float("nan"), float("nan"), False)
    x, y, w = xs[use], np.log(survival[use]), counts[use].astype(float)
    xm, ym = np.average(x, weights=w), np.average(y, weights=w)
    sxx = np.sum(w * (x - xm) ** 2)
    slope = float(np.sum(w * (x - xm) * (y - ym)) / sxx)
    intercept = float(ym - slope * xm)
    resid = y - (intercept + slope * x)
    sst = np.sum(w * (y - ym) ** 2)
    r2 = float(1.0 - np.sum(w * resid**2) / sst) if sst > 0 else 0.0
    return TailFit(xs, survival, counts, slope, intercept, r2, True)


# ---------------------------------------------------------------------------
# Empirical-mean counterexample
# ---------------------------------------------------------------------------


def counterexample_instance(horizon: int) -> tuple[SystemConfig, ArrivalSpec, ServiceSpec]:
    """Two types, two servers: own-server service is 1 slot w.p. 0.99 and
    100 slots w.p. 0.01, cross service is always 10 slots; one job of each
    type arrives in every odd slot."""
    U_S = 100
    own = two_point_pmf(1, 0.99, 100, 0.01, U_S)
    cross = constant_pmf(10, U_S)
    table = np.array([[own, cross], [cross, own]])
    config = SystemConfig(num_types=2, num_servers=2, arrival_bound=1, service_bound=U_S, horizon=horizon)
    arrivals = ArrivalSpec("pattern", pattern=np.array([[0, 1], [0, 1]]))
    services = ServiceSpec(Timeline.constant(table, horizon), U_S)
    return config, arrivals, services


@dataclass
class CounterexampleResult:
    slope: float
    times: np.ndarray
    total_q: np.ndarray
    mean_total_q: float
    policy: str


def run_counterexample(horizon: int = 20000, force_bad_event: bool = True, seed: int = 0,
                       policy: str = "empirical_mean", fit_from: int | None = None,
                       check: bool = True) -> CounterexampleResult:
    """Run the lock-in instance and return the growth slope of the total queue.

    With ``force_bad_event`` the first own-server draw of each type is
    scripted to 100 slots. ``fit_from`` defaults to half the horizon.
    """
    if horizon < 10000:
        raise ConfigError("the counterexample needs horizon >= 10000")
    config, arrivals, services = counterexample_instance(horizon)
    spec = PolicySpec(policy, default_rate=1.0)
    scripts = {i: ScriptedSource([100]) for i in range(2)} if force_bad_event else {}

    def override(i, j, t):
        src = scripts.get(i) if i == j else None
        if src is not None and not src.exhausted:
            return src()
        return None

    tr = simulate_reference(config, arrivals, services, spec, seed, 0, stride=1,
                            check=check, service_override=override)
    start = horizon // 2 if fit_from is None else fit_from
    slope = trend_slope(tr.times, tr.total_q, start)
    mean_q = window_mean(tr.times, tr.total_q, start, horizon)
    return CounterexampleResult(slope, tr.times, tr.total_q, mean_q, policy)
