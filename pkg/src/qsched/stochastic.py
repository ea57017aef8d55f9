"""Random sources, service-time laws, piecewise-constant timelines and the
drift-assumption validator.

Every service-time law is stored as a pmf over ``{1, ..., U_S}`` (index
``s - 1`` holds ``P(S = s)``); sampling is inverse transform against the
cumulative table so the scalar and the batched simulators consume exactly one
uniform per started job and agree bit for bit.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .errors import ConfigError, SourceExhausted

# Stream roles. A run's generator for a role is keyed by (run, role) under the
# root seed, so adding a role or a policy never shifts another stream.
ROLE_ARRIVALS = 0
ROLE_SERVICE = 1
ROLE_PICKS = 2

CHUNK = 1024


# ---------------------------------------------------------------------------
# Service-time laws
# ---------------------------------------------------------------------------


def _check_weibull(iota: float, beta: float, service_bound: int) -> None:
    if not 0.0 < iota < 1.0:
        raise ConfigError(f"weibull success probability must lie in (0, 1), got {iota}")
    if not 0.0 < beta <= 1.0:
        raise ConfigError(f"weibull shape must lie in (0, 1], got {beta}")
    if service_bound < 2:
        raise ConfigError(f"truncated weibull needs service_bound >= 2, got {service_bound}")


def weibull_raw_pmf(iota: float, beta: float, service_bound: int) -> np.ndarray:
    """P(raw = j) for j = 0..U_S-1 of the truncated discrete Weibull."""
    _check_weibull(iota, beta, service_bound)
    k = np.arange(service_bound + 1, dtype=float)
    survival = iota ** (k**beta)  # survival[k] = P(X >= k), survival[0] = 1
    norm = 1.0 - iota ** (service_bound**beta)
    return (survival[:-1] - survival[1:]) / norm


def weibull_pmf(iota: float, beta: float, service_bound: int) -> np.ndarray:
    """Service-time pmf over 1..U_S; the raw mass at 0 is folded into S = 1."""
    raw = weibull_raw_pmf(iota, beta, service_bound)
    pmf = np.zeros(service_bound)
    pmf[: service_bound - 1] = raw[1:]
    pmf[0] += raw[0]
    return pmf


def constant_pmf(value: int, service_bound: int) -> np.ndarray:
    if not 1 <= value <= service_bound:
        raise ConfigError(f"constant service time {value} outside [1, {service_bound}]")
    pmf = np.zeros(service_bound)
    pmf[value - 1] = 1.0
    return pmf


def two_point_pmf(v1: int, p1: float, v2: int, p2: float, service_bound: int) -> np.ndarray:
    if not (0.0 <= p1 <= 1.0 and 0.0 <= p2 <= 1.0) or abs(p1 + p2 - 1.0) > 1e-12:
        raise ConfigError(f"two-point probabilities must be a distribution, got {p1}, {p2}")
    for v in (v1, v2):
        if not 1 <= v <= service_bound:
            raise ConfigError(f"two-point value {v} outside [1, {service_bound}]")
    pmf = np.zeros(service_bound)
    pmf[v1 - 1] += p1
    pmf[v2 - 1] += p2
    return pmf


def pmf_mean(pmf: np.ndarray) -> float:
    support = np.arange(1, pmf.shape[-1] + 1, dtype=float)
    return float(np.dot(pmf, support))


def exact_weibull_mean(iota: float, beta: float, service_bound: int) -> float:
    """Mean service time of the truncated Weibull after the ``max(j, 1)`` map."""
    return pmf_mean(weibull_pmf(iota, beta, service_bound))


def cdf_table(pmf: np.ndarray) -> np.ndarray:
    """Cumulative table for inverse-transform sampling; the last entry is exactly 1."""
    cdf = np.minimum(np.cumsum(pmf, axis=-1), 1.0)
    cdf[..., -1] = 1.0
    return cdf


def inverse_transform(cdf_row: np.ndarray, u: float) -> int:
    """Smallest s with F(s) > u, for u in [0, 1); never lands on a zero-mass value."""
    return int(np.searchsorted(cdf_row, u, side="right")) + 1


def sample_truncated_weibull(
    iota: float, beta: float, service_bound: int, rng: np.random.Generator, size=None
):
    cdf = cdf_table(weibull_pmf(iota, beta, service_bound))
    u = rng.random(size)
    return np.searchsorted(cdf, u, side="right") + 1


# ---------------------------------------------------------------------------
# Timelines
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Timeline:
    """Right-continuous piecewise-constant schedule over ``[0, horizon)``.

    ``breakpoints[k]`` is the first slot of segment ``k + 1``; there is one
    more value than breakpoints.
    """

    breakpoints: tuple[int, ...]
    values: tuple[Any, ...]
    horizon: int

    def __post_init__(self):
        bps = tuple(int(b) for b in self.breakpoints)
        object.__setattr__(self, "breakpoints", bps)
        object.__setattr__(self, "values", tuple(self.values))
        if len(self.values) != len(bps) + 1:
            raise ConfigError(
                f"timeline needs {len(bps) + 1} segment values for {len(bps)} breakpoints, "
                f"got {len(self.values)}"
            )
        if any(b <= a for a, b in zip(bps, bps[1:])):
            raise ConfigError(f"timeline breakpoints must be strictly ascending: {bps}")
        if bps and (bps[0] <= 0 or bps[-1] >= self.horizon):
            raise ConfigError(f"timeline breakpoints must lie in (0, {self.horizon}): {bps}")

    @classmethod
    def constant(cls, value, horizon: int) -> "Timeline":
        return cls((), (value,), horizon)

    def segment(self, t: int) -> int:
        if not 0 <= t < self.horizon:
            raise IndexError(f"slot {t} outside timeline horizon [0, {self.horizon})")
        return bisect.bisect_right(self.breakpoints, t)

    def segment_bounds(self) -> list[tuple[int, int]]:
        starts = (0,) + self.breakpoints
        ends = self.breakpoints + (self.horizon,)
        return list(zip(starts, ends))

    def map(self, fn) -> "Timeline":
        return Timeline(self.breakpoints, tuple(fn(v) for v in self.values), self.horizon)


def timeline_value(timeline: Timeline, t: int):
    return timeline.values[timeline.segment(t)]


# ---------------------------------------------------------------------------
# Arrival and service specifications
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ArrivalSpec:
    """Per-type arrival process.

    ``bernoulli``: ``rates`` is a Timeline of length-I rate vectors.
    ``pattern``: ``pattern`` is an (I, P) integer array; A_i(t) = pattern[i, t mod P].
    ``scripted``: ``script`` is a (T, I) integer array consumed slot by slot.
    """

    kind: str
    rates: Timeline | None = None
    pattern: np.ndarray | None = None
    script: np.ndarray | None = None

    def max_arrival(self) -> int:
        if self.kind == "bernoulli":
            return 1
        arr = self.pattern if self.kind == "pattern" else self.script
        return int(np.max(arr)) if arr.size else 0

    def validate(self, num_types: int, arrival_bound: int) -> None:
        if self.kind == "bernoulli":
            if self.rates is None:
                raise ConfigError("bernoulli arrivals need a rate timeline")
            for rates in self.rates.values:
                rates = np.asarray(rates, dtype=float)
                if rates.shape != (num_types,):
                    raise ConfigError(f"arrival rates must have length {num_types}, got {rates.shape}")
                if np.any(rates < 0) or np.any(rates > 1):
                    raise ConfigError(f"bernoulli rates must lie in [0, 1]: {rates.tolist()}")
        elif self.kind in ("pattern", "scripted"):
            arr = self.pattern if self.kind == "pattern" else self.script
            if arr is None or arr.ndim != 2:
                raise ConfigError(f"{self.kind} arrivals need a 2-d integer array")
            rows = arr.shape[0] if self.kind == "pattern" else arr.shape[1]
            if rows != num_types:
                raise ConfigError(f"{self.kind} arrivals must cover {num_types} types")
            if np.any(arr < 0):
                raise ConfigError("arrival counts must be nonnegative")
        else:
            raise ConfigError(f"unknown arrival kind {self.kind!r}")
        if self.max_arrival() > arrival_bound:
            raise ConfigError(
                f"arrivals up to {self.max_arrival()} per slot exceed arrival_bound={arrival_bound}"
            )

    def rates_at(self, t: int) -> np.ndarray:
        """Mean arrival vector at slot t."""
        if self.kind == "bernoulli":
            return np.asarray(timeline_value(self.rates, t), dtype=float)
        if self.kind == "pattern":
            return self.pattern.mean(axis=1)
        return self.script[t].astype(float)

    def realize(self, t: int, u: np.ndarray) -> np.ndarray:
        """Arrivals at slot t given uniforms ``u`` of shape (..., I)."""
        if self.kind == "bernoulli":
            return (u < self.rates_at(t)).astype(np.int64)
        if self.kind == "pattern":
            col = self.pattern[:, t % self.pattern.shape[1]].astype(np.int64)
        else:
            if t >= self.script.shape[0]:
                raise SourceExhausted(f"scripted arrivals exhausted at slot {t}")
            col = self.script[t].astype(np.int64)
        return np.broadcast_to(col, u.shape).copy()


@dataclass(frozen=True)
class ServiceSpec:
    """Service-time laws: a Timeline whose values are (I, J, U_S) pmf tables."""

    laws: Timeline
    service_bound: int
    cdfs: tuple[np.ndarray, ...] = field(init=False, repr=False, compare=False)
    means: tuple[np.ndarray, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        cdfs, means = [], []
        support = np.arange(1, self.service_bound + 1, dtype=float)
        for pmf in self.laws.values:
            pmf = np.asarray(pmf, dtype=float)
            if pmf.ndim != 3 or pmf.shape[2] != self.service_bound:
                raise ConfigError(f"service pmf table must be (I, J, {self.service_bound})")
            if np.any(pmf < 0) or np.any(np.abs(pmf.sum(axis=2) - 1.0) > 1e-9):
                raise ConfigError("every service pmf must be a distribution on [1, U_S]")
            cdfs.append(cdf_table(pmf))
            means.append(pmf @ support)
        object.__setattr__(self, "cdfs", tuple(cdfs))
        object.__setattr__(self, "means", tuple(means))

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(np.shape(self.laws.values[0])[:2])

    def mean_time(self, t: int) -> np.ndarray:
        """Mean service times 1/mu_{i,j}(t)."""
        return self.means[self.laws.segment(t)]

    def rates(self, t: int) -> np.ndarray:
        return 1.0 / self.mean_time(t)

    def sample(self, i: int, j: int, t: int, u: float) -> int:
        return inverse_transform(self.cdfs[self.laws.segment(t)][i, j], u)

    def sample_many(self, types: np.ndarray, j: int, t: int, u: np.ndarray) -> np.ndarray:
        rows = self.cdfs[self.laws.segment(t)][types, j]
        return (rows <= u[:, None]).sum(axis=1) + 1


def weibull_services(iota_tables: Sequence, beta: float, service_bound: int,
                     horizon: int, breakpoints: Sequence[int] = ()) -> ServiceSpec:
    """Services from per-segment (I, J) tables of Weibull success probabilities."""
    tables = []
    for iota in iota_tables:
        iota = np.asarray(iota, dtype=float)
        tables.append(np.array([[weibull_pmf(x, beta, service_bound) for x in row] for row in iota]))
    return ServiceSpec(Timeline(tuple(breakpoints), tuple(tables), horizon), service_bound)


def constant_services(value_tables: Sequence, service_bound: int, horizon: int,
                      breakpoints: Sequence[int] = ()) -> ServiceSpec:
    tables = []
    for values in value_tables:
        values = np.asarray(values, dtype=int)
        tables.append(np.array([[constant_pmf(v, service_bound) for v in row] for row in values]))
    return ServiceSpec(Timeline(tuple(breakpoints), tuple(tables), horizon), service_bound)


def two_point_services(v1, p1, v2, service_bound: int, horizon: int) -> ServiceSpec:
    v1, p1, v2 = (np.asarray(a) for a in (v1, p1, v2))
    table = np.array([
        [two_point_pmf(int(v1[i, j]), float(p1[i, j]), int(v2[i, j]), 1.0 - float(p1[i, j]), service_bound)
         for j in range(v1.shape[1])]
        for i in range(v1.shape[0])
    ])
    return ServiceSpec(Timeline.constant(table, horizon), service_bound)


# ---------------------------------------------------------------------------
# Seeded streams
# ---------------------------------------------------------------------------


def role_generator(seed: int, run: int, role: int) -> np.random.Generator:
    """Counter-based (Philox) generator for one (run, role) pair of a root seed."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(run), int(role)))
    return np.random.Generator(np.random.Philox(ss))


class RunStreams:
    """Per-slot uniforms for one run, drawn in fixed-size chunks.

    Chunking is fixed, so the uniforms seen at slot t depend only on
    (seed, run, role, t), never on how runs are batched.
    """

    def __init__(self, seed: int, run: int, num_types: int, num_servers: int):
        self.widths = {ROLE_ARRIVALS: num_types, ROLE_SERVICE: num_servers, ROLE_PICKS: num_servers}
        self._gens = {role: role_generator(seed, run, role) for role in self.widths}
        self._blocks: dict[int, np.ndarray] = {}
        self._start: dict[int, int] = {role: -CHUNK for role in self.widths}

    def block(self, role: int, t0: int) -> np.ndarray:
        """Uniforms for slots [t0, t0 + CHUNK); t0 must advance chunk by chunk."""
        if t0 != self._start[role] + CHUNK:
            raise ValueError(f"stream blocks must be read in order (expected {self._start[role] + CHUNK}, got {t0})")
        self._blocks[role] = self._gens[role].random((CHUNK, self.widths[role]))
        self._start[role] = t0
        return self._blocks[role]

    def row(self, role: int, t: int) -> np.ndarray:
        start = self._start[role]
        if not start <= t < start + CHUNK:
            self.block(role, start + CHUNK)
            start = self._start[role]
            if not start <= t < start + CHUNK:
                raise ValueError("stream rows must be read in slot order")
        return self._blocks[role][t - start]


class ScriptedSource:
    """Returns the given values in order; on exhaustion repeats or raises."""

    def __init__(self, values: Sequence[int], repeat: bool = False):
        if len(values) == 0:
            raise ConfigError("scripted source needs at least one value")
        self.values = list(values)
        self.repeat = repeat
        self.position = 0

    @property
    def exhausted(self) -> bool:
        return not self.repeat and self.position >= len(self.values)

    def __call__(self) -> int:
        if self.position >= len(self.values):
            if not self.repeat:
                raise SourceExhausted(f"scripted source exhausted after {len(self.values)} values")
            self.position = 0
        value = self.values[self.position]
        self.position += 1
        return value


def scripted_source(values: Sequence[int], repeat: bool = False) -> ScriptedSource:
    return ScriptedSource(values, repeat)


# ---------------------------------------------------------------------------
# Drift assumptions
# ---------------------------------------------------------------------------


def discount_horizon(gamma: float) -> float:
    """g(gamma) = 4/(1-gamma) * log(1/(1-gamma))."""
    if not 0.0 < gamma < 1.0:
        raise ConfigError(f"gamma must lie in (0, 1), got {gamma}")
    return 4.0 / (1.0 - gamma) * math.log(1.0 / (1.0 - gamma))


@dataclass
class DriftReport:
    gamma: float
    p: float
    delta: float
    c2: float
    g: float
    max_job_drift: float
    assumption_1a: bool
    assumption_1b: bool
    assumption_2: bool
    partial: bool

    @property
    def passed(self) -> bool:
        return self.assumption_1a and self.assumption_1b and self.assumption_2


def _segments(mean_times) -> tuple[list[tuple[int, int]], list[np.ndarray]]:
    if isinstance(mean_times, Timeline):
        return mean_times.segment_bounds(), [np.asarray(v, dtype=float) for v in mean_times.values]
    arr = np.asarray(mean_times, dtype=float)
    bounds, values = [], []
    start = 0
    for t in range(1, arr.shape[0] + 1):
        if t == arr.shape[0] or not np.array_equal(arr[t], arr[start]):
            bounds.append((start, t))
            values.append(arr[start])
            start = t
    return bounds, values


def validate_drift_assumptions(mean_times, gamma: float, p: float, delta: float, *,
                               service_bound: int, arrival_bound: int = 1) -> DriftReport:
    """Check both drift conditions on mu and the any-time tail condition.

    ``mean_times`` is either a (T, I, J) array of 1/mu_{i,j}(t) or a Timeline
    of (I, J) tables. The timeline is compressed to constant segments; for a
    pair of segments the smallest realisable lag is the binding one, because
    every bound is nondecreasing in the lag.
    """
    if p <= 0 or delta <= 0:
        raise ConfigError("p and delta must be positive")
    g = discount_horizon(gamma)
    bounds, values = _segments(mean_times)
    num_types, num_servers = values[0].shape
    horizon = bounds[-1][1]
    c2 = 5.0 * (num_types * arrival_bound + num_servers)

    win_1a = 2.0 * g
    win_2 = (c2 + 1.0) * g / delta
    ok_1a = ok_1b = ok_2 = True
    drift = 0.0
    for a in range(len(bounds)):
        for b in range(a + 1, len(bounds)):
            lag = bounds[b][0] - (bounds[a][1] - 1)
            dm = float(np.max(np.abs(values[a] - values[b])))
            dmu = float(np.max(np.abs(1.0 / values[a] - 1.0 / values[b])))
            if lag <= win_1a and dm > (1.0 / g) * (1.0 / gamma) ** (lag - 1):
                ok_1a = False
            if lag <= service_bound:
                drift = max(drift, dmu)
                if dmu > 1.0 / g**p:
                    ok_1b = False
            if lag <= win_2 and dm > delta / ((c2 + 1.0) * g) * (1.0 / gamma) ** (lag - 1):
                ok_2 = False
    partial = horizon - 1 < max(win_1a, win_2, service_bound)
    return DriftReport(gamma, p, delta, c2, g, drift, ok_1a, ok_1b, ok_2, partial)
