"""Scheduling policies and the discounted service-time estimator.

All array functions accept an optional leading batch axis: estimator arrays
are ``(..., I, J)``, queue vectors ``(..., I)``, per-server vectors
``(..., J)``. The scalar reference simulator uses them unbatched and the
vectorised engine with one row per run, so both follow the same arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .errors import ConfigError, ContractViolation
from .model import NONE, SlotEvents

POLICY_KINDS = ("discounted_ucb", "ucb", "oracle", "empirical_mean", "frame_maxweight", "dam_ucb", "random")


@lru_cache(maxsize=64)
def _gamma_powers(gamma: float, n: int) -> np.ndarray:
    return np.array([gamma**k for k in range(n + 1)])


# ---------------------------------------------------------------------------
# Estimator
# ---------------------------------------------------------------------------


@dataclass
class EstimatorState:
    """Discounted completion count N, discounted busy time phi and the
    per-pair in-flight counter M."""

    N: np.ndarray
    phi: np.ndarray
    M: np.ndarray
    gamma: float
    c1: float
    service_bound: int

    @classmethod
    def fresh(cls, num_types: int, num_servers: int, gamma: float = 1.0, c1: float = 0.01,
              service_bound: int = 100, batch: tuple[int, ...] = ()) -> "EstimatorState":
        if not 0.0 < gamma <= 1.0:
            raise ConfigError(f"gamma must lie in (0, 1], got {gamma}")
        shape = batch + (num_types, num_servers)
        return cls(np.zeros(shape), np.zeros(shape), np.zeros(shape, dtype=np.int64),
                   float(gamma), float(c1), int(service_bound))

    def copy(self) -> "EstimatorState":
        return replace(self, N=self.N.copy(), phi=self.phi.copy(), M=self.M.copy())

    def reset_statistics(self) -> "EstimatorState":
        """Zero N and phi; in-flight counters survive."""
        return replace(self, N=np.zeros_like(self.N), phi=np.zeros_like(self.phi), M=self.M.copy())

    def mean_time(self) -> np.ndarray:
        """phi/N where N > 0, and 0 elsewhere."""
        pos = self.N > 0
        return np.where(pos, self.phi / np.where(pos, self.N, 1.0), 0.0)


def discounted_update(est: EstimatorState, scheduled: np.ndarray, done: np.ndarray,
                      nonidle: np.ndarray) -> EstimatorState:
    """Fold the previous slot's events into the estimator.

    ``scheduled`` holds I_j(t-1) (NONE for unscheduled servers), ``done`` the
    completion-or-idle indicator of server j for its scheduled queue, and
    ``nonidle`` the eta_j(t-1) flag.
    """
    num_types = est.N.shape[-2]
    onehot = scheduled[..., None, :] == np.arange(num_types)[:, None]
    fired = onehot & done[..., None, :]
    gpow = _gamma_powers(est.gamma, est.service_bound)
    gain = np.where(fired & nonidle[..., None, :], gpow[est.M], 0.0)
    M = est.M + onehot
    N = est.gamma * est.N + gain
    phi = est.gamma * est.phi + gain * M
    M = np.where(fired, 0, M)
    return replace(est, N=N, phi=phi, M=M)


def estimator_update(est: EstimatorState, events: SlotEvents) -> EstimatorState:
    scheduled = np.asarray(events.scheduled)
    done = np.array([events.completed[i][j] if i != NONE else False
                     for j, i in enumerate(events.scheduled)])
    return discounted_update(est, scheduled, done, np.asarray(events.nonidle))


def closed_form_stats(completed_jobs, t: int, gamma: float) -> tuple[float, float]:
    """Start-time discounted sums over jobs ``(start_slot, S)`` completed before t."""
    n = phi = 0.0
    for start, s in completed_jobs:
        if start + s > t:
            raise ContractViolation(f"job started at {start} with S={s} has not completed by slot {t}")
        w = gamma ** (t - 1 - start)
        n += w
        phi += w * s
    return n, phi


def log_discount_mass(gamma: float, t: int) -> float:
    """log of sum_{tau=0}^{t-1} gamma^tau, in closed form."""
    if t < 1:
        raise ContractViolation("the exploration bonus is undefined at slot 0")
    if gamma == 1.0:
        return math.log(t)
    return math.log((1.0 - gamma**t) / (1.0 - gamma))


def ucb_bonus(est: EstimatorState, t: int) -> np.ndarray:
    """c1 U_S sqrt(log(sum gamma^tau) / N); +inf where N = 0."""
    L = log_discount_mass(est.gamma, t)
    pos = est.N > 0
    with np.errstate(over="ignore", divide="ignore"):
        b = est.c1 * est.service_bound * np.sqrt(L / np.where(pos, est.N, 1.0))
    return np.where(pos, b, np.inf)


def ucb_denominators(est: EstimatorState, t: int) -> np.ndarray:
    """max{phi/N - b, 1}, equal to 1 for unexplored pairs."""
    pos = est.N > 0
    if t < 1:
        if pos.any():
            raise ContractViolation("the exploration bonus is undefined at slot 0")
        return np.ones_like(est.N)
    with np.errstate(invalid="ignore"):
        lcb = est.mean_time() - ucb_bonus(est, t)
    return np.maximum(np.where(pos, lcb, 1.0), 1.0)


# ---------------------------------------------------------------------------
# Pick rules
# ---------------------------------------------------------------------------


def argmax_pick(weights: np.ndarray, available: np.ndarray, tie_u: np.ndarray | None = None) -> np.ndarray:
    """Per server, the queue index maximising ``weights[..., i, j]``.

    Ties go to the lowest index unless ``tie_u`` (uniforms, one per server)
    is given, in which case a tied index is chosen uniformly. Unavailable
    servers get NONE.
    """
    if tie_u is None:
        picks = np.argmax(weights, axis=-2)
    else:
        is_max = weights == weights.max(axis=-2, keepdims=True)
        count = is_max.sum(axis=-2)
        k = np.minimum((tie_u * count).astype(np.int64), count - 1)
        picks = np.argmax(np.cumsum(is_max, axis=-2) > k[..., None, :], axis=-2)
    return np.where(available, picks, NONE)


def random_picks(u: np.ndarray, num_types: int, available: np.ndarray) -> np.ndarray:
    picks = np.minimum((u * num_types).astype(np.int64), num_types - 1)
    return np.where(available, picks, NONE)


def _as_mask(available, num_servers: int) -> np.ndarray:
    if isinstance(available, (set, frozenset, list, tuple)):
        mask = np.zeros(num_servers, dtype=bool)
        mask[list(available)] = True
        return mask
    return np.asarray(available, dtype=bool)


def ucb_pick(Q, est: EstimatorState, t: int, available, tie_u=None) -> np.ndarray:
    Q = np.asarray(Q)
    denom = ucb_denominators(est, t)
    weights = Q[..., :, None] / denom
    return argmax_pick(weights, _as_mask(available, denom.shape[-1]), tie_u)


def oracle_pick(Q, mu, available, tie_u=None) -> np.ndarray:
    Q, mu = np.asarray(Q), np.asarray(mu, dtype=float)
    weights = Q[..., :, None] * mu
    return argmax_pick(weights, _as_mask(available, mu.shape[-1]), tie_u)


def empirical_rates(count, total, default_rate: float) -> np.ndarray:
    count, total = np.asarray(count, dtype=float), np.asarray(total, dtype=float)
    pos = count > 0
    return np.where(pos, count / np.where(pos, total, 1.0), default_rate)


def empirical_mean_pick(Q, count, total, default_rate: float, available, tie_u=None) -> np.ndarray:
    if not 0.0 < default_rate <= 1.0:
        raise ConfigError(f"default_rate must lie in (0, 1], got {default_rate}")
    return oracle_pick(Q, empirical_rates(count, total, default_rate), available, tie_u)


@dataclass
class FrameState:
    snapshot: np.ndarray
    start: int


def frame_based_pick(frame: FrameState | None, Q, est: EstimatorState, frame_length: int, t: int,
                     available, tie_u=None):
    """MaxWeight against queue lengths frozen at the frame start, with
    statistics reset at every frame boundary.

    Returns ``(picks, frame, est)``; the bonus clock restarts with the frame.
    """
    if frame_length < 1:
        raise ConfigError("frame length must be >= 1")
    if frame is None or t % frame_length == 0:
        frame = FrameState(np.array(Q, copy=True), t)
        est = est.reset_statistics()
    picks = ucb_pick(frame.snapshot, est, t - frame.start, available, tie_u)
    return picks, frame, est


@dataclass
class EpochState:
    assignment: np.ndarray
    start: int


def dam_ucb_pick(epoch: EpochState | None, epoch_length: int, Q, est: EstimatorState, t: int,
                 available, tie_u=None):
    """Server-to-queue assignment recomputed every ``epoch_length`` slots and
    held in between. Returns ``(picks, epoch)``."""
    if epoch_length < 1:
        raise ConfigError("epoch length must be >= 1")
    mask = _as_mask(available, est.N.shape[-1])
    if epoch is None or t % epoch_length == 0:
        everyone = np.ones_like(mask)
        epoch = EpochState(ucb_pick(Q, est, t, everyone, tie_u), t)
    return np.where(mask, epoch.assignment, NONE), epoch


# ---------------------------------------------------------------------------
# Policy specs and stateful per-run policies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PolicySpec:
    kind: str
    name: str = ""
    gamma: float = 0.999
    c1: float = 0.01
    frame: int = 20000
    epoch: int = 1
    default_rate: float = 1.0

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ConfigError(f"unknown policy kind {self.kind!r}; expected one of {', '.join(POLICY_KINDS)}")
        if not self.name:
            object.__setattr__(self, "name", self.kind)
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.c1 <= 0:
            raise ConfigError(f"c1 must be positive, got {self.c1}")
        if self.frame < 1 or self.epoch < 1:
            raise ConfigError("frame and epoch lengths must be >= 1")
        if not 0.0 < self.default_rate <= 1.0:
            raise ConfigError(f"default_rate must lie in (0, 1], got {self.default_rate}")


class Policy:
    """Batched policy: every array has a leading run axis of length ``batch``.

    ``observe`` receives the previous slot's events at the start of slot t,
    ``pick`` returns the queue picked by each available server. Learning
    policies schedule uniformly at random in slot 0.
    """

    random_start = True

    def __init__(self, spec: PolicySpec, num_types: int, num_servers: int, batch: int,
                 service_bound: int, random_ties: bool = False):
        self.spec = spec
        self.I, self.J, self.batch = num_types, num_servers, batch
        self.service_bound = service_bound
        self.random_ties = random_ties

    def _ties(self, u):
        return u if self.random_ties else None

    def start(self, picks: np.ndarray, Q: np.ndarray) -> None:
        pass

    def observe(self, scheduled, done, nonidle) -> None:
        pass

    def pick(self, t: int, Q: np.ndarray, available: np.ndarray, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class UcbPolicy(Policy):
    def __init__(self, spec, num_types, num_servers, batch, service_bound, random_ties=False):
        super().__init__(spec, num_types, num_servers, batch, service_bound, random_ties)
        gamma = 1.0 if spec.kind in ("ucb", "frame_maxweight", "dam_ucb") else spec.gamma
        self.est = EstimatorState.fresh(num_types, num_servers, gamma, spec.c1, service_bound, (batch,))

    def observe(self, scheduled, done, nonidle):
        self.est = discounted_update(self.est, scheduled, done, nonidle)

    def pick(self, t, Q, available, u):
        return ucb_pick(Q, self.est, t, available, self._ties(u))


class FramePolicy(UcbPolicy):
    frame_state: FrameState | None = None

    def start(self, picks, Q):
        self.frame_state = FrameState(Q.copy(), 0)

    def pick(self, t, Q, available, u):
        picks, self.frame_state, self.est = frame_based_pick(
            self.frame_state, Q, self.est, self.spec.frame, t, available, self._ties(u))
        return picks


class DamUcbPolicy(UcbPolicy):
    epoch_state: EpochState | None = None

    def start(self, picks, Q):
        self.epoch_state = EpochState(picks.copy(), 0)

    def pick(self, t, Q, available, u):
        picks, self.epoch_state = dam_ucb_pick(
            self.epoch_state, self.spec.epoch, Q, self.est, t, available, self._ties(u))
        return picks


class OraclePolicy(Policy):
    random_start = False

    def __init__(self, spec, num_types, num_servers, batch, service_bound, random_ties=False, rates=None):
        super().__init__(spec, num_types, num_servers, batch, service_bound, random_ties)
        if rates is None:
            raise ConfigError("the oracle policy needs the true service rates")
        self.rates = rates

    def pick(self, t, Q, available, u):
        return oracle_pick(Q, self.rates(t), available, self._ties(u))


class EmpiricalMeanPolicy(UcbPolicy):
    random_start = False

    def __init__(self, spec, num_types, num_servers, batch, service_bound, random_ties=False):
        super().__init__(spec, num_types, num_servers, batch, service_bound, random_ties)
        self.est = EstimatorState.fresh(num_types, num_servers, 1.0, spec.c1, service_bound, (batch,))

    def pick(self, t, Q, available, u):
        return empirical_mean_pick(Q, self.est.N, self.est.phi, self.spec.default_rate,
                                   available, self._ties(u))


class RandomPolicy(Policy):
    def pick(self, t, Q, available, u):
        return random_picks(u, self.I, available)


def make_policy(spec: PolicySpec, num_types: int, num_servers: int, batch: int, service_bound: int,
                rates=None, random_ties: bool = False) -> Policy:
    """Instantiate a batched policy. ``rates(t)`` gives the true (I, J) rates
    (needed by the oracle only)."""
    args = (spec, num_types, num_servers, batch, service_bound, random_ties)
    if spec.kind in ("discounted_ucb", "ucb"):
        return UcbPolicy(*args)
    if spec.kind == "frame_maxweight":
        return FramePolicy(*args)
    if spec.kind == "dam_ucb":
        return DamUcbPolicy(*args)
    if spec.kind == "oracle":
        return OraclePolicy(*args, rates=rates)
    if spec.kind == "empirical_mean":
        return EmpiricalMeanPolicy(*args)
    return RandomPolicy(*args)
