"""Discrete-time multi-server queueing system: state, one-slot transition and
transition invariants.

Slot order: servers available at the start of slot t pick queues (from Q(t),
arrivals of slot t are not visible to the pick); the pool of waiting jobs
``Q_wait + A`` is handed out in ascending server index; a server whose queue
has nothing waiting idles; every busy server then serves one slot and frees
itself when its job finishes at the end of the slot.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

from .errors import ConfigError, ContractViolation

NONE = -1


@dataclass(frozen=True)
class SystemConfig:
    num_types: int
    num_servers: int
    arrival_bound: int = 1
    service_bound: int = 100
    horizon: int = 1000

    def __post_init__(self):
        for name in ("num_types", "num_servers", "arrival_bound", "service_bound", "horizon"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")


@dataclass
class ServerRecord:
    assigned_type: int = NONE
    elapsed: int = 0
    remaining: int = 0
    start_slot: int = NONE

    @property
    def busy(self) -> bool:
        return self.assigned_type != NONE


@dataclass
class SystemState:
    t: int
    Q: list[int]
    Q_wait: list[int]
    servers: list[ServerRecord]

    @classmethod
    def initial(cls, config: SystemConfig) -> "SystemState":
        return cls(0, [0] * config.num_types, [0] * config.num_types,
                   [ServerRecord() for _ in range(config.num_servers)])

    def copy(self) -> "SystemState":
        return SystemState(self.t, list(self.Q), list(self.Q_wait),
                           [ServerRecord(s.assigned_type, s.elapsed, s.remaining, s.start_slot)
                            for s in self.servers])

    def in_service(self, i: int) -> int:
        return sum(1 for s in self.servers if s.assigned_type == i)


@dataclass
class SlotEvents:
    """What happened in slot ``t``.

    ``scheduled[j]`` is I_j(t): the picked queue for an available server, the
    queue being served for a busy one. ``completed[i][j]`` is the indicator
    that fires on job completion at the end of the slot or on idling;
    ``nonidle[j]`` is False exactly when server j idled.
    """

    t: int
    arrivals: list[int]
    picks: list[int]
    scheduled: list[int]
    started: list[tuple[int, int, int]] = field(default_factory=list)
    completed: list[list[bool]] = field(default_factory=list)
    nonidle: list[bool] = field(default_factory=list)
    finished_jobs: list[tuple[int, int, int, int]] = field(default_factory=list)

    def departures(self, i: int) -> int:
        return sum(1 for j, ok in enumerate(self.nonidle) if ok and self.completed[i][j])


ServiceSampler = Callable[[int, int, int], int]


def available_servers(state: SystemState) -> set[int]:
    return {j for j, s in enumerate(state.servers) if s.assigned_type == NONE}


def advance_slot(config: SystemConfig, state: SystemState, arrivals: Sequence[int],
                 picks: Sequence[int], service_sampler: ServiceSampler) -> tuple[SystemState, SlotEvents]:
    """Apply one slot of arrivals, assignments and service to ``state``.

    ``service_sampler(i, j, t)`` is called once per job started, in ascending
    server order. Returns the new state (``t + 1``) and the slot's events;
    ``finished_jobs`` lists ``(i, j, start_slot, S)`` for completions.
    """
    I, J = config.num_types, config.num_servers
    if len(arrivals) != I or len(picks) != J:
        raise ContractViolation(f"expected {I} arrivals and {J} picks")
    for i, a in enumerate(arrivals):
        if a < 0 or a > config.arrival_bound:
            raise ConfigError(f"arrival A_{i}({state.t})={a} outside [0, {config.arrival_bound}]")
    for j, p in enumerate(picks):
        busy = state.servers[j].busy
        if busy and p != NONE:
            raise ContractViolation(f"busy server {j} cannot pick at slot {state.t}")
        if not busy and not 0 <= p < I:
            raise ContractViolation(f"available server {j} must pick a queue in [0, {I}), got {p}")

    t = state.t
    new = state.copy()
    pool = [w + a for w, a in zip(state.Q_wait, arrivals)]
    events = SlotEvents(t, list(arrivals), list(picks), [s.assigned_type for s in state.servers],
                        completed=[[False] * J for _ in range(I)], nonidle=[True] * J)

    for j in range(J):
        i = picks[j]
        if i == NONE:
            continue
        events.scheduled[j] = i
        if pool[i] > 0:
            pool[i] -= 1
            s = int(service_sampler(i, j, t))
            if not 1 <= s <= config.service_bound:
                raise ContractViolation(f"service time {s} outside [1, {config.service_bound}]")
            new.servers[j] = ServerRecord(i, 0, s, t)
            events.started.append((j, i, s))
        else:
            events.completed[i][j] = True
            events.nonidle[j] = False

    for j, rec in enumerate(new.servers):
        if not rec.busy:
            continue
        rec.remaining -= 1
        rec.elapsed += 1
        if rec.remaining == 0:
            events.completed[rec.assigned_type][j] = True
            events.finished_jobs.append((rec.assigned_type, j, rec.start_slot, rec.elapsed))
            new.servers[j] = ServerRecord()

    for i in range(I):
        new.Q[i] = state.Q[i] + arrivals[i] - events.departures(i)
    new.Q_wait = pool
    new.t = t + 1
    return new, events


def check_transition(config: SystemConfig, before: SystemState, after: SystemState,
                     events: SlotEvents) -> None:
    """Raise ContractViolation if a transition breaks the queue dynamics."""
    J, U_A = config.num_servers, config.arrival_bound
    for i in range(config.num_types):
        a = events.arrivals[i]
        served = events.departures(i)
        fired = sum(events.completed[i])
        if after.Q[i] != before.Q[i] + a - served:
            raise ContractViolation(f"queue update broken for type {i} at slot {events.t}")
        if after.Q[i] > max(J, before.Q[i] + a - fired):
            raise ContractViolation(f"one-step bound Q' <= max(J, Q + A - sum 1) broken for type {i}")
        if not -J <= after.Q[i] - before.Q[i] <= U_A:
            raise ContractViolation(f"per-slot change of Q_{i} outside [-J, U_A]")
        busy = after.in_service(i)
        if after.Q[i] - after.Q_wait[i] != busy or not 0 <= busy <= J:
            raise ContractViolation(f"Q - Q_wait != jobs in service for type {i}")
        if after.Q_wait[i] < 0:
            raise ContractViolation(f"negative waiting queue for type {i}")
    for rec in after.servers:
        if (rec.assigned_type == NONE) != (rec.remaining == 0) or (rec.remaining == 0) != (rec.elapsed == 0):
            raise ContractViolation("server record inconsistent")
        if rec.elapsed + rec.remaining > config.service_bound:
            raise ContractViolation("server record exceeds service bound")
    for j, (b, a) in enumerate(zip(before.servers, after.servers)):
        if b.busy and a.busy and a.assigned_type != b.assigned_type:
            raise ContractViolation(f"server {j} was preempted")
