"""Simulation drivers.

``simulate_batch`` advances many independent runs at once with numpy, one row
per run. ``simulate_reference`` drives the scalar state machine in
``model.py`` for a single run. Given the same (seed, run) they consume the
same uniforms and produce identical trajectories; the reference path also
accepts arbitrary service samplers (scripted sources).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractViolation
from .model import NONE, SystemConfig, SystemState, advance_slot, check_transition
from .policies import Policy, PolicySpec, make_policy, random_picks
from .stochastic import (
    CHUNK, ROLE_ARRIVALS, ROLE_PICKS, ROLE_SERVICE, ArrivalSpec, RunStreams, ServiceSpec,
)


@dataclass
class Trajectory:
    """Recorded metrics of one run.

    ``times`` are the recorded slots (Q is measured at the start of each),
    ``total_q[k]`` is sum_i Q_i(times[k]), ``time_avg_q`` is
    (1/T) sum_{tau=1}^{T} sum_i Q_i(tau) and ``norms`` maps each tail slot to
    ||Q(t)||_2.
    """

    run: int
    seed: int
    policy: str
    times: np.ndarray
    total_q: np.ndarray
    time_avg_q: float
    norms: dict[int, float] = field(default_factory=dict)
    final_q: np.ndarray | None = None
    queues: np.ndarray | None = None
    picks: np.ndarray | None = None


def recorded_slots(horizon: int, stride: int) -> np.ndarray:
    return np.arange(0, horizon + 1, stride)


def _rates_fn(services: ServiceSpec):
    return services.rates


def simulate_batch(config: SystemConfig, arrivals: ArrivalSpec, services: ServiceSpec,
                   spec: PolicySpec, seed: int, runs: Sequence[int], *, stride: int = 10,
                   tail_slots: Sequence[int] = (), random_ties: bool = False,
                   check: bool = False, keep_queues: bool = False,
                   keep_picks: bool = False) -> list[Trajectory]:
    """Simulate ``runs`` (run indices under ``seed``) side by side.

    With ``check`` every transition is verified against the queue-update
    equation, the one-step bound, the per-slot change bounds and the
    in-service accounting; a failure raises ContractViolation.
    ``keep_picks`` stores every slot's picks (NONE for busy servers).
    """
    I, J, T = config.num_types, config.num_servers, config.horizon
    R = len(runs)
    runs = list(runs)
    streams = [RunStreams(seed, r, I, J) for r in runs]
    policy: Policy = make_policy(spec, I, J, R, services.service_bound,
                                 rates=_rates_fn(services), random_ties=random_ties)

    Q = np.zeros((R, I), dtype=np.int64)
    Qw = np.zeros((R, I), dtype=np.int64)
    srv_type = np.full((R, J), NONE, dtype=np.int64)
    remaining = np.zeros((R, J), dtype=np.int64)
    rows_all = np.arange(R)
    type_ids = np.arange(I)

    rec_times = recorded_slots(T, stride)
    rec_total = np.zeros((R, rec_times.size), dtype=np.int64)
    tail_set = {int(t) for t in tail_slots}
    norms: dict[int, np.ndarray] = {}
    queues = np.zeros((R, T + 1, I), dtype=np.int64) if keep_queues else None
    pick_log = np.zeros((R, T, J), dtype=np.int64) if keep_picks else None
    cum_total = np.zeros(R, dtype=np.int64)
    rec_k = 0

    prev = None
    u_arr = u_srv = u_pick = None
    for t in range(T + 1):
        if rec_k < rec_times.size and rec_times[rec_k] == t:
            rec_total[:, rec_k] = Q.sum(axis=1)
            rec_k += 1
        if t in tail_set:
            norms[t] = np.sqrt((Q.astype(float) ** 2).sum(axis=1))
        if keep_queues:
            queues[:, t] = Q
        if t >= 1:
            cum_total += Q.sum(axis=1)
        if t == T:
            break

        if t % CHUNK == 0:
            u_arr = np.stack([s.block(ROLE_ARRIVALS, t) for s in streams])
            u_srv = np.stack([s.block(ROLE_SERVICE, t) for s in streams])
            u_pick = np.stack([s.block(ROLE_PICKS, t) for s in streams])
        k = t % CHUNK

        if prev is not None:
            policy.observe(*prev)
        available = srv_type == NONE
        if t == 0 and policy.random_start:
            picks = random_picks(u_pick[:, k], I, available)
            policy.start(picks, Q)
        else:
            picks = policy.pick(t, Q, available, u_pick[:, k])
            if t == 0:
                policy.start(picks, Q)
        picks = np.where(available, picks, NONE)
        if keep_picks:
            pick_log[:, t] = picks

        A = arrivals.realize(t, u_arr[:, k])
        if A.max(initial=0) > config.arrival_bound:
            raise ContractViolation(f"arrivals exceed arrival_bound at slot {t}")
        pool = Qw + A
        scheduled = np.where(available, picks, srv_type)
        done = np.zeros((R, J), dtype=bool)
        nonidle = np.ones((R, J), dtype=bool)
        for j in range(J):
            p = picks[:, j]
            rows = rows_all[p != NONE]
            if rows.size == 0:
                continue
            pj = p[rows]
            have = pool[rows, pj] > 0
            r_ok, i_ok = rows[have], pj[have]
            if r_ok.size:
                pool[r_ok, i_ok] -= 1
                srv_type[r_ok, j] = i_ok
                remaining[r_ok, j] = services.sample_many(i_ok, j, t, u_srv[r_ok, k, j])
            r_idle = rows[~have]
            done[r_idle, j] = True
            nonidle[r_idle, j] = False

        busy = srv_type != NONE
        remaining[busy] -= 1
        finished = busy & (remaining == 0)
        done |= finished
        served = ((scheduled[:, None, :] == type_ids[:, None]) & (done & nonidle)[:, None, :]).sum(axis=2)
        srv_type[finished] = NONE

        Q_next = Q + A - served
        if check:
            _check_batch(config, Q, Q_next, pool, A, scheduled, done, srv_type, t)
        Q, Qw = Q_next, pool
        prev = (scheduled, done, nonidle)

    out = []
    for b, r in enumerate(runs):
        out.append(Trajectory(
            run=r, seed=seed, policy=spec.name, times=rec_times, total_q=rec_total[b],
            time_avg_q=float(cum_total[b]) / T,
            norms={t: float(v[b]) for t, v in norms.items()},
            final_q=Q[b].copy(),
            queues=None if queues is None else queues[b],
            picks=None if pick_log is None else pick_log[b],
        ))
    return out


def _check_batch(config, Q, Q_next, pool, A, scheduled, done, srv_type, t):
    J, I = config.num_servers, config.num_types
    onehot = scheduled[:, None, :] == np.arange(I)[:, None]
    fired = (onehot & done[:, None, :]).sum(axis=2)
    if np.any(Q_next > np.maximum(J, Q + A - fired)):
        raise ContractViolation(f"one-step bound Q' <= max(J, Q + A - sum 1) broken at slot {t}")
    delta = Q_next - Q
    if np.any(delta < -J) or np.any(delta > config.arrival_bound):
        raise ContractViolation(f"per-slot change of Q outside [-J, U_A] at slot {t}")
    in_service = (srv_type[:, None, :] == np.arange(I)[:, None]).sum(axis=2)
    if np.any(Q_next - pool != in_service) or np.any(pool < 0):
        raise ContractViolation(f"Q - Q_wait != jobs in service at slot {t}")


ServiceSampler = Callable[[int, int, int], int]


def simulate_reference(config: SystemConfig, arrivals: ArrivalSpec, services: ServiceSpec,
                       spec: PolicySpec, seed: int, run: int = 0, *, stride: int = 10,
                       tail_slots: Sequence[int] = (), random_ties: bool = False,
                       check: bool = True, keep_queues: bool = False, keep_picks: bool = False,
                       service_override: Callable[[int, int, int], int | None] | None = None,
                       on_slot: Callable | None = None) -> Trajectory:
    """Single-run simulation through ``model.advance_slot``.

    ``service_override(i, j, t)`` may return a service time that replaces the
    law's draw (the stream uniform is still consumed); returning None falls
    back to the law. ``on_slot(state, events, policy)`` is called after every
    transition.
    """
    I, J, T = config.num_types, config.num_servers, config.horizon
    streams = RunStreams(seed, run, I, J)
    policy = make_policy(spec, I, J, 1, services.service_bound,
                         rates=_rates_fn(services), random_ties=random_ties)
    state = SystemState.initial(config)
    rec_times = recorded_slots(T, stride)
    rec_total = []
    norms = {}
    queues = [] if keep_queues else None
    pick_log = [] if keep_picks else None
    cum_total = 0
    tail_set = {int(t) for t in tail_slots}
    prev = None

    for t in range(T + 1):
        total = sum(state.Q)
        if t % stride == 0:
            rec_total.append(total)
        if t in tail_set:
            norms[t] = float(np.sqrt(sum(q * q for q in state.Q)))
        if keep_queues:
            queues.append(list(state.Q))
        if t >= 1:
            cum_total += total
        if t == T:
            break

        u_arr = streams.row(ROLE_ARRIVALS, t)
        u_srv = streams.row(ROLE_SERVICE, t)
        u_pick = streams.row(ROLE_PICKS, t)
        if prev is not None:
            policy.observe(*(x[None] for x in prev))
        available = np.array([s.assigned_type == NONE for s in state.servers])
        Q = np.array([state.Q], dtype=np.int64)
        if t == 0 and policy.random_start:
            picks = random_picks(u_pick[None], I, available[None])
            policy.start(picks, Q)
        else:
            picks = policy.pick(t, Q, available[None], u_pick[None])
            if t == 0:
                policy.start(picks, Q)
        picks = [int(p) if a else NONE for p, a in zip(picks[0], available)]
        if keep_picks:
            pick_log.append(picks)
        A = [int(a) for a in arrivals.realize(t, u_arr)]

        def sampler(i, j, slot, _u=u_srv):
            if service_override is not None:
                forced = service_override(i, j, slot)
                if forced is not None:
                    return forced
            return services.sample(i, j, slot, _u[j])

        new_state, events = advance_slot(config, state, A, picks, sampler)
        if check:
            check_transition(config, state, new_state, events)
        if on_slot is not None:
            on_slot(new_state, events, policy)
        done = np.array([events.completed[i][j] if i != NONE else False
                         for j, i in enumerate(events.scheduled)])
        prev = (np.array(events.scheduled), done, np.array(events.nonidle))
        state = new_state

    return Trajectory(
        run=run, seed=seed, policy=spec.name, times=rec_times, total_q=np.array(rec_total, dtype=np.int64),
        time_avg_q=cum_total / T, norms=norms, final_q=np.array(state.Q),
        queues=None if queues is None else np.array(queues, dtype=np.int64),
        picks=None if pick_log is None else np.array(pick_log, dtype=np.int64).reshape(T, J),
    )
