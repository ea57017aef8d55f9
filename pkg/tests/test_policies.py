import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from qsched.errors import ConfigError, ContractViolation
from qsched.model import NONE, SystemConfig, SystemState, advance_slot
from qsched.policies import (
    EstimatorState, PolicySpec, argmax_pick, closed_form_stats, dam_ucb_pick, discounted_update,
    empirical_mean_pick, empirical_rates, estimator_update, frame_based_pick, log_discount_mass,
    oracle_pick, random_picks, ucb_bonus, ucb_denominators, ucb_pick,
)


def est_with(N, phi, gamma=1.0, c1=2.0, U_S=1):
    N = np.array(N, dtype=float)
    e = EstimatorState.fresh(*N.shape, gamma=gamma, c1=c1, service_bound=U_S)
    e.N[...] = N
    e.phi[...] = np.array(phi, dtype=float)
    return e


# -- estimator update --------------------------------------------------------


def test_no_completion_only_discounts():
    e = est_with([[2.0]], [[6.0]], gamma=0.9)
    e2 = discounted_update(e, np.array([NONE]), np.array([False]), np.array([True]))
    assert e2.N[0, 0] == pytest.approx(1.8)
    assert e2.phi[0, 0] == pytest.approx(0.9 * 6.0)


def test_hand_worked_two_slot_job():
    cfg = SystemConfig(1, 1, service_bound=10)
    e = EstimatorState.fresh(1, 1, gamma=0.5, c1=1.0, service_bound=10)
    s = SystemState(0, [1], [1], SystemState.initial(cfg).servers)
    s, ev0 = advance_slot(cfg, s, [0], [0], lambda i, j, t: 2)
    e = estimator_update(e, ev0)  # start of slot 1
    assert e.N[0, 0] == 0 and e.M[0, 0] == 1
    s, ev1 = advance_slot(cfg, s, [0], [NONE], lambda i, j, t: 2)
    assert ev1.completed[0][0]
    e = estimator_update(e, ev1)  # start of slot 2
    assert e.N[0, 0] == pytest.approx(0.5)
    assert e.phi[0, 0] == pytest.approx(1.0)
    assert e.N[0, 0] / e.phi[0, 0] == pytest.approx(0.5)
    assert e.M[0, 0] == 0
    assert closed_form_stats([(0, 2)], 2, 0.5) == pytest.approx((0.5, 1.0))


@pytest.mark.parametrize("S", [1, 3, 7])
def test_gamma_one_counts_exactly(S):
    e = EstimatorState.fresh(1, 1, gamma=1.0, service_bound=10)
    e.N[...] = 3
    e.phi[...] = 11
    for k in range(S):
        e = discounted_update(e, np.array([0]), np.array([k == S - 1]), np.array([True]))
    assert e.N[0, 0] == 4 and e.phi[0, 0] == 11 + S


def test_idle_indicator_adds_no_mass():
    e = est_with([[2.0]], [[4.0]], gamma=0.8)
    e2 = discounted_update(e, np.array([0]), np.array([True]), np.array([False]))
    assert e2.N[0, 0] == pytest.approx(1.6)
    assert e2.phi[0, 0] == pytest.approx(3.2)
    assert e2.M[0, 0] == 0


def test_closed_form_empty_and_incomplete():
    assert closed_form_stats([], 10, 0.9) == (0.0, 0.0)
    with pytest.raises(ContractViolation):
        closed_form_stats([(5, 3)], 7, 0.9)


def replay(I, J, U_S, gamma, T, seed, check):
    """Random-pick trajectory; ``check(t, est, jobs)`` at the start of each slot."""
    rng = np.random.default_rng(seed)
    cfg = SystemConfig(I, J, service_bound=U_S)
    s = SystemState.initial(cfg)
    est = EstimatorState.fresh(I, J, gamma=gamma, service_bound=U_S)
    jobs = {(i, j): [] for i in range(I) for j in range(J)}
    for t in range(T):
        check(t, est, jobs)
        A = (rng.random(I) < 0.4).astype(int).tolist()
        picks = [int(rng.integers(I)) if not r.busy else NONE for r in s.servers]
        s, ev = advance_slot(cfg, s, A, picks, lambda i, j, _t: int(rng.integers(1, U_S + 1)))
        for i, j, start, S in ev.finished_jobs:
            jobs[(i, j)].append((start, S))
        est = estimator_update(est, ev)


@pytest.mark.parametrize("gamma", [0.3, 0.9, 0.999, 1.0])
def test_incremental_matches_closed_form(gamma):
    def check(t, est, jobs):
        for (i, j), done in jobs.items():
            n, phi = closed_form_stats(done, t, gamma)
            assert est.N[i, j] == pytest.approx(n, rel=1e-9, abs=1e-300)
            assert est.phi[i, j] == pytest.approx(phi, rel=1e-9, abs=1e-300)
            assert est.phi[i, j] >= est.N[i, j]
        busy_pairs = (est.M > 0).sum(axis=0)
        assert np.all(busy_pairs <= 1)

    for seed in range(3):
        replay(3, 3, 6, gamma, 500, seed, check)


# -- bonus and denominators --------------------------------------------------


def test_bonus_examples():
    assert ucb_bonus(est_with([[4.0]], [[4.0]], gamma=1.0), 10)[0, 0] == pytest.approx(1.51743, abs=1e-5)
    assert ucb_bonus(est_with([[0.5]], [[1.0]], gamma=0.5), 2)[0, 0] == pytest.approx(1.80103, abs=1e-5)
    assert ucb_bonus(est_with([[4.0]], [[4.0]]), 10)[0, 0] == pytest.approx(2 * math.sqrt(math.log(10) / 4))


def test_bonus_unexplored_is_infinite():
    b = ucb_bonus(est_with([[0.0, 1.0]], [[0.0, 1.0]]), 5)
    assert b[0, 0] == np.inf and np.isfinite(b[0, 1])


def test_bonus_undefined_at_slot_zero():
    with pytest.raises(ContractViolation):
        ucb_bonus(est_with([[1.0]], [[1.0]]), 0)
    with pytest.raises(ContractViolation):
        log_discount_mass(0.9, 0)


def test_log_discount_mass_closed_form():
    for gamma in (0.3, 0.9, 0.999):
        for t in (1, 2, 17, 400):
            assert log_discount_mass(gamma, t) == pytest.approx(math.log(sum(gamma**k for k in range(t))))
    assert log_discount_mass(1.0, 7) == math.log(7)


def test_denominators_clamped_at_one():
    e = est_with([[0.0, 100.0, 1.0]], [[0.0, 400.0, 1.0]], c1=0.01, U_S=10)
    d = ucb_denominators(e, 50)
    assert d[0, 0] == 1.0
    assert d[0, 1] == pytest.approx(4.0 - 0.1 * math.sqrt(math.log(50) / 100))
    assert d[0, 2] == 1.0


# -- pick rules --------------------------------------------------------------


def test_unexplored_picks_longest_queue():
    e = est_with(np.zeros((2, 1)), np.zeros((2, 1)))
    assert ucb_pick([0, 5], e, 3, [True]).tolist() == [1]


def test_ucb_pick_hand_example():
    # mean-time estimates 2 and 4 with bonuses 0.5 and 3.5: denominators 1.5 and 1
    L = math.log(10)
    N = np.array([[(2 * 1 / 0.5) ** 2 * L], [(2 * 1 / 3.5) ** 2 * L]])
    e = est_with(N, N * np.array([[2.0], [4.0]]))
    np.testing.assert_allclose(ucb_bonus(e, 10)[:, 0], [0.5, 3.5])
    np.testing.assert_allclose(ucb_denominators(e, 10)[:, 0], [1.5, 1.0])
    assert ucb_pick([4, 4], e, 10, [True]).tolist() == [1]


def test_ties_go_to_lowest_index():
    e = est_with(np.ones((2, 1)), 3 * np.ones((2, 1)))
    assert ucb_pick([3, 3], e, 4, [True]).tolist() == [0]


def test_random_ties_cover_all_tied():
    w = np.array([[1.0], [2.0], [2.0], [2.0]])
    seen = {int(argmax_pick(w, np.array([True]), np.array([u]))[0]) for u in np.linspace(0, 0.999, 50)}
    assert seen == {1, 2, 3}


def test_unavailable_servers_get_none():
    e = est_with(np.zeros((2, 3)), np.zeros((2, 3)))
    assert ucb_pick([1, 2], e, 3, {0, 2}).tolist() == [1, NONE, 1]


def test_random_picks_uniform():
    u = (np.arange(3000) + 0.5) / 3000
    p = random_picks(u, 3, np.ones(3000, dtype=bool))
    assert np.bincount(p).tolist() == [1000, 1000, 1000]


def test_oracle_tie_and_empty():
    mu = np.array([[0.1], [1.0]])
    assert oracle_pick([10, 1], mu, [True]).tolist() == [0]
    assert oracle_pick([0, 0], mu, [True]).tolist() == [0]


def test_oracle_column_scaling():
    rng = np.random.default_rng(3)
    for _ in range(50):
        Q = rng.integers(0, 20, size=4)
        mu = rng.uniform(0.05, 1, size=(4, 3))
        scaled = mu.copy()
        scaled[:, 1] *= 0.5
        np.testing.assert_array_equal(oracle_pick(Q, mu, [True] * 3), oracle_pick(Q, scaled, [True] * 3))


def test_empirical_without_data_is_oracle_at_default():
    Q = [3, 7, 5]
    z = np.zeros((3, 2))
    np.testing.assert_array_equal(empirical_mean_pick(Q, z, z, 1.0, [True, True]),
                                  oracle_pick(Q, np.ones((3, 2)), [True, True]))


def test_empirical_lock_in_walkthrough():
    # both own pairs observed one 100-slot job; cross pairs unexplored
    count = np.array([[1, 0], [0, 1]])
    total = np.array([[100, 0], [0, 100]])
    np.testing.assert_allclose(empirical_rates(count, total, 1.0), [[0.01, 1.0], [1.0, 0.01]])
    assert empirical_mean_pick([5, 5], count, total, 1.0, [True, True]).tolist() == [1, 0]
    # after the first cross jobs (10 slots each)
    count = np.array([[1, 1], [1, 1]])
    total = np.array([[100, 10], [10, 100]])
    rates = empirical_rates(count, total, 1.0)
    np.testing.assert_allclose(rates, [[0.01, 0.1], [0.1, 0.01]])
    Q = np.array([53, 53])
    np.testing.assert_allclose(Q[:, None] * rates, [[0.53, 5.3], [5.3, 0.53]])
    assert empirical_mean_pick(Q, count, total, 1.0, [True, True]).tolist() == [1, 0]


def test_empirical_default_rate_range():
    z = np.zeros((1, 1))
    with pytest.raises(ConfigError):
        empirical_mean_pick([1], z, z, 0.0, [True])


# -- frame-based and DAM -----------------------------------------------------


def test_frame_length_one_is_plain_maxweight():
    rng = np.random.default_rng(0)
    e = est_with(rng.uniform(1, 5, (3, 2)), rng.uniform(5, 20, (3, 2)), c1=0.01, U_S=10)
    frame = None
    for t in range(1, 30):
        Q = rng.integers(0, 10, size=3)
        picks, frame, e2 = frame_based_pick(frame, Q, e, 1, t, [True, True])
        assert np.all(e2.N == 0)
        np.testing.assert_array_equal(picks, np.full(2, np.argmax(Q)))


def test_frame_ignores_live_queue_within_frame():
    e = EstimatorState.fresh(3, 2, service_bound=10)
    picks0, frame, e = frame_based_pick(None, np.array([1, 9, 2]), e, 100, 200, [True, True])
    e = discounted_update(e, np.array([1, 0]), np.array([True, False]), np.array([True, True]))
    a, _, _ = frame_based_pick(frame, np.array([50, 0, 0]), e, 100, 213, [True, True])
    b, _, _ = frame_based_pick(frame, np.array([0, 0, 70]), e, 100, 213, [True, True])
    np.testing.assert_array_equal(a, b)
    assert frame.start == 200


def test_frame_resets_statistics_at_boundary():
    e = est_with(np.ones((2, 2)), 3 * np.ones((2, 2)))
    _, frame, e2 = frame_based_pick(None, np.array([1, 1]), e, 10, 30, [True, True])
    assert np.all(e2.N == 0) and np.all(e2.phi == 0)
    _, frame, e3 = frame_based_pick(frame, np.array([1, 1]), e, 10, 35, [True, True])
    assert np.all(e3.N == 1)


def test_dam_epoch_one_is_ucb():
    rng = np.random.default_rng(1)
    epoch = None
    for t in range(1, 40):
        e = est_with(rng.uniform(0, 5, (3, 3)) * (rng.random((3, 3)) < 0.7), rng.uniform(5, 40, (3, 3)),
                     c1=0.01, U_S=10)
        e.phi[e.N == 0] = 0
        Q = rng.integers(0, 12, size=3)
        avail = rng.random(3) < 0.7
        picks, epoch = dam_ucb_pick(epoch, 1, Q, e, t, avail)
        np.testing.assert_array_equal(picks, ucb_pick(Q, e, t, avail))


def test_dam_assignment_fixed_within_epoch():
    rng = np.random.default_rng(2)
    e = EstimatorState.fresh(3, 2, service_bound=10)
    epoch = None
    held = None
    for t in range(200, 250):
        picks, epoch = dam_ucb_pick(epoch, 50, rng.integers(0, 9, size=3), e, t, [True, True])
        if held is None:
            held = picks.copy()
        np.testing.assert_array_equal(picks, held)


def test_policy_spec_validation():
    assert PolicySpec("ucb").name == "ucb"
    for bad in (dict(kind="greedy"), dict(kind="ucb", gamma=0.0), dict(kind="ucb", c1=-1.0),
                dict(kind="frame_maxweight", frame=0), dict(kind="empirical_mean", default_rate=2.0)):
        with pytest.raises(ConfigError):
            PolicySpec(**bad)


# -- properties --------------------------------------------------------------

pos_floats = st.floats(0.1, 50.0, allow_nan=False)


@settings(max_examples=150, deadline=None)
@given(st.lists(st.integers(0, 500), min_size=3, max_size=3), st.integers(0, 10),
       st.integers(0, 2**32 - 1), st.integers(1, 5000))
def test_argmax_invariant_under_queue_scaling(Q, k, seed, t):
    # scaling by a power of two is exact in floating point
    rng = np.random.default_rng(seed)
    Q = np.array(Q)
    c = 2**k
    N = rng.uniform(0, 20, (3, 2)) * (rng.random((3, 2)) < 0.8)
    e = est_with(N, N * rng.uniform(1, 30, (3, 2)), gamma=0.99, c1=0.01, U_S=30)
    mu = rng.uniform(0.01, 1, (3, 2))
    av = [True, True]
    np.testing.assert_array_equal(ucb_pick(Q, e, t, av), ucb_pick(c * Q, e, t, av))
    np.testing.assert_array_equal(oracle_pick(Q, mu, av), oracle_pick(c * Q, mu, av))
    np.testing.assert_array_equal(empirical_mean_pick(Q, e.N, e.phi, 1.0, av),
                                  empirical_mean_pick(c * Q, e.N, e.phi, 1.0, av))


@settings(max_examples=200, deadline=None)
@given(pos_floats, st.floats(1.0, 30.0), st.floats(0.01, 1.0), st.integers(1, 10000),
       st.floats(0.5, 1.0), st.floats(0.1, 5.0))
def test_fewer_samples_never_lower_the_weight(N, mean, shrink, t, gamma, c1):
    assume(N * shrink > 0)
    hi = est_with([[N]], [[N * mean]], gamma=gamma, c1=c1, U_S=20)
    lo = est_with([[N * shrink]], [[N * shrink * mean]], gamma=gamma, c1=c1, U_S=20)
    assert ucb_denominators(lo, t)[0, 0] <= ucb_denominators(hi, t)[0, 0] * (1 + 1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.5, 0.9, 1.0]))
def test_estimated_rate_at_most_one(seed, gamma):
    def check(t, est, jobs):
        pos = est.N > 0
        assert np.all(est.phi[pos] >= est.N[pos] * (1 - 1e-12))
        assert np.all(est.mean_time()[pos] >= 1 - 1e-12)
        if gamma == 1.0:
            assert np.all(est.N == np.round(est.N)) and np.all(est.phi == np.round(est.phi))

    replay(2, 2, 5, gamma, 60, seed, check)
