import itertools
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diml.dynamics import LearnerParams, Trajectory, simulate
from diml.errors import DomainError, InfeasibleError
from diml.mechanisms import (
    GameShape,
    all_joint_actions,
    random_count_neural_mechanism,
    random_tabular_mechanism,
    tabular_from_table,
)
from diml.metrics import (
    EmpiricalDistribution,
    Evaluator,
    all_contexts,
    cfkl_params,
    default_cfkl_mode,
    diff_mse,
    empirical_joint_distribution,
    kl_divergence,
    logit_choice_probs,
    recover_utilities_from_conditionals,
    sample_contexts,
    utility_vectors,
)


def test_recover_uniform_is_zero():
    assert np.array_equal(recover_utilities_from_conditionals(np.full(4, 0.25), 2.0), np.zeros(4))


def test_recover_two_action_log_ratio():
    e = math.e
    np.testing.assert_allclose(recover_utilities_from_conditionals([e / (1 + e), 1 / (1 + e)], 1.0),
                               [0.5, -0.5], atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 8), st.floats(0.1, 5.0), st.integers(0, 10_000))
def test_recover_inverts_logit_on_centred_utilities(k, beta, seed):
    u = np.random.default_rng(seed).normal(size=k)
    u -= u.mean()
    np.testing.assert_allclose(recover_utilities_from_conditionals(logit_choice_probs(u, beta), beta), u,
                               atol=1e-12)


def test_recover_rejects_bad_inputs():
    with pytest.raises(DomainError):
        recover_utilities_from_conditionals([1.0, 0.0], 1.0)
    with pytest.raises(ValueError):
        recover_utilities_from_conditionals([0.5, 0.6], 1.0)


def test_empirical_recovery_at_1e5_samples():
    errs = []
    for s in range(5):
        rng = np.random.default_rng(100 + s)
        u = rng.normal(size=3)
        p = logit_choice_probs(u, 2.0)
        freq = np.bincount(rng.choice(3, size=100_000, p=p), minlength=3) / 100_000
        errs.append(np.max(np.abs(recover_utilities_from_conditionals(freq, 2.0) - (u - u.mean()))))
    assert np.median(errs) <= 0.02


def test_diff_mse_identity_and_gauge():
    shape = GameShape(2, 3)
    m = random_tabular_mechanism(shape, seed=0)
    ctx = all_contexts(shape)
    assert diff_mse(m, m, ctx) == 0.0
    table = m.params["table"].copy()
    rows = all_joint_actions(shape)
    table[:, 0] += 5.0 * rows[:, 1]     # constant in agent 0's own action
    table[:, 1] -= 2.0 * rows[:, 0]
    assert diff_mse(m, tabular_from_table(shape, table), ctx) == pytest.approx(0.0, abs=1e-24)


def test_diff_mse_doubled_payoffs_against_enumeration():
    shape = GameShape(2, 3)
    m = random_tabular_mechanism(shape, seed=1)
    double = tabular_from_table(shape, 2 * m.params["table"])
    ctx = all_contexts(shape)
    # brute force with the exact pairs drawn inside diff_mse
    pairs = np.random.default_rng(7).integers(0, 3, size=(len(ctx), 8, 2))
    brute = []
    for c, context in enumerate(ctx):
        for a, b in pairs[c]:
            pa, pb = context.profile(a), context.profile(b)
            brute.append((m.payoff_agent(context.agent, pa) - m.payoff_agent(context.agent, pb)) ** 2)
    assert diff_mse(m, double, ctx, 8, seed=7) == pytest.approx(np.mean(brute), rel=1e-12)
    # with many pairs the sample approaches the exhaustive average over all contexts and ordered pairs
    exhaustive = np.mean([
        (m.payoff_agent(c.agent, c.profile(a)) - m.payoff_agent(c.agent, c.profile(b))) ** 2
        for c in ctx for a, b in itertools.product(range(3), repeat=2)
    ])
    assert diff_mse(m, double, ctx, 4000, seed=0) == pytest.approx(exhaustive, rel=0.05)


def test_contexts_come_from_trajectories():
    m = random_tabular_mechanism(GameShape(3, 2), seed=0)
    trajs = simulate(m, LearnerParams(), 20, 3, seed=0)
    ctx = sample_contexts(trajs, 50, seed=1)
    assert len(ctx) == 50
    for c in ctx:
        j, t = c.source
        row = trajs[j].actions[t]
        assert np.array_equal(c.profile(int(row[c.agent])), row)
    assert ctx == sample_contexts(trajs, 50, seed=1)
    U = utility_vectors(m, ctx[:3])
    assert U.shape == (3, 2)


def test_cfkl_identity_same_seed_is_zero():
    m = random_tabular_mechanism(GameShape(2, 2), seed=0)
    assert cfkl_params(m, m.copy(), LearnerParams(0.2, 1.5, 0.1), rollouts=8, horizon=50, seed=3) == 0.0


def test_cfkl_sampling_noise_small_with_independent_rollouts():
    m = random_tabular_mechanism(GameShape(2, 2), seed=0)
    kl = cfkl_params(m, m, LearnerParams(0.2, 1.5, 0.1), rollouts=100, horizon=1000, seed=1, est_seed=2)
    assert kl <= 0.01


def test_cfkl_negated_agent_is_far():
    shape = GameShape(2, 2)
    table = np.array([[2.0, 2.0], [0.0, -1.0], [-1.0, 0.0], [1.0, 1.0]])
    m = tabular_from_table(shape, table)
    neg = table.copy()
    neg[:, 0] *= -1
    kl = cfkl_params(m, tabular_from_table(shape, neg), LearnerParams(0.2, 5.0, 0.05), rollouts=32, horizon=200,
                     seed=0)
    assert kl > 0.5


def test_cfkl_exact_joint_refused_for_large_games():
    m = random_count_neural_mechanism(GameShape(40, 10), widths=(4,), seed=0)
    with pytest.raises(InfeasibleError, match="count-key"):
        cfkl_params(m, m, LearnerParams(), rollouts=1, horizon=5, mode="exact-joint")
    assert default_cfkl_mode(m.shape) == "count-key"
    assert cfkl_params(m, m, LearnerParams(), rollouts=1, horizon=5, mode="count-key") == 0.0


def test_empirical_distribution_cases():
    traj = Trajectory(np.tile([1, 0, 2], (7, 1)))
    d = empirical_joint_distribution([traj], "exact-joint", 3)
    assert d.counts == Counter({(1, 0, 2): 7})
    rows = all_joint_actions(GameShape(2, 3))
    d = empirical_joint_distribution([Trajectory(rows)], "exact-joint", 3)
    assert len(d.counts) == 9 and set(d.counts.values()) == {1}


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_count_key_ignores_agent_order(seed):
    rng = np.random.default_rng(seed)
    acts = rng.integers(0, 3, size=(30, 4))
    perm = rng.permutation(4)
    a = empirical_joint_distribution([Trajectory(acts)], "count-key", 3)
    b = empirical_joint_distribution([Trajectory(acts[:, perm])], "count-key", 3)
    assert a.counts == b.counts


count_maps = st.dictionaries(st.tuples(st.integers(0, 3), st.integers(0, 3)), st.integers(0, 50), max_size=12)


@settings(max_examples=100, deadline=None)
@given(count_maps, count_maps)
def test_kl_nonnegative_and_zero_on_self(p, q):
    P, Q = EmpiricalDistribution(Counter(p)), EmpiricalDistribution(Counter(q))
    assert kl_divergence(P, Q) >= -1e-15
    assert kl_divergence(P, P) == 0.0


def test_kl_add_one_smoothing_value():
    # supports {x, y}: p counts (3, 0) -> (4, 1)/5 ; q counts (1, 1) -> (2, 2)/4
    p = EmpiricalDistribution(Counter({"x": 3}))
    q = EmpiricalDistribution(Counter({"x": 1, "y": 1}))
    expected = 0.8 * math.log(0.8 / 0.5) + 0.2 * math.log(0.2 / 0.5)
    assert kl_divergence(p, q) == pytest.approx(expected, rel=1e-14)


def test_evaluator_returns_both_metrics():
    shape = GameShape(2, 2)
    m = random_tabular_mechanism(shape, seed=0)
    ev = Evaluator(m, all_contexts(shape), LearnerParams(0.2, 1.5, 0.1), rollouts=4, horizon=20)
    out = ev(m.copy())
    assert out == {"diff_mse": 0.0, "cfkl_params": 0.0}
    assert ev.cfkl_mode == "exact-joint"
