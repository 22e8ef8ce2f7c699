import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flgfn.envs import BitSeqEnv, EnumerationCapError, SetEnv, canonical_t1
from flgfn.evaluation import (
    ModeCriterion,
    SampleLog,
    SupportMismatchError,
    TerminalDistribution,
    count_modes,
    default_mode_threshold,
    exact_terminal_distribution,
    flow_oracle,
    l1_distance,
    prefix_tree_flows,
    spearman_log,
    summed_state_flow,
    target_distribution,
    terminal_log_probs,
    top_k_avg_reward,
    uniform_backward,
)
from flgfn.model import FlowMode, GFNModel, heads
from builders import exact_model
from oracles import pairwise_spearman, set_rewards, set_terminal_prob_by_orders


def uniform_model(env):
    model = GFNModel(env, hidden=8, seed=0)
    for p in model.parameters():
        p.data[...] = 0.0
    return model


def dist(keys, probs):
    with np.errstate(divide="ignore"):
        return TerminalDistribution(list(keys), np.log(np.asarray(probs, dtype=float)))


# -- terminal distributions ---------------------------------------------------------


def test_uniform_policy_on_t1_gives_thirds():
    env = canonical_t1()
    d = exact_terminal_distribution(uniform_model(env)).as_dict()
    assert d == pytest.approx({"0,1": 1 / 3, "0,2": 1 / 3, "1,2": 1 / 3}, abs=1e-15)


def test_bit_terminal_probability_is_path_product():
    env = BitSeqEnv(8, 4, num_modes=2, seed=0)
    model = GFNModel(env, hidden=16, seed=3)
    d = exact_terminal_distribution(model)
    assert d.probs.sum() == pytest.approx(1.0, abs=1e-12)
    for key in ("00000000", "10110100", "11111111"):
        x = env.parse_key(key)
        s, log_p = env.initial_state(), 0.0
        for w in x.words:
            log_p += heads(model, s).log_pf[w]
            s = env.apply(s, w)
        assert d.log_probs[d.keys.index(key)] == pytest.approx(log_p, abs=1e-12)
        assert terminal_log_probs(model, env, [x])[0] == pytest.approx(log_p, abs=1e-12)


def test_set_dp_matches_sum_over_orders():
    env = SetEnv(6, 3, seed=1)
    model = GFNModel(env, hidden=16, seed=2)

    def policy(chosen, a):
        return math.exp(heads(model, env.state_from(sorted(chosen))).log_pf[a])

    d = exact_terminal_distribution(model).as_dict()
    assert sum(d.values()) == pytest.approx(1.0, abs=1e-12)
    xs = env.enumerate_terminals()
    subset_dp = terminal_log_probs(model, env, xs)
    for x, lp in zip(xs, subset_dp):
        brute = set_terminal_prob_by_orders(policy, tuple(sorted(x.chosen)))
        assert d[env.key(x)] == pytest.approx(brute, rel=1e-10)
        assert math.exp(lp) == pytest.approx(brute, rel=1e-10)


def test_exact_distribution_respects_cap():
    env = SetEnv(30, 20, seed=0)
    with pytest.raises(EnumerationCapError):
        exact_terminal_distribution(uniform_model(env), cap=10**6)
    with pytest.raises(EnumerationCapError):
        target_distribution(env, cap=1000)


def test_target_on_t1_and_against_enumeration():
    t = target_distribution(canonical_t1()).as_dict()
    assert t == pytest.approx({"0,1": 1 / 7, "0,2": 4 / 7, "1,2": 2 / 7}, abs=1e-15)
    env = SetEnv(7, 3, seed=5)
    oracle = set_rewards(env.element_energies, 3)
    z = sum(oracle.values())
    got = target_distribution(env)
    assert got.log_z == pytest.approx(math.log(z), abs=1e-12)
    for c, r in oracle.items():
        assert got.as_dict()[env.key(env.state_from(c))] == pytest.approx(r / z, rel=1e-12)


def test_target_with_equal_energies_is_uniform():
    d = target_distribution(SetEnv(5, 2, energies=[0.4] * 5))
    assert np.allclose(d.probs, 0.1, atol=1e-15)


def test_target_argmax_is_lowest_energy_subset():
    env = SetEnv(6, 3, seed=3)
    d = target_distribution(env)
    best = np.argsort(env.element_energies)[:3]
    assert d.keys[int(np.argmax(d.probs))] == env.key(env.state_from(best))


def test_bit_target_normalised():
    env = BitSeqEnv(8, 4, num_modes=2, seed=1)
    d = target_distribution(env)
    assert d.probs.sum() == pytest.approx(1.0, abs=1e-12)
    assert d.keys[int(np.argmax(d.probs))] in env.mode_keys


# -- L1 ---------------------------------------------------------------------------


def test_l1_examples():
    assert l1_distance(dist("ab", [1, 0]), dist("ab", [0, 1])) == pytest.approx(2.0)
    assert l1_distance(dist("ab", [0.5, 0.5]), dist("ab", [0.5, 0.5])) == 0.0
    assert l1_distance(dist("ab", [0.25, 0.75]), dist("ba", [0.75, 0.25])) == 0.0
    with pytest.raises(SupportMismatchError):
        l1_distance(dist("ab", [0.5, 0.5]), dist("ac", [0.5, 0.5]))


@pytest.mark.parametrize("env", [canonical_t1(), SetEnv(5, 3, seed=2)])
def test_l1_is_zero_at_exact_parameters(env):
    model = exact_model(env)
    assert l1_distance(exact_terminal_distribution(model), target_distribution(env)) < 1e-12
    fl = exact_model(env, FlowMode.FORWARD_LOOKING)
    assert l1_distance(exact_terminal_distribution(fl), target_distribution(env)) < 1e-12


# -- sample metrics ---------------------------------------------------------------


def test_top_k_examples():
    log = SampleLog()
    for key, r in [("a", 1.0), ("b", 5.0), ("a", 1.0), ("c", 3.0)]:
        log.append(key, math.log(r), 1)
    assert top_k_avg_reward(log, 2) == (pytest.approx(4.0), 3, False)
    top = top_k_avg_reward(log, 10)
    assert top.mean == pytest.approx(3.0) and top.truncated
    records = [("a", math.log(2.0), 0), ("a", math.log(2.0), 3)]
    assert top_k_avg_reward(records, 1).mean == pytest.approx(2.0)
    with pytest.raises(ValueError):
        top_k_avg_reward(SampleLog(), 5)
    with pytest.raises(ValueError):
        top_k_avg_reward(log, 0)


def test_count_modes_threshold_and_radius():
    log = SampleLog()
    for key, r in [("x", 3.0), ("y", 0.5), ("z", 2.5), ("x", 3.0)]:
        log.append(key, math.log(r), 0)
    assert count_modes(log, ModeCriterion(threshold=2.0)) == 2
    assert count_modes(log, ModeCriterion(threshold=3.0)) == 0
    bits = SampleLog()
    for key in ["0000", "0001", "1111", "0011"]:
        bits.append(key, 0.0, 0)
    modes = ("0000", "1110")
    assert count_modes(bits, ModeCriterion(radius=0, modes=modes)) == 1
    assert count_modes(bits, ModeCriterion(radius=1, modes=modes)) == 2
    assert count_modes(SampleLog(), ModeCriterion(radius=1, modes=modes)) == 0
    with pytest.raises(ValueError):
        ModeCriterion(threshold=1.0, radius=1)


def test_default_threshold_is_reward_percentile():
    env = SetEnv(6, 3, seed=0)
    rewards = sorted(set_rewards(env.element_energies, 3).values())
    assert default_mode_threshold(env, 100.0) == pytest.approx(rewards[-1], rel=1e-12)
    assert default_mode_threshold(env, 0.0) == pytest.approx(rewards[0], rel=1e-12)


# -- Spearman ---------------------------------------------------------------------


def test_spearman_perfect_and_reversed():
    env = SetEnv(6, 3, seed=0)
    xs = env.enumerate_terminals()
    assert spearman_log(exact_model(env), env, xs) == pytest.approx(1.0, abs=1e-12)
    flipped = SetEnv(6, 3, energies=-env.element_energies)
    rev = exact_model(flipped)
    assert spearman_log(rev, env, [flipped.parse_key(env.key(x)) for x in xs]) == pytest.approx(
        -1.0, abs=1e-12)
    with pytest.raises(ValueError):
        spearman_log(rev, env, xs[:1])


@given(st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_spearman_matches_pairwise_ranks(seed):
    env = SetEnv(6, 3, energies=np.round(np.random.default_rng(seed).uniform(-1, 1, 6), 1))
    model = GFNModel(env, hidden=4, seed=seed)
    xs = env.enumerate_terminals()
    log_r = [env.log_reward(x) for x in xs]
    log_p = terminal_log_probs(model, env, xs)
    assert spearman_log(model, env, xs) == pytest.approx(pairwise_spearman(log_r, log_p), abs=1e-12)


# -- flow oracles -----------------------------------------------------------------


def test_flow_oracle_on_t1():
    env = canonical_t1()
    table = flow_oracle(env)
    assert table.log_z == pytest.approx(math.log(3.5), abs=1e-15)
    assert math.exp(table.log_flow["0"]) == pytest.approx(1.25, abs=1e-15)
    a = env.state_from([0])
    assert table.forward_looking(a) == pytest.approx(math.log(1.25), abs=1e-15)


def test_flow_oracle_matches_direct_sum_over_terminals():
    env = SetEnv(5, 3, seed=4)
    table = flow_oracle(env)
    pb = uniform_backward(env)
    for s in table.states:
        assert summed_state_flow(env, s, pb) == pytest.approx(table.log_flow[env.key(s)], abs=1e-12)


def test_flow_oracle_policies_are_normalised():
    env = SetEnv(5, 3, seed=4)
    table = flow_oracle(env)
    for s in table.states:
        if env.is_terminal(s):
            continue
        p = [math.exp(table.log_pf(s, env.apply(s, a))) for a in env.legal_actions(s)]
        assert sum(p) == pytest.approx(1.0, abs=1e-12)


def test_prefix_tree_flows_match_generic_oracle():
    env = BitSeqEnv(8, 4, num_modes=2, seed=0)
    tree = prefix_tree_flows(env)
    table = flow_oracle(env)
    for lvl in range(env.n_words + 1):
        for i, s in enumerate(env.level_states(lvl)):
            assert tree.log_flow[lvl][i] == pytest.approx(table.log_flow[env.key(s)], abs=1e-12)
    with pytest.raises(EnumerationCapError):
        prefix_tree_flows(env, cap=100)
