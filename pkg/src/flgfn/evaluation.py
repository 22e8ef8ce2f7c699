"""Exact and sample-based evaluation, plus brute-force oracles for small instances.

Exact quantities are computed in log space by dynamic programming:

* the sampler's terminal distribution ``P_F^T(x)`` (sum over all trajectories into ``x``),
* the target ``R(x) / Z``,
* state flows ``F(s)`` for a given backward policy, by backward induction from ``F(x) = R(x)``.
"""

from __future__ import annotations

import math
from itertools import combinations
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy.special import logsumexp
from scipy.stats import spearmanr

from . import kernels
from .envs import DEFAULT_CAP, BitSeqEnv, EnumerationCapError, SetEnv
from .model import policy_log_probs

__all__ = [
    "FlowTable",
    "ModeCriterion",
    "ModeTracker",
    "SampleLog",
    "TerminalDistribution",
    "TopK",
    "count_modes",
    "default_mode_threshold",
    "exact_terminal_distribution",
    "flow_oracle",
    "l1_distance",
    "prefix_tree_flows",
    "spearman_log",
    "target_distribution",
    "terminal_log_probs",
    "top_k_avg_reward",
]


class SupportMismatchError(ValueError):
    pass


@dataclass
class TerminalDistribution:
    """Probabilities over terminal states, ordered as ``keys``."""

    keys: list[str]
    log_probs: np.ndarray
    log_z: float | None = None  # set for targets: log of the partition function

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.keys, self.probs.tolist()))

    def __len__(self) -> int:
        return len(self.keys)


def _terminal_keys(env) -> list[str]:
    cached = getattr(env, "_flgfn_terminal_keys", None)
    if cached is None:
        if isinstance(env, BitSeqEnv):
            bits = env.level_bits(env.n_words) + ord("0")
            cached = [row.tobytes().decode() for row in bits]
        else:
            cached = [env.key(x) for x in env.enumerate_terminals(cap=math.inf)]
        try:
            env._flgfn_terminal_keys = cached
        except AttributeError:
            pass
    return cached


def _normalise(log_w: np.ndarray) -> tuple[np.ndarray, float]:
    log_z = float(logsumexp(log_w))
    return log_w - log_z, log_z


def target_distribution(env, cap: int = DEFAULT_CAP) -> TerminalDistribution:
    """``R(x) / Z`` over every terminal state."""
    if env.num_terminals() > cap:
        raise EnumerationCapError(f"{env.num_terminals()} terminals exceed cap {cap}")
    if isinstance(env, BitSeqEnv):
        log_r = -env.level_energies(env.n_words)
    else:
        log_r = np.array([env.log_reward(x) for x in env.enumerate_terminals(cap)])
    log_p, log_z = _normalise(log_r)
    return TerminalDistribution(_terminal_keys(env), log_p, log_z)


# ---------------------------------------------------------------------------
# learned sampler


def _set_state_count(env: SetEnv) -> int:
    return sum(math.comb(env.universe_size, k) for k in range(env.target_size + 1))


def _generic_forward_dp(model, env, cap: int) -> dict[str, float]:
    levels = env.all_states(cap)
    states = sorted((s for lvl in levels for s in lvl), key=env.size)
    inner = [s for s in states if not env.is_terminal(s)]
    lpf = policy_log_probs(model, inner)
    log_p: dict = {env.initial_state(): 0.0}
    for s, row in zip(inner, lpf):
        ls = log_p.get(s)
        if ls is None:
            continue
        for a in env.legal_actions(s):
            c = env.apply(s, a)
            log_p[c] = np.logaddexp(log_p.get(c, -np.inf), ls + row[a])
    return {env.key(s): v for s, v in log_p.items() if env.is_terminal(s)}


def _bit_level_log_probs(model, env: BitSeqEnv) -> np.ndarray:
    log_p = np.zeros(1)
    for level in range(env.n_words):
        lpf = policy_log_probs(model, env.level_states(level))
        log_p = (log_p[:, None] + lpf).reshape(-1)
    return log_p


def set_terminal_log_probs(model, env: SetEnv, terminals: Sequence) -> np.ndarray:
    """``log P_F^T(x)`` for each ``x`` by DP over the subsets of ``x`` only."""
    needed: dict = {}
    for x in terminals:
        items = sorted(x.chosen)
        for r in range(len(items)):
            for sub in combinations(items, r):
                needed.setdefault(frozenset(sub), None)
    states = [env.state_from(c) for c in needed]
    lpf = dict(zip(needed, policy_log_probs(model, states)))
    out = np.empty(len(terminals))
    for n, x in enumerate(terminals):
        items = sorted(x.chosen)
        log_p = {frozenset(): 0.0}
        for r in range(1, len(items) + 1):
            for sub in combinations(items, r):
                sub = frozenset(sub)
                log_p[sub] = logsumexp([log_p[sub - {e}] + lpf[sub - {e}][e] for e in sub])
        out[n] = log_p[frozenset(items)]
    return out


def exact_terminal_distribution(model, env=None, cap: int = DEFAULT_CAP) -> TerminalDistribution:
    """Exact ``P_F^T`` of the model's forward policy (no exploration, temperature 1)."""
    env = env if env is not None else model.env
    if isinstance(env, BitSeqEnv):
        if env.num_terminals() > cap:
            raise EnumerationCapError(f"{env.num_terminals()} terminals exceed cap {cap}")
        return TerminalDistribution(_terminal_keys(env), _bit_level_log_probs(model, env))
    if isinstance(env, SetEnv):
        if _set_state_count(env) > cap:
            raise EnumerationCapError(f"{_set_state_count(env)} DP nodes exceed cap {cap}")
    by_key = _generic_forward_dp(model, env, cap)
    keys = _terminal_keys(env)
    return TerminalDistribution(keys, np.array([by_key.get(k, -np.inf) for k in keys]))


def terminal_log_probs(model, env, terminals: Sequence) -> np.ndarray:
    """``log P_F^T(x)`` for selected terminals."""
    if isinstance(env, SetEnv):
        return set_terminal_log_probs(model, env, terminals)
    if isinstance(env, BitSeqEnv):
        out = np.zeros(len(terminals))
        for level in range(env.n_words):
            prefixes = [type(x)(x.words[:level]) for x in terminals]
            lpf = policy_log_probs(model, prefixes)
            out += lpf[np.arange(len(terminals)), [x.words[level] for x in terminals]]
        return out
    dist = exact_terminal_distribution(model, env)
    lookup = dict(zip(dist.keys, dist.log_probs))
    return np.array([lookup[env.key(x)] for x in terminals])


def l1_distance(p: TerminalDistribution, q: TerminalDistribution) -> float:
    """Sum of absolute probability differences; both must share one support."""
    if p.keys is not q.keys and list(p.keys) != list(q.keys):
        if set(p.keys) != set(q.keys):
            raise SupportMismatchError("distributions are over different terminal sets")
        order = {k: i for i, k in enumerate(q.keys)}
        idx = np.array([order[k] for k in p.keys])
        return float(np.abs(p.probs - q.probs[idx]).sum())
    return float(np.abs(p.probs - q.probs).sum())


def spearman_log(model, env, test_set: Sequence) -> float:
    """Spearman correlation (average ranks for ties) of ``log R(x)`` and ``log P_F^T(x)``."""
    if len(test_set) < 2:
        raise ValueError("Spearman correlation needs at least two test states")
    log_r = np.array([env.log_reward(x) for x in test_set])
    log_p = terminal_log_probs(model, env, test_set)
    return float(spearmanr(log_r, log_p).statistic)


# ---------------------------------------------------------------------------
# flow oracles


@dataclass
class FlowTable:
    """Exact log-flows ``log F(s)`` with the backward policy that defines them."""

    env: object
    states: list
    log_flow: dict[str, float]
    log_pb: Callable  # (parent, child) -> log P_B(parent | child)

    def log_pf(self, s, s2) -> float:
        """Forward log-probability implied by detailed balance."""
        k = self.env.key
        return self.log_flow[k(s2)] + self.log_pb(s, s2) - self.log_flow[k(s)]

    def forward_looking(self, s) -> float:
        """``log F~(s) = E(s) + log F(s)``."""
        return self.env.state_energy(s) + self.log_flow[self.env.key(s)]

    @property
    def log_z(self) -> float:
        return self.log_flow[self.env.key(self.env.initial_state())]


def uniform_backward(env) -> Callable:
    def log_pb(parent, child) -> float:
        return -math.log(len(env.parents(child)))

    return log_pb


def flow_oracle(env, backward_policy: Callable | str = "uniform", cap: int = DEFAULT_CAP) -> FlowTable:
    """Backward DP: ``F(x) = R(x)``, ``F(s) = sum over children s' of F(s') P_B(s | s')``."""
    log_pb = uniform_backward(env) if backward_policy == "uniform" else backward_policy
    levels = env.all_states(cap)
    states = [s for lvl in levels for s in lvl]
    order = sorted(states, key=env.size, reverse=True)
    log_f: dict[str, float] = {}
    for s in order:
        if env.is_terminal(s):
            log_f[env.key(s)] = env.log_reward(s)
            continue
        terms = []
        for a in env.legal_actions(s):
            c = env.apply(s, a)
            terms.append(log_f[env.key(c)] + log_pb(s, c))
        log_f[env.key(s)] = float(logsumexp(terms))
    return FlowTable(env, states, log_f, log_pb)


def backward_reach_log_prob(env, s, x, log_pb: Callable) -> float:
    """``log P_B(s | x)``: probability that backward walks from ``x`` pass through ``s``."""
    target = env.key(s)
    memo: dict[str, float] = {}

    def walk(u) -> float:
        ku = env.key(u)
        if ku == target:
            return 0.0
        if ku in memo:
            return memo[ku]
        if env.is_initial(u) or env.size(u) <= env.size(s):
            memo[ku] = -np.inf
            return -np.inf
        terms = [log_pb(p, u) + walk(p) for p in env.parents(u)]
        memo[ku] = float(logsumexp(terms))
        return memo[ku]

    return walk(x)


def summed_state_flow(env, s, log_pb: Callable, cap: int = DEFAULT_CAP) -> float:
    """``log F(s)`` as a direct sum over terminals: ``sum_x P_B(s | x) R(x)``."""
    terms = [backward_reach_log_prob(env, s, x, log_pb) + env.log_reward(x)
             for x in env.enumerate_terminals(cap)]
    return float(logsumexp(terms))


class PrefixTreeFlows(NamedTuple):
    log_flow: list[np.ndarray]   # per level, indexed by the level's state number
    energy: list[np.ndarray]


def prefix_tree_flows(env: BitSeqEnv, cap: int = DEFAULT_CAP) -> PrefixTreeFlows:
    """Exact flows on the bit-sequence tree, where every state has a single parent."""
    total = sum(env.n_actions ** lvl for lvl in range(env.n_words + 1))
    if total > cap:
        raise EnumerationCapError(f"{total} states exceed cap {cap}")
    energy = [env.level_energies(lvl) for lvl in range(env.n_words + 1)]
    log_flow = [None] * (env.n_words + 1)
    log_flow[-1] = -energy[-1]
    for lvl in range(env.n_words - 1, -1, -1):
        log_flow[lvl] = logsumexp(log_flow[lvl + 1].reshape(-1, env.n_actions), axis=1)
    return PrefixTreeFlows(log_flow, energy)


# ---------------------------------------------------------------------------
# sample-based metrics


class SampleRecord(NamedTuple):
    key: str
    log_reward: float
    step: int


@dataclass
class SampleLog:
    """Every terminal state sampled during training, with a uniqueness index."""

    records: list[SampleRecord] = field(default_factory=list)
    unique: dict[str, float] = field(default_factory=dict)

    def append(self, key: str, log_reward: float, step: int) -> None:
        self.records.append(SampleRecord(key, float(log_reward), int(step)))
        self.unique.setdefault(key, float(log_reward))

    def __len__(self) -> int:
        return len(self.records)


class TopK(NamedTuple):
    mean: float
    n_unique: int
    truncated: bool  # fewer than k unique states were available


def _unique_log_rewards(sample_log) -> dict[str, float]:
    if isinstance(sample_log, SampleLog):
        return sample_log.unique
    out: dict[str, float] = {}
    for rec in sample_log:
        key, log_r = rec[0], rec[1]
        out.setdefault(key, float(log_r))
    return out


def top_k_avg_reward(sample_log, k: int = 100) -> TopK:
    """Mean reward of the ``k`` best unique sampled terminals."""
    if k < 1:
        raise ValueError("k must be at least 1")
    uniq = _unique_log_rewards(sample_log)
    if not uniq:
        raise ValueError("the sample log is empty")
    log_r = np.sort(np.fromiter(uniq.values(), dtype=np.float64))[::-1][:k]
    return TopK(float(np.exp(log_r).mean()), len(uniq), len(uniq) < k)


@dataclass(frozen=True)
class ModeCriterion:
    """Set-style modes have reward above ``threshold``; sequence-style modes are
    members of ``modes`` reached within edit distance ``radius``."""

    threshold: float | None = None
    radius: int | None = None
    modes: tuple[str, ...] = ()

    def __post_init__(self):
        if self.threshold is not None and self.threshold <= 0:
            raise ValueError("mode reward threshold must be positive")
        if self.radius is not None and self.radius < 0:
            raise ValueError("mode radius must be nonnegative")
        if (self.threshold is None) == (self.radius is None):
            raise ValueError("give exactly one of threshold or radius")

    def describe(self) -> str:
        if self.threshold is not None:
            return f"reward>{self.threshold:.6g}"
        return f"edit_distance<={self.radius} to {len(self.modes)} modes"


def _bits(key: str) -> np.ndarray:
    return np.frombuffer(key.encode("ascii"), dtype=np.uint8) - ord("0")


class ModeTracker:
    """Incremental mode counting over a growing sample log."""

    def __init__(self, criterion: ModeCriterion):
        self.criterion = criterion
        self._seen: set[str] = set()
        self._found: set = set()
        if criterion.radius is not None and criterion.modes:
            self._mode_arr = np.stack([_bits(m) for m in criterion.modes])

    def update(self, key: str, log_reward: float) -> None:
        if key in self._seen:
            return
        self._seen.add(key)
        c = self.criterion
        if c.threshold is not None:
            if log_reward > math.log(c.threshold):
                self._found.add(key)
            return
        if c.radius == 0:
            if key in c.modes:
                self._found.add(key)
            return
        x = _bits(key)
        for i, m in enumerate(self._mode_arr):
            if i not in self._found and kernels.edit_distance(x, m) <= c.radius:
                self._found.add(i)

    @property
    def count(self) -> int:
        return len(self._found)


def count_modes(sample_log, criterion: ModeCriterion) -> int:
    tracker = ModeTracker(criterion)
    for key, log_r in _unique_log_rewards(sample_log).items():
        tracker.update(key, log_r)
    return tracker.count


def default_mode_threshold(env, quantile: float = 99.0, cap: int = DEFAULT_CAP) -> float:
    """Reward at the given percentile of all terminal rewards (enumerable instances)."""
    dist = target_distribution(env, cap)
    log_r = dist.log_probs + dist.log_z
    return float(np.exp(np.percentile(log_r, quantile)))
