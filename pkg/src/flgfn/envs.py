"""Environments: DAGs of partial objects with an energy on every state.

Each environment exposes the same small interface used by the model, the
trainer and the evaluators:

* ``initial_state()``, ``is_terminal(s)``, ``legal_actions(s)``, ``apply(s, a)``
* ``parents(s)`` plus fixed-width masks ``action_mask(s)`` / ``parent_mask(s)``
  and ``parent_slot(s, a)``, the slot of ``s`` among the parents of ``apply(s, a)``
* ``state_energy(s)`` (already scaled by the reward exponent, so
  ``R(x) = exp(-state_energy(x))``) and ``transition_energy(s, s2)``
* ``encode(s)`` / ``encode_batch(states)`` and the canonical ``key(s)``
* ``enumerate_terminals(cap)`` for small instances
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations, product
from typing import Iterable, Sequence

import numpy as np

from . import kernels

__all__ = [
    "BitSeqEnv",
    "BitSeqState",
    "EnumerationCapError",
    "IllegalActionError",
    "SetEnv",
    "SetState",
    "TerminalOnlyEnergy",
    "TerminatingChainEnv",
    "canonical_t1",
    "edit_distance",
    "read_bitstrings",
]

DEFAULT_CAP = 10**6

edit_distance = kernels.edit_distance


class IllegalActionError(ValueError):
    pass


class EnumerationCapError(RuntimeError):
    """The instance is too large to enumerate under the configured cap."""


def _check_cap(count: int, cap: int, what: str) -> None:
    if count > cap:
        raise EnumerationCapError(f"{what}: {count} exceeds enumeration cap {cap}")


class Environment:
    n_actions: int
    n_parent_slots: int
    feature_dim: int
    max_length: int
    terminate_action: int | None = None

    def transition_energy(self, s, s2) -> float:
        if not self.is_edge(s, s2):
            raise IllegalActionError(f"{self.key(s)!r} -> {self.key(s2)!r} is not an edge")
        return self.state_energy(s2) - self.state_energy(s)

    def is_edge(self, s, s2) -> bool:
        if self.is_terminal(s):
            return False
        return any(self.apply(s, a) == s2 for a in self.legal_actions(s))

    def log_reward(self, x) -> float:
        if not self.is_terminal(x):
            raise ValueError(f"reward is defined on terminal states only, got {self.key(x)!r}")
        return -self.state_energy(x)

    def reward(self, x) -> float:
        return math.exp(self.log_reward(x))

    def action_mask(self, s) -> np.ndarray:
        mask = np.zeros(self.n_actions, dtype=bool)
        if not self.is_terminal(s):
            mask[self.legal_actions(s)] = True
        return mask

    def encode_batch(self, states: Sequence) -> np.ndarray:
        if not states:
            return np.zeros((0, self.feature_dim))
        return np.stack([self.encode(s) for s in states])

    def all_states(self, cap: int = DEFAULT_CAP) -> list[list]:
        """Reachable states grouped by depth (breadth-first, deduplicated)."""
        levels = [[self.initial_state()]]
        total = 1
        while True:
            nxt: dict = {}
            for s in levels[-1]:
                if self.is_terminal(s):
                    continue
                for a in self.legal_actions(s):
                    c = self.apply(s, a)
                    nxt.setdefault(c, None)
            if not nxt:
                return levels
            total += len(nxt)
            _check_cap(total, cap, "reachable states")
            levels.append(list(nxt))


# ---------------------------------------------------------------------------
# Set generation


@dataclass(frozen=True, slots=True)
class SetState:
    chosen: frozenset

    def __len__(self) -> int:
        return len(self.chosen)


class SetEnv(Environment):
    """Build a set of ``target_size`` elements out of ``universe_size``, one element per step.

    Each element carries a fixed energy; a state's energy is the reward exponent
    times the sum of its elements' energies.
    """

    def __init__(self, universe_size: int, target_size: int, energies: Sequence[float] | None = None,
                 seed: int = 0, reward_exponent: float = 1.0):
        if not 1 <= target_size <= universe_size:
            raise ValueError("need 1 <= target_size <= universe_size")
        if reward_exponent <= 0:
            raise ValueError("reward exponent must be positive")
        self.universe_size = int(universe_size)
        self.target_size = int(target_size)
        self.seed = int(seed)
        self.reward_exponent = float(reward_exponent)
        if energies is None:
            energies = self.sample_energies(universe_size, target_size, seed)
        energies = np.asarray(energies, dtype=np.float64)
        if energies.shape != (universe_size,):
            raise ValueError(f"expected {universe_size} element energies, got {energies.shape}")
        self.element_energies = energies
        self._scaled = self.reward_exponent * energies
        self.n_actions = self.universe_size
        self.n_parent_slots = self.universe_size
        self.feature_dim = self.universe_size + 1
        self.max_length = self.target_size

    @staticmethod
    def sample_energies(universe_size: int, target_size: int, seed: int) -> np.ndarray:
        """Uniform energies in [-1, 1]; the first ``target_size // 10`` elements share one value."""
        rng = np.random.default_rng(seed)
        e = rng.uniform(-1.0, 1.0, universe_size)
        group = target_size // 10
        if group > 1:
            e[:group] = e[0]
        return e

    def initial_state(self) -> SetState:
        return SetState(frozenset())

    def state_from(self, elements: Iterable[int]) -> SetState:
        chosen = frozenset(int(e) for e in elements)
        if len(chosen) > self.target_size or any(not 0 <= e < self.universe_size for e in chosen):
            raise ValueError(f"invalid set state {sorted(chosen)}")
        return SetState(chosen)

    def is_initial(self, s: SetState) -> bool:
        return not s.chosen

    def is_terminal(self, s: SetState) -> bool:
        return len(s.chosen) == self.target_size

    def size(self, s: SetState) -> int:
        return len(s.chosen)

    def legal_actions(self, s: SetState) -> list[int]:
        if self.is_terminal(s):
            raise IllegalActionError("no actions from a terminal state")
        return [e for e in range(self.universe_size) if e not in s.chosen]

    def action_mask(self, s: SetState) -> np.ndarray:
        mask = np.zeros(self.universe_size, dtype=bool)
        if not self.is_terminal(s):
            mask[:] = True
            mask[list(s.chosen)] = False
        return mask

    def apply(self, s: SetState, a: int) -> SetState:
        if self.is_terminal(s) or a in s.chosen or not 0 <= a < self.universe_size:
            raise IllegalActionError(f"element {a} cannot be added to {self.key(s)!r}")
        return SetState(s.chosen | {a})

    def is_edge(self, s: SetState, s2: SetState) -> bool:
        return len(s2.chosen) == len(s.chosen) + 1 and s.chosen < s2.chosen and not self.is_terminal(s)

    def parents(self, s: SetState) -> list[SetState]:
        if not s.chosen:
            raise ValueError("the initial state has no parents")
        return [SetState(s.chosen - {e}) for e in sorted(s.chosen)]

    def parent_mask(self, s: SetState) -> np.ndarray:
        mask = np.zeros(self.universe_size, dtype=bool)
        mask[list(s.chosen)] = True
        return mask

    def parent_slot(self, s: SetState, a: int) -> int:
        return int(a)

    def state_energy(self, s: SetState) -> float:
        return float(sum(self._scaled[e] for e in sorted(s.chosen)))

    def transition_energy(self, s: SetState, s2: SetState) -> float:
        if not self.is_edge(s, s2):
            raise IllegalActionError(f"{self.key(s)!r} -> {self.key(s2)!r} is not an edge")
        (added,) = s2.chosen - s.chosen
        return float(self._scaled[added])

    def encode(self, s: SetState) -> np.ndarray:
        v = np.zeros(self.feature_dim)
        v[list(s.chosen)] = 1.0
        v[-1] = len(s.chosen) / self.target_size
        return v

    def key(self, s: SetState) -> str:
        return ",".join(str(e) for e in sorted(s.chosen))

    def parse_key(self, key: str) -> SetState:
        key = key.strip()
        return self.state_from(int(t) for t in key.split(",")) if key else SetState(frozenset())

    def num_terminals(self) -> int:
        return math.comb(self.universe_size, self.target_size)

    def enumerate_terminals(self, cap: int = DEFAULT_CAP) -> list[SetState]:
        _check_cap(self.num_terminals(), cap, "terminal states")
        return [SetState(frozenset(c)) for c in combinations(range(self.universe_size), self.target_size)]

    def best_log_reward(self) -> float:
        """Largest log-reward over all terminals (sum of the smallest scaled energies)."""
        return -float(np.sort(self._scaled)[: self.target_size].sum())

    def describe(self) -> dict:
        return {"kind": "set", "universe_size": self.universe_size, "target_size": self.target_size,
                "seed": self.seed, "reward_exponent": self.reward_exponent}


def canonical_t1() -> SetEnv:
    """Three elements, sets of two, energies (0, ln 2, -ln 2): rewards 1/2, 2, 1."""
    return SetEnv(3, 2, energies=[0.0, math.log(2.0), -math.log(2.0)], reward_exponent=1.0)


# ---------------------------------------------------------------------------
# Bit sequences


@dataclass(frozen=True, slots=True)
class BitSeqState:
    words: tuple


def read_bitstrings(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh]
    out = [ln for ln in lines if ln and not ln.startswith("#")]
    bad = [ln for ln in out if set(ln) - {"0", "1"}]
    if bad:
        raise ValueError(f"{path}: not a bit string: {bad[0]!r}")
    return out


class BitSeqEnv(Environment):
    """Append ``k``-bit words until the sequence holds ``n`` bits.

    Energy of any state is the reward exponent times the smallest edit distance
    from its bits to a mode in ``M``; the empty initial state has energy 0.
    """

    def __init__(self, n: int, k: int = 4, modes: Sequence[str] | np.ndarray | None = None,
                 num_modes: int = 60, seed: int = 0, reward_exponent: float = 3.0):
        if n % k:
            raise ValueError(f"n={n} is not divisible by k={k}")
        if reward_exponent <= 0:
            raise ValueError("reward exponent must be positive")
        self.n, self.k = int(n), int(k)
        self.n_words = self.n // self.k
        self.seed = int(seed)
        self.reward_exponent = float(reward_exponent)
        if modes is None:
            modes = self.sample_modes(n, num_modes, seed)
        elif not isinstance(modes, np.ndarray):
            modes = np.array([[int(c) for c in m] for m in modes], dtype=np.uint8)
        modes = np.asarray(modes, dtype=np.uint8).reshape(len(modes), -1)
        if modes.shape[1] != n:
            raise ValueError(f"modes must have length {n}, got {modes.shape[1]}")
        self.modes = modes
        self.mode_keys = ["".join(map(str, m)) for m in modes.tolist()]
        self.n_actions = 2 ** self.k
        self.n_parent_slots = 1
        self.feature_dim = self.n_words * self.n_actions + 1
        self.max_length = self.n_words
        self._word_bits = np.array(
            [[(w >> (self.k - 1 - b)) & 1 for b in range(self.k)] for w in range(self.n_actions)],
            dtype=np.uint8)
        self._energy_cache: dict[tuple, float] = {}

    @staticmethod
    def sample_modes(n: int, count: int, seed: int) -> np.ndarray:
        """``count`` distinct uniformly random length-``n`` bit strings."""
        if count > 2 ** n:
            raise ValueError("more modes requested than distinct strings exist")
        rng = np.random.default_rng(seed)
        seen: dict[bytes, np.ndarray] = {}
        while len(seen) < count:
            m = rng.integers(0, 2, n, dtype=np.uint8)
            seen.setdefault(m.tobytes(), m)
        return np.stack(list(seen.values()))

    def initial_state(self) -> BitSeqState:
        return BitSeqState(())

    def is_initial(self, s: BitSeqState) -> bool:
        return not s.words

    def is_terminal(self, s: BitSeqState) -> bool:
        return len(s.words) == self.n_words

    def size(self, s: BitSeqState) -> int:
        return len(s.words)

    def legal_actions(self, s: BitSeqState) -> list[int]:
        if self.is_terminal(s):
            raise IllegalActionError("no actions from a terminal state")
        return list(range(self.n_actions))

    def action_mask(self, s: BitSeqState) -> np.ndarray:
        return np.full(self.n_actions, not self.is_terminal(s))

    def apply(self, s: BitSeqState, a: int) -> BitSeqState:
        if self.is_terminal(s) or not 0 <= a < self.n_actions:
            raise IllegalActionError(f"word {a} cannot be appended to {self.key(s)!r}")
        return BitSeqState(s.words + (int(a),))

    def is_edge(self, s: BitSeqState, s2: BitSeqState) -> bool:
        return len(s2.words) == len(s.words) + 1 and s2.words[:-1] == s.words and not self.is_terminal(s)

    def parents(self, s: BitSeqState) -> list[BitSeqState]:
        if not s.words:
            raise ValueError("the initial state has no parents")
        return [BitSeqState(s.words[:-1])]

    def parent_mask(self, s: BitSeqState) -> np.ndarray:
        return np.array([bool(s.words)])

    def parent_slot(self, s: BitSeqState, a: int) -> int:
        return 0

    def bits(self, s: BitSeqState) -> np.ndarray:
        if not s.words:
            return np.zeros(0, dtype=np.uint8)
        return self._word_bits[list(s.words)].reshape(-1)

    def state_energy(self, s: BitSeqState) -> float:
        if not s.words:
            return 0.0
        e = self._energy_cache.get(s.words)
        if e is None:
            e = self.reward_exponent * kernels.min_edit_distance(self.bits(s), self.modes)
            self._energy_cache[s.words] = e
        return e

    def encode(self, s: BitSeqState) -> np.ndarray:
        v = np.zeros(self.feature_dim)
        for i, w in enumerate(s.words):
            v[i * self.n_actions + w] = 1.0
        v[-1] = len(s.words) / self.n_words
        return v

    def encode_batch(self, states: Sequence[BitSeqState]) -> np.ndarray:
        out = np.zeros((len(states), self.feature_dim))
        for r, s in enumerate(states):
            for i, w in enumerate(s.words):
                out[r, i * self.n_actions + w] = 1.0
            out[r, -1] = len(s.words) / self.n_words
        return out

    def key(self, s: BitSeqState) -> str:
        return "".join(map(str, self.bits(s).tolist()))

    def parse_key(self, key: str) -> BitSeqState:
        key = key.strip()
        if len(key) % self.k or len(key) > self.n or set(key) - {"0", "1"}:
            raise ValueError(f"invalid bit state {key!r}")
        return BitSeqState(tuple(int(key[i:i + self.k], 2) for i in range(0, len(key), self.k)))

    def num_terminals(self) -> int:
        return 2 ** self.n

    def enumerate_terminals(self, cap: int = DEFAULT_CAP) -> list[BitSeqState]:
        _check_cap(self.num_terminals(), cap, "terminal states")
        return [BitSeqState(w) for w in product(range(self.n_actions), repeat=self.n_words)]

    # vectorised helpers over the prefix tree; level-l states are numbered by
    # their words read as a base-2^k integer (lexicographic order)

    def level_bits(self, level: int) -> np.ndarray:
        idx = np.arange(self.n_actions ** level)
        cols = [(idx // self.n_actions ** (level - 1 - i)) % self.n_actions for i in range(level)]
        if not cols:
            return np.zeros((1, 0), dtype=np.uint8)
        return np.concatenate([self._word_bits[c] for c in cols], axis=1)

    def level_energies(self, level: int, chunk: int = 1 << 16) -> np.ndarray:
        if level == 0:
            return np.zeros(1)
        bits = self.level_bits(level)
        out = np.empty(len(bits))
        for lo in range(0, len(bits), chunk):
            out[lo:lo + chunk] = kernels.min_edit_distance_batch(bits[lo:lo + chunk], self.modes)
        return self.reward_exponent * out

    def level_states(self, level: int) -> list[BitSeqState]:
        return [BitSeqState(w) for w in product(range(self.n_actions), repeat=level)]

    def describe(self) -> dict:
        return {"kind": "bits", "n": self.n, "k": self.k, "num_modes": len(self.modes),
                "seed": self.seed, "reward_exponent": self.reward_exponent}


# ---------------------------------------------------------------------------
# Small synthetic environments used by the diagnostics


@dataclass(frozen=True, slots=True)
class ChainState:
    position: int
    stopped: bool = False


class TerminatingChainEnv(Environment):
    """A chain 0 -> 1 -> ... -> L-1 where every position may also stop.

    Stopping at position ``i`` leads to a terminal copy of ``i`` whose reward
    is ``exp(-energies[i])``. Action 0 steps forward, action 1 terminates.
    """

    terminate_action = 1

    def __init__(self, energies: Sequence[float]):
        energies = [float(e) for e in energies]
        if not energies or energies[0] != 0.0:
            raise ValueError("the initial position must have energy 0")
        self.energies = energies
        self.length = len(energies)
        self.n_actions = 2
        self.n_parent_slots = 1
        self.feature_dim = 2 * self.length
        self.max_length = self.length

    def initial_state(self) -> ChainState:
        return ChainState(0)

    def is_initial(self, s: ChainState) -> bool:
        return s == ChainState(0)

    def is_terminal(self, s: ChainState) -> bool:
        return s.stopped

    def size(self, s: ChainState) -> int:
        return s.position + int(s.stopped)

    def legal_actions(self, s: ChainState) -> list[int]:
        if s.stopped:
            raise IllegalActionError("no actions from a terminal state")
        return [0, 1] if s.position < self.length - 1 else [1]

    def apply(self, s: ChainState, a: int) -> ChainState:
        if a not in self.legal_actions(s):
            raise IllegalActionError(f"action {a} is illegal at {self.key(s)!r}")
        return ChainState(s.position, True) if a == 1 else ChainState(s.position + 1)

    def parents(self, s: ChainState) -> list[ChainState]:
        if self.is_initial(s):
            raise ValueError("the initial state has no parents")
        return [ChainState(s.position)] if s.stopped else [ChainState(s.position - 1)]

    def parent_mask(self, s: ChainState) -> np.ndarray:
        return np.array([not self.is_initial(s)])

    def parent_slot(self, s: ChainState, a: int) -> int:
        return 0

    def state_energy(self, s: ChainState) -> float:
        return self.energies[s.position]

    def encode(self, s: ChainState) -> np.ndarray:
        v = np.zeros(self.feature_dim)
        v[s.position + self.length * int(s.stopped)] = 1.0
        return v

    def key(self, s: ChainState) -> str:
        return f"{'x' if s.stopped else 's'}{s.position}"

    def parse_key(self, key: str) -> ChainState:
        return ChainState(int(key[1:]), key[0] == "x")

    def num_terminals(self) -> int:
        return self.length

    def enumerate_terminals(self, cap: int = DEFAULT_CAP) -> list[ChainState]:
        _check_cap(self.length, cap, "terminal states")
        return [ChainState(i, True) for i in range(self.length)]

    def describe(self) -> dict:
        return {"kind": "chain", "energies": self.energies}


class TerminalOnlyEnergy(Environment):
    """View of ``base`` whose energy is zero on every nonterminal state."""

    def __init__(self, base: Environment):
        self.base = base
        for attr in ("n_actions", "n_parent_slots", "feature_dim", "max_length", "terminate_action"):
            if hasattr(base, attr):
                setattr(self, attr, getattr(base, attr))

    def __getattr__(self, name):
        return getattr(self.base, name)

    def state_energy(self, s) -> float:
        return self.base.state_energy(s) if self.base.is_terminal(s) else 0.0

    def transition_energy(self, s, s2) -> float:
        if not self.base.is_edge(s, s2):
            raise IllegalActionError("not an edge")
        return self.state_energy(s2) - self.state_energy(s)

    def log_reward(self, x) -> float:
        return self.base.log_reward(x)

    def action_mask(self, s):
        return self.base.action_mask(s)

    def encode_batch(self, states):
        return self.base.encode_batch(states)

    def all_states(self, cap: int = DEFAULT_CAP):
        return self.base.all_states(cap)

    def describe(self) -> dict:
        return {"kind": "terminal-only", "base": self.base.describe()}
