"""Trajectory containers shared by the sampler and the objectives."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, NamedTuple


class Transition(NamedTuple):
    source: Any
    action: int
    target: Any
    energy: float | None = None  # E(source -> target); None when not measured


@dataclass
class Trajectory:
    """States ``s_0 .. s_n`` with the ``n`` actions between them.

    ``energies[t]`` is the transition energy of step ``t`` (``None`` when the
    sampler did not measure energies). ``log_reward`` is set only for complete
    trajectories.
    """

    states: list
    actions: list[int]
    complete: bool
    energies: list[float] | None = None
    log_reward: float | None = None

    def __post_init__(self):
        if len(self.states) != len(self.actions) + 1:
            raise ValueError("a trajectory needs exactly one more state than actions")
        if self.energies is not None and len(self.energies) != len(self.actions):
            raise ValueError("one transition energy per action expected")

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def transitions(self) -> list[Transition]:
        e = self.energies if self.energies is not None else [None] * len(self.actions)
        return [Transition(self.states[t], self.actions[t], self.states[t + 1], e[t])
                for t in range(len(self.actions))]


def trajectory_from_actions(env, actions, with_energies: bool = True) -> Trajectory:
    """Roll ``actions`` forward from the initial state."""
    s = env.initial_state()
    states = [s]
    energies = []
    for a in actions:
        s2 = env.apply(s, a)
        if with_energies:
            energies.append(env.transition_energy(s, s2))
        states.append(s2)
        s = s2
    complete = env.is_terminal(s)
    return Trajectory(states, list(actions), complete, energies if with_energies else None,
                      env.log_reward(s) if complete else None)
