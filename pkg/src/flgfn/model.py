"""GFlowNet parameterisations.

A model maps a batch of states to one row of raw outputs laid out as
``[forward logits (n_actions) | backward logits (n_parent_slots) | flow head]``.
:func:`head_tensors` turns raw rows into masked log-probabilities and the
clamped log-flow used by every objective.

``flow_mode`` decides what the flow head means:

* ``PLAIN``: the head is ``log F(s)``; terminal flows are clamped to ``log R(x)``.
* ``FORWARD_LOOKING``: the head is ``log F~(s) = E(s) + log F(s)``; terminal
  flows are clamped to 0, and ``log F(s)`` is recovered as ``head - E(s)``.
"""

from __future__ import annotations

import enum
from typing import NamedTuple, Sequence

import numpy as np

from .autodiff import Tensor, masked_log_softmax
from .envs import Environment
from .nn import Mlp


class FlowMode(str, enum.Enum):
    PLAIN = "plain"
    FORWARD_LOOKING = "forward_looking"


class BackwardMode(str, enum.Enum):
    LEARNED = "learned"
    FIXED_UNIFORM = "uniform"


class ModeError(ValueError):
    """An operation was requested in the wrong flow mode."""


class GFNModel:
    """Shared MLP trunk over ``env.encode(s)`` with forward, backward and flow heads."""

    def __init__(self, env: Environment, hidden: int = 256, layers: int = 2,
                 flow_mode: FlowMode | str = FlowMode.PLAIN,
                 backward_mode: BackwardMode | str = BackwardMode.LEARNED, seed: int = 0):
        self.env = env
        self.flow_mode = FlowMode(flow_mode)
        self.backward_mode = BackwardMode(backward_mode)
        self.out_dim = env.n_actions + env.n_parent_slots + 1
        sizes = [env.feature_dim] + [hidden] * layers + [self.out_dim]
        self.net = Mlp(sizes, rng=np.random.default_rng(seed))

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()

    def raw_outputs(self, states: Sequence) -> Tensor:
        return self.net(Tensor(self.env.encode_batch(states)))

    def predict_raw(self, states: Sequence) -> np.ndarray:
        return self.net.predict(self.env.encode_batch(states))

    def state_arrays(self) -> dict[str, np.ndarray]:
        return self.net.state_arrays()

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.net.load_arrays(arrays)


class TabularModel:
    """One free parameter row per enumerated state; same interface as :class:`GFNModel`.

    Used for oracle-constructed solutions and exact diagnostics on tiny DAGs.
    """

    def __init__(self, env: Environment, states: Sequence,
                 flow_mode: FlowMode | str = FlowMode.PLAIN,
                 backward_mode: BackwardMode | str = BackwardMode.LEARNED,
                 table: np.ndarray | None = None):
        self.env = env
        self.flow_mode = FlowMode(flow_mode)
        self.backward_mode = BackwardMode(backward_mode)
        self.out_dim = env.n_actions + env.n_parent_slots + 1
        self.index = {env.key(s): i for i, s in enumerate(states)}
        if table is None:
            table = np.zeros((len(states), self.out_dim))
        self.table = Tensor(np.asarray(table, dtype=np.float64), requires_grad=True, name="table")

    def _rows(self, states: Sequence) -> np.ndarray:
        try:
            return np.array([self.index[self.env.key(s)] for s in states], dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"state {exc.args[0]!r} is not in the table") from None

    def parameters(self) -> list[Tensor]:
        return [self.table]

    def raw_outputs(self, states: Sequence) -> Tensor:
        return self.table[self._rows(states)]

    def predict_raw(self, states: Sequence) -> np.ndarray:
        return self.table.data[self._rows(states)]

    def set_state(self, s, log_pf=None, log_pb=None, flow=None) -> None:
        """Write per-state head values; log-probabilities become logits directly."""
        env = self.env
        row = self.table.data[self.index[env.key(s)]]
        if log_pf is not None:
            row[: env.n_actions] = np.where(np.isfinite(log_pf), log_pf, 0.0)
        if log_pb is not None:
            row[env.n_actions: env.n_actions + env.n_parent_slots] = np.where(
                np.isfinite(log_pb), log_pb, 0.0)
        if flow is not None:
            row[-1] = flow

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {"table": self.table.data.copy()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.table.data = np.asarray(arrays["table"], dtype=np.float64).copy()


# ---------------------------------------------------------------------------


def terminal_log_flow(model, s) -> float:
    """Clamped log-flow of a terminal state for the model's flow mode."""
    if model.flow_mode is FlowMode.FORWARD_LOOKING:
        return 0.0
    return model.env.log_reward(s)


def policy_log_probs(model, states: Sequence, temperature: float = 1.0) -> np.ndarray:
    """Forward log-probabilities (rows over all actions, ``-inf`` when illegal)."""
    env = model.env
    if not states:
        return np.zeros((0, env.n_actions))
    raw = model.predict_raw(states)[:, : env.n_actions] / temperature
    mask = np.stack([env.action_mask(s) for s in states])
    return masked_log_softmax(raw, mask).data


def _flow_values(model, states: Sequence, flow_head):
    env = model.env
    terminal = np.array([env.is_terminal(s) for s in states], dtype=bool)
    clamp = np.zeros(len(states))
    if terminal.any() and model.flow_mode is FlowMode.PLAIN:
        clamp[terminal] = [env.log_reward(s) for s, t in zip(states, terminal) if t]
    return flow_head.masked_fill(terminal, clamp) if isinstance(flow_head, Tensor) else np.where(
        terminal, clamp, flow_head)


class Heads(NamedTuple):
    log_pf: np.ndarray | None
    log_pb: np.ndarray | None
    log_flow: float


def heads(model, s) -> Heads:
    """Head values at one state.

    ``log_pf`` covers all actions (``-inf`` when illegal) and is ``None`` at
    terminal states; ``log_pb`` covers all parent slots and is ``None`` at the
    initial state. ``log_flow`` honours the terminal clamp.
    """
    env = model.env
    raw = model.predict_raw([s])[0]
    a, p = env.n_actions, env.n_parent_slots
    log_pf = None
    if not env.is_terminal(s):
        log_pf = masked_log_softmax(raw[:a], env.action_mask(s)).data
    log_pb = None
    if not env.is_initial(s):
        pmask = env.parent_mask(s)
        if model.backward_mode is BackwardMode.FIXED_UNIFORM:
            log_pb = np.where(pmask, -np.log(pmask.sum()), -np.inf)
        else:
            log_pb = masked_log_softmax(raw[a: a + p], pmask).data
    flow = terminal_log_flow(model, s) if env.is_terminal(s) else float(raw[-1])
    return Heads(log_pf, log_pb, flow)


def forward_log_probs(model, s) -> np.ndarray:
    if model.env.is_terminal(s):
        raise ValueError("no forward policy at a terminal state")
    return heads(model, s).log_pf


def reparam_flow(model, s) -> float:
    """``log F(s)`` recovered from a forward-looking flow head: ``log F~(s) - E(s)``."""
    if model.flow_mode is not FlowMode.FORWARD_LOOKING:
        raise ModeError("reparam_flow needs a forward-looking model")
    return heads(model, s).log_flow - model.env.state_energy(s)


def terminating_parameterization_residual(model, s) -> float:
    """``|log F~(s) + log P_F(stop | s)|`` for environments with an explicit stop action.

    When the balance constraints hold, stopping at ``s`` carries flow
    ``exp(-E(s))`` and the residual vanishes. For a plain-flow model the
    forward-looking flow is taken as ``log F(s) + E(s)``.
    """
    env = model.env
    stop = getattr(env, "terminate_action", None)
    if stop is None:
        raise ValueError("environment has no terminate action")
    h = heads(model, s)
    if h.log_pf is None:
        raise ValueError("no forward policy at a terminal state")
    fl = h.log_flow
    if model.flow_mode is FlowMode.PLAIN:
        fl = fl + env.state_energy(s)
    return abs(fl + h.log_pf[stop])


class BatchHeads(NamedTuple):
    log_pf: Tensor       # per transition
    log_pb: Tensor       # per transition
    log_flow: Tensor     # per state (clamped)


def head_tensors(model, states: Sequence, src: np.ndarray, dst: np.ndarray,
                 actions: np.ndarray) -> BatchHeads:
    """Differentiable head values for transitions ``states[src] -> states[dst]`` via ``actions``."""
    env = model.env
    a, p = env.n_actions, env.n_parent_slots
    raw = model.raw_outputs(states)
    n_tr = len(src)
    log_pf = log_pb = Tensor(np.zeros(0))
    if n_tr:
        fmask = np.stack([env.action_mask(states[i]) for i in src])
        lpf = masked_log_softmax(raw[src, :a], fmask)
        log_pf = lpf[np.arange(n_tr), actions]
        slots = np.array([env.parent_slot(states[i], int(u)) for i, u in zip(src, actions)],
                         dtype=np.int64)
        pmask = np.stack([env.parent_mask(states[j]) for j in dst])
        if model.backward_mode is BackwardMode.FIXED_UNIFORM:
            log_pb = Tensor(-np.log(pmask.sum(axis=1).astype(np.float64)))
        else:
            lpb = masked_log_softmax(raw[dst, a: a + p], pmask)
            log_pb = lpb[np.arange(n_tr), slots]
    log_flow = _flow_values(model, states, raw[:, a + p])
    return BatchHeads(log_pf, log_pb, log_flow)
