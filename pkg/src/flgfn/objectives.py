"""Balance objectives: DB, TB, SubTB and their forward-looking variants.

Every loss is a mean of squared log-space residuals. Residual conventions,
with ``lf`` the clamped log-flow head of the model:

* DB:       ``lf(s) + log P_F(s'|s) - lf(s') - log P_B(s|s')``
* FL-DB:    the DB residual plus ``E(s -> s')`` (``lf`` is then ``log F~``)
* TB:       ``log Z + sum log P_F - log R(x) - sum log P_B``
* SubTB:    ``lf(s_i) - lf(s_j) + sum_{t=i}^{j-1} (log P_F - log P_B)`` over all ``i < j``
* FL-SubTB: the SubTB residual plus ``sum_{t=i}^{j-1} E(s_t -> s_{t+1})``

SubTB terms are weighted by ``lambda ** (j - i)`` and normalised per trajectory.
"""

from __future__ import annotations

import enum
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .autodiff import Tensor, concat, no_grad, stack
from .model import FlowMode, ModeError, head_tensors
from .trajectory import Trajectory, Transition

__all__ = [
    "IncompleteTrajectoryError",
    "MissingEnergyError",
    "Objective",
    "batch_loss",
    "db_loss",
    "db_residual",
    "fl_db_loss",
    "fl_db_residual",
    "fl_subtb_loss",
    "subtb_loss",
    "subtb_residuals",
    "tb_loss",
    "tb_residuals",
]


class Objective(str, enum.Enum):
    DB = "db"
    TB = "tb"
    SUBTB = "subtb"
    FL_DB = "fl_db"
    FL_SUBTB = "fl_subtb"

    @classmethod
    def parse(cls, name: str) -> "Objective":
        return cls(name.strip().lower().replace("-", "_"))

    @property
    def forward_looking(self) -> bool:
        return self in (Objective.FL_DB, Objective.FL_SUBTB)

    @property
    def flow_mode(self) -> FlowMode:
        return FlowMode.FORWARD_LOOKING if self.forward_looking else FlowMode.PLAIN

    @property
    def needs_complete(self) -> bool:
        return self is Objective.TB


class IncompleteTrajectoryError(ValueError):
    pass


class MissingEnergyError(ValueError):
    pass


def db_residual(log_flow_s, log_pf, log_flow_next, log_pb):
    return log_flow_s + log_pf - log_flow_next - log_pb


def fl_db_residual(log_flow_s, log_pf, log_flow_next, log_pb, energy):
    return log_flow_s + log_pf - log_flow_next - log_pb + energy


# ---------------------------------------------------------------------------


class _Flat(NamedTuple):
    states: list
    src: np.ndarray
    dst: np.ndarray
    actions: np.ndarray
    energies: np.ndarray | None
    # per trajectory: (first transition index, first state index, n transitions)
    spans: list[tuple[int, int, int]]


def _flatten(trajectories: Sequence[Trajectory], need_energies: bool) -> _Flat:
    states, src, dst, actions, energies, spans = [], [], [], [], [], []
    missing = False
    for traj in trajectories:
        base = len(states)
        spans.append((len(src), base, len(traj)))
        states.extend(traj.states)
        for t, a in enumerate(traj.actions):
            src.append(base + t)
            dst.append(base + t + 1)
            actions.append(a)
        if traj.energies is None:
            missing = True
        else:
            energies.extend(traj.energies)
    if need_energies and missing:
        raise MissingEnergyError("forward-looking objectives need transition energies")
    return _Flat(states, np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64),
                 np.array(actions, dtype=np.int64),
                 np.array(energies, dtype=np.float64) if not missing else None, spans)


def _flatten_transitions(transitions, need_energies: bool) -> _Flat:
    if isinstance(transitions, Transition):
        transitions = [transitions]
    states, energies = [], []
    for tr in transitions:
        states.extend((tr.source, tr.target))
        energies.append(tr.energy)
    n = len(transitions)
    if need_energies and any(e is None for e in energies):
        raise MissingEnergyError("transition energy is required for FL-DB")
    e = None if any(x is None for x in energies) else np.array(energies, dtype=np.float64)
    return _Flat(states, np.arange(0, 2 * n, 2), np.arange(1, 2 * n, 2),
                 np.array([tr.action for tr in transitions], dtype=np.int64), e,
                 [(i, 2 * i, 1) for i in range(n)])


def _require_mode(model, mode: FlowMode, what: str) -> None:
    if model.flow_mode is not mode:
        raise ModeError(f"{what} needs a {mode.value} flow model, got {model.flow_mode.value}")


def _edge_residuals(model, flat: _Flat, forward_looking: bool) -> Tensor:
    h = head_tensors(model, flat.states, flat.src, flat.dst, flat.actions)
    if forward_looking:
        return fl_db_residual(h.log_flow[flat.src], h.log_pf, h.log_flow[flat.dst], h.log_pb,
                              flat.energies)
    return db_residual(h.log_flow[flat.src], h.log_pf, h.log_flow[flat.dst], h.log_pb)


def db_loss(model, transitions: Transition | Sequence[Transition]) -> Tensor:
    """Mean squared DB residual over ``transitions`` (plain-flow models)."""
    _require_mode(model, FlowMode.PLAIN, "db_loss")
    return _edge_residuals(model, _flatten_transitions(transitions, False), False).square().mean()


def fl_db_loss(model, transitions: Transition | Sequence[Transition]) -> Tensor:
    """Mean squared FL-DB residual; each transition must carry its energy."""
    _require_mode(model, FlowMode.FORWARD_LOOKING, "fl_db_loss")
    return _edge_residuals(model, _flatten_transitions(transitions, True), True).square().mean()


def edge_residuals(model, transitions) -> np.ndarray:
    """DB or FL-DB residual per transition, by the model's flow mode (no graph)."""
    fl = model.flow_mode is FlowMode.FORWARD_LOOKING
    with no_grad():
        return _edge_residuals(model, _flatten_transitions(transitions, fl), fl).data.copy()


# ---------------------------------------------------------------------------


def _check_complete(trajectories: Sequence[Trajectory]) -> None:
    for traj in trajectories:
        if not traj.complete:
            raise IncompleteTrajectoryError("trajectory balance needs complete trajectories")


def tb_residuals(model, log_z: Tensor, trajectories: Trajectory | Sequence[Trajectory]) -> Tensor:
    if isinstance(trajectories, Trajectory):
        trajectories = [trajectories]
    _check_complete(trajectories)
    env = model.env
    flat = _flatten(trajectories, False)
    h = head_tensors(model, flat.states, flat.src, flat.dst, flat.actions)
    seg = np.zeros((len(trajectories), len(flat.src)))
    for i, (t0, _, n) in enumerate(flat.spans):
        seg[i, t0:t0 + n] = 1.0
    log_r = np.array([env.log_reward(traj.states[-1]) for traj in trajectories])
    return log_z + Tensor(seg) @ (h.log_pf - h.log_pb) - log_r


def tb_loss(model, log_z: Tensor, trajectories: Trajectory | Sequence[Trajectory]) -> Tensor:
    """Mean squared TB residual over complete trajectories."""
    return tb_residuals(model, log_z, trajectories).square().mean()


# ---------------------------------------------------------------------------


def _pairs(n: int, lengths: Iterable[int] | None) -> tuple[np.ndarray, np.ndarray]:
    allowed = None if lengths is None else set(int(x) for x in lengths)
    ii, jj = [], []
    for i in range(n):
        for j in range(i + 1, n + 1):
            if allowed is None or (j - i) in allowed:
                ii.append(i)
                jj.append(j)
    return np.array(ii, dtype=np.int64), np.array(jj, dtype=np.int64)


def _subtb_terms(model, trajectories: Sequence[Trajectory], forward_looking: bool,
                 lengths: Iterable[int] | None):
    """Yield ``(i, j, residual tensor)`` per trajectory."""
    flat = _flatten(trajectories, forward_looking)
    h = head_tensors(model, flat.states, flat.src, flat.dst, flat.actions)
    step = h.log_pf - h.log_pb
    if forward_looking:
        step = step + flat.energies
    out = []
    for t0, s0, n in flat.spans:
        if n == 0:
            continue
        ii, jj = _pairs(n, lengths)
        if not len(ii):
            continue
        cum = concat([Tensor(np.zeros(1)), step[t0:t0 + n].cumsum()])
        lf = h.log_flow[s0:s0 + n + 1]
        out.append((ii, jj, lf[ii] - lf[jj] + cum[jj] - cum[ii]))
    return out


def subtb_residuals(model, trajectory: Trajectory, lengths: Iterable[int] | None = None):
    """``(i, j, residual)`` arrays for every subtrajectory ``s_i -> s_j`` (no graph)."""
    fl = model.flow_mode is FlowMode.FORWARD_LOOKING
    with no_grad():
        terms = _subtb_terms(model, [trajectory], fl, lengths)
    if not terms:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0)
    ii, jj, r = terms[0]
    return ii, jj, r.data.copy()


def _subtb_loss(model, trajectories, lam: float, lengths, forward_looking: bool) -> Tensor:
    if not 0.0 < lam <= 1.0:
        raise ValueError("subtrajectory weight lambda must lie in (0, 1]")
    if isinstance(trajectories, Trajectory):
        trajectories = [trajectories]
    per_traj = []
    for ii, jj, r in _subtb_terms(model, trajectories, forward_looking, lengths):
        w = lam ** (jj - ii).astype(np.float64)
        per_traj.append((r.square() * (w / w.sum())).sum())
    if not per_traj:
        return Tensor(0.0)
    return stack(per_traj).mean()


def subtb_loss(model, trajectories, lam: float = 0.9, lengths: Iterable[int] | None = None) -> Tensor:
    """Lambda-weighted SubTB loss averaged over trajectories (plain-flow models).

    ``lengths`` restricts the subtrajectories used (e.g. ``{1}`` gives mean DB).
    """
    _require_mode(model, FlowMode.PLAIN, "subtb_loss")
    return _subtb_loss(model, trajectories, lam, lengths, False)


def fl_subtb_loss(model, trajectories, lam: float = 0.9,
                  lengths: Iterable[int] | None = None) -> Tensor:
    _require_mode(model, FlowMode.FORWARD_LOOKING, "fl_subtb_loss")
    return _subtb_loss(model, trajectories, lam, lengths, True)


# ---------------------------------------------------------------------------


def batch_loss(objective: Objective, model, trajectories: Sequence[Trajectory],
               log_z: Tensor | None = None, lam: float = 0.9) -> Tensor:
    """Loss of one training batch.

    DB and FL-DB average over every transition of the batch; SubTB variants
    and TB average per trajectory.
    """
    objective = Objective(objective)
    if objective is Objective.TB:
        if log_z is None:
            raise ValueError("TB needs a log_Z parameter")
        return tb_loss(model, log_z, trajectories)
    if objective in (Objective.DB, Objective.FL_DB):
        fl = objective is Objective.FL_DB
        _require_mode(model, objective.flow_mode, objective.value)
        flat = _flatten(trajectories, fl)
        if not len(flat.src):
            return Tensor(0.0)
        return _edge_residuals(model, flat, fl).square().mean()
    if objective is Objective.SUBTB:
        return subtb_loss(model, trajectories, lam)
    return fl_subtb_loss(model, trajectories, lam)
