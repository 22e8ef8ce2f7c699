"""Trajectory sampling and the training loop.

Rollouts use the training policy ``eps * uniform + (1 - eps) * P_F`` (with
``P_F`` tempered before masking). Each rollout draws from its own random
stream, derived from the run seed, the step index and the rollout index, so
running the rollouts of a batch on a thread pool yields exactly the same
trajectories as running them one after another.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import Tensor, no_grad
from .config import RunConfig
from .evaluation import (
    ModeCriterion,
    ModeTracker,
    SampleLog,
    default_mode_threshold,
    exact_terminal_distribution,
    l1_distance,
    spearman_log,
    target_distribution,
    top_k_avg_reward,
)
from .envs import BitSeqEnv, EnumerationCapError, SetEnv
from .model import BackwardMode, GFNModel, policy_log_probs
from .nn import Adam
from .objectives import IncompleteTrajectoryError, Objective, batch_loss
from .trajectory import Trajectory

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["step", "transitions", "loss", "top_k_avg_reward", "modes", "l1_to_target",
                  "spearman"]


@dataclass(frozen=True)
class ExplorationConfig:
    epsilon: float = 0.05
    temperature: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message: str, diagnostic: str = ""):
        super().__init__(message)
        self.diagnostic = diagnostic
        self.result = None  # partial TrainingResult, attached by run_training


def rollout_rng(seed: int, step: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(step, index)))


def training_policy(model, states, exploration: ExplorationConfig) -> np.ndarray:
    """Rows of action probabilities of the exploratory training policy."""
    env = model.env
    p = np.exp(policy_log_probs(model, states, exploration.temperature))
    if exploration.epsilon == 0.0:
        return p
    mask = np.stack([env.action_mask(s) for s in states]).astype(np.float64)
    uniform = mask / mask.sum(axis=1, keepdims=True)
    return exploration.epsilon * uniform + (1.0 - exploration.epsilon) * p


def _choose(probs: np.ndarray, rng: np.random.Generator) -> int:
    cum = np.cumsum(probs)
    return int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))


def _rollout(model, env, exploration, rng, steps: int | None, record_energies: bool) -> Trajectory:
    s = env.initial_state()
    states, actions, energies = [s], [], []
    with no_grad():
        while not env.is_terminal(s) and (steps is None or len(actions) < steps):
            a = _choose(training_policy(model, [s], exploration)[0], rng)
            s2 = env.apply(s, a)
            if record_energies:
                energies.append(env.transition_energy(s, s2))
            states.append(s2)
            actions.append(a)
            s = s2
    complete = env.is_terminal(s)
    return Trajectory(states, actions, complete, energies if record_energies else None,
                      env.log_reward(s) if complete else None)


def sample_trajectory(model, env=None, exploration: ExplorationConfig = ExplorationConfig(),
                      rng: np.random.Generator | None = None,
                      record_energies: bool = True) -> Trajectory:
    """Complete rollout from the initial state to a terminal state."""
    env = env if env is not None else model.env
    rng = rng if rng is not None else np.random.default_rng()
    return _rollout(model, env, exploration, rng, None, record_energies)


def sample_partial_trajectory(model, env=None, exploration: ExplorationConfig = ExplorationConfig(),
                              rng: np.random.Generator | None = None,
                              record_energies: bool = True) -> Trajectory:
    """Rollout truncated after ``L ~ Uniform{1, ..., max_length - 1}`` steps."""
    env = env if env is not None else model.env
    rng = rng if rng is not None else np.random.default_rng()
    if env.max_length < 2:
        raise ValueError("partial trajectories need complete trajectories of length >= 2")
    length = int(rng.integers(1, env.max_length))
    traj = _rollout(model, env, exploration, rng, length, record_energies)
    if traj.complete:
        raise RuntimeError("a partial rollout reached a terminal state")
    return traj


def sample_batch(model, exploration: ExplorationConfig, seed: int, step: int, batch_size: int,
                 partial: bool = False, record_energies: bool = True,
                 executor: ThreadPoolExecutor | None = None) -> list[Trajectory]:
    sampler = sample_partial_trajectory if partial else sample_trajectory

    def one(i: int) -> Trajectory:
        return sampler(model, model.env, exploration, rollout_rng(seed, step, i), record_energies)

    if executor is None:
        return [one(i) for i in range(batch_size)]
    return list(executor.map(one, range(batch_size)))


def _diagnose(model, trajectories, objective: Objective) -> str:
    lines = [f"objective={objective.value} batch={len(trajectories)}"]
    env = model.env
    with no_grad():
        for n, traj in enumerate(trajectories):
            raw = model.predict_raw(traj.states)
            bad = ~np.isfinite(raw).all(axis=1)
            energies = traj.energies or []
            if bad.any() or not np.all(np.isfinite(energies)):
                t = int(np.argmax(bad)) if bad.any() else 0
                lines.append(f"trajectory {n}: state {t} key={env.key(traj.states[t])!r} "
                             f"head_finite={not bad[t]} energies={energies}")
    if len(lines) == 1:
        lines.append("all head outputs finite; residual overflow")
    return "\n".join(lines)


def train_step(model, optimizer: Adam, trajectories: list[Trajectory], objective: Objective,
               log_z: Tensor | None = None, lam: float = 0.9) -> float:
    """One optimiser step on the batch loss. Returns the loss before the step."""
    objective = Objective(objective)
    if objective.needs_complete and not all(t.complete for t in trajectories):
        raise IncompleteTrajectoryError("TB cannot train on incomplete trajectories")
    optimizer.zero_grad()
    loss = batch_loss(objective, model, trajectories, log_z=log_z, lam=lam)
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteLossError(f"non-finite loss {value}", _diagnose(model, trajectories, objective))
    if loss.requires_grad:
        loss.backward()
    optimizer.step()
    return value


# ---------------------------------------------------------------------------


def mode_criterion_for(cfg: RunConfig, env) -> ModeCriterion | None:
    ev = cfg.eval
    if isinstance(env, BitSeqEnv):
        return ModeCriterion(radius=ev.mode_radius, modes=tuple(env.mode_keys))
    if ev.mode_threshold is not None:
        return ModeCriterion(threshold=ev.mode_threshold)
    if ev.mode_gap is not None and isinstance(env, SetEnv):
        return ModeCriterion(threshold=math.exp(env.best_log_reward() - ev.mode_gap))
    try:
        return ModeCriterion(threshold=default_mode_threshold(env, ev.mode_quantile, cfg.env.enum_cap))
    except EnumerationCapError:
        return None


def _exact_enabled(cfg: RunConfig, env) -> bool:
    if cfg.eval.exact == "off":
        return False
    if cfg.eval.exact == "on":
        return True
    return env.num_terminals() <= 50_000


def _test_set(cfg: RunConfig, env) -> list:
    if cfg.eval.test_set:
        with open(cfg.eval.test_set, encoding="utf-8") as fh:
            return [env.parse_key(line) for line in fh if line.strip()]
    terminals = env.enumerate_terminals(cfg.env.enum_cap)
    if len(terminals) > cfg.eval.test_set_size:
        pick = np.random.default_rng(cfg.env.seed).choice(len(terminals), cfg.eval.test_set_size,
                                                           replace=False)
        terminals = [terminals[i] for i in sorted(pick)]
    return terminals


@dataclass
class TrainingResult:
    model: GFNModel
    log_z: Tensor | None
    rows: list[dict] = field(default_factory=list)
    samples: SampleLog = field(default_factory=SampleLog)
    steps: int = 0
    transitions: int = 0
    criterion: ModeCriterion | None = None
    timings: list[float] = field(default_factory=list)


def build_model(cfg: RunConfig, env) -> tuple[GFNModel, Tensor | None, Adam]:
    backward = BackwardMode.FIXED_UNIFORM if cfg.backward == "uniform" else BackwardMode.LEARNED
    model = GFNModel(env, hidden=cfg.hidden, layers=cfg.layers, flow_mode=cfg.objective.flow_mode,
                     backward_mode=backward, seed=cfg.seed)
    groups = [(model.parameters(), cfg.resolved_lr())]
    log_z = None
    if cfg.objective is Objective.TB:
        log_z = Tensor(np.array(cfg.init_log_z), requires_grad=True, name="log_z")
        groups.append(([log_z], cfg.resolved_log_z_lr()))
    return model, log_z, Adam(groups)


def run_training(cfg: RunConfig, on_row: Callable[[dict], None] | None = None,
                 stop: Callable[[TrainingResult], bool] | None = None,
                 env=None) -> TrainingResult:
    """Sample and train until the transition budget is spent.

    A metric row is emitted at the start, each time the transition count
    crosses a multiple of ``eval.snapshot_every``, and at the end. ``stop`` may
    end training early; it is checked after every snapshot.
    """
    cfg.validate()
    env = env if env is not None else cfg.env.build()
    model, log_z, optimizer = build_model(cfg, env)
    exploration = ExplorationConfig(cfg.resolved_epsilon(), cfg.temperature)
    result = TrainingResult(model, log_z)
    criterion = mode_criterion_for(cfg, env)
    result.criterion = criterion
    tracker = ModeTracker(criterion) if criterion is not None else None
    exact = _exact_enabled(cfg, env)
    target = test_set = None
    if exact:
        target = target_distribution(env, cfg.env.enum_cap)
        test_set = _test_set(cfg, env)
    record_energies = cfg.objective.forward_looking
    executor = ThreadPoolExecutor(cfg.workers) if cfg.concurrency == "threads" else None
    n_snap = 0
    last_loss: float | None = None
    t0 = time.perf_counter()

    def snapshot() -> None:
        nonlocal n_snap
        row = {"step": result.steps, "transitions": result.transitions, "loss": last_loss,
               "top_k_avg_reward": None, "modes": tracker.count if tracker else None,
               "l1_to_target": None, "spearman": None}
        if len(result.samples):
            row["top_k_avg_reward"] = top_k_avg_reward(result.samples, cfg.eval.top_k).mean
        if exact and n_snap % cfg.eval.exact_every == 0:
            row["l1_to_target"] = l1_distance(exact_terminal_distribution(model, env, cfg.env.enum_cap),
                                              target)
            row["spearman"] = spearman_log(model, env, test_set)
        n_snap += 1
        result.rows.append(row)
        result.timings.append(time.perf_counter() - t0)
        if on_row is not None:
            on_row(row)

    try:
        snapshot()
        next_snap = cfg.eval.snapshot_every
        while result.transitions < cfg.budget:
            batch = sample_batch(model, exploration, cfg.seed, result.steps, cfg.batch_size,
                                 partial=cfg.partial, record_energies=record_energies,
                                 executor=executor)
            last_loss = train_step(model, optimizer, batch, cfg.objective, log_z, cfg.subtb_lambda)
            result.steps += 1
            for traj in batch:
                result.transitions += len(traj)
                if traj.complete:
                    key = env.key(traj.states[-1])
                    result.samples.append(key, traj.log_reward, result.steps)
                    if tracker is not None:
                        tracker.update(key, traj.log_reward)
            if result.transitions >= next_snap:
                snapshot()
                while next_snap <= result.transitions:
                    next_snap += cfg.eval.snapshot_every
                if stop is not None and stop(result):
                    break
        if result.rows[-1]["step"] != result.steps:
            snapshot()
    except NonFiniteLossError as exc:
        exc.result = result
        raise
    finally:
        if executor is not None:
            executor.shutdown()
    return result
