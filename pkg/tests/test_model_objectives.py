import math

import numpy as np
import pytest

from flgfn.autodiff import Tensor
from flgfn.envs import SetEnv, TerminalOnlyEnergy, TerminatingChainEnv, canonical_t1
from flgfn.evaluation import flow_oracle
from flgfn.model import (
    BackwardMode,
    FlowMode,
    GFNModel,
    ModeError,
    TabularModel,
    forward_log_probs,
    heads,
    reparam_flow,
    terminating_parameterization_residual,
)
from flgfn.nn import Adam
from flgfn.objectives import (
    IncompleteTrajectoryError,
    MissingEnergyError,
    Objective,
    batch_loss,
    db_loss,
    edge_residuals,
    fl_db_loss,
    fl_subtb_loss,
    subtb_loss,
    subtb_residuals,
    tb_loss,
    tb_residuals,
)
from flgfn.trajectory import Trajectory, Transition, trajectory_from_actions
from builders import all_edges, exact_model, loss_gradient_error, random_trajectory

FL = FlowMode.FORWARD_LOOKING


def transitions_of(env, edges):
    return [Transition(s, a, s2, env.transition_energy(s, s2)) for s, a, s2 in edges]


# -- heads ------------------------------------------------------------------------


def test_terminal_clamps():
    env = SetEnv(3, 2, energies=[0.3, 0.4, -1.0])
    x = env.state_from([0, 1])
    assert heads(GFNModel(env, hidden=8, flow_mode=FL, seed=3), x).log_flow == 0.0
    assert heads(GFNModel(env, hidden=8, seed=3), x).log_flow == pytest.approx(-0.7)
    with pytest.raises(ValueError):
        forward_log_probs(GFNModel(env, hidden=8), x)


def test_fixed_uniform_backward():
    env = SetEnv(3, 2, energies=[0, 0, 0])
    m = GFNModel(env, hidden=8, backward_mode=BackwardMode.FIXED_UNIFORM)
    h = heads(m, env.state_from([0, 1]))
    assert np.allclose(h.log_pb[[0, 1]], np.log([0.5, 0.5])) and h.log_pb[2] == -np.inf
    assert heads(m, env.initial_state()).log_pb is None


def test_policy_heads_normalised():
    env = SetEnv(5, 3, seed=0)
    m = GFNModel(env, hidden=16, seed=1)
    h = heads(m, env.state_from([1, 3]))
    assert np.exp(h.log_pf).sum() == pytest.approx(1.0, abs=1e-12)
    assert np.exp(h.log_pb).sum() == pytest.approx(1.0, abs=1e-12)
    assert h.log_pf[1] == -np.inf and h.log_pf[3] == -np.inf


# -- DB ---------------------------------------------------------------------------


def test_db_single_edge_chain():
    env = TerminatingChainEnv([0.0])
    s0 = env.initial_state()
    x = env.apply(s0, 1)
    model = TabularModel(env, [s0, x])
    model.set_state(s0, flow=env.log_reward(x))
    assert db_loss(model, Transition(s0, 1, x)).item() == 0.0


def test_db_exact_on_t1_and_quadratic_perturbation():
    env = canonical_t1()
    model = exact_model(env)
    states = [s for lvl in env.all_states() for s in lvl]
    edges = transitions_of(env, all_edges(env, states))
    for tr in edges:
        assert db_loss(model, tr).item() < 1e-18
    a = env.state_from([0])
    model.table.data[model.index[env.key(a)], -1] += 0.3
    tr = next(t for t in edges if t.source == a)
    assert db_loss(model, tr).item() == pytest.approx(0.09, rel=1e-9)


def test_db_refuses_forward_looking_model():
    env = canonical_t1()
    with pytest.raises(ModeError):
        db_loss(GFNModel(env, hidden=4, flow_mode=FL), Transition(env.initial_state(), 0,
                                                                   env.state_from([0])))
    with pytest.raises(ModeError):
        fl_db_loss(GFNModel(env, hidden=4), Transition(env.initial_state(), 0,
                                                       env.state_from([0]), 0.0))


# -- TB ---------------------------------------------------------------------------


def test_tb_single_trajectory_env():
    env = SetEnv(1, 1, energies=[0.4])
    s0, x = env.initial_state(), env.state_from([0])
    model = TabularModel(env, [s0, x])
    traj = trajectory_from_actions(env, [0])
    log_z = Tensor(np.array(env.log_reward(x)))
    assert tb_loss(model, log_z, traj).item() == 0.0


def test_tb_exact_on_t1():
    env = canonical_t1()
    model = exact_model(env)
    log_z = Tensor(np.array(math.log(3.5)))
    for a, b in [(0, 1), (1, 0), (0, 2), (2, 0), (1, 2), (2, 1)]:
        traj = trajectory_from_actions(env, [a, b])
        assert tb_loss(model, log_z, traj).item() < 1e-18


def test_tb_reward_shift_and_incomplete_error():
    rng = np.random.default_rng(0)
    env = SetEnv(4, 2, energies=[0.1, 0.2, 0.3, 0.4])
    doubled = SetEnv(4, 2, energies=env.element_energies - math.log(2) / 2)
    model = GFNModel(env, hidden=8, seed=2)
    other = GFNModel(doubled, hidden=8, seed=2)
    traj = random_trajectory(env, rng)
    log_z = Tensor(np.array(0.3))
    r1 = tb_residuals(model, log_z, traj).data[0]
    r2 = tb_residuals(other, log_z, Trajectory(traj.states, traj.actions, True)).data[0]
    assert r2 - r1 == pytest.approx(-math.log(2), abs=1e-12)
    partial = Trajectory(traj.states[:2], traj.actions[:1], False)
    with pytest.raises(IncompleteTrajectoryError):
        tb_loss(model, log_z, partial)


# -- SubTB ------------------------------------------------------------------------


def test_subtb_specialises_to_db_and_tb():
    rng = np.random.default_rng(1)
    env = SetEnv(6, 4, seed=3)
    model = GFNModel(env, hidden=16, seed=4)
    traj = random_trajectory(env, rng, with_energies=False)
    ones = subtb_loss(model, traj, lengths={1}).item()
    mean_db = db_loss(model, traj.transitions).item()
    assert ones == pytest.approx(mean_db, abs=1e-12)
    ii, jj, r = subtb_residuals(model, traj)
    full = r[(ii == 0) & (jj == len(traj))][0]
    log_f0 = Tensor(np.array(heads(model, env.initial_state()).log_flow))
    assert full == pytest.approx(tb_residuals(model, log_f0, traj).data[0], abs=1e-12)
    assert len(r) == len(traj) * (len(traj) + 1) // 2


def test_subtb_exact_solution_on_t1():
    env = canonical_t1()
    for mode, fn in ((FlowMode.PLAIN, subtb_residuals), (FL, subtb_residuals)):
        model = exact_model(env, mode)
        for acts in ([0, 1], [2, 0], [1, 2]):
            _, _, r = fn(model, trajectory_from_actions(env, acts))
            assert np.all(r ** 2 < 1e-18)


def test_subtb_lambda_weighting():
    rng = np.random.default_rng(2)
    env = SetEnv(5, 3, seed=1)
    model = GFNModel(env, hidden=8, seed=0)
    traj = random_trajectory(env, rng, with_energies=False)
    ii, jj, r = subtb_residuals(model, traj)
    w = 0.5 ** (jj - ii)
    assert subtb_loss(model, traj, lam=0.5).item() == pytest.approx((w * r ** 2).sum() / w.sum())
    with pytest.raises(ValueError):
        subtb_loss(model, traj, lam=0.0)


def test_fl_subtb_specialises_to_fl_db_and_telescopes():
    rng = np.random.default_rng(3)
    env = SetEnv(6, 4, seed=2)
    model = GFNModel(env, hidden=16, flow_mode=FL, seed=5)
    traj = random_trajectory(env, rng)
    assert fl_subtb_loss(model, traj, lengths={1}).item() == pytest.approx(
        fl_db_loss(model, traj.transitions).item(), abs=1e-12)
    e = np.concatenate([[0.0], np.cumsum(traj.energies)])
    for i in range(len(traj)):
        for j in range(i + 1, len(traj) + 1):
            assert e[j] - e[i] == pytest.approx(
                env.state_energy(traj.states[j]) - env.state_energy(traj.states[i]), abs=1e-12)
    with pytest.raises(MissingEnergyError):
        fl_subtb_loss(model, Trajectory(traj.states, traj.actions, True))


# -- FL-DB ------------------------------------------------------------------------


def test_fl_db_single_edge_closed_form():
    env = SetEnv(1, 1, energies=[1.0])
    s0, x = env.initial_state(), env.state_from([0])
    model = TabularModel(env, [s0, x], FL)
    model.set_state(s0, flow=-1.0)
    tr = Transition(s0, 0, x, env.transition_energy(s0, x))
    assert fl_db_loss(model, tr).item() == 0.0
    with pytest.raises(MissingEnergyError):
        fl_db_loss(model, Transition(s0, 0, x))


@pytest.mark.parametrize("env", [canonical_t1(), SetEnv(5, 3, seed=4)])
def test_reduction_from_db_solution(env):
    model = exact_model(env, FL)
    states = [s for lvl in env.all_states() for s in lvl]
    res = edge_residuals(model, transitions_of(env, all_edges(env, states)))
    assert np.max(np.abs(res)) < 1e-12


def test_zero_energy_equivalence_random_parameters():
    base = SetEnv(5, 3, seed=6)
    env = TerminalOnlyEnergy(base)
    rng = np.random.default_rng(0)
    for seed in range(10):
        plain = GFNModel(env, hidden=8, seed=seed)
        fl = GFNModel(env, hidden=8, flow_mode=FL, seed=seed)
        traj = random_trajectory(env, rng)
        d = edge_residuals(plain, traj.transitions) ** 2 - edge_residuals(fl, traj.transitions) ** 2
        assert np.max(np.abs(d)) < 1e-10


def test_reparam_flow():
    env = canonical_t1()
    model = GFNModel(env, hidden=8, flow_mode=FL, seed=0)
    x = env.state_from([0, 2])
    assert reparam_flow(model, x) == pytest.approx(env.log_reward(x))
    s0 = env.initial_state()
    assert reparam_flow(model, s0) == heads(model, s0).log_flow
    with pytest.raises(ModeError):
        reparam_flow(GFNModel(env, hidden=8), s0)


def test_reparam_round_trip_after_training():
    env = canonical_t1()
    states = [s for lvl in env.all_states() for s in lvl]
    model = TabularModel(env, states, FL, BackwardMode.FIXED_UNIFORM)
    edges = transitions_of(env, all_edges(env, states))
    opt = Adam([([model.table], 0.05)])
    for step in range(6000):
        if step == 3000:
            opt.groups[0] = (opt.groups[0][0], 0.005)
        opt.zero_grad()
        loss = fl_db_loss(model, edges)
        loss.backward()
        opt.step()
    assert fl_db_loss(model, edges).item() < 1e-20
    oracle = flow_oracle(env)
    for s in states:
        assert abs(reparam_flow(model, s) - oracle.log_flow[env.key(s)]) < 1e-9


def test_terminating_identity_on_exact_chain():
    env = TerminatingChainEnv([0.0, 0.7, -0.4])
    for mode in (FlowMode.PLAIN, FL):
        model = exact_model(env, mode)
        for i in range(3):
            assert terminating_parameterization_residual(model, env.parse_key(f"s{i}")) < 1e-9
    random = GFNModel(env, hidden=8, flow_mode=FL, seed=1)
    assert np.isfinite(terminating_parameterization_residual(random, env.initial_state()))
    with pytest.raises(ValueError):
        terminating_parameterization_residual(random, env.parse_key("x1"))
    with pytest.raises(ValueError):
        terminating_parameterization_residual(GFNModel(canonical_t1(), hidden=4),
                                              canonical_t1().initial_state())


def test_terminating_identity_with_zero_energy_is_plain_flow():
    env = TerminatingChainEnv([0.0, 0.0])
    model = GFNModel(env, hidden=8, seed=2)
    s = env.parse_key("s1")
    h = heads(model, s)
    assert terminating_parameterization_residual(model, s) == pytest.approx(
        abs(h.log_flow + h.log_pf[env.terminate_action]), abs=1e-15)


# -- batch aggregation and gradients ---------------------------------------------------


def test_losses_nonnegative_and_batch_aggregation():
    rng = np.random.default_rng(7)
    env = SetEnv(5, 3, seed=2)
    trajs = [random_trajectory(env, rng) for _ in range(4)]
    for obj in Objective:
        model = GFNModel(env, hidden=8, flow_mode=obj.flow_mode, seed=3)
        log_z = Tensor(np.array(0.5))
        assert batch_loss(obj, model, trajs, log_z).item() >= 0
    model = GFNModel(env, hidden=8, flow_mode=FL, seed=3)
    per = [fl_db_loss(model, t.transitions).item() for t in trajs]
    assert batch_loss(Objective.FL_DB, model, trajs).item() == pytest.approx(np.mean(per), abs=1e-12)
    per = [fl_subtb_loss(model, t).item() for t in trajs]
    assert batch_loss(Objective.FL_SUBTB, model, trajs).item() == pytest.approx(np.mean(per),
                                                                                 abs=1e-12)


@pytest.mark.parametrize("obj", list(Objective))
def test_loss_gradients_match_finite_differences(obj):
    for seed in range(5):
        assert loss_gradient_error(obj, seed, learned_pb=seed % 2 == 0) < 1e-4
