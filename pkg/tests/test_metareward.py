import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from practicematch.diffmath import (Head, ImmutableParamsError, LayoutMismatchError, NetworkSpec, OptimizerState,
                                    ParamVector, grad_log_prob, init_network)
from practicematch.envs import Corridor, Mode
from practicematch.gradcheck import (central_difference, chain_meta_gradient, check_jacobian_contraction,
                                     check_meta_gradient, random_meta_instance, relative_error)
from practicematch.learner import (AgentOptimizers, AgentParams, HyperParams, Trajectory,
                                   collect_trajectory, compute_returns, practice_update, surrogate)
from practicematch.metareward import (ReplayBuffer, eta_chain_grad, fd_meta_oracle, importance_ratios,
                                      match_eval_grad_next, match_eval_grad_prev, materialized_jacobian,
                                      meta_update, replay_match_grad, replay_meta_update)


def nets(seed=0, hidden=(8,)):
    theta = init_network(NetworkSpec(3, hidden, Head.SOFTMAX_POLICY, 2), seed)
    value = init_network(NetworkSpec(3, hidden, Head.SCALAR_VALUE), seed + 1)
    eta = init_network(NetworkSpec(5, hidden, Head.TANH_SCALAR), seed + 2)
    return AgentParams(theta, value), eta


def match_from(theta, seed=0):
    return collect_trajectory(Corridor(), theta, Mode.MATCH, np.random.default_rng(seed))


def rewarded(traj, rewards):
    return Trajectory(Mode.MATCH, traj.observations, traj.actions, np.asarray(rewards, float), traj.log_probs)


def test_next_match_gradient_properties():
    params, _ = nets()
    traj = match_from(params.policy)
    zero = match_eval_grad_next(params.policy, rewarded(traj, np.zeros(len(traj))), 0.99)
    assert np.all(zero.values == 0.0)
    single = Trajectory(Mode.MATCH, traj.observations[:1], traj.actions[:1], np.ones(1), traj.log_probs[:1])
    np.testing.assert_allclose(match_eval_grad_next(params.policy, single, 0.99).values,
                               grad_log_prob(params.policy, traj.observations[0], traj.actions[0]).values)


def test_next_match_gradient_is_surrogate_gradient():
    params, _ = nets(1)
    traj = match_from(params.policy, 2)
    traj = rewarded(traj, np.random.default_rng(0).normal(size=len(traj)))
    g = compute_returns(traj.rewards, 0.9)
    fd = central_difference(lambda v: surrogate(params.policy.with_values(v), traj, g), params.policy.values)
    assert relative_error(match_eval_grad_next(params.policy, traj, 0.9).values, fd) < 1e-6


def test_importance_ratio_example():
    # pi''(a) = 0.8, pi_b(a) = 0.4 -> 2.0
    spec = NetworkSpec(1, (), Head.SOFTMAX_POLICY, 2)
    theta2 = ParamVector(spec, [0.0, 0.0, 0.0, np.log(0.8 / 0.2)])
    rho = importance_ratios(theta2, [np.log(0.4)], np.array([[1.0]]), np.array([1]))
    assert rho[0] == pytest.approx(2.0, rel=1e-12)


def test_importance_ratio_clipping_and_zero_behaviour(caplog):
    spec = NetworkSpec(1, (), Head.SOFTMAX_POLICY, 2)
    theta2 = ParamVector(spec, [0.0, 0.0, 0.0, 0.0])
    stats = {}
    with caplog.at_level(logging.WARNING):
        rho = importance_ratios(theta2, [np.log(0.01), -np.inf], np.ones((2, 1)), np.array([1, 1]), 10.0, stats)
    np.testing.assert_array_equal(rho, [10.0, 10.0])
    assert stats["zero_behaviour_prob"] == 1
    assert "zero behaviour probability" in caplog.text


def test_prev_match_reduces_to_on_policy():
    params, _ = nets(2)
    traj = match_from(params.policy, 3)
    traj = rewarded(traj, np.arange(len(traj)) == 6)
    on = match_eval_grad_next(params.policy, traj, 0.99, params.value)
    off = match_eval_grad_prev(params.policy, params.policy, traj, 0.99, params.value)
    assert np.max(np.abs(on.values - off.values)) <= 1e-12 * max(1.0, on.norm())
    zero = match_eval_grad_prev(params.policy, params.policy, rewarded(traj, np.zeros(len(traj))), 0.99)
    assert np.all(zero.values == 0.0)


def test_literal_importance_form_differs():
    params, _ = nets(3)
    traj = match_from(params.policy, 4)
    traj = rewarded(traj, np.ones(len(traj)))
    a = match_eval_grad_prev(params.policy, params.policy, traj, 0.99)
    b = match_eval_grad_prev(params.policy, params.policy, traj, 0.99, literal=True)
    assert not np.allclose(a.values, b.values)


def test_chain_grad_trivial_cases():
    rng = np.random.default_rng(0)
    theta, eta, practice, match = random_meta_instance(rng, T_p=1)
    chain, cache, g = chain_meta_gradient(theta, eta, practice, match, 0.3, 0.9)
    expected = 0.3 * np.dot(cache.grad_logp[0], g.values) * cache.grad_r[0]
    np.testing.assert_allclose(chain.values, expected, rtol=1e-12, atol=1e-15)
    zero = eta_chain_grad(cache, g.with_values(np.zeros(len(g))))
    assert np.all(zero.values == 0.0)


def test_chain_grad_layout_check():
    rng = np.random.default_rng(1)
    theta, eta, practice, match = random_meta_instance(rng)
    _, cache, _ = chain_meta_gradient(theta, eta, practice, match, 0.1, 0.9)
    with pytest.raises(LayoutMismatchError):
        eta_chain_grad(cache, eta)


def test_chain_grad_matches_fd_oracle_and_jacobian():
    meta = check_meta_gradient()
    jac = check_jacobian_contraction()
    assert meta.ok and meta.draws >= 50, meta.line()
    assert jac.ok and jac.draws >= 50, jac.line()


def test_fd_oracle_linear_in_match_returns():
    rng = np.random.default_rng(2)
    theta, eta, practice, match = random_meta_instance(rng)
    w = compute_returns(match.rewards, 0.9)
    a = fd_meta_oracle(eta, theta, practice, match, 0.2, 0.9, match_weights=w)
    b = fd_meta_oracle(eta, theta, practice, match, 0.2, 0.9, match_weights=2 * w)
    np.testing.assert_allclose(b.values, 2 * a.values, rtol=1e-6, atol=1e-10)


def test_dead_reward_units_give_zero_meta_gradient():
    rng = np.random.default_rng(3)
    theta, eta, practice, match = random_meta_instance(rng)
    dead = eta.with_values(np.zeros(len(eta)))
    v = dead.values.copy()
    v[-1] = 0.3  # constant reward: only the final bias matters
    chain, _, _ = chain_meta_gradient(theta, dead.with_values(v), practice, match, 0.2, 0.9)
    fd = fd_meta_oracle(dead.with_values(v), theta, practice, match, 0.2, 0.9)
    assert np.count_nonzero(chain.values[:-1]) == 0
    assert np.max(np.abs(fd.values[:-1])) < 1e-8


def test_meta_update_steps():
    eta = init_network(NetworkSpec(5, (4,), Head.TANH_SCALAR), 0)
    same, _ = meta_update(eta, eta.with_values(np.zeros(len(eta))), OptimizerState.rmsprop(0.0007))
    assert same == eta
    g = eta.with_values(np.linspace(-1, 1, len(eta)))
    new, _ = meta_update(eta, g, OptimizerState.sgd(0.05))
    np.testing.assert_allclose(new.values - eta.values, 0.05 * g.values, atol=1e-15)
    half = OptimizerState.rmsprop(0.0007, anneal_horizon=200).replace(step_count=100)
    assert half.step_size() == pytest.approx(0.00035, abs=1e-15)
    with pytest.raises(ImmutableParamsError):
        meta_update(eta.frozen(), g, OptimizerState.sgd(0.05))


def test_zero_meta_step_never_changes_eta():
    params, eta = nets(4)
    traj = collect_trajectory(Corridor(), params.policy, Mode.PRACTICE, np.random.default_rng(0))
    opts = AgentOptimizers(OptimizerState.adam(0.01), OptimizerState.adam(0.01))
    _, _, cache = practice_update(params, traj, eta, HyperParams(), opts)
    match = match_from(params.policy)
    g = match_eval_grad_next(cache.theta_double_prime, rewarded(match, np.ones(len(match))), 0.99)
    new, _ = meta_update(eta, eta_chain_grad(cache, g), OptimizerState.rmsprop(0.0))
    assert new.values.tobytes() == eta.values.tobytes()


def test_buffer_fifo_and_capacity():
    params, _ = nets(5)
    buf = ReplayBuffer(capacity=60)
    trajs = [match_from(params.policy, s) for s in range(3)]
    for t in trajs:
        buf.add_trajectory(t, 0.99)
        assert len(buf) <= 60
    stored = list(buf)
    flat_obs = np.concatenate([t.observations for t in trajs])
    np.testing.assert_array_equal(np.array([s.obs for s in stored]), flat_obs[-60:])
    with pytest.raises(ValueError):
        ReplayBuffer(0)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 30), st.lists(st.integers(1, 20), min_size=1, max_size=8))
def test_buffer_never_exceeds_capacity(capacity, lengths):
    buf = ReplayBuffer(capacity)
    n = 0
    for k, T in enumerate(lengths):
        obs = np.full((T, 3), float(k))
        buf.add_trajectory(Trajectory(Mode.MATCH, obs, np.zeros(T, dtype=np.int64), np.zeros(T), np.zeros(T)), 0.9)
        n += T
        assert len(buf) == min(n, capacity)
    # the newest transition is always last
    assert list(buf)[-1].obs[0] == len(lengths) - 1


def test_buffer_sampling():
    params, _ = nets(6)
    buf = ReplayBuffer(1000)
    buf.add_trajectory(match_from(params.policy), 0.99)
    everything = buf.sample(5000, np.random.default_rng(0))
    assert len(everything) == len(buf)
    a = buf.sample(10, np.random.default_rng(7))
    b = buf.sample(10, np.random.default_rng(7))
    assert [id(t) for t in a] == [id(t) for t in b]
    assert len({id(t) for t in a}) == 10


def test_replay_equals_prev_match_with_unit_ratios():
    params, eta = nets(7)
    rng = np.random.default_rng(0)
    practice = collect_trajectory(Corridor(), params.policy, Mode.PRACTICE, rng)
    params2, _, cache = practice_update(params, practice, eta, HyperParams(),
                                        AgentOptimizers(OptimizerState.adam(0.01), OptimizerState.adam(0.01)))
    theta2 = params2.policy
    match = collect_trajectory(Corridor(), theta2, Mode.MATCH, rng)
    match = rewarded(match, (np.arange(len(match)) % 14 == 6).astype(float))
    buf = ReplayBuffer()
    buf.add_trajectory(match, 0.99)
    via_replay = replay_match_grad(theta2, buf.sample(10_000, rng), params2.value)
    via_prev = match_eval_grad_prev(theta2, theta2, match, 0.99, params2.value)
    np.testing.assert_allclose(via_replay.values, via_prev.values, rtol=1e-10, atol=1e-13)
    opt = OptimizerState.sgd(0.1)
    new, _, grad = replay_meta_update(eta, cache, buf, theta2, 10_000, opt, rng, params2.value)
    np.testing.assert_allclose(grad.values, eta_chain_grad(cache, via_prev).values, rtol=1e-10, atol=1e-15)
    np.testing.assert_allclose(new.values, eta.values + 0.1 * grad.values, atol=1e-15)


def test_replay_on_empty_buffer_is_a_no_op(caplog):
    params, eta = nets(8)
    practice = collect_trajectory(Corridor(), params.policy, Mode.PRACTICE, np.random.default_rng(0))
    _, _, cache = practice_update(params, practice, eta, HyperParams(),
                                  AgentOptimizers(OptimizerState.adam(0.01), OptimizerState.adam(0.01)))
    opt = OptimizerState.rmsprop(0.0007)
    with caplog.at_level(logging.WARNING):
        new, after, grad = replay_meta_update(eta, cache, ReplayBuffer(), params.policy, 10, opt,
                                              np.random.default_rng(0))
    assert new is eta and after is opt and grad is None
    assert "empty" in caplog.text


def test_materialized_jacobian_shape():
    rng = np.random.default_rng(4)
    theta, eta, practice, match = random_meta_instance(rng, obs_dim=2, hidden=(3,))
    _, cache, _ = chain_meta_gradient(theta, eta, practice, match, 0.1, 0.9)
    assert materialized_jacobian(cache).shape == (len(theta), len(eta))
    assert len(theta) + len(eta) <= 50
