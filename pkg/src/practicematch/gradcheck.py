"""Finite-difference checks of every analytic gradient, used by ``practicematch gradcheck``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffmath import (Head, NetworkSpec, ParamVector, grad_log_prob, grad_reward, grad_value_mse,
                       init_network, policy_probs, reward_forward, scalar_outputs)
from .envs import Mode
from .learner import Trajectory, compute_returns, practice_update, AgentParams, AgentOptimizers, HyperParams
from .diffmath import OptimizerState
from .metareward import eta_chain_grad, fd_meta_oracle, match_eval_grad_next, materialized_jacobian


def central_difference(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    for k in range(x.size):
        up, down = x.copy(), x.copy()
        up[k] += eps
        down[k] -= eps
        out[k] = (f(up) - f(down)) / (2 * eps)
    return out


def relative_error(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


@dataclass
class CheckResult:
    name: str
    draws: int
    worst: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.worst <= self.tol

    def line(self) -> str:
        return (f"{'PASS' if self.ok else 'FAIL'} {self.name}: worst relative error {self.worst:.2e} "
                f"over {self.draws} draws (tol {self.tol:g})")


def _random_net(rng, head, input_dim, n_actions=1, hidden=(5, 4), scale=1.0):
    spec = NetworkSpec(input_dim, hidden, head, n_actions)
    return ParamVector(spec, rng.normal(0, scale, spec.n_params))


def check_grad_log_prob(draws=100, seed=0, tol=1e-6):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(draws):
        n_actions = int(rng.integers(2, 5))
        theta = _random_net(rng, Head.SOFTMAX_POLICY, 4, n_actions, scale=0.7)
        x = rng.normal(size=4)
        a = int(rng.integers(n_actions))
        fd = central_difference(lambda v: np.log(policy_probs(theta.with_values(v), x)[0, a]), theta.values)
        worst = max(worst, relative_error(grad_log_prob(theta, x, a).values, fd))
    return CheckResult("grad_log_prob", draws, worst, tol)


def check_grad_reward(draws=100, seed=1, tol=1e-6):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(draws):
        eta = _random_net(rng, Head.TANH_SCALAR, 4 + 3, scale=0.4)
        x = rng.normal(size=4)
        a = int(rng.integers(3))
        fd = central_difference(lambda v: reward_forward(eta.with_values(v), x, a), eta.values)
        worst = max(worst, relative_error(grad_reward(eta, x, a).values, fd))
    return CheckResult("grad_reward", draws, worst, tol)


def check_grad_value_mse(draws=100, seed=2, tol=1e-6):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(draws):
        v = _random_net(rng, Head.SCALAR_VALUE, 4)
        x = rng.normal(size=4)
        target = float(rng.normal())
        fd = central_difference(lambda w: 0.5 * (scalar_outputs(v.with_values(w), x)[0] - target) ** 2, v.values)
        worst = max(worst, relative_error(grad_value_mse(v, x, target).values, fd))
    return CheckResult("grad_value_mse", draws, worst, tol)


def random_meta_instance(rng, obs_dim=3, n_actions=2, hidden=(4, 4), T_p=None, T_m=None):
    """Small frozen practice/match trajectories with random networks (<= 200 params)."""
    theta = _random_net(rng, Head.SOFTMAX_POLICY, obs_dim, n_actions, hidden, scale=0.8)
    eta = _random_net(rng, Head.TANH_SCALAR, obs_dim + n_actions, 1, hidden, scale=0.8)
    T_p = T_p or int(rng.integers(2, 9))
    T_m = T_m or int(rng.integers(2, 9))

    def traj(mode, T):
        obs = rng.normal(size=(T, obs_dim))
        obs[:, -1] = float(mode)
        actions = rng.integers(n_actions, size=T)
        rewards = rng.normal(size=T) if mode is Mode.MATCH else np.zeros(T)
        return Trajectory(mode, obs, actions, rewards, np.zeros(T))

    return theta, eta, traj(Mode.PRACTICE, T_p), traj(Mode.MATCH, T_m)


def chain_meta_gradient(theta, eta, practice, match, alpha_p, gamma):
    """Analytic meta-gradient with the baseline disabled, via the practice cache."""
    hp = HyperParams(alpha_p=alpha_p, gamma=gamma, baseline=False)
    value = init_network(NetworkSpec(theta.spec.input_dim, (2,), Head.SCALAR_VALUE), 0)
    opt = AgentOptimizers(OptimizerState.sgd(0.0), OptimizerState.sgd(0.0))
    params2, _, cache = practice_update(AgentParams(theta, value), practice, eta, hp, opt)
    g = match_eval_grad_next(params2.policy, match, gamma)
    return eta_chain_grad(cache, g), cache, g


def check_meta_gradient(draws=50, seed=3, tol=1e-4):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(draws):
        theta, eta, practice, match = random_meta_instance(rng)
        alpha_p, gamma = float(rng.uniform(0.05, 0.5)), float(rng.uniform(0.5, 1.0))
        chain, _, _ = chain_meta_gradient(theta, eta, practice, match, alpha_p, gamma)
        fd = fd_meta_oracle(eta, theta, practice, match, alpha_p, gamma, eps=1e-5)
        worst = max(worst, relative_error(chain.values, fd.values))
    return CheckResult("meta-gradient vs finite differences", draws, worst, tol)


def check_jacobian_contraction(draws=50, seed=4, tol=1e-12):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(draws):
        theta, eta, practice, match = random_meta_instance(rng, obs_dim=2, hidden=(3,))
        alpha_p, gamma = float(rng.uniform(0.05, 0.5)), float(rng.uniform(0.5, 1.0))
        chain, cache, g = chain_meta_gradient(theta, eta, practice, match, alpha_p, gamma)
        explicit = materialized_jacobian(cache).T @ g.values
        worst = max(worst, relative_error(chain.values, explicit))
    return CheckResult("eta_chain_grad vs materialized Jacobian", draws, worst, tol)


def run_all() -> list[CheckResult]:
    return [check_grad_log_prob(), check_grad_reward(), check_grad_value_mse(), check_meta_gradient(),
            check_jacobian_contraction()]
