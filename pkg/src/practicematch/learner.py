"""Trajectory collection, returns, and the match / practice policy updates."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .diffmath import (Direction, OptimizerState, ParamVector, apply_update, log_probs,
                       mse_grad_batch, per_step_log_prob_grads, per_step_reward_grads, reward_batch,
                       scalar_outputs, weighted_log_prob_grad)
from .envs import Env, Mode


class ModeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Trajectory:
    mode: Mode
    observations: np.ndarray   # (T, obs_dim), mode flag included
    actions: np.ndarray        # (T,)
    rewards: np.ndarray        # (T,) extrinsic; all zero in practice
    log_probs: np.ndarray      # (T,) behaviour log pi(a_t|s_t)
    intrinsic: np.ndarray | None = None
    terminal: bool = True

    def __post_init__(self):
        if len(self.actions) == 0:
            raise ValueError("a trajectory needs at least one step")
        if self.mode is Mode.PRACTICE and np.any(self.rewards != 0.0):
            raise ValueError("practice trajectories carry no extrinsic reward")

    def __len__(self):
        return len(self.actions)

    @property
    def steps(self):
        return list(zip(self.observations, self.actions.tolist(), self.rewards.tolist()))

    @property
    def total_reward(self) -> float:
        return float(self.rewards.sum())


@dataclass(frozen=True)
class HyperParams:
    alpha_m: float = 0.01
    alpha_p: float = 0.01
    beta: float = 0.0007
    gamma: float = 0.99
    value_loss_coef: float = 0.5
    practice_episodes_per_cycle: int = 3
    baseline: bool = True

    def __post_init__(self):
        if min(self.alpha_m, self.alpha_p, self.beta) < 0:
            raise ValueError("step sizes must be non-negative")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class AgentParams:
    """Policy and value networks; the value network is the advantage baseline."""

    policy: ParamVector
    value: ParamVector


@dataclass(frozen=True, eq=False)
class AgentOptimizers:
    policy: OptimizerState
    value: OptimizerState


@dataclass(frozen=True, eq=False)
class PracticeCache:
    """Everything needed to contract d(theta'')/d(eta) with a vector.

    ``grad_logp[t]`` is grad log pi_theta'(a_t|s_t) and ``grad_r[t]`` is the
    gradient of the intrinsic reward at step t w.r.t. eta.
    """

    grad_logp: np.ndarray         # (T, P_theta)
    grad_r: np.ndarray | None     # (T, P_eta); None when rewards did not come from eta
    gamma: float
    alpha_p: float
    theta_prime: ParamVector
    theta_double_prime: ParamVector
    eta: ParamVector | None

    def __len__(self):
        return self.grad_logp.shape[0]


def sample_action(probs: np.ndarray, rng: np.random.Generator) -> int:
    c = np.cumsum(probs)
    return int(min(np.searchsorted(c, rng.random() * c[-1], side="right"), len(probs) - 1))


def collect_trajectory(env: Env, theta: ParamVector, mode: Mode, rng: np.random.Generator,
                       reward_source: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
                       env_rng: np.random.Generator | None = None) -> Trajectory:
    """Roll out one episode with actions sampled from ``theta``.

    ``rng`` drives action sampling and ``env_rng`` (default: ``rng``) the
    environment.  ``reward_source(observations, actions)`` fills the intrinsic
    channel when given.
    """
    env_rng = rng if env_rng is None else env_rng
    obs = env.reset(mode, env_rng)
    layers = theta.layers
    feats, acts, rews, logps = [], [], [], []
    done = False
    while not done:
        x = obs.features
        h = x
        for w, b in layers[:-1]:
            h = w @ h + b
            np.maximum(h, 0.0, out=h)
        z = layers[-1][0] @ h + layers[-1][1]
        z = z - z.max()
        p = np.exp(z)
        p /= p.sum()
        a = sample_action(p, rng)
        res = env.step(a, env_rng)
        feats.append(x)
        acts.append(a)
        rews.append(res.extrinsic_reward)
        logps.append(np.log(p[a]) if p[a] > 0 else -np.inf)
        obs, done = res.obs, res.done
    observations = np.array(feats)
    actions = np.array(acts, dtype=np.int64)
    intrinsic = reward_source(observations, actions) if reward_source is not None else None
    return Trajectory(Mode(mode), observations, actions, np.array(rews), np.array(logps), intrinsic)


def compute_returns(rewards, gamma: float) -> np.ndarray:
    """Discounted returns by backward recursion G_t = r_t + gamma * G_{t+1}."""
    rewards = np.asarray(rewards, dtype=np.float64)
    out = np.empty_like(rewards)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def advantages(value: ParamVector | None, observations, returns, baseline: bool) -> np.ndarray:
    if not baseline or value is None:
        return np.asarray(returns, dtype=np.float64)
    return returns - scalar_outputs(value, observations)


def _fit_value(params, opt, observations, targets, hp):
    if not hp.baseline:
        return params.value, opt.value
    g = mse_grad_batch(params.value, observations, targets, scale=hp.value_loss_coef)
    return apply_update(params.value, g, opt.value, Direction.DESCENT)


def match_update(params: AgentParams, traj: Trajectory, hp: HyperParams,
                 opt: AgentOptimizers) -> tuple[AgentParams, AgentOptimizers]:
    """REINFORCE ascent step on extrinsic returns; value net regressed onto them."""
    if traj.mode is not Mode.MATCH:
        raise ModeError("match_update needs a match trajectory")
    returns = compute_returns(traj.rewards, hp.gamma)
    adv = advantages(params.value, traj.observations, returns, hp.baseline)
    g = weighted_log_prob_grad(params.policy, traj.observations, traj.actions, adv)
    policy, popt = apply_update(params.policy, g, opt.policy, Direction.ASCENT)
    value, vopt = _fit_value(params, opt, traj.observations, returns, hp)
    return AgentParams(policy, value), AgentOptimizers(popt, vopt)


def practice_update(params: AgentParams, traj: Trajectory, eta: ParamVector | None, hp: HyperParams,
                    opt: AgentOptimizers, rewards: np.ndarray | None = None
                    ) -> tuple[AgentParams, AgentOptimizers, PracticeCache]:
    """Plain SGD step of size ``alpha_p`` on intrinsic returns.

    Rewards come from ``eta`` unless ``rewards`` is given, in which case they
    are used verbatim and the cache holds no reward gradients.
    """
    if traj.mode is not Mode.PRACTICE:
        raise ModeError("practice_update needs a practice trajectory")
    if rewards is None:
        rewards = reward_batch(eta, traj.observations, traj.actions)
        grad_r = per_step_reward_grads(eta, traj.observations, traj.actions)
    else:
        rewards = np.asarray(rewards, dtype=np.float64)
        grad_r = None
    returns = compute_returns(rewards, hp.gamma)
    adv = advantages(params.value, traj.observations, returns, hp.baseline)
    grad_logp = per_step_log_prob_grads(params.policy, traj.observations, traj.actions)
    theta = params.policy
    step = ParamVector(theta.spec, adv @ grad_logp)
    policy, _ = apply_update(theta, step, OptimizerState.sgd(hp.alpha_p), Direction.ASCENT)
    value, vopt = _fit_value(params, opt, traj.observations, returns, hp)
    cache = PracticeCache(grad_logp, grad_r, hp.gamma, hp.alpha_p, theta, policy, eta)
    return AgentParams(policy, value), replace(opt, value=vopt), cache


def surrogate(theta: ParamVector, traj: Trajectory, weights) -> float:
    """sum_t weights_t * log pi_theta(a_t|s_t) on a frozen trajectory."""
    return float(np.dot(weights, log_probs(theta, traj.observations, traj.actions)))
