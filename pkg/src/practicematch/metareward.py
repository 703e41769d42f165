"""Meta-gradient updates of the intrinsic practice reward parameters.

The gradient of the match objective with respect to the reward parameters eta
flows through a single practice update::

    d J_match / d eta = (d theta'' / d eta)^T  grad_theta'' J_match

The second factor is estimated from match samples (next match, previous
match with importance weights, or a replay buffer).  The first is never
materialised; :func:`eta_chain_grad` contracts it with the match gradient
using the per-step gradients kept in a :class:`PracticeCache`.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass

import numpy as np

from .diffmath import (Direction, GradVector, OptimizerState, ParamVector, LayoutMismatchError,
                       apply_update, log_probs, per_step_log_prob_grads, reward_batch,
                       scalar_outputs, weighted_log_prob_grad)
from .envs import Mode
from .learner import ModeError, PracticeCache, Trajectory, compute_returns

log = logging.getLogger(__name__)


def _match_weights(traj: Trajectory, gamma: float, value: ParamVector | None) -> np.ndarray:
    returns = compute_returns(traj.rewards, gamma)
    if value is not None:
        returns = returns - scalar_outputs(value, traj.observations)
    return returns


def match_eval_grad_next(theta2: ParamVector, traj: Trajectory, gamma: float,
                         value: ParamVector | None = None) -> GradVector:
    """On-policy estimate of grad J_match at ``theta2`` from a match played with it.

    Passing ``value`` subtracts it as a baseline from the returns.
    """
    if traj.mode is not Mode.MATCH:
        raise ModeError("match gradients need a match trajectory")
    w = _match_weights(traj, gamma, value)
    return weighted_log_prob_grad(theta2, traj.observations, traj.actions, w)


def importance_ratios(theta2: ParamVector, behaviour_log_probs, observations, actions,
                      rho_max: float = 10.0, stats: dict | None = None) -> np.ndarray:
    """pi_theta2(a|s) / pi_behaviour(a|s), clipped to [0, rho_max]."""
    behaviour_log_probs = np.asarray(behaviour_log_probs, dtype=np.float64)
    new = log_probs(theta2, observations, actions)
    with np.errstate(over="ignore", invalid="ignore"):
        rho = np.exp(new - behaviour_log_probs)
    dead = ~np.isfinite(behaviour_log_probs)
    if dead.any():
        if stats is not None:
            stats["zero_behaviour_prob"] = stats.get("zero_behaviour_prob", 0) + int(dead.sum())
        log.warning("%d samples had zero behaviour probability; ratio clipped", int(dead.sum()))
        rho[dead] = rho_max
    return np.clip(rho, 0.0, rho_max)


def match_eval_grad_prev(theta2: ParamVector, theta_behaviour: ParamVector, traj: Trajectory,
                         gamma: float, value: ParamVector | None = None, rho_max: float = 10.0,
                         literal: bool = False, stats: dict | None = None) -> GradVector:
    """Off-policy estimate from a match collected under ``theta_behaviour``.

    ``literal=True`` divides by the behaviour log-probability instead of
    multiplying by the probability ratio; it exists only for comparison.
    """
    if traj.mode is not Mode.MATCH:
        raise ModeError("match gradients need a match trajectory")
    w = _match_weights(traj, gamma, value)
    behaviour = log_probs(theta_behaviour, traj.observations, traj.actions)
    if literal:
        w = w / behaviour
    else:
        w = w * importance_ratios(theta2, behaviour, traj.observations, traj.actions, rho_max, stats)
    return weighted_log_prob_grad(theta2, traj.observations, traj.actions, w)


def eta_chain_grad(cache: PracticeCache, g: GradVector) -> GradVector:
    """(d theta''/d eta)^T g without forming the Jacobian.

    c_t = <grad log pi_t, g>;  S_t = grad r_t + gamma * S_{t+1};
    result = alpha_p * sum_t c_t * S_t.
    """
    if cache.grad_r is None:
        raise ValueError("cache holds no reward gradients")
    if g.values.shape[0] != cache.grad_logp.shape[1]:
        raise LayoutMismatchError("match gradient does not match the cached policy layout")
    c = cache.grad_logp @ g.values
    total = np.zeros(cache.grad_r.shape[1])
    suffix = np.zeros_like(total)
    for t in range(len(c) - 1, -1, -1):
        suffix = cache.grad_r[t] + cache.gamma * suffix
        total += c[t] * suffix
    return ParamVector(cache.eta.spec, cache.alpha_p * total)


def materialized_jacobian(cache: PracticeCache) -> np.ndarray:
    """Explicit d theta''/d eta of shape (P_theta, P_eta); for small nets only."""
    T = len(cache)
    jac = np.zeros((cache.grad_logp.shape[1], cache.grad_r.shape[1]))
    for t in range(T):
        dG = np.zeros(cache.grad_r.shape[1])
        for i in range(t, T):
            dG += cache.gamma ** (i - t) * cache.grad_r[i]
        jac += cache.alpha_p * np.outer(cache.grad_logp[t], dG)
    return jac


def meta_update(eta: ParamVector, grad: GradVector, opt: OptimizerState
                ) -> tuple[ParamVector, OptimizerState]:
    """Ascent step on eta; the step size follows the optimizer's schedule."""
    return apply_update(eta, grad, opt, Direction.ASCENT)


# --------------------------------------------------------------------------
# replay variant

@dataclass(frozen=True)
class Transition:
    obs: np.ndarray
    action: int
    ret: float
    behaviour_log_prob: float


class ReplayBuffer:
    """FIFO store of match transitions."""

    def __init__(self, capacity: int = 12000):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: deque[Transition] = deque(maxlen=capacity)

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def add_trajectory(self, traj: Trajectory, gamma: float) -> None:
        if traj.mode is not Mode.MATCH:
            raise ModeError("only match transitions are stored")
        returns = compute_returns(traj.rewards, gamma)
        for obs, a, g, lp in zip(traj.observations, traj.actions, returns, traj.log_probs):
            self._items.append(Transition(obs, int(a), float(g), float(lp)))

    def sample(self, batch: int, rng: np.random.Generator) -> list[Transition]:
        """Uniform sample without replacement; the whole buffer if it is smaller."""
        n = len(self._items)
        if batch >= n:
            return list(self._items)
        idx = rng.choice(n, size=batch, replace=False)
        return [self._items[i] for i in idx]


def replay_match_grad(theta2: ParamVector, batch: list[Transition], value: ParamVector | None = None,
                      rho_max: float = 10.0, stats: dict | None = None) -> GradVector:
    obs = np.array([t.obs for t in batch])
    actions = np.array([t.action for t in batch], dtype=np.int64)
    w = np.array([t.ret for t in batch])
    if value is not None:
        w = w - scalar_outputs(value, obs)
    behaviour = np.array([t.behaviour_log_prob for t in batch])
    w = w * importance_ratios(theta2, behaviour, obs, actions, rho_max, stats)
    return weighted_log_prob_grad(theta2, obs, actions, w)


def replay_meta_update(eta: ParamVector, cache: PracticeCache, buffer: ReplayBuffer, theta2: ParamVector,
                       batch: int, opt: OptimizerState, rng: np.random.Generator,
                       value: ParamVector | None = None, rho_max: float = 10.0,
                       stats: dict | None = None) -> tuple[ParamVector, OptimizerState, GradVector | None]:
    """Meta-update using importance-weighted match samples from ``buffer``.

    Returns the new eta, optimizer state and the eta-gradient (None when the
    buffer is empty and nothing was done).
    """
    if len(buffer) == 0:
        log.warning("replay buffer empty; skipping meta-update")
        return eta, opt, None
    g = replay_match_grad(theta2, buffer.sample(batch, rng), value, rho_max, stats)
    grad = eta_chain_grad(cache, g)
    new_eta, new_opt = meta_update(eta, grad, opt)
    return new_eta, new_opt, grad


# --------------------------------------------------------------------------
# finite-difference oracle

def practice_theta2(theta1: ParamVector, eta: ParamVector, practice: Trajectory, alpha_p: float,
                    gamma: float, baseline_values=None) -> np.ndarray:
    """theta'' as a function of eta for a frozen practice trajectory."""
    rewards = reward_batch(eta, practice.observations, practice.actions)
    adv = compute_returns(rewards, gamma)
    if baseline_values is not None:
        adv = adv - baseline_values
    grads = per_step_log_prob_grads(theta1, practice.observations, practice.actions)
    return theta1.values + alpha_p * (adv @ grads)


def fd_meta_oracle(eta: ParamVector, theta1: ParamVector, practice: Trajectory, match: Trajectory,
                   alpha_p: float, gamma: float, eps: float = 1e-5, practice_baseline=None,
                   match_weights=None) -> GradVector:
    """Central differences of eta -> f(theta''(eta)).

    f is the frozen-match surrogate sum_t w_t log pi(a_t|s_t) with w the
    extrinsic returns unless ``match_weights`` is given.
    """
    if match_weights is None:
        match_weights = compute_returns(match.rewards, gamma)

    def h(values):
        th2 = theta1.with_values(practice_theta2(theta1, eta.with_values(values), practice, alpha_p,
                                                 gamma, practice_baseline))
        return float(np.dot(match_weights, log_probs(th2, match.observations, match.actions)))

    out = np.empty(len(eta))
    base = eta.values.copy()
    for k in range(len(eta)):
        up, down = base.copy(), base.copy()
        up[k] += eps
        down[k] -= eps
        out[k] = (h(up) - h(down)) / (2 * eps)
    return ParamVector(eta.spec, out)
