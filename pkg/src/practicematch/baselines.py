"""Comparison agents: fixed random practice reward and reward-prediction practice.

The match-only agent needs no code of its own; it is the main loop with zero
practice episodes.
"""

from __future__ import annotations

import numpy as np

from .diffmath import (Direction, Head, NetworkSpec, OptimizerState, ParamVector, action_inputs,
                       apply_update, init_network, mse_grad_batch, scalar_outputs)
from .envs import Mode
from .learner import ModeError, Trajectory

AGENT_KINDS = ("match_only", "meta_gradient", "random_reward", "reward_prediction")


def make_fixed_random_reward(spec: NetworkSpec, seed) -> ParamVector:
    """Randomly initialised reward parameters that refuse any later update."""
    return init_network(spec, seed).frozen()


def predictor_spec(obs_dim: int, n_actions: int, hidden=(64, 64)) -> NetworkSpec:
    return NetworkSpec(obs_dim + n_actions, tuple(hidden), Head.SCALAR_VALUE)


def _inputs(phi: ParamVector, obs, actions):
    obs = np.atleast_2d(getattr(obs, "features", obs))
    return action_inputs(obs, actions, phi.spec.input_dim - obs.shape[1])


def predictor_update(phi: ParamVector, traj: Trajectory, opt: OptimizerState
                     ) -> tuple[ParamVector, OptimizerState]:
    """Descent on sum_t 0.5 * (p_phi(s_t, a_t) - r_t)**2 over a match."""
    if traj.mode is not Mode.MATCH:
        raise ModeError("the reward predictor only trains on matches")
    g = mse_grad_batch(phi, _inputs(phi, traj.observations, traj.actions), traj.rewards)
    return apply_update(phi, g, opt, Direction.DESCENT)


def predicted_practice_reward(phi: ParamVector, obs, action) -> float:
    """Raw predictor output for one (observation, action) pair."""
    return float(scalar_outputs(phi, _inputs(phi, obs, action))[0])


def predicted_practice_rewards(phi: ParamVector, observations, actions, clip: float = 1.0) -> np.ndarray:
    """Predictor outputs for a practice trajectory, clipped to [-clip, clip]."""
    return np.clip(scalar_outputs(phi, _inputs(phi, observations, actions)), -clip, clip)
