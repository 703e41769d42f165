"""Practice/match training loop, pause-and-converge heatmaps, and run artifacts.

Randomness: each run derives four independent generators from its seed, in
this order -- ``env``, ``policy`` (action sampling), ``init`` (network
initialisation) and ``buffer`` (replay sampling).  Initialisation always
draws the policy, value, reward and predictor networks in that order, whatever
the agent kind, so agents sharing a seed start from identical parameters.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import make_fixed_random_reward, predicted_practice_rewards, predictor_spec, predictor_update
from .config import ExperimentConfig
from .diffmath import (Head, NetworkSpec, OptimizerState, ParamVector, checkpoint_bytes, init_network,
                       reward_batch)
from .envs import Corridor, Env, Mode, make_env
from .learner import (AgentOptimizers, AgentParams, HyperParams, PracticeCache, collect_trajectory,
                      match_update, practice_update)
from .metareward import (ReplayBuffer, eta_chain_grad, match_eval_grad_next, match_eval_grad_prev,
                         meta_update, replay_meta_update)

log = logging.getLogger(__name__)

CURVE_COLUMNS = ("match_index", "episode_return", "smoothed_100", "cum_env_steps")


class UnsupportedEnvError(ValueError):
    pass


@dataclass
class Streams:
    env: np.random.Generator
    policy: np.random.Generator
    init: np.random.Generator
    buffer: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int, env_seed: int | None = None) -> "Streams":
        env, policy, init, buffer = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4))
        if env_seed is not None:
            env = np.random.default_rng(np.random.SeedSequence(env_seed))
        return cls(env, policy, init, buffer)


@dataclass
class RunArtifacts:
    rows: list[tuple[int, float, float, int]]
    params: AgentParams
    eta: ParamVector
    predictor: ParamVector
    metadata: dict
    heatmaps: dict[str, np.ndarray] = field(default_factory=dict)
    failed: bool = False

    @property
    def returns(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows])

    @property
    def cum_steps(self) -> np.ndarray:
        return np.array([r[3] for r in self.rows])

    def checkpoints(self) -> dict[str, ParamVector]:
        return {"policy": self.params.policy, "value": self.params.value,
                "reward": self.eta, "predictor": self.predictor}


def build_env(cfg: ExperimentConfig) -> Env:
    if cfg.env_name == "corridor":
        return Corridor(encoding=cfg.corridor_encoding)
    return make_env(cfg.env_name)


def network_specs(cfg: ExperimentConfig, env: Env) -> dict[str, NetworkSpec]:
    h = tuple(cfg.hidden)
    return {
        "policy": NetworkSpec(env.obs_dim, h, Head.SOFTMAX_POLICY, env.n_actions),
        "value": NetworkSpec(env.obs_dim, h, Head.SCALAR_VALUE),
        "reward": NetworkSpec(env.obs_dim + env.n_actions, h, Head.TANH_SCALAR),
        "predictor": predictor_spec(env.obs_dim, env.n_actions, h),
    }


def hyperparams(cfg: ExperimentConfig) -> HyperParams:
    return HyperParams(alpha_m=cfg.alpha_m, alpha_p=cfg.alpha_p, beta=cfg.beta0, gamma=cfg.gamma,
                       value_loss_coef=cfg.value_loss_coef,
                       practice_episodes_per_cycle=cfg.practice_episodes_per_cycle, baseline=cfg.baseline)


def practice_episodes_per_cycle(cfg: ExperimentConfig, env: Env) -> int:
    """Practice episodes (hence meta-updates) per cycle; estimated when practice is step-budgeted."""
    if cfg.practice_steps > 0:
        length = getattr(env, "PRACTICE_STEPS", None) or getattr(env, "max_episode")
        return -(-cfg.practice_steps // length)
    return cfg.practice_episodes_per_cycle


def meta_optimizer(cfg: ExperimentConfig, env: Env | None = None) -> OptimizerState:
    horizon = cfg.anneal_horizon
    if horizon == -1:
        env = build_env(cfg) if env is None else env
        horizon = cfg.total_matches * practice_episodes_per_cycle(cfg, env)
    if cfg.meta_optimizer == "rmsprop":
        return OptimizerState.rmsprop(cfg.beta0, 0.99, 1e-5, horizon)
    if cfg.meta_optimizer == "adam":
        return OptimizerState.adam(cfg.beta0, anneal_horizon=horizon)
    return OptimizerState.sgd(cfg.beta0, horizon)


def zero_output_layer(params: ParamVector) -> ParamVector:
    """Same network with its last weight matrix and bias set to zero."""
    out, fan_in = params.spec.layer_shapes[-1]
    v = params.values.copy()
    v[-(out * fan_in + out):] = 0.0
    return params.with_values(v)


def initial_state(cfg: ExperimentConfig, env: Env, rng: np.random.Generator):
    """Fresh networks and optimizers.

    The value network starts with a zero output layer so the first baselines
    are exactly zero rather than random offsets that Adam would amplify.
    """
    specs = network_specs(cfg, env)
    policy = init_network(specs["policy"], rng)
    value = zero_output_layer(init_network(specs["value"], rng))
    params = AgentParams(policy, value)
    if cfg.agent_kind == "random_reward":
        eta = make_fixed_random_reward(specs["reward"], rng)
    else:
        eta = init_network(specs["reward"], rng)
    phi = init_network(specs["predictor"], rng)
    opt = AgentOptimizers(OptimizerState.adam(cfg.alpha_m), OptimizerState.adam(cfg.alpha_m))
    return params, opt, eta, phi


def smoothed(returns: list[float], window: int = 100) -> float:
    return float(np.mean(returns[-window:]))


def _practice_episode_count(cfg: ExperimentConfig) -> int:
    return 0 if cfg.agent_kind == "match_only" else cfg.practice_episodes_per_cycle


def run_experiment(cfg: ExperimentConfig, seed: int) -> RunArtifacts:
    """Alternate matches and practice for ``cfg.total_matches`` cycles.

    Each cycle plays one match with the current policy, applies the match
    update, then practices; meta-gradient agents update the reward after
    every practice update (deferred to the next match for ``next_match``).
    """
    cfg.validate()
    env = build_env(cfg)
    rng = Streams.from_seed(seed, cfg.env_seed)
    hp = hyperparams(cfg)
    params, opt, eta, phi = initial_state(cfg, env, rng.init)
    eta_opt = meta_optimizer(cfg, env)
    phi_opt = OptimizerState.adam(cfg.predictor_lr)
    buffer = ReplayBuffer(cfg.buffer_capacity)
    kind = cfg.agent_kind
    meta = kind == "meta_gradient"
    n_practice = _practice_episode_count(cfg)
    practising = n_practice > 0 or (cfg.practice_steps > 0 and kind != "match_only")

    rows: list[tuple[int, float, float, int]] = []
    returns: list[float] = []
    pending: list[tuple[PracticeCache, ParamVector]] = []
    stats = {"meta_updates": 0, "practice_steps": 0, "match_steps": 0, "zero_behaviour_prob": 0}
    cum_steps = 0
    failure = None
    try:
        for m in range(1, cfg.total_matches + 1):
            behaviour = params.policy
            match = collect_trajectory(env, behaviour, Mode.MATCH, rng.policy, env_rng=rng.env)
            cum_steps += len(match)
            stats["match_steps"] += len(match)
            returns.append(match.total_reward)
            rows.append((m, match.total_reward, smoothed(returns), cum_steps))

            if meta and cfg.meta_variant == "next_match":
                value = params.value if hp.baseline else None
                for cache, theta2 in pending:
                    g = match_eval_grad_next(theta2, match, hp.gamma, value)
                    eta, eta_opt = meta_update(eta, eta_chain_grad(cache, g), eta_opt)
                    stats["meta_updates"] += 1
            pending = []

            params, opt = match_update(params, match, hp, opt)
            if meta and cfg.meta_variant == "replay":
                buffer.add_trajectory(match, hp.gamma)
            if kind == "reward_prediction":
                phi, phi_opt = predictor_update(phi, match, phi_opt)

            if not practising:
                continue
            done_eps = done_steps = 0
            while (done_eps < n_practice) if cfg.practice_steps <= 0 else (done_steps < cfg.practice_steps):
                practice = collect_trajectory(env, params.policy, Mode.PRACTICE, rng.policy, env_rng=rng.env)
                done_eps += 1
                done_steps += len(practice)
                if kind == "reward_prediction":
                    r = predicted_practice_rewards(phi, practice.observations, practice.actions)
                    params, opt, cache = practice_update(params, practice, None, hp, opt, rewards=r)
                else:
                    params, opt, cache = practice_update(params, practice, eta, hp, opt)
                if meta:
                    value = params.value if hp.baseline else None
                    if cfg.meta_variant == "next_match":
                        pending.append((cache, params.policy))
                    elif cfg.meta_variant == "prev_match":
                        g = match_eval_grad_prev(params.policy, behaviour, match, hp.gamma, value,
                                                 cfg.rho_max, cfg.literal_is, stats)
                        eta, eta_opt = meta_update(eta, eta_chain_grad(cache, g), eta_opt)
                        stats["meta_updates"] += 1
                    else:
                        eta, eta_opt, _ = replay_meta_update(eta, cache, buffer, params.policy, cfg.batch,
                                                             eta_opt, rng.buffer, value, cfg.rho_max, stats)
                        stats["meta_updates"] += 1
            cum_steps += done_steps
            stats["practice_steps"] += done_steps
            if not (params.policy.is_finite() and params.value.is_finite() and eta.is_finite()):
                raise FloatingPointError(f"non-finite parameters after cycle {m}")
    except (FloatingPointError, ArithmeticError) as exc:
        failure = f"{type(exc).__name__}: {exc}"
        log.error("run aborted at match %d: %s", len(rows), failure)

    metadata = {
        "config_hash": cfg.config_hash(),
        "seed": seed,
        "agent_kind": kind,
        "env": cfg.env_name,
        "matches_completed": len(rows),
        "status": "failed" if failure else "ok",
        **stats,
    }
    if failure:
        metadata["failure"] = failure
    art = RunArtifacts(rows, params, eta, phi, metadata, failed=failure is not None)
    if env.enumerable:
        art.heatmaps["final"] = reward_grid(env, eta)
    return art


# --------------------------------------------------------------------------
# heatmaps

def reward_grid(env: Corridor, eta: ParamVector) -> np.ndarray:
    """Practice-mode intrinsic reward per (trash, x), averaged over actions.

    Row 0 is carrying trash, row 1 is not.
    """
    grid = np.empty((2, env.length))
    for row, trash in enumerate((True, False)):
        obs = np.array([env.features(x, trash, Mode.PRACTICE) for x in range(env.length)])
        per_action = [reward_batch(eta, obs, np.full(env.length, a)) for a in range(env.n_actions)]
        grid[row] = np.mean(per_action, axis=0)
    return grid


@dataclass
class HeatmapResult:
    grid: np.ndarray
    eta: ParamVector
    meta_steps: int
    converged: bool
    grad_norms: list[float]


def pause_and_converge_heatmap(cfg: ExperimentConfig, params: AgentParams, seed: int,
                               meta_steps: int | None = None, eta: ParamVector | None = None
                               ) -> HeatmapResult:
    """Freeze the agent and keep meta-updating the reward until it settles.

    Each iteration samples a practice episode, applies a (discarded) practice
    update, plays a match with the practised policy and takes one meta-step.
    Stops after ``meta_steps`` iterations or once every gradient norm in the
    last ``heatmap_window`` updates is below ``heatmap_tol``.
    """
    env = build_env(cfg)
    if not env.enumerable:
        raise UnsupportedEnvError(f"{cfg.env_name} has no enumerable state space")
    meta_steps = cfg.heatmap_meta_steps if meta_steps is None else meta_steps
    rng = Streams.from_seed(seed, cfg.env_seed)
    hp = hyperparams(cfg)
    if eta is None:
        eta = init_network(network_specs(cfg, env)["reward"], rng.init)
    eta_opt = meta_optimizer(cfg, env).replace(anneal_horizon=0)
    opt = AgentOptimizers(OptimizerState.adam(cfg.alpha_m), OptimizerState.adam(cfg.alpha_m))
    value = params.value if hp.baseline else None
    norms: list[float] = []
    converged = False
    steps = 0
    for steps in range(1, meta_steps + 1):
        practice = collect_trajectory(env, params.policy, Mode.PRACTICE, rng.policy, env_rng=rng.env)
        practised, _, cache = practice_update(params, practice, eta, hp, opt)
        match = collect_trajectory(env, practised.policy, Mode.MATCH, rng.policy, env_rng=rng.env)
        g = match_eval_grad_next(practised.policy, match, hp.gamma, value)
        grad = eta_chain_grad(cache, g)
        eta, eta_opt = meta_update(eta, grad, eta_opt)
        norms.append(grad.norm())
        window = norms[-cfg.heatmap_window:]
        if len(window) == cfg.heatmap_window and max(window) < cfg.heatmap_tol:
            converged = True
            break
    return HeatmapResult(reward_grid(env, eta), eta, steps, converged, norms)


# --------------------------------------------------------------------------
# aggregation and file output

def aggregate_runs(curves) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise mean and standard error (sample std / sqrt(n)) across runs."""
    data = np.asarray(curves, dtype=np.float64)
    if data.ndim == 1:
        data = data[None, :]
    mean = data.mean(axis=0)
    if data.shape[0] < 2:
        return mean, np.zeros_like(mean)
    return mean, data.std(axis=0, ddof=1) / np.sqrt(data.shape[0])


def curves_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_COLUMNS)
    for m, ret, sm, steps in rows:
        w.writerow((m, repr(float(ret)), repr(float(sm)), steps))
    return buf.getvalue()


def read_curves(path: str | Path) -> list[tuple[int, float, float, int]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [(int(r["match_index"]), float(r["episode_return"]), float(r["smoothed_100"]),
                 int(r["cum_env_steps"])) for r in reader]


def heatmap_csv(grid: np.ndarray, checkpoint_hash: str) -> str:
    buf = io.StringIO()
    buf.write(f"# checkpoint_sha256 = {checkpoint_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["trash", *(f"x{x}" for x in range(grid.shape[1]))])
    for trash, row in zip((1, 0), grid):
        w.writerow([trash, *(repr(float(v)) for v in row)])
    return buf.getvalue()


def read_heatmap(path: str | Path) -> np.ndarray:
    lines = [l for l in Path(path).read_text().splitlines() if not l.startswith("#")]
    rows = list(csv.reader(lines))[1:]
    return np.array([[float(v) for v in r[1:]] for r in rows])


def checkpoint_hash(directory: str | Path) -> str:
    h = hashlib.sha256()
    for name in ("policy", "value", "reward"):
        p = Path(directory) / f"{name}.pfck"
        if p.exists():
            h.update(p.read_bytes())
    return h.hexdigest()


def write_artifacts(art: RunArtifacts, out_dir: str | Path, cfg: ExperimentConfig | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "curves.csv").write_text(curves_csv(art.rows))
    ckpt = out / "checkpoints"
    ckpt.mkdir(exist_ok=True)
    for name, p in art.checkpoints().items():
        (ckpt / f"{name}.pfck").write_bytes(checkpoint_bytes(p))
    for name, grid in art.heatmaps.items():
        (out / f"heatmap_{name}.csv").write_text(heatmap_csv(grid, checkpoint_hash(ckpt)))
    (out / "run.json").write_text(json.dumps(art.metadata, indent=2, sort_keys=True) + "\n")
    if cfg is not None:
        (out / "config.txt").write_text("\n".join(cfg.to_lines()) + "\n")
    marker = out / "FAILED"
    if art.failed:
        marker.write_text(art.metadata.get("failure", "failed") + "\n")
    elif marker.exists():
        marker.unlink()
    return out


def aggregate_csv(mean: np.ndarray, stderr: np.ndarray, n: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("match_index", "mean_return", "stderr", "n_runs"))
    for i, (mu, se) in enumerate(zip(mean, stderr), 1):
        w.writerow((i, repr(float(mu)), repr(float(se)), n))
    return buf.getvalue()
