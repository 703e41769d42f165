"""Flat ``key = value`` experiment configuration.

Lines starting with ``#`` are comments.  Every key is listed in ``KEYS``;
anything else is rejected before a run starts.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .baselines import AGENT_KINDS
from .envs import ENVIRONMENTS


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_int_list(text: str) -> tuple[int, ...]:
    text = text.strip()
    if ".." in text:
        a, b = text.split("..")
        return tuple(range(int(a), int(b) + 1))
    return tuple(int(t) for t in text.replace(",", " ").split())


def _horizon(text: str) -> int:
    """``auto`` (anneal over the whole run) is stored as -1."""
    return -1 if text.strip().lower() == "auto" else int(text)


def _opt_int(text: str):
    return None if text.strip().lower() in ("", "none") else int(text)


# key -> (attribute, parser)
KEYS = {
    "env.name": ("env_name", str),
    "env.seed": ("env_seed", _opt_int),
    "env.corridor_encoding": ("corridor_encoding", str),
    "env.practice_steps": ("practice_steps", int),
    "agent.kind": ("agent_kind", str),
    "agent.hidden": ("hidden", parse_int_list),
    "gamma": ("gamma", float),
    "alpha_m": ("alpha_m", float),
    "alpha_p": ("alpha_p", float),
    "value_loss_coef": ("value_loss_coef", float),
    "baseline.enabled": ("baseline", _bool),
    "practice_episodes_per_cycle": ("practice_episodes_per_cycle", int),
    "total_matches": ("total_matches", int),
    "seeds": ("seeds", parse_int_list),
    "meta.variant": ("meta_variant", str),
    "meta.optimizer": ("meta_optimizer", str),
    "meta.beta0": ("beta0", float),
    "meta.anneal_horizon": ("anneal_horizon", _horizon),
    "meta.buffer_capacity": ("buffer_capacity", int),
    "meta.batch": ("batch", int),
    "meta.rho_max": ("rho_max", float),
    "meta.literal_is": ("literal_is", _bool),
    "predictor.lr": ("predictor_lr", float),
    "heatmap.meta_steps": ("heatmap_meta_steps", int),
    "heatmap.window": ("heatmap_window", int),
    "heatmap.tol": ("heatmap_tol", float),
    "output.dir": ("out_dir", str),
}


@dataclass
class ExperimentConfig:
    env_name: str = "corridor"
    env_seed: int | None = None
    corridor_encoding: str = "scalar"
    practice_steps: int = 0
    agent_kind: str = "meta_gradient"
    hidden: tuple[int, ...] = (64, 64)
    gamma: float = 0.99
    alpha_m: float = 0.01
    alpha_p: float = 0.01
    value_loss_coef: float = 0.5
    baseline: bool = True
    practice_episodes_per_cycle: int = 3
    total_matches: int = 500
    seeds: tuple[int, ...] = (0,)
    meta_variant: str = "next_match"
    meta_optimizer: str = "rmsprop"
    beta0: float = 0.0007
    anneal_horizon: int = -1          # -1: every meta-update of the run
    buffer_capacity: int = 12000
    batch: int = 1000
    rho_max: float = 10.0
    literal_is: bool = False
    predictor_lr: float = 0.001
    heatmap_meta_steps: int = 5000
    heatmap_window: int = 50
    heatmap_tol: float = 1e-4
    out_dir: str = "runs"

    def validate(self) -> "ExperimentConfig":
        problems = []
        if self.env_name not in ENVIRONMENTS:
            problems.append(f"env.name must be one of {sorted(ENVIRONMENTS)}")
        if self.agent_kind not in AGENT_KINDS:
            problems.append(f"agent.kind must be one of {list(AGENT_KINDS)}")
        if self.meta_variant not in ("next_match", "prev_match", "replay"):
            problems.append("meta.variant must be next_match, prev_match or replay")
        if self.meta_optimizer not in ("sgd", "adam", "rmsprop"):
            problems.append("meta.optimizer must be sgd, adam or rmsprop")
        if self.corridor_encoding not in ("scalar", "onehot"):
            problems.append("env.corridor_encoding must be scalar or onehot")
        if not 0.0 <= self.gamma <= 1.0:
            problems.append("gamma must lie in [0, 1]")
        for key in ("alpha_m", "alpha_p", "beta0", "value_loss_coef", "predictor_lr", "rho_max"):
            if getattr(self, key) < 0:
                problems.append(f"{key} must be non-negative")
        for key in ("practice_episodes_per_cycle", "practice_steps"):
            if getattr(self, key) < 0:
                problems.append(f"{key} must be non-negative")
        if self.anneal_horizon < -1:
            problems.append("meta.anneal_horizon must be auto, 0 (constant) or a positive count")
        for key in ("total_matches", "buffer_capacity", "batch"):
            if getattr(self, key) <= 0:
                problems.append(f"{key} must be positive")
        if not self.hidden or min(self.hidden) <= 0:
            problems.append("agent.hidden must list positive layer sizes")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def to_lines(self) -> list[str]:
        lines = []
        for key, (attr, _) in KEYS.items():
            value = getattr(self, attr)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = str(value).lower()
            elif attr == "anneal_horizon" and value == -1:
                value = "auto"
            lines.append(f"{key} = {value}")
        return lines

    def config_hash(self) -> str:
        """Hash of every setting that affects a run (output location excluded)."""
        body = "\n".join(l for l in self.to_lines() if not l.startswith("output.dir"))
        return hashlib.sha256(body.encode()).hexdigest()

    def updated(self, **kw) -> "ExperimentConfig":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(kw)
        return ExperimentConfig(**d).validate()


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    cfg = ExperimentConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        attr, parse = KEYS[key]
        try:
            setattr(cfg, attr, parse(value))
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    return cfg.validate()


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), str(path))
