"""Command line entry point: ``practicematch <command> ...``.

Exit status is 0 on success, 1 for configuration errors and 2 when a run
fails at runtime.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, parse_int_list, load_config
from .diffmath import load_checkpoint
from .envs import ENVIRONMENTS, make_env
from .harness import (Streams, UnsupportedEnvError, aggregate_csv, aggregate_runs, build_env,
                      checkpoint_hash, heatmap_csv, initial_state, pause_and_converge_heatmap,
                      run_experiment, write_artifacts)
from .learner import AgentParams

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="practicematch", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train one agent for one seed")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("sweep", help="run several seeds and aggregate their curves")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", default=None, help="a..b or a comma list (default: the config's seeds)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("heatmap", help="pause-and-converge reward heatmap for a policy checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True,
                   help="policy .pfck file, a run's checkpoints/ directory, or 'init'")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--meta-steps", type=int, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("describe-env", help="print an environment's layout and rules")
    p.add_argument("--name", required=True, choices=sorted(ENVIRONMENTS))

    sub.add_parser("gradcheck", help="finite-difference checks of every analytic gradient")
    return parser


def _run(args) -> int:
    cfg = load_config(args.config)
    art = run_experiment(cfg, args.seed)
    out = write_artifacts(art, args.out, cfg)
    print(f"{len(art.rows)} matches, final smoothed return {art.rows[-1][2]:.3f} -> {out}")
    return EXIT_RUNTIME if art.failed else EXIT_OK


def _sweep(args) -> int:
    cfg = load_config(args.config)
    try:
        seeds = parse_int_list(args.seeds) if args.seeds else cfg.seeds
    except ValueError:
        raise ConfigError(f"bad --seeds value {args.seeds!r}") from None
    out = Path(args.out)
    curves, failed = [], []
    for seed in seeds:
        art = run_experiment(cfg, seed)
        write_artifacts(art, out / f"seed_{seed}", cfg)
        print(f"seed {seed}: final smoothed return {art.rows[-1][2]:.3f}" + (" FAILED" if art.failed else ""))
        if art.failed:
            failed.append(seed)
        else:
            curves.append(art.returns)
    if curves:
        mean, stderr = aggregate_runs(curves)
        (out / "aggregate.csv").write_text(aggregate_csv(mean, stderr, len(curves)))
    return EXIT_RUNTIME if failed else EXIT_OK


def _heatmap(args) -> int:
    cfg = load_config(args.config)
    env = build_env(cfg)
    if not env.enumerable:
        raise UnsupportedEnvError(f"{cfg.env_name} has no enumerable state space")
    params, _, eta, _ = initial_state(cfg, env, Streams.from_seed(args.seed, cfg.env_seed).init)
    source = Path(args.checkpoint)
    tag = "init"
    if args.checkpoint != "init":
        directory = source if source.is_dir() else source.parent
        policy_file = directory / "policy.pfck" if source.is_dir() else source
        policy = load_checkpoint(policy_file)
        value_file, reward_file = directory / "value.pfck", directory / "reward.pfck"
        value = load_checkpoint(value_file) if value_file.exists() else params.value
        if reward_file.exists():
            eta = load_checkpoint(reward_file)
        params = AgentParams(policy, value)
        tag = checkpoint_hash(directory)
    result = pause_and_converge_heatmap(cfg, params, args.seed, args.meta_steps, eta=eta)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "heatmap.csv"
    path.write_text(heatmap_csv(result.grid, tag))
    state = "converged" if result.converged else "hit the step cap"
    print(f"{result.meta_steps} meta-steps ({state}) -> {path}")
    return EXIT_OK


def _describe(args) -> int:
    print(make_env(args.name).describe())
    return EXIT_OK


def _gradcheck(args) -> int:
    from .gradcheck import run_all

    results = run_all()
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.ok for r in results) else EXIT_RUNTIME


COMMANDS = {"run": _run, "sweep": _sweep, "heatmap": _heatmap, "describe-env": _describe,
            "gradcheck": _gradcheck}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (UnsupportedEnvError, OSError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
