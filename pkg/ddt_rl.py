"""
ddt-rl - Differentiable decision trees for reinforcement learning.

Train soft decision trees (or rule lists, or small MLPs) with PPO, policy
gradient or Q-learning, convert them into readable crisp policies, and
reproduce the chain-MDP analysis of how the split threshold is updated.

    python ddt_rl.py train --env cartpole --arch tree:2 --seed 0
    python ddt_rl.py discretize runs/train/model.json --env cartpole
    python ddt_rl.py analyze --out runs/analysis
"""

__version__ = "1.0.0"

import argparse
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from modules.analysis import AnalysisConfig, emit_report
from modules.baselines import CartDataset, MlpPolicy, RandomPolicy, accuracy, build_mlp, cart_fit
from modules.core import (
    ConfigError,
    DdtError,
    DivergenceError,
    UnsupportedShapeError,
    get_logger,
    load_config,
    make_rng,
    merge_config,
    setup_logging,
)
from modules.crisp import CrispTree, discretize_tree, export_dot, export_text, prune
from modules.data import (
    CURVE_FILE,
    DISCRETIZED_FILE,
    DOT_FILE,
    MANIFEST_FILE,
    MODEL_FILE,
    SWEEP_FILE,
    SWEEP_LEAF_COUNTS,
    TEXT_FILE,
)
from modules.ddt import POLICY, Q, build_from_arch, canonical_signs, parse_arch
from modules.envs import make_env
from modules.history import (
    RunManifest,
    load_model,
    read_manifest,
    save_model,
    write_curve,
    write_json,
    write_manifest,
    write_sweep_table,
)
from modules.train import TrainConfig, collect_dataset, evaluate, train


log = get_logger("ddt_rl")


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _out_dir(path):
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"cannot create output directory {out}: {e}") from e
    return out


def _base_config(args):
    if getattr(args, "from_manifest", None):
        manifest = read_manifest(args.from_manifest)
        log.info(f"Config taken from {args.from_manifest}")
        return manifest.config
    return load_config(args.config)


def _env_section(config, env_name):
    return (config.get("envs") or {}).get(env_name) or {}


def resolve_train(config, env_name=None, **overrides):
    """
    Fold CLI overrides and the per-environment learning rate and split-weight
    L1 strength into the `train` section. Returns (resolved config, TrainConfig, env name).
    """
    section = dict(config.get("train") or {})
    section.update({k: v for k, v in overrides.items() if v is not None})
    env_name = env_name or section.get("env")
    if not env_name:
        raise ConfigError("no environment given (--env)")
    section["env"] = env_name
    env_defaults = _env_section(config, env_name)
    if "learning_rate" not in section:
        section["learning_rate"] = env_defaults.get("learning_rate", 1e-2)
    if "beta_l1" not in section and "beta_l1" in env_defaults:
        section["beta_l1"] = env_defaults["beta_l1"]
    section["freeze"] = list(section.get("freeze") or [])
    config = merge_config(config, {"train": section})
    return config, TrainConfig.from_dict(section), env_name


def build_policy(arch, env, seed, algo="ppo"):
    """Fresh model for `env` drawn from the seed's init stream."""
    rng = make_rng(seed, "init")
    topology, size = parse_arch(arch)
    if topology == "mlp":
        if algo == "q":
            raise ConfigError("Q-learning needs a tree architecture")
        return build_mlp(size, env.n_features, env.n_actions, rng)
    interpretation = Q if algo == "q" else POLICY
    return build_from_arch(arch, env.n_features, env.n_actions, rng, interpretation)


def _curve_metrics(rows):
    if not rows:
        return {"episodes": 0, "final_moving_avg": None, "mean_reward": None}
    rewards = [r["cumulative_reward"] for r in rows]
    return {
        "episodes": len(rows),
        "final_moving_avg": rows[-1]["moving_avg_50"],
        "mean_reward": float(np.mean(rewards)),
    }


def _name_tables(env_name, config):
    if not env_name:
        return None, None
    env = make_env(env_name, _env_section(config, env_name))
    return env.feature_names, env.action_names


def _as_crisp(policy, do_prune=True):
    if isinstance(policy, MlpPolicy):
        raise UnsupportedShapeError("an MLP has no crisp form")
    crisp = policy if isinstance(policy, CrispTree) else discretize_tree(canonical_signs(policy))
    return prune(crisp) if do_prune else crisp


def _write_crisp(out, crisp, features, actions):
    paths = [out / DISCRETIZED_FILE, out / TEXT_FILE, out / DOT_FILE]
    save_model(crisp, paths[0])
    paths[1].write_text(export_text(crisp, features, actions), encoding="utf-8")
    paths[2].write_text(export_dot(crisp, features, actions), encoding="utf-8")
    return [str(p) for p in paths]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_train(args):
    config, tc, env_name = resolve_train(
        _base_config(args), args.env,
        seed=args.seed, episodes=args.episodes, arch=args.arch, algo=args.algo, freeze=args.freeze,
    )
    env = make_env(env_name, _env_section(config, env_name))
    policy = build_policy(tc.arch, env, tc.seed, tc.algo)
    out = _out_dir(args.out)
    manifest = RunManifest("train", config, tc.seed, __version__)
    started = time.time()
    log.info(f"Training {tc.arch} on {env_name} with {tc.algo} for {tc.episodes} episodes (seed {tc.seed})")

    try:
        result = train(policy, env, tc)
    except DivergenceError as e:
        partial = getattr(e, "partial", None)
        if partial is not None:
            manifest.outputs = [str(save_model(partial.policy, out / MODEL_FILE)), str(out / CURVE_FILE)]
            write_curve(out / CURVE_FILE, partial.rows)
            manifest.metrics = _curve_metrics(partial.rows)
        manifest.status = "diverged"
        manifest.wall_clock = time.time() - started
        write_manifest(manifest, out / MANIFEST_FILE)
        raise

    save_model(result.policy, out / MODEL_FILE)
    write_curve(out / CURVE_FILE, result.rows)
    metrics = _curve_metrics(result.rows)
    n_random = int(config["train"].get("random_baseline_episodes", 0))
    if n_random > 0:
        random_env = make_env(env_name, _env_section(config, env_name))
        rewards = evaluate(RandomPolicy(env.n_actions), random_env, n_random, tc.seed, tc.max_steps)
        metrics["random_policy_mean"] = float(rewards.mean())
    manifest.outputs = [str(out / MODEL_FILE), str(out / CURVE_FILE)]
    manifest.metrics = metrics
    manifest.wall_clock = time.time() - started
    write_manifest(manifest, out / MANIFEST_FILE)
    log.info(f"Done: final moving average {metrics['final_moving_avg']} -> {out}")
    return manifest


def cmd_discretize(args):
    config = load_config(args.config)
    crisp = _as_crisp(load_model(args.model), not args.no_prune)
    features, actions = _name_tables(args.env, config)
    out = _out_dir(args.out)
    paths = _write_crisp(out, crisp, features, actions)
    n_nodes, n_leaves = crisp.count()
    log.info(f"Crisp policy: {n_nodes} tests, {n_leaves} leaves -> {out}")
    return paths


def cmd_eval(args):
    config = load_config(args.config)
    episodes = args.episodes
    if episodes is None:
        episodes = int((config.get("baselines") or {}).get("eval_episodes", 100))
    policy = load_model(args.model)
    env = make_env(args.env, _env_section(config, args.env))
    max_steps = int((config.get("train") or {}).get("max_steps", 500))
    rewards = evaluate(policy, env, episodes, args.seed, max_steps, greedy=args.greedy)
    mean, std = float(rewards.mean()), float(rewards.std())
    log.info(f"{args.env}: {mean:.2f} ± {std:.2f} over {episodes} episodes (seed {args.seed})")
    result = {"model": str(args.model), "env": args.env, "episodes": episodes,
              "seed": args.seed, "mean": mean, "std": std}
    if args.out:
        write_json(args.out, result)
    return result


def cmd_analyze(args):
    config = load_config(args.config)
    section = dict(config.get("analysis") or {})
    if args.grid is not None:
        section["grid"] = args.grid
    analysis = AnalysisConfig.from_dict(section)
    out = _out_dir(args.out)
    started = time.time()
    report = emit_report(analysis, out)
    manifest = RunManifest(
        "analyze", merge_config(config, {"analysis": section}), 0, __version__,
        outputs=list(report.files),
        metrics={"q_roots": len(report.roots_q.roots), "pg_roots": len(report.roots_pg.roots)},
        wall_clock=time.time() - started,
    )
    write_manifest(manifest, out / MANIFEST_FILE)
    return report


def _sweep_cell(config, env_name, arch, seed):
    """One (architecture, seed) training run; failures come back as NaN plus a message."""
    try:
        _, tc, _ = resolve_train(config, env_name, arch=arch, seed=seed)
        env = make_env(env_name, _env_section(config, env_name))
        result = train(build_policy(arch, env, seed, tc.algo), env, tc)
    except DdtError as e:
        return arch, seed, math.nan, str(e)
    if not result.rows:
        return arch, seed, math.nan, "no episodes"
    return arch, seed, float(result.rows[-1]["moving_avg_50"]), None


def cmd_sweep(args):
    config, _, env_name = resolve_train(_base_config(args), args.env, episodes=args.episodes)
    sweep = config.get("sweep") or {}
    family = args.family or sweep.get("family", "tree")
    sizes = args.sizes if args.sizes is not None else sweep.get("sizes", SWEEP_LEAF_COUNTS)
    seeds = args.seeds if args.seeds is not None else sweep.get("seeds", [0])
    workers = args.workers if args.workers is not None else int(sweep.get("workers", 1))
    if not sizes:
        raise ConfigError("sweep needs at least one size")
    if not seeds:
        raise ConfigError("sweep needs at least one seed")
    jobs = [(f"{family}:{size}", seed) for size in sizes for seed in seeds]
    for arch, _ in jobs:
        parse_arch(arch)
    out = _out_dir(args.out)
    started = time.time()
    log.info(f"Sweeping {len(jobs)} runs on {env_name} ({workers} worker{'s' if workers != 1 else ''})")

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_sweep_cell, config, env_name, arch, seed) for arch, seed in jobs]
            results = [f.result() for f in futures]
    else:
        results = [_sweep_cell(config, env_name, arch, seed) for arch, seed in jobs]

    cells = {}
    for (arch, seed, value, error), size in zip(results, (s for s in sizes for _ in seeds)):
        if error:
            log.warning(f"{arch} seed {seed} failed: {error}")
        cells.setdefault((arch, size), []).append(value)
    rows = write_sweep_table(out / SWEEP_FILE, cells)
    manifest = RunManifest(
        "sweep", merge_config(config, {"sweep": {"family": family, "sizes": list(sizes), "seeds": list(seeds)}}),
        int(seeds[0]), __version__, outputs=[str(out / SWEEP_FILE)],
        metrics={"cells": len(rows), "failed": sum(r[-1] for r in rows)},
        wall_clock=time.time() - started,
    )
    write_manifest(manifest, out / MANIFEST_FILE)
    return rows


def cmd_export(args):
    config = load_config(args.config)
    crisp = _as_crisp(load_model(args.model), not args.no_prune)
    features, actions = _name_tables(args.env, config)
    text = export_dot(crisp, features, actions) if args.format == "dot" else export_text(crisp, features, actions)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        log.info(f"Exported {args.format} to {args.out}")
    else:
        sys.stdout.write(text)
    return text


def _pair_source(args):
    if args.data:
        return str(args.data)
    return "random" if args.random else str(args.source)


def cmd_fit_cart(args):
    config = load_config(args.config)
    baselines = config.get("baselines") or {}
    env = make_env(args.env, _env_section(config, args.env))
    if args.data:
        data = CartDataset.from_csv(args.data, env.n_actions)
    else:
        source = RandomPolicy(env.n_actions) if args.random else load_model(args.source)
        pairs = args.pairs or int(baselines.get("cart_pairs", 10000))
        log.info(f"Logging {pairs} pairs from {_pair_source(args)}")
        data = collect_dataset(source, env, pairs, args.seed, greedy=not args.random)
    max_depth = args.max_depth or int(baselines.get("cart_max_depth", 6))
    tree = cart_fit(data, max_depth)
    out = _out_dir(args.out)
    data.to_csv(out / "dataset.csv")
    paths = _write_crisp(out, tree, env.feature_names, env.action_names)
    fit = accuracy(tree, data)
    log.info(f"Fitted {tree.count()[0]} tests on {len(data)} pairs, training accuracy {fit:.3f}")
    manifest = RunManifest(
        "fit-cart", config, args.seed, __version__,
        outputs=[str(out / "dataset.csv")] + paths,
        metrics={"pairs": len(data), "accuracy": fit, "source": _pair_source(args)},
    )
    write_manifest(manifest, out / MANIFEST_FILE)
    return tree


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'") from None


def build_parser():
    parser = argparse.ArgumentParser(prog="ddt_rl", description="Differentiable decision trees for RL")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="JSON file merged over default_config.json")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write model/curve/manifest")
    p.add_argument("--env")
    p.add_argument("--arch", help="tree:L (L leaves), list:R (R rules plus a default leaf) or mlp:H (H hidden layers)")
    p.add_argument("--algo", choices=["ppo", "pg", "q"])
    p.add_argument("--seed", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--freeze", action="append", choices=["alpha", "beta", "phi", "leaf"])
    p.add_argument("--from-manifest", help="re-run with the config recorded in a manifest")
    p.add_argument("--out", default="runs/train")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("discretize", help="convert a soft model into crisp json/txt/dot")
    p.add_argument("model")
    p.add_argument("--env", help="take feature/action names from this environment")
    p.add_argument("--no-prune", action="store_true")
    p.add_argument("--out", default="runs/discretize")
    p.set_defaults(func=cmd_discretize)

    p = sub.add_parser("eval", help="mean and std reward of a saved model")
    p.add_argument("model")
    p.add_argument("--env", required=True)
    p.add_argument("--episodes", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--greedy", action="store_true", help="take the most likely action")
    p.add_argument("--out", help="write the result as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="chain-MDP update curves and critical points")
    p.add_argument("--grid", type=int)
    p.add_argument("--out", default="runs/analysis")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep", help="train every (size, seed) cell and tabulate rewards")
    p.add_argument("--env")
    p.add_argument("--family", choices=["tree", "list", "mlp"])
    p.add_argument("--sizes", type=_int_list)
    p.add_argument("--seeds", type=_int_list)
    p.add_argument("--episodes", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--from-manifest")
    p.add_argument("--out", default="runs/sweep")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export", help="print a model as TEXT or DOT")
    p.add_argument("model")
    p.add_argument("--format", choices=["text", "dot"], default="text")
    p.add_argument("--env")
    p.add_argument("--no-prune", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("fit-cart", help="fit a State-Action DT on logged pairs")
    p.add_argument("--env", required=True)
    p.add_argument("--source", default="runs/train/model.json", help="trained model whose greedy actions are logged")
    p.add_argument("--random", action="store_true", help="log a uniform random policy instead of --source")
    p.add_argument("--data", help="CSV of logged pairs instead of collecting")
    p.add_argument("--pairs", type=int)
    p.add_argument("--max-depth", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/fit_cart")
    p.set_defaults(func=cmd_fit_cart)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    try:
        args.func(args)
    except DdtError as e:
        get_logger(args.command.replace("-", "_")).error(f"Error: {e}")
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
