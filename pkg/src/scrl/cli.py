"""Command-line entry point: ``scrl <command> [options]``.

Exit codes: 0 success, 1 gradient check failure, 2 bad arguments,
3 training divergence, 4 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import __version__
from .algorithm import TrainConfig, agent_from_checkpoint, train
from .analysis import (ABLATION_AXES, evaluate_policy, interpolate_and_retrieve, interpolation_frames,
                       oracle_rollout, pixel_interpolate_and_retrieve, q_trace, run_ablation, sample_goals,
                       spearman, start_goal_pairs)
from .config import ConfigError, RunConfig, load_config
from .dataset import CorruptFile, generate_offline, load_store, save_store
from .env import IMAGE, SuccessCriterion, make_process, named_process
from .nn import CorruptCheckpoint, IncompatibleCheckpoint, TrainingDivergence, load_checkpoint

EXIT_OK, EXIT_GRADCHECK, EXIT_ARGS, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def _config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    return load_config(path)


def _process_from(cfg: RunConfig, env_config: dict | None):
    """[env] from the config file when present, else the stored env config."""
    if "env" in cfg.sections or env_config is None:
        return make_process(**cfg.env.kwargs())
    return make_process(**env_config)


def _checkpoint_process(path):
    _, _, state = load_checkpoint(path)
    return make_process(**state["env_config"]), state


def _criterion(cfg: RunConfig, process):
    kind = cfg.eval.criterion
    if kind == "auto":
        return process.default_criterion()
    return SuccessCriterion(kind, cfg.eval.radius)


def _out(out_dir, name):
    os.makedirs(out_dir, exist_ok=True)
    return os.path.join(out_dir, name)


# ---------------------------------------------------------------- commands

def cmd_gen_data(args):
    if args.num_transitions < 1:
        raise UsageError(f"too few transitions: {args.num_transitions}")
    if args.config:
        cfg = _config(args.config)
        process = make_process(**cfg.env.kwargs())
    else:
        process = named_process(args.env)
    try:
        store = generate_offline(process, args.behavior, args.num_transitions, args.seed)
    except ValueError as e:
        raise UsageError(str(e)) from None
    save_store(store, args.out)
    print(f"transitions {store.num_transitions} trajectories {store.num_trajectories}")


def cmd_train(args):
    cfg = _config(args.config)
    store = load_store(args.data)
    process = _process_from(cfg, store.metadata.get("env_config"))
    train(cfg.train, process, store, args.out_dir, resume=args.resume, workers=args.workers,
          wall_clock=args.wall_clock)
    print(f"trained {cfg.train.total_steps} steps -> {args.out_dir}")


def cmd_eval(args):
    cfg = _config(args.config)
    process, _ = _checkpoint_process(args.checkpoint)
    agent, _ = agent_from_checkpoint(args.checkpoint, process)
    goals = sample_goals(process, args.num_goals, args.seed)
    horizon = cfg.eval.horizon or None
    report = evaluate_policy(process, agent, agent.critic, goals, horizon, _criterion(cfg, process), args.seed)
    report.to_csv(_out(args.out_dir, "eval.csv"))
    print(f"success_rate {report.success_rate!r} mean_episode_length {report.mean_episode_length!r}")


def cmd_interp(args):
    process, _ = _checkpoint_process(args.checkpoint)
    agent, _ = agent_from_checkpoint(args.checkpoint, process)
    results = []
    for k, (s, g) in enumerate(start_goal_pairs(process, args.pairs, args.seed, min_states=args.num_alphas)):
        frames = process.features(np.asarray(interpolation_frames(process, s, g, args.num_alphas)))
        trace = interpolate_and_retrieve(agent.critic, frames[0], frames[-1], frames, args.num_alphas)
        entry = {"pair": k, "error": trace.error, "steps": trace.records()}
        if process.obs_kind == IMAGE:
            entry["pixel_error"] = pixel_interpolate_and_retrieve(frames[0], frames[-1], frames,
                                                                  args.num_alphas).error
        results.append(entry)
    summary = {"num_alphas": args.num_alphas, "mean_error": float(np.mean([r["error"] for r in results]))}
    if process.obs_kind == IMAGE:
        summary["mean_pixel_error"] = float(np.mean([r["pixel_error"] for r in results]))
    with open(_out(args.out_dir, "interp.json"), "w") as fh:
        json.dump({**summary, "pairs": results}, fh, indent=2)
    print(" ".join(f"{k} {v!r}" for k, v in summary.items()))


def cmd_qtrace(args):
    process, _ = _checkpoint_process(args.checkpoint)
    agent, _ = agent_from_checkpoint(args.checkpoint, process)
    rows, rhos = [], []
    for k, (s, g) in enumerate(start_goal_pairs(process, args.num_rollouts, args.seed)):
        states, actions = oracle_rollout(process, s, g)
        q = q_trace(agent.critic, process.features(np.asarray(states[:-1])), agent.action_features(actions),
                    process.features(np.asarray([g]))[0])
        rhos.append(spearman(q, np.arange(len(q))))
        rows += [(k, t, repr(float(v))) for t, v in enumerate(q)]
    with open(_out(args.out_dir, "qtrace.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rollout", "t", "q_normalized"])
        w.writerows(rows)
    print(f"mean_spearman {float(np.mean(rhos))!r}")


def _parse_values(axis, text):
    vals = []
    for item in text.split(","):
        item = item.strip()
        if axis == "mlp_width_depth":
            w, d = item.lower().split("x")
            vals.append((int(w), int(d)))
        elif axis == "layer_norm":
            vals.append(item.lower() in ("1", "true", "yes", "on"))
        else:
            vals.append(float(item) if "." in item or "e" in item.lower() else int(item))
    return vals


def cmd_ablate(args):
    cfg = _config(args.config)
    store = load_store(args.data)
    process = _process_from(cfg, store.metadata.get("env_config"))
    train_store, held_out = store.split(args.holdout, seed=cfg.data.seed)
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = run_ablation(cfg.train, args.axis, _parse_values(args.axis, args.values), seeds, process, train_store,
                        held_out, num_goals=args.num_goals, out_csv=_out(args.out_dir, "ablation.csv"))
    for r in rows:
        print(f"{args.axis}={r.axis_value} seed={r.seed} success={r.success_rate!r} acc={r.binary_accuracy!r}")


def cmd_gradcheck(args):
    from .gradcheck import TOLERANCE, run_suite

    results = run_suite(args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name} rel_err={r.error:.3e}")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks below {TOLERANCE:g}")
    return EXIT_GRADCHECK if failed else EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="scrl", description="Stable contrastive RL toolkit.", formatter_class=fmt)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate an offline dataset", formatter_class=fmt)
    g.add_argument("--env", default="grid9", help="grid<N>, grid<W>x<H>, point1d, point2d, pixel1d, pixel2d")
    g.add_argument("--config", default=None, help="take the process from this config's [env] section")
    g.add_argument("--behavior", default="scripted", help="uniform, scripted or mix:<eps>")
    g.add_argument("--num-transitions", type=int, default=250_000, help="transitions to collect")
    g.add_argument("--seed", type=int, default=0, help="behavior and dynamics seed")
    g.add_argument("--out", default="data.scrl", help="output dataset file")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train critic and policy", formatter_class=fmt)
    t.add_argument("--config", default=None, help="run config; built-in defaults if omitted")
    t.add_argument("--data", required=True, help="dataset from gen-data")
    t.add_argument("--out-dir", default="run", help="metrics.csv and checkpoints go here")
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--workers", type=int, default=1, help="batch-assembly threads (>1 is not deterministic)")
    t.add_argument("--wall-clock", action="store_true", help="record real step times in metrics.csv")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="greedy success-rate evaluation", formatter_class=fmt)
    e.add_argument("--checkpoint", required=True, help="checkpoint written by train")
    e.add_argument("--config", default=None, help="read [eval] horizon and criterion from here")
    e.add_argument("--num-goals", type=int, default=10, help="rollouts, one per goal")
    e.add_argument("--seed", type=int, default=0, help="goal and start seed")
    e.add_argument("--out-dir", default="run", help="eval.csv goes here")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("interp", help="representation interpolation", formatter_class=fmt)
    i.add_argument("--checkpoint", required=True, help="checkpoint written by train")
    i.add_argument("--num-alphas", type=int, default=8, help="interpolation points per pair")
    i.add_argument("--pairs", type=int, default=10, help="start/goal pairs")
    i.add_argument("--seed", type=int, default=0, help="pair seed")
    i.add_argument("--out-dir", default="run", help="interp.json goes here")
    i.set_defaults(func=cmd_interp)

    q = sub.add_parser("qtrace", help="critic values along oracle rollouts", formatter_class=fmt)
    q.add_argument("--checkpoint", required=True, help="checkpoint written by train")
    q.add_argument("--num-rollouts", type=int, default=10, help="oracle rollouts to trace")
    q.add_argument("--seed", type=int, default=0, help="start/goal seed")
    q.add_argument("--out-dir", default="run", help="qtrace.csv goes here")
    q.set_defaults(func=cmd_qtrace)

    a = sub.add_parser("ablate", help="sweep one design axis", formatter_class=fmt)
    a.add_argument("--config", default=None, help="base run config")
    a.add_argument("--data", required=True, help="dataset from gen-data")
    a.add_argument("--axis", required=True, choices=ABLATION_AXES, help="design axis to vary")
    a.add_argument("--values", required=True, help="comma separated; WxD for mlp_width_depth")
    a.add_argument("--seeds", default="0,1,2", help="comma separated training seeds")
    a.add_argument("--num-goals", type=int, default=50, help="evaluation goals per variant")
    a.add_argument("--holdout", type=float, default=0.1, help="fraction of trajectories held out for accuracy")
    a.add_argument("--out-dir", default="run", help="ablation.csv goes here")
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite", formatter_class=fmt)
    c.add_argument("--seed", type=int, default=0, help="seed for inputs and parameters")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        code = args.func(args)
        return EXIT_OK if code is None else code
    except (UsageError, ConfigError, IncompatibleCheckpoint, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ARGS
    except TrainingDivergence as e:
        print(f"error: training diverged at step {e.step}: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CorruptCheckpoint, CorruptFile) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except OSError as e:
        where = f": {e.filename}" if getattr(e, "filename", None) else ""
        print(f"error: {e.strerror or e}{where}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
