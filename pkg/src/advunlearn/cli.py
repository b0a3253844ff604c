"""Command-line entry point: ``advunlearn <subcommand> [--config ...]``.

Exit codes: 0 success, 1 configuration error, 2 run failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import harness
from .attacks import selection_attack
from .harness import ConfigError, ExperimentConfig
from .models import load_model, save_model
from .rng import Rng
from .theory import LinearPair, verify_fact1, verify_theorem
from .unlearning import unlearn

EXIT_OK, EXIT_CONFIG, EXIT_RUN = 0, 1, 2


def _load_config(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("--config is required for this subcommand")
    cfg = ExperimentConfig.load(args.config)
    changes = {}
    if args.seed is not None:
        changes["seeds"] = [args.seed]
    if args.out:
        changes["out_dir"] = args.out
    return replace(cfg, **changes) if changes else cfg


def _emit(obj, out_dir: str | None, name: str) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, default=_jsonable)
    print(text)
    if out_dir:
        harness.atomic_write(os.path.join(out_dir, name), text + "\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    raise TypeError(f"not serializable: {type(o).__name__}")


def cmd_train(args) -> int:
    cfg = _load_config(args)
    split = harness.build_split(cfg)
    model = harness.train_target(cfg, split)
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, "target.ulrn")
    save_model(model, path)
    _emit({"model": path, "accuracy": harness.accuracies(model, split)}, cfg.out_dir, "train.json")
    return EXIT_OK


def cmd_unlearn(args) -> int:
    cfg = _load_config(args)
    split0 = harness.build_split(cfg)
    model = load_model(args.model) if args.model else harness.train_target(cfg, split0)
    out = []
    for size in cfg.forget_sizes:
        for seed in cfg.seeds:
            split, unlearn_rng, _ = harness.cell_setup(split0, size, seed)
            u = unlearn(model, split, cfg.unlearn_spec(), unlearn_rng)
            path = os.path.join(cfg.out_dir, f"unlearned_size={size}_seed={seed}.ulrn")
            os.makedirs(cfg.out_dir, exist_ok=True)
            save_model(u, path)
            out.append({"size": size, "seed": seed, "model": path,
                        "original": harness.accuracies(model, split),
                        "unlearned": harness.accuracies(u, split)})
    _emit(out, cfg.out_dir, "unlearn.json")
    return EXIT_OK


def _experiment(args, need_defense: bool) -> int:
    cfg = _load_config(args)
    if cfg.attack is None and need_defense:
        raise ConfigError("defend needs an attack section to produce adversarial requests")
    if need_defense and not cfg.defense:
        cfg = replace(cfg, defense={"quality": 90})
    res = harness.run_experiment(cfg, threads=args.threads, log=lambda m: print(m, file=sys.stderr))
    print(res.summary_csv, end="")
    if res.defense:
        for (method, size, lid, det), rep in sorted(res.defense.items()):
            print(f"auroc {method} size={size} {lid} {det}: {rep.auroc:.4f}"
                  + (" (degenerate)" if rep.degenerate else ""))
    return EXIT_RUN if res.n_failed else EXIT_OK


def cmd_attack(args) -> int:
    return _experiment(args, need_defense=False)


def cmd_defend(args) -> int:
    return _experiment(args, need_defense=True)


def cmd_select_attack(args) -> int:
    cfg = _load_config(args)
    split = harness.build_split(cfg)
    model = harness.train_target(cfg, split)
    out = []
    for size in cfg.forget_sizes:
        for seed in cfg.seeds:
            r = selection_attack(model, split, cfg.unlearn_spec(), size, args.trials, Rng(seed, (size,)))
            out.append({"size": size, "seed": seed, "trials": args.trials,
                        "best_indices": r.best_indices, "max_error": r.max_error,
                        "mean_error": r.mean_error, "min_error": r.min_error})
    _emit(out, cfg.out_dir, "select_attack.json")
    return EXIT_OK


def cmd_theory_check(args) -> int:
    seed = args.seed or 0
    cfg = LinearPair(d=args.d, n=args.n, epsilon=args.epsilon, m_forget=args.m_forget)
    seeds = range(seed, seed + args.trials)
    verdict = {"theorem": verify_theorem(cfg, seeds),
               "fact1": verify_fact1(args.d, 1.0 / np.sqrt(args.d), args.fact1_samples,
                                     Rng(seed, (0xFAC1,)), epsilon=args.fact1_epsilon)}
    _emit(verdict, args.out, "theory_check.json")
    return EXIT_OK


def cmd_report(args) -> int:
    out_dir = args.out or (ExperimentConfig.load(args.config).out_dir if args.config else None)
    if not out_dir:
        raise ConfigError("report needs --out or --config")
    cfg = ExperimentConfig.load(os.path.join(out_dir, "config.json"))
    records = harness.load_records(out_dir)
    text = harness.summarize(records, cfg)
    print(text, end="")
    with open(os.path.join(out_dir, "summary.csv"), encoding="utf-8") as fh:
        if fh.read() != text:
            print("summary.csv differs from records", file=sys.stderr)
            return EXIT_RUN
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    def flags(suppress: bool) -> argparse.ArgumentParser:
        # subparsers must not reset values given before the subcommand
        d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        f = argparse.ArgumentParser(add_help=False)
        f.add_argument("--config", default=d(None), help="experiment JSON file")
        f.add_argument("--seed", type=int, default=d(None),
                       help="override the config's seed list with one seed")
        f.add_argument("--out", default=d(None), help="output directory")
        f.add_argument("--threads", type=int, default=d(1), help="worker processes across cells")
        return f

    common = flags(suppress=True)
    p = argparse.ArgumentParser(prog="advunlearn", parents=[flags(suppress=False)],
                                description="Adversarial unlearning-request laboratory")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train the target model").set_defaults(fn=cmd_train)
    s = sub.add_parser("unlearn", parents=[common], help="benign unlearning of sampled forget sets")
    s.add_argument("--model", help="model file to start from (default: train per config)")
    s.set_defaults(fn=cmd_unlearn)
    sub.add_parser("attack", parents=[common], help="run the attack grid").set_defaults(fn=cmd_attack)
    sub.add_parser("defend", parents=[common], help="attack grid plus detector ROC").set_defaults(
        fn=cmd_defend)
    s = sub.add_parser("select-attack", parents=[common], help="forget-set selection attack")
    s.add_argument("--trials", type=int, default=200)
    s.set_defaults(fn=cmd_select_attack)
    s = sub.add_parser("theory-check", parents=[common], help="Monte-Carlo check of the linear construction")
    s.add_argument("--d", type=int, default=2000)
    s.add_argument("--n", type=int, default=40)
    s.add_argument("--epsilon", type=float, default=0.5)
    s.add_argument("--m-forget", type=int, default=None)
    s.add_argument("--trials", type=int, default=100)
    s.add_argument("--fact1-samples", type=int, default=10_000)
    s.add_argument("--fact1-epsilon", type=float, default=0.3)
    s.set_defaults(fn=cmd_theory_check)
    sub.add_parser("report", parents=[common], help="re-summarize saved run records").set_defaults(
        fn=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
