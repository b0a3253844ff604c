#!/usr/bin/env python3
"""Recompute summary.csv from per-run JSON records without importing the package.

Usage: recompute_summary.py RUN_DIR [--check]

With --check, exits 1 unless the recomputed text equals RUN_DIR/summary.csv
byte for byte.
"""

import argparse
import csv
import io
import itertools
import json
import math
import os
import sys
from fractions import Fraction


def lam_id(lam):
    return "_".join(f"{k}={lam[k]}" for k in sorted(lam)) if lam else "benign"


def stats(vals):
    fr = [Fraction(v) for v in vals]
    mean = sum(fr) / len(fr)
    var = sum((x - mean) ** 2 for x in fr) / len(fr)
    return {"max": max(vals), "mean": float(mean), "std": math.sqrt(float(var))}


def cell(v):
    return "" if v is None else (repr(v) if isinstance(v, float) else str(v))


def recompute(run_dir):
    with open(os.path.join(run_dir, "config.json")) as fh:
        cfg = json.load(fh)
    recs = []
    rec_dir = os.path.join(run_dir, "records")
    for name in sorted(os.listdir(rec_dir)):
        if name.endswith(".json"):
            with open(os.path.join(rec_dir, name)) as fh:
                recs.append(json.load(fh))
    attack = cfg.get("attack") is not None
    grid = cfg.get("grid") or {}
    axes = sorted(grid)
    lams = [lam_id(dict(zip(axes, c))) for c in itertools.product(*(grid[a] for a in axes))] \
        if attack else ["benign"]
    methods = cfg.get("eval_methods") or [cfg["unlearn"].get("method", "GA")]
    acc_cols = [("acc_original_retain", "acc_original", "retain"),
                ("acc_benign_forget", "acc_benign", "forget"),
                ("acc_benign_retain", "acc_benign", "retain"),
                ("acc_benign_holdout", "acc_benign", "holdout")]
    header = ["method", "size", "statistic", "n_seeds", "n_failed"] + [c[0] for c in acc_cols]
    if attack:
        header += ["delta_acc_retain", "delta_acc_holdout"]
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(header)
    for method in methods:
        for size in cfg["forget_sizes"]:
            rs = [r for r in recs if r["method"] == method and r["size"] == size]
            ok = [r for r in rs if r["status"] == "ok"]
            by_seed = {}
            for r in ok:
                by_seed.setdefault(r["seed"], []).append(r)
            seeds = sorted(by_seed)
            cols = {}
            for name, group, s in acc_cols:
                vals = [min(by_seed[sd], key=lambda r: r["lambda_id"])[group][s] for sd in seeds]
                if vals and None not in vals:
                    cols[name] = stats(vals)
            if attack:
                for name in ("delta_acc_retain", "delta_acc_holdout"):
                    maxes, complete = [], True
                    for sd in cfg["seeds"]:
                        got = {r["lambda_id"]: r[name] for r in by_seed.get(sd, [])}
                        if any(got.get(l) is None for l in lams):
                            complete = False
                            break
                        maxes.append(max(got[l] for l in lams))
                    if complete:
                        cols[name] = stats(maxes)
            for stat in ("max", "mean", "std"):
                row = [method, size, stat, len(seeds), len(rs) - len(ok)]
                row += [cols[h][stat] if h in cols else None for h in header[5:]]
                w.writerow([cell(v) for v in row])
    return out.getvalue()


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("run_dir")
    ap.add_argument("--check", action="store_true")
    args = ap.parse_args()
    text = recompute(args.run_dir)
    if not args.check:
        sys.stdout.write(text)
        return 0
    with open(os.path.join(args.run_dir, "summary.csv")) as fh:
        emitted = fh.read()
    if emitted != text:
        sys.stderr.write("MISMATCH between recomputed and emitted summary\n")
        return 1
    print("summary matches records")
    return 0


if __name__ == "__main__":
    sys.exit(main())
