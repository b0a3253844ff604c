"""Config-driven experiment runner.

One *cell* is (forget size, seed, grid point, executed method). Every cell
trains nothing: the target model is trained once per config and shared. Each
cell samples its forget set, runs benign unlearning, crafts the adversarial
forget set, runs adversarial unlearning with the same unlearning seed, and
records accuracies. Summaries aggregate per-seed maxima over the grid.
"""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import math
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Any, Iterable, Mapping

import numpy as np

from .attacks import AttackSpec, run_attack
from .data import DatasetSplit, SyntheticSpec, generate, load_dataset, sample_forget_set
from .defenses import DigestStore, HASH_METHODS, benign_perturb, embedding_detector, \
    pixel_detector, roc_from_scores
from .models import Architecture, Model, OptimizerSpec, accuracy, train_model
from .rng import Rng
from .unlearning import METHODS, UnlearnSpec, unlearn

GRID_AXES = ("eta_adv", "t_adv", "p", "m", "d_avg", "projection_radius")
SETS = ("forget", "retain", "holdout")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- config

@dataclass
class ExperimentConfig:
    """Experiment description; see ``configs/`` for annotated examples.

    ``dataset`` is either a synthetic spec (``kind`` gaussian_mixture or
    gaussian_halfspace) or ``{"kind": "files", "train": ..., "holdout": ...}``
    with optional ``train_labels``/``holdout_labels`` for IDX pairs.
    ``attack`` set to None gives a benign-only run. ``grid`` maps attack
    fields to value lists; the cartesian product is the grid.
    """

    dataset: dict
    model: dict
    train: dict
    unlearn: dict
    forget_sizes: list[int]
    seeds: list[int]
    attack: dict | None = None
    grid: dict = field(default_factory=dict)
    eval_methods: list[str] | None = None
    attack_model: str = "target"
    defense: dict | None = None
    model_seed: int = 0
    name: str = "experiment"
    out_dir: str = "runs/experiment"

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if not self.forget_sizes:
            raise ConfigError("forget_sizes must be nonempty")
        for axis, values in self.grid.items():
            if axis not in GRID_AXES:
                raise ConfigError(f"unknown grid axis {axis!r}; expected one of {GRID_AXES}")
            if not isinstance(values, list) or not values:
                raise ConfigError(f"grid axis {axis!r} must be a nonempty list")
        if self.grid and self.attack is None:
            raise ConfigError("grid given without an attack section")
        if self.attack_model not in ("target", "shadow"):
            raise ConfigError("attack_model must be 'target' or 'shadow'")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown unlearning method {m!r}")
        try:
            self.unlearn_spec()
            self.optimizer()
            self.architecture()
            for lam in self.lambdas():
                self.attack_spec(lam)
        except (TypeError, ValueError, KeyError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None

    # -- typed views
    @property
    def methods(self) -> list[str]:
        return list(self.eval_methods) if self.eval_methods else [self.unlearn["method"]
                                                                  if "method" in self.unlearn
                                                                  else "GA"]

    def unlearn_spec(self, method: str | None = None) -> UnlearnSpec:
        d = dict(self.unlearn)
        if d.get("method") == "ExactRetrain" or method == "ExactRetrain":
            d.setdefault("train_recipe", self.train)
        spec = UnlearnSpec.from_dict(d)
        return spec if method is None else spec.with_method(method)

    def optimizer(self) -> OptimizerSpec:
        return OptimizerSpec(**self.train)

    def architecture(self) -> Architecture:
        return Architecture(int(self.model["in_dim"]), int(self.model["n_classes"]),
                            tuple(self.model.get("hidden", ())), self.model.get("activation", "tanh"))

    def lambdas(self) -> list[dict]:
        """Grid points in a fixed order (axes sorted by name)."""
        if self.attack is None:
            return [{}]
        axes = sorted(self.grid)
        return [dict(zip(axes, combo)) for combo in itertools.product(*(self.grid[a] for a in axes))]

    def attack_spec(self, lam: Mapping) -> AttackSpec | None:
        if self.attack is None:
            return None
        return AttackSpec.from_dict({**self.attack, **lam})

    @property
    def n_runs(self) -> int:
        return len(self.lambdas()) * len(self.forget_sizes) * len(self.seeds) * len(self.methods)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("out_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_dict(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None


def lambda_id(lam: Mapping) -> str:
    if not lam:
        return "benign"
    return "_".join(f"{k}={lam[k]}" for k in sorted(lam))


# ---------------------------------------------------------------- data & models

def build_split(cfg: ExperimentConfig) -> DatasetSplit:
    ds = dict(cfg.dataset)
    kind = ds.get("kind", "gaussian_mixture")
    if kind == "files":
        try:
            X_tr, y_tr = load_dataset(ds["train"], **({"labels_path": ds["train_labels"]}
                                                      if "train_labels" in ds else {}))
            X_ho, y_ho = load_dataset(ds["holdout"], **({"labels_path": ds["holdout_labels"]}
                                                        if "holdout_labels" in ds else {}))
        except (OSError, KeyError) as exc:
            raise ConfigError(f"dataset files: {exc}") from None
        if y_tr is None or y_ho is None:
            raise ConfigError("dataset files need labels")
        return DatasetSplit(X_tr, y_tr, X_ho, y_ho)
    try:
        spec = SyntheticSpec.from_dict(ds)
    except TypeError as exc:
        raise ConfigError(f"dataset: {exc}") from None
    return DatasetSplit(*generate(spec))


def train_target(cfg: ExperimentConfig, split: DatasetSplit, shadow: bool = False) -> Model:
    rng = Rng(cfg.model_seed, (0x5AD0,) if shadow else ())
    return train_model(cfg.architecture(), split.X_train, split.y_train, cfg.optimizer(), rng)


def accuracies(model: Model, split: DatasetSplit) -> dict:
    return {s: accuracy(model, *getattr(split, s)) for s in SETS}


# ---------------------------------------------------------------- records

@dataclass
class RunRecord:
    config_hash: str
    size: int
    seed: int
    method: str
    lambda_id: str
    lam: dict
    status: str = "ok"
    error: str | None = None
    acc_original: dict | None = None
    acc_benign: dict | None = None
    acc_adversarial: dict | None = None
    delta_acc_retain: float | None = None
    delta_acc_holdout: float | None = None
    wall_time: float = 0.0
    query_count: int = 0
    defense: dict | None = None

    @property
    def key(self) -> str:
        return f"size={self.size}__seed={self.seed}__{self.lambda_id}__{self.method}"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)


def _delta(a: float | None, b: float | None) -> float | None:
    return None if a is None or b is None else a - b


# worker-local cache: (config hash) -> (split, target model, attack model, stores)
_CACHE: dict[str, Any] = {}


def _context(cfg: ExperimentConfig):
    h = cfg.hash()
    if h not in _CACHE:
        split = build_split(cfg)
        target = train_target(cfg, split)
        attacker = train_target(cfg, split, shadow=True) if cfg.attack_model == "shadow" else target
        _CACHE.clear()
        _CACHE[h] = (split, target, attacker, {})
    return _CACHE[h]


def _detectors(cfg: ExperimentConfig, split: DatasetSplit, target: Model, cache: dict) -> dict:
    if "detectors" not in cache:
        names = cfg.defense.get("detectors", [*HASH_METHODS, "pixel_l2", "embedding"])
        dets = {}
        for n in names:
            if n in HASH_METHODS:
                dets[n] = DigestStore.build(split.X_train, n).nearest_distance
            elif n == "pixel_l2":
                dets[n] = pixel_detector(split.X_train)
            elif n == "embedding":
                dets[n] = embedding_detector(split.X_train, target)
            else:
                raise ConfigError(f"unknown detector {n!r}")
        cache["detectors"] = dets
    return cache["detectors"]


def cell_setup(split0: DatasetSplit, size: int, seed: int) -> tuple[DatasetSplit, Rng, Rng]:
    """Forget set, unlearning stream and attack stream of a (size, seed) cell."""
    root = Rng(seed, (size,))
    split = split0.with_forget(sample_forget_set(split0, size, root.child(1)))
    return split, root.child(2), root.child(3)


def run_cell(cfg: ExperimentConfig, size: int, seed: int, lam: dict, method: str) -> RunRecord:
    """Execute one cell. Failures are captured in the record, never raised."""
    return _run_cell(cfg, size, seed, lam, method)[0]


def _run_cell(cfg: ExperimentConfig, size: int, seed: int, lam: dict, method: str):
    t0 = time.perf_counter()
    rec = RunRecord(cfg.hash(), size, seed, method, lambda_id(lam), dict(lam))
    result = None
    try:
        split0, target, attacker, cache = _context(cfg)
        split, unlearn_rng, attack_rng = cell_setup(split0, size, seed)
        spec = cfg.unlearn_spec(method)
        rec.acc_original = accuracies(target, split)
        rec.acc_benign = accuracies(unlearn(target, split, spec, unlearn_rng), split)
        aspec = cfg.attack_spec(lam)
        if aspec is not None:
            # the attacker optimizes against the configured method, whatever runs later
            result = run_attack(attacker, split, cfg.unlearn_spec(), aspec, attack_rng)
            rec.query_count = result.query_count
            adv_model = unlearn(target, split, spec, unlearn_rng,
                                forget_inputs=result.adversarial_inputs)
            rec.acc_adversarial = accuracies(adv_model, split)
            rec.delta_acc_retain = _delta(rec.acc_benign["retain"], rec.acc_adversarial["retain"])
            rec.delta_acc_holdout = _delta(rec.acc_benign["holdout"], rec.acc_adversarial["holdout"])
            if cfg.defense:
                quality = int(cfg.defense.get("quality", 90))
                dets = _detectors(cfg, split0, target, cache)
                benign = [benign_perturb(x, quality) for x in split.forget[0]]
                rec.defense = {n: {"benign": [float(d(x)) for x in benign],
                                   "adversarial": [float(d(x)) for x in result.adversarial_inputs]}
                               for n, d in dets.items()}
    except Exception as exc:  # noqa: BLE001 - isolation is the point
        rec.status = "failed"
        rec.error = f"{type(exc).__name__}: {exc}"
        rec.defense = None
        result = None
        if os.environ.get("ADVUNLEARN_TRACE"):
            traceback.print_exc()
    rec.wall_time = time.perf_counter() - t0
    return rec, result


# ---------------------------------------------------------------- aggregation

def exact_stats(values: Iterable[float]) -> dict:
    """max / mean / population std. Mean and variance are exact rationals
    rounded once; std is ``sqrt`` of the rounded variance."""
    vals = [float(v) for v in values]
    if not vals:
        raise ValueError("no values to aggregate")
    fr = [Fraction(v) for v in vals]
    mean = sum(fr, Fraction(0)) / len(fr)
    var = sum(((x - mean) ** 2 for x in fr), Fraction(0)) / len(fr)
    return {"max": max(vals), "mean": float(mean), "std": math.sqrt(float(var))}


def compute_delta_acc(cells: Mapping, lambdas: Iterable | None = None) -> dict:
    """Aggregate ``{seed: {lambda: delta}}`` (or ``{seed: [delta, ...]}``).

    Per seed, take the max over the grid; then max/mean/population-std across
    seeds. With ``lambdas`` given, every (seed, lambda) cell must be present.
    """
    if not cells:
        raise ValueError("no seeds to aggregate")
    table = {s: (dict(enumerate(v)) if not isinstance(v, Mapping) else dict(v))
             for s, v in cells.items()}
    expected = list(lambdas) if lambdas is not None else None
    missing = []
    for s, row in table.items():
        want = expected if expected is not None else list(row)
        missing += [(s, lam) for lam in want if row.get(lam) is None]
        if not want:
            missing.append((s, None))
    if missing:
        raise KeyError(f"missing (seed, lambda) cells: {missing}")
    per_seed = {s: max(float(row[lam]) for lam in (expected or row)) for s, row in table.items()}
    out = exact_stats(per_seed[s] for s in sorted(per_seed))
    out["per_seed"] = per_seed
    return out


SUMMARY_FIELDS_BENIGN = ["method", "size", "statistic", "n_seeds", "n_failed",
                         "acc_original_retain", "acc_benign_forget", "acc_benign_retain",
                         "acc_benign_holdout"]
SUMMARY_FIELDS_ATTACK = SUMMARY_FIELDS_BENIGN + ["delta_acc_retain", "delta_acc_holdout"]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def summarize(records: list[RunRecord], cfg: ExperimentConfig) -> str:
    """Summary CSV text: one row per (method, size, statistic)."""
    attack = cfg.attack is not None
    fields = SUMMARY_FIELDS_ATTACK if attack else SUMMARY_FIELDS_BENIGN
    lam_ids = [lambda_id(lam) for lam in cfg.lambdas()]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for method in cfg.methods:
        for size in cfg.forget_sizes:
            recs = [r for r in records if r.method == method and r.size == size]
            ok = [r for r in recs if r.status == "ok"]
            n_failed = len(recs) - len(ok)
            cols: dict[str, dict] = {}
            first = {}
            for r in sorted(ok, key=lambda r: (r.seed, r.lambda_id)):
                first.setdefault(r.seed, r)  # benign numbers do not depend on lambda
            seeds = sorted(first)
            for name, (group, s) in {"acc_original_retain": ("acc_original", "retain"),
                                     "acc_benign_forget": ("acc_benign", "forget"),
                                     "acc_benign_retain": ("acc_benign", "retain"),
                                     "acc_benign_holdout": ("acc_benign", "holdout")}.items():
                vals = [getattr(first[sd], group)[s] for sd in seeds]
                if vals and all(v is not None for v in vals):
                    cols[name] = exact_stats(vals)
            if attack:
                for name in ("delta_acc_retain", "delta_acc_holdout"):
                    cells = {sd: {} for sd in cfg.seeds}
                    for r in ok:
                        cells[r.seed][r.lambda_id] = getattr(r, name)
                    try:
                        cols[name] = compute_delta_acc(cells, lam_ids)
                    except KeyError:
                        pass  # failed cells: leave blank, n_failed says why
            for stat in ("max", "mean", "std"):
                row = {"method": method, "size": size, "statistic": stat,
                       "n_seeds": len(seeds), "n_failed": n_failed}
                for f in fields[5:]:
                    row[f] = cols[f][stat] if f in cols else None
                w.writerow([_fmt(row[f]) for f in fields])
    return buf.getvalue()


def defense_reports(records: list[RunRecord], cfg: ExperimentConfig) -> dict:
    """ROC per (method, size, lambda, detector), pooling requests over seeds."""
    out = {}
    groups: dict[tuple, dict] = {}
    for r in sorted(records, key=lambda r: (r.method, r.size, r.lambda_id, r.seed)):
        if r.status != "ok" or not r.defense:
            continue
        g = groups.setdefault((r.method, r.size, r.lambda_id), {})
        for det, sc in r.defense.items():
            b, a = g.setdefault(det, ([], []))
            b += sc["benign"]
            a += sc["adversarial"]
    for (method, size, lid), dets in groups.items():
        for det, (b, a) in dets.items():
            out[(method, size, lid, det)] = roc_from_scores(b, a, name=det)
    return out


# ---------------------------------------------------------------- I/O

def atomic_write(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _cell_args(cfg: ExperimentConfig):
    for size in cfg.forget_sizes:
        for seed in cfg.seeds:
            for lam in cfg.lambdas():
                for method in cfg.methods:
                    yield size, seed, lam, method


def _run_cell_dict(args):
    cfg_dict, size, seed, lam, method = args
    return _run_cell(ExperimentConfig.from_dict(cfg_dict), size, seed, lam, method)


def save_attack(out_dir: str, key: str, result) -> None:
    """``attacks/<key>.npy`` holds the adversarial inputs; ``<key>.json`` the trace."""
    path = os.path.join(out_dir, "attacks", f"{key}.npy")
    os.makedirs(os.path.dirname(path), exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        np.save(fh, result.adversarial_inputs)
    os.replace(tmp, path)
    trace = {k: v for k, v in result.trace_dict().items() if k != "wall_time"}
    atomic_write(os.path.join(out_dir, "attacks", f"{key}.json"), json.dumps(trace, indent=1))


def load_attack(out_dir: str, key: str) -> np.ndarray:
    return np.load(os.path.join(out_dir, "attacks", f"{key}.npy"))


@dataclass
class ExperimentResult:
    records: list[RunRecord]
    summary_csv: str
    defense: dict
    out_dir: str

    @property
    def n_failed(self) -> int:
        return sum(r.status != "ok" for r in self.records)


def run_experiment(cfg: ExperimentConfig, threads: int = 1, out_dir: str | None = None,
                   log=print) -> ExperimentResult:
    """Run every cell, write per-run JSON, ``summary.csv`` and ROC CSVs."""
    out_dir = out_dir or cfg.out_dir
    log(f"{cfg.name}: {cfg.n_runs} runs = {len(cfg.lambdas())} grid points x "
        f"{len(cfg.forget_sizes)} sizes x {len(cfg.seeds)} seeds x {len(cfg.methods)} methods")
    args = list(_cell_args(cfg))
    if threads > 1:
        payload = [(cfg.to_dict(), *a) for a in args]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            outputs = list(pool.map(_run_cell_dict, payload))
    else:
        outputs = [_run_cell(cfg, *a) for a in args]
    records = [rec for rec, _ in outputs]

    atomic_write(os.path.join(out_dir, "config.json"), json.dumps(cfg.to_dict(), indent=2))
    for r, result in outputs:
        atomic_write(os.path.join(out_dir, "records", f"{r.key}.json"), r.to_json())
        if result is not None:
            save_attack(out_dir, r.key, result)
    summary = summarize(records, cfg)
    atomic_write(os.path.join(out_dir, "summary.csv"), summary)
    reports = defense_reports(records, cfg)
    if reports:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "size", "lambda", "detector", "auroc", "degenerate"])
        for (method, size, lid, det), rep in sorted(reports.items()):
            w.writerow([method, size, lid, det, repr(rep.auroc), int(rep.degenerate)])
            atomic_write(os.path.join(out_dir, "roc", f"{method}__size={size}__{lid}__{det}.csv"),
                         rep.to_csv())
        atomic_write(os.path.join(out_dir, "defense_summary.csv"), buf.getvalue())
    for r in records:
        if r.status != "ok":
            log(f"FAILED {r.key}: {r.error}")
    return ExperimentResult(records, summary, reports, out_dir)


def load_records(out_dir: str) -> list[RunRecord]:
    rec_dir = os.path.join(out_dir, "records")
    out = []
    for name in sorted(os.listdir(rec_dir)):
        if name.endswith(".json"):
            with open(os.path.join(rec_dir, name), encoding="utf-8") as fh:
                out.append(RunRecord(**json.load(fh)))
    return out
