"""Adversarial forget-set generation.

All attacks maximize ``g(X) = retain loss after unlearning {X, y_forget}``,
evaluated on a frozen, seeded retain batch. The white-box attack
differentiates through the unrolled update. The black-box attacks only query
``g`` and use two-point zeroth-order estimates along random unit directions.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .data import DatasetSplit, load_dataset
from .models import Model, accuracy, forward
from .rng import Rng, unit_sphere_sample
from .unlearning import UnlearnSpec, unlearn, unlearn_unrolled

MODES = ("white_box", "black_box", "black_box_avg")


class AttackError(RuntimeError):
    pass


class AttackDivergedError(AttackError):
    def __init__(self, step: int, cause: Exception | None = None):
        self.step = step
        super().__init__(f"attack diverged at step {step}: {cause}")


@dataclass(frozen=True)
class AttackSpec:
    """Attack hyperparameters.

    ``init`` is ``"from_training"``, ``"random_pixels"`` or
    ``"foreign_dataset:<path>"``. ``target_class`` switches to the targeted
    objective (mean retain loss on that class minus ``beta`` times the mean on
    the others).
    """

    mode: str = "white_box"
    eta_adv: float = 0.1
    t_adv: int = 10
    p: int = 1
    m: int = 1
    d_avg: int = 1
    projection_radius: float | None = None
    target_class: int | None = None
    init: str = "from_training"
    beta: float = 1.0
    eval_batch: int = 512
    zo_init_scale: float = 0.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.eta_adv <= 0 or self.t_adv < 0 or self.p < 1 or self.m < 1 or self.d_avg < 1:
            raise ValueError(f"invalid attack spec {self}")
        if self.projection_radius is not None and self.projection_radius <= 0:
            raise ValueError("projection_radius must be positive when set")
        if not (self.init in ("from_training", "random_pixels")
                or self.init.startswith("foreign_dataset:")):
            raise ValueError(f"unknown init {self.init!r}")

    @property
    def objective_scope(self) -> str:
        return "general" if self.target_class is None else "targeted"

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackSpec":
        return cls(**d)


@dataclass
class AttackResult:
    adversarial_inputs: np.ndarray
    labels: np.ndarray
    initial_inputs: np.ndarray
    trace: list[float] = field(default_factory=list)
    best_step: int = 0
    query_count: int = 0
    wall_time: float = 0.0

    @property
    def best_value(self) -> float:
        return self.trace[self.best_step] if self.trace else float("nan")

    def trace_dict(self) -> dict:
        return {"trace": self.trace, "best_step": self.best_step,
                "best_value": self.best_value, "query_count": self.query_count,
                "wall_time": self.wall_time, "labels": self.labels.tolist()}


# ---------------------------------------------------------------- objective

def project_l2(X: np.ndarray, origin: np.ndarray, radius: float | None) -> np.ndarray:
    """Project each row of ``X`` onto the l2 ball of ``radius`` around its origin row."""
    if radius is None:
        return X
    delta = X - origin
    norms = np.linalg.norm(delta, axis=1, keepdims=True)
    # rows already inside the ball are returned untouched
    return np.where(norms > radius, origin + delta * (radius / np.maximum(norms, 1e-300)), X)


def retain_eval_batch(split: DatasetSplit, size: int, rng: Rng):
    X_r, y_r = split.retain
    if y_r.shape[0] <= size:
        return X_r, y_r
    idx = np.sort(rng.choice(y_r.shape[0], size, replace=False))
    return X_r[idx], y_r[idx]


@dataclass
class RetainObjective:
    """``g(X)``: loss on a frozen retain batch after unlearning with inputs ``X``."""

    model: Model
    split: DatasetSplit
    unlearn_spec: UnlearnSpec
    unlearn_rng: Rng
    eval_X: np.ndarray
    eval_y: np.ndarray
    target_class: int | None = None
    beta: float = 1.0
    calls: int = 0

    def _loss(self, logits: ad.Node) -> ad.Node:
        if self.target_class is None:
            return ad.softmax_cross_entropy(logits, self.eval_y)
        tgt = self.eval_y == self.target_class
        if not tgt.any():
            raise AttackError(f"no retain examples of class {self.target_class} in the eval batch")
        out = ad.softmax_cross_entropy(ad.take_rows(logits, np.flatnonzero(tgt)), self.eval_y[tgt])
        if (~tgt).any():
            other = ad.softmax_cross_entropy(ad.take_rows(logits, np.flatnonzero(~tgt)),
                                             self.eval_y[~tgt])
            out = ad.sub(out, ad.scale(other, self.beta))
        return out

    def __call__(self, X: np.ndarray) -> float:
        self.calls += 1
        u = unlearn(self.model, self.split, self.unlearn_spec, self.unlearn_rng, forget_inputs=X)
        with ad.no_graph():
            logits = forward(u.arch, [ad.Node(p) for p in u.layers()], self.eval_X)
            return self._loss(logits).item()

    def value_and_grad(self, X: np.ndarray) -> tuple[float, np.ndarray]:
        self.calls += 1
        xv = ad.variable(X)
        layers = unlearn_unrolled(self.model, self.split, self.unlearn_spec, xv, self.unlearn_rng)
        out = self._loss(forward(self.model.arch, layers, self.eval_X))
        (gx,) = ad.grad(out, [xv], allow_unused=True)
        return out.item(), np.array(gx.value)


def make_objective(model: Model, split: DatasetSplit, unlearn_spec: UnlearnSpec,
                   attack_spec: AttackSpec, rng: Rng) -> RetainObjective:
    eval_X, eval_y = retain_eval_batch(split, attack_spec.eval_batch, rng.child(0))
    return RetainObjective(model, split, unlearn_spec, rng.child(1), eval_X, eval_y,
                           attack_spec.target_class, attack_spec.beta)


def initial_inputs(split: DatasetSplit, attack_spec: AttackSpec, rng: Rng) -> np.ndarray:
    X_f, _ = split.forget
    if attack_spec.init == "from_training":
        return X_f.copy()
    if attack_spec.init == "random_pixels":
        return rng.child(2).uniform(0.0, 1.0, size=X_f.shape)
    path = attack_spec.init.split(":", 1)[1]
    X, _ = load_dataset(path)
    X = X.reshape(X.shape[0], -1)
    if X.shape[1] != X_f.shape[1]:
        raise AttackError(f"foreign dataset has {X.shape[1]} features, model expects {X_f.shape[1]}")
    if X.shape[0] < X_f.shape[0]:
        raise AttackError("foreign dataset smaller than the forget set")
    idx = rng.child(2).choice(X.shape[0], X_f.shape[0], replace=False)
    return X[idx].astype(np.float64)


# ---------------------------------------------------------------- white box

def white_box_attack(model: Model, split: DatasetSplit, unlearn_spec: UnlearnSpec,
                     attack_spec: AttackSpec, rng: Rng) -> AttackResult:
    """Gradient ascent on ``g`` through the unrolled unlearning update.

    The returned inputs are the iterate with the largest recorded ``g``.
    """
    if not unlearn_spec.differentiable:
        raise AttackError(f"white-box attack needs a differentiable method, got {unlearn_spec.method}")
    t0 = time.perf_counter()
    g = make_objective(model, split, unlearn_spec, attack_spec, rng)
    X0 = initial_inputs(split, attack_spec, rng)
    X = X0.copy()
    trace: list[float] = []
    best_val, best_X, best_step = -np.inf, X0.copy(), 0
    for t in range(attack_spec.t_adv + 1):
        try:
            if t < attack_spec.t_adv:
                val, grad = g.value_and_grad(X)
            else:
                val = g(X)
        except (ad.NonFiniteError, FloatingPointError, RuntimeError) as exc:
            raise AttackDivergedError(t, exc) from None
        trace.append(val)
        if val > best_val:
            best_val, best_X, best_step = val, X.copy(), t
        if t < attack_spec.t_adv:
            X = project_l2(X + attack_spec.eta_adv * grad, X0, attack_spec.projection_radius)
            if not np.all(np.isfinite(X)):
                raise AttackDivergedError(t)
    if attack_spec.t_adv == 0:
        best_X = X0.copy()
    return AttackResult(best_X, split.forget[1].copy(), X0, trace, best_step, g.calls,
                        time.perf_counter() - t0)


# ---------------------------------------------------------------- zeroth order

def zo_estimate(g: Callable[[np.ndarray], float], z: np.ndarray, delta: np.ndarray):
    """Two-point estimate ``(g(z+D) - g(z-D)) / 2 * D``; returns ``(est, g+, g-)``."""
    gp, gm = g(z + delta), g(z - delta)
    return (gp - gm) / 2.0 * delta, gp, gm


def estimate_gradient_zo(z: np.ndarray, g: Callable[[np.ndarray], float], rng: Rng,
                         eta_adv: float = 1.0, g_z: float | None = None,
                         skip: bool = True, radius: float | None = None,
                         origin: np.ndarray | None = None) -> np.ndarray | None:
    """One zeroth-order ascent step on the perturbation ``z``.

    ``g`` is queried at ``z`` offsets directly. With ``skip`` the step is
    abandoned (``None``) when neither probe beats ``g(z)``.
    """
    delta = unit_sphere_sample(rng, z.shape)
    est, gp, gm = zo_estimate(g, z, delta)
    if skip:
        base = g(z) if g_z is None else g_z
        if gp <= base and gm <= base:
            return None
    z_new = z + eta_adv * est
    if radius is not None:
        z_new = project_l2(z_new, np.zeros_like(z_new), radius)
    return z_new


@dataclass
class _Candidate:
    z: np.ndarray
    value: float
    order: int


def _prune(cands: list[_Candidate], m: int) -> list[_Candidate]:
    return sorted(cands, key=lambda c: (-c.value, c.order))[:m]


def _black_box(model, split, unlearn_spec, attack_spec, rng, averaged: bool) -> AttackResult:
    t0 = time.perf_counter()
    g = make_objective(model, split, unlearn_spec, attack_spec, rng)
    X0 = initial_inputs(split, attack_spec, rng)
    spec = attack_spec
    zo_rng = rng.child(3)
    counter = iter(range(1 << 62))

    def g_z(z: np.ndarray) -> float:
        try:
            return g(X0 + z)
        except (ad.NonFiniteError, RuntimeError) as exc:
            raise AttackDivergedError(-1, exc) from None

    n_init = spec.m if averaged else 1
    cands = []
    for i in range(n_init):
        z = np.zeros_like(X0)
        if spec.zo_init_scale > 0:
            z = spec.zo_init_scale * unit_sphere_sample(zo_rng.child(1 << 40).child(i), X0.shape)
            z = project_l2(z, np.zeros_like(z), spec.projection_radius)
        cands.append(_Candidate(z, g_z(z), next(counter)))
    cands = _prune(cands, len(cands))
    trace = [cands[0].value]
    for t in range(spec.t_adv):
        step_rng = zo_rng.child(t)
        new = []
        for ci, c in enumerate(cands):
            crng = step_rng.child(ci)
            if averaged:
                z = c.z
                for i in range(spec.p):
                    est = np.zeros_like(z)
                    for j in range(spec.d_avg):
                        delta = unit_sphere_sample(crng.child(i * spec.d_avg + j), z.shape)
                        e, _, _ = zo_estimate(g_z, z, delta)
                        est += e
                    z = project_l2(z + spec.eta_adv * est / spec.d_avg, np.zeros_like(z),
                                   spec.projection_radius)
                new.append(_Candidate(z, g_z(z), next(counter)))
            else:
                for i in range(spec.p):
                    z = estimate_gradient_zo(c.z, g_z, crng.child(i), spec.eta_adv, g_z=c.value,
                                             radius=spec.projection_radius)
                    if z is not None:
                        new.append(_Candidate(z, g_z(z), next(counter)))
        # survivors stay in the pool, so the head is the best-so-far
        cands = _prune(cands + new, spec.m)
        trace.append(cands[0].value)
    best = cands[0]
    X_adv = X0 + best.z
    best_step = int(np.argmax(trace))
    return AttackResult(X_adv, split.forget[1].copy(), X0, trace, best_step, g.calls,
                        time.perf_counter() - t0)


def black_box_attack(model: Model, split: DatasetSplit, unlearn_spec: UnlearnSpec,
                     attack_spec: AttackSpec, rng: Rng) -> AttackResult:
    """Candidate-set zeroth-order search: one initial candidate, ``p`` skip-able
    estimators per candidate per step, keep the top ``m``."""
    return _black_box(model, split, unlearn_spec, attack_spec, rng, averaged=False)


def black_box_attack_avg(model: Model, split: DatasetSplit, unlearn_spec: UnlearnSpec,
                         attack_spec: AttackSpec, rng: Rng) -> AttackResult:
    """Averaged variant: ``m`` initial candidates, each step applies ``p``
    successive updates of a ``d_avg``-sample mean estimate, with no skip rule."""
    return _black_box(model, split, unlearn_spec, attack_spec, rng, averaged=True)


def run_attack(model, split, unlearn_spec, attack_spec, rng) -> AttackResult:
    fn = {"white_box": white_box_attack, "black_box": black_box_attack,
          "black_box_avg": black_box_attack_avg}[attack_spec.mode]
    return fn(model, split, unlearn_spec, attack_spec, rng)


# ---------------------------------------------------------------- selection attack

@dataclass
class SelectionResult:
    best_indices: np.ndarray
    max_error: float
    mean_error: float
    min_error: float
    errors: np.ndarray


def selection_attack(model: Model, split: DatasetSplit, unlearn_spec: UnlearnSpec, size: int,
                     n_trials: int, rng: Rng) -> SelectionResult:
    """Search over valid forget sets (subsets of train) for the one whose
    unlearning maximizes retain error."""
    from .data import sample_forget_set

    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    errors, sets = [], []
    for i in range(n_trials):
        idx = sample_forget_set(split, size, rng.child(i))
        s = split.with_forget(idx)
        u = unlearn(model, s, unlearn_spec, rng.child(1 << 32))
        acc = accuracy(u, *s.retain)
        errors.append(1.0 - acc)
        sets.append(idx)
    errors = np.asarray(errors)
    best = int(np.argmax(errors))
    return SelectionResult(sets[best], float(errors.max()), float(errors.mean()),
                           float(errors.min()), errors)
