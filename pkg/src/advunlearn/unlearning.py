"""Gradient-ascent unlearning (GA, GA_GDR, GA_KLR) and exact retraining.

The GA family runs one code path in two modes. The plain mode returns a
``Model``. The unrolled mode keeps the whole update in the autodiff graph so
the retain loss can be differentiated with respect to the forget inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .data import DatasetSplit
from .models import Model, OptimizerSpec, forward, flatten, sgd_step, train_model
from .rng import Rng

METHODS = ("GA", "GA_GDR", "GA_KLR", "ExactRetrain")
GA_FAMILY = ("GA", "GA_GDR", "GA_KLR")


class UnlearningError(RuntimeError):
    pass


class UnlearningDivergedError(UnlearningError):
    def __init__(self, step: int):
        self.step = step
        super().__init__(f"unlearning produced non-finite values at step {step}")


@dataclass(frozen=True)
class UnlearnSpec:
    """SGD unlearning settings.

    ``retain_batch_source`` is ``"uniform"`` (fresh uniform retain batch per
    forget batch) or ``"cycle"`` (walk a shuffled retain order). ``kl_direction``
    ``"target||unlearn"`` computes KL(p_target || p_unlearn); the reverse is
    ``"unlearn||target"``.
    """

    method: str = "GA"
    learning_rate: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    epochs: int = 1
    retain_batch_source: str = "uniform"
    retain_batch_size: int | None = None
    kl_direction: str = "target||unlearn"
    forget_weight: float = 1.0
    shuffle: bool = True
    train_recipe: OptimizerSpec | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError(f"invalid unlearning spec {self}")
        if self.retain_batch_source not in ("uniform", "cycle"):
            raise ValueError("retain_batch_source must be 'uniform' or 'cycle'")
        if self.kl_direction not in ("target||unlearn", "unlearn||target"):
            raise ValueError("kl_direction must be 'target||unlearn' or 'unlearn||target'")

    @property
    def differentiable(self) -> bool:
        return self.method in GA_FAMILY

    def with_method(self, method: str) -> "UnlearnSpec":
        return replace(self, method=method)

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "train_recipe"}
        if self.train_recipe is not None:
            d["train_recipe"] = dict(self.train_recipe.__dict__)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UnlearnSpec":
        d = dict(d)
        if d.get("train_recipe") is not None:
            d["train_recipe"] = OptimizerSpec(**d["train_recipe"])
        return cls(**d)


def n_steps(n_forget: int, spec: UnlearnSpec) -> int:
    return spec.epochs * math.ceil(n_forget / spec.batch_size)


@dataclass
class _RetainSampler:
    n: int
    size: int
    source: str
    rng: Rng
    _order: np.ndarray = field(default=None, repr=False)
    _pos: int = 0

    def next(self) -> np.ndarray:
        if self.source == "uniform":
            return np.sort(self.rng.choice(self.n, self.size, replace=False))
        out = []
        while len(out) < self.size:
            if self._order is None or self._pos >= self.n:
                self._order = self.rng.permutation(self.n)
                self._pos = 0
            take = min(self.size - len(out), self.n - self._pos)
            out.extend(self._order[self._pos:self._pos + take])
            self._pos += take
        return np.asarray(out)


def _unlearn_graph(model: Model, forget_X: ad.Node, forget_y: np.ndarray,
                   retain_X: np.ndarray, retain_y: np.ndarray, spec: UnlearnSpec,
                   rng: Rng, create_graph: bool) -> tuple[list[ad.Node], int]:
    arch = model.arch
    m = forget_y.shape[0]
    if m == 0:
        raise UnlearningError(f"{spec.method} needs a nonempty forget set")
    needs_retain = spec.method in ("GA_GDR", "GA_KLR")
    if needs_retain and retain_y.shape[0] == 0:
        raise UnlearningError(f"{spec.method} needs a nonempty retain set")

    layers: list[ad.Node] = [ad.variable(p) for p in model.layers()]
    target_layers = [ad.Node(p) for p in model.layers()]
    bufs: list = [None] * len(layers)
    order_rng, retain_rng = rng.child(0), rng.child(1)
    sampler = None
    if needs_retain:
        size = min(spec.retain_batch_size or spec.batch_size, retain_y.shape[0])
        sampler = _RetainSampler(retain_y.shape[0], size, spec.retain_batch_source, retain_rng)

    step = 0
    for _ in range(spec.epochs):
        perm = order_rng.permutation(m) if spec.shuffle else np.arange(m)
        for start in range(0, m, spec.batch_size):
            idx = perm[start:start + spec.batch_size]
            try:
                if not create_graph:
                    layers = [ad.variable(p.value) for p in layers]
                xb = ad.take_rows(forget_X, idx)
                obj = ad.scale(ad.softmax_cross_entropy(forward(arch, layers, xb), forget_y[idx]),
                               -spec.forget_weight)
                if sampler is not None:
                    ridx = sampler.next()
                    xr = retain_X[ridx]
                    if spec.method == "GA_GDR":
                        obj = ad.add(obj, ad.softmax_cross_entropy(
                            forward(arch, layers, xr), retain_y[ridx]))
                    else:
                        cur = forward(arch, layers, xr)
                        with ad.no_graph():
                            ref = forward(arch, target_layers, xr)
                        kl = (ad.kl_divergence(ref, cur) if spec.kl_direction == "target||unlearn"
                              else ad.kl_divergence(cur, ref))
                        obj = ad.add(obj, kl)
                grads = ad.grad(obj, layers, create_graph=create_graph, allow_unused=True)
                if create_graph:
                    layers, bufs = sgd_step(layers, grads, bufs, spec.learning_rate,
                                            spec.momentum, spec.weight_decay)
                else:
                    with ad.no_graph():
                        layers, bufs = sgd_step(layers, grads, bufs, spec.learning_rate,
                                                spec.momentum, spec.weight_decay)
            except ad.NonFiniteError:
                raise UnlearningDivergedError(step) from None
            step += 1
    return layers, step


def _forget_inputs(split: DatasetSplit, forget_inputs) -> tuple[np.ndarray, np.ndarray]:
    X_f, y_f = split.forget
    if forget_inputs is None:
        return X_f, y_f
    X_in = forget_inputs.value if isinstance(forget_inputs, ad.Node) else np.asarray(
        forget_inputs, dtype=np.float64)
    if X_in.shape != X_f.shape:
        raise ValueError(f"forget inputs shape {X_in.shape} != forget set shape {X_f.shape}")
    return X_in, y_f


def unlearn(model: Model, split: DatasetSplit, spec: UnlearnSpec, rng: Rng,
            forget_inputs=None) -> Model:
    """Return the unlearned model.

    ``forget_inputs`` replaces the forget-set inputs (labels stay those of the
    forget indices); this is how adversarial requests enter the pipeline. The
    retain set is always ``train \\ forget``.
    """
    if spec.method == "ExactRetrain":
        if forget_inputs is not None:
            raise UnlearningError("exact retraining ignores request inputs; pass indices only")
        return exact_retrain(split, model.arch, spec.train_recipe, rng)
    X_f, y_f = _forget_inputs(split, forget_inputs)
    X_r, y_r = split.retain
    layers, steps = _unlearn_graph(model, ad.Node(X_f), y_f, X_r, y_r, spec, rng, create_graph=False)
    out = Model(model.arch, flatten(layers))
    out.meta.update(method=spec.method, steps=steps)
    return out


def unlearn_unrolled(model: Model, split: DatasetSplit, spec: UnlearnSpec,
                     forget_inputs: ad.Node, rng: Rng) -> list[ad.Node]:
    """Unlearned parameters (one node per layer tensor) as a differentiable
    function of ``forget_inputs``."""
    if not spec.differentiable:
        raise UnlearningError(f"{spec.method} has no differentiable unrolled form")
    _, y_f = _forget_inputs(split, forget_inputs)
    X_r, y_r = split.retain
    layers, _ = _unlearn_graph(model, forget_inputs, y_f, X_r, y_r, spec, rng, create_graph=True)
    return layers


def exact_retrain(split: DatasetSplit, arch, recipe: OptimizerSpec | None, rng: Rng) -> Model:
    """Train from scratch on ``train \\ forget`` with the given recipe and seed."""
    if recipe is None:
        raise UnlearningError("exact retraining needs a train_recipe")
    X_r, y_r = split.retain
    if y_r.shape[0] == 0:
        raise UnlearningError("forget set covers the whole training set; nothing to retrain on")
    out = train_model(arch, X_r, y_r, recipe, rng)
    out.meta.update(method="ExactRetrain")
    return out
