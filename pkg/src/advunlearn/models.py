"""Linear and MLP classifiers over a flat parameter vector, SGD training, model files."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .rng import Rng

ACTIVATIONS = ("tanh", "relu")


@dataclass(frozen=True)
class Architecture:
    """``hidden=()`` is the linear classifier; otherwise an MLP with those widths."""

    in_dim: int
    n_classes: int
    hidden: tuple[int, ...] = ()
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.in_dim < 1 or self.n_classes < 2 or any(h < 1 for h in self.hidden):
            raise ValueError(f"invalid architecture {self}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @property
    def kind(self) -> str:
        return "mlp" if self.hidden else "linear"

    @property
    def layer_sizes(self) -> list[int]:
        return [self.in_dim, *self.hidden, self.n_classes]

    def param_shapes(self) -> list[tuple[int, ...]]:
        sizes = self.layer_sizes
        shapes: list[tuple[int, ...]] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            shapes += [(fan_in, fan_out), (fan_out,)]
        return shapes

    @property
    def n_params(self) -> int:
        return int(sum(np.prod(s) for s in self.param_shapes()))

    def to_dict(self) -> dict:
        return {"in_dim": self.in_dim, "n_classes": self.n_classes,
                "hidden": list(self.hidden), "activation": self.activation}

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(int(d["in_dim"]), int(d["n_classes"]), tuple(d.get("hidden", ())),
                   d.get("activation", "tanh"))


def linear(in_dim: int, n_classes: int) -> Architecture:
    return Architecture(in_dim, n_classes)


def mlp(in_dim: int, hidden: Sequence[int], n_classes: int, activation: str = "tanh") -> Architecture:
    return Architecture(in_dim, n_classes, tuple(hidden), activation)


@dataclass
class Model:
    arch: Architecture
    params: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64).ravel()
        if self.params.size != self.arch.n_params:
            raise ValueError(f"expected {self.arch.n_params} params, got {self.params.size}")

    def layers(self) -> list[np.ndarray]:
        return unflatten(self.arch, self.params)

    def predict(self, X) -> np.ndarray:
        with ad.no_graph():
            return forward(self.arch, [ad.Node(p) for p in self.layers()], X).value

    def features(self, X) -> np.ndarray:
        with ad.no_graph():
            return penultimate(self.arch, [ad.Node(p) for p in self.layers()], X).value

    def copy(self) -> "Model":
        return Model(self.arch, self.params.copy(), dict(self.meta))


def unflatten(arch: Architecture, flat: np.ndarray) -> list[np.ndarray]:
    out, start = [], 0
    for shape in arch.param_shapes():
        size = int(np.prod(shape))
        out.append(flat[start:start + size].reshape(shape))
        start += size
    return out


def flatten(layers: Sequence) -> np.ndarray:
    return np.concatenate([np.asarray(getattr(p, "value", p)).ravel() for p in layers])


def init_params(arch: Architecture, rng: Rng) -> np.ndarray:
    """Uniform(+-1/sqrt(fan_in)) for weights and biases."""
    flat = []
    sizes = arch.layer_sizes
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        flat.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).ravel())
        flat.append(rng.uniform(-bound, bound, size=fan_out))
    return np.concatenate(flat)


def _act(arch: Architecture, h):
    return ad.tanh(h) if arch.activation == "tanh" else ad.relu(h)


def penultimate(arch: Architecture, layers: Sequence[ad.Node], X) -> ad.Node:
    """Input to the final linear layer (the raw inputs for a linear model)."""
    h = ad.as_node(X)
    if h.ndim != 2 or h.shape[1] != arch.in_dim:
        raise ad.ShapeError("forward", h.shape, (None, arch.in_dim))
    for i in range(len(arch.hidden)):
        h = _act(arch, ad.add(ad.matmul(h, layers[2 * i]), layers[2 * i + 1]))
    return h


def forward(arch: Architecture, layers: Sequence[ad.Node], X) -> ad.Node:
    h = penultimate(arch, layers, X)
    return ad.add(ad.matmul(h, layers[-2]), layers[-1])


def accuracy(model: Model, X, y) -> float | None:
    """Fraction correct, or ``None`` for an empty set."""
    y = np.asarray(y)
    if y.size == 0:
        return None
    return float(np.mean(model.predict(np.asarray(X)).argmax(axis=1) == y))


def loss(model: Model, X, y) -> float:
    with ad.no_graph():
        logits = forward(model.arch, [ad.Node(p) for p in model.layers()], X)
        return ad.softmax_cross_entropy(logits, y).item()


# ---------------------------------------------------------------- optimization

@dataclass(frozen=True)
class OptimizerSpec:
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 64
    epochs: int = 20

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError(f"invalid optimizer spec {self}")


def sgd_step(params, grads, bufs, lr: float, momentum: float, weight_decay: float):
    """One torch-style SGD step with coupled weight decay.

    ``d = g + wd * p``; ``buf = momentum * buf + d`` (``buf = d`` when ``buf`` is
    None); ``p -= lr * buf``. Works on graph nodes, so it can be unrolled.
    """
    new_params, new_bufs = [], []
    for p, g, b in zip(params, grads, bufs):
        d = ad.add(g, ad.scale(p, weight_decay)) if weight_decay else g
        b = d if b is None else ad.add(ad.scale(b, momentum), d)
        new_bufs.append(b)
        new_params.append(ad.sub(p, ad.scale(b, lr)))
    return new_params, new_bufs


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, step: int | None = None):
        self.epoch = epoch
        self.step = step
        super().__init__(f"training diverged (non-finite) at epoch {epoch}")


def train_model(arch: Architecture, X, y, opt: OptimizerSpec, rng: Rng,
                init: np.ndarray | None = None) -> Model:
    """Minibatch SGD on mean cross-entropy, shuffled each epoch."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[1] != arch.in_dim or X.shape[0] != y.shape[0]:
        raise ValueError(f"data shape {X.shape}/{y.shape} does not match {arch}")
    if X.shape[0] == 0:
        raise ValueError("cannot train on an empty dataset")
    params = init_params(arch, rng.child(0)) if init is None else np.array(init, dtype=np.float64)
    layers = unflatten(arch, params)
    bufs = [None] * len(layers)
    order_rng = rng.child(1)
    n = X.shape[0]
    for epoch in range(opt.epochs):
        perm = order_rng.permutation(n)
        for start in range(0, n, opt.batch_size):
            idx = perm[start:start + opt.batch_size]
            leaves = [ad.variable(p) for p in layers]
            try:
                out = ad.softmax_cross_entropy(forward(arch, leaves, X[idx]), y[idx])
                grads = ad.grad(out, leaves)
                with ad.no_graph():
                    new, bufs = sgd_step([ad.Node(p) for p in layers], grads, bufs,
                                         opt.learning_rate, opt.momentum, opt.weight_decay)
            except ad.NonFiniteError:
                raise TrainingDivergedError(epoch) from None
            layers = [p.value for p in new]
    model = Model(arch, flatten(layers))
    model.meta["train_accuracy"] = accuracy(model, X, y)
    return model


# ---------------------------------------------------------------- model files

MAGIC = b"ULRN"
VERSION = 1
_ACT_TAGS = {"tanh": 0, "relu": 1}
_KIND_TAGS = {"linear": 0, "mlp": 1}


class ModelFormatError(ValueError):
    pass


def save_model(model: Model, path: str | os.PathLike) -> None:
    """Write the binary model file atomically (temp file + rename).

    Layout, little-endian: ``ULRN`` | u32 version | u32 kind | u32 activation |
    u32 in_dim | u32 n_classes | u32 n_hidden | u32 * n_hidden | u64 n_params |
    f64 * n_params.
    """
    a = model.arch
    header = MAGIC + struct.pack("<IIIIII", VERSION, _KIND_TAGS[a.kind], _ACT_TAGS[a.activation],
                                 a.in_dim, a.n_classes, len(a.hidden))
    header += struct.pack(f"<{len(a.hidden)}I", *a.hidden)
    header += struct.pack("<Q", model.params.size)
    payload = header + model.params.astype("<f8").tobytes()
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def load_model(path: str | os.PathLike) -> Model:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise ModelFormatError(f"bad magic {raw[:4]!r} at offset 0")
    try:
        version, kind, act, in_dim, k, nh = struct.unpack_from("<IIIIII", raw, 4)
        if version != VERSION:
            raise ModelFormatError(f"unsupported version {version}")
        off = 28
        hidden = struct.unpack_from(f"<{nh}I", raw, off)
        off += 4 * nh
        (n_params,) = struct.unpack_from("<Q", raw, off)
        off += 8
    except struct.error as exc:
        raise ModelFormatError(f"truncated header: {exc}") from None
    if len(raw) - off != 8 * n_params:
        raise ModelFormatError(f"expected {8 * n_params} parameter bytes at offset {off}, "
                               f"found {len(raw) - off}")
    acts = {v: k_ for k_, v in _ACT_TAGS.items()}
    arch = Architecture(in_dim, k, tuple(hidden), acts[act])
    if (kind == 0) != (not hidden):
        raise ModelFormatError("architecture tag disagrees with hidden sizes")
    params = np.frombuffer(raw, dtype="<f8", offset=off).astype(np.float64)
    return Model(arch, params)
