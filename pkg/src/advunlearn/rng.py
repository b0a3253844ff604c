"""Splittable, counter-based random streams (numpy Philox)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Rng:
    """A named random stream.

    The stream is fully determined by ``(seed, path)``; ``child(key)`` derives an
    independent stream without consuming from this one, so parallel trials can
    be split deterministically regardless of scheduling order.
    """

    seed: int
    path: tuple[int, ...] = ()
    _gen: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        ss = np.random.SeedSequence([int(self.seed), *map(int, self.path)])
        object.__setattr__(self, "_gen", np.random.Generator(np.random.Philox(ss)))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def child(self, key: int) -> "Rng":
        return Rng(self.seed, self.path + (int(key),))

    def split(self, n: int) -> list["Rng"]:
        return [self.child(i) for i in range(n)]

    def normal(self, size=None, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=size)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)


def as_rng(rng: "Rng | int") -> Rng:
    return rng if isinstance(rng, Rng) else Rng(int(rng))


def unit_sphere_sample(rng: Rng, shape) -> np.ndarray:
    """Draw a direction uniformly from the unit sphere, returned with ``shape``.

    The norm is taken over all elements together.
    """
    shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
    if len(shape) == 0 or any(int(s) <= 0 for s in shape):
        raise ValueError(f"shape must be nonempty with positive dims, got {shape}")
    v = rng.normal(size=shape)
    norm = np.linalg.norm(v)
    while norm == 0.0:  # measure-zero, but keep the contract
        v = rng.normal(size=shape)
        norm = np.linalg.norm(v)
    return v / norm
