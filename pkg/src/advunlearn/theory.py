"""Linear existence construction: perceptron-like learner, its exact
unlearning operator, the epsilon-shift attack, and Monte-Carlo checks."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .data import gaussian_halfspace
from .rng import Rng


@dataclass(frozen=True)
class LinearPair:
    d: int = 2000
    n: int = 40
    epsilon: float = 0.5
    m_forget: int | None = None  # None: use the minimal feasible m
    beta: float = 0.05


@dataclass
class LearnResult:
    h: np.ndarray
    empty: bool = False


def _check_labels(y: np.ndarray) -> None:
    if y.size and not np.all(np.isin(y, (-1, 1))):
        raise ValueError("labels must be -1 or +1")


def theory_learn(X, y, d: int | None = None) -> LearnResult:
    """``h = sum_i y_i x_i``. An empty dataset yields the zero vector, flagged."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    _check_labels(y)
    if y.size == 0:
        dim = d if d is not None else (X.shape[1] if X.ndim == 2 else 0)
        return LearnResult(np.zeros(dim), empty=True)
    return LearnResult(y.astype(np.float64) @ X)


def theory_unlearn(h_hat, X_forget, y_forget) -> np.ndarray:
    """``h - sum_{forget} y x``; forget may be empty."""
    h_hat = np.asarray(h_hat, dtype=np.float64)
    y_forget = np.asarray(y_forget)
    if y_forget.size == 0:
        return h_hat.copy()
    _check_labels(y_forget)
    return h_hat - y_forget.astype(np.float64) @ np.asarray(X_forget, dtype=np.float64)


def theory_attack(h_hat, X_forget, y_forget, epsilon: float) -> np.ndarray:
    """Shift every forget input by ``epsilon * y * h_hat / ||h_hat||``."""
    h_hat = np.asarray(h_hat, dtype=np.float64)
    norm = np.linalg.norm(h_hat)
    if norm == 0:
        raise ValueError("h_hat is zero; the attack direction is undefined")
    y = np.asarray(y_forget, dtype=np.float64)
    return np.asarray(X_forget, dtype=np.float64) + epsilon * y[:, None] * (h_hat / norm)[None, :]


def predict(h, X) -> np.ndarray:
    return np.sign(np.asarray(X) @ np.asarray(h))


def zero_one_loss(h, X, y) -> float:
    """Mean of ``1{y != sign(<h, x>)}``; a zero margin counts as an error."""
    return float(np.mean(predict(h, X) != np.asarray(y)))


def minimal_forget_size(h_hat, epsilon: float) -> int:
    """Smallest integer m with ``epsilon * m > ||h_hat||``."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    return int(math.floor(np.linalg.norm(h_hat) / epsilon)) + 1


@dataclass
class TrialOutcome:
    seed: int
    train_accuracy: float
    unlearn_gap: float
    m_forget: int
    feasible: bool
    retain_misclassified: float | None

    @property
    def part1(self) -> bool:
        return self.train_accuracy == 1.0

    @property
    def part3(self) -> bool:
        return self.feasible and self.retain_misclassified == 1.0


def run_trial(cfg: LinearPair, seed: int) -> TrialOutcome:
    """One draw of D_train from P_{h*} and the three checks on it."""
    rng = Rng(seed, (0x7E0,))
    X, y, _ = gaussian_halfspace(cfg.d, cfg.n, rng.child(0))
    h = theory_learn(X, y).h
    train_acc = 1.0 - zero_one_loss(h, X, y)

    perm = rng.child(1).permutation(cfg.n)
    m_min = minimal_forget_size(h, cfg.epsilon)
    m = m_min if cfg.m_forget is None else cfg.m_forget
    feasible = m >= m_min and m < cfg.n
    m = min(m, cfg.n)
    f_idx, r_idx = perm[:m], perm[m:]

    gap = float(np.max(np.abs(theory_unlearn(h, X[f_idx], y[f_idx])
                              - theory_learn(X[r_idx], y[r_idx], cfg.d).h)))
    mis = None
    if feasible:
        X_adv = theory_attack(h, X[f_idx], y[f_idx], cfg.epsilon)
        h_adv = theory_unlearn(h, X_adv, y[f_idx])
        mis = zero_one_loss(h_adv, X[r_idx], y[r_idx])
    return TrialOutcome(seed, train_acc, gap, m, feasible, mis)


def verify_theorem(cfg: LinearPair, seeds, pass_rate: float = 0.95,
                   identity_tol: float = 1e-12) -> dict:
    """JSON-ready verdicts per theorem part over the given seeds."""
    seeds = list(seeds)
    outs = [run_trial(cfg, s) for s in seeds]
    n = len(outs)
    p1 = sum(o.part1 for o in outs)
    p2 = sum(o.unlearn_gap <= identity_tol for o in outs)
    p3 = sum(o.part3 for o in outs)
    infeasible = sum(not o.feasible for o in outs)
    need = math.ceil(pass_rate * n)
    return {
        "config": asdict(cfg),
        "seeds": n,
        "part1_perfect_train_accuracy": {"passed": p1, "required": need, "verdict": p1 >= need},
        "part2_exact_unlearning": {"passed": p2, "required": n, "verdict": p2 == n,
                                   "max_gap": max(o.unlearn_gap for o in outs)},
        "part3_retain_misclassified": {
            "passed": p3, "required": need, "verdict": p3 >= need,
            "infeasible": infeasible,
            "m_forget": [o.m_forget for o in outs],
            "mean_retain_error": float(np.mean([o.retain_misclassified for o in outs
                                                if o.retain_misclassified is not None] or [np.nan])),
        },
    }


def fact1_bound(epsilon: float, d: int) -> float:
    """``2 exp(-eps^2 d / 4)``, clamped to 1."""
    return min(1.0, 2.0 * math.exp(-epsilon ** 2 * d / 4.0))


def verify_fact1(d: int, sigma: float, n_samples: int, rng: Rng, epsilon: float = 0.3,
                 chunk: int = 1000) -> dict:
    """Empirical tail rates of ``|‖x‖² - dσ²|`` and ``|<x, x'>|`` beyond ``ε dσ²``."""
    if d < 2:
        raise ValueError("d must be at least 2")
    scale = d * sigma ** 2
    norm_hits = inner_hits = 0
    done = 0
    i = 0
    while done < n_samples:
        k = min(chunk, n_samples - done)
        c = rng.child(i)
        x = c.child(0).normal(size=(k, d), scale=sigma)
        x2 = c.child(1).normal(size=(k, d), scale=sigma)
        norm_hits += int(np.count_nonzero(np.abs(np.einsum("ij,ij->i", x, x) - scale)
                                          > epsilon * scale))
        inner_hits += int(np.count_nonzero(np.abs(np.einsum("ij,ij->i", x, x2))
                                           > epsilon * scale))
        done += k
        i += 1
    bound = fact1_bound(epsilon, d)
    return {"d": d, "sigma": sigma, "epsilon": epsilon, "n_samples": n_samples,
            "norm_tail_rate": norm_hits / n_samples, "inner_tail_rate": inner_hits / n_samples,
            "bound": bound,
            "within_bound": norm_hits / n_samples <= bound and inner_hits / n_samples <= bound}
