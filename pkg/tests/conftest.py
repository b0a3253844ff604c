import numpy as np
import pytest

from advunlearn.data import DatasetSplit, SyntheticSpec, generate, sample_forget_set
from advunlearn.models import OptimizerSpec, mlp, train_model
from advunlearn.rng import Rng

SMALL = SyntheticSpec(dim=64, n_classes=4, noise=0.5, block=1, clip=True,
                      n_train=200, n_holdout=100, seed=3)
SMALL_RECIPE = OptimizerSpec(learning_rate=0.05, momentum=0.9, weight_decay=5e-4,
                             batch_size=32, epochs=8)


def fd_grad(f, x, h=1e-5):
    """Central finite differences of scalar ``f`` at every coordinate of ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


@pytest.fixture(scope="session")
def small_data():
    Xt, yt, Xh, yh = generate(SMALL)
    return DatasetSplit(Xt, yt, Xh, yh)


@pytest.fixture(scope="session")
def small_model(small_data):
    return train_model(mlp(64, [16], 4), small_data.X_train, small_data.y_train,
                       SMALL_RECIPE, Rng(0))


@pytest.fixture
def small_split(small_data):
    return small_data.with_forget(sample_forget_set(small_data, 10, Rng(11)))


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
