import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from advunlearn import attacks
from advunlearn.attacks import (AttackDivergedError, AttackError, AttackSpec, black_box_attack,
                                black_box_attack_avg, estimate_gradient_zo, make_objective,
                                project_l2, run_attack, selection_attack, white_box_attack,
                                zo_estimate)
from advunlearn.data import DatasetSplit, SyntheticSpec, generate, sample_forget_set
from advunlearn.models import OptimizerSpec, accuracy, mlp, train_model
from advunlearn.rng import Rng, unit_sphere_sample
from advunlearn.unlearning import UnlearnSpec, unlearn

GA = UnlearnSpec(learning_rate=0.5)


class Surrogate:
    """Stand-in objective with a closed-form gradient."""

    def __init__(self, f, grad=None):
        self.f, self.grad, self.calls = f, grad, 0

    def __call__(self, X):
        self.calls += 1
        return float(self.f(X))

    def value_and_grad(self, X):
        self.calls += 1
        return float(self.f(X)), self.grad(X)


@pytest.fixture
def patch_objective(monkeypatch):
    def install(obj):
        monkeypatch.setattr(attacks, "make_objective", lambda *a, **k: obj)
        return obj
    return install


# ---------------------------------------------------------------- white box

def test_zero_steps_returns_initialization(small_model, small_split):
    r = white_box_attack(small_model, small_split, GA, AttackSpec(t_adv=0), Rng(0))
    np.testing.assert_array_equal(r.adversarial_inputs, small_split.forget[0])
    assert len(r.trace) == 1


def test_quadratic_surrogate_step(small_model, small_split, patch_objective):
    patch_objective(Surrogate(lambda X: np.sum(X ** 2), lambda X: 2 * X))
    eta = 0.1
    r = white_box_attack(small_model, small_split, GA, AttackSpec(eta_adv=eta, t_adv=1), Rng(0))
    X0 = small_split.forget[0]
    np.testing.assert_allclose(r.adversarial_inputs, X0 + 2 * eta * X0, rtol=1e-15)
    assert r.best_step == 1


def test_best_so_far_is_returned(small_model, small_split, patch_objective):
    # g rises then falls along the ascent path, so the last iterate is not the best
    X0 = small_split.forget[0]
    t = lambda X: np.mean(X - X0) * X0.size  # advances by eta per step
    patch_objective(Surrogate(lambda X: -(t(X) - 3.0) ** 2, lambda X: np.full_like(X, 1 / X.size)))
    r = white_box_attack(small_model, small_split, GA, AttackSpec(eta_adv=1.0, t_adv=6), Rng(0))
    assert r.best_step == 3 and r.best_value == max(r.trace)
    np.testing.assert_allclose(r.adversarial_inputs, X0 + 3.0 / X0.size)


def test_white_box_raises_retain_loss(small_model, small_split):
    r = white_box_attack(small_model, small_split, GA, AttackSpec(eta_adv=0.5, t_adv=5), Rng(0))
    assert r.best_value > r.trace[0]
    assert r.adversarial_inputs.shape == small_split.forget[0].shape
    np.testing.assert_array_equal(r.labels, small_split.forget[1])


def test_white_box_needs_differentiable_method(small_model, small_split):
    spec = UnlearnSpec(method="ExactRetrain", train_recipe=OptimizerSpec(epochs=1))
    with pytest.raises(AttackError):
        white_box_attack(small_model, small_split, spec, AttackSpec(), Rng(0))


def test_divergence_carries_step(small_model, small_split, patch_objective):
    patch_objective(Surrogate(lambda X: np.sum(X ** 2), lambda X: np.full_like(X, 1e308)))
    with np.errstate(all="ignore"), pytest.raises(AttackDivergedError) as exc:
        white_box_attack(small_model, small_split, GA, AttackSpec(eta_adv=10.0, t_adv=3), Rng(0))
    assert exc.value.step == 0


@pytest.mark.parametrize("mode", ["white_box", "black_box", "black_box_avg"])
def test_projection_invariant(small_model, small_split, mode):
    spec = AttackSpec(mode=mode, eta_adv=5.0 if mode == "white_box" else 500.0, t_adv=3, p=2, m=2,
                      d_avg=2, projection_radius=0.3)
    r = run_attack(small_model, small_split, GA, spec, Rng(1))
    norms = np.linalg.norm(r.adversarial_inputs - r.initial_inputs, axis=1)
    assert np.all(norms <= 0.3 + 1e-9)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-10, 10)),
       arrays(np.float64, (4, 6), elements=st.floats(-1, 1)), st.floats(0.01, 5))
def test_project_l2_property(X, O, r):
    P = project_l2(X, O, r)
    assert np.all(np.linalg.norm(P - O, axis=1) <= r + 1e-9)
    inside = np.linalg.norm(X - O, axis=1) <= r
    np.testing.assert_array_equal(P[inside], X[inside])
    assert project_l2(X, O, None) is X


def test_targeted_attack_concentrates_damage():
    spec = SyntheticSpec(dim=64, n_classes=4, noise=0.5, clip=True, n_train=200, n_holdout=100,
                         seed=3)
    Xt, yt, Xh, yh = generate(spec)
    model = train_model(mlp(64, [16], 4), Xt, yt, OptimizerSpec(0.05, 0.9, 5e-4, 32, 8), Rng(0))
    base = DatasetSplit(Xt, yt, Xh, yh)
    split = base.with_forget(sample_forget_set(base, 10, Rng(11)))
    target = 2
    r = white_box_attack(model, split, GA, AttackSpec(eta_adv=1.0, t_adv=10, target_class=target),
                         Rng(0))
    benign = unlearn(model, split, GA, Rng(0))
    adv = unlearn(model, split, GA, Rng(0), forget_inputs=r.adversarial_inputs)
    Xr, yr = split.retain

    def drop(c):
        sel = yr == c
        return accuracy(benign, Xr[sel], yr[sel]) - accuracy(adv, Xr[sel], yr[sel])

    assert all(drop(target) >= drop(c) for c in range(4) if c != target)
    assert drop(target) > 0


def test_targeted_needs_class_in_batch(small_model, small_split):
    with pytest.raises(AttackError):
        white_box_attack(small_model, small_split, GA, AttackSpec(t_adv=1, target_class=9), Rng(0))


# ---------------------------------------------------------------- zeroth order

def test_zo_linear_expectation():
    # E[<a, D> D] = a / dim for D uniform on the unit sphere
    dim, n = 12, 10_000
    a = np.random.default_rng(0).normal(size=dim)
    g = lambda v: float(a @ v)
    rng = Rng(7)
    est = np.mean([zo_estimate(g, np.zeros(dim), unit_sphere_sample(rng.child(i), (dim,)))[0]
                   for i in range(n)], axis=0)
    # per-coordinate sd of <a,D>D_i is about |a| / dim
    tol = 4 * np.linalg.norm(a) / dim / np.sqrt(n)
    np.testing.assert_allclose(est, a / dim, atol=tol)


def test_zo_single_draw_is_projection():
    a = np.array([1.0, -2.0, 0.5])
    d = unit_sphere_sample(Rng(3), (3,))
    est, gp, gm = zo_estimate(lambda v: float(a @ v), np.zeros(3), d)
    np.testing.assert_allclose(est, (a @ d) * d, atol=1e-15)


def test_zo_sign_symmetry():
    g = lambda v: float(np.sin(v).sum() + v[0] ** 2)
    z = np.array([0.1, 0.2, -0.3])
    d = unit_sphere_sample(Rng(0), (3,))
    np.testing.assert_array_equal(zo_estimate(g, z, d)[0], zo_estimate(g, z, -d)[0])


def test_constant_objective_skips():
    assert estimate_gradient_zo(np.zeros(5), lambda v: 1.0, Rng(0)) is None


def test_improving_probe_updates():
    a = np.ones(4)
    z = estimate_gradient_zo(np.zeros(4), lambda v: float(a @ v), Rng(0), eta_adv=2.0)
    d = unit_sphere_sample(Rng(0), (4,))
    np.testing.assert_allclose(z, 2.0 * (a @ d) * d)


def test_averaged_variance_shrinks():
    dim, d_avg, trials = 10, 8, 1000
    a = np.random.default_rng(1).normal(size=dim)
    g = lambda v: float(a @ v)

    def estimate(rng, k):
        return np.mean([zo_estimate(g, np.zeros(dim), unit_sphere_sample(rng.child(j), (dim,)))[0]
                        for j in range(k)], axis=0)

    single = np.array([estimate(Rng(0, (i,)), 1) for i in range(trials)])
    avg = np.array([estimate(Rng(1, (i,)), d_avg) for i in range(trials)])
    ratio = avg.var(axis=0).sum() / single.var(axis=0).sum()
    assert abs(ratio - 1 / d_avg) < 0.35 / d_avg


# ---------------------------------------------------------------- black box

def test_single_accepted_update(small_model, small_split, patch_objective):
    a = np.random.default_rng(0).normal(size=small_split.forget[0].shape)
    obj = patch_objective(Surrogate(lambda X: np.sum(a * X)))
    r = black_box_attack(small_model, small_split, GA,
                         AttackSpec(mode="black_box", eta_adv=1.0, t_adv=1, p=1, m=1), Rng(0))
    # linear g: one of the two probes always improves
    assert r.trace[1] > r.trace[0]
    assert obj.calls == 1 + 2 + 1
    assert r.query_count == obj.calls


def test_skip_rule_and_avg_no_skip(small_model, small_split, patch_objective, monkeypatch):
    X0 = small_split.forget[0]
    c = X0 + 0.01 * np.random.default_rng(0).normal(size=X0.shape) / np.sqrt(X0.size)
    f = lambda X: -np.sum((X - c) ** 2)  # unit probes from X0 never improve
    offered = []
    real = attacks._prune
    monkeypatch.setattr(attacks, "_prune", lambda cs, m: offered.append(len(cs)) or real(cs, m))
    patch_objective(Surrogate(f))
    r = black_box_attack(small_model, small_split, GA,
                         AttackSpec(mode="black_box", eta_adv=1.0, t_adv=1), Rng(0))
    np.testing.assert_array_equal(r.adversarial_inputs, X0)
    assert offered == [1, 1]
    offered.clear()
    obj = patch_objective(Surrogate(f))
    black_box_attack_avg(small_model, small_split, GA,
                         AttackSpec(mode="black_box_avg", eta_adv=1.0, t_adv=1, d_avg=1), Rng(0))
    # the non-improving update still joins the pool and is evaluated
    assert offered == [1, 2]
    assert obj.calls == 1 + 2 + 1


def test_candidate_pool_is_capped(small_model, small_split, patch_objective, monkeypatch):
    sizes = []
    real = attacks._prune
    monkeypatch.setattr(attacks, "_prune", lambda c, m: sizes.append(len(real(c, m))) or real(c, m))
    a = np.random.default_rng(0).normal(size=small_split.forget[0].shape)
    patch_objective(Surrogate(lambda X: np.sum(a * X)))
    black_box_attack(small_model, small_split, GA,
                     AttackSpec(mode="black_box", eta_adv=1.0, t_adv=4, p=3, m=3), Rng(0))
    assert sizes[0] == 1 and max(sizes) <= 3 and sizes[-1] == 3
    sizes.clear()
    patch_objective(Surrogate(lambda X: np.sum(a * X)))
    black_box_attack_avg(small_model, small_split, GA,
                         AttackSpec(mode="black_box_avg", eta_adv=1.0, t_adv=2, p=1, m=3,
                                    zo_init_scale=0.1), Rng(0))
    assert sizes[0] == 3 and max(sizes) <= 3


def test_prune_ties_keep_insertion_order():
    C = attacks._Candidate
    pool = [C(np.zeros(1), 1.0, 2), C(np.zeros(1), 1.0, 0), C(np.zeros(1), 2.0, 5)]
    assert [c.order for c in attacks._prune(pool, 2)] == [5, 0]


def test_black_box_is_deterministic(small_model, small_split):
    spec = AttackSpec(mode="black_box", eta_adv=300.0, t_adv=3, p=2, m=2)
    a = black_box_attack(small_model, small_split, GA, spec, Rng(4))
    b = black_box_attack(small_model, small_split, GA, spec, Rng(4))
    assert a.adversarial_inputs.tobytes() == b.adversarial_inputs.tobytes()
    assert a.query_count == b.query_count
    assert a.best_value == max(a.trace)
    assert all(x <= y for x, y in zip(a.trace, a.trace[1:]))


def test_white_box_and_zo_directions_agree():
    Xt, yt, Xh, yh = generate(SyntheticSpec(dim=20, n_classes=3, noise=0.6, n_train=120,
                                            n_holdout=30, seed=5))
    model = train_model(mlp(20, [8], 3), Xt, yt, OptimizerSpec(0.05, 0.9, 0.0, 16, 10), Rng(0))
    base = DatasetSplit(Xt, yt, Xh, yh)
    split = base.with_forget(sample_forget_set(base, 1, Rng(2)))
    spec = UnlearnSpec(learning_rate=1e-2, momentum=0.0, weight_decay=0.0)
    g = make_objective(model, split, spec, AttackSpec(), Rng(0))
    X0 = split.forget[0]
    _, wb = g.value_and_grad(X0)
    zo = np.zeros_like(X0)
    rng = Rng(3)
    for i in range(1000):
        zo += zo_estimate(g, X0, 1e-3 * unit_sphere_sample(rng.child(i), X0.shape))[0] / 1e-6
    cos = float(np.sum(wb * zo) / (np.linalg.norm(wb) * np.linalg.norm(zo)))
    assert cos > 0.5


@pytest.mark.parametrize("bad", [dict(eta_adv=0), dict(p=0), dict(m=0), dict(d_avg=0),
                                 dict(projection_radius=0.0), dict(mode="grey_box"),
                                 dict(init="noise")])
def test_spec_validation(bad):
    with pytest.raises(ValueError):
        AttackSpec(**bad)


def test_random_pixel_and_foreign_init(small_model, small_split, tmp_path):
    r = white_box_attack(small_model, small_split, GA, AttackSpec(t_adv=0, init="random_pixels"),
                         Rng(0))
    assert r.adversarial_inputs.min() >= 0 and r.adversarial_inputs.max() <= 1
    assert np.any(r.adversarial_inputs != small_split.forget[0])
    p = tmp_path / "foreign.csv"
    rows = np.random.default_rng(0).integers(0, 256, size=(30, 65))
    np.savetxt(p, rows, fmt="%d", delimiter=",")
    r = white_box_attack(small_model, small_split, GA,
                         AttackSpec(t_adv=0, init=f"foreign_dataset:{p}"), Rng(0))
    assert r.adversarial_inputs.shape == small_split.forget[0].shape
    np.savetxt(p, rows[:, :10], fmt="%d", delimiter=",")
    with pytest.raises(AttackError):
        white_box_attack(small_model, small_split, GA,
                         AttackSpec(t_adv=0, init=f"foreign_dataset:{p}"), Rng(0))


# ---------------------------------------------------------------- selection

def test_single_trial_selection(small_model, small_data):
    r = selection_attack(small_model, small_data, GA, 10, 1, Rng(0))
    assert r.max_error == r.mean_error == r.min_error
    assert len(r.best_indices) == 10


def test_selection_returns_argmax(small_model, small_data):
    r = selection_attack(small_model, small_data, GA, 10, 6, Rng(0))
    assert r.max_error == r.errors.max() and r.min_error <= r.mean_error <= r.max_error
    u = unlearn(small_model, small_data.with_forget(r.best_indices), GA, Rng(0).child(1 << 32))
    assert 1 - accuracy(u, *small_data.with_forget(r.best_indices).retain) == r.max_error
    with pytest.raises(ValueError):
        selection_attack(small_model, small_data, GA, 10, 0, Rng(0))
