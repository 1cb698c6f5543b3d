import math

import numpy as np
import pytest

from advpretrain import autodiff as ad
from advpretrain.attacks import (AttackConfig, AttackError, classifier_loss_fn, diversity_ascent, diversity_score,
                                 eval_attack, gaussian_augment, gradient_matrix, joint_ensemble_attack,
                                 joint_objective, normalize_columns, parse_number, pgd_attack, task_loss_fn,
                                 task_rng, train_attack)
from advpretrain.models import init_model
from advpretrain.ssl_tasks import TaskSpec


def linear_loss(w):
    return lambda z: ad.tsum(ad.mul(z, w))


def test_rational_epsilon_is_exact():
    assert parse_number("8/255") == 8 / 255
    assert AttackConfig(epsilon="8/255").epsilon == 8 / 255
    with pytest.raises(ValueError):
        parse_number("eight")


def test_config_validation():
    with pytest.raises(AttackError):
        AttackConfig(epsilon=-0.1)
    with pytest.raises(AttackError):
        AttackConfig(norm="l1")
    with pytest.raises(AttackError):
        AttackConfig(alpha=0.0)
    assert AttackConfig(alpha=0.0, steps=0).steps == 0
    assert train_attack().steps == 10 and train_attack().random_start
    assert eval_attack().steps == 20 and not eval_attack().random_start


def test_linear_loss_reaches_corner():
    # the maximizer of w.x over the clipped box is x + eps*sign(w), clipped to [0, 1]
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(3, 2, 4, 4))
    w = rng.normal(size=x.shape)
    cfg = AttackConfig(epsilon=0.1, alpha=0.05, steps=10, random_start=False)
    x_adv = pgd_attack(linear_loss(w), x, cfg)
    expect = np.clip(x + 0.1 * np.sign(w), 0, 1)
    np.testing.assert_allclose(x_adv, expect, atol=1e-15)


def test_l2_linear_loss_moves_along_gradient():
    x = np.full((1, 1, 2, 2), 0.5)
    w = np.array([3.0, 4.0, 0.0, 0.0]).reshape(x.shape)
    cfg = AttackConfig(epsilon=0.2, alpha=0.05, steps=10, norm="l2", random_start=False)
    delta = (pgd_attack(linear_loss(w), x, cfg) - x).reshape(-1)
    np.testing.assert_allclose(delta, [0.12, 0.16, 0, 0], atol=1e-10)
    assert np.linalg.norm(delta) <= 0.2


def test_zero_budget_returns_input_exactly():
    x = np.random.default_rng(1).uniform(size=(4, 3, 16, 16))
    p = init_model("desk16", {"classifier": 4}, 0)
    for cfg in (train_attack(epsilon=0.0), eval_attack(epsilon=0.0)):
        out = pgd_attack(classifier_loss_fn(p, np.zeros(4, int)), x, cfg)
        assert out is not x and np.array_equal(out, x)


@pytest.mark.parametrize("norm", ["linf", "l2"])
def test_feasible_for_boundary_pixels(norm):
    rng = np.random.default_rng(2)
    x = rng.choice([0.0, 1.0, 0.3, 1 - 1e-17], size=(5, 3, 8, 8))
    p = init_model("desk8", {"classifier": 4}, 0)
    cfg = AttackConfig(epsilon=8 / 255 if norm == "linf" else 0.5, alpha=2 / 255, steps=10, norm=norm)
    x_adv = pgd_attack(classifier_loss_fn(p, rng.integers(0, 4, 5)), x, cfg)
    d = x_adv - x
    size = np.abs(d).max() if norm == "linf" else np.sqrt((d.reshape(5, -1) ** 2).sum(1)).max()
    assert size <= cfg.epsilon and x_adv.min() >= 0 and x_adv.max() <= 1


def test_attack_rejects_out_of_box_input():
    with pytest.raises(AttackError):
        pgd_attack(linear_loss(1.0), np.full((1, 2), 1.5), AttackConfig())


def test_nonfinite_loss_is_reported_with_step():
    fn = lambda z: ad.tsum(ad.mul(z, np.nan))
    with pytest.raises(AttackError, match="step 0"):
        pgd_attack(fn, np.full((1, 2), 0.5), AttackConfig(random_start=False))


def test_attack_is_deterministic_given_seed():
    x = np.random.default_rng(3).uniform(size=(3, 3, 8, 8))
    p = init_model("desk8", {"classifier": 4}, 1)
    fn = classifier_loss_fn(p, [0, 1, 2])
    a, b = pgd_attack(fn, x, train_attack(seed=4)), pgd_attack(fn, x, train_attack(seed=4))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, pgd_attack(fn, x, train_attack(seed=5)))


def test_attack_increases_loss():
    x = np.random.default_rng(4).uniform(size=(8, 3, 8, 8))
    p = init_model("desk8", {"classifier": 4}, 2)
    fn = classifier_loss_fn(p, np.arange(8) % 4)
    x_adv = pgd_attack(fn, x, eval_attack())
    assert fn(ad.Tensor(x_adv)).item() > fn(ad.Tensor(x)).item()


# ---------------------------------------------------------------- diversity

def two_columns(theta):
    return np.array([[1.0, math.cos(theta)], [0.0, math.sin(theta)], [0.0, 0.0]])


def test_orthonormal_columns_score_zero():
    q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(20, 3)))
    assert abs(diversity_score(q)) < 1e-9


def test_duplicated_columns_score_near_jitter():
    c = np.ones((5, 1)) / math.sqrt(5)
    assert diversity_score(np.hstack([c, c])) <= math.log(1e-12) + 1


@pytest.mark.parametrize("deg", [30, 45, 60, 90])
def test_two_column_angle(deg):
    theta = math.radians(deg)
    assert abs(diversity_score(two_columns(theta)) - math.log(1 - math.cos(theta) ** 2)) < 1e-9


def test_batched_scores():
    g = np.stack([two_columns(math.radians(d)) for d in (30, 90)])
    np.testing.assert_allclose(diversity_score(g), [math.log(0.25), 0.0], atol=1e-9)


def test_ascent_direction_matches_finite_differences():
    rng = np.random.default_rng(5)
    raw = rng.normal(size=(2, 6, 3))

    def g(u):
        cols, _, _ = normalize_columns(u)
        return float(np.sum(diversity_score(cols)))

    cols, norms, zero = normalize_columns(raw)
    du = diversity_ascent(cols, norms, zero)
    num = ad.finite_diff_gradient(g, raw, 1e-6)
    assert ad.relative_error(du, num) < 1e-6


def test_zero_gradient_column_is_flagged():
    raw = np.zeros((1, 4, 2))
    raw[0, :, 0] = 1.0
    cols, norms, zero = normalize_columns(raw)
    assert zero.tolist() == [[False, True]]
    assert np.all(diversity_ascent(cols, norms, zero)[..., 1] == 0)


# ---------------------------------------------------------------- joint attack

def ensemble_setup(seed=0):
    x = np.random.default_rng(seed).uniform(size=(3, 3, 8, 8))
    specs = [TaskSpec("rotation"), TaskSpec("jigsaw")]
    params = init_model("desk8", {s.task_id: s.width() for s in specs}, seed)
    samples = [s.sample(x, np.random.default_rng([seed, i])) for i, s in enumerate(specs)]
    return params, x, samples


def test_lambda_zero_matches_independent_attacks():
    params, x, samples = ensemble_setup()
    cfg = train_attack(seed=9)
    joint = joint_ensemble_attack(params, x, samples, cfg, lam=0.0)
    for i, s in enumerate(samples):
        alone = pgd_attack(task_loss_fn(params, s), x, cfg, rng=task_rng(cfg, i)) - x
        assert np.array_equal(joint[i], alone)


def test_joint_attack_feasible_and_raises_objective():
    params, x, samples = ensemble_setup(1)
    cfg = eval_attack()
    zero = [np.zeros_like(x) for _ in samples]
    deltas = joint_ensemble_attack(params, x, samples, cfg, lam=1.0)
    for d in deltas:
        assert np.abs(d).max() <= cfg.epsilon
        assert (x + d).min() >= 0 and (x + d).max() <= 1
    assert joint_objective(params, x, samples, deltas, 1.0) > joint_objective(params, x, samples, zero, 1.0)


def test_gradient_matrix_shape():
    params, x, samples = ensemble_setup()
    G = gradient_matrix(params, samples, [np.zeros_like(x)] * 2, x)
    assert G.columns.shape == (3, 3 * 64, 2) and G.task_ids == ("rotation", "jigsaw")
    np.testing.assert_allclose(np.linalg.norm(G.columns, axis=1), 1.0, atol=1e-12)
    assert np.all(diversity_score(G) <= 1e-9)


def test_joint_attack_needs_tasks():
    with pytest.raises(AttackError):
        joint_ensemble_attack(None, np.zeros((1, 3, 8, 8)), [], AttackConfig())


# ---------------------------------------------------------------- smoothing

def test_gaussian_augment():
    x = np.full((2000, 3), 0.5)
    y = gaussian_augment(x, 0.1, np.random.default_rng(0))
    assert y.min() >= 0 and y.max() <= 1
    assert abs((y - x).std() - 0.1) < 0.005
    assert np.array_equal(gaussian_augment(x, 0.0, np.random.default_rng(0)), x)
    with pytest.raises(AttackError):
        gaussian_augment(x, -1.0, np.random.default_rng(0))
