import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from advdetect.attacks import (
    cw,
    fgsm,
    generate_attack_set,
    jsma,
    load_attack_set,
    pgd,
    resolve_targets,
    save_attack_set,
)
from advdetect.classifiers import Classifier, SmallCNN, predict
from advdetect.types import AttackConfig, ConfigError, RangeError, TargetRule

from conftest import linear_classifier


def softmax(z):
    e = np.exp(z - z.max())
    return e / e.sum()


# --- FGSM -------------------------------------------------------------------

def test_fgsm_zero_eps_is_identity(small_cnn, rng):
    x = rng.random((3, 16, 16, 3)).astype(np.float32)
    assert np.array_equal(fgsm(small_cnn, x, [0, 1, 2], 0.0), x)


def test_fgsm_positive_gradient_adds_eps():
    # y = 0 and class 1 increases with every pixel => dJ/dx > 0 everywhere
    w = np.vstack([np.zeros(6), np.linspace(0.5, 1.5, 6)])
    model = linear_classifier(w, image_shape=(2, 3, 1))
    x = np.random.default_rng(1).uniform(0.2, 0.8, (2, 2, 3, 1))
    adv = fgsm(model, x, [0, 0], 0.03)
    assert np.array_equal(adv, x + 0.03)


def test_fgsm_linear_closed_form():
    w = np.array([[2.0, -1.0], [-0.5, 1.0], [0.3, 0.3]])
    b = np.array([0.1, -0.2, 0.0])
    model = linear_classifier(w, b)
    x = np.array([0.4, 0.99]).reshape(1, 1, 2, 1)
    y = 2
    grad = w.T @ (softmax(w @ x.reshape(2) + b) - np.eye(3)[y])
    expected = np.clip(x.reshape(2) + 0.05 * np.sign(grad), 0, 1)
    np.testing.assert_array_equal(fgsm(model, x, [y], 0.05).reshape(2), expected)


def test_fgsm_negative_eps():
    with pytest.raises(RangeError):
        fgsm(linear_classifier([[1.0], [0.0]]), np.zeros((1, 1, 1, 1)), [0], -0.1)


# --- PGD --------------------------------------------------------------------

def test_pgd_zero_eps_is_identity(small_cnn, rng):
    x = rng.random((2, 16, 16, 3)).astype(np.float32)
    cfg = AttackConfig("PGD", epsilon=0.0, steps=7)
    assert np.array_equal(pgd(small_cnn, x, [3, 4], cfg), x)


def test_pgd_single_step_equals_fgsm(small_cnn, rng):
    x = rng.random((5, 16, 16, 3)).astype(np.float32)
    y = [0, 1, 2, 3, 4]
    eps = 8 / 255
    cfg = AttackConfig("PGD", epsilon=eps, alpha=eps, steps=1, random_start=False)
    assert np.array_equal(pgd(small_cnn, x, y, cfg), fgsm(small_cnn, x, y, eps))


@settings(max_examples=15, deadline=None)
@given(eps=st.floats(0, 0.2), steps=st.integers(1, 4), seed=st.integers(0, 100), start=st.booleans())
def test_linf_bound_property(eps, steps, seed, start):
    torch.manual_seed(0)
    small_cnn = Classifier(SmallCNN(3, 10, 16), "SMALL_CNN", 10, (16, 16, 3))
    x = np.random.default_rng(seed).random((3, 16, 16, 3)).astype(np.float32)
    # push some pixels to the range edges
    x[0, :4] = 0.0
    x[1, :4] = 1.0
    y = [seed % 10, (seed + 1) % 10, (seed + 2) % 10]
    cfg = AttackConfig("PGD", epsilon=eps, alpha=max(eps / 2, 1e-3), steps=steps, random_start=start)
    for adv in (fgsm(small_cnn, x, y, eps), pgd(small_cnn, x, y, cfg)):
        assert np.abs(adv - x).max() <= eps + 1e-9
        assert adv.min() >= 0.0 and adv.max() <= 1.0


# --- JSMA -------------------------------------------------------------------

def test_jsma_zero_gamma_is_identity(small_cnn, rng):
    x = rng.random((2, 16, 16, 3)).astype(np.float32)
    assert np.array_equal(jsma(small_cnn, x, [1, 2], 1.0, 0.0), x)


def brute_force_pair(w, t, x, increase=True):
    a = w[t]
    b = w.sum(0) - w[t]
    best, pair = -np.inf, None
    for p, q in itertools.combinations(range(len(a)), 2):
        if increase and not (x[p] < 1 and x[q] < 1):
            continue
        sa, sb = a[p] + a[q], b[p] + b[q]
        ok = (sa > 0 and sb < 0) if increase else (sa < 0 and sb > 0)
        if ok and -sa * sb > best:
            best, pair = -sa * sb, {p, q}
    return pair


@pytest.mark.parametrize("seed", range(8))
def test_jsma_pair_matches_exhaustive_search(seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(3, 3))
    x = rng.uniform(0.1, 0.6, 3)
    pred = int(np.argmax(w @ x))
    t = (pred + 1) % 3
    expected = brute_force_pair(w, t, x)
    # gamma = 2/3 on 3 features gives exactly one pair update
    adv = jsma(linear_classifier(w), x.reshape(1, 1, 3, 1), [t], 1.0, 2 / 3, candidates=None)
    changed = set(np.flatnonzero(adv.reshape(3) != x))
    if expected is None:
        assert changed == set()
    else:
        assert changed == expected
        assert np.all(adv.reshape(3)[list(expected)] == 1.0)


def test_jsma_l0_bound(small_cnn, rng):
    x = rng.random((4, 16, 16, 3)).astype(np.float32)
    gamma = 0.05
    adv = jsma(small_cnn, x, [1, 2, 3, 4], 1.0, gamma, candidates=16)
    budget = gamma * 16 * 16 * 3
    assert all(np.count_nonzero(a != b) <= budget for a, b in zip(adv, x))
    assert adv.min() >= 0 and adv.max() <= 1


def test_jsma_stops_when_target_reached():
    # pair (1, 2) is the only admissible one and one update flips the label;
    # gamma = 1 would allow a second update if the loop did not stop
    w = np.array([[1.0, -1.0, -1.0, 1.0], [-1.0, 2.0, 2.0, -1.0]])
    model = linear_classifier(w)
    x = np.array([0.6, 0.2, 0.2, 0.6]).reshape(1, 1, 4, 1)
    assert predict(model, x)[0] == 0
    adv = jsma(model, x, [1], 1.0, 1.0, candidates=None)
    assert predict(model, adv)[0] == 1
    assert np.count_nonzero(adv != x) == 2


def test_jsma_gamma_range():
    with pytest.raises(RangeError):
        jsma(linear_classifier([[1.0], [0.0]]), np.zeros((1, 1, 1, 1)), [1], 1.0, 1.2)


# --- CW ---------------------------------------------------------------------

def test_cw_already_target_returns_input():
    model = linear_classifier([[0.0, 0.0], [1.0, 1.0]])
    x = np.full((1, 1, 2, 1), 0.6)
    adv, ok = cw(model, x, [1], confidence=0.0)
    assert ok[0]
    assert np.linalg.norm(adv - x) < 1e-4


def grid_min_perturbation(w, b, x, t, step=1e-3):
    """Smallest-norm delta in the box that makes class t the strict argmax."""
    d0 = np.arange(-x[0], 1 - x[0] + step / 2, step)
    d1 = np.arange(-x[1], 1 - x[1] + step / 2, step)
    g0, g1 = np.meshgrid(d0, d1, indexing="ij")
    pts = np.stack([x[0] + g0, x[1] + g1], -1)
    z = pts @ w.T + b
    others = np.delete(z, t, axis=-1).max(-1)
    feasible = z[..., t] > others
    norm = np.where(feasible, g0**2 + g1**2, np.inf)
    i = np.unravel_index(np.argmin(norm), norm.shape)
    return np.array([g0[i], g1[i]])


@pytest.mark.parametrize("abort_early", [True, False])
def test_cw_matches_grid_search(abort_early):
    w = np.array([[0.0, 0.0], [1.0, 2.0]])
    b = np.array([0.0, -1.5])
    x = np.array([0.3, 0.4])
    model = linear_classifier(w, b)
    adv, ok = cw(model, x.reshape(1, 1, 2, 1), [1], lr=1e-2, iters=1000, initial_c=1e-2, binary_search_steps=10, abort_early=abort_early)
    assert ok[0]
    delta = adv.reshape(2) - x
    oracle = grid_min_perturbation(w, b, x, 1)
    np.testing.assert_allclose(delta, oracle, atol=1e-2)


def test_cw_config_errors():
    model = linear_classifier([[1.0], [0.0]])
    with pytest.raises(ConfigError):
        cw(model, np.zeros((1, 1, 1, 1)), [1], iters=0)
    with pytest.raises(ConfigError):
        cw(model, np.zeros((1, 1, 1, 1)), [1], lr=0)
    with pytest.raises(ConfigError):
        cw(model, np.zeros((1, 1, 1, 1)), [1], confidence=-1)


# --- attack sets ------------------------------------------------------------

def test_resolve_targets():
    y = np.array([0, 5, 9])
    assert resolve_targets(y, AttackConfig("CW"), 10).tolist() == [1, 6, 0]
    assert resolve_targets(y, AttackConfig("PGD"), 10).tolist() == [0, 5, 9]
    assert resolve_targets(y, AttackConfig("JSMA", target_rule="FIXED", fixed_target=3), 10).tolist() == [3, 3, 3]


def test_generate_fgsm_zero_eps(small_cnn, rng):
    x = rng.random((6, 16, 16, 3)).astype(np.float32)
    y = rng.integers(0, 10, 6)
    out = generate_attack_set(small_cnn, x, y, AttackConfig("FGSM", epsilon=0.0, batch_size=4))
    assert np.array_equal(out.adv, x)
    assert np.array_equal(out.success_mask, predict(small_cnn, x) != y)


@pytest.mark.parametrize("family", ["FGSM", "PGD", "JSMA", "CW"])
def test_generate_is_deterministic(small_cnn, rng, family):
    x = rng.random((3, 16, 16, 3)).astype(np.float32)
    y = np.array([1, 2, 3])
    cfg = AttackConfig(family, steps=2, cw_iters=5, cw_binary_steps=2, gamma=0.02, batch_size=2)
    a = generate_attack_set(small_cnn, x, y, cfg, seed=3)
    b = generate_attack_set(small_cnn, x, y, cfg, seed=3)
    assert np.array_equal(a.adv, b.adv) and np.array_equal(a.success_mask, b.success_mask)
    assert a.adv.shape == x.shape
    if cfg.target_rule is TargetRule.NEXT_CLASS:
        assert a.targets.tolist() == [2, 3, 4]
        assert np.array_equal(a.success_mask, predict(small_cnn, a.adv) == a.targets)


def test_jsma_untargeted_rejected(small_cnn):
    with pytest.raises(ConfigError):
        generate_attack_set(small_cnn, np.zeros((1, 16, 16, 3)), [0], AttackConfig("JSMA", target_rule="UNTARGETED"))


def test_attack_set_round_trip(tmp_path, small_cnn, rng):
    x = rng.random((2, 16, 16, 3)).astype(np.float32)
    out = generate_attack_set(small_cnn, x, [0, 1], AttackConfig("PGD", steps=1), seed=1, source_indices=[10, 11])
    save_attack_set(out, tmp_path / "pgd.npz", seed=1)
    back = load_attack_set(tmp_path / "pgd.npz")
    assert np.array_equal(back.adv, out.adv) and back.source_indices.tolist() == [10, 11]
    assert back.config == out.config
