import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from create_cil.losses import (
    LossConfig,
    LossError,
    ce_from_errors,
    ce_loss,
    confusion_score,
    confusion_scores,
    confusion_weight,
    cr_loss,
    cst_loss,
    kd_loss,
    total_loss,
)
from create_cil.model import predict_proba
from create_cil.numerics import Tensor, backward, ops


def t(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


# -- cross-entropy -------------------------------------------------------------------


def test_ce_one_hot_is_zero():
    assert ce_loss(t([[1.0, 0.0], [0.0, 1.0]]), [0, 1]).item() == 0.0


def test_ce_uniform_is_log_c():
    assert ce_loss(t(np.full((3, 5), 0.2)), [0, 2, 4]).item() == pytest.approx(math.log(5), rel=1e-14)


def test_ce_two_class_closed_form():
    p = predict_proba(t([[1.0, 2.0]]), 0.1)
    sigma = 1 / (1 + math.exp(-0.1))
    assert ce_loss(p, [0]).item() == pytest.approx(-math.log(sigma), rel=1e-13)
    assert ce_loss(p, [0]).item() == pytest.approx(0.6444, abs=1e-4)
    assert ce_from_errors(t([[1.0, 2.0]]), [0], 0.1).item() == pytest.approx(-math.log(sigma), rel=1e-13)


def test_ce_zero_target_probability_is_an_error():
    with pytest.raises(LossError):
        ce_loss(t([[1.0, 0.0]]), [1])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 3), elements=st.floats(0, 50)))
def test_ce_nonnegative(eps):
    assert ce_from_errors(t(eps), [0, 1, 2, 0], 0.1).item() >= 0.0


# -- distillation ------------------------------------------------------------------


def entropy(q):
    return -np.sum(q * np.log(q), axis=1).mean()


def test_kd_at_equality_is_target_entropy_with_zero_gradient():
    rng = np.random.default_rng(0)
    eps_old = rng.uniform(0, 10, size=(6, 4))
    eps_new = t(eps_old.copy(), grad=True)
    loss = kd_loss(eps_new, eps_old, 0.1, 2.0)
    logits = -0.1 * eps_old / 2.0
    q = np.exp(logits - logits.max(axis=1, keepdims=True))
    q /= q.sum(axis=1, keepdims=True)
    assert loss.item() == pytest.approx(entropy(q), rel=1e-13)
    (g,) = backward(loss, [eps_new])
    assert np.max(np.abs(g)) <= 1e-10


def test_kd_single_old_class_is_zero():
    assert kd_loss(t([[3.0], [1.0]], grad=True), np.array([[0.5], [7.0]]), 0.1, 2.0).item() == 0.0


def test_kd_without_old_classes_is_exact_zero():
    assert kd_loss(t(np.zeros((3, 0))), np.zeros((3, 0)), 0.1, 2.0).item() == 0.0


def test_kd_two_class_closed_form():
    q = 1 / (1 + math.exp(-0.05))
    expected = -q * math.log(1 - q) - (1 - q) * math.log(q)
    assert kd_loss(t([[1.0, 0.0]]), np.array([[0.0, 1.0]]), 0.1, 2.0).item() == pytest.approx(expected, rel=1e-13)


def test_kd_shape_mismatch():
    with pytest.raises(ValueError):
        kd_loss(t(np.zeros((2, 3))), np.zeros((2, 2)), 0.1, 2.0)


# -- confusion score and weight ---------------------------------------------------------


@pytest.mark.parametrize("row,s", [([1, 1, 5], 0.0), ([1, 2, 5], 0.25), ([1, 5], 1.0), ([3, 3, 3], 0.0)])
def test_confusion_score_examples(row, s):
    assert confusion_score(row) == s


def test_confusion_score_needs_two_classes():
    with pytest.raises(ValueError):
        confusion_score([1.0])


@settings(max_examples=200, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 7)), elements=st.floats(0, 100)),
    st.floats(1e-3, 1e3),
    st.floats(0, 100),
)
def test_confusion_score_affine_invariance(eps, a, b):
    # gaps below double resolution after the shift would turn into ties
    gaps = np.abs(eps[:, :, None] - eps[:, None, :])
    assume(np.all((gaps == 0) | (gaps > 1e-6 * (1 + b / a + np.abs(eps).max()))))
    s = confusion_scores(eps)
    assert np.all((s >= 0) & (s <= 1))
    np.testing.assert_allclose(confusion_scores(a * eps + b), s, atol=1e-12)
    np.testing.assert_array_equal(s, [confusion_score(r) for r in eps])


def test_confusion_weight_values():
    assert confusion_weight(0.0, 2.0) == 2.0
    assert confusion_weight(0.25, 2.0) == pytest.approx(1 + math.exp(-0.5), rel=1e-15)
    assert confusion_weight(0.25, 2.0) == pytest.approx(1.6065, abs=1e-4)
    assert confusion_weight(1e6, 2.0) == 1.0
    with pytest.raises(ValueError):
        confusion_weight(-0.1, 2.0)


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0.1, 10))
def test_confusion_weight_monotone_and_bounded(s1, s2, beta):
    w1, w2 = confusion_weight(s1, beta), confusion_weight(s2, beta)
    assert 1 + math.exp(-beta) - 1e-15 <= w1 <= 2.0
    if s1 < s2:
        assert w1 >= w2


# -- contrastive separation -----------------------------------------------------------


def reference_cr(latents, labels, weights, tau, include_anchor=False):
    """Scalar loop version: mean over the batch of weighted per-anchor terms."""
    n = len(labels)
    total = 0.0
    for a in range(n):
        c = labels[a]
        z = latents[c]
        pos = [p for p in range(n) if labels[p] == c and p != a]
        if not pos:
            continue
        denom_set = [k for k in range(n) if include_anchor or k != a]
        denom = sum(math.exp(z[a] @ z[k] / tau) for k in denom_set)
        term = -sum(math.log(math.exp(z[a] @ z[p] / tau) / denom) for p in pos) / len(pos)
        total += weights[a] * term
    return total / n


def test_cr_zero_without_positives():
    z = [t(np.random.default_rng(0).normal(size=(3, 2))) for _ in range(3)]
    assert cr_loss(z, [0, 1, 2]).item() == 0.0


def test_cr_two_identical_samples_without_negatives():
    z = [t([[0.3, 0.4], [0.3, 0.4]])]
    assert cr_loss(z, [0, 0], config=LossConfig(tau_r=0.1)).item() == 0.0


def test_cr_controlled_batch_matches_scalar_oracle():
    z0 = np.array([[0.5, 0.1], [0.4, -0.2], [-0.3, 0.6]])
    z1 = np.array([[0.2, 0.2], [-0.1, 0.7], [0.6, 0.0]])
    labels = [0, 0, 1]
    eps = np.array([[1.0, 2.0], [1.5, 1.6], [3.0, 0.5]])
    w = confusion_weight(confusion_scores(eps), 2.0)
    got = cr_loss([t(z0), t(z1)], labels, eps=eps, config=LossConfig(tau_r=0.1)).item()
    assert got == pytest.approx(reference_cr([z0, z1], labels, w, 0.1), abs=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.booleans())
def test_cr_random_batches_match_oracle(seed, include_anchor):
    rng = np.random.default_rng(seed)
    n, classes, l = 9, 3, 4
    labels = rng.integers(0, classes, size=n)
    latents = [np.tanh(rng.normal(size=(n, l))) for _ in range(classes)]
    weights = rng.uniform(1, 2, size=n)
    cfg = LossConfig(tau_r=0.5, include_anchor=include_anchor)
    got = cr_loss([t(z) for z in latents], labels, config=cfg, weights=weights).item()
    assert got == pytest.approx(reference_cr(latents, labels, weights, 0.5, include_anchor), rel=1e-10, abs=1e-12)


def test_cr_normalised_latents_use_unit_rows():
    rng = np.random.default_rng(1)
    labels = [0, 0, 1, 1]
    latents = [rng.normal(size=(4, 3)) for _ in range(2)]
    unit = [z / np.linalg.norm(z, axis=1, keepdims=True) for z in latents]
    got = cr_loss([t(z) for z in latents], labels, config=LossConfig(normalize_latents=True)).item()
    assert got == pytest.approx(reference_cr(unit, labels, np.ones(4), 0.1), rel=1e-12)


def test_cr_decreases_when_positive_pair_aligns():
    z = np.array([[1.0, 0.0], [0.6, 0.8], [0.0, 1.0]])
    labels = [0, 0, 1]
    base = cr_loss([t(z), t(z)], labels).item()
    closer = z.copy()
    closer[1] = [0.8, 0.6]  # larger dot with the anchor, same norm
    assert cr_loss([t(closer), t(closer)], labels).item() < base


def test_cst_is_cr_with_unit_weights():
    rng = np.random.default_rng(3)
    labels = [0, 1, 0, 1, 1]
    latents = [t(rng.normal(size=(5, 3))) for _ in range(2)]
    eps = rng.uniform(0, 5, size=(5, 2))
    assert cst_loss(latents, labels).item() == cr_loss(latents, labels, weights=np.ones(5)).item()
    assert cr_loss(latents, labels, eps=eps).item() >= cst_loss(latents, labels).item()


def test_cr_empty_batch():
    with pytest.raises(ValueError):
        cr_loss([t(np.zeros((0, 2)))], [])


def test_cr_weights_carry_no_gradient():
    rng = np.random.default_rng(4)
    eps = t(rng.uniform(0, 5, size=(4, 2)), grad=True)
    z = t(rng.normal(size=(4, 3)), grad=True)
    loss = cr_loss([z, z], [0, 0, 1, 1], eps=eps.data)
    ge, gz = backward(loss, [eps, z])
    assert np.all(ge == 0.0) and np.any(gz != 0.0)


# -- total --------------------------------------------------------------------------


def test_total_loss_composition():
    ce, kd, cr = t(0.7), t(0.2), t(1.5)
    assert total_loss(ce, kd, cr, 0.0).item() == pytest.approx(0.9)
    assert total_loss(ce, None, cr, 1.0).item() == pytest.approx(2.2)
    assert total_loss(ce, kd, cr, 2.0).item() == pytest.approx(3.9)
    assert total_loss(t(0.0), t(0.0), t(0.0), 1.0).item() == 0.0


def test_loss_config_validation():
    for bad in ({"alpha": 0.0}, {"tau_d": -1.0}, {"tau_r": 0.0}, {"beta": 0.0}, {"lam": -1.0}):
        with pytest.raises(ValueError):
            LossConfig(**bad)
    cfg = LossConfig()
    assert (cfg.alpha, cfg.beta, cfg.lam, cfg.tau_d, cfg.tau_r) == (0.1, 2.0, 1.0, 2.0, 0.1)


def test_cr_single_class_errors_fall_back_to_unit_weights():
    rng = np.random.default_rng(5)
    z = [t(rng.normal(size=(4, 3)))]
    assert cr_loss(z, [0] * 4, eps=rng.uniform(size=(4, 1))).item() == cst_loss(z, [0] * 4).item()
