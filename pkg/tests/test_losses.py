"""Contrastive loss against a brute-force oracle, plus the scalar losses."""

import math

import numpy as np
import pytest

from sitenet import losses
from sitenet.autodiff import ShapeError, Tensor, grad_check
from sitenet.losses import (
    ContrastiveParams,
    DegenerateEmbeddingError,
    contrastive_loss,
    cosine_similarity,
    cross_entropy,
    overall_loss,
)


def brute_force_contrastive(z, labels, tau, mode):
    """Direct per-pair evaluation with explicit loops."""
    k = len(labels)
    zn = z / np.linalg.norm(z, axis=1, keepdims=True)
    sims = zn @ zn.T
    total, count = 0.0, 0
    for m in range(k):
        for n in range(k):
            if m == n or labels[m] != labels[n]:
                continue
            if mode == "negatives_only":
                den_idx = [j for j in range(k) if labels[j] != labels[m]]
            else:
                den_idx = [j for j in range(k) if j != m]
            if not den_idx:
                continue
            den = sum(math.exp(sims[m, j] / tau) for j in den_idx)
            total += math.log(den) - sims[m, n] / tau
            count += 1
    return (total / count, count) if count else (0.0, 0)


def test_matches_brute_force_both_modes():
    rng = np.random.default_rng(0)
    for trial in range(60):
        k = int(rng.integers(2, 9))
        d = int(rng.integers(2, 6))
        z = rng.standard_normal((k, d))
        labels = rng.integers(0, 2, size=k)
        tau = float(rng.uniform(0.03, 0.5))
        for mode in ("negatives_only", "all_other"):
            params = ContrastiveParams(tau=tau, denominator_mode=mode)
            got = float(contrastive_loss(Tensor(z), labels, params).data)
            want, _ = brute_force_contrastive(z, labels, tau, mode)
            assert abs(got - want) < 1e-10, (trial, mode)


def test_worked_example_four_unit_vectors():
    # four points on the circle, two per class, tau = 1
    angles = np.array([0.0, 0.1, np.pi, np.pi + 0.1])
    z = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    labels = np.array([0, 0, 1, 1])
    params = ContrastiveParams(tau=1.0, denominator_mode="negatives_only")
    got = float(contrastive_loss(Tensor(z), labels, params).data)
    want, count = brute_force_contrastive(z, labels, 1.0, "negatives_only")
    assert count == 4
    assert got == pytest.approx(want, abs=1e-12)
    # similar pairs with distant negatives: loss should be small
    assert got < 0.8


def test_gradient():
    rng = np.random.default_rng(1)
    z = Tensor(rng.standard_normal((6, 4)), requires_grad=True)
    labels = np.array([0, 0, 1, 1, 0, 1])
    for mode in ("negatives_only", "all_other"):
        params = ContrastiveParams(tau=0.2, denominator_mode=mode)
        assert grad_check(lambda z: contrastive_loss(z, labels, params), z) < 1e-5


def test_single_class_batch_is_degenerate_under_negatives_only():
    losses.DEGENERATE_BATCH_COUNT = 0
    z = Tensor(np.random.default_rng(2).standard_normal((4, 3)))
    labels = np.zeros(4, dtype=int)
    params = ContrastiveParams(tau=0.1, denominator_mode="negatives_only")
    out = contrastive_loss(z, labels, params)
    assert float(out.data) == 0.0 and not out.requires_grad
    assert losses.DEGENERATE_BATCH_COUNT == 1
    # all_other mode still has denominators, so the same batch is usable
    params2 = ContrastiveParams(tau=0.1, denominator_mode="all_other")
    out2 = contrastive_loss(z, labels, params2)
    assert float(out2.data) != 0.0
    assert losses.DEGENERATE_BATCH_COUNT == 1


def test_batch_of_singletons_is_degenerate():
    losses.DEGENERATE_BATCH_COUNT = 0
    z = Tensor(np.eye(2))
    out = contrastive_loss(z, np.array([0, 1]), ContrastiveParams())
    assert float(out.data) == 0.0
    assert losses.DEGENERATE_BATCH_COUNT == 1


def test_zero_rows_survive_via_norm_clamp():
    z = Tensor(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]),
               requires_grad=True)
    labels = np.array([0, 0, 1, 1])
    out = contrastive_loss(z, labels, ContrastiveParams(tau=0.5))
    assert np.isfinite(float(out.data))
    out.backward()
    assert np.all(np.isfinite(z.grad))


def test_params_validation():
    with pytest.raises(ValueError):
        ContrastiveParams(tau=0.0)
    with pytest.raises(ValueError):
        ContrastiveParams(tau=-1.0)
    with pytest.raises(ValueError):
        ContrastiveParams(denominator_mode="everything")


def test_shape_validation():
    params = ContrastiveParams()
    with pytest.raises(ShapeError):
        contrastive_loss(Tensor(np.zeros(4)), np.zeros(4, dtype=int), params)
    with pytest.raises(ShapeError):
        contrastive_loss(Tensor(np.zeros((1, 3))), np.zeros(1, dtype=int), params)
    with pytest.raises(ShapeError):
        contrastive_loss(Tensor(np.zeros((4, 3))), np.zeros(3, dtype=int), params)


def test_cross_entropy_matches_manual():
    rng = np.random.default_rng(3)
    logits = rng.standard_normal((5, 3))
    e = np.exp(logits)
    probs = e / e.sum(axis=1, keepdims=True)
    y = np.eye(3)[rng.integers(0, 3, size=5)]
    got = float(cross_entropy(Tensor(probs), y).data)
    want = -np.log((probs * y).sum(axis=1)).mean()
    assert got == pytest.approx(want, abs=1e-12)
    t = Tensor(probs, requires_grad=True)
    # perturbations break row sums, so check the gradient directly
    cross_entropy(t, y).backward()
    assert np.allclose(t.grad, -y / probs / 5.0)


def test_cross_entropy_clamps_and_counts():
    losses.CLAMP_COUNT = 0
    probs = np.array([[1.0, 0.0], [0.5, 0.5]])
    y = np.array([[0.0, 1.0], [1.0, 0.0]])
    out = cross_entropy(Tensor(probs), y)
    assert np.isfinite(float(out.data))
    assert losses.CLAMP_COUNT == 1
    # the clamped pick contributes -log(1e-12) / n
    assert float(out.data) == pytest.approx(
        (-math.log(1e-12) - math.log(0.5)) / 2.0, rel=1e-12
    )


def test_cross_entropy_rejects_bad_rows():
    y = np.array([[1.0, 0.0]])
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.array([[0.7, 0.7]])), y)
    with pytest.raises(ShapeError):
        cross_entropy(Tensor(np.array([[0.5, 0.5]])), np.array([[1.0, 0.0, 0.0]]))


def test_cosine_similarity():
    assert cosine_similarity(np.array([1.0, 0.0]), np.array([0.0, 2.0])) == 0.0
    assert cosine_similarity(np.array([1.0, 1.0]), np.array([2.0, 2.0])) == pytest.approx(1.0)
    assert cosine_similarity(np.array([1.0, 0.0]), np.array([-3.0, 0.0])) == pytest.approx(-1.0)
    with pytest.raises(DegenerateEmbeddingError):
        cosine_similarity(np.zeros(3), np.ones(3))
    with pytest.raises(ShapeError):
        cosine_similarity(np.ones((2, 2)), np.ones(4))


def test_overall_loss_composition():
    ce = Tensor(np.array(0.3670))
    con = Tensor(np.array(1.2))
    assert overall_loss(ce, con, 0.0) is ce  # no zero-add on the graph
    assert float(overall_loss(Tensor(np.array(0.0)), con, 1.0).data) == pytest.approx(1.2)
    assert float(overall_loss(ce, con, 1.0).data) == pytest.approx(1.5670)
    assert float(overall_loss(ce, con, 0.5).data) == pytest.approx(0.3670 + 0.6)
    with pytest.raises(ValueError):
        overall_loss(ce, con, -0.1)


def test_overall_loss_backpropagates_weighted():
    ce = Tensor(np.array(2.0), requires_grad=True)
    con = Tensor(np.array(3.0), requires_grad=True)
    overall_loss(ce, con, 0.25).backward()
    assert float(ce.grad) == 1.0
    assert float(con.grad) == 0.25
