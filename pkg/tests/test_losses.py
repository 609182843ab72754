import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metadapt import autodiff as ad
from metadapt.autodiff import ContractViolation, DegenerateEmbeddingError, ParameterSet, Tensor
from metadapt.losses import (
    EmbeddingBatch,
    GuidedLossConfig,
    contrastive_loss,
    cross_entropy,
    guided_total_loss,
    inner_meta_step,
    multi_positive_infonce,
    multi_positive_infonce_batch,
)

from .fd import assert_grads_match, fd_grads


def batch_of(z, views=None, tau=1.0):
    return EmbeddingBatch(Tensor(z), None if views is None else Tensor(views), tau)


def quadratic_loss(leaves, c):
    """Probe objective 0.5 * ||theta - c||^2."""
    d = ad.add(leaves["theta"], -np.asarray(c, dtype=float))
    return ad.multiply(ad.sum(ad.multiply(d, d)), 0.5)


def _q(theta, c):
    return 0.5 * float(np.sum((np.asarray(theta) - np.asarray(c)) ** 2))


# ---------------------------------------------------------------- contrastive


def test_contrastive_three_vector_example():
    z = [[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]
    value = contrastive_loss(0, 1, batch_of(z)).item()
    e = math.e
    assert value == pytest.approx(-math.log(e / (e + e + 1)), abs=1e-9)


@pytest.mark.parametrize("n", [2, 3, 5, 8])
@pytest.mark.parametrize("tau", [0.05, 1.0, 7.0])
def test_contrastive_identical_embeddings(n, tau):
    z = np.tile([0.3, -1.2, 0.5], (n, 1))
    assert contrastive_loss(0, n - 1, batch_of(z, tau=tau)).item() == pytest.approx(math.log(n), abs=1e-9)


def test_contrastive_large_temperature_limit():
    z = np.random.default_rng(0).normal(size=(6, 4))
    assert contrastive_loss(2, 4, batch_of(z, tau=1e6)).item() == pytest.approx(math.log(6), abs=1e-5)


def test_contrastive_preconditions():
    z = np.eye(3)
    with pytest.raises(ContractViolation):
        contrastive_loss(1, 1, batch_of(z))
    with pytest.raises(DegenerateEmbeddingError):
        contrastive_loss(0, 1, batch_of([[0.0, 0.0], [1.0, 0.0]]))


# ---------------------------------------------------------------- multi-positive


def test_multi_positive_aligned_view():
    z = [[1.0, 0.0], [0.0, 1.0]]
    views = [[[1.0, 0.0]], [[0.0, 1.0]]]
    # each term is log(e / e^0) = 1, averaged with weight 1/2 and negated
    assert multi_positive_infonce(0, batch_of(z, views)).item() == pytest.approx(-1.0, abs=1e-9)


def test_multi_positive_view_aligned_with_negative():
    z = [[1.0, 0.0], [0.0, 1.0]]
    views = [[[0.0, 1.0]], [[1.0, 0.0]]]
    # self term log(e/1) = 1, view term log(1/e) = -1; they cancel
    assert multi_positive_infonce(0, batch_of(z, views)).item() == pytest.approx(0.0, abs=1e-9)


def test_multi_positive_can_be_negative_and_standard_form_is_not():
    z = [[1.0, 0.0], [0.0, 1.0]]
    views = [[[1.0, 0.0]], [[0.0, 1.0]]]
    b = batch_of(z, views)
    assert multi_positive_infonce(0, b).item() < 0
    e = math.e
    expected = -math.log(e / (e + 1))
    assert multi_positive_infonce(0, b, standard_denominator=True).item() == pytest.approx(expected, abs=1e-9)


def test_multi_positive_alpha_weighting():
    rng = np.random.default_rng(4)
    z = rng.normal(size=(3, 5))
    # all three views equal the anchor, so the four log terms are identical
    views = np.repeat(z[:, None, :], 3, axis=1)
    b = batch_of(z, views, tau=0.5)
    single = multi_positive_infonce(0, batch_of(z, views[:, :1], tau=0.5)).item()
    assert multi_positive_infonce(0, b).item() == pytest.approx(single, abs=1e-12)
    zi = z[0] / np.linalg.norm(z[0])
    negs = [np.dot(zi, z[j] / np.linalg.norm(z[j])) / 0.5 for j in (1, 2)]
    term = 1 / 0.5 - math.log(sum(math.exp(s) for s in negs))
    assert multi_positive_infonce(0, b).item() == pytest.approx(-(4 * term) / 4, abs=1e-9)


def test_multi_positive_one_view_uses_half_weight():
    rng = np.random.default_rng(6)
    z, v = rng.normal(size=(3, 4)), rng.normal(size=(3, 1, 4))
    unit = lambda x: x / np.linalg.norm(x)  # noqa: E731
    tau = 0.3

    def term(c):
        pos = np.dot(unit(c), unit(z[0])) / tau
        den = sum(math.exp(np.dot(unit(c), unit(z[j])) / tau) for j in (1, 2))
        return pos - math.log(den)

    expected = -0.5 * (term(z[0]) + term(v[0, 0]))
    assert multi_positive_infonce(0, batch_of(z, v, tau)).item() == pytest.approx(expected, abs=1e-9)


def test_multi_positive_no_negatives():
    with pytest.raises(ContractViolation):
        multi_positive_infonce(0, batch_of([[1.0, 0.0]], [[[1.0, 0.0]]]))


@pytest.mark.parametrize("standard", [False, True])
def test_vectorized_matches_per_anchor(standard):
    rng = np.random.default_rng(8)
    z, v = rng.normal(size=(5, 6)), rng.normal(size=(5, 3, 6))
    b = batch_of(z, v, tau=0.2)
    per = np.mean([multi_positive_infonce(i, b, standard).item() for i in range(5)])
    assert multi_positive_infonce_batch(b, standard).item() == pytest.approx(per, abs=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_multi_positive_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    n, nv, d = 5, 3, 4
    z, v = rng.normal(size=(n, d)), rng.normal(size=(n, nv, d))
    base = multi_positive_infonce(0, batch_of(z, v, 0.4)).item()
    vp = v.copy()
    vp[0] = v[0][rng.permutation(nv)]
    assert multi_positive_infonce(0, batch_of(z, vp, 0.4)).item() == pytest.approx(base, abs=1e-10)
    order = np.concatenate([[0], 1 + rng.permutation(n - 1)])
    assert multi_positive_infonce(0, batch_of(z[order], v[order], 0.4)).item() == pytest.approx(base, abs=1e-10)


def _separated_geometry(seed):
    """Anchor 0 whose positives are strictly closer than every negative.

    Sample 1 is a rescaled copy of the anchor, so its similarity ties with the
    anchor's self term in the pairwise denominator.
    """
    rng = np.random.default_rng(seed)
    d = 6
    anchor = rng.normal(size=d)
    anchor /= np.linalg.norm(anchor)
    far = -anchor + 0.8 * rng.normal(size=(4, d))
    z = np.vstack([anchor, 2.5 * anchor, far])
    views = np.stack([z[i] + 0.05 * rng.normal(size=(2, d)) for i in range(len(z))])
    return z, views


TAUS = [2.0, 1.0, 0.5, 0.2, 0.1]


@pytest.mark.parametrize("seed", range(5))
def test_lower_temperature_lowers_losses(seed):
    z, views = _separated_geometry(seed)
    con = [contrastive_loss(0, 1, batch_of(z, tau=t)).item() for t in TAUS]
    mp = [multi_positive_infonce(0, batch_of(z, views, t)).item() for t in TAUS]
    assert all(b < a for a, b in zip(con, con[1:]))
    assert all(b < a for a, b in zip(mp, mp[1:]))


def test_pairwise_self_term_dominates_at_low_temperature():
    # the anchor's own similarity (1) sits in the denominator, so an imperfect
    # positive loses to it as tau shrinks: the loss tends to (1 - s_ij) / tau
    z = np.array([[1.0, 0.0], [0.8, 0.6], [-1.0, 0.0]])
    losses = [contrastive_loss(0, 1, batch_of(z, tau=t)).item() for t in (0.05, 0.01)]
    assert losses[1] > losses[0]
    assert losses[1] == pytest.approx((1 - 0.8) / 0.01, rel=1e-6)


# ---------------------------------------------------------------- cross-entropy


def test_cross_entropy_confident():
    assert cross_entropy(Tensor([[100.0, 0.0, 0.0]]), [0]).item() < 1e-6


def test_cross_entropy_uniform():
    assert cross_entropy(Tensor([[0.0, 0.0]]), [1]).item() == pytest.approx(math.log(2), abs=1e-12)


def test_cross_entropy_uniform_label_symmetry():
    assert cross_entropy(Tensor([[0.0, 0.0]]), [0]).item() == cross_entropy(Tensor([[0.0, 0.0]]), [1]).item()


def test_cross_entropy_batch_mean():
    logits = np.array([[2.0, 0.5, -1.0], [0.1, 0.2, 0.3]])
    labels = [0, 2]
    ref = -np.mean([l[y] - math.log(np.exp(l).sum()) for l, y in zip(logits, labels)])
    assert cross_entropy(Tensor(logits), labels).item() == pytest.approx(ref, abs=1e-12)


def test_cross_entropy_extreme_logits_stable():
    assert cross_entropy(Tensor([[1000.0, -1000.0]]), [1]).item() == pytest.approx(2000.0)


def test_cross_entropy_label_range():
    with pytest.raises(ContractViolation):
        cross_entropy(Tensor([[0.0, 0.0]]), [2])
    with pytest.raises(ContractViolation):
        cross_entropy(Tensor([[0.0, 0.0]]), [-1])


# ---------------------------------------------------------------- gradients


@pytest.mark.parametrize("seed", range(10))
def test_loss_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    n, nv, d = int(rng.integers(2, 9)), int(rng.integers(1, 4)), int(rng.integers(2, 17))
    z, v = rng.normal(size=(n, d)), rng.normal(size=(n, nv, d))
    tau = float(rng.uniform(0.2, 2.0))
    i, j = 0, int(rng.integers(1, n))
    assert_grads_match(lambda p: contrastive_loss(i, j, EmbeddingBatch(p["z"], None, tau)), {"z": z})
    assert_grads_match(lambda p: multi_positive_infonce(i, EmbeddingBatch(p["z"], p["v"], tau)), {"z": z, "v": v})
    assert_grads_match(lambda p: multi_positive_infonce_batch(EmbeddingBatch(p["z"], p["v"], tau)), {"z": z, "v": v})
    labels = rng.integers(0, d, size=n)
    assert_grads_match(lambda p: cross_entropy(p["z"], labels), {"z": z})


# ---------------------------------------------------------------- inner step and guided total


def test_inner_step_zero_lr():
    p = ParameterSet({"theta": np.array([1.0, -1.0])})
    assert inner_meta_step(p, [0.0, 0.0], 0.0, quadratic_loss).equals(p)


def test_inner_step_quadratic():
    p = ParameterSet({"theta": np.array([1.0, -1.0])})
    out = inner_meta_step(p, [0.0, 0.0], 0.1, quadratic_loss)
    np.testing.assert_allclose(out["theta"], [0.9, -0.9], atol=1e-15)


def test_inner_step_deterministic():
    p = ParameterSet({"theta": np.array([0.3, 2.0, -1.0])})
    c = [1.0, 1.0, 1.0]
    assert inner_meta_step(p, c, 0.2, quadratic_loss).equals(inner_meta_step(p, c, 0.2, quadratic_loss))


def test_guided_reduces_to_target_loss():
    p = ParameterSet({"theta": np.array([0.5, -2.0])})
    out = guided_total_loss(p, [1.0, 1.0], [[0.0, 0.0], [3.0, 3.0]], GuidedLossConfig(0.0, 0.0, 2, 0.1), quadratic_loss)
    assert out.total == _q([0.5, -2.0], [1.0, 1.0])
    np.testing.assert_array_equal(out.grads["theta"], np.array([0.5, -2.0]) - 1.0)
    assert out.inner_params == []


def test_guided_k1_quadratic_probe():
    theta, ct, ca = np.array([1.0, -1.0, 0.5]), np.array([0.2, 0.3, -0.4]), np.array([-1.0, 2.0, 0.0])
    b1, b2, lr = 0.5, 0.5, 0.1
    out = guided_total_loss(ParameterSet({"theta": theta}), ct, [ca], GuidedLossConfig(b1, b2, 1, lr), quadratic_loss)
    theta_hat = theta - lr * (theta - ca)
    expected = _q(theta, ct) + b1 * _q(theta_hat, ct) + b2 * _q(theta_hat, ca)
    assert out.total == pytest.approx(expected, abs=1e-9)
    np.testing.assert_allclose(out.inner_params[0]["theta"], theta_hat, atol=1e-15)
    # first-order: each inner term's gradient is taken at theta_hat
    g = (theta - ct) + b1 * (theta_hat - ct) + b2 * (theta_hat - ca)
    np.testing.assert_allclose(out.grads["theta"], g, atol=1e-12)


def test_guided_k2_averages_meta_domains():
    theta, ct = np.array([0.4, -0.2]), np.array([1.0, 0.0])
    adapts = [np.array([2.0, 2.0]), np.array([-1.0, 3.0])]
    b1, b2, lr = 0.3, 0.7, 0.25
    out = guided_total_loss(ParameterSet({"theta": theta}), ct, adapts, GuidedLossConfig(b1, b2, 2, lr), quadratic_loss)
    hats = [theta - lr * (theta - a) for a in adapts]
    expected = _q(theta, ct) + b1 / 2 * sum(_q(h, ct) for h in hats) + b2 / 2 * sum(_q(h, a) for h, a in zip(hats, adapts))
    assert out.total == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("b1, b2", [(0.5, 0.5), (1.0, 0.0), (0.2, 2.0)])
def test_guided_collapse_with_zero_inner_step(b1, b2):
    theta, c = np.array([1.5, 0.0, -2.0]), np.array([0.5, 0.5, 0.5])
    out = guided_total_loss(ParameterSet({"theta": theta}), c, [c, c], GuidedLossConfig(b1, b2, 2, 0.0), quadratic_loss)
    assert out.total == pytest.approx((1 + b1 + b2) * _q(theta, c), abs=1e-12)


def test_guided_wrong_batch_count():
    p = ParameterSet({"theta": np.zeros(2)})
    with pytest.raises(ContractViolation):
        guided_total_loss(p, [0.0, 0.0], [[1.0, 1.0]], GuidedLossConfig(k=2), quadratic_loss)


@settings(max_examples=60, deadline=None)
@given(
    st.floats(0, 2), st.floats(0, 2), st.floats(0, 1),
    st.floats(0, 1), st.floats(0.001, 0.5), st.integers(0, 2**32 - 1),
)
def test_guided_total_monotone_in_betas(b1, b2, db1, db2, lr, seed):
    rng = np.random.default_rng(seed)
    theta, ct = rng.normal(size=3), rng.normal(size=3)
    adapts = [rng.normal(size=3), rng.normal(size=3)]
    p = ParameterSet({"theta": theta})
    lo = guided_total_loss(p, ct, adapts, GuidedLossConfig(b1, b2, 2, lr), quadratic_loss).total
    hi = guided_total_loss(p, ct, adapts, GuidedLossConfig(b1 + db1, b2 + db2, 2, lr), quadratic_loss).total
    assert hi >= lo


def test_guided_outer_term_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    logits_w = rng.normal(size=(4, 3))
    x = rng.normal(size=(5, 4))
    y = rng.integers(0, 3, size=5)

    def ce(leaves, batch):
        xb, yb = batch
        return cross_entropy(ad.matmul(Tensor(xb), leaves["w"]), yb)

    assert_grads_match(lambda p: ce(p, (x, y)), {"w": logits_w})
    p = ParameterSet({"w": logits_w})
    out = guided_total_loss(p, (x, y), [], GuidedLossConfig(0.0, 0.0, 1, 0.1), ce)
    fd = fd_grads(lambda q: ce(q, (x, y)), {"w": logits_w})
    np.testing.assert_allclose(out.grads["w"], fd["w"], rtol=1e-4, atol=1e-8)
