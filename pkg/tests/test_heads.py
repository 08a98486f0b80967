import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fsce.heads import (FULL_ROI_DIM, ContrastiveHead, CosineClassifier, CosineClassifierWeights,
                        HeadParams, cosine_logits, encode, prototype_similarity_matrix)

from oracles import mp_cosine_logit, naive_matvec


def test_encode_zero_and_identity():
    p = HeadParams.init(16, 8, seed=0)
    assert np.all(encode(np.zeros(16), p) == 0.0)
    eye = HeadParams(np.eye(6), np.zeros(6))
    x = np.abs(np.random.default_rng(0).normal(size=6))
    np.testing.assert_array_equal(encode(x, eye), x)


def test_encode_matches_naive_matvec_full_width():
    rng = np.random.default_rng(1)
    p = HeadParams.init(FULL_ROI_DIM, 128, seed=3)
    p.bias = rng.normal(size=128)
    x = np.maximum(rng.normal(size=FULL_ROI_DIM), 0.0)
    np.testing.assert_allclose(encode(x, p), naive_matvec(p.weight, x, p.bias), rtol=1e-12, atol=1e-12)


def test_encode_dimension_mismatch():
    with pytest.raises(ValueError):
        encode(np.ones(10), HeadParams.init(12, 4))


def test_encode_is_linear_without_bias():
    rng = np.random.default_rng(2)
    p = HeadParams.init(32, 16, seed=1)
    x1, x2 = rng.random(32), rng.random(32)
    np.testing.assert_allclose(encode(2.5 * x1 - 0.7 * x2, p), 2.5 * encode(x1, p) - 0.7 * encode(x2, p),
                               atol=1e-12)


def test_init_produces_nonzero_embeddings():
    p = HeadParams.init(FULL_ROI_DIM, 128, seed=5)
    x = np.maximum(np.random.default_rng(5).normal(size=FULL_ROI_DIM), 0.0)
    assert np.linalg.norm(encode(x, p)) > 1e-12


def test_cosine_logits_hand_cases():
    w = CosineClassifierWeights(np.array([[1.0, 2.0, 0.0], [0.0, 0.0, 3.0]]))
    logits = cosine_logits(np.array([2.0, 4.0, 0.0]), w)
    assert logits[0] == pytest.approx(20.0, abs=1e-12)
    assert logits[1] == 0.0


def test_cosine_logits_zero_feature_is_error():
    with pytest.raises(ValueError):
        cosine_logits(np.zeros(3), CosineClassifierWeights(np.eye(3)))


def test_cosine_weights_validation():
    with pytest.raises(ValueError):
        CosineClassifierWeights(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        CosineClassifierWeights(np.eye(3), scale=0.0)


def test_cosine_logits_match_high_precision():
    rng = np.random.default_rng(3)
    x = np.abs(rng.normal(size=64))
    w = rng.normal(size=(4, 64))
    got = cosine_logits(x, CosineClassifierWeights(w, 20.0))
    want = [mp_cosine_logit(x, w[j], 20.0) for j in range(4)]
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


@settings(max_examples=50)
@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
def test_cosine_logits_scale_invariant_and_bounded(seed, c):
    rng = np.random.default_rng(seed)
    x = np.abs(rng.normal(size=16)) + 1e-3
    w = CosineClassifierWeights(rng.normal(size=(5, 16)))
    a, b = cosine_logits(x, w), cosine_logits(c * x, w)
    np.testing.assert_allclose(a, b, atol=1e-6)
    assert np.argmax(a) == np.argmax(b)
    assert np.all(np.abs(a) <= w.scale)


def test_prototype_similarity():
    same = prototype_similarity_matrix(CosineClassifierWeights(np.array([[1.0, 1.0], [2.0, 2.0]])))
    assert same[0, 1] == pytest.approx(1.0)
    orth = prototype_similarity_matrix(CosineClassifierWeights(np.eye(2)))
    assert orth[0, 1] == 0.0
    with pytest.raises(ValueError):
        prototype_similarity_matrix(CosineClassifierWeights(np.ones((1, 3))))


def test_prototype_similarity_of_module_weights():
    torch.manual_seed(0)
    clf = CosineClassifier(32, 6)
    m = prototype_similarity_matrix(clf.weights())
    assert m.shape == (7, 7)
    np.testing.assert_array_equal(m, m.T)
    assert np.all(np.abs(np.diag(m) - 1.0) <= 1e-6)
    assert np.all((m >= -1) & (m <= 1))


def test_modules_agree_with_array_functions():
    torch.manual_seed(1)
    head = ContrastiveHead(20, 8)
    clf = CosineClassifier(20, 3)
    x = torch.rand(5, 20, dtype=torch.float64)
    np.testing.assert_allclose(head.double()(x).detach().numpy(), encode(x.numpy(), head.params()), atol=1e-12)
    np.testing.assert_allclose(clf.double()(x).detach().numpy(), cosine_logits(x.numpy(), clf.weights()),
                               atol=1e-10)


def test_classifier_expand_keeps_existing_rows():
    torch.manual_seed(2)
    clf = CosineClassifier(10, 3)
    before = clf.weight.detach().clone()
    clf.expand(2, torch.Generator().manual_seed(0))
    assert clf.weight.shape == (6, 10)
    assert torch.equal(clf.weight[:4], before)
    np.testing.assert_allclose(clf.weight[4:].norm(dim=1).detach().numpy(), 1.0, atol=1e-6)
