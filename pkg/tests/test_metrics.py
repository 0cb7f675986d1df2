"""Score functions against the pure-python oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gama.errors import ConfigError
from gama.metrics import (context_consistency_score,
                          cooccurrence_of_predictions, hamming_score,
                          predict_multilabel, top1_accuracy)
from oracles import (context_score_oracle, cooccurrence_oracle,
                     hamming_score_oracle, top1_accuracy_oracle)

RNG = np.random.default_rng(7)


def multi_hot(n, c, rng):
    return (rng.random((n, c)) < 0.4).astype(np.uint8)


def test_predict_multilabel_thresholds_at_zero():
    # sigmoid(0) = 0.5 counts as predicted, so the boundary maps to 1
    logits = np.array([[-1.0, 0.0, 0.5], [2.0, -0.1, -0.3]])
    assert predict_multilabel(logits).tolist() == [[0, 1, 1], [1, 0, 0]]


@settings(deadline=None, max_examples=40)
@given(st.integers(1, 40), st.integers(2, 8), st.integers(0, 10 ** 6))
def test_hamming_matches_oracle(n, c, seed):
    rng = np.random.default_rng(seed)
    truth, pred = multi_hot(n, c, rng), multi_hot(n, c, rng)
    assert hamming_score(pred, truth) == pytest.approx(
        hamming_score_oracle(truth, pred), abs=1e-9)


def test_hamming_empty_union_is_perfect():
    z = np.zeros((3, 5), dtype=np.uint8)
    assert hamming_score(z, z) == pytest.approx(100.0)


def test_hamming_disjoint_sets_score_zero():
    truth = np.array([[1, 0, 0], [0, 1, 0]], dtype=np.uint8)
    pred = np.array([[0, 1, 0], [0, 0, 1]], dtype=np.uint8)
    assert hamming_score(pred, truth) == pytest.approx(0.0)


@settings(deadline=None, max_examples=30)
@given(st.integers(1, 50), st.integers(2, 7), st.integers(0, 10 ** 6))
def test_top1_matches_oracle(n, c, seed):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((n, c))
    labels = rng.integers(0, c, n)
    assert top1_accuracy(logits, labels) == pytest.approx(
        top1_accuracy_oracle(logits, labels), abs=1e-9)


@settings(deadline=None, max_examples=40)
@given(st.integers(1, 30), st.integers(2, 8), st.integers(0, 10 ** 6))
def test_cooccurrence_matches_oracle(n, c, seed):
    rng = np.random.default_rng(seed)
    pred = multi_hot(n, c, rng)
    got = cooccurrence_of_predictions(pred)
    want = cooccurrence_oracle(pred.tolist())
    assert got.dtype == np.uint8
    np.testing.assert_array_equal(got, want)
    np.testing.assert_array_equal(got, got.T)
    assert not got.diagonal().any()


@settings(deadline=None, max_examples=40)
@given(st.integers(1, 25), st.integers(2, 7), st.integers(0, 10 ** 6),
       st.floats(0.0, 1.0))
def test_context_score_matches_oracle(n, c, seed, acc):
    rng = np.random.default_rng(seed)
    pred = multi_hot(n, c, rng)
    o = cooccurrence_oracle(multi_hot(max(n, 4), c, rng).tolist())
    assert context_consistency_score(pred, o, acc) == pytest.approx(
        context_score_oracle(pred.tolist(), o, acc), abs=1e-9)


def test_context_score_no_predicted_pairs_counts_precision_one():
    pred = np.eye(4, dtype=np.uint8)  # singletons only, no pairs
    o = np.zeros((4, 4), dtype=np.uint8)
    # precision 1, miss rate 0.5 -> harmonic mean 2/3
    assert context_consistency_score(pred, o, 0.5) == pytest.approx(2 / 3)


def test_context_score_zero_when_nothing_missed():
    pred = np.eye(4, dtype=np.uint8)
    o = np.zeros((4, 4), dtype=np.uint8)
    assert context_consistency_score(pred, o, 1.0) == 0.0


def test_context_score_rejects_bad_accuracy():
    pred = np.eye(3, dtype=np.uint8)
    o = np.zeros((3, 3), dtype=np.uint8)
    with pytest.raises(ConfigError):
        context_consistency_score(pred, o, 1.5)
