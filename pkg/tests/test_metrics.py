import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kdinterp.errors import ValidationError
from kdinterp.metrics import (
    auprc,
    auroc,
    best_f1,
    binary_metrics,
    category_entropy,
    entropy,
    entropy_protocol_from_probs,
    five_band_score,
    ternary_confusion,
)

import oracles


def _mask(seed, shape=(16, 16)):
    return np.random.default_rng(seed).integers(0, 3, shape)


def test_five_band_perfect_heatmap():
    m = _mask(0)
    attr = np.choose(m, [0.1, 0.5, 0.9])
    assert five_band_score(attr, m).as_tuple() == (1.0, 1.0, 1.0, 0.0)


def test_five_band_all_zero_attribution():
    m = _mask(1)
    fb = five_band_score(np.zeros(m.shape), m)
    assert fb.recall == 0.0
    assert fb.pixel_acc == pytest.approx(np.mean(m == 0))


def test_five_band_band_edges():
    # 0.2 sits at the start of band 1 (class 0), 0.4 at band 2 (class 1), 0.8 and 1.0 in band 4 (class 2)
    conf = ternary_confusion(np.array([[0.2, 0.4, 0.8, 1.0]]), np.array([[0, 1, 2, 2]]))
    assert np.trace(conf) == 4


def test_five_band_rejects_bad_input():
    with pytest.raises(ValidationError):
        five_band_score(np.full((2, 2), 1.5), np.zeros((2, 2), int))
    with pytest.raises(ValidationError):
        five_band_score(np.zeros((2, 2)), np.full((2, 2), 3))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_five_band_components_bounded_and_denominators_partition(seed):
    r = np.random.default_rng(seed)
    m = r.integers(0, 3, (3, 8, 8))
    a = r.random((3, 8, 8))
    conf = ternary_confusion(a, m)
    assert conf.sum() == m.size
    assert conf[:, 2].sum() + (conf.sum() - conf[:, 2].sum()) == m.size
    assert all(0 <= v <= 1 for v in five_band_score(a, m).as_tuple())


def test_auroc_examples():
    assert auroc([0.9, 0.8, 0.1, 0.7], [1, 1, 0, 0]) == 1.0
    assert auroc([0.3] * 6, [1, 0, 1, 0, 0, 1]) == 0.5
    assert auprc([0.9, 0.8, 0.1, 0.7], [1, 1, 0, 0]) == 1.0
    with pytest.raises(ValidationError):
        auroc([0.1, 0.2], [1, 1])


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 200), levels=st.sampled_from([3, 10, 1000]))
def test_auroc_auprc_f1_equal_brute_force(seed, n, levels):
    r = np.random.default_rng(seed)
    scores = (r.integers(0, levels, n) / levels).tolist()
    labels = r.integers(0, 2, n)
    labels[0], labels[1] = 0, 1
    labels = labels.tolist()
    assert auroc(scores, labels) == oracles.auroc_pairs(scores, labels)
    assert auprc(scores, labels) == oracles.auprc_thresholds(scores, labels)
    assert best_f1(scores, labels)[3] == pytest.approx(oracles.best_f1(scores, labels), abs=1e-12)


def test_binary_metrics_groupings_and_exclusion():
    m = np.array([[[0, 1], [2, 2]], [[0, 0], [0, 0]]])
    a = np.array([[[0.0, 0.5], [1.0, 0.9]], [[0.9, 0.9], [0.9, 0.9]]])
    res = binary_metrics(a, m, "BG_VS_OBJECT", labels=[0, 9])
    assert res["pooled"]["auroc"] == 1.0 and res["n_samples"] == 1
    feat = binary_metrics(a[:1], m[:1], "NONFEATURE_VS_FEATURE")
    assert feat["pooled"]["auroc"] == 1.0
    with pytest.raises(ValidationError):
        binary_metrics(a, m, "OTHER")


def test_binary_metrics_single_class_is_flagged_not_raised():
    res = binary_metrics(np.zeros((1, 2, 2)), np.zeros((1, 2, 2), int), "BG_VS_OBJECT")
    assert res["pooled"]["defined"] is False and res["pooled"]["auroc"] is None
    assert res["per_sample_mean"]["auroc"] is None


def test_entropy_examples():
    assert entropy([0.25] * 4) == pytest.approx(math.log(4))
    assert entropy([0, 1, 0]) == 0.0
    assert entropy([0.75, 0.25]) == pytest.approx(0.5623, abs=1e-4)
    with pytest.raises(ValidationError):
        entropy([0.5, 0.6])
    with pytest.raises(ValidationError):
        entropy([1.5, -0.5])


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), k=st.integers(2, 12), eps=st.floats(1e-3, 0.5))
def test_entropy_is_maximal_at_uniform(seed, k, eps):
    d = np.random.default_rng(seed).normal(size=k)
    d -= d.mean()
    d *= eps / (k * np.abs(d).max())
    assert entropy(np.full(k, 1 / k) + d) < math.log(k)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), label=st.integers(0, 8))
def test_category_entropy_renormalizes(seed, label):
    r = np.random.default_rng(seed)
    cat = [3 * (label // 3) + i for i in range(3)]
    p = np.zeros(10)
    p[cat] = r.dirichlet(np.ones(3))
    assert category_entropy(p, label) == pytest.approx(entropy(p))
    scaled = p * 0.4
    scaled[9] = 0.6
    assert category_entropy(scaled, label) == pytest.approx(entropy(p))


def test_entropy_protocol_examples():
    labels = np.array([0, 4, 9, 7, 2])
    onehot = np.eye(10)[labels]
    res = entropy_protocol_from_probs([onehot, onehot], labels, 1000)
    assert res["n_qualifying"] == 4
    assert res["models"][0] == {"entropy_entire": 0.0, "entropy_category": 0.0}
    within = np.zeros((5, 10))
    for i, y in enumerate(labels):
        if y != 9:
            within[i, 3 * (y // 3) : 3 * (y // 3) + 3] = 1 / 3
    within[:, 0] += 1e-9  # keep the class-0 sample's argmax on the label
    within /= within.sum(axis=1, keepdims=True)
    res = entropy_protocol_from_probs([onehot, within], labels, 1000)
    assert res["n_qualifying"] == 1
    assert res["models"][1]["entropy_category"] == pytest.approx(math.log(3), abs=1e-6)


def test_entropy_protocol_takes_first_n_and_flags_empty():
    labels = np.array([1, 2, 3, 4])
    p = np.eye(10)[labels] * 0.9 + 0.01
    res = entropy_protocol_from_probs([p, p, p], labels, 2)
    assert res["n_qualifying"] == 2
    wrong = np.eye(10)[(labels + 1) % 10]
    empty = entropy_protocol_from_probs([p, wrong], labels, 10)
    assert empty["empty"] is True and empty["n_qualifying"] == 0
    with pytest.raises(ValidationError):
        entropy_protocol_from_probs([p], labels, 10)
