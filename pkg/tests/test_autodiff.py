import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kdinterp import autodiff as ad
from kdinterp.errors import ContractError, ParameterError, ShapeError, ValidationError
from kdinterp.model import conv_net, forward, init_weights

import oracles

finite = st.floats(-20, 20, allow_nan=False, width=32)


def test_conv2d_hand_example():
    x = np.array([[[[1, 2], [3, 4]]]], dtype=np.float32)
    w = np.array([[[[1, 0], [0, 1]]]], dtype=np.float32)
    out = ad.conv2d(x, w, np.zeros(1, np.float32))
    assert out.shape == (1, 1, 1, 1)
    assert out[0, 0, 0, 0] == 5.0


def test_conv2d_zero_kernel_gives_bias():
    x = np.random.default_rng(0).normal(size=(2, 3, 5, 5)).astype(np.float32)
    out = ad.conv2d(x, np.zeros((4, 3, 3, 3), np.float32), np.full(4, 1.5, np.float32), padding=1)
    assert out.shape == (2, 4, 5, 5)
    assert np.all(out == 1.5)


def test_conv2d_one_by_one_scales():
    x = np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3)
    out = ad.conv2d(x, np.full((1, 1, 1, 1), 2.0, np.float32), np.zeros(1, np.float32))
    np.testing.assert_array_equal(out, 2 * x)


@pytest.mark.parametrize("stride,padding,k", [(1, 0, 3), (2, 1, 3), (1, 2, 5), (2, 0, 2)])
def test_conv2d_matches_reference(stride, padding, k):
    rng = np.random.default_rng(stride * 10 + padding)
    x = rng.normal(size=(2, 3, 9, 8)).astype(np.float32)
    w = rng.normal(size=(4, 3, k, k)).astype(np.float32)
    b = rng.normal(size=4).astype(np.float32)
    got = ad.conv2d(x, w, b, stride, padding)
    ref = oracles.conv2d(x.astype(np.float64), w.astype(np.float64), b.astype(np.float64), stride, padding)
    assert got.shape == ref.shape == (2, 4, (9 + 2 * padding - k) // stride + 1, (8 + 2 * padding - k) // stride + 1)
    np.testing.assert_allclose(got, ref, rtol=1e-5, atol=1e-5)


def test_conv2d_shape_errors_name_axes():
    x = np.zeros((1, 2, 4, 4), np.float32)
    with pytest.raises(ShapeError, match="channel"):
        ad.conv2d(x, np.zeros((1, 3, 3, 3), np.float32), np.zeros(1, np.float32))
    with pytest.raises(ShapeError):
        ad.conv2d(x, np.zeros((1, 2, 5, 5), np.float32), np.zeros(1, np.float32))


def test_layer_vocabulary_examples():
    np.testing.assert_array_equal(ad.relu(np.array([-1, 0, 2], np.float32)), [0, 0, 2])
    m = np.array([[[[1, 2], [3, 4]]]], np.float32)
    assert ad.maxpool2x2(m)[0, 0, 0, 0] == 4
    assert ad.global_avg_pool(m)[0, 0] == 2.5
    y = ad.linear(np.array([[1, 2]], np.float32), np.array([[3, 4]], np.float32), np.array([0.5], np.float32))
    assert y[0, 0] == 11.5


def test_maxpool_rejects_odd_extent():
    with pytest.raises(ShapeError):
        ad.maxpool2x2(np.zeros((1, 1, 3, 4), np.float32))


def test_maxpool_gradient_goes_to_first_max_in_row_major_order():
    rec = ad.ComputationRecord()
    x = rec.leaf(np.array([[[[7, 7], [7, 1]]]], np.float32))
    out = ad.pick_sum(ad.flatten(ad.maxpool2x2(x)), [0])
    g = ad.backward(rec, out)[x]
    np.testing.assert_array_equal(g, [[[[1, 0], [0, 0]]]])


def test_rank_limit():
    with pytest.raises(ShapeError):
        ad.as_tensor(np.zeros((1, 1, 1, 1, 1)))


# ---------------------------------------------------------------------------
# softmax / cross entropy
# ---------------------------------------------------------------------------


def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax_t(np.zeros((1, 4)), 3.0), [[0.25] * 4], atol=1e-12)
    np.testing.assert_allclose(ad.softmax_t(np.array([[2.0, 0.0]]), 1e6), [[0.5, 0.5]], atol=1e-5)
    np.testing.assert_allclose(ad.softmax_t(np.array([[math.log(3), 0.0]]), 1.0), [[0.75, 0.25]], atol=1e-7)


@pytest.mark.parametrize("T", [0.0, -1.0])
def test_softmax_rejects_nonpositive_temperature(T):
    with pytest.raises(ParameterError):
        ad.softmax_t(np.zeros((1, 3)), T)


@settings(max_examples=60, deadline=None)
@given(
    z=arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(2, 8)), elements=finite),
    T=st.floats(0.05, 50),
    shift=st.floats(-10, 10),
)
def test_softmax_properties(z, T, shift):
    p = ad.softmax_t(z, T)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(ad.softmax_t(z.astype(np.float64) + shift, T), p, atol=1e-6)
    # argmax preserved wherever the top logit is not (numerically) tied
    zz = np.sort(z.astype(np.float64), axis=1)
    clear = zz[:, -1] - zz[:, -2] > 1e-3
    assert np.array_equal(p.argmax(axis=1)[clear], z.argmax(axis=1)[clear])


def test_cross_entropy_examples():
    eye = np.eye(3)
    assert ad.cross_entropy_soft(eye, eye) == pytest.approx(0.0, abs=1e-9)
    assert ad.cross_entropy_soft(np.full((1, 4), 0.25), np.array([[1.0, 0, 0, 0]])) == pytest.approx(math.log(4), abs=1e-12)
    expected = -0.5 * math.log(0.75) - 0.5 * math.log(0.25)
    assert ad.cross_entropy_soft(np.array([[0.75, 0.25]]), np.array([[0.5, 0.5]])) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.8370, abs=1e-4)


def test_cross_entropy_rejects_non_distributions():
    with pytest.raises(ValidationError):
        ad.cross_entropy_soft(np.array([[0.6, 0.6]]), np.array([[0.5, 0.5]]))
    with pytest.raises(ValidationError):
        ad.cross_entropy_soft(np.array([[0.5, 0.5]]), np.array([[0.7, 0.5]]))


@settings(max_examples=60, deadline=None)
@given(raw=arrays(np.float64, st.integers(2, 10), elements=st.floats(1e-3, 1.0)))
def test_cross_entropy_of_p_with_itself_is_entropy(raw):
    p = raw / raw.sum()
    h = -float(np.sum(p * np.log(p)))
    assert ad.cross_entropy_soft(p[None], p[None]) == pytest.approx(h, abs=1e-5)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def test_inactive_relu_has_zero_gradient():
    rec = ad.ComputationRecord()
    x = rec.leaf(np.array([[-2.0]], np.float32))
    out = ad.pick_sum(ad.relu(x), [0])
    assert ad.backward(rec, out)[x][0, 0] == 0.0


def test_linear_gradient_is_weight():
    rec = ad.ComputationRecord()
    w = np.array([[0.5, -1.5, 2.0]], np.float32)
    x = rec.leaf(np.array([[1.0, 2.0, 3.0]], np.float32))
    out = ad.pick_sum(ad.linear(x, w, np.zeros(1, np.float32)), [0])
    np.testing.assert_array_equal(ad.backward(rec, out)[x], w)


def test_non_scalar_output_is_contract_error():
    rec = ad.ComputationRecord()
    x = rec.leaf(np.ones((2, 3), np.float32))
    with pytest.raises(ContractError):
        ad.backward(rec, ad.relu(x))


def test_untouched_leaf_receives_zero_gradient():
    rec = ad.ComputationRecord()
    a = rec.leaf(np.ones((1, 2), np.float32))
    b = rec.leaf(np.full((4,), 3.0, np.float32))
    out = ad.pick_sum(a, [1])
    grads = ad.backward(rec, out)
    np.testing.assert_array_equal(grads[a], [[0, 1]])
    np.testing.assert_array_equal(grads[b], np.zeros(4))


def _small_net_record(seed):
    arch = conv_net((2, 3), num_classes=3, image_size=8)
    w = init_weights(arch, seed)
    rng = np.random.default_rng(seed)
    for k in w.params:
        if k.endswith(".bias"):
            w.params[k] = rng.normal(scale=0.1, size=w.params[k].shape).astype(np.float32)
    rec = ad.ComputationRecord()
    nodes = {k: rec.leaf(v) for k, v in w.params.items()}
    x = rec.leaf(rng.uniform(size=(2, 1, 8, 8)).astype(np.float32))
    target = rng.dirichlet(np.ones(3), size=2).astype(np.float32)
    logits, _ = forward(arch, nodes, x)
    loss = ad.cross_entropy_soft(ad.softmax_t(logits, 2.0), target)
    return arch, w, rec, nodes, x, target, loss


def test_replay_is_bit_exact_and_backward_repeatable():
    _, _, rec, nodes, x, _, loss = _small_net_record(1)
    vals = rec.replay()
    assert all(np.array_equal(a, b) for a, b in zip(vals, rec.values))
    g1 = ad.backward(rec, loss)
    g2 = ad.backward(rec, loss)
    assert all(np.array_equal(g1[k], g2[k]) for k in g1)


def test_replay_with_substituted_leaf_matches_fresh_forward():
    arch, w, rec, nodes, x, target, loss = _small_net_record(2)
    new_x = np.full(x.shape, 0.3, np.float32)
    vals = rec.replay({x: new_x})
    logits, _ = forward(arch, w.params, new_x)
    fresh = ad.cross_entropy_soft(ad.softmax_t(logits, 2.0), target)
    assert vals[loss.id] == fresh


def test_gradients_match_finite_differences_on_a_small_net():
    arch, w, rec, nodes, x, target, loss = _small_net_record(3)
    grads = ad.backward(rec, loss)
    names = list(w.params)
    sizes = [w.params[k].size for k in names]
    theta0 = np.concatenate([w.params[k].ravel() for k in names] + [x.value.ravel()]).astype(np.float64)

    def f(theta):
        parts = np.split(theta, np.cumsum(sizes))
        params = {k: p.reshape(w.params[k].shape) for k, p in zip(names, parts[:-1])}
        z = oracles.forward(arch, params, parts[-1].reshape(x.shape))
        return oracles.cross_entropy(oracles.softmax(z, 2.0), target)

    fd = oracles.central_differences(f, theta0)
    ours = np.concatenate([grads[nodes[k]].ravel() for k in names] + [grads[x].ravel()]).astype(np.float64)
    big = np.abs(fd) > 1e-4
    rel = np.abs(ours[big] - fd[big]) / np.abs(fd[big])
    assert big.sum() > 50
    assert np.mean(rel <= 1e-3) >= 0.95
