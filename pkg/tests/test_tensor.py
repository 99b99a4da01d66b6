import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import nestrec.tensor as T
from nestrec import rng as nrng
from gradcheck import check_gradients


def randn(gen, *shape):
    return gen.standard_normal(shape)


# ---------------------------------------------------------------------------
# forward values against independent references


def test_matmul_matches_triple_loop():
    gen = nrng.generator(1, "matmul")
    a = randn(gen, 5, 7)
    b = randn(gen, 7, 3)
    got = T.matmul(T.tensor(a), T.tensor(b)).numpy()
    want = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            for k in range(7):
                want[i, j] += a[i, k] * b[k, j]
    assert np.abs(got - want).max() < 1e-12


def test_matmul_batched_left_operand():
    gen = nrng.generator(2, "matmul")
    a = randn(gen, 2, 4, 6)
    b = randn(gen, 6, 3)
    got = T.matmul(T.tensor(a), T.tensor(b)).numpy()
    for i in range(2):
        assert np.allclose(got[i], a[i] @ b)


def test_matmul_rejects_bad_shapes():
    a = T.tensor(np.zeros((3, 4)))
    with pytest.raises(ValueError, match="2-D"):
        T.matmul(a, T.tensor(np.zeros((4, 2, 2))))
    with pytest.raises(ValueError, match=r"\(3, 4\)"):
        T.matmul(a, T.tensor(np.zeros((5, 2))))


def test_silu_known_value():
    x = T.tensor(np.array([1.0]))
    assert abs(T.silu(x).numpy()[0] - 0.7310585786300049) < 1e-12


def test_sigmoid_extreme_inputs_stay_finite():
    x = T.tensor(np.array([-1000.0, -50.0, 0.0, 50.0, 1000.0]))
    y = T.sigmoid(x).numpy()
    assert np.all(np.isfinite(y))
    assert y[0] == 0.0 and y[-1] == 1.0 and y[2] == 0.5


def test_cross_entropy_uniform_logits():
    v = 11
    logits = T.tensor(np.zeros((4, v)))
    loss = T.softmax_cross_entropy(logits, np.zeros(4, dtype=np.int64))
    assert abs(loss.item() - np.log(v)) < 1e-12


def test_cross_entropy_hand_value():
    logits = T.tensor(np.array([[1.0, 2.0, 3.0]]))
    loss = T.softmax_cross_entropy(logits, np.array([2]))
    assert abs(loss.item() - 0.40760596444438) < 1e-10


def test_cross_entropy_label_out_of_range():
    logits = T.tensor(np.zeros((2, 3)))
    with pytest.raises(IndexError):
        T.softmax_cross_entropy(logits, np.array([0, 3]))


def test_layer_norm_full_matches_reference():
    gen = nrng.generator(3, "ln")
    x = randn(gen, 4, 8)
    alpha = randn(gen, 8)
    beta = randn(gen, 8)
    eps = 1e-5
    got = T.layer_norm(T.tensor(x), T.tensor(alpha), T.tensor(beta),
                       eps).numpy()
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    want = alpha * ((x - mu) / np.sqrt(var + eps)) + beta
    assert np.abs(got - want).max() < 1e-12


def test_layer_norm_segments_match_independent_norms():
    gen = nrng.generator(4, "ln-seg")
    x = randn(gen, 3, 12)
    alpha = randn(gen, 12)
    beta = randn(gen, 12)
    eps = 1e-5
    got = T.layer_norm(T.tensor(x), T.tensor(alpha), T.tensor(beta), eps,
                       segments=[4, 12]).numpy()
    left = T.layer_norm(T.tensor(x[:, :4]), T.tensor(alpha[:4]),
                        T.tensor(beta[:4]), eps).numpy()
    right = T.layer_norm(T.tensor(x[:, 4:]), T.tensor(alpha[4:]),
                         T.tensor(beta[4:]), eps).numpy()
    assert np.abs(got - np.concatenate([left, right], axis=-1)).max() < 1e-12


def test_layer_norm_rejects_bad_arguments():
    x = T.tensor(np.zeros((2, 6)))
    a = T.tensor(np.ones(6))
    b = T.tensor(np.zeros(6))
    with pytest.raises(ValueError, match="eps"):
        T.layer_norm(x, a, b, 0.0)
    with pytest.raises(ValueError, match="segments"):
        T.layer_norm(x, a, b, 1e-5, segments=[4, 4, 6])
    with pytest.raises(ValueError, match="segments"):
        T.layer_norm(x, a, b, 1e-5, segments=[4])
    with pytest.raises(ValueError, match="alpha"):
        T.layer_norm(x, T.tensor(np.ones(5)), b, 1e-5)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_layer_norm_output_statistics(seed):
    gen = nrng.generator(seed, "ln-stats")
    d = int(gen.integers(2, 32))
    x = T.tensor(randn(gen, 5, d))
    y = T.layer_norm(x, T.tensor(np.ones(d)), T.tensor(np.zeros(d)),
                     1e-12).numpy()
    assert np.abs(y.mean(axis=-1)).max() < 1e-6
    assert np.abs(y.var(axis=-1) - 1.0).max() < 1e-5


def test_complex_mul_matches_numpy_complex():
    gen = nrng.generator(5, "cmul")
    a = randn(gen, 6) + 1j * randn(gen, 6)
    b = randn(gen, 6) + 1j * randn(gen, 6)
    re, im = T.complex_mul(
        (T.tensor(a.real), T.tensor(a.imag)),
        (T.tensor(b.real), T.tensor(b.imag)))
    want = a * b
    assert np.abs(re.numpy() - want.real).max() < 1e-12
    assert np.abs(im.numpy() - want.imag).max() < 1e-12


def test_gather_rows_and_bounds():
    table = T.tensor(np.arange(12.0).reshape(4, 3))
    out = T.gather_rows(table, np.array([[0, 3], [1, 1]]))
    assert out.shape == (2, 2, 3)
    assert np.array_equal(out.numpy()[0, 1], np.array([9.0, 10.0, 11.0]))
    with pytest.raises(IndexError):
        T.gather_rows(table, np.array([4]))
    with pytest.raises(ValueError, match="integers"):
        T.gather_rows(table, np.array([0.5]))


def test_narrow_and_concat_round_trip():
    gen = nrng.generator(6, "narrow")
    x = T.tensor(randn(gen, 3, 10))
    left = T.narrow(x, 1, 0, 4)
    right = T.narrow(x, 1, 4, 10)
    back = T.concat([left, right], axis=1)
    assert np.array_equal(back.numpy(), x.numpy())
    with pytest.raises(ValueError, match="narrow"):
        T.narrow(x, 1, 4, 11)


# ---------------------------------------------------------------------------
# dropout


def test_dropout_eval_is_identity_object():
    x = T.tensor(np.ones((3, 3)))
    assert T.dropout(x, 0.5, training=False, key=1) is x
    assert T.dropout(x, 0.0, training=True, key=1) is x


def test_dropout_statistics():
    x = T.tensor(np.ones(100_000))
    y = T.dropout(x, 0.5, training=True, key=(7, "drop", 0)).numpy()
    survive = float((y != 0).mean())
    assert abs(survive - 0.5) < 0.01
    assert abs(y.mean() - 1.0) < 0.02
    assert np.allclose(y[y != 0], 2.0)


def test_dropout_same_key_same_mask():
    x = T.tensor(np.ones(64))
    a = T.dropout(x, 0.3, training=True, key=(1, "site", 5)).numpy()
    b = T.dropout(x, 0.3, training=True, key=(1, "site", 5)).numpy()
    c = T.dropout(x, 0.3, training=True, key=(1, "site", 6)).numpy()
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_dropout_rejects_bad_rate():
    x = T.tensor(np.ones(4))
    with pytest.raises(ValueError):
        T.dropout(x, 1.0, training=True, key=0)
    with pytest.raises(ValueError):
        T.dropout(x, -0.1, training=True, key=0)


# ---------------------------------------------------------------------------
# backward mechanics


def test_backward_of_sum_is_ones():
    x = T.param(np.array([1.0, 2.0, 3.0]))
    T.tsum(x).backward()
    assert np.array_equal(x.grad, np.ones(3))


def test_backward_hand_example():
    x = T.param(np.array([1.0, 2.0]))
    T.tsum(T.mul(x, x)).backward()
    assert np.allclose(x.grad, np.array([2.0, 4.0]))


def test_backward_requires_scalar():
    x = T.param(np.zeros((2, 2)))
    with pytest.raises(ValueError, match="scalar"):
        T.mul(x, 2.0).backward()


def test_backward_accumulates_in_leaves_across_calls():
    x = T.param(np.array([3.0]))
    loss = T.tsum(T.mul(x, x))
    loss.backward()
    first = x.grad.copy()
    loss.backward()
    assert np.allclose(x.grad, 2 * first)


def test_diamond_graph_accumulates():
    x = T.param(np.array([2.0]))
    y = T.mul(x, 3.0)
    T.tsum(T.add(y, y)).backward()
    assert np.allclose(x.grad, np.array([6.0]))


def test_no_grad_blocks_recording():
    x = T.param(np.array([1.0, 2.0]))
    with T.no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad and y._backward is None


def test_broadcast_add_unbroadcasts_gradient():
    gen = nrng.generator(8, "bcast")
    x = T.param(randn(gen, 4, 3))
    b = T.param(randn(gen, 3))
    T.tsum(T.add(x, b)).backward()
    assert b.grad.shape == (3,)
    assert np.allclose(b.grad, np.full(3, 4.0))


def test_long_chain_does_not_recurse():
    x = T.param(np.array([1.0]))
    y = x
    for _ in range(5000):
        y = T.add(y, 1.0)
    T.tsum(y).backward()
    assert np.allclose(x.grad, np.array([1.0]))


# ---------------------------------------------------------------------------
# finite-difference oracle over every differentiable op


def _f64(gen, *shape):
    return T.param(gen.standard_normal(shape))


def test_grad_elementwise_ops():
    gen = nrng.generator(10, "fd-elem")
    x = _f64(gen, 3, 4)
    y = _f64(gen, 3, 4)
    check_gradients(lambda: T.tsum(T.add(x, y)), [x, y])
    check_gradients(lambda: T.tsum(T.sub(x, y)), [x, y])
    check_gradients(lambda: T.tsum(T.mul(x, y)), [x, y])
    check_gradients(lambda: T.tsum(T.exp(T.mul(x, 0.3))), [x])
    check_gradients(lambda: T.tsum(T.cos(x)), [x])
    check_gradients(lambda: T.tsum(T.sin(x)), [x])
    check_gradients(lambda: T.tsum(T.sigmoid(x)), [x])
    check_gradients(lambda: T.tsum(T.silu(x)), [x])


def test_grad_matmul_and_shape_ops():
    gen = nrng.generator(11, "fd-shape")
    a = _f64(gen, 4, 5)
    b = _f64(gen, 5, 3)
    check_gradients(lambda: T.tsum(T.matmul(a, b)), [a, b])
    batched = _f64(gen, 2, 4, 5)
    check_gradients(lambda: T.tsum(T.matmul(batched, b)), [batched, b])
    check_gradients(lambda: T.tsum(T.transpose2d(a)), [a])
    check_gradients(lambda: T.tsum(T.reshape(a, (2, 10))), [a])
    check_gradients(lambda: T.tsum(T.narrow(a, 1, 1, 4)), [a])
    check_gradients(
        lambda: T.tsum(T.mul(T.concat([a, a], axis=1), 0.5)), [a])


def test_grad_gather_with_repeated_ids():
    gen = nrng.generator(12, "fd-gather")
    table = _f64(gen, 6, 4)
    ids = np.array([0, 2, 2, 5, 0])
    check_gradients(lambda: T.tsum(T.mul(T.gather_rows(table, ids),
                                         T.gather_rows(table, ids))),
                    [table])


def test_grad_layer_norm_full_and_segmented():
    gen = nrng.generator(13, "fd-ln")
    x = _f64(gen, 3, 8)
    alpha = _f64(gen, 8)
    beta = _f64(gen, 8)
    check_gradients(
        lambda: T.tsum(T.layer_norm(x, alpha, beta, 1e-5)),
        [x, alpha, beta])
    check_gradients(
        lambda: T.tsum(T.mul(
            T.layer_norm(x, alpha, beta, 1e-5, segments=[2, 4, 8]),
            T.layer_norm(x, alpha, beta, 1e-5, segments=[2, 4, 8]))),
        [x, alpha, beta])


def test_grad_cross_entropy():
    gen = nrng.generator(14, "fd-ce")
    logits = _f64(gen, 5, 7)
    labels = np.array([0, 6, 3, 3, 1])
    check_gradients(
        lambda: T.softmax_cross_entropy(logits, labels), [logits])


def test_grad_dropout_fixed_mask():
    gen = nrng.generator(15, "fd-drop")
    x = _f64(gen, 4, 4)
    check_gradients(
        lambda: T.tsum(T.dropout(x, 0.4, training=True, key=(9, "d", 0))),
        [x])


def test_grad_complex_mul():
    gen = nrng.generator(16, "fd-cmul")
    ar, ai, br, bi = (_f64(gen, 5) for _ in range(4))

    def loss():
        re, im = T.complex_mul((ar, ai), (br, bi))
        return T.tsum(T.add(T.mul(re, re), T.mul(im, im)))

    check_gradients(loss, [ar, ai, br, bi])


# ---------------------------------------------------------------------------
# property-style checks


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=20, deadline=None)
def test_matmul_associative(seed):
    gen = nrng.generator(seed, "assoc")
    a = randn(gen, 3, 4)
    b = randn(gen, 4, 5)
    c = randn(gen, 5, 2)
    left = T.matmul(T.matmul(T.tensor(a), T.tensor(b)), T.tensor(c)).numpy()
    right = T.matmul(T.tensor(a), T.tensor(b @ c)).numpy()
    assert np.abs(left - right).max() < 1e-10
