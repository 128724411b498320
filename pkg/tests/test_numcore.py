import threading

import numpy as np
import pytest

from modules.gradcheck import check_gradients
from modules.numcore import (
    AdamState, LSTMParams, ShapeError, Tensor, absolute, adam_step, affine, backward, concat, conv2d, elu,
    get_default_dtype, getitem, lstm_cell, matmul, mul, parameter, reshape, sigmoid, softmax, square, squash,
    stack, sum_gradient_maps, tanh, tensor_mean, tensor_sum, transpose,
)

SEEDS = range(20)


def weighted_sum(out: Tensor, rng: np.random.Generator) -> Tensor:
    """Escalar sensível a cada saída: sum(out * w) com w fixo"""
    w = Tensor(rng.normal(size=out.shape))
    return tensor_sum(mul(out, w))


def assert_grads_ok(loss_fn, tensors, tol=1e-5):
    errors = check_gradients(loss_fn, tensors)
    assert max(errors.values()) < tol, errors


# ----------------------------------------------------------------------
# Exemplos de operadores
# ----------------------------------------------------------------------

def test_elu_examples():
    out = elu(Tensor(np.array([0.0, 1.0, -1.0]))).data
    np.testing.assert_allclose(out, [0.0, 1.0, np.exp(-1.0) - 1.0], rtol=1e-6)


def test_squash_examples(float64):
    assert np.all(squash(Tensor(np.zeros(4))).data == 0.0)
    v = np.array([0.6, 0.8])
    np.testing.assert_allclose(squash(Tensor(v)).data, 0.5 * v, atol=1e-6)
    v3 = np.array([3.0, 0.0, 0.0])
    assert np.linalg.norm(squash(Tensor(v3)).data) == pytest.approx(0.9, abs=1e-6)


def test_squash_norm_below_one_monotone_and_direction(float64):
    rng = np.random.default_rng(0)
    direction = rng.normal(size=8)
    direction /= np.linalg.norm(direction)
    scales = np.linspace(0.01, 50.0, 200)
    out = squash(Tensor(scales[:, None] * direction)).data
    norms = np.linalg.norm(out, axis=-1)
    assert np.all(norms < 1.0)
    assert np.all(np.diff(norms) > 0)
    np.testing.assert_allclose(out / norms[:, None], np.broadcast_to(direction, out.shape), atol=1e-9)


def test_affine_examples():
    x = Tensor(np.array([1.0, 2.0]))
    out = affine(x, Tensor(np.eye(2)), Tensor(np.array([3.0, 3.0])))
    np.testing.assert_array_equal(out.data, [4.0, 5.0])
    rng = np.random.default_rng(1)
    out = affine(Tensor(rng.normal(size=5)), Tensor(rng.normal(size=(5, 128))), Tensor(np.zeros(128)))
    assert out.shape == (128,)


def test_softmax_examples():
    np.testing.assert_allclose(softmax(Tensor(np.array([0.0, 0.0]))).data, [0.5, 0.5])
    big = softmax(Tensor(np.array([1000.0, 0.0]))).data
    assert np.all(np.isfinite(big))
    np.testing.assert_allclose(big, [1.0, 0.0], atol=1e-6)
    np.testing.assert_array_equal(softmax(Tensor(np.array([7.0]))).data, [1.0])


def test_conv2d_output_sizes():
    x = Tensor(np.zeros((64, 64, 1)))
    assert conv2d(x, Tensor(np.zeros((9, 9, 1, 64))), stride=2).shape == (28, 28, 64)
    y = Tensor(np.zeros((28, 28, 64)))
    mid = conv2d(y, Tensor(np.zeros((9, 9, 64, 2))), stride=2)
    assert mid.shape == (10, 10, 2)
    assert conv2d(mid, Tensor(np.zeros((2, 2, 2, 3))), stride=2).shape == (5, 5, 3)


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(6, 7, 3)).astype(np.float32)
    kernel = np.eye(3, dtype=np.float32).reshape(1, 1, 3, 3)
    np.testing.assert_array_equal(conv2d(Tensor(x), Tensor(kernel)).data, x)


def test_conv2d_matches_direct_loop(float64):
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 9, 9, 2))
    k = rng.normal(size=(3, 3, 2, 4))
    out = conv2d(Tensor(x), Tensor(k), stride=2).data
    expected = np.zeros((2, 4, 4, 4))
    for b in range(2):
        for i in range(4):
            for j in range(4):
                patch = x[b, 2 * i:2 * i + 3, 2 * j:2 * j + 3, :]
                expected[b, i, j] = np.einsum("hwc,hwco->o", patch, k)
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_conv2d_rejects_channel_mismatch():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((8, 8, 2))), Tensor(np.zeros((3, 3, 1, 4))))


def test_matmul_rejects_inner_mismatch():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_lstm_zero_weights_give_zero_state():
    params = LSTMParams.zeros(256, 128)
    h, c = lstm_cell(Tensor(np.ones(256)), Tensor(np.zeros(128)), Tensor(np.zeros(128)), params)
    assert h.shape == (128,) and c.shape == (128,)
    assert np.all(h.data == 0.0) and np.all(c.data == 0.0)


def test_lstm_chain_matches_stepwise_recomputation():
    rng = np.random.default_rng(4)
    params = LSTMParams(parameter(rng.normal(size=(3, 8)) * 0.5), parameter(rng.normal(size=(2, 8)) * 0.5),
                        parameter(rng.normal(size=8) * 0.1))
    xs = rng.normal(size=(5, 3))
    h, c = Tensor(np.zeros(2)), Tensor(np.zeros(2))
    for x in xs:
        h, c = lstm_cell(Tensor(x), h, c, params)

    hn, cn = np.zeros(2), np.zeros(2)
    for x in xs:
        hn_t, cn_t = lstm_cell(Tensor(x), Tensor(hn), Tensor(cn), params)
        hn, cn = hn_t.data.copy(), cn_t.data.copy()
    np.testing.assert_array_equal(h.data, hn)
    np.testing.assert_array_equal(c.data, cn)


# ----------------------------------------------------------------------
# backward
# ----------------------------------------------------------------------

def test_backward_sum_and_square():
    x = parameter(np.array([1.0, -2.0, 3.0]))
    np.testing.assert_array_equal(backward(tensor_sum(x))[x], np.ones(3))
    np.testing.assert_allclose(backward(tensor_sum(square(x)))[x], 2.0 * x.data)


def test_backward_requires_scalar():
    x = parameter(np.ones(3))
    with pytest.raises(ShapeError):
        backward(mul(x, 2.0))


def test_backward_broadcast_gradient_shape():
    a = parameter(np.ones((3, 4)))
    b = parameter(np.ones(4))
    grads = backward(tensor_sum(a + b))
    assert grads[b].shape == (4,)
    np.testing.assert_array_equal(grads[b], np.full(4, 3.0))


def test_backward_is_deterministic():
    rng = np.random.default_rng(5)
    w = parameter(rng.normal(size=(4, 3)))
    x = Tensor(rng.normal(size=(6, 4)))

    def run():
        return backward(tensor_sum(square(tanh(matmul(x, w)))))[w]
    np.testing.assert_array_equal(run(), run())


def test_gradient_shapes_match_values():
    rng = np.random.default_rng(6)
    tensors = [parameter(rng.normal(size=s)) for s in [(3, 4), (4,), (2, 2, 4)]]
    loss = tensor_sum(square(matmul(tensors[2], reshape(tensors[0], (4, 3)))[..., 0:2] + 1.0)) \
        + tensor_sum(sigmoid(tensors[1]))
    grads = backward(loss)
    for t in tensors:
        assert grads[t].shape == t.shape


# ----------------------------------------------------------------------
# Checagem de gradientes (float64, 20 seeds)
# ----------------------------------------------------------------------

@pytest.mark.parametrize("seed", SEEDS)
def test_elementwise_gradients(float64, seed):
    rng = np.random.default_rng(seed)
    x = parameter(rng.normal(size=(3, 4)))
    w = Tensor(rng.normal(size=(3, 4)))
    for op in (elu, sigmoid, tanh, square, absolute):
        assert_grads_ok(lambda: tensor_sum(mul(op(x), w)), [x])


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_and_squash_gradients(float64, seed):
    rng = np.random.default_rng(seed)
    x = parameter(rng.normal(size=(3, 5)))
    w = Tensor(rng.normal(size=(3, 5)))
    assert_grads_ok(lambda: tensor_sum(mul(softmax(x, axis=-1), w)), [x])
    assert_grads_ok(lambda: tensor_sum(mul(softmax(x, axis=0), w)), [x])
    assert_grads_ok(lambda: tensor_sum(mul(squash(x), w)), [x])


@pytest.mark.parametrize("seed", SEEDS)
def test_linear_algebra_gradients(float64, seed):
    rng = np.random.default_rng(seed)
    a = parameter(rng.normal(size=(2, 3, 4)))
    b = parameter(rng.normal(size=(4, 5)))
    bias = parameter(rng.normal(size=5))
    assert_grads_ok(lambda: weighted_sum(matmul(a, b), np.random.default_rng(seed)), [a, b])
    assert_grads_ok(lambda: weighted_sum(affine(a, b, bias), np.random.default_rng(seed)), [a, b, bias])


@pytest.mark.parametrize("seed", SEEDS)
def test_conv2d_gradients(float64, seed):
    rng = np.random.default_rng(seed)
    x = parameter(rng.normal(size=(2, 7, 7, 2)))
    k = parameter(rng.normal(size=(3, 3, 2, 3)))
    for stride in (1, 2):
        assert_grads_ok(lambda: weighted_sum(conv2d(x, k, stride), np.random.default_rng(seed)), [x, k])


@pytest.mark.parametrize("seed", SEEDS)
def test_shape_op_gradients(float64, seed):
    rng = np.random.default_rng(seed)
    x = parameter(rng.normal(size=(3, 4)))
    y = parameter(rng.normal(size=(3, 4)))

    def loss():
        parts = [transpose(x), getitem(y, (slice(None), slice(1, 3))).reshape(2, 3) * 1.0, reshape(x, (4, 3))]
        joined = concat([stack(parts[:1] + parts[2:], axis=0), stack([parts[0], parts[2]], axis=0)], axis=1)
        return weighted_sum(joined, np.random.default_rng(seed)) + weighted_sum(tensor_mean(parts[1], axis=0),
                                                                                 np.random.default_rng(seed))
    assert_grads_ok(loss, [x, y])


def test_getitem_gradient_accumulates_repeated_indices():
    x = parameter(np.arange(4.0))
    grads = backward(tensor_sum(getitem(x, np.array([0, 0, 3]))))
    np.testing.assert_array_equal(grads[x], [2.0, 0.0, 0.0, 1.0])


@pytest.mark.parametrize("seed", SEEDS)
def test_lstm_gradients(float64, seed):
    rng = np.random.default_rng(seed)
    params = LSTMParams(parameter(rng.normal(size=(3, 8)) * 0.5), parameter(rng.normal(size=(2, 8)) * 0.5),
                        parameter(rng.normal(size=8) * 0.1))
    x = parameter(rng.normal(size=(4, 3)))

    def loss():
        h, c = Tensor(np.zeros((4, 2))), Tensor(np.zeros((4, 2)))
        for _ in range(3):
            h, c = lstm_cell(x, h, c, params)
        return weighted_sum(h, np.random.default_rng(seed))
    assert_grads_ok(loss, [x, *params.tensors()])


# ----------------------------------------------------------------------
# Precisão e Adam
# ----------------------------------------------------------------------

def test_default_dtype_is_thread_local(float64):
    seen = []
    worker = threading.Thread(target=lambda: seen.append(get_default_dtype()))
    worker.start()
    worker.join()
    assert get_default_dtype() is np.float64
    assert seen == [np.float32]


def test_reductions_accumulate_in_float64():
    x = Tensor(np.full(10_000_000, 0.1, dtype=np.float32))
    assert float(tensor_sum(x).data) == pytest.approx(1_000_000.0, rel=1e-6)


def test_adam_zero_gradient_leaves_parameter(float64):
    p = parameter(np.array([1.0, -2.0]), "p")
    state = AdamState()
    adam_step({"p": p}, {}, state, lr=1e-3)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert state.step_count == 1


def test_adam_first_step_is_lr_times_sign(float64):
    p = parameter(np.array([0.5, 0.5, 0.5]), "p")
    adam_step({"p": p}, {p: np.array([3.0, -0.2, 1e-2])}, AdamState(), lr=1e-2)
    np.testing.assert_allclose(p.data, [0.49, 0.51, 0.49], atol=1e-7)


def test_adam_minimizes_square(float64):
    x = parameter(np.array([1.0]), "x")
    state = AdamState()
    for _ in range(100):
        adam_step({"x": x}, backward(tensor_sum(square(x))), state, lr=0.1)
    assert abs(x.data[0]) < 0.1


def test_adam_rejects_non_positive_lr():
    p = parameter(np.ones(1), "p")
    with pytest.raises(ValueError):
        adam_step({"p": p}, {}, AdamState(), lr=0.0)


def test_sum_gradient_maps_in_order():
    p = parameter(np.ones(2), "p")
    q = parameter(np.ones(1), "q")
    total = sum_gradient_maps([{p: np.array([1.0, 2.0])}, {p: np.array([0.5, 0.5]), q: np.array([3.0])}])
    np.testing.assert_array_equal(total[p], [1.5, 2.5])
    np.testing.assert_array_equal(total[q], [3.0])
    assert set(total.by_name()) == {"p", "q"}
