import numpy as np
import pytest

from gmic import diffcore as dc
from gmic.diffcore import kernels
from gmic.diffcore.gradcheck import check_function, numeric_grad, rel_error

from conftest import conv_loop


def t64(a, grad=True):
    return dc.Tensor(np.array(a, dtype=np.float64), requires_grad=grad)


def weighted(out, rng):
    r = rng.standard_normal(out.shape)
    return dc.sum(dc.mul(out, dc.Tensor(r)))


# ---------------------------------------------------------------- conv2d

def test_conv2d_ones_scaled():
    x = dc.Tensor(np.ones((1, 1, 3, 3), np.float32))
    k = dc.Tensor(np.full((1, 1, 1, 1), 2.0, np.float32))
    np.testing.assert_array_equal(dc.conv2d(x, k).data, np.full((1, 1, 3, 3), 2.0))


def test_conv2d_delta_reproduces_flipped_kernel(rng):
    x = np.zeros((1, 1, 3, 3))
    x[0, 0, 1, 1] = 1.0
    k = rng.standard_normal((1, 1, 3, 3))
    out = dc.conv2d(dc.Tensor(x), dc.Tensor(k), pad=1).data
    np.testing.assert_allclose(out, conv_loop(x, k, pad=1), atol=1e-12)
    # cross-correlation of a centered delta is the kernel rotated by 180 degrees
    np.testing.assert_allclose(out[0, 0], k[0, 0, ::-1, ::-1], atol=1e-12)


@pytest.mark.parametrize("backend", ["torch", "numpy"])
@pytest.mark.parametrize("stride,pad,ks", [(1, 0, 3), (1, 1, 3), (2, 2, 5), (2, 1, 3), (2, 0, 1)])
def test_conv2d_matches_loop_oracle(backend, stride, pad, ks, rng, monkeypatch):
    monkeypatch.setattr(kernels, "BACKEND", backend)
    x = rng.standard_normal((2, 3, 9, 8))
    k = rng.standard_normal((4, 3, ks, ks))
    out = dc.conv2d(dc.Tensor(x), dc.Tensor(k), stride=stride, pad=pad).data
    np.testing.assert_allclose(out, conv_loop(x, k, stride, pad), atol=1e-10)


@pytest.mark.parametrize("backend", ["torch", "numpy"])
def test_conv2d_gradient_sum(backend, monkeypatch):
    monkeypatch.setattr(kernels, "BACKEND", backend)
    rng = np.random.default_rng(1)
    x = t64(rng.standard_normal((1, 2, 4, 4)))
    k = t64(rng.standard_normal((3, 2, 3, 3)))
    res = check_function("conv2d", lambda: dc.sum(dc.conv2d(x, k, pad=1)), [x, k], 1e-6)
    assert res.passed, res


@pytest.mark.parametrize("seed", range(5))
def test_conv2d_gradient_strided_bias(seed):
    rng = np.random.default_rng(seed)
    x = t64(rng.standard_normal((2, 2, 7, 6)))
    k = t64(rng.standard_normal((3, 2, 5, 5)))
    b = t64(rng.standard_normal(3))
    r = rng.standard_normal((2, 3, 4, 3))
    res = check_function("conv2d", lambda: dc.sum(dc.mul(dc.conv2d(x, k, b, stride=2, pad=2), dc.Tensor(r))),
                         [x, k, b], 1e-6)
    assert res.passed, res


def test_conv2d_shape_errors():
    x = dc.Tensor(np.zeros((1, 2, 4, 4), np.float32))
    with pytest.raises(dc.ShapeError):
        dc.conv2d(x, dc.Tensor(np.zeros((1, 3, 3, 3), np.float32)))
    with pytest.raises(dc.ShapeError):
        dc.conv2d(x, dc.Tensor(np.zeros((1, 2, 7, 7), np.float32)))
    with pytest.raises(dc.ShapeError):
        dc.conv2d(dc.Tensor(np.zeros((2, 4, 4), np.float32)), dc.Tensor(np.zeros((1, 2, 1, 1), np.float32)))


# ---------------------------------------------------------------- linear

def test_linear_identity():
    x = np.arange(6, dtype=np.float32).reshape(2, 3)
    out = dc.linear(dc.Tensor(x), dc.Tensor(np.eye(3, dtype=np.float32)), dc.Tensor(np.zeros(3, np.float32)))
    np.testing.assert_array_equal(out.data, x)


def test_linear_hand_arithmetic():
    out = dc.linear(dc.Tensor([[1.0, 2.0]]), dc.Tensor([[3.0, 4.0]]), dc.Tensor([5.0]))
    np.testing.assert_array_equal(out.data, [[16.0]])


def test_linear_gradient(rng):
    x, w, b = t64(rng.standard_normal((3, 4))), t64(rng.standard_normal((2, 4))), t64(rng.standard_normal(2))
    res = check_function("linear", lambda: weighted(dc.linear(x, w, b), np.random.default_rng(5)), [x, w, b], 1e-6)
    assert res.passed, res


def test_linear_shape_error():
    with pytest.raises(dc.ShapeError):
        dc.linear(dc.Tensor(np.zeros((1, 3))), dc.Tensor(np.zeros((2, 4))))


# ---------------------------------------------------------------- elementwise

def test_sigmoid_value_and_slope():
    x = t64([0.0])
    with dc.Tape() as tape:
        y = dc.sigmoid(x)
        loss = dc.sum(y)
    g = tape.backward(loss, wrt=[x])
    assert y.data[0] == 0.5
    assert g[x][0] == pytest.approx(0.25)


def test_sigmoid_codomain_extremes():
    y = dc.sigmoid(dc.Tensor(np.array([-30.0, -5.0, 0.0, 5.0, 30.0])))
    assert np.all(y.data >= 0) and np.all(y.data <= 1)


def test_relu_values_and_subgradient():
    x = t64([-1.0, 0.0, 2.0])
    with dc.Tape() as tape:
        loss = dc.sum(dc.relu(x))
    g = tape.backward(loss, wrt=[x])
    np.testing.assert_array_equal(dc.relu(dc.Tensor(x.data)).data, [0.0, 0.0, 2.0])
    np.testing.assert_array_equal(g[x], [0.0, 0.0, 1.0])


@pytest.mark.parametrize("op", ["tanh", "sigmoid", "relu", "mul", "add", "sub", "softmax"])
def test_elementwise_gradients(op, rng):
    a = t64(rng.standard_normal((3, 4)))
    # keep relu test points away from the kink
    a.data[np.abs(a.data) < 0.05] += 0.2
    b = t64(rng.standard_normal((3, 4)))
    fns = {
        "tanh": lambda: weighted(dc.tanh(a), np.random.default_rng(1)),
        "sigmoid": lambda: weighted(dc.sigmoid(a), np.random.default_rng(1)),
        "relu": lambda: weighted(dc.relu(a), np.random.default_rng(1)),
        "mul": lambda: weighted(dc.mul(a, b), np.random.default_rng(1)),
        "add": lambda: weighted(dc.add(a, b), np.random.default_rng(1)),
        "sub": lambda: weighted(dc.sub(a, b), np.random.default_rng(1)),
        "softmax": lambda: weighted(dc.softmax(a, axis=1), np.random.default_rng(1)),
    }
    res = check_function(op, fns[op], [a, b] if op in ("mul", "add", "sub") else [a], 1e-6)
    assert res.passed, res


def test_broadcast_add_gradient(rng):
    a = t64(rng.standard_normal((2, 3, 4)))
    b = t64(rng.standard_normal((3, 1)))
    res = check_function("add", lambda: weighted(dc.add(a, b), np.random.default_rng(2)), [a, b], 1e-6)
    assert res.passed, res


def test_matmul_batched_gradient(rng):
    a = t64(rng.standard_normal((2, 3, 4)))
    b = t64(rng.standard_normal((4, 5)))
    res = check_function("matmul", lambda: weighted(dc.matmul(a, b), np.random.default_rng(3)), [a, b], 1e-6)
    assert res.passed, res


def test_maxpool_matches_numpy_and_gradient(rng, monkeypatch):
    x = rng.standard_normal((2, 3, 9, 7))
    out_t = dc.max_pool2d(dc.Tensor(x)).data
    monkeypatch.setattr(kernels, "BACKEND", "numpy")
    out_n = dc.max_pool2d(dc.Tensor(x)).data
    np.testing.assert_array_equal(out_t, out_n)
    for backend in ("numpy", "torch"):
        monkeypatch.setattr(kernels, "BACKEND", backend)
        xt = t64(x.copy())
        res = check_function("max_pool2d", lambda: weighted(dc.max_pool2d(xt), np.random.default_rng(4)), [xt], 1e-6)
        assert res.passed, (backend, res)


def test_global_avg_pool_gradient(rng):
    x = t64(rng.standard_normal((2, 3, 4, 5)))
    res = check_function("gap", lambda: weighted(dc.global_avg_pool(x), np.random.default_rng(4)), [x], 1e-6)
    assert res.passed, res


# ---------------------------------------------------------------- batch norm

def test_batchnorm_standardized_input_is_unchanged(rng):
    x = rng.standard_normal((4, 2, 5, 5))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    out = dc.batch_norm2d(dc.Tensor(x), dc.Tensor(np.ones(2)), dc.Tensor(np.zeros(2)),
                          np.zeros(2), np.ones(2), training=True)
    np.testing.assert_allclose(out.data, x, atol=1e-4)


def test_batchnorm_constant_channel_outputs_beta():
    x = np.full((2, 1, 3, 3), 7.0)
    out = dc.batch_norm2d(dc.Tensor(x), dc.Tensor(np.ones(1)), dc.Tensor([0.3]),
                          np.zeros(1), np.ones(1), training=True)
    np.testing.assert_allclose(out.data, 0.3)


def test_batchnorm_running_stats_update():
    x = np.arange(8, dtype=np.float64).reshape(2, 1, 2, 2)
    rm, rv = np.zeros(1), np.ones(1)
    dc.batch_norm2d(dc.Tensor(x), dc.Tensor(np.ones(1)), dc.Tensor(np.zeros(1)), rm, rv, training=True)
    assert rm[0] == pytest.approx(0.1 * 3.5)
    assert rv[0] == pytest.approx(0.9 + 0.1 * np.var(x, ddof=1))
    out = dc.batch_norm2d(dc.Tensor(x), dc.Tensor(np.ones(1)), dc.Tensor(np.zeros(1)), rm, rv, training=False)
    np.testing.assert_allclose(out.data, (x - rm[0]) / np.sqrt(rv[0] + 1e-5))


@pytest.mark.parametrize("training", [True, False])
def test_batchnorm_gradient(training, rng):
    x = t64(rng.standard_normal((3, 2, 4, 4)) * 2 + 1)
    g = t64(rng.standard_normal(2))
    b = t64(rng.standard_normal(2))
    rm, rv = np.array([0.2, -0.1]), np.array([1.5, 0.7])

    def build():
        return weighted(dc.batch_norm2d(x, g, b, rm.copy(), rv.copy(), training=training), np.random.default_rng(6))

    res = check_function("batch_norm2d", build, [x, g, b], 1e-5)
    assert res.passed, res


def test_batchnorm_needs_two_values():
    with pytest.raises(dc.ShapeError):
        dc.batch_norm2d(dc.Tensor(np.zeros((1, 1, 1, 1))), dc.Tensor(np.ones(1)), dc.Tensor(np.zeros(1)),
                        np.zeros(1), np.ones(1), training=True)


# ---------------------------------------------------------------- bce

@pytest.mark.parametrize("y,p,expected", [(1, 0.5, np.log(2)), (1, 0.9, 0.105361), (0, 0.1, 0.105361)])
def test_bce_values(y, p, expected):
    assert dc.bce(np.array([y]), dc.Tensor(np.array([p]))).data[0] == pytest.approx(expected, abs=1e-6)


def test_bce_clamped_at_zero():
    v = dc.bce(np.array([0.0]), dc.Tensor(np.array([0.0]))).data[0]
    assert 0 <= v < 1e-6
    v = dc.bce(np.array([1.0]), dc.Tensor(np.array([0.0]))).data[0]
    assert v == pytest.approx(-np.log(1e-7))


def test_bce_gradient(rng):
    p = t64(rng.uniform(0.05, 0.95, 6))
    y = rng.integers(0, 2, 6)
    res = check_function("bce", lambda: dc.sum(dc.bce(y, p)), [p], 1e-6)
    assert res.passed, res


# ---------------------------------------------------------------- tape & backward

def test_backward_twice_forbidden():
    x = t64([1.0, 2.0])
    with dc.Tape() as tape:
        loss = dc.sum(dc.mul(x, x))
    tape.backward(loss)
    with pytest.raises(dc.TapeError):
        tape.backward(loss)


def test_backward_requires_scalar():
    x = t64([1.0, 2.0])
    with dc.Tape() as tape:
        y = dc.mul(x, 2.0)
    with pytest.raises(dc.ShapeError):
        tape.backward(y)


def test_gradient_accumulates_over_reuse():
    x = t64([3.0])
    with dc.Tape() as tape:
        loss = dc.sum(dc.add(dc.mul(x, x), dc.mul(x, 2.0)))
    g = tape.backward(loss, wrt=[x])
    assert g[x][0] == pytest.approx(8.0)


def test_detach_stops_gradient():
    x = t64([3.0])
    with dc.Tape() as tape:
        loss = dc.sum(dc.mul(x.detach(), x))
    g = tape.backward(loss, wrt=[x])
    assert g[x][0] == pytest.approx(3.0)


def test_unreachable_wrt_gets_zeros():
    x, z = t64([1.0]), t64([5.0, 6.0])
    with dc.Tape() as tape:
        loss = dc.sum(dc.mul(x, 4.0))
    g = tape.backward(loss, wrt=[x, z])
    np.testing.assert_array_equal(g[z], [0.0, 0.0])


def test_nonfinite_is_error():
    with pytest.raises(dc.NonFiniteError):
        dc.log(dc.Tensor(np.array([-1.0])))


def test_forward_deterministic(rng):
    x = rng.standard_normal((2, 3, 16, 16)).astype(np.float32)
    k = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    a = dc.conv2d(dc.Tensor(x), dc.Tensor(k), pad=1).data
    b = dc.conv2d(dc.Tensor(x), dc.Tensor(k), pad=1).data
    assert a.tobytes() == b.tobytes()


def test_rel_error_definition():
    assert rel_error(np.array([1.0, 0.0]), np.array([1.0, 0.0])) == 0.0
    assert rel_error(np.array([2.0]), np.array([1.0])) == pytest.approx(0.5)
    assert numeric_grad(lambda: 0.0, np.zeros(2)).shape == (2,)
