import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qrobust.autodiff import (
    NonFiniteError,
    ShapeError,
    Tensor,
    backward,
    forward_op,
    grad,
    grad_check,
    load_checkpoint,
    no_grad,
    ops,
    save_checkpoint,
)
from qrobust.autodiff.checkpoint import CheckpointError, dumps_checkpoint, loads_checkpoint


def param(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True, dtype=np.float64)


def assert_grads(fn, params, tol=1e-3):
    report = grad_check(fn, params, tolerance=tol)
    assert report.passed, report.as_dict()


# -- forward examples --------------------------------------------------------


def test_relu_forward():
    out = forward_op("relu", [Tensor([-1.0, 0.0, 2.0])])
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])


def test_softmax_of_zeros_is_uniform():
    out = forward_op("softmax", [Tensor(np.zeros((1, 4)))])
    np.testing.assert_allclose(out.data, [[0.25] * 4], atol=1e-7)


def test_conv2d_all_ones_kernel_sums_windows():
    x = np.arange(16, dtype=np.float32).reshape(1, 4, 4, 1)
    out = ops.conv2d(Tensor(x), Tensor(np.ones((3, 3, 1, 1), dtype=np.float32)))
    grid = x[0, :, :, 0]
    expected = [[grid[i : i + 3, j : j + 3].sum() for j in range(2)] for i in range(2)]
    assert out.shape == (1, 2, 2, 1)
    np.testing.assert_array_equal(out.data[0, :, :, 0], expected)


@settings(max_examples=60, deadline=None)
@given(size=st.integers(1, 9), kernel=st.integers(1, 4), stride=st.integers(1, 3))
def test_same_padding_output_extent_is_ceil(size, kernel, stride):
    x = Tensor(np.ones((1, size, size, 2), dtype=np.float32))
    k = Tensor(np.ones((kernel, kernel, 2, 3), dtype=np.float32))
    out = ops.conv2d(x, k, stride=stride, padding="same")
    assert out.shape == (1, -(-size // stride), -(-size // stride), 3)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=12))
def test_softmax_rows_sum_to_one(values):
    out = ops.softmax(Tensor(np.array([values], dtype=np.float32))).data
    assert abs(float(out.sum()) - 1.0) < 1e-6
    assert np.all(out >= 0) and np.all(out <= 1)


def test_separable_equals_depthwise_then_pointwise_bitwise():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(2, 6, 6, 3)).astype(np.float32))
    dk = Tensor(rng.normal(size=(3, 3, 3, 2)).astype(np.float32))
    pk = Tensor(rng.normal(size=(1, 1, 6, 4)).astype(np.float32))
    b = Tensor(rng.normal(size=4).astype(np.float32))
    sep = ops.separable_conv2d(x, dk, pk, b, padding="same")
    two_step = ops.conv2d(ops.depthwise_conv2d(x, dk, None, padding="same"), pk, b)
    assert np.array_equal(sep.data, two_step.data)


def test_batchnorm_inference_is_fixed_affine_map():
    rng = np.random.default_rng(0)
    mean, var = rng.normal(size=3), rng.uniform(0.5, 2.0, size=3)
    gamma, beta = Tensor(rng.normal(size=3)), Tensor(rng.normal(size=3))
    x = rng.normal(size=(4, 2, 2, 3))
    out1 = ops.batch_norm(Tensor(x), gamma, beta, mean.copy(), var.copy(), training=False).data
    out2 = ops.batch_norm(Tensor(x), gamma, beta, mean.copy(), var.copy(), training=False).data
    scale = gamma.data / np.sqrt(var + 1e-3)
    np.testing.assert_allclose(out1, (x - mean) * scale + beta.data, rtol=1e-12)
    assert np.array_equal(out1, out2)


def test_batchnorm_training_updates_running_stats_with_momentum():
    x = np.arange(8, dtype=np.float64).reshape(4, 2)
    mean, var = np.zeros(2), np.ones(2)
    ops.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), mean, var, training=True)
    np.testing.assert_allclose(mean, 0.01 * x.mean(axis=0))
    np.testing.assert_allclose(var, 0.99 + 0.01 * x.var(axis=0))


def test_shape_mismatch_names_op_and_dims():
    with pytest.raises(ShapeError, match="conv2d"):
        ops.conv2d(Tensor(np.ones((1, 4, 4, 2))), Tensor(np.ones((3, 3, 3, 1))))
    with pytest.raises(ShapeError, match="matmul|dense"):
        ops.dense(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


@pytest.mark.filterwarnings("ignore:divide by zero:RuntimeWarning")
def test_non_finite_forward_is_an_error():
    with pytest.raises(NonFiniteError):
        ops.log(Tensor(np.array([0.0, 1.0])))


# -- backward examples -------------------------------------------------------


def test_linear_map_gradient_is_broadcast_input():
    x = np.array([1.0, -2.0, 3.0])
    w = Tensor(np.ones((2, 3)), requires_grad=True, dtype=np.float64)
    loss = ops.sum(w * Tensor(x))
    g = backward(loss, [w])[w].data
    np.testing.assert_array_equal(g, np.broadcast_to(x, (2, 3)))


def test_sigmoid_gradient_at_zero():
    x = Tensor(np.zeros(1), requires_grad=True, dtype=np.float64)
    g = backward(ops.sum(ops.sigmoid(x)), [x])[x].data
    assert g[0] == pytest.approx(0.25)


def test_backward_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(RuntimeError):
        backward(x)
    with pytest.raises(ShapeError):
        backward(x * 2.0)


def test_graph_reusable_for_second_forward():
    w = Tensor(np.array([2.0]), requires_grad=True, dtype=np.float64)
    for x in (1.0, 3.0):
        g = backward(ops.sum(w * Tensor(np.array([x]))), [w])[w]
        assert g.data[0] == x


def test_double_backward_of_cube():
    x = Tensor(np.array([0.5, -1.5]), requires_grad=True, dtype=np.float64)
    (first,) = grad(ops.sum(x * x * x), [x], create_graph=True)
    (second,) = grad(ops.sum(first), [x])
    np.testing.assert_allclose(second.data, 6 * x.data)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = x * 3.0
    assert y.node is None


def test_relu_kink_coordinates_are_excluded():
    x = Tensor(np.array([0.0, 1.0, -1.0]), requires_grad=True, dtype=np.float64)
    report = grad_check(lambda: ops.sum(ops.relu(x)), [x])
    assert report.passed
    assert report.blocks[0].excluded_kinks == 1


# -- per-op finite-difference checks -----------------------------------------

OP_CASES = {
    "add": lambda r: ((param(r, 2, 3), param(r, 3)), lambda a, b: a + b),
    "mul": lambda r: ((param(r, 2, 3), param(r, 2, 3)), lambda a, b: a * b),
    "div": lambda r: ((param(r, 2, 3), Tensor(r.uniform(1, 2, (2, 3)), requires_grad=True, dtype=np.float64)), lambda a, b: a / b),
    "matmul": lambda r: ((param(r, 3, 4), param(r, 4, 2)), ops.matmul),
    "dense": lambda r: ((param(r, 3, 4), param(r, 4, 2), param(r, 2)), ops.dense),
    "conv2d_valid": lambda r: ((param(r, 2, 5, 5, 2), param(r, 3, 3, 2, 3), param(r, 3)), ops.conv2d),
    "conv2d_same_stride2": lambda r: ((param(r, 1, 5, 6, 2), param(r, 3, 3, 2, 2)), lambda x, k: ops.conv2d(x, k, stride=2, padding="same")),
    "depthwise": lambda r: ((param(r, 2, 5, 5, 2), param(r, 3, 3, 2, 2), param(r, 4)), lambda x, k, b: ops.depthwise_conv2d(x, k, b, padding="same")),
    "separable": lambda r: ((param(r, 1, 5, 5, 2), param(r, 3, 3, 2, 1), param(r, 1, 1, 2, 3), param(r, 3)), lambda x, d, p, b: ops.separable_conv2d(x, d, p, b, stride=2, padding="same")),
    "batchnorm_train": lambda r: ((param(r, 4, 3, 3, 2), param(r, 2), param(r, 2)), lambda x, g, b: ops.batch_norm(x, g, b, np.zeros(2), np.ones(2), training=True)),
    "batchnorm_infer": lambda r: ((param(r, 4, 2), param(r, 2), param(r, 2)), lambda x, g, b: ops.batch_norm(x, g, b, np.array([0.1, -0.2]), np.array([0.5, 2.0]), training=False)),
    "relu": lambda r: ((param(r, 3, 4),), ops.relu),
    "sigmoid": lambda r: ((param(r, 3, 4),), ops.sigmoid),
    "softmax": lambda r: ((param(r, 3, 4),), ops.softmax),
    "log_softmax": lambda r: ((param(r, 3, 4),), ops.log_softmax),
    "max_pool": lambda r: ((param(r, 2, 4, 4, 2),), lambda x: ops.max_pool2d(x, 2)),
    "avg_pool": lambda r: ((param(r, 2, 5, 5, 2),), lambda x: ops.avg_pool2d(x, 2, padding="same")),
    "global_avg_pool": lambda r: ((param(r, 2, 3, 3, 2),), ops.global_avg_pool2d),
    "flatten": lambda r: ((param(r, 2, 3, 3, 2),), ops.flatten),
    "exp": lambda r: ((param(r, 3, 2, scale=0.5),), ops.exp),
    "log": lambda r: ((Tensor(r.uniform(0.5, 2.0, (3, 2)), requires_grad=True, dtype=np.float64),), ops.log),
}


@pytest.mark.parametrize("case", sorted(OP_CASES))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_op_gradient_matches_finite_differences(case, seed):
    rng = np.random.default_rng(seed)
    inputs, fn = OP_CASES[case](rng)
    weights = Tensor(rng.normal(size=fn(*inputs).shape))
    assert_grads(lambda: ops.sum(fn(*inputs) * weights), list(inputs))


def test_cross_entropy_gradient():
    rng = np.random.default_rng(5)
    z = param(rng, 4, 3)
    y = np.eye(3)[[0, 2, 1, 1]]
    assert_grads(lambda: ops.cross_entropy(z, y), [z])


def test_double_backward_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    w = param(rng, 4, 3, scale=0.5)
    x = Tensor(rng.normal(size=(2, 4)), requires_grad=True, dtype=np.float64)

    def penalty():
        out = ops.sigmoid(ops.matmul(x, w))
        (gx,) = grad(ops.sum(out), [x], create_graph=True)
        return ops.sum(gx * gx)

    assert_grads(penalty, [w])


# -- checkpoint --------------------------------------------------------------


def test_checkpoint_layout_matches_hand_packed_bytes(tmp_path):
    arr = np.array([[1.0, 2.0], [3.0, -4.5]], dtype=np.float32)
    expected = b"QRB1" + struct.pack("<I", 1) + struct.pack("<I", 3) + b"w/k" + struct.pack("<III", 2, 2, 2) + struct.pack("<4f", 1.0, 2.0, 3.0, -4.5)
    assert dumps_checkpoint({"w/k": arr}) == expected
    path = tmp_path / "m.qrb"
    save_checkpoint(path, {"w/k": arr, "b": np.zeros(3, dtype=np.float32)})
    back = load_checkpoint(path)
    assert list(back) == ["w/k", "b"]
    np.testing.assert_array_equal(back["w/k"], arr)


def test_checkpoint_rejects_bad_magic_and_truncation():
    raw = dumps_checkpoint({"a": np.ones(4, dtype=np.float32)})
    with pytest.raises(CheckpointError, match="magic"):
        loads_checkpoint(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="truncated"):
        loads_checkpoint(raw[:-3])
    with pytest.raises(CheckpointError, match="trailing"):
        loads_checkpoint(raw + b"\0")
