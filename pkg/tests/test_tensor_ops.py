import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from dastkit.engine import ConfigurationError, ShapeError, Tensor, ops


def test_matmul_identity():
    a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    out = ops.matmul(a, Tensor(np.eye(2)))
    assert_array_equal(out.data, a.data)


def test_matmul_hand_checked():
    a = Tensor(np.array([[1.0, 0.0], [0.0, 0.0]]))
    b = Tensor(np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert_array_equal(ops.matmul(a, b).data, [[0.0, 1.0], [0.0, 0.0]])


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


def test_conv2d_all_ones_sums_window():
    x = Tensor(np.ones((1, 1, 3, 3)))
    k = Tensor(np.ones((1, 1, 3, 3)))
    out = ops.conv2d(x, k, stride=1, padding=0)
    assert out.shape == (1, 1, 1, 1)
    assert out.data[0, 0, 0, 0] == 9.0


def test_conv2d_zero_kernel_zero_output():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((2, 3, 6, 6)))
    out = ops.conv2d(x, Tensor(np.zeros((4, 3, 3, 3))), stride=1, padding=1)
    assert_array_equal(out.data, np.zeros((2, 4, 6, 6)))


def test_conv2d_non_integer_output_rejected():
    # 6x6 input, kernel 3, stride 2: span 3 is not divisible by the stride
    with pytest.raises(ConfigurationError):
        ops.conv2d(Tensor(np.zeros((1, 1, 6, 6))), Tensor(np.zeros((1, 1, 3, 3))),
                   stride=2, padding=0)


def test_conv2d_channel_mismatch():
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_conv2d_transposed_impulse_placement():
    # Impulse kernel at (0,0): input value (i,j) lands at output (2i,2j).
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    k = np.zeros((1, 1, 2, 2))
    k[0, 0, 0, 0] = 1.0
    out = ops.conv2d_transposed(x, Tensor(k), stride=2, padding=0)
    expected = np.zeros((1, 1, 4, 4))
    expected[0, 0, 0, 0] = 1.0
    expected[0, 0, 0, 2] = 2.0
    expected[0, 0, 2, 0] = 3.0
    expected[0, 0, 2, 2] = 4.0
    assert_array_equal(out.data, expected)


def test_conv2d_transposed_zero_input():
    out = ops.conv2d_transposed(Tensor(np.zeros((1, 2, 3, 3))),
                                Tensor(np.ones((2, 5, 4, 4))), stride=2, padding=1)
    assert out.shape == (1, 5, 6, 6)
    assert_array_equal(out.data, np.zeros((1, 5, 6, 6)))


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_adjoint_identity(stride, padding):
    # <conv2d(x,K), y> == <x, conv2d_transposed(y,K)> at float64
    rng = np.random.default_rng(42 + stride * 10 + padding)
    k = 3 if stride == 1 else 4
    x = rng.standard_normal((2, 3, 6, 6))
    kern = rng.standard_normal((4, 3, k, k))
    y_t = ops.conv2d(Tensor(x), Tensor(kern), stride=stride, padding=padding)
    y = rng.standard_normal(y_t.shape)
    lhs = float((y_t.data * y).sum())
    back = ops.conv2d_transposed(Tensor(y), Tensor(kern), stride=stride, padding=padding)
    rhs = float((back.data * x).sum())
    assert abs(lhs - rhs) / max(abs(lhs), abs(rhs)) < 1e-10


def test_softmax_uniform():
    out = ops.softmax(Tensor(np.zeros((1, 4))))
    assert_allclose(out.data, [[0.25, 0.25, 0.25, 0.25]], rtol=0, atol=1e-12)


def test_softmax_overflow_safe():
    out = ops.softmax(Tensor(np.array([[1000.0, 0.0]])))
    assert np.isfinite(out.data).all()
    assert_allclose(out.data, [[1.0, 0.0]], atol=1e-12)


def test_softmax_reference_values():
    out = ops.softmax(Tensor(np.array([[1.0, 2.0, 3.0]])))
    assert_allclose(out.data, [[0.0900, 0.2447, 0.6652]], atol=1e-4)


def test_softmax_rows_sum_to_one_large_magnitude():
    rng = np.random.default_rng(7)
    for trial in range(20):
        logits = rng.standard_normal((5, 6)) * 1e3
        p = ops.softmax(Tensor(logits)).data
        assert (p >= 0).all()
        assert_allclose(p.sum(axis=1), np.ones(5), atol=1e-6)


def test_cross_entropy_uniform_is_log_n():
    loss = ops.cross_entropy(Tensor(np.zeros((3, 4))), np.array([0, 1, 3]))
    assert_allclose(loss.item(), math.log(4), atol=1e-6)


def test_cross_entropy_peaked_goes_to_zero():
    logits = np.zeros((1, 4))
    logits[0, 2] = 50.0
    loss = ops.cross_entropy(Tensor(logits), np.array([2]))
    assert loss.item() < 1e-12


def test_cross_entropy_reference_value():
    loss = ops.cross_entropy(Tensor(np.array([[1.0, 2.0, 3.0]])), np.array([0]))
    assert_allclose(loss.item(), 2.4076, atol=1e-3)


def test_cross_entropy_nonnegative_random():
    rng = np.random.default_rng(3)
    for trial in range(10):
        logits = rng.standard_normal((4, 5))
        labels = rng.integers(0, 5, size=4)
        assert ops.cross_entropy(Tensor(logits), labels).item() >= 0.0


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        ops.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))
    with pytest.raises(IndexError):
        ops.cross_entropy(Tensor(np.zeros((2, 3))), np.array([-1, 0]))


def test_frobenius_equal_inputs_zero():
    x = Tensor(np.random.default_rng(0).standard_normal((3, 4)))
    assert ops.frobenius_distance(x, Tensor(x.data.copy())).item() == 0.0


def test_frobenius_single_sample():
    a = Tensor(np.array([1.0, 0.0]))
    b = Tensor(np.array([0.0, 1.0]))
    assert_allclose(ops.frobenius_distance(a, b).item(), math.sqrt(2), rtol=1e-12)


def test_frobenius_matches_scalar_loop():
    # Integer-valued floats keep every partial sum exact, so the comparison
    # against the naive loop is legitimately bitwise.
    rng = np.random.default_rng(11)
    a = rng.integers(-9, 10, size=(4, 3, 5)).astype(np.float64)
    b = rng.integers(-9, 10, size=(4, 3, 5)).astype(np.float64)
    total = 0.0
    for x, y in zip(a.ravel(), b.ravel()):
        total += (x - y) ** 2
    expected = math.sqrt(total) / a.shape[0]
    assert ops.frobenius_distance(Tensor(a), Tensor(b)).item() == expected


def test_frobenius_scalar_loop_continuous():
    rng = np.random.default_rng(12)
    a = rng.standard_normal((5, 7))
    b = rng.standard_normal((5, 7))
    total = math.fsum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel()))
    expected = math.sqrt(total) / 5
    assert_allclose(ops.frobenius_distance(Tensor(a), Tensor(b)).item(),
                    expected, rtol=1e-12)


def test_frobenius_shape_mismatch():
    with pytest.raises(ShapeError):
        ops.frobenius_distance(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))


def test_add_bias_2d_and_4d():
    x2 = Tensor(np.zeros((2, 3)))
    out = ops.add_bias(x2, Tensor(np.array([1.0, 2.0, 3.0])))
    assert_array_equal(out.data, [[1, 2, 3], [1, 2, 3]])
    x4 = Tensor(np.zeros((1, 2, 2, 2)))
    out4 = ops.add_bias(x4, Tensor(np.array([5.0, -5.0])))
    assert_array_equal(out4.data[0, 0], np.full((2, 2), 5.0))
    assert_array_equal(out4.data[0, 1], np.full((2, 2), -5.0))


def test_add_bias_rejects_other_shapes():
    with pytest.raises(ShapeError):
        ops.add_bias(Tensor(np.zeros((2, 3))), Tensor(np.zeros(2)))


def test_relu_and_leaky_values():
    x = Tensor(np.array([-2.0, 0.0, 3.0]))
    assert_array_equal(ops.relu(x).data, [0.0, 0.0, 3.0])
    assert_allclose(ops.leaky_relu(x, 0.2).data, [-0.4, 0.0, 3.0], rtol=1e-7)


def test_sigmoid_extremes_finite():
    out = ops.sigmoid(Tensor(np.array([-1000.0, 0.0, 1000.0])))
    assert np.isfinite(out.data).all()
    assert_allclose(out.data, [0.0, 0.5, 1.0], atol=1e-12)


def test_take_rows_and_concat_roundtrip():
    x = Tensor(np.arange(12.0).reshape(4, 3))
    picked = ops.take_rows(x, np.array([2, 0]))
    assert_array_equal(picked.data, x.data[[2, 0]])
    both = ops.concat_rows([picked, ops.take_rows(x, np.array([1, 3]))])
    assert_array_equal(both.data, x.data[[2, 0, 1, 3]])
    with pytest.raises(IndexError):
        ops.take_rows(x, np.array([4]))


def test_argmax_rows_tie_break_lowest_index():
    t = Tensor(np.array([[0.0, 0.0], [1.0, 3.0], [2.0, 2.0]]))
    assert_array_equal(ops.argmax_rows(t), [0, 1, 0])


def test_default_dtype_is_float32():
    assert Tensor([1, 2, 3]).dtype == np.float32
    assert Tensor(np.zeros(3, dtype=np.float64)).dtype == np.float64
