"""
Tests for the tensor core and its differentiable primitives.

Every primitive is checked against central finite differences at float64;
the fault-injection tests prove the oracle notices a broken backward rule.
"""

import numpy as np
import pytest

from src.tensor import ops
from src.tensor.gradcheck import check_gradients, fault_injection
from src.tensor.tensor import Graph, Tensor, count_macs, no_grad, set_default_dtype
from src.utils.errors import ConfigurationError, ContractError, ShapeError

TOLERANCE = 1e-5


# =============================================================================
# Tensor basics
# =============================================================================

class TestTensor:

    def test_square_gradient(self):
        x = Tensor(np.array([2.0, -3.0]), requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, [4.0, -6.0])

    def test_integer_input_is_promoted(self):
        assert Tensor([1, 2, 3]).dtype == np.float64

    def test_broadcast_gradient_is_reduced(self):
        a = Tensor(np.ones((3, 4)), requires_grad=True)
        b = Tensor(np.ones(4), requires_grad=True)
        (a * b).sum().backward()
        assert b.grad.shape == (4,)
        np.testing.assert_allclose(b.grad, 3.0)

    def test_gradients_accumulate_over_reuse(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        (x * 2.0 + x * 5.0).backward()
        assert x.grad == pytest.approx(7.0)

    def test_non_scalar_loss_is_refused(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            (x * 2.0).backward()

    def test_second_backward_is_refused(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = (x * x).sum()
        loss.backward()
        with pytest.raises(ContractError):
            loss.backward()

    def test_second_backward_on_leaf_is_refused(self):
        leaf = Tensor(np.array(3.0), requires_grad=True)
        leaf.backward()
        np.testing.assert_array_equal(leaf.grad, 1.0)
        with pytest.raises(ContractError):
            leaf.backward()
        np.testing.assert_array_equal(leaf.grad, 1.0)
        leaf.zero_grad()
        leaf.backward()
        np.testing.assert_array_equal(leaf.grad, 1.0)

    def test_detached_loss_is_refused(self):
        with pytest.raises(ContractError):
            Tensor(np.array(1.0)).backward()

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = ops.sigmoid(x).sum()
        assert y.creator is None
        assert Graph.trace(y).mode == "inference"

    def test_trace_orders_ops_topologically(self):
        x = Tensor(np.ones(2), requires_grad=True)
        loss = ops.exp(x * 2.0).sum()
        names = [node.op for node in Graph.trace(loss).nodes]
        assert names == ["Mul", "Exp", "Sum"]

    def test_float32_mode(self):
        set_default_dtype("float32")
        assert Tensor([1, 2]).dtype == np.float32

    def test_unsupported_dtype(self):
        with pytest.raises(ContractError):
            set_default_dtype("int32")


# =============================================================================
# Primitive gradients
# =============================================================================

def _cases(rng):
    x4 = rng.standard_normal((2, 3, 5, 6))
    seq = rng.standard_normal((2, 7, 4))
    return {
        "add": (lambda a, b: a + b, [rng.standard_normal((3, 4)), rng.standard_normal(4)]),
        "mul": (lambda a, b: a * b, [rng.standard_normal((3, 4)), rng.standard_normal((3, 1))]),
        "div": (lambda a, b: a / b, [rng.standard_normal((3, 4)), 1.5 + rng.random((3, 4))]),
        "sigmoid": (ops.sigmoid, [rng.standard_normal((4, 5))]),
        "silu": (ops.silu, [rng.standard_normal((4, 5))]),
        "gelu": (ops.gelu, [rng.standard_normal((4, 5))]),
        "softplus": (ops.softplus, [rng.standard_normal((4, 5))]),
        "exp": (ops.exp, [rng.standard_normal((4, 5))]),
        "log": (ops.log, [0.5 + rng.random((4, 5))]),
        "sqrt": (ops.sqrt, [0.5 + rng.random((4, 5))]),
        "mean": (lambda a: ops.mean(a, axis=1), [rng.standard_normal((3, 4, 2))]),
        "max": (lambda a: ops.max(a, axis=1), [rng.permutation(24).reshape(2, 12) * 0.1]),
        "transpose": (lambda a: ops.transpose(a, (2, 0, 1)), [rng.standard_normal((2, 3, 4))]),
        "reshape": (lambda a: ops.reshape(a, (6, 4)), [rng.standard_normal((2, 3, 4))]),
        "getitem": (lambda a: a[:, 1:3], [rng.standard_normal((3, 5))]),
        "concat": (lambda a, b: ops.concat([a, b], axis=1), [rng.standard_normal((2, 3)),
                                                              rng.standard_normal((2, 2))]),
        "flip_vertical": (lambda a: ops.flip_spatial(a, "vertical"), [x4]),
        "flip_horizontal": (lambda a: ops.flip_spatial(a, "horizontal"), [x4]),
        "pad_zero": (lambda a: ops.pad2d(a, (1, 2, 0, 1)), [x4]),
        "pad_reflect": (lambda a: ops.pad2d(a, (1, 1, 2, 1), "reflect"), [x4]),
        "pad_replicate": (lambda a: ops.pad2d(a, (2, 0, 1, 3), "replicate"), [x4]),
        "matmul": (ops.matmul, [rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5))]),
        "linear": (ops.linear, [rng.standard_normal((5, 4)), rng.standard_normal((3, 4)),
                                rng.standard_normal(3)]),
        "conv2d": (lambda a, w, b: ops.conv2d(a, w, b, stride=1, pad=1),
                   [x4, rng.standard_normal((2, 3, 3, 3)), rng.standard_normal(2)]),
        "conv2d_strided": (lambda a, w, b: ops.conv2d(a, w, b, stride=2, pad=1),
                           [rng.standard_normal((1, 2, 6, 6)), rng.standard_normal((3, 2, 3, 3)),
                            rng.standard_normal(3)]),
        "conv_transpose2d": (ops.conv_transpose2d,
                             [rng.standard_normal((1, 3, 3, 4)), rng.standard_normal((3, 2, 3, 3)),
                              rng.standard_normal(2)]),
        "depthwise_conv1d": (ops.depthwise_conv1d, [seq, rng.standard_normal((4, 3)),
                                                    rng.standard_normal(4)]),
        "layer_norm": (ops.layer_norm, [seq, 1.0 + 0.1 * rng.standard_normal(4),
                                        rng.standard_normal(4)]),
        "upsample_nearest": (ops.upsample_nearest, [rng.standard_normal((1, 2, 3, 3))]),
        "subsample": (ops.subsample, [x4]),
    }


CASE_NAMES = sorted(_cases(np.random.default_rng(0)))


class TestPrimitiveGradients:

    @pytest.mark.parametrize("name", CASE_NAMES)
    def test_matches_finite_differences(self, name):
        fn, arrays = _cases(np.random.default_rng(7))[name]
        report = check_gradients(fn, *arrays, eps=1e-5)
        assert report.max_error < TOLERANCE, report.to_dict()

    def test_max_sends_gradient_to_first_tie(self):
        x = Tensor(np.array([[1.0, 3.0, 3.0, 2.0]]), requires_grad=True)
        ops.max(x, axis=1).sum().backward()
        np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0, 0.0]])

    def test_split_inverts_concat(self, rng):
        a = Tensor(rng.standard_normal((2, 5, 3)))
        left, right = ops.split(a, [2, 3], axis=1)
        np.testing.assert_array_equal(ops.concat([left, right], axis=1).data, a.data)

    def test_depthwise_conv_window_is_centred(self):
        x = np.zeros((1, 5, 1))
        x[0, 2, 0] = 1.0
        out = ops.depthwise_conv1d(Tensor(x), Tensor(np.array([[1.0, 2.0, 3.0]])), Tensor(np.zeros(1)))
        # position 1 already sees the impulse at 2
        np.testing.assert_array_equal(out.data[0, :, 0], [0.0, 3.0, 2.0, 1.0, 0.0])


# =============================================================================
# Fault injection
# =============================================================================

class TestFaultInjection:

    def test_corrupted_backward_is_detected(self, rng):
        x = rng.standard_normal((3, 4))
        with fault_injection("Sigmoid"):
            corrupted = check_gradients(ops.sigmoid, x)
        assert corrupted.max_error > 1e-3

    def test_backward_is_restored(self, rng):
        x = rng.standard_normal((3, 4))
        with fault_injection("Conv2d"):
            pass
        report = check_gradients(lambda a, w, b: ops.conv2d(a, w, b, pad=1),
                                 rng.standard_normal((1, 1, 4, 4)), rng.standard_normal((1, 1, 3, 3)),
                                 np.zeros(1))
        assert report.max_error < TOLERANCE
        assert check_gradients(ops.sigmoid, x).max_error < TOLERANCE

    def test_unknown_op(self):
        with pytest.raises(ConfigurationError):
            with fault_injection("NoSuchOp"):
                pass


# =============================================================================
# Shapes and accounting
# =============================================================================

class TestShapesAndMacs:

    def test_conv2d_macs(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 4, 4)))
        w = Tensor(rng.standard_normal((3, 2, 3, 3)))
        with count_macs() as counter:
            ops.conv2d(x, w, Tensor(np.zeros(3)), pad=1)
        assert counter["macs"] == 16 * 3 * 2 * 9

    def test_conv_transpose_doubles_extent(self, rng):
        out = ops.conv_transpose2d(Tensor(rng.standard_normal((1, 2, 5, 3))),
                                   Tensor(rng.standard_normal((2, 4, 3, 3))), Tensor(np.zeros(4)))
        assert out.shape == (1, 4, 10, 6)

    def test_flip_needs_4d(self):
        with pytest.raises(ShapeError):
            ops.flip_spatial(Tensor(np.ones((3, 3))), "vertical")

    def test_flip_axis_name(self):
        with pytest.raises(ConfigurationError):
            ops.flip_spatial(Tensor(np.ones((1, 1, 3, 3))), "diagonal")

    def test_matmul_mismatch(self):
        with pytest.raises(ShapeError):
            ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_dft2_of_constant_is_dc_only(self):
        spectrum = ops.dft2(np.full((4, 4), 2.0))
        assert spectrum[0, 0] == pytest.approx(32.0)
        assert np.abs(spectrum).sum() == pytest.approx(32.0)
