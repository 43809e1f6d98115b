import numpy as np
import pytest

from phasegan import autodiff as ad
from phasegan.autodiff import Tape, Tensor
from phasegan.errors import ContractError, NumericError, ShapeError

from gradcheck import check_grads, randt


class TestForwardValues:
    def test_add(self):
        out = ad.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
        np.testing.assert_array_equal(out.data, [4.0, 6.0])

    def test_relu(self):
        out = ad.relu(Tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_leaky_relu(self):
        out = ad.leaky_relu(Tensor([-1.0]))
        np.testing.assert_allclose(out.data, [-0.2], rtol=1e-6)

    def test_matmul_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = ad.matmul(Tensor(np.eye(2)), a)
        np.testing.assert_array_equal(out.data, a.data)

    def test_matmul_orthogonal(self):
        out = ad.matmul(Tensor([[1.0, 0.0]]), Tensor([[0.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[0.0]])

    def test_conv_sum_of_ones(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        out = ad.conv2d(x, w)
        np.testing.assert_array_equal(out.data, [[[[9.0]]]])

    def test_conv_delta_kernel_is_identity(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(1, 1, 5, 5)).astype(np.float32))
        k = np.zeros((1, 1, 3, 3), dtype=np.float32)
        k[0, 0, 1, 1] = 1.0
        out = ad.conv2d(x, Tensor(k), stride=1, pad=1)
        np.testing.assert_array_equal(out.data, x.data)

    def test_mean(self):
        assert ad.mean_reduce(Tensor([1.0, 2.0, 3.0])).item() == 2.0

    def test_sum_axis(self):
        out = ad.sum_reduce(Tensor([[1.0, 2.0], [3.0, 4.0]]), axes=0)
        np.testing.assert_array_equal(out.data, [4.0, 6.0])

    def test_elementwise_dispatch(self):
        out = ad.elementwise("mul", Tensor([2.0]), Tensor([3.0]))
        assert out.item() == 6.0
        out = ad.elementwise("tanh", Tensor([0.0]))
        assert out.item() == 0.0

    def test_elementwise_dispatch_arity_errors(self):
        with pytest.raises(ContractError):
            ad.elementwise("add", Tensor([1.0]))
        with pytest.raises(ContractError):
            ad.elementwise("relu", Tensor([1.0]), Tensor([1.0]))
        with pytest.raises(ContractError):
            ad.elementwise("nope", Tensor([1.0]))


class TestBackwardBasics:
    def test_square_grad(self):
        x = Tensor(3.0, requires_grad=True, dtype=np.float64)
        with Tape() as tape:
            loss = ad.square(x)
        tape.backward(loss)
        assert x.grad == pytest.approx(6.0)

    def test_matmul_sum_grad(self):
        rng = np.random.default_rng(1)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True, dtype=np.float64)
        b = Tensor(rng.normal(size=(4, 2)), dtype=np.float64)
        with Tape() as tape:
            loss = ad.sum_reduce(ad.matmul(a, b))
        tape.backward(loss)
        np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T)

    def test_mean_grad_uniform(self):
        x = Tensor(np.arange(6.0), requires_grad=True)
        with Tape() as tape:
            loss = ad.mean_reduce(x)
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, np.full(6, 1.0 / 6.0), rtol=1e-6)

    def test_repeated_backward_accumulates(self):
        x = Tensor(2.0, requires_grad=True, dtype=np.float64)
        with Tape() as tape:
            loss = ad.square(x)
        tape.backward(loss)
        tape.backward(loss)
        assert x.grad == pytest.approx(8.0)

    def test_no_grad_without_flag(self):
        x = Tensor([1.0, 2.0])
        with Tape() as tape:
            loss = ad.sum_reduce(ad.square(x))
        # nothing requires grad, so nothing was recorded
        assert not tape._entries
        assert x.grad is None and not loss.requires_grad

    def test_every_reachable_tensor_gets_grad(self):
        x = Tensor([1.0, -2.0], requires_grad=True)
        with Tape() as tape:
            h = ad.relu(x)
            loss = ad.sum_reduce(ad.square(h))
        tape.backward(loss)
        assert x.grad is not None and h.grad is not None and loss.grad is not None

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = ad.square(x)
        with pytest.raises(ContractError):
            tape.backward(y)

    def test_module_backward_requires_active_tape(self):
        with pytest.raises(ContractError):
            ad.backward(Tensor(1.0, requires_grad=True))


class TestGradChecks:
    @pytest.mark.parametrize("seed", range(3))
    def test_matmul(self, seed):
        rng = np.random.default_rng(seed)
        a, b = randt(rng, 3, 4), randt(rng, 4, 2)
        check_grads(lambda a, b: ad.sum_reduce(ad.matmul(a, b)), [a, b])

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
    def test_conv2d(self, stride, pad):
        rng = np.random.default_rng(7)
        x, w = randt(rng, 1, 2, 5, 5), randt(rng, 3, 2, 3, 3)
        check_grads(
            lambda x, w: ad.mean_reduce(ad.conv2d(x, w, stride=stride, pad=pad)),
            [x, w],
        )

    def test_composite_conv_lrelu_mean(self):
        rng = np.random.default_rng(11)
        x, w = randt(rng, 2, 2, 6, 6), randt(rng, 3, 2, 3, 3)
        check_grads(
            lambda x, w: ad.mean_reduce(ad.leaky_relu(ad.conv2d(x, w, pad=1))),
            [x, w],
        )

    @pytest.mark.parametrize(
        "op",
        [ad.neg, ad.tanh, ad.sigmoid, ad.square, ad.exp],
    )
    def test_smooth_unary(self, op):
        rng = np.random.default_rng(3)
        x = randt(rng, 4, 5)
        c = Tensor(rng.normal(size=(4, 5)))  # fixed probe weights
        check_grads(lambda x: ad.sum_reduce(ad.mul(op(x), c)), [x])

    @pytest.mark.parametrize("op", [ad.relu, ad.leaky_relu, ad.absolute])
    def test_kinked_unary_away_from_zero(self, op):
        rng = np.random.default_rng(4)
        x = Tensor(
            rng.uniform(0.1, 1.0, size=(4, 5)) * rng.choice([-1.0, 1.0], size=(4, 5)),
            dtype=np.float64,
        )
        c = Tensor(rng.normal(size=(4, 5)))
        check_grads(lambda x: ad.sum_reduce(ad.mul(op(x), c)), [x])

    def test_log_sqrt(self):
        rng = np.random.default_rng(5)
        x = randt(rng, 3, 3, lo=0.5, hi=2.0)
        check_grads(lambda x: ad.sum_reduce(ad.log(x)), [x])
        check_grads(lambda x: ad.sum_reduce(ad.sqrt(x)), [x])

    def test_binary_ops(self):
        rng = np.random.default_rng(6)
        a, b = randt(rng, 3, 4), randt(rng, 3, 4, lo=0.5, hi=2.0)
        c = Tensor(rng.normal(size=(3, 4)))
        for op in (ad.add, ad.sub, ad.mul, ad.div):
            check_grads(lambda a, b: ad.sum_reduce(ad.mul(op(a, b), c)), [a, b])

    def test_reductions(self):
        rng = np.random.default_rng(8)
        x = randt(rng, 3, 4, 5)
        c1 = Tensor(rng.normal(size=(3, 5)))
        c2 = Tensor(rng.normal(size=(4,)))
        check_grads(
            lambda x: ad.sum_reduce(ad.mul(ad.mean_reduce(x, axes=1), c1)), [x]
        )
        check_grads(
            lambda x: ad.sum_reduce(ad.mul(ad.sum_reduce(x, axes=(0, 2)), c2)), [x]
        )
        check_grads(
            lambda x: ad.sum_reduce(ad.mul(ad.max_reduce(x, axes=(0, 2)), c2)), [x]
        )

    def test_upsample_and_select(self):
        rng = np.random.default_rng(9)
        x = randt(rng, 2, 3, 4, 4)
        check_grads(lambda x: ad.mean_reduce(ad.square(ad.upsample2x(x))), [x])
        bi = np.array([0, 0, 1, 1])
        fi = np.array([0, 5, 3, 15])
        check_grads(
            lambda x: ad.sum_reduce(ad.square(ad.select_pixels(x, bi, fi))), [x]
        )


class TestBroadcast:
    def test_broadcast_grad_matches_tiling(self):
        rng = np.random.default_rng(12)
        big = Tensor(rng.normal(size=(4, 3)), requires_grad=True, dtype=np.float64)
        small = Tensor(rng.normal(size=(1, 3)), requires_grad=True, dtype=np.float64)
        with Tape() as tape:
            loss = ad.sum_reduce(ad.square(ad.mul(big, small)))
        tape.backward(loss)

        tiled = Tensor(np.tile(small.data, (4, 1)), requires_grad=True)
        with Tape() as tape2:
            loss2 = ad.sum_reduce(ad.square(ad.mul(Tensor(big.data), tiled)))
        tape2.backward(loss2)
        np.testing.assert_allclose(small.grad, tiled.grad.sum(axis=0, keepdims=True))

    def test_trailing_broadcast_shapes(self):
        out = ad.add(Tensor(np.zeros((2, 3, 4))), Tensor(np.ones((3, 1))))
        assert out.shape == (2, 3, 4)


class TestErrors:
    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
        with pytest.raises(ShapeError):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_log_domain_error_with_index(self):
        with pytest.raises(NumericError) as ei:
            ad.log(Tensor([[1.0, -1.0]]))
        assert ei.value.index == (0, 1)

    def test_div_zero_error_with_index(self):
        with pytest.raises(NumericError) as ei:
            ad.div(Tensor([1.0]), Tensor([0.0]))
        assert ei.value.index == (0,)

    def test_invalid_axis(self):
        with pytest.raises(ShapeError):
            ad.sum_reduce(Tensor([1.0]), axes=3)

    def test_conv_output_extent(self):
        with pytest.raises(ShapeError):
            ad.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))

    def test_conv_channel_mismatch(self):
        with pytest.raises(ShapeError):
            ad.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_forward_determinism():
    def run():
        rng = np.random.default_rng(99)
        x = Tensor(rng.normal(size=(2, 3, 8, 8)).astype(np.float32))
        w = Tensor(rng.normal(size=(4, 3, 3, 3)).astype(np.float32))
        out = ad.tanh(ad.conv2d(x, w, stride=2, pad=1))
        return ad.mean_reduce(out).data.copy()

    assert run().tobytes() == run().tobytes()


def test_float32_default_dtype():
    t = Tensor([1, 2, 3])
    assert t.dtype == np.float32
    assert Tensor(np.zeros(2, dtype=np.float64)).dtype == np.float64
