import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rirn import tensor as T
from rirn.gradcheck import check_gradients
from rirn.tensor import ShapeError, Tensor

from oracles import naive_conv2d, rel_error


def leaf(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TestConv2d:
    def test_single_dot_product(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        w = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]).reshape(1, 1, 2, 2))
        b = Tensor(np.zeros((1, 1, 1, 1)))
        out = T.conv2d(x, w, b, stride=1, padding=0)
        assert out.shape == (1, 1, 1, 1)
        assert out.data.item() == 5.0

    def test_zero_kernel_gives_bias(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 5, 5)))
        w = Tensor(np.zeros((4, 3, 3, 3)))
        b = Tensor(np.array([0.5, -1.0, 2.0, 0.0]).reshape(1, 4, 1, 1))
        out = T.conv2d(x, w, b, padding=1)
        assert np.array_equal(out.data, np.broadcast_to(b.data, (2, 4, 5, 5)))

    def test_matches_loop_oracle(self, rng):
        x = rng.standard_normal((2, 3, 8, 8))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        out = T.conv2d(Tensor(x), Tensor(w), Tensor(b.reshape(1, 4, 1, 1)), stride=1, padding=1)
        assert out.shape == (2, 4, 8, 8)
        assert np.max(np.abs(out.data - naive_conv2d(x, w, b, 1, 1))) <= 1e-6

    @pytest.mark.parametrize("stride,padding,k", [(1, 0, 3), (2, 1, 3), (3, 2, 5), (2, 0, 1), (1, 2, 5)])
    def test_output_shape_formula(self, stride, padding, k):
        x = Tensor(np.ones((1, 2, 9, 7)))
        w = Tensor(np.ones((3, 2, k, k)))
        out = T.conv2d(x, w, None, stride, padding)
        assert out.shape == (1, 3, (9 + 2 * padding - k) // stride + 1, (7 + 2 * padding - k) // stride + 1)

    def test_channel_mismatch_names_dimension(self):
        with pytest.raises(ShapeError, match="channel"):
            T.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))

    def test_invalid_stride_and_padding(self):
        x, w = Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3)))
        with pytest.raises(ValueError):
            T.conv2d(x, w, stride=0)
        with pytest.raises(ValueError):
            T.conv2d(x, w, padding=-1)

    @pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (1, 0), (3, 2)])
    def test_gradients(self, rng, stride, padding):
        x = leaf(rng.standard_normal((2, 2, 6, 5)))
        w = leaf(rng.standard_normal((3, 2, 3, 3)))
        b = leaf(rng.standard_normal((1, 3, 1, 1)))
        probe = rng.standard_normal(T.conv2d(x, w, b, stride, padding).shape)

        def loss():
            return T.total_sum(T.mul(T.conv2d(x, w, b, stride, padding), Tensor(probe)))

        for r in check_gradients(loss, {"x": x, "w": w, "b": b}):
            assert r.rel_error <= 1e-6, str(r)

    def test_forward_does_not_mutate_inputs(self, rng):
        x = rng.standard_normal((1, 2, 5, 5))
        w = rng.standard_normal((2, 2, 3, 3))
        xc, wc = x.copy(), w.copy()
        out = T.conv2d(leaf(x), leaf(w), None, 1, 1)
        T.backward(T.total_sum(out))
        assert np.array_equal(x, xc) and np.array_equal(w, wc)


class TestActivations:
    def test_analytic_values(self):
        z = Tensor(np.zeros((1, 1, 1, 1)))
        assert T.softplus(z).data.item() == pytest.approx(np.log(2.0), abs=1e-12)
        assert T.tanh(z).data.item() == 0.0
        assert T.sigmoid(z).data.item() == 0.5
        neg = Tensor(np.full((1, 1, 1, 1), -2.0))
        assert T.leaky_relu(neg, 0.1).data.item() == pytest.approx(-0.2)

    def test_dispatch_by_name(self):
        z = Tensor(np.zeros((1, 1, 1, 1)))
        assert T.apply_activation(z, "sigmoid").data.item() == 0.5
        with pytest.raises(ValueError):
            T.apply_activation(z, "relu6")

    def test_leaky_relu_alpha_range(self):
        with pytest.raises(ValueError):
            T.leaky_relu(Tensor(np.zeros((1, 1, 1, 1))), 1.5)

    def test_softplus_is_stable_for_large_inputs(self):
        x = Tensor(np.array([-800.0, -30.0, 30.0, 800.0]).reshape(1, 1, 1, 4))
        out = T.softplus(x).data.ravel()
        assert np.all(np.isfinite(out))
        assert out[3] == 800.0
        assert out[0] == pytest.approx(0.0, abs=1e-300)

    @pytest.mark.parametrize("kind", ["leaky_relu", "tanh", "sigmoid", "softplus"])
    def test_gradients(self, rng, kind):
        data = rng.standard_normal((1, 2, 3, 3))
        data[np.abs(data) < 1e-2] += 0.1  # keep away from the leaky-relu kink
        x = leaf(data)
        probe = Tensor(rng.standard_normal(data.shape))

        def loss():
            return T.total_sum(T.mul(T.apply_activation(x, kind), probe))

        (r,) = check_gradients(loss, {"x": x})
        assert r.rel_error <= 1e-7, str(r)


class TestChannelOps:
    def test_concat_shapes(self):
        out = T.concat_channels([Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 4, 4)))])
        assert out.shape == (1, 5, 4, 4)

    def test_concat_single_is_identity(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 3, 3)))
        assert T.concat_channels([x]) is x

    def test_concat_spatial_mismatch(self):
        with pytest.raises(ShapeError, match="dimension h"):
            T.concat_channels([Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 5, 4)))])

    def test_concat_backward_matches_separate_graphs(self, rng):
        a = leaf(rng.standard_normal((1, 2, 3, 3)))
        b = leaf(rng.standard_normal((1, 3, 3, 3)))
        wa = Tensor(rng.standard_normal((1, 2, 3, 3)))
        wb = Tensor(rng.standard_normal((1, 3, 3, 3)))
        joined = T.concat_channels([a, b])
        probe = T.concat_channels([wa, wb])
        T.backward(T.total_sum(T.mul(joined, probe)))
        ga, gb = a.grad.copy(), b.grad.copy()
        a.grad = b.grad = None
        T.backward(T.add(T.total_sum(T.mul(a, wa)), T.total_sum(T.mul(b, wb))))
        assert np.array_equal(ga, a.grad) and np.array_equal(gb, b.grad)

    def test_slice_gradient(self, rng):
        x = leaf(rng.standard_normal((1, 4, 2, 2)))
        T.backward(T.total_sum(T.slice_channels(x, 1, 3)))
        expected = np.zeros((1, 4, 2, 2))
        expected[:, 1:3] = 1
        assert np.array_equal(x.grad, expected)


class TestElementwise:
    def test_broadcast_mul_identity_and_annihilator(self, rng):
        f = Tensor(rng.standard_normal((2, 3, 4, 4)))
        assert np.array_equal(T.broadcast_mul(Tensor(np.ones((2, 1, 4, 4))), f).data, f.data)
        assert np.array_equal(T.broadcast_mul(Tensor(np.zeros((2, 1, 4, 4))), f).data, np.zeros((2, 3, 4, 4)))

    def test_broadcast_mul_map_gradient(self, rng):
        amap = leaf(rng.standard_normal((1, 1, 2, 2)))
        feat = leaf(rng.standard_normal((1, 3, 2, 2)))
        probe = Tensor(rng.standard_normal((1, 3, 2, 2)))

        def loss():
            return T.total_sum(T.mul(T.broadcast_mul(amap, feat), probe))

        for r in check_gradients(loss, {"map": amap, "feat": feat}):
            assert r.rel_error <= 1e-5, str(r)

    def test_broadcast_mul_requires_single_channel(self):
        with pytest.raises(ShapeError):
            T.broadcast_mul(Tensor(np.ones((1, 2, 2, 2))), Tensor(np.ones((1, 2, 2, 2))))

    @pytest.mark.parametrize("kind", ["add", "mul"])
    def test_shape_mismatch(self, kind):
        with pytest.raises(ShapeError, match="dimension w"):
            T.elementwise(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 2, 3))), kind)

    def test_sub_and_one_minus(self, rng):
        a = leaf(rng.standard_normal((1, 1, 2, 2)))
        b = leaf(rng.standard_normal((1, 1, 2, 2)))
        T.backward(T.total_sum(T.add(T.sub(a, b), T.one_minus(a))))
        assert np.array_equal(a.grad, np.zeros((1, 1, 2, 2)))
        assert np.array_equal(b.grad, -np.ones((1, 1, 2, 2)))


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = leaf(rng.standard_normal((2, 3, 4, 5)))
        T.backward(T.total_sum(x))
        assert np.array_equal(x.grad, np.ones_like(x.data))

    def test_half_sum_of_squares(self, rng):
        data = rng.standard_normal((1, 2, 3, 3))
        x = leaf(data)
        half = Tensor(np.full((1, 1, 1, 1), 0.5))
        T.backward(T.mul(T.total_sum(T.mul(x, x)), half))
        np.testing.assert_allclose(x.grad, data, rtol=0, atol=1e-15)

    def test_repeated_calls_accumulate(self, rng):
        x = leaf(rng.standard_normal((1, 1, 2, 2)))
        T.backward(T.total_sum(x))
        T.backward(T.total_sum(x))
        assert np.array_equal(x.grad, np.full((1, 1, 2, 2), 2.0))

    def test_non_scalar_loss_rejected(self):
        x = leaf(np.ones((1, 1, 2, 2)))
        with pytest.raises(ShapeError):
            T.backward(T.tanh(x))

    def test_graph_without_grad_rejected(self):
        with pytest.raises(RuntimeError):
            T.backward(T.total_sum(Tensor(np.ones((1, 1, 2, 2)))))

    @pytest.mark.parametrize("k", [2, 3, 5])
    def test_fan_out_sums_consumers(self, rng, k):
        data = rng.standard_normal((1, 1, 3, 3))
        probes = [Tensor(rng.standard_normal((1, 1, 3, 3))) for _ in range(k)]
        x = leaf(data)
        total = None
        for pr in probes:
            term = T.total_sum(T.mul(T.tanh(x), pr))
            total = term if total is None else T.add(total, term)
        T.backward(total)
        joint = x.grad.copy()
        single = np.zeros_like(data)
        for pr in probes:
            y = leaf(data)
            T.backward(T.total_sum(T.mul(T.tanh(y), pr)))
            single += y.grad
        np.testing.assert_allclose(joint, single, rtol=1e-13, atol=1e-15)

    def test_shared_subgraph_visited_once(self, rng):
        x = leaf(rng.standard_normal((1, 1, 2, 2)))
        h = T.tanh(x)
        y = T.add(h, h)
        T.backward(T.total_sum(y))
        np.testing.assert_allclose(x.grad, 2 * (1 - np.tanh(x.data) ** 2))

    def test_no_grad_records_nothing(self):
        x = leaf(np.ones((1, 1, 2, 2)))
        with T.no_grad():
            y = T.tanh(x)
        assert not y.requires_grad and y.is_leaf


class TestFiniteDifferences:
    def test_square(self):
        p = leaf(np.full((1, 1, 1, 1), 3.0))
        g = T.finite_diff_grad(lambda: T.mul(p, p), p, 1e-4)
        assert abs(g.item() - 6.0) <= 1e-7

    def test_abs_at_kink_is_zero(self):
        p = leaf(np.zeros((1, 1, 1, 1)))
        g = T.finite_diff_grad(lambda: float(np.abs(p.data).sum()), p, 1e-4)
        assert g.item() == 0.0

    def test_restores_buffer(self, rng):
        data = rng.standard_normal((1, 2, 2, 2))
        p = leaf(data.copy())
        T.finite_diff_grad(lambda: T.total_sum(T.tanh(p)), p, 1e-3)
        assert np.array_equal(p.data, data)

    def test_l1_through_conv_agrees_with_backward(self, rng):
        from rirn.optim import l1_loss

        x = Tensor(rng.standard_normal((1, 2, 5, 5)))
        w = leaf(rng.standard_normal((2, 2, 3, 3)))
        target = Tensor(rng.standard_normal((1, 2, 5, 5)) + 5.0)  # no ties

        def loss():
            return l1_loss(T.conv2d(x, w, None, 1, 1), target)

        (r,) = check_gradients(loss, {"w": w})
        assert r.rel_error <= 1e-4

    def test_rel_error_helper_agrees(self):
        assert rel_error([1.0, 2.0], [1.0, 2.0]) == 0.0


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(1, 2),
    ci=st.integers(1, 3),
    co=st.integers(1, 3),
    h=st.integers(3, 7),
    w=st.integers(3, 7),
    k=st.sampled_from([1, 3]),
    stride=st.integers(1, 3),
    padding=st.integers(0, 2),
    seed=st.integers(0, 2**16),
)
def test_conv_property_matches_oracle(n, ci, co, h, w, k, stride, padding, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, ci, h, w))
    wt = rng.standard_normal((co, ci, k, k))
    b = rng.standard_normal(co)
    out = T.conv2d(Tensor(x), Tensor(wt), Tensor(b.reshape(1, co, 1, 1)), stride, padding)
    assert np.max(np.abs(out.data - naive_conv2d(x, wt, b, stride, padding))) <= 1e-6


def test_tensor_requires_4d():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 2)))
