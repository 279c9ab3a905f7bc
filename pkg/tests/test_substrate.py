"""Tensor substrate: op semantics against hand oracles, gradients against
finite differences, and the validation / error contract."""

import numpy as np
import pytest

from auseg.substrate import (
    BNState,
    NonFiniteError,
    ParamTensor,
    ShapeError,
    Tensor4,
    add,
    batch_norm,
    bilinear_up2,
    channel_mean,
    channel_scale,
    concat_channels,
    conv2d,
    grad_check,
    interp_matrix,
    max_pool2,
    pixel_shuffle2,
    relu,
    scale,
    sigmoid,
)


def t4(arr, requires_grad=False):
    return Tensor4(np.asarray(arr, dtype=np.float64), requires_grad=requires_grad)


def rand_t4(rng, shape, requires_grad=True):
    return Tensor4(rng.standard_normal(shape), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# tensor construction and graph mechanics
# ---------------------------------------------------------------------------

class TestTensor4:
    def test_rejects_non_rank4(self):
        with pytest.raises(ShapeError):
            Tensor4(np.zeros((3, 3)))
        with pytest.raises(ShapeError):
            Tensor4(np.zeros((1, 1, 1, 1, 1)))

    def test_rejects_non_finite(self):
        bad = np.zeros((1, 1, 2, 2))
        bad[0, 0, 0, 0] = np.nan
        with pytest.raises(NonFiniteError):
            Tensor4(bad)
        bad[0, 0, 0, 0] = np.inf
        with pytest.raises(NonFiniteError):
            Tensor4(bad)

    def test_int_input_promoted_to_float(self):
        t = Tensor4(np.ones((1, 1, 2, 2), dtype=np.int64))
        assert t.dtype == np.float64

    def test_backward_seed_shape_checked(self):
        x = rand_t4(np.random.default_rng(0), (1, 2, 3, 3))
        y = relu(x)
        with pytest.raises(ShapeError):
            y.backward(np.ones((1, 2, 3, 4)))

    def test_gradient_accumulates_across_backward_calls(self):
        x = t4(np.ones((1, 1, 2, 2)), requires_grad=True)
        y = scale(x, 3.0)
        y.backward()
        y2 = scale(x, 3.0)
        y2.backward()
        np.testing.assert_array_equal(x.grad, np.full((1, 1, 2, 2), 6.0))
        x.zero_grad()
        assert x.grad is None

    def test_diamond_graph_accumulates(self):
        # y = x + x must give dy/dx = 2 for every element
        x = t4(np.arange(4.0).reshape(1, 1, 2, 2), requires_grad=True)
        y = add(x, x)
        y.backward()
        np.testing.assert_array_equal(x.grad, np.full((1, 1, 2, 2), 2.0))

    def test_detach_cuts_graph(self):
        x = t4(np.ones((1, 1, 2, 2)), requires_grad=True)
        d = relu(x).detach()
        assert not d.requires_grad
        y = scale(d, 2.0)
        y.backward()
        assert x.grad is None

    def test_param_tensor_requires_name(self):
        with pytest.raises(ValueError):
            ParamTensor(np.zeros((1, 1, 1, 1)), name="")

    def test_mixed_dtypes_rejected(self):
        a = Tensor4(np.zeros((1, 1, 2, 2), dtype=np.float32))
        b = Tensor4(np.zeros((1, 1, 2, 2), dtype=np.float64))
        with pytest.raises(ShapeError):
            add(a, b)

    def test_op_output_finite_enforced(self):
        # exp overflow in float32 sigmoid would be caught at node creation;
        # here force it through scale by a huge factor instead
        x = Tensor4(np.full((1, 1, 1, 1), 1e300))
        with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
            scale(scale(x, 1e300), 1e300)


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

class TestElementwise:
    def test_relu_values_and_zero_subgradient(self):
        x = t4([[[[-2.0, 0.0], [3.0, -0.5]]]], requires_grad=True)
        y = relu(x)
        np.testing.assert_array_equal(y.data, [[[[0.0, 0.0], [3.0, 0.0]]]])
        y.backward()
        # subgradient at exactly 0 is 0
        np.testing.assert_array_equal(x.grad, [[[[0.0, 0.0], [1.0, 0.0]]]])

    def test_sigmoid_matches_closed_form(self, rng):
        x = rand_t4(rng, (2, 3, 4, 4))
        y = sigmoid(x)
        np.testing.assert_allclose(y.data, 1.0 / (1.0 + np.exp(-x.data)), rtol=1e-12)

    def test_sigmoid_extreme_inputs_stay_finite(self):
        y = sigmoid(t4([[[[-500.0, 500.0], [0.0, 1.0]]]]))
        assert np.all(np.isfinite(y.data))
        assert y.data[0, 0, 0, 0] == 0.0 or y.data[0, 0, 0, 0] < 1e-200
        assert y.data[0, 0, 0, 1] == 1.0

    def test_add_shape_mismatch(self):
        with pytest.raises(ShapeError):
            add(t4(np.zeros((1, 1, 2, 2))), t4(np.zeros((1, 2, 2, 2))))

    def test_scale_value_and_grad(self):
        x = t4(np.full((1, 1, 2, 2), 3.0), requires_grad=True)
        y = scale(x, -1.5)
        np.testing.assert_array_equal(y.data, np.full((1, 1, 2, 2), -4.5))
        y.backward()
        np.testing.assert_array_equal(x.grad, np.full((1, 1, 2, 2), -1.5))

    def test_concat_channels_layout_and_grad_split(self, rng):
        a = rand_t4(rng, (2, 3, 4, 4))
        b = rand_t4(rng, (2, 2, 4, 4))
        y = concat_channels([a, b])
        assert y.shape == (2, 5, 4, 4)
        np.testing.assert_array_equal(y.data[:, :3], a.data)
        np.testing.assert_array_equal(y.data[:, 3:], b.data)
        seed = rng.standard_normal(y.shape)
        y.backward(seed)
        np.testing.assert_array_equal(a.grad, seed[:, :3])
        np.testing.assert_array_equal(b.grad, seed[:, 3:])

    def test_concat_spatial_mismatch(self):
        with pytest.raises(ShapeError):
            concat_channels([t4(np.zeros((1, 1, 4, 4))), t4(np.zeros((1, 1, 2, 2)))])


class TestPixelShuffle:
    def test_index_mapping(self):
        # out(c, 2i+di, 2j+dj) == in(4c + 2di + dj, i, j)
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 8, 3, 5))
        y = pixel_shuffle2(Tensor4(x)).data
        assert y.shape == (2, 2, 6, 10)
        for n in range(2):
            for c in range(2):
                for i in range(3):
                    for j in range(5):
                        for di in range(2):
                            for dj in range(2):
                                assert (y[n, c, 2 * i + di, 2 * j + dj]
                                        == x[n, 4 * c + 2 * di + dj, i, j])

    def test_channel_count_must_divide_by_four(self):
        with pytest.raises(ShapeError):
            pixel_shuffle2(t4(np.zeros((1, 6, 2, 2))))

    def test_backward_is_inverse_scatter(self, rng):
        x = rand_t4(rng, (1, 4, 3, 3))
        y = pixel_shuffle2(x)
        seed = rng.standard_normal(y.shape)
        y.backward(seed)
        # the forward is a permutation, so grad must be the inverse permutation
        np.testing.assert_array_equal(
            pixel_shuffle2(Tensor4(x.grad)).data, seed)


class TestChannelOps:
    def test_channel_mean_value(self, rng):
        x = rand_t4(rng, (2, 3, 4, 5), requires_grad=False)
        y = channel_mean(x)
        assert y.shape == (2, 3, 1, 1)
        np.testing.assert_allclose(y.data[..., 0, 0], x.data.mean(axis=(2, 3)),
                                   rtol=1e-12)

    def test_channel_scale_broadcast(self, rng):
        x = rand_t4(rng, (2, 3, 4, 4), requires_grad=False)
        s = Tensor4(np.array([0.5, 1.0, 2.0]).reshape(1, 3, 1, 1)
                    * np.ones((2, 1, 1, 1)))
        y = channel_scale(x, s)
        np.testing.assert_allclose(y.data[:, 0], 0.5 * x.data[:, 0], rtol=1e-12)
        np.testing.assert_allclose(y.data[:, 2], 2.0 * x.data[:, 2], rtol=1e-12)

    def test_channel_scale_shape_check(self):
        with pytest.raises(ShapeError):
            channel_scale(t4(np.zeros((1, 3, 2, 2))), t4(np.zeros((1, 2, 1, 1))))


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv_reference(x, w, b, padding, stride):
    """Six-loop direct convolution, the oracle for the im2col implementation."""
    n, cin, h, ww = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (ww + 2 * padding - k) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for ni in range(n):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = b[0, co, 0, 0]
                    for ci in range(cin):
                        for di in range(k):
                            for dj in range(k):
                                acc += (w[co, ci, di, dj]
                                        * xp[ni, ci, i * stride + di, j * stride + dj])
                    out[ni, co, i, j] = acc
    return out


class TestConv2d:
    def test_ones_kernel_counts_neighbourhood(self):
        # all-ones 3x3 kernel over an all-ones 3x3 image with padding 1:
        # corners see 4 pixels, edges 6, the centre 9
        x = t4(np.ones((1, 1, 3, 3)))
        w = Tensor4(np.ones((1, 1, 3, 3)))
        b = Tensor4(np.zeros((1, 1, 1, 1)))
        y = conv2d(x, w, b, kernel=3)
        np.testing.assert_array_equal(
            y.data[0, 0], [[4.0, 6.0, 4.0], [6.0, 9.0, 6.0], [4.0, 6.0, 4.0]])

    def test_matches_direct_convolution(self, rng):
        for cin, cout, k, p, s, h, w in [(3, 5, 3, 1, 1, 8, 8),
                                         (2, 4, 5, 2, 1, 9, 7),
                                         (4, 2, 3, 1, 2, 8, 10),
                                         (3, 6, 1, 0, 1, 5, 5)]:
            x = rng.standard_normal((2, cin, h, w))
            wt = rng.standard_normal((cout, cin, k, k))
            bias = rng.standard_normal((1, cout, 1, 1))
            got = conv2d(Tensor4(x), Tensor4(wt), Tensor4(bias),
                         kernel=k, padding=p, stride=s).data
            want = conv_reference(x, wt, bias, p, s)
            np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)

    def test_output_size_formula(self):
        # floor((H + 2p - k)/s) + 1
        for h, k, p, s, expect in [(64, 3, 1, 1, 64), (64, 3, 1, 2, 32),
                                   (9, 5, 0, 2, 3), (7, 1, 0, 1, 7)]:
            x = t4(np.zeros((1, 1, h, h)))
            w = Tensor4(np.zeros((1, 1, k, k)))
            b = Tensor4(np.zeros((1, 1, 1, 1)))
            y = conv2d(x, w, b, kernel=k, padding=p, stride=s)
            assert y.shape == (1, 1, expect, expect), (h, k, p, s)

    def test_default_padding_preserves_size(self):
        x = t4(np.zeros((1, 2, 10, 10)))
        w = Tensor4(np.zeros((3, 2, 5, 5)))
        b = Tensor4(np.zeros((1, 3, 1, 1)))
        assert conv2d(x, w, b, kernel=5).shape == (1, 3, 10, 10)

    def test_even_kernel_rejected(self):
        x = t4(np.zeros((1, 1, 4, 4)))
        w = Tensor4(np.zeros((1, 1, 2, 2)))
        b = Tensor4(np.zeros((1, 1, 1, 1)))
        with pytest.raises(ShapeError):
            conv2d(x, w, b, kernel=2)

    def test_channel_mismatch_names_both_shapes(self):
        x = t4(np.zeros((1, 3, 4, 4)))
        w = Tensor4(np.zeros((2, 4, 3, 3)))
        b = Tensor4(np.zeros((1, 2, 1, 1)))
        with pytest.raises(ShapeError) as exc:
            conv2d(x, w, b, kernel=3)
        msg = str(exc.value)
        assert "3" in msg and "4" in msg

    def test_bias_shape_checked(self):
        x = t4(np.zeros((1, 1, 4, 4)))
        w = Tensor4(np.zeros((2, 1, 3, 3)))
        with pytest.raises(ShapeError):
            conv2d(x, w, Tensor4(np.zeros((1, 1, 1, 1))), kernel=3)

    def test_kernel_larger_than_padded_input_rejected(self):
        x = t4(np.zeros((1, 1, 3, 3)))
        w = Tensor4(np.zeros((1, 1, 7, 7)))
        b = Tensor4(np.zeros((1, 1, 1, 1)))
        with pytest.raises(ShapeError):
            conv2d(x, w, b, kernel=7, padding=0)

    def test_does_not_mutate_inputs(self, rng):
        x = rand_t4(rng, (1, 2, 6, 6))
        before = x.data.copy()
        w = rand_t4(rng, (3, 2, 3, 3))
        b = rand_t4(rng, (1, 3, 1, 1))
        conv2d(x, w, b, kernel=3)
        np.testing.assert_array_equal(x.data, before)


# ---------------------------------------------------------------------------
# pooling and upsampling
# ---------------------------------------------------------------------------

class TestMaxPool:
    def test_forward_values(self):
        x = t4(np.array([[1.0, 2.0, 5.0, 6.0],
                         [3.0, 4.0, 7.0, 8.0],
                         [4.0, 3.0, 1.0, 1.0],
                         [2.0, 1.0, 1.0, 2.0]]).reshape(1, 1, 4, 4))
        y = max_pool2(x)
        np.testing.assert_array_equal(y.data[0, 0], [[4.0, 8.0], [4.0, 2.0]])

    def test_odd_size_rejected(self):
        with pytest.raises(ShapeError):
            max_pool2(t4(np.zeros((1, 1, 3, 4))))

    def test_tie_gradient_goes_to_first_in_row_major_order(self):
        x = t4(np.ones((1, 1, 2, 2)), requires_grad=True)
        y = max_pool2(x)
        y.backward()
        np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])

    def test_gradient_routed_to_argmax(self):
        x = t4(np.array([[1.0, 9.0], [3.0, 4.0]]).reshape(1, 1, 2, 2),
               requires_grad=True)
        max_pool2(x).backward(np.full((1, 1, 1, 1), 5.0))
        np.testing.assert_array_equal(x.grad[0, 0], [[0.0, 5.0], [0.0, 0.0]])


def bilinear_reference_up2(x):
    """Direct half-pixel bilinear 2x upsample (edge-clamped), per output pixel."""
    n, c, h, w = x.shape
    out = np.zeros((n, c, 2 * h, 2 * w))
    for oi in range(2 * h):
        si = (oi + 0.5) / 2.0 - 0.5
        i0 = int(np.floor(si))
        fi = si - i0
        i0c, i1c = np.clip([i0, i0 + 1], 0, h - 1)
        for oj in range(2 * w):
            sj = (oj + 0.5) / 2.0 - 0.5
            j0 = int(np.floor(sj))
            fj = sj - j0
            j0c, j1c = np.clip([j0, j0 + 1], 0, w - 1)
            out[:, :, oi, oj] = ((1 - fi) * (1 - fj) * x[:, :, i0c, j0c]
                                 + (1 - fi) * fj * x[:, :, i0c, j1c]
                                 + fi * (1 - fj) * x[:, :, i1c, j0c]
                                 + fi * fj * x[:, :, i1c, j1c])
    return out


class TestBilinearUp2:
    def test_2x2_closed_form(self):
        # half-pixel sampling of [0, 1] along one axis gives
        # [-0.25, 0.25, 0.75, 1.25] before edge clamping -> [0, .25, .75, 1]
        x = t4(np.array([[0.0, 1.0], [0.0, 1.0]]).reshape(1, 1, 2, 2))
        y = bilinear_up2(x)
        np.testing.assert_allclose(
            y.data[0, 0],
            np.tile([0.0, 0.25, 0.75, 1.0], (4, 1)), rtol=0, atol=1e-12)

    def test_matches_direct_interpolation(self, rng):
        x = rng.standard_normal((2, 3, 5, 7))
        got = bilinear_up2(Tensor4(x)).data
        np.testing.assert_allclose(got, bilinear_reference_up2(x),
                                   rtol=1e-10, atol=1e-12)

    def test_constant_preserved(self):
        x = t4(np.full((1, 2, 4, 4), 3.25))
        np.testing.assert_allclose(bilinear_up2(x).data, 3.25, rtol=1e-12)

    def test_interp_matrix_rows_sum_to_one(self):
        m = interp_matrix(5, 10)
        np.testing.assert_allclose(m.sum(axis=1), 1.0, rtol=1e-12)

    def test_cached_matrix_is_write_protected(self):
        m = interp_matrix(4, 8)
        with pytest.raises(ValueError):
            m[0, 0] = 99.0


# ---------------------------------------------------------------------------
# batch norm
# ---------------------------------------------------------------------------

class TestBatchNorm:
    def make(self, c, dtype=np.float64):
        gamma = Tensor4(np.ones((1, c, 1, 1), dtype=dtype), requires_grad=True)
        beta = Tensor4(np.zeros((1, c, 1, 1), dtype=dtype), requires_grad=True)
        state = BNState.create(c, dtype=dtype)
        return gamma, beta, state

    def test_train_standardizes_with_population_variance(self):
        # channel values {1, 3}: mean 2, population var 1 -> xhat = {-1, +1}
        x = t4(np.array([1.0, 3.0, 1.0, 3.0]).reshape(1, 1, 2, 2))
        gamma, beta, state = self.make(1)
        y = batch_norm(x, gamma, beta, state, mode="train")
        np.testing.assert_allclose(
            y.data[0, 0], [[-1.0, 1.0], [-1.0, 1.0]], rtol=0, atol=1e-4)

    def test_affine_map_applied(self):
        x = t4(np.array([1.0, 3.0, 1.0, 3.0]).reshape(1, 1, 2, 2))
        gamma, beta, state = self.make(1)
        gamma.data[:] = 2.0
        beta.data[:] = 10.0
        y = batch_norm(x, gamma, beta, state, mode="train")
        np.testing.assert_allclose(y.data[0, 0], [[8.0, 12.0], [8.0, 12.0]],
                                   rtol=0, atol=1e-3)

    def test_running_stats_updated_after_forward(self):
        x = t4(np.array([1.0, 3.0, 1.0, 3.0]).reshape(1, 1, 2, 2))
        gamma, beta, state = self.make(1)
        batch_norm(x, gamma, beta, state, mode="train")
        # running <- 0.9 * init + 0.1 * batch_stat, with init mean 0 / var 1
        np.testing.assert_allclose(state.running_mean, [0.2], rtol=1e-6)
        np.testing.assert_allclose(state.running_var, [0.9 + 0.1 * 1.0], rtol=1e-6)

    def test_eval_uses_running_stats(self):
        x = t4(np.array([4.0, 6.0, 4.0, 6.0]).reshape(1, 1, 2, 2))
        gamma, beta, state = self.make(1)
        state.running_mean = np.array([5.0])
        state.running_var = np.array([4.0])
        y = batch_norm(x, gamma, beta, state, mode="eval")
        np.testing.assert_allclose(y.data[0, 0], [[-0.5, 0.5], [-0.5, 0.5]],
                                   rtol=0, atol=1e-3)
        # eval must not touch the stored statistics
        np.testing.assert_array_equal(state.running_mean, [5.0])

    def test_single_element_batch_rejected_in_train(self):
        x = t4(np.zeros((1, 3, 1, 1)))
        gamma, beta, state = self.make(3)
        with pytest.raises(ShapeError):
            batch_norm(x, gamma, beta, state, mode="train")
        # eval mode is fine for the same shape
        batch_norm(x, gamma, beta, state, mode="eval")

    def test_bad_mode_rejected(self):
        x = t4(np.zeros((1, 1, 2, 2)))
        gamma, beta, state = self.make(1)
        with pytest.raises(ValueError):
            batch_norm(x, gamma, beta, state, mode="test")


# ---------------------------------------------------------------------------
# finite-difference gradient checks, op by op
# ---------------------------------------------------------------------------

class TestGradCheck:
    def check(self, closure, inputs, tol=1e-6):
        report = grad_check(closure, inputs, tolerance=tol)
        assert report.passed, str(report)

    def test_conv2d(self, rng):
        x = rand_t4(rng, (2, 3, 6, 6))
        w = rand_t4(rng, (4, 3, 3, 3))
        b = rand_t4(rng, (1, 4, 1, 1))
        self.check(lambda x, w, b: conv2d(x, w, b, kernel=3), [x, w, b])

    def test_conv2d_strided(self, rng):
        x = rand_t4(rng, (1, 2, 8, 8))
        w = rand_t4(rng, (3, 2, 3, 3))
        b = rand_t4(rng, (1, 3, 1, 1))
        self.check(lambda x, w, b: conv2d(x, w, b, kernel=3, stride=2), [x, w, b])

    def test_relu_away_from_kink(self, rng):
        x = Tensor4(rng.standard_normal((2, 3, 5, 5)) + 0.2, requires_grad=True)
        # shift values away from 0 so central differences are clean
        x.data[np.abs(x.data) < 0.05] = 0.1
        self.check(relu, [x])

    def test_sigmoid(self, rng):
        self.check(sigmoid, [rand_t4(rng, (2, 2, 4, 4))])

    def test_max_pool(self, rng):
        x = Tensor4(np.arange(64, dtype=np.float64).reshape(1, 1, 8, 8)
                    + 0.01 * rng.standard_normal((1, 1, 8, 8)), requires_grad=True)
        self.check(max_pool2, [x])

    def test_bilinear_up2(self, rng):
        self.check(bilinear_up2, [rand_t4(rng, (2, 3, 4, 4))])

    def test_pixel_shuffle(self, rng):
        self.check(pixel_shuffle2, [rand_t4(rng, (1, 8, 3, 3))])

    def test_channel_mean_and_scale(self, rng):
        x = rand_t4(rng, (2, 4, 5, 5))
        s = rand_t4(rng, (2, 4, 1, 1))
        self.check(lambda x, s: channel_scale(x, sigmoid(s)), [x, s])
        self.check(channel_mean, [rand_t4(rng, (2, 3, 4, 4))])

    def test_batch_norm_train_and_eval(self, rng):
        x = rand_t4(rng, (2, 3, 4, 4))
        gamma = Tensor4(1.0 + 0.1 * rng.standard_normal((1, 3, 1, 1)),
                        requires_grad=True)
        beta = Tensor4(0.1 * rng.standard_normal((1, 3, 1, 1)), requires_grad=True)
        state = BNState.create(3, dtype=np.float64)
        for mode in ("train", "eval"):
            st = state.copy()
            st.running_var = np.abs(rng.standard_normal(3)) + 0.5
            st.running_mean = rng.standard_normal(3)
            self.check(lambda x, g, b, _st=st, _m=mode:
                       batch_norm(x, g, b, _st.copy(), mode=_m),
                       [x, gamma, beta], tol=1e-5)

    def test_composite_graph(self, rng):
        x = rand_t4(rng, (1, 4, 6, 6))
        w = rand_t4(rng, (4, 4, 3, 3))
        b = rand_t4(rng, (1, 4, 1, 1))

        def net(x, w, b):
            h = relu(conv2d(x, w, b, kernel=3))
            h.data[...] = h.data  # no-op; graph reuse happens via closure
            return add(bilinear_up2(max_pool2(h)), sigmoid(x))

        self.check(net, [x, w, b], tol=1e-5)

    def test_detects_wrong_gradient(self, rng):
        # an op that lies about its backward must fail the check
        x = rand_t4(rng, (1, 1, 3, 3))

        def dishonest(x):
            out = Tensor4._from_op(2.0 * x.data, (x,))
            out._backward = lambda g: x._accum(3.0 * g)  # claims slope 3
            return out

        report = grad_check(dishonest, [x], tolerance=1e-4)
        assert not report.passed
        assert report.max_rel_error > 0.1

    def test_requires_double_precision(self, rng):
        x = Tensor4(rng.standard_normal((1, 1, 2, 2)).astype(np.float32),
                    requires_grad=True)
        with pytest.raises(ShapeError):
            grad_check(relu, [x])

    def test_warns_when_relu_kink_is_close(self):
        x = Tensor4(np.full((1, 1, 2, 2), 1e-7), requires_grad=True)
        report = grad_check(relu, [x], tolerance=1.0)
        assert any("relu" in f.lower() for f in report.failures)
        assert report.min_relu_gap <= 1e-7

    def test_spot_check_on_large_tensors(self, rng):
        x = rand_t4(rng, (1, 4, 16, 16))  # 1024 > max_full=512
        report = grad_check(lambda x: scale(x, 2.0), [x], tolerance=1e-6)
        assert report.passed
