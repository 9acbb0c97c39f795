"""Tensor engine tests: forward oracles, gradient checks, Adam, container IO."""

import io

import numpy as np
import pytest

from polarnet import tensor as T


def conv2d_reference(x, w, b=None, dilation=1, stride=1, pad=(0, 0)):
    """Six-nested-loop cross-correlation, zero padded; the conv oracle."""
    N, Cin, H, W = x.shape
    Cout, _, K, _ = w.shape
    ph, pw = pad
    xp = np.zeros((N, Cin, H + 2 * ph, W + 2 * pw), dtype=np.float64)
    xp[:, :, ph:ph + H, pw:pw + W] = x
    eff = (K - 1) * dilation + 1
    Ho = (H + 2 * ph - eff) // stride + 1
    Wo = (W + 2 * pw - eff) // stride + 1
    out = np.zeros((N, Cout, Ho, Wo))
    for n in range(N):
        for co in range(Cout):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0
                    for ci in range(Cin):
                        for ki in range(K):
                            for kj in range(K):
                                acc += (xp[n, ci, i * stride + ki * dilation,
                                           j * stride + kj * dilation]
                                        * w[co, ci, ki, kj])
                    out[n, co, i, j] = acc + (b[co] if b is not None else 0.0)
    return out


def maxpool_reference(x, k, stride=1):
    """Sliding-window maximum oracle (valid padding)."""
    N, C, H, W = x.shape
    Ho = (H - k) // stride + 1
    Wo = (W - k) // stride + 1
    out = np.zeros((N, C, Ho, Wo), dtype=x.dtype)
    for i in range(Ho):
        for j in range(Wo):
            out[:, :, i, j] = x[:, :, i * stride:i * stride + k,
                                j * stride:j * stride + k].max(axis=(2, 3))
    return out


def finite_diff_grads(forward, params, eps=1e-3):
    """Central finite differences of a scalar-valued forward per parameter."""
    grads = []
    for p in params:
        g = np.zeros_like(p.data, dtype=np.float64)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = forward()
            flat[i] = orig - eps
            lo = forward()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def assert_grads_close(analytic, numeric, rel=1e-2, absol=1e-4):
    """Every entry must agree within `rel` relative or `absol` absolute."""
    diff = np.abs(analytic.astype(np.float64) - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    bad = (diff > absol) & (diff > rel * scale)
    assert not bad.any(), (
        f"{bad.sum()} gradient entries disagree; worst abs diff "
        f"{diff[bad].max():.3e} at magnitude {scale[bad].max():.3e}")


@pytest.fixture
def rng():
    return np.random.default_rng(20240117)


class TestConv2d:
    def test_ones_same_padding_corner_and_center(self):
        """3x3 ones kernel on 3x3 ones image: center 9, corners 4."""
        x = T.Tensor(np.ones((1, 1, 3, 3)))
        w = T.Tensor(np.ones((1, 1, 3, 3)))
        out = T.conv2d(x, w, padding="same").data[0, 0]
        assert out[1, 1] == 9.0
        for i, j in [(0, 0), (0, 2), (2, 0), (2, 2)]:
            assert out[i, j] == 4.0

    def test_dilation_receptive_field(self, rng):
        """A dilated 3x3 kernel only sees a 5x5 window around each output."""
        x = rng.standard_normal((1, 1, 11, 11)).astype(np.float32)
        w = rng.standard_normal((1, 1, 3, 3)).astype(np.float32)
        base = T.conv2d(T.Tensor(x), T.Tensor(w), dilation=2, padding="same").data
        # Perturb a pixel outside the 5x5 window of the center output.
        x2 = x.copy()
        x2[0, 0, 5 + 3, 5] += 10.0
        out2 = T.conv2d(T.Tensor(x2), T.Tensor(w), dilation=2, padding="same").data
        assert out2[0, 0, 5, 5] == base[0, 0, 5, 5]
        # ... but a pixel inside the window does change it.
        x3 = x.copy()
        x3[0, 0, 5 + 2, 5] += 10.0
        out3 = T.conv2d(T.Tensor(x3), T.Tensor(w), dilation=2, padding="same").data
        assert out3[0, 0, 5, 5] != base[0, 0, 5, 5]

    def test_matches_nested_loop_oracle(self, rng):
        """Seeded random case against the six-nested-loop reference."""
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32)
        got = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), padding="same").data
        want = conv2d_reference(x, w, b, pad=(1, 1))
        np.testing.assert_allclose(got, want, atol=1e-5)

    @pytest.mark.parametrize("dilation,stride,padding", [
        (1, 1, "valid"), (2, 1, "same"), (1, 2, "valid"), (3, 1, "same"), (1, 2, 1),
    ])
    def test_oracle_across_configs(self, rng, dilation, stride, padding):
        x = rng.standard_normal((2, 2, 9, 9)).astype(np.float32)
        w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
        got = T.conv2d(T.Tensor(x), T.Tensor(w), dilation=dilation,
                       stride=stride, padding=padding).data
        if padding == "same":
            pad = ((3 - 1) * dilation // 2,) * 2
        elif padding == "valid":
            pad = (0, 0)
        else:
            pad = (padding, padding)
        want = conv2d_reference(x, w, dilation=dilation, stride=stride, pad=pad)
        np.testing.assert_allclose(got, want, atol=1e-5)

    def test_linearity(self, rng):
        """conv(a*x + b*y) == a*conv(x) + b*conv(y) for a fixed kernel."""
        x = rng.standard_normal((1, 2, 6, 6)).astype(np.float32)
        y = rng.standard_normal((1, 2, 6, 6)).astype(np.float32)
        w = T.Tensor(rng.standard_normal((3, 2, 3, 3)).astype(np.float32))
        a, b = 1.7, -0.6
        lhs = T.conv2d(T.Tensor(a * x + b * y), w, padding="same").data
        rhs = (a * T.conv2d(T.Tensor(x), w, padding="same").data
               + b * T.conv2d(T.Tensor(y), w, padding="same").data)
        np.testing.assert_allclose(lhs, rhs, atol=1e-5)

    def test_circular_row_padding_wraps(self):
        """Circular rows: the top output row sees the bottom input row."""
        x = np.zeros((1, 1, 4, 4), dtype=np.float32)
        x[0, 0, 3, :] = 1.0
        w = np.zeros((1, 1, 3, 3), dtype=np.float32)
        w[0, 0, 0, 1] = 1.0  # picks the pixel one row above
        out = T.conv2d(T.Tensor(x), T.Tensor(w), padding="same",
                       row_pad="circular").data
        assert np.all(out[0, 0, 0] == 1.0)
        out_zero = T.conv2d(T.Tensor(x), T.Tensor(w), padding="same").data
        assert np.all(out_zero[0, 0, 0] == 0.0)

    def test_channel_mismatch_raises(self, rng):
        x = T.Tensor(rng.standard_normal((1, 3, 5, 5)).astype(np.float32))
        w = T.Tensor(rng.standard_normal((2, 4, 3, 3)).astype(np.float32))
        with pytest.raises(T.ShapeError):
            T.conv2d(x, w)

    def test_same_padding_requires_stride_one(self, rng):
        x = T.Tensor(rng.standard_normal((1, 1, 6, 6)).astype(np.float32))
        w = T.Tensor(rng.standard_normal((1, 1, 3, 3)).astype(np.float32))
        with pytest.raises(T.ShapeError):
            T.conv2d(x, w, stride=2, padding="same")


class TestMaxPool:
    def test_two_by_two(self):
        x = T.Tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
        out = T.maxpool2d(x, k=2, stride=1, padding="valid")
        assert out.data.shape == (1, 1, 1, 1)
        assert out.data[0, 0, 0, 0] == 4.0

    def test_constant_image_same_padding(self):
        """Max of equal values with -inf fill is the constant itself."""
        x = T.Tensor(np.full((1, 2, 5, 5), 3.25, dtype=np.float32))
        for k in (2, 3, 5):
            out = T.maxpool2d(x, k=k, padding="same")
            assert out.data.shape == x.shape
            assert np.all(out.data == 3.25)

    def test_matches_sliding_window_oracle(self, rng):
        x = rng.standard_normal((2, 3, 9, 9)).astype(np.float32)
        for k, s in [(2, 1), (3, 2), (4, 3)]:
            got = T.maxpool2d(T.Tensor(x), k=k, stride=s).data
            np.testing.assert_array_equal(got, maxpool_reference(x, k, s))

    def test_bounds_invariant(self, rng):
        """Output never exceeds the input max nor falls below the window min."""
        x = rng.standard_normal((1, 2, 8, 8)).astype(np.float32)
        out = T.maxpool2d(T.Tensor(x), k=3, stride=2).data
        assert out.max() <= x.max()
        assert out.min() >= x.min()  # window max >= any windowed min

    def test_kernel_exceeding_extent_raises(self):
        x = T.Tensor(np.zeros((1, 1, 3, 3), dtype=np.float32))
        with pytest.raises(T.ShapeError):
            T.maxpool2d(x, k=5, padding="valid")

    def test_tie_gradient_goes_to_first_rowmajor(self):
        x = T.Tensor(np.ones((1, 1, 2, 2), dtype=np.float32), requires_grad=True)
        out = T.maxpool2d(x, k=2)
        T.backward(T.sum_all(out))
        expected = np.zeros((1, 1, 2, 2), dtype=np.float32)
        expected[0, 0, 0, 0] = 1.0
        np.testing.assert_array_equal(x.grad, expected)


class TestPoolsAndActivations:
    def test_global_avg_pool_ones(self):
        out = T.global_avg_pool(T.Tensor(np.ones((1, 1, 4, 4))))
        assert out.data[0, 0] == 1.0

    def test_global_avg_pool_mean(self):
        out = T.global_avg_pool(T.Tensor([[[[1.0, 3.0], [5.0, 7.0]]]]))
        assert out.data[0, 0] == 4.0

    def test_avg_pool_consistent_with_sum(self, rng):
        x = rng.standard_normal((2, 3, 5, 7)).astype(np.float32)
        pooled = T.global_avg_pool(T.Tensor(x)).data
        np.testing.assert_allclose(pooled * 35, x.sum(axis=(2, 3)), rtol=1e-5)

    def test_activation_values(self):
        assert T.leaky_relu(T.Tensor([-1.0]), 0.01).data[0] == np.float32(-0.01)
        assert T.relu(T.Tensor([-3.0])).data[0] == 0.0
        assert T.relu(T.Tensor([2.5])).data[0] == 2.5
        assert T.sigmoid(T.Tensor([0.0])).data[0] == 0.5

    def test_linear_identity_and_bias(self, rng):
        x = rng.standard_normal((3, 4)).astype(np.float32)
        eye = T.Tensor(np.eye(4, dtype=np.float32))
        np.testing.assert_array_equal(T.linear(T.Tensor(x), eye).data, x)
        b = np.array([1.0, 2.0], dtype=np.float32)
        out = T.linear(T.Tensor(x), T.Tensor(np.zeros((2, 4))), T.Tensor(b)).data
        assert np.all(out == b)

    def test_linear_matches_dot_oracle(self, rng):
        x = rng.standard_normal((4, 6)).astype(np.float32)
        w = rng.standard_normal((3, 6)).astype(np.float32)
        b = rng.standard_normal(3).astype(np.float32)
        got = T.linear(T.Tensor(x), T.Tensor(w), T.Tensor(b)).data
        want = np.array([[np.dot(x[n], w[o]) + b[o] for o in range(3)]
                         for n in range(4)])
        np.testing.assert_allclose(got, want, atol=1e-5)


class TestElementwise:
    def test_concat_channel_counts(self, rng):
        a = T.Tensor(rng.standard_normal((1, 4, 3, 3)).astype(np.float32))
        b = T.Tensor(rng.standard_normal((1, 6, 3, 3)).astype(np.float32))
        assert T.concat([a, b], axis=1).shape == (1, 10, 3, 3)

    def test_add_zeros_identity(self, rng):
        x = rng.standard_normal((2, 3)).astype(np.float32)
        out = T.add(T.Tensor(x), T.Tensor(np.zeros_like(x)))
        np.testing.assert_array_equal(out.data, x)

    def test_scale_roundtrip_bit_exact(self, rng):
        x = rng.standard_normal((4, 4)).astype(np.float32)
        out = T.scale(T.scale(T.Tensor(x), 2.0), 0.5)
        np.testing.assert_array_equal(out.data, x)

    def test_shape_mismatch_raises(self):
        with pytest.raises(T.ShapeError):
            T.add(T.Tensor(np.zeros((2, 2))), T.Tensor(np.zeros((2, 3))))
        with pytest.raises(T.ShapeError):
            T.mul(T.Tensor(np.zeros((2, 2))), T.Tensor(np.zeros((3, 2))))

    def test_nonfinite_rejected(self):
        with pytest.raises(T.NumericError):
            T.Tensor([1.0, np.nan])
        with pytest.raises(T.NumericError):
            T.Tensor([np.inf])


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = T.Tensor(rng.standard_normal((3, 4)).astype(np.float32),
                     requires_grad=True)
        T.backward(T.sum_all(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 4), dtype=np.float32))

    def test_square_gives_two_x(self, rng):
        xv = rng.standard_normal((5,)).astype(np.float32)
        x = T.Tensor(xv, requires_grad=True)
        T.backward(T.sum_all(T.mul(x, x)))
        np.testing.assert_allclose(x.grad, 2 * xv, rtol=1e-6)

    def test_fanout_accumulates(self, rng):
        x = T.Tensor(rng.standard_normal((4,)).astype(np.float32),
                     requires_grad=True)
        y = T.add(x, x)
        T.backward(T.sum_all(y))
        np.testing.assert_array_equal(x.grad, np.full(4, 2.0, dtype=np.float32))

    def test_double_backward_raises(self):
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        loss = T.sum_all(x)
        T.backward(loss)
        with pytest.raises(T.GraphError):
            T.backward(loss)

    def test_nonscalar_loss_raises(self):
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(T.GraphError):
            T.backward(T.add(x, x))

    def test_detached_loss_raises(self):
        with pytest.raises(T.GraphError):
            T.backward(T.Tensor([1.0]))

    def test_gradient_additivity(self, rng):
        """Backward on two losses accumulates the same as their sum."""
        xv = rng.standard_normal((6,)).astype(np.float32)
        x = T.Tensor(xv, requires_grad=True)
        T.backward(T.sum_all(T.mul(x, x)))
        T.backward(T.sum_all(T.scale(x, 3.0)))
        accumulated = x.grad.copy()
        y = T.Tensor(xv, requires_grad=True)
        T.backward(T.add(T.sum_all(T.mul(y, y)), T.sum_all(T.scale(y, 3.0))))
        np.testing.assert_allclose(accumulated, y.grad, rtol=1e-6)

    def test_graph_nodes_topologically_ordered(self, rng):
        x = T.Tensor(rng.standard_normal((2, 2)).astype(np.float32),
                     requires_grad=True)
        loss = T.sum_all(T.mul(T.add(x, x), x))
        seen = set()
        for _, parent_ids, node_id in T.graph_nodes(loss):
            assert all(p in seen for p in parent_ids)
            seen.add(node_id)

    def test_no_grad_blocks_tracking(self, rng):
        x = T.Tensor(rng.standard_normal((3,)).astype(np.float32),
                     requires_grad=True)
        with T.no_grad():
            y = T.sum_all(T.mul(x, x))
        assert not y.requires_grad
        with pytest.raises(T.GraphError):
            T.backward(y)


def mean_square(y):
    """O(1)-magnitude scalar probe: mean of squares.

    Keeping the probe loss near 1 keeps the f32 rounding floor of central
    differences below the 1e-4 absolute tolerance.
    """
    return T.scale(T.sum_all(T.mul(y, y)), 1.0 / y.data.size)


class TestGradientChecks:
    """Central finite differences against backward() for each op."""

    def check(self, build, params, eps=1e-3, rel=1e-2, absol=1e-4):
        loss = build()
        T.backward(loss)
        analytic = [p.grad.copy() for p in params]
        for p in params:
            p.zero_grad()
        numeric = finite_diff_grads(lambda: float(build().data), params, eps)
        for a, n in zip(analytic, numeric):
            assert_grads_close(a, n, rel, absol)

    def test_conv2d_grads(self, rng):
        x = T.Tensor(rng.standard_normal((1, 2, 5, 5)).astype(np.float32),
                     requires_grad=True)
        w = T.Tensor(0.3 * rng.standard_normal((2, 2, 3, 3)).astype(np.float32),
                     requires_grad=True)
        b = T.Tensor(np.zeros(2, dtype=np.float32), requires_grad=True)
        self.check(lambda: mean_square(T.conv2d(x, w, b, padding="same")),
                   [x, w, b])

    def test_conv2d_strided_dilated_circular_grads(self, rng):
        x = T.Tensor(rng.standard_normal((1, 1, 6, 6)).astype(np.float32),
                     requires_grad=True)
        w = T.Tensor(0.5 * rng.standard_normal((2, 1, 3, 3)).astype(np.float32),
                     requires_grad=True)

        def build():
            y = T.conv2d(x, w, dilation=1, stride=2, padding=1, row_pad="circular")
            return mean_square(y)

        self.check(build, [x, w])

    def test_maxpool_grads(self, rng):
        x = T.Tensor(rng.standard_normal((1, 2, 6, 6)).astype(np.float32),
                     requires_grad=True)
        self.check(lambda: mean_square(T.maxpool2d(x, 3, padding="same")), [x])

    def test_activation_and_pool_grads(self, rng):
        x = T.Tensor(rng.standard_normal((2, 3, 4, 4)).astype(np.float32),
                     requires_grad=True)

        def build():
            h = T.leaky_relu(x, 0.01)
            h = T.sigmoid(h)
            return mean_square(T.global_avg_pool(h))

        self.check(build, [x])

    def test_global_and_channel_max_grads(self, rng):
        x = T.Tensor(rng.standard_normal((2, 3, 4, 4)).astype(np.float32),
                     requires_grad=True)

        def build():
            a = T.global_max_pool(x)
            m = T.channel_max(x)
            return T.add(mean_square(a), mean_square(m))

        self.check(build, [x])

    def test_linear_and_gating_grads(self, rng):
        x = T.Tensor(rng.standard_normal((2, 3, 4, 4)).astype(np.float32),
                     requires_grad=True)
        gate = T.Tensor(rng.uniform(0.2, 0.8, (2, 3)).astype(np.float32),
                        requires_grad=True)
        smap = T.Tensor(rng.uniform(0.2, 0.8, (2, 1, 4, 4)).astype(np.float32),
                        requires_grad=True)
        w = T.Tensor(0.4 * rng.standard_normal((2, 3)).astype(np.float32),
                     requires_grad=True)

        def build():
            h = T.scale_spatial(T.scale_channels(x, gate), smap)
            z = T.linear(T.global_avg_pool(h), w)
            return mean_square(z)

        self.check(build, [x, gate, smap, w])

    def test_cross_entropy_grads(self, rng):
        logits = T.Tensor(rng.standard_normal((4, 2)).astype(np.float32),
                          requires_grad=True)
        labels = np.array([0, 1, 1, 0])
        weights = np.array([0.7, 1.3], dtype=np.float32)
        self.check(lambda: T.cross_entropy_logits(logits, labels, weights),
                   [logits])

    def test_concat_grads(self, rng):
        a = T.Tensor(rng.standard_normal((1, 2, 3, 3)).astype(np.float32),
                     requires_grad=True)
        b = T.Tensor(rng.standard_normal((1, 3, 3, 3)).astype(np.float32),
                     requires_grad=True)
        self.check(lambda: mean_square(T.concat([a, b], 1)), [a, b])

    def test_scale_by_grads(self, rng):
        x = T.Tensor(rng.standard_normal((3, 4)).astype(np.float32),
                     requires_grad=True)
        s = T.Tensor(np.array([0.7], dtype=np.float32), requires_grad=True)
        self.check(lambda: mean_square(T.scale_by(x, s)), [x, s])


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = T.Tensor([1.0, -2.0], requires_grad=True)
        state = T.adam_init([p])
        T.adam_step([p], [np.zeros(2, dtype=np.float32)], state, lr=0.1)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_is_signed_lr(self):
        """With bias correction the first step is ~lr * sign(g)."""
        p = T.Tensor([0.0], requires_grad=True)
        state = T.adam_init([p])
        T.adam_step([p], [np.array([4.0], dtype=np.float32)], state, lr=0.1)
        np.testing.assert_allclose(p.data, [-0.1], rtol=1e-4)

    def test_quadratic_descent_monotone(self):
        """10 steps on (w-3)^2 with lr=0.1 move w monotonically toward 3."""
        w = T.Tensor([0.0], requires_grad=True)
        state = T.adam_init([w])
        last = 0.0
        for _ in range(10):
            g = 2.0 * (w.data - 3.0)
            T.adam_step([w], [g], state, lr=0.1)
            assert last < w.data[0] < 3.0
            last = w.data[0]

    def test_shape_mismatch_raises(self):
        p = T.Tensor([1.0, 2.0], requires_grad=True)
        state = T.adam_init([p])
        with pytest.raises(T.ShapeError):
            T.adam_step([p], [np.zeros(3, dtype=np.float32)], state, lr=0.1)


class TestContainer:
    def test_record_roundtrip(self, rng, tmp_path):
        arrays = [("alpha", rng.standard_normal((3, 4)).astype(np.float32)),
                  ("beta", rng.standard_normal((2,)).astype(np.float32))]
        path = tmp_path / "params.ckpt"
        T.save_container(path, arrays, meta={"note": "unit"})
        manifest, loaded = T.load_container(path)
        assert manifest["names"] == ["alpha", "beta"]
        assert manifest["note"] == "unit"
        for name, arr in arrays:
            np.testing.assert_array_equal(loaded[name], arr)

    def test_record_layout_is_json_line_plus_raw_f32(self, rng):
        buf = io.BytesIO()
        arr = np.arange(6, dtype=np.float32).reshape(2, 3)
        T.write_tensor_record(buf, "w", arr)
        raw = buf.getvalue()
        header, rest = raw.split(b"\n", 1)
        assert b'"shape": [2, 3]' in header
        np.testing.assert_array_equal(
            np.frombuffer(rest, dtype="<f4").reshape(2, 3), arr)
