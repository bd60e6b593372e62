import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beamckm import tensor as T
from beamckm.gradcheck import OP_CASES, check_gradients, run_op_check
from beamckm.tensor import AdamState, NanGradientError, Tensor, adam_step, lr_at_epoch


def naive_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


def naive_conv2d(x, w, stride=1, padding=0):
    b, c, h, ww = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (ww + 2 * padding - kw) // stride + 1
    out = np.zeros((b, o, ho, wo))
    for bi in range(b):
        for oi in range(o):
            for yi in range(ho):
                for xi in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for dy in range(kh):
                            for dx in range(kw):
                                acc += (
                                    xp[bi, ci, yi * stride + dy, xi * stride + dx]
                                    * w[oi, ci, dy, dx]
                                )
                    out[bi, oi, yi, xi] = acc
    return out


def naive_bilinear_up2(x):
    b, c, h, w = x.shape
    out = np.zeros((b, c, 2 * h, 2 * w))
    for i in range(2 * h):
        for j in range(2 * w):
            sy = (i + 0.5) / 2 - 0.5
            sx = (j + 0.5) / 2 - 0.5
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            fy, fx = sy - y0, sx - x0
            y0c, y1c = np.clip([y0, y0 + 1], 0, h - 1)
            x0c, x1c = np.clip([x0, x0 + 1], 0, w - 1)
            out[:, :, i, j] = (
                (1 - fy) * (1 - fx) * x[:, :, y0c, x0c]
                + (1 - fy) * fx * x[:, :, y0c, x1c]
                + fy * (1 - fx) * x[:, :, y1c, x0c]
                + fy * fx * x[:, :, y1c, x1c]
            )
    return out


class TestForwardOracles:
    def test_conv_sum_of_ones(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        k = Tensor(np.ones((1, 1, 3, 3)))
        out = T.conv2d(x, k)
        np.testing.assert_array_equal(out.data, [[[[9.0]]]])

    def test_conv_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((2, 3, 5, 5)))
        k = np.zeros((3, 3, 1, 1))
        for i in range(3):
            k[i, i, 0, 0] = 1.0
        out = T.conv2d(x, Tensor(k))
        np.testing.assert_array_equal(out.data, x.data)

    def test_conv_matches_naive_loops(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 3, 8, 8))
        w = rng.standard_normal((4, 3, 3, 3))
        out = T.conv2d(Tensor(x), Tensor(w), stride=1, padding=0)
        assert np.max(np.abs(out.data - naive_conv2d(x, w))) < 1e-12

    def test_conv_strided_padded_matches_naive(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((1, 2, 7, 7))
        w = rng.standard_normal((3, 2, 3, 3))
        out = T.conv2d(Tensor(x), Tensor(w), stride=2, padding=1)
        assert np.max(np.abs(out.data - naive_conv2d(x, w, 2, 1))) < 1e-12

    def test_conv_rejects_non_integral_output(self):
        x = Tensor(np.zeros((1, 1, 6, 6)))
        k = Tensor(np.zeros((1, 1, 3, 3)))
        with pytest.raises(ValueError):
            T.conv2d(x, k, stride=2, padding=0)

    def test_avg_pool_constant_and_block(self):
        c = Tensor(np.full((1, 1, 4, 4), 3.25))
        np.testing.assert_array_equal(T.avg_pool2(c).data, np.full((1, 1, 2, 2), 3.25))
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        np.testing.assert_array_equal(T.avg_pool2(x).data, [[[[2.5]]]])

    def test_avg_pool_matches_block_means(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 3, 4, 4))
        out = T.avg_pool2(Tensor(x)).data
        for i in range(2):
            for j in range(2):
                block = x[:, :, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2]
                np.testing.assert_allclose(out[:, :, i, j], block.mean(axis=(2, 3)), atol=1e-15)

    def test_avg_pool_rejects_odd_dims(self):
        with pytest.raises(ValueError):
            T.avg_pool2(Tensor(np.zeros((1, 1, 3, 4))))

    def test_upsample_constant_and_single_pixel(self):
        c = Tensor(np.full((1, 2, 3, 3), -1.5))
        np.testing.assert_allclose(T.bilinear_upsample2(c).data, -1.5, atol=1e-15)
        v = Tensor(np.array([[[[7.0]]]]))
        np.testing.assert_array_equal(T.bilinear_upsample2(v).data, np.full((1, 1, 2, 2), 7.0))

    def test_upsample_matches_per_pixel_formula(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((1, 2, 3, 3))
        out = T.bilinear_upsample2(Tensor(x)).data
        assert np.max(np.abs(out - naive_bilinear_up2(x))) < 1e-12

    def test_pool_then_upsample_constant_is_identity(self):
        c = np.full((2, 1, 8, 8), 0.613)
        out = T.bilinear_upsample2(T.avg_pool2(Tensor(c))).data
        assert np.max(np.abs(out - c)) < 1e-12

    def test_matmul_matches_triple_loop(self):
        rng = np.random.default_rng(5)
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 5))
        out = T.matmul(Tensor(a), Tensor(b)).data
        assert np.max(np.abs(out - naive_matmul(a, b))) < 1e-12

    def test_layer_norm_fixed_point(self):
        # already zero-mean unit-variance rows stay put under identity affine
        x = np.array([[1.0, -1.0], [2.0, -2.0]]) / np.array([[1.0], [2.0]])
        out = T.layer_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, x, atol=1e-5)

    def test_softmax_constant_vector(self):
        out = T.softmax(Tensor(np.full((2, 5), 3.7)))
        np.testing.assert_allclose(out.data, 0.2, atol=1e-15)

    def test_softmax_length_one_is_exactly_one(self):
        out = T.softmax(Tensor(np.array([[42.0]])))
        assert out.data[0, 0] == 1.0

    def test_pad_replicate_edges(self):
        x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2))
        out = T.pad_replicate(x, 1).data[0, 0]
        np.testing.assert_array_equal(out[0], [0, 0, 1, 1])
        np.testing.assert_array_equal(out[-1], [2, 2, 3, 3])


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = Tensor(np.random.default_rng(0).standard_normal((3, 4)), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_sum_of_squares_gradient(self):
        x = Tensor(np.random.default_rng(1).standard_normal(7), requires_grad=True)
        T.mul(x, x).sum().backward()
        np.testing.assert_allclose(x.grad, 2 * x.data, atol=1e-15)

    def test_fanout_accumulates_exactly(self):
        x = Tensor(np.array([1.5, -2.0, 0.5]), requires_grad=True)
        y = T.add(T.mul(x, x), T.scale(x, 3.0))  # f(x) + g(x)
        y.sum().backward()
        np.testing.assert_array_equal(x.grad, 2 * x.data + 3.0)

    def test_nonscalar_root_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            T.mul(x, x).backward()

    def test_repeated_backward_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = x.sum()
        loss.backward()
        with pytest.raises(RuntimeError):
            loss.backward()

    def test_no_grad_suppresses_graph(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            out = T.mul(x, x).sum()
        assert out._parents == ()


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_gradcheck_per_op(name):
    worst = run_op_check(name, instances=5, seed=123)
    assert worst <= 1e-4


class TestAdam:
    def test_zero_gradient_leaves_params_unchanged(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        p.grad = np.zeros(2)
        state = AdamState(lr=1e-3)
        adam_step({"p": p}, state)
        np.testing.assert_array_equal(p.data, [1.0, 2.0])

    def test_first_step_magnitude_is_lr(self):
        # bias-corrected first step: lr * g / (|g| + eps) ~= lr * sign(g)
        g = 0.3
        p = Tensor(np.array([5.0]), requires_grad=True)
        p.grad = np.array([g])
        state = AdamState(lr=1e-2)
        adam_step({"p": p}, state)
        assert abs((5.0 - p.data[0]) - 1e-2) < 1e-8

    def test_constant_gradient_descends(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        state = AdamState(lr=0.1)
        for _ in range(10):
            p.grad = np.array([1.0])
            adam_step({"p": p}, state)
        assert p.data[0] < -0.9  # ~ -lr per step against a constant gradient

    def test_nan_gradient_aborts(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        p.grad = np.array([np.nan])
        with pytest.raises(NanGradientError):
            adam_step({"p": p}, AdamState())

    def test_lr_schedule_matches_protocol(self):
        assert lr_at_epoch(1e-4, 0) == pytest.approx(1e-4)
        assert lr_at_epoch(1e-4, 19) == pytest.approx(1e-4)
        assert lr_at_epoch(1e-4, 20) == pytest.approx(2e-5)
        assert lr_at_epoch(1e-4, 40) == pytest.approx(4e-6)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=20, deadline=None)
def test_chain_rule_matches_fd_on_random_compositions(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 3)) * 0.5, requires_grad=True)

    def builder():
        h = T.gelu(T.matmul(x, w))
        return T.mul(h, h).mean()

    assert check_gradients(builder, [x, w]) <= 1e-4


def test_deterministic_graph_execution():
    rng = np.random.default_rng(9)
    xd = rng.standard_normal((2, 2, 8, 8))
    kd = rng.standard_normal((3, 2, 3, 3))

    def run():
        x = Tensor(xd.copy(), requires_grad=True)
        k = Tensor(kd.copy(), requires_grad=True)
        loss = T.mul(T.relu(T.conv2d(x, k, padding=1)), T.relu(T.conv2d(x, k, padding=1))).mean()
        loss.backward()
        return loss.item(), x.grad.copy(), k.grad.copy()

    l1, gx1, gk1 = run()
    l2, gx2, gk2 = run()
    assert l1 == l2
    np.testing.assert_array_equal(gx1, gx2)
    np.testing.assert_array_equal(gk1, gk2)
