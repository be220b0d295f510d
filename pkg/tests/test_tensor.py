"""Engine tests: op semantics, finite-difference agreement, graph behavior."""

import numpy as np
import pytest

from gradcheck import finite_difference_grad, max_rel_error
from selfdistill import tensor as T
from selfdistill.tensor import Tensor, backward


def _project(out, seed=0):
    """Reduce any-output tensor to a scalar with a fixed random cotangent."""
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return T.tsum(T.mul(out, Tensor(w)))


def _gradcheck(build, arrays, eps=1e-3, tol=1e-4):
    """Analytic grads of build(leaves) vs central differences on the same buffers."""
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    backward(build(leaves))
    analytic = [leaf.grad.copy() for leaf in leaves]

    def f():
        with T.no_grad():
            return build([Tensor(a) for a in arrays]).item()

    numeric = finite_difference_grad(f, arrays, eps=eps)
    err = max_rel_error(analytic, numeric)
    assert err <= tol, f"max relative error {err:.3e} > {tol}"


class TestForwardOps:
    def test_relu_values(self):
        out = T.relu(Tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_conv2d_output_shape(self):
        x = Tensor(np.zeros((1, 1, 4, 4), dtype=np.float32))
        w = Tensor(np.zeros((1, 1, 3, 3), dtype=np.float32))
        assert T.conv2d(x, w, stride=1, padding=0).shape == (1, 1, 2, 2)

    def test_matmul_ones(self):
        a = Tensor(np.ones((2, 3), dtype=np.float32))
        b = Tensor(np.ones((3, 2), dtype=np.float32))
        np.testing.assert_array_equal(T.matmul(a, b).data, np.full((2, 2), 3.0))

    def test_matmul_shape_error_names_shapes(self):
        with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))

    def test_add_shape_error(self):
        with pytest.raises(T.ShapeError, match="add"):
            T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))

    def test_conv2d_shape_error(self):
        with pytest.raises(T.ShapeError, match="conv2d"):
            T.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))

    def test_nonfinite_surfaces_at_the_op(self):
        with pytest.raises(T.NonFiniteError, match="log"):
            T.log(Tensor([0.0]))

    def test_avgpool_values(self):
        x = Tensor(np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4))
        out = T.avgpool2d(x, 2)
        np.testing.assert_allclose(out.data, [[[[2.5, 4.5], [10.5, 12.5]]]])

    def test_global_avgpool(self):
        x = Tensor(np.arange(8, dtype=np.float32).reshape(1, 2, 2, 2))
        np.testing.assert_allclose(T.global_avgpool(x).data, [[1.5, 5.5]])

    def test_conv2d_matches_direct_convolution(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 3, 6, 6))
        w = rng.standard_normal((4, 3, 3, 3))
        out = T.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
        # direct nested-loop reference
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros_like(out)
        for b in range(2):
            for co in range(4):
                for i in range(out.shape[2]):
                    for j in range(out.shape[3]):
                        patch = xp[b, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
                        ref[b, co, i, j] = (patch * w[co]).sum()
        np.testing.assert_allclose(out, ref, rtol=1e-12)


class TestBackward:
    def test_sum_grad_is_ones(self):
        x = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3), requires_grad=True)
        backward(T.tsum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square_sum_grad(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        backward(T.tsum(T.mul(x, x)))
        np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(T.ShapeError, match="scalar"):
            backward(T.mul(x, 2.0))

    def test_repeated_backward_accumulates(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = T.tsum(T.mul(x, x))
        backward(loss)
        backward(loss)
        np.testing.assert_allclose(x.grad, [4.0, 8.0])

    def test_each_node_visited_once(self):
        x = Tensor([1.0], requires_grad=True)
        y = T.mul(x, 2.0)
        z = T.add(y, y)  # diamond: y feeds z twice
        backward(T.tsum(z))
        np.testing.assert_allclose(x.grad, [4.0])

    def test_linearity_of_backward(self):
        rng = np.random.default_rng(0)
        xv = rng.standard_normal(5)
        a, b = 2.3, -0.7

        def grad_of(fn):
            x = Tensor(xv, requires_grad=True)
            backward(fn(x))
            return x.grad

        g1 = grad_of(lambda x: T.tsum(T.mul(x, x)))
        g2 = grad_of(lambda x: T.tsum(T.exp(x)))
        combined = grad_of(
            lambda x: T.add(T.mul(T.tsum(T.mul(x, x)), a), T.mul(T.tsum(T.exp(x)), b)))
        np.testing.assert_allclose(combined, a * g1 + b * g2, atol=1e-10)

    def test_no_grad_builds_no_graph(self):
        x = Tensor([1.0], requires_grad=True)
        with T.no_grad():
            y = T.mul(x, 3.0)
        assert not y.requires_grad and y._parents == ()

    def test_detach_blocks_gradient(self):
        x = Tensor([2.0], requires_grad=True)
        backward(T.tsum(T.mul(x.detach(), x)))
        np.testing.assert_allclose(x.grad, [2.0])

    def test_determinism(self):
        rng = np.random.default_rng(11)
        xv = rng.standard_normal((4, 4)).astype(np.float32)
        wv = rng.standard_normal((4, 4)).astype(np.float32)

        def run():
            x = Tensor(xv.copy())
            w = Tensor(wv.copy(), requires_grad=True)
            loss = T.tsum(T.relu(T.matmul(x, w)))
            backward(loss)
            return loss.data.copy(), w.grad.copy()

        l1, g1 = run()
        l2, g2 = run()
        assert l1.tobytes() == l2.tobytes()
        assert g1.tobytes() == g2.tobytes()


class TestFiniteDifference:
    """Every registered op agrees with the central-difference oracle (f64)."""

    def test_matmul(self):
        rng = np.random.default_rng(1)
        _gradcheck(lambda L: _project(T.matmul(L[0], L[1])),
                   [rng.standard_normal((3, 4)), rng.standard_normal((4, 5))])

    def test_add_broadcast(self):
        rng = np.random.default_rng(2)
        _gradcheck(lambda L: _project(T.add(L[0], L[1])),
                   [rng.standard_normal((3, 4)), rng.standard_normal(4)])

    def test_mul(self):
        rng = np.random.default_rng(3)
        _gradcheck(lambda L: _project(T.mul(L[0], L[1])),
                   [rng.standard_normal((2, 5)), rng.standard_normal((2, 5))])

    def test_relu(self):
        rng = np.random.default_rng(4)
        # keep values away from the kink, where finite differences are invalid
        x = rng.standard_normal((3, 7))
        x[np.abs(x) < 5e-3] = 0.1
        _gradcheck(lambda L: _project(T.relu(L[0])), [x])

    def test_log(self):
        rng = np.random.default_rng(5)
        _gradcheck(lambda L: _project(T.log(L[0])), [rng.uniform(0.5, 2.0, (4, 3))])

    def test_exp(self):
        rng = np.random.default_rng(6)
        _gradcheck(lambda L: _project(T.exp(L[0])), [rng.standard_normal((4, 3))])

    def test_sum_axis(self):
        rng = np.random.default_rng(7)
        _gradcheck(lambda L: _project(T.tsum(L[0], axis=1)), [rng.standard_normal((3, 5))])

    def test_mean_axis(self):
        rng = np.random.default_rng(8)
        _gradcheck(lambda L: _project(T.tmean(L[0], axis=0)), [rng.standard_normal((3, 5))])

    def test_reshape(self):
        rng = np.random.default_rng(9)
        _gradcheck(lambda L: _project(T.reshape(L[0], (6, 2))), [rng.standard_normal((3, 4))])

    def test_softmax(self):
        rng = np.random.default_rng(10)
        _gradcheck(lambda L: _project(T.softmax(L[0], t=2.0)), [rng.standard_normal((4, 6))])

    def test_log_softmax(self):
        rng = np.random.default_rng(11)
        _gradcheck(lambda L: _project(T.log_softmax(L[0], t=3.0)), [rng.standard_normal((4, 6))])

    def test_conv2d(self):
        rng = np.random.default_rng(12)
        _gradcheck(lambda L: _project(T.conv2d(L[0], L[1], stride=2, padding=1)),
                   [rng.standard_normal((2, 3, 5, 5)), rng.standard_normal((4, 3, 3, 3))])

    def test_avgpool2d(self):
        rng = np.random.default_rng(13)
        _gradcheck(lambda L: _project(T.avgpool2d(L[0], 2)), [rng.standard_normal((2, 3, 4, 4))])

    def test_global_avgpool(self):
        rng = np.random.default_rng(14)
        _gradcheck(lambda L: _project(T.global_avgpool(L[0])), [rng.standard_normal((2, 3, 4, 4))])

    def test_batchnorm_train_mode(self):
        rng = np.random.default_rng(15)
        x = rng.standard_normal((4, 3, 2, 2))
        gamma = rng.uniform(0.5, 1.5, 3)
        beta = rng.standard_normal(3)

        def build(L):
            rm = np.zeros(3)
            rv = np.ones(3)
            return _project(T.batchnorm2d(L[0], L[1], L[2], rm, rv, training=True))

        _gradcheck(build, [x, gamma, beta])

    def test_batchnorm_eval_mode(self):
        rng = np.random.default_rng(16)
        x = rng.standard_normal((4, 3, 2, 2))
        gamma = rng.uniform(0.5, 1.5, 3)
        beta = rng.standard_normal(3)
        rm = rng.standard_normal(3) * 0.1
        rv = rng.uniform(0.5, 1.5, 3)

        def build(L):
            return _project(T.batchnorm2d(L[0], L[1], L[2], rm.copy(), rv.copy(), training=False))

        _gradcheck(build, [x, gamma, beta])

    def test_composed_network_end_to_end(self):
        rng = np.random.default_rng(17)
        x = rng.standard_normal((3, 1, 6, 6))
        w1 = rng.standard_normal((2, 1, 3, 3)) * 0.5
        w2 = rng.standard_normal((2, 4)) * 0.5
        b2 = rng.standard_normal(4) * 0.1
        labels = np.array([0, 3, 1])

        def build(L):
            h = T.relu(T.conv2d(Tensor(x), L[0], stride=2, padding=1))
            pooled = T.global_avgpool(h)
            logits = T.add(T.matmul(pooled, L[1]), L[2])
            lp = T.log_softmax(logits)
            mask = np.zeros((3, 4))
            mask[np.arange(3), labels] = 1.0
            return T.mul(T.tmean(T.tsum(T.mul(lp, Tensor(mask)), axis=1)), -1.0)

        _gradcheck(build, [w1, w2, b2])


class TestBatchNormStats:
    def test_running_stats_ema(self):
        rng = np.random.default_rng(20)
        x = rng.standard_normal((8, 2, 3, 3))
        rm = np.zeros(2)
        rv = np.ones(2)
        T.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv,
                      training=True, momentum=0.9)
        n = 8 * 3 * 3
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-6)
        np.testing.assert_allclose(
            rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * n / (n - 1), rtol=1e-6)

    def test_eval_mode_uses_frozen_stats(self):
        x = Tensor(np.full((2, 1, 2, 2), 3.0))
        rm = np.array([1.0])
        rv = np.array([4.0])
        out = T.batchnorm2d(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), rm, rv, training=False)
        np.testing.assert_allclose(out.data, (3.0 - 1.0) / np.sqrt(4.0 + 1e-5), rtol=1e-6)
        np.testing.assert_array_equal(rm, [1.0])  # untouched
