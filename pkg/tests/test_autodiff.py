"""Reverse-mode differentiation: backward pass semantics and the
finite-difference checker."""

import numpy as np
import pytest

from qghc import autodiff as ad
from qghc.autodiff import (Parameter, backward, finite_diff_check, leaf,
                           no_grad, sum_all)
from qghc.tensor import ShapeError, Tensor


def _leaf64(values):
    return leaf(Tensor(np.asarray(values, dtype=np.float64)))


class TestBackward:
    def test_relu_subgradient(self):
        x = _leaf64([-1.0, 2.0])
        grads = backward(sum_all(ad.relu(x)))
        assert grads.raw(x).tolist() == [0.0, 1.0]

    def test_relu_zero_at_kink(self):
        x = _leaf64([0.0])
        assert backward(sum_all(ad.relu(x))).raw(x).tolist() == [0.0]

    def test_duplicated_input_sums_paths(self):
        x = _leaf64([1.0, 4.0])
        grads = backward(sum_all(ad.add(x, x)))
        assert grads.raw(x).tolist() == [2.0, 2.0]

    def test_matmul_grad_against_finite_differences(self):
        rng = np.random.default_rng(5)
        a = Parameter("a", Tensor(rng.normal(size=(3, 4))), "qi")
        b = Parameter("b", Tensor(rng.normal(size=(4, 2))), "qi")
        report = finite_diff_check(
            lambda: sum_all(ad.matmul(a.node, b.node)), [a, b], eps=1e-3)
        assert report.max_rel_err < 1e-6
        # grad_A = ones @ B^T for loss = sum(A @ B)
        grads = backward(sum_all(ad.matmul(a.node, b.node)))
        expected = np.ones((3, 2)) @ b.node.array.T
        np.testing.assert_allclose(grads.raw(a.node), expected, rtol=1e-12)

    def test_non_scalar_loss_rejected(self):
        x = _leaf64([1.0, 2.0])
        with pytest.raises(ShapeError):
            backward(ad.relu(x))

    def test_unreachable_leaf_reads_zero(self):
        x = _leaf64([1.0, 2.0])
        other = _leaf64([5.0])
        grads = backward(sum_all(x))
        assert other not in grads
        assert grads.get(other).array.tolist() == [0.0]

    def test_backward_is_deterministic(self):
        rng = np.random.default_rng(0)
        x = _leaf64(rng.normal(size=(4, 4)))

        def run():
            out = ad.mul(ad.tanh(ad.matmul(x, x)), x)
            return backward(sum_all(out)).raw(x).tobytes()

        assert run() == run()

    def test_no_grad_detaches(self):
        x = _leaf64([1.0])
        with no_grad():
            y = ad.relu(x)
        assert not y.requires_grad and y.parents == ()


class TestParameter:
    def test_invalid_role_rejected(self):
        with pytest.raises(ValueError):
            Parameter("p", Tensor([1.0]), "free")

    def test_assign_checks_shape(self):
        p = Parameter("p", Tensor([1.0, 2.0]), "qi")
        with pytest.raises(ShapeError):
            p.assign(np.zeros(3))

    def test_assign_preserves_dtype(self):
        p = Parameter("p", Tensor(np.zeros(2, dtype=np.float32)), "qi")
        p.assign(np.ones(2, dtype=np.float64))
        assert p.value.dtype == np.float32


class TestFiniteDiffCheck:
    def test_quadratic_is_exact_under_central_differences(self):
        theta = Parameter("theta", Tensor(np.asarray([3.0])), "qi")
        report = finite_diff_check(
            lambda: sum_all(ad.mul(theta.node, theta.node)), [theta], eps=1e-3)
        entry = report.entries[0]
        assert entry.analytic == pytest.approx(6.0, abs=1e-9)
        assert entry.numeric == pytest.approx(6.0, abs=1e-6)
        assert report.max_rel_err < 1e-6

    def test_random_two_layer_mlp(self):
        rng = np.random.default_rng(11)
        w1 = Parameter("w1", Tensor(rng.normal(scale=0.5, size=(4, 5))), "qi")
        b1 = Parameter("b1", Tensor(rng.normal(scale=0.1, size=(5,))), "qi")
        w2 = Parameter("w2", Tensor(rng.normal(scale=0.5, size=(5, 3))), "qi")
        x = ad.constant(Tensor(rng.normal(size=(2, 4))))

        def f():
            from qghc.nn import linear
            hidden = ad.tanh(linear(x, w1.node, b1.node))
            return sum_all(ad.matmul(hidden, w2.node))

        report = finite_diff_check(f, [w1, b1, w2], eps=1e-5,
                                   max_coords_per_param=20,
                                   rng=np.random.default_rng(0))
        assert report.max_rel_err < 1e-4

    def test_constant_function_gives_zero_both_ways(self):
        theta = Parameter("theta", Tensor(np.asarray([2.0])), "qi")
        const = ad.constant(Tensor(np.asarray([5.0], dtype=np.float64)))
        report = finite_diff_check(lambda: sum_all(const), [theta], eps=1e-3)
        assert all(e.analytic == 0.0 and e.numeric == 0.0 for e in report.entries)

    def test_eps_range_enforced(self):
        theta = Parameter("t", Tensor(np.asarray([1.0])), "qi")
        with pytest.raises(ValueError):
            finite_diff_check(lambda: sum_all(theta.node), [theta], eps=0.5)

    def test_requires_float64(self):
        theta = Parameter("t", Tensor(np.asarray([1.0], dtype=np.float32)), "qi")
        with pytest.raises(ValueError):
            finite_diff_check(lambda: sum_all(theta.node), [theta])

    def test_non_finite_loss_identifies_coordinate(self):
        # log(theta) turns NaN when the downward probe crosses zero
        theta = Parameter("t", Tensor(np.asarray([5e-4])), "qi")

        def f():
            with np.errstate(invalid="ignore"):
                values = np.log(theta.node.array)
            return sum_all(leaf(Tensor(values), requires_grad=False))

        with pytest.raises(FloatingPointError, match=r"t\[0\]"):
            finite_diff_check(f, [theta], eps=1e-3)


class TestPrimitives:
    def test_concat_slice_round_trip(self):
        a = _leaf64([[1.0, 2.0]])
        b = _leaf64([[3.0, 4.0, 5.0]])
        joined = ad.concat([a, b], axis=1)
        assert joined.array.tolist() == [[1.0, 2.0, 3.0, 4.0, 5.0]]
        piece = ad.slice_axis(joined, 1, 2, 5)
        assert piece.array.tolist() == [[3.0, 4.0, 5.0]]
        grads = backward(sum_all(piece))
        assert grads.raw(a).tolist() == [[0.0, 0.0]]
        assert grads.raw(b).tolist() == [[1.0, 1.0, 1.0]]

    def test_tile_batch_sums_gradient(self):
        a = _leaf64([[1.0], [2.0]])
        tiled = ad.tile_batch(a, 3)
        assert tiled.shape == (3, 2, 1)
        grads = backward(sum_all(tiled))
        assert grads.raw(a).tolist() == [[3.0], [3.0]]

    def test_scale_add(self):
        a = _leaf64([2.0])
        out = ad.scale_add(a, -1.0, 1.0)
        assert out.array.tolist() == [-1.0]
        assert backward(sum_all(out)).raw(a).tolist() == [-1.0]

    def test_mean_all(self):
        a = _leaf64([[2.0, 4.0], [6.0, 8.0]])
        out = ad.mean_all(a)
        assert out.item() == 5.0
        assert np.all(backward(out).raw(a) == 0.25)
