"""Tensor value type, deterministic RNG, and primitive numeric ops."""

import numpy as np
import pytest

from qghc.tensor import (Rng, ShapeError, Tensor, add, ewise,
                         init_kaiming_uniform, matmul, mul, reduce, relu,
                         scale)


class TestTensorInvariants:
    def test_flat_data_matches_shape(self):
        t = Tensor(np.arange(12, dtype=np.float32).reshape(3, 4))
        assert int(np.prod(t.shape)) == len(t.data)
        assert t.data[5] == t.array[1, 1]  # row-major, last axis fastest

    def test_scalar_promoted_to_rank_one(self):
        t = Tensor(3.5)
        assert t.shape == (1,)
        assert t.rank == 1

    def test_zero_extent_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.empty((2, 0)))

    def test_default_dtype_is_float32(self):
        assert Tensor([1, 2, 3]).dtype == np.float32

    def test_item_requires_single_element(self):
        with pytest.raises(ShapeError):
            Tensor([1.0, 2.0]).item()

    def test_blob_round_trip_bit_identical(self):
        # Checkpoint blob convention: raw little-endian float32.
        t = Tensor(np.random.default_rng(0).normal(size=(4, 5)).astype(np.float32))
        blob = t.array.astype("<f4").tobytes()
        back = np.frombuffer(blob, dtype="<f4").reshape(t.shape)
        assert back.tobytes() == t.array.tobytes()


class TestRng:
    def test_same_seed_same_sequence(self):
        a = Rng(42).uniform(0, 1, (100,))
        b = Rng(42).uniform(0, 1, (100,))
        assert np.array_equal(a, b)

    def test_different_seeds_differ(self):
        assert not np.array_equal(Rng(1).uniform(0, 1, (50,)),
                                  Rng(2).uniform(0, 1, (50,)))

    def test_derive_is_deterministic_and_independent(self):
        assert np.array_equal(Rng(7).derive(3).uniform(0, 1, (10,)),
                              Rng(7).derive(3).uniform(0, 1, (10,)))
        assert not np.array_equal(Rng(7).derive(3).uniform(0, 1, (10,)),
                                  Rng(7).derive(4).uniform(0, 1, (10,)))

    def test_seed_range_checked(self):
        with pytest.raises(ValueError):
            Rng(-1)
        with pytest.raises(ValueError):
            Rng(2 ** 64)


class TestKaimingInit:
    def test_bound_is_one_when_fan_in_six(self):
        t = init_kaiming_uniform((1,), 6, Rng(0))
        assert abs(t.item()) <= 1.0  # sqrt(6/6) == 1

    def test_same_seed_bit_identical(self):
        a = init_kaiming_uniform((32, 16), 16, Rng(9))
        b = init_kaiming_uniform((32, 16), 16, Rng(9))
        assert a.array.tobytes() == b.array.tobytes()

    def test_sample_mean_near_zero(self):
        # Monte-Carlo oracle over the drawn values themselves.
        t = init_kaiming_uniform((1000,), 6, Rng(3))
        assert abs(float(t.array.mean())) < 0.1
        assert float(np.abs(t.array).max()) <= 1.0

    def test_invalid_shape_and_fan_in(self):
        with pytest.raises(ShapeError):
            init_kaiming_uniform((0, 3), 4, Rng(0))
        with pytest.raises(ValueError):
            init_kaiming_uniform((3,), 0, Rng(0))


class TestMatmul:
    def test_identity_is_exact(self):
        x = Tensor(np.random.default_rng(1).normal(size=(3, 5)).astype(np.float32))
        eye = Tensor(np.eye(3, dtype=np.float32))
        assert np.array_equal(matmul(eye, x).array, x.array)

    def test_hand_arithmetic(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[1.0], [1.0]])
        assert matmul(a, b).array.tolist() == [[3.0], [7.0]]

    def test_zeros_absorb(self):
        x = Tensor(np.random.default_rng(2).normal(size=(4, 2)).astype(np.float32))
        z = Tensor(np.zeros((2, 4), dtype=np.float32))
        assert np.all(matmul(z, x).array == 0)

    def test_inner_extent_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


class TestEwise:
    def test_relu(self):
        assert ewise("relu", Tensor([-1.0, 0.0, 2.0])).array.tolist() == [0.0, 0.0, 2.0]

    def test_add_zeros_identity(self):
        x = Tensor([[1.5, -2.0]])
        out = add(x, Tensor([[0.0, 0.0]]))
        assert np.array_equal(out.array, x.array)

    def test_mul_hand_case(self):
        assert mul(Tensor([2.0, 3.0]), Tensor([4.0, 5.0])).array.tolist() == [8.0, 15.0]

    def test_scale(self):
        assert scale(Tensor([1.0, -2.0]), -3.0).array.tolist() == [-3.0, 6.0]

    def test_scalar_broadcast_only(self):
        out = add(Tensor([1.0, 2.0]), Tensor([10.0]))
        assert out.array.tolist() == [11.0, 12.0]
        with pytest.raises(ShapeError):
            add(Tensor([1.0, 2.0, 3.0]), Tensor([1.0, 2.0]))

    def test_unknown_op(self):
        with pytest.raises(ValueError):
            ewise("pow", Tensor([1.0]))


class TestReduce:
    def test_mean_all_of_constant(self):
        out = reduce(Tensor(np.ones((2, 3), dtype=np.float32)), None, "mean")
        assert out.shape == (1,)
        assert out.item() == pytest.approx(1.0, abs=1e-7)

    def test_sum_axis0(self):
        out = reduce(Tensor([[1.0, 2.0], [3.0, 4.0]]), [0], "sum")
        assert out.array.tolist() == [4.0, 6.0]

    def test_max_singleton(self):
        assert reduce(Tensor([[7.0]]), [0, 1], "max").item() == 7.0

    def test_repeated_axis_rejected(self):
        with pytest.raises(ShapeError):
            reduce(Tensor(np.ones((2, 2))), [0, 0], "sum")

    def test_axis_out_of_range(self):
        with pytest.raises(ShapeError):
            reduce(Tensor(np.ones((2, 2))), [2], "sum")
