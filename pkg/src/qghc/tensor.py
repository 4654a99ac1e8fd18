"""Dense row-major tensors, a deterministic RNG, and the primitive numeric ops.

Values are carried by numpy arrays (C order); the wrapper pins down the
contract every other module relies on: rank >= 1, all extents >= 1, a single
dtype per tensor (float32 by default, float64 for gradient checking).
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class Tensor:
    """Dense n-dimensional array of real scalars, row-major, immutable by convention.

    ``data`` exposes the flat (last-axis-fastest) view; ``array`` the shaped
    ndarray. Operations return new tensors and never alias caller-visible
    storage mutably.
    """

    __slots__ = ("array",)

    def __init__(self, values, dtype=None):
        arr = np.asarray(values, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(extent < 1 for extent in arr.shape):
            raise ShapeError(f"invalid shape {arr.shape}: all extents must be >= 1")
        self.array = np.ascontiguousarray(arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the elements."""
        return self.array.reshape(-1)

    @property
    def dtype(self):
        return self.array.dtype

    @property
    def size(self) -> int:
        return self.array.size

    @property
    def rank(self) -> int:
        return self.array.ndim

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.array.astype(dtype))

    def copy(self) -> "Tensor":
        return Tensor(self.array.copy())

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() on tensor of size {self.size}")
        return float(self.array.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"

    @staticmethod
    def zeros(shape: Sequence[int], dtype=DEFAULT_DTYPE) -> "Tensor":
        return Tensor(np.zeros(tuple(shape), dtype=dtype))

    @staticmethod
    def full(shape: Sequence[int], value: float, dtype=DEFAULT_DTYPE) -> "Tensor":
        return Tensor(np.full(tuple(shape), value, dtype=dtype))


class Rng:
    """Deterministic random source: PCG64 keyed by a 64-bit seed.

    PCG64 produces the same bit sequence on every platform for a given seed,
    which is what makes dataset generation and parameter initialization
    reproducible. ``derive`` builds an independent child stream from the seed
    plus integer keys (used for per-epoch shuffles and per-sample scenes).
    """

    algorithm = "pcg64"

    def __init__(self, seed: int, _keys: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self._keys = _keys
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *_keys])))

    def derive(self, *keys: int) -> "Rng":
        """Independent stream keyed by (seed, *existing keys, *keys)."""
        return Rng(self.seed, self._keys + tuple(int(k) for k in keys))

    def uniform(self, low: float, high: float, shape=None) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n_or_seq, size=None, replace=True):
        return self._gen.choice(n_or_seq, size=size, replace=replace)


def init_kaiming_uniform(shape: Sequence[int], fan_in: int, rng: Rng,
                         dtype=DEFAULT_DTYPE) -> Tensor:
    """Uniform init on [-sqrt(6/fan_in), +sqrt(6/fan_in)], the ReLU-gain bound."""
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    bound = float(np.sqrt(6.0 / fan_in))
    return Tensor(rng.uniform(-bound, bound, tuple(shape)).astype(dtype))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product c[i,j] = sum_k a[i,k] * b[k,j]."""
    if a.rank != 2 or b.rank != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    return Tensor(a.array @ b.array)


def _binary_arrays(a: Tensor, b) -> tuple[np.ndarray, np.ndarray]:
    # Only scalar broadcast is allowed; everything else needs equal shapes.
    if isinstance(b, Tensor):
        if b.size == 1 and a.shape != b.shape:
            return a.array, b.array.reshape(-1)[0]
        if a.shape != b.shape:
            raise ShapeError(f"elementwise shapes differ: {a.shape} vs {b.shape}")
        return a.array, b.array
    return a.array, float(b)


def add(a: Tensor, b) -> Tensor:
    xa, xb = _binary_arrays(a, b)
    return Tensor(xa + xb)


def mul(a: Tensor, b) -> Tensor:
    xa, xb = _binary_arrays(a, b)
    return Tensor(xa * xb)


def relu(a: Tensor) -> Tensor:
    return Tensor(np.maximum(a.array, 0))


def scale(a: Tensor, factor: float) -> Tensor:
    return Tensor(a.array * a.dtype.type(factor))


_EWISE = {"add": add, "mul": mul, "relu": relu, "scale": scale}


def ewise(op: str, *operands) -> Tensor:
    """Dispatch an elementwise op: add/mul (two operands), relu, scale."""
    if op not in _EWISE:
        raise ValueError(f"unknown elementwise op {op!r}")
    return _EWISE[op](*operands)


def reduce(t: Tensor, axes: Iterable[int] | None, kind: str) -> Tensor:
    """Reduce over ``axes`` (all axes when None), removing them.

    A full reduction yields shape (1,) since rank 0 is outside the contract.
    """
    if kind not in ("sum", "mean", "max"):
        raise ValueError(f"unknown reduce kind {kind!r}")
    if axes is None:
        axes_t = tuple(range(t.rank))
    else:
        axes_t = tuple(int(ax) for ax in axes)
    if len(set(axes_t)) != len(axes_t):
        raise ShapeError(f"repeated reduction axis in {axes_t}")
    for ax in axes_t:
        if ax < 0 or ax >= t.rank:
            raise ShapeError(f"axis {ax} out of range for rank {t.rank}")
    fn = {"sum": np.sum, "mean": np.mean, "max": np.max}[kind]
    out = fn(t.array, axis=axes_t)
    return Tensor(out)
