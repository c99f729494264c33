"""Dense float64 array kernels and the seeded random source.

Arrays are plain ``numpy.ndarray`` objects in float64, row-major. The
functions here add the shape checks and error types the rest of the package
relies on; anything numpy already does correctly is delegated to it.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class EmptyBatchError(ValueError):
    """A reduction over the batch axis was asked for with zero rows."""


class ParameterError(ValueError):
    """A scalar argument is outside its valid range."""


def as_tensor(x) -> np.ndarray:
    """Return ``x`` as a C-contiguous float64 array (no copy if already one)."""
    return np.ascontiguousarray(x, dtype=DTYPE)


class Rng:
    """Seeded random source backed by numpy's PCG64 bit generator.

    PCG64 is named explicitly (never ``default_rng``'s choice) so a seed maps
    to the same stream on every platform. ``spawn`` derives independent child
    streams, used to keep initialisation, shuffling and dropout masks from
    perturbing each other when one of them changes.
    """

    def __init__(self, seed: int):
        if seed < 0 or seed >= 2**64:
            raise ParameterError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self._seq = np.random.SeedSequence(self.seed)
        self.generator = np.random.Generator(np.random.PCG64(self._seq))

    @classmethod
    def _from_sequence(cls, seed: int, seq: np.random.SeedSequence) -> "Rng":
        rng = cls.__new__(cls)
        rng.seed = seed
        rng._seq = seq
        rng.generator = np.random.Generator(np.random.PCG64(seq))
        return rng

    def spawn(self, n: int) -> list["Rng"]:
        return [Rng._from_sequence(self.seed, s) for s in self._seq.spawn(n)]

    def normal(self, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        return sample_gaussian(self, shape, mean, std)

    def uniform(self, shape, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        return sample_uniform(self, shape, lo, hi)

    def integers(self, high: int, size=None):
        return self.generator.integers(0, high, size=size)

    def choice(self, n: int, size: int, p=None) -> np.ndarray:
        return self.generator.choice(n, size=size, p=p)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def reduce_mean_rows(x: np.ndarray) -> np.ndarray:
    """Column means of an N x d matrix."""
    if x.ndim != 2:
        raise DimensionError(f"expected a 2-d batch, got shape {x.shape}")
    if x.shape[0] == 0:
        raise EmptyBatchError("cannot average over an empty batch")
    return x.mean(axis=0)


def sample_gaussian(rng: Rng, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    if std < 0:
        raise ParameterError(f"std must be non-negative, got {std}")
    z = rng.generator.standard_normal(shape, dtype=DTYPE)
    return mean + std * z


def sample_uniform(rng: Rng, shape, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    """Samples on [lo, hi)."""
    if not hi >= lo:
        raise ParameterError(f"need lo <= hi, got [{lo}, {hi})")
    return lo + (hi - lo) * rng.generator.random(shape, dtype=DTYPE)


def _same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a, b):
    _same_shape(a, b, "add")
    return a + b


def sub(a, b):
    _same_shape(a, b, "sub")
    return a - b


def mul(a, b):
    _same_shape(a, b, "mul")
    return a * b


def scale(a, alpha: float):
    return alpha * a


def transpose(a: np.ndarray) -> np.ndarray:
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return np.ascontiguousarray(a.T)


def reshape(a: np.ndarray, shape) -> np.ndarray:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise DimensionError(f"cannot reshape {a.shape} into {shape}")
    return a.reshape(shape)


def argmax_rows(a: np.ndarray) -> np.ndarray:
    """Per-row index of the largest entry, first index on ties."""
    if a.ndim != 2:
        raise DimensionError(f"argmax_rows expects a matrix, got shape {a.shape}")
    return a.argmax(axis=1)


def frobenius_norm(a: np.ndarray) -> float:
    return float(np.sqrt(np.sum(a * a)))
