"""Dense float64 tensors, counter-based random streams and small linear-algebra helpers.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 (C order). The
helpers here add the shape and finiteness checks the rest of the package
relies on, so a NaN is reported where it is produced instead of several
layers downstream.
"""

from __future__ import annotations

import hashlib
import math
from typing import Sequence

import numpy as np

from .errors import ArgumentError, DimensionError, NonFiniteError

Tensor = np.ndarray

_MASK64 = (1 << 64) - 1
_TWO_POW_M53 = 2.0**-53


def as_tensor(values, shape: Sequence[int] | None = None) -> Tensor:
    """Copy ``values`` into a contiguous float64 array, optionally reshaped."""
    arr = np.array(values, dtype=np.float64, order="C")
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if math.prod(shape) != arr.size:
            raise DimensionError(f"cannot view {arr.size} values as shape {shape}")
        arr = arr.reshape(shape)
    return arr


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(t)):
        bad = int(np.size(t) - np.count_nonzero(np.isfinite(t)))
        raise NonFiniteError(f"{what} has {bad} non-finite element(s)")
    return t


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of ``a`` (m x k) and ``b`` (k x n) in float64."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {list(a.shape)} x {list(b.shape)}")
    return check_finite(a @ b, "matmul result")


def total(t: Tensor, axis=None) -> Tensor:
    return np.sum(t, axis=axis)


def mean(t: Tensor, axis=None) -> Tensor:
    return np.mean(t, axis=axis)


def population_variance(t: Tensor, axis=None) -> Tensor:
    """Variance with divisor ``n`` (not ``n - 1``), computed in two passes."""
    t = np.asarray(t, dtype=np.float64)
    centred = t - np.mean(t, axis=axis, keepdims=True)
    return np.mean(centred * centred, axis=axis)


def _derive_stream_id(parent: int, index: int) -> int:
    digest = hashlib.blake2b(
        parent.to_bytes(8, "little") + index.to_bytes(8, "little"),
        digest_size=8,
        person=b"cdrop-fork",
    ).digest()
    return int.from_bytes(digest, "little")


class RngStream:
    """A seedable counter-based random stream (Philox-4x64 keyed by ``(seed, stream_id)``).

    Two streams with the same ``(seed, stream_id)`` produce identical draws.
    :meth:`fork` hands out child streams whose ids are derived from the
    parent's id and a per-parent fork counter, so forks are reproducible
    and never repeat an id handed out by the same parent.

    A stream is single-owner: parallel consumers must each take a fork.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        self._forks = 0
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self._bitgen = np.random.Philox(key=key)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    def fork(self) -> "RngStream":
        child = RngStream(self.seed, _derive_stream_id(self.stream_id, self._forks))
        self._forks += 1
        return child

    def raw(self, n: int) -> np.ndarray:
        return self._bitgen.random_raw(int(n))

    def uniform(self, shape) -> Tensor:
        """I.i.d. draws strictly inside (0, 1).

        The top 53 bits of each 64-bit word are offset by half a unit, so
        neither 0.0 nor 1.0 can be returned.
        """
        shape = _as_shape(shape)
        n = math.prod(shape)
        bits = self.raw(n) >> np.uint64(11)
        out = (bits.astype(np.float64) + 0.5) * _TWO_POW_M53
        return out.reshape(shape)

    def gaussian(self, shape, mean: float = 0.0, std: float = 1.0) -> Tensor:
        """Normal draws via the Box-Muller transform of :meth:`uniform` pairs."""
        if std < 0:
            raise ArgumentError(f"std must be non-negative, got {std}")
        shape = _as_shape(shape)
        n = math.prod(shape)
        half = (n + 1) // 2
        u = self.uniform((2, half))
        radius = np.sqrt(-2.0 * np.log(u[0]))
        angle = 2.0 * np.pi * u[1]
        z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])[:n]
        if std == 0:
            return np.full(shape, float(mean))
        return (mean + std * z).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        """A uniformly random permutation of ``range(n)``."""
        keys = self.raw(n)
        return np.argsort(keys, kind="stable")

    def uniform_range(self, shape, low: float, high: float) -> Tensor:
        return low + (high - low) * self.uniform(shape)


def _as_shape(shape) -> tuple[int, ...]:
    if isinstance(shape, (int, np.integer)):
        shape = (int(shape),)
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise DimensionError(f"negative dimension in shape {shape}")
    return shape


def uniform(rng: RngStream, shape) -> Tensor:
    return rng.uniform(shape)


def gaussian(rng: RngStream, shape, mean: float = 0.0, std: float = 1.0) -> Tensor:
    return rng.gaussian(shape, mean, std)
