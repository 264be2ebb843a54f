"""Rank-4 float64 tensors, a seeded generator and the GFT1 binary container.

Tensors are plain C-contiguous ``numpy.ndarray`` objects of dtype float64 and
shape ``(n, c, h, w)``.  Element ``(n, c, h, w)`` lives at flat offset
``((n*C + c)*H + h)*W + w``.

Random numbers come from the PCG64 bit generator (O'Neill, PCG-XSL-RR 128/64,
multiplier 0x2360ed051fc65da44385df649fccf645, increment derived from the
seed by numpy's SeedSequence).  Only the raw 64-bit output stream is used; the
conversion to floats is done here so that it cannot drift with numpy's
distribution code:

* uniform: ``(u64 >> 11) * 2**-53`` in [0, 1)
* normal:  Box-Muller on consecutive uniform pairs, ``r = sqrt(-2 ln(1-u1))``,
  emitting ``r cos(2 pi u2)`` then ``r sin(2 pi u2)``.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ContractError, FormatError, ParameterError, SizeError

MAGIC = b"GFT1"
_HEADER = struct.Struct("<4s4Q")
_MAX_ELEMENTS = 2**63 - 1


class Shape(NamedTuple):
    n: int
    c: int
    h: int
    w: int

    @property
    def size(self) -> int:
        return self.n * self.c * self.h * self.w


def check_shape(shape) -> Shape:
    """Validate a 4-tuple of dimensions and return it as a :class:`Shape`."""
    dims = tuple(shape)
    if len(dims) != 4:
        raise SizeError(f"expected 4 dimensions, got {len(dims)}")
    if any(not isinstance(d, (int, np.integer)) or d < 1 for d in dims):
        raise SizeError(f"all dimensions must be positive integers, got {dims}")
    s = Shape(*(int(d) for d in dims))
    if s.size > _MAX_ELEMENTS:
        raise SizeError(f"element count of {dims} overflows a signed 64-bit index")
    return s


def offset(shape, n: int, c: int, h: int, w: int) -> int:
    shape = check_shape(shape)
    for i, d in zip((n, c, h, w), shape):
        if not 0 <= i < d:
            raise SizeError(f"index {(n, c, h, w)} out of range for shape {tuple(shape)}")
    _, C, H, W = shape
    return ((n * C + c) * H + h) * W + w


def zeros(shape) -> np.ndarray:
    return np.zeros(check_shape(shape), dtype=np.float64)


def as_tensor(x) -> np.ndarray:
    """Coerce ``x`` to a contiguous float64 rank-4 array, validating shape."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    check_shape(arr.shape)
    return arr


class Rng:
    """Deterministic generator over the PCG64 raw stream."""

    def __init__(self, seed: int):
        if seed < 0 or seed >= 2**64:
            raise ParameterError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self._bits = np.random.PCG64(self.seed)

    def raw(self, count: int) -> np.ndarray:
        return self._bits.random_raw(count).astype(np.uint64)

    def uniform(self, count: int) -> np.ndarray:
        return (self.raw(count) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, count: int) -> np.ndarray:
        pairs = (count + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        out = np.empty((pairs, 2))
        out[:, 0] = r * np.cos(theta)
        out[:, 1] = r * np.sin(theta)
        return out.reshape(-1)[:count]

    def integers(self, low: int, high: int, count: int = 1) -> np.ndarray:
        """Uniform integers in [low, high) by floor-scaling uniform doubles."""
        span = high - low
        return low + np.floor(self.uniform(count) * span).astype(np.int64)

    def spawn(self, key: str) -> "Rng":
        """Independent child stream keyed by a string label."""
        digest = 1469598103934665603
        for byte in key.encode("utf-8"):
            digest = ((digest ^ byte) * 1099511628211) % 2**64
        return Rng((self.seed * 0x9E3779B97F4A7C15 + digest) % 2**64)


def randn(shape, rng: Rng, std: float = 1.0) -> np.ndarray:
    if not std > 0:
        raise ParameterError(f"std must be positive, got {std}")
    s = check_shape(shape)
    return (rng.normal(s.size) * std).reshape(s)


def save_container(t: np.ndarray, path) -> None:
    t = as_tensor(t)
    if not np.isfinite(t).all():
        raise ContractError("refusing to store non-finite values")
    n, c, h, w = t.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, n, c, h, w))
        fh.write(t.astype("<f8", copy=False).tobytes(order="C"))


def load_container(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(blob)} bytes)")
    magic, *dims = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    try:
        shape = check_shape(dims)
    except SizeError as exc:
        raise FormatError(f"{path}: invalid dimensions {dims}") from exc
    payload = blob[_HEADER.size:]
    if len(payload) != 8 * shape.size:
        raise FormatError(
            f"{path}: header declares {shape.size} elements, payload holds {len(payload) / 8:g}"
        )
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
