"""Dense tensor primitives shared by every other module.

Tensors are plain ``numpy.ndarray`` values in row-major (C) order. This module
adds the few things numpy does not give us directly: a GEMM with explicit shape
checking, a tagged elementwise dispatcher, reductions with domain errors, a
counter-based splitmix64 generator whose streams are reproducible across
implementations, and the RTEN binary file format.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

__all__ = [
    "ShapeError",
    "DomainError",
    "Rng",
    "as_tensor",
    "gemm",
    "elementwise",
    "reduce",
    "ravel_index",
    "unravel_index",
    "save_rten",
    "load_rten",
]

DTYPES = {"f32": np.float32, "f64": np.float64}


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class DomainError(ValueError):
    """An argument lies outside an operation's mathematical domain."""


def as_tensor(data, dtype=np.float64) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(data, dtype=dtype))


def gemm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Return ``a @ b`` for 2-D operands, raising ``ShapeError`` on mismatch."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"gemm expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"gemm inner dimensions disagree: {a.shape} x {b.shape}")
    return a @ b


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _log(x):
    if np.any(x <= 0):
        raise DomainError("log of non-positive input")
    return np.log(x)


_UNARY = {
    "relu": lambda x: np.maximum(x, 0),
    "sigmoid": _sigmoid,
    "exp": np.exp,
    "log": _log,
}


def elementwise(op: str, *operands, factor: float | None = None) -> np.ndarray:
    """Apply a pointwise operation selected by tag.

    ``relu``, ``sigmoid``, ``exp`` and ``log`` take one operand, ``add`` takes
    two of equal shape and ``scale`` multiplies one operand by ``factor``.
    """
    xs = [np.asarray(x) for x in operands]
    if op in _UNARY:
        if len(xs) != 1:
            raise TypeError(f"{op} takes one operand")
        return _UNARY[op](np.atleast_1d(xs[0]) if xs[0].ndim == 0 else xs[0])
    if op == "add":
        if len(xs) != 2:
            raise TypeError("add takes two operands")
        if xs[0].shape != xs[1].shape:
            raise ShapeError(f"add shape mismatch: {xs[0].shape} vs {xs[1].shape}")
        return xs[0] + xs[1]
    if op == "scale":
        if len(xs) != 1 or factor is None:
            raise TypeError("scale takes one operand and a factor")
        return xs[0] * factor
    raise ValueError(f"unknown elementwise op {op!r}")


def reduce(t: np.ndarray, mode: str, axis: int | None = None) -> np.ndarray:
    """Sum, mean or max over one axis, or over everything when ``axis`` is None."""
    t = np.asarray(t)
    if axis is not None and not (0 <= axis < t.ndim):
        raise ShapeError(f"axis {axis} out of range for rank {t.ndim}")
    count = t.size if axis is None else t.shape[axis]
    if mode == "sum":
        return np.asarray(t.sum(axis=axis))
    if mode == "mean":
        if count == 0:
            raise DomainError("mean over an empty selection")
        return np.asarray(t.mean(axis=axis))
    if mode == "max":
        if count == 0:
            raise DomainError("max over an empty selection")
        return np.asarray(t.max(axis=axis))
    raise ValueError(f"unknown reduce mode {mode!r}")


def ravel_index(coord, shape) -> int:
    idx = 0
    for c, n in zip(coord, shape):
        if not 0 <= c < n:
            raise IndexError(f"coordinate {tuple(coord)} outside shape {tuple(shape)}")
        idx = idx * n + c
    return idx


def unravel_index(index: int, shape) -> tuple[int, ...]:
    coord = []
    for n in reversed(shape):
        coord.append(index % n)
        index //= n
    return tuple(reversed(coord))


# -- random numbers ---------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class Rng:
    """splitmix64 stream.

    Draw ``k`` (1-based) is ``mix(seed + k * 0x9E3779B97F4A7C15)``, so a block
    of draws is computed vectorised and the sequence is identical however it is
    chunked.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def next_u64(self, n: int | None = None):
        size = 1 if n is None else int(n)
        k = np.arange(self.counter + 1, self.counter + 1 + size, dtype=np.uint64)
        self.counter += size
        with np.errstate(over="ignore"):
            out = _mix(np.uint64(self.seed) + k * _GOLDEN)
        return int(out[0]) if n is None else out

    def uniform(self, low=0.0, high=1.0, size=None):
        n = 1 if size is None else int(np.prod(size))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
        u = low + (high - low) * u
        return float(u[0]) if size is None else u.reshape(size)

    def normal(self, mean=0.0, std=1.0, size=None):
        n = 1 if size is None else int(np.prod(size))
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(size=m)  # (0, 1]
        u2 = self.uniform(size=m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
        z = mean + std * z
        return float(z[0]) if size is None else z.reshape(size)

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in ``[low, high)``."""
        span = high - low
        if span <= 0:
            raise ValueError("empty integer range")
        n = 1 if size is None else int(np.prod(size))
        v = low + (self.next_u64(n) % np.uint64(span)).astype(np.int64)
        return int(v[0]) if size is None else v.reshape(size)

    def spawn(self, stream: int) -> "Rng":
        """Independent child stream keyed by ``stream``."""
        with np.errstate(over="ignore"):
            seed = _mix(np.array([self.seed ^ (int(stream) * 0xD1B54A32D192ED03 & _MASK64)],
                                 dtype=np.uint64))[0]
        return Rng(int(seed))


# -- RTEN files -------------------------------------------------------------

_MAGIC = b"RTEN"
_VERSION = 1
_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_FROM_CODE = {v: k for k, v in _CODES.items()}


def save_rten(path, t: np.ndarray) -> None:
    t = np.asarray(t)
    if t.dtype not in _CODES:
        t = t.astype(np.float64)
    header = _MAGIC + struct.pack("<BBB", _VERSION, _CODES[t.dtype], t.ndim)
    header += struct.pack(f"<{t.ndim}I", *t.shape)
    payload = np.ascontiguousarray(t, dtype=t.dtype.newbyteorder("<")).tobytes()
    Path(path).write_bytes(header + payload)


def load_rten(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not an RTEN file")
    version, code, rank = struct.unpack_from("<BBB", raw, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported RTEN version {version}")
    if code not in _FROM_CODE:
        raise ValueError(f"{path}: unknown dtype code {code}")
    shape = struct.unpack_from(f"<{rank}I", raw, 7)
    dtype = _FROM_CODE[code].newbyteorder("<")
    offset = 7 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    if len(raw) - offset != count * dtype.itemsize:
        raise ValueError(f"{path}: payload length does not match header")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    return data.astype(_FROM_CODE[code]).reshape(shape)
