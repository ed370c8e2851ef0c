"""Dense float64 arrays, a counter-based RNG, and the DPBT blob format.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C order.
The helpers here only add the shape checks and the error messages the rest
of the package relies on.
"""

import os
import struct
from pathlib import Path

import numpy as np

DPBT_MAGIC = b"DPBT"
DPBT_VERSION = 1
_MASK64 = (1 << 64) - 1


def as_tensor(a) -> np.ndarray:
    """Return ``a`` as a contiguous float64 array (no copy when possible)."""
    return np.ascontiguousarray(a, dtype=np.float64)


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b)
    return a + b


def scale(a, c: float):
    return float(c) * as_tensor(a)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b)
    return a * b


def axpy(alpha: float, x, y):
    """``alpha * x + y``."""
    x, y = as_tensor(x), as_tensor(y)
    _check_same_shape(x, y)
    return float(alpha) * x + y


def mse(a, b) -> float:
    """Mean of squared differences over all elements."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b)
    d = a - b
    return float(np.mean(d * d))


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


class Rng:
    """Deterministic Philox stream keyed by ``(seed, stream)``.

    Philox is counter based, so a stream is fully determined by its key and
    counter; ``spawn`` derives independent child streams without touching the
    parent's position. Instances are single-owner.
    """

    def __init__(self, seed: int = 0, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        counter = np.array([0, 0, 0, self.stream], dtype=np.uint64)
        self._bitgen = np.random.Philox(key=self.seed, counter=counter)
        self.generator = np.random.Generator(self._bitgen)

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream={self.stream})"

    def spawn(self, key: int) -> "Rng":
        return Rng(self.seed, _splitmix64(self.stream ^ _splitmix64(int(key) & _MASK64)))

    def randn(self, shape) -> np.ndarray:
        return randn(self, shape)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def poisson(self, lam, size=None):
        return self.generator.poisson(lam, size)


def randn(rng: Rng, shape) -> np.ndarray:
    """I.i.d. standard normal draws of the given shape; advances ``rng``."""
    shape = (int(shape),) if np.isscalar(shape) else tuple(int(d) for d in shape)
    if len(shape) == 0 or any(d < 1 for d in shape):
        raise ValueError("empty shape")
    return rng.generator.standard_normal(shape)


def dpbt_bytes(a) -> bytes:
    a = as_tensor(a)
    out = DPBT_MAGIC + struct.pack("<II", DPBT_VERSION, a.ndim)
    out += struct.pack(f"<{a.ndim}Q", *a.shape)
    return out + a.astype("<f8").tobytes(order="C")


def atomic_write(path, data: bytes) -> None:
    """Write via a sibling temp file and rename, so readers never see partial files."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def write_dpbt(path, a) -> None:
    """Write a tensor as a DPBT blob (little endian, row major)."""
    atomic_write(path, dpbt_bytes(a))


def parse_dpbt(buf: bytes, offset: int = 0):
    """Decode one DPBT blob from ``buf``; returns ``(array, next_offset)``."""
    if buf[offset:offset + 4] != DPBT_MAGIC:
        raise ValueError("not a DPBT blob (bad magic)")
    version, ndim = struct.unpack_from("<II", buf, offset + 4)
    if version != DPBT_VERSION:
        raise ValueError(f"unsupported DPBT version {version}")
    pos = offset + 12
    dims = struct.unpack_from(f"<{ndim}Q", buf, pos)
    pos += 8 * ndim
    count = int(np.prod(dims)) if ndim else 1
    nbytes = 8 * count
    if len(buf) < pos + nbytes:
        raise ValueError("truncated DPBT blob")
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=pos)
    return data.astype(np.float64).reshape(dims), pos + nbytes


def read_dpbt(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = parse_dpbt(buf)
    if end != len(buf):
        raise ValueError(f"{path}: trailing bytes after DPBT blob")
    return arr
