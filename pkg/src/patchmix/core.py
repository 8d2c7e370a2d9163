"""Tensor plumbing shared by every module: RNG handle, small kernels, PMX1 files.

Tensors are plain numpy arrays. Anything that is stored or exchanged (images,
checkpoints, dumps) is float32; reductions and losses accumulate in float64.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"PMX1"


class PatchMixError(Exception):
    """Base class for all library errors."""


class ArgumentError(PatchMixError, ValueError):
    pass


class DegenerateInputError(PatchMixError, ValueError):
    pass


class NumericalError(PatchMixError, ArithmeticError):
    """A NaN or Inf showed up where finite values are required."""


class StateError(PatchMixError, RuntimeError):
    pass


class CapacityError(PatchMixError, ValueError):
    pass


class SamplingError(PatchMixError, ValueError):
    pass


class IngestionError(PatchMixError, IOError):
    pass


class MissingFileError(IngestionError):
    pass


class BadMagicError(IngestionError):
    pass


class ShapeMismatchError(IngestionError):
    pass


class Rng:
    """Explicit random stream: numpy's PCG64 seeded from a 64-bit integer.

    PCG64 output, and numpy's float/normal/gumbel transforms on top of it, are
    reproducible bit for bit across platforms. Children for parallel work come
    from :meth:`split`, which derives seeds with ``SeedSequence(seed,
    spawn_key=(i,))`` so the i-th child never depends on how many siblings
    were requested.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._spawned = 0
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    def split(self, n: int) -> list["Rng"]:
        children = []
        for _ in range(n):
            ss = np.random.SeedSequence(self.seed, spawn_key=(self._spawned,))
            self._spawned += 1
            children.append(Rng(int(ss.generate_state(1, np.uint64)[0])))
        return children

    def uniform(self, lo: float, hi: float) -> float:
        return uniform(self, lo, hi)

    def normal(self, size=None, scale: float = 1.0):
        return self.gen.normal(0.0, scale, size)

    def integers(self, lo: int, hi: int, size=None):
        return self.gen.integers(lo, hi, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def choice(self, a, size: int, replace: bool = False) -> np.ndarray:
        return self.gen.choice(a, size=size, replace=replace)

    def gumbel(self, size) -> np.ndarray:
        return self.gen.gumbel(0.0, 1.0, size)


def uniform(rng: Rng, lo: float, hi: float) -> float:
    """Draw from [lo, hi)."""
    if not lo < hi:
        raise ArgumentError(f"uniform needs lo < hi, got [{lo}, {hi})")
    x = lo + (hi - lo) * rng.gen.random()
    if x >= hi:  # rounding at tiny ranges
        x = float(np.nextafter(hi, lo))
    return float(x)


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ArgumentError(f"cosine shape mismatch {a.shape} vs {b.shape}")
    na = np.sqrt(np.dot(a, a))
    nb = np.sqrt(np.dot(b, b))
    if na == 0 or nb == 0:
        raise DegenerateInputError("cosine of a zero-norm vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def softmax(x, temperature: float = 1.0, axis: int = -1) -> np.ndarray:
    if not temperature > 0:
        raise ArgumentError(f"temperature must be positive, got {temperature}")
    z = np.asarray(x, dtype=np.float64) / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x, axis: int = -1) -> np.ndarray:
    z = np.asarray(x, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def check_finite(x, what: str = "tensor"):
    arr = np.asarray(x)
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values in {what}")
    return x


def as_f32(x) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=np.float32)
    check_finite(arr)
    return arr


# ---------------------------------------------------------------- PMX1 files

def encode_tensor(x) -> bytes:
    arr = np.asarray(x, dtype="<f4")   # ascontiguousarray would promote 0-d to 1-d
    head = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes(order="C")


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; return it and the next offset."""
    if buf[offset:offset + 4] != MAGIC:
        raise BadMagicError(f"expected PMX1 magic at byte {offset}")
    if len(buf) < offset + 8:
        raise ShapeMismatchError("truncated PMX1 header")
    (rank,) = struct.unpack_from("<I", buf, offset + 4)
    pos = offset + 8
    if len(buf) < pos + 4 * rank:
        raise ShapeMismatchError("truncated PMX1 dims")
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    end = pos + 4 * count
    if len(buf) < end:
        raise ShapeMismatchError(f"PMX1 payload too short for shape {dims}")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims)
    return arr.astype(np.float32), end


def save_tensor(path, x) -> None:
    Path(path).write_bytes(encode_tensor(x))


def load_tensor(path) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise MissingFileError(str(p))
    buf = p.read_bytes()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise ShapeMismatchError(f"{p}: {len(buf) - end} trailing bytes after tensor")
    return arr
