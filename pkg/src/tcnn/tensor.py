"""Dense 4-D float64 tensors in (n, c, h, w) order.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 and rank 4; the
helpers here construct and validate them, initialise parameters and read or
write the raw ``T4F1`` fixture format.

Randomness comes from :func:`make_rng`, a PCG64 generator seeded explicitly.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Sequence

import numpy as np

Tensor4 = np.ndarray

T4F_MAGIC = b"T4F1"


class InvalidShapeError(ValueError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; identical seeds give identical streams."""
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def derive_rng(seed: int, stream: int) -> np.random.Generator:
    """Independent sub-stream ``stream`` of a root seed."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, stream])))


def check_shape(shape: Sequence[int]) -> tuple[int, int, int, int]:
    shape = tuple(int(d) for d in shape)
    if len(shape) != 4:
        raise InvalidShapeError(f"expected 4 dimensions (n, c, h, w), got {shape}")
    if any(d < 1 for d in shape):
        raise InvalidShapeError(f"all dimensions must be >= 1, got {shape}")
    return shape  # type: ignore[return-value]


def as_tensor4(x) -> Tensor4:
    arr = np.ascontiguousarray(x, dtype=np.float64)
    check_shape(arr.shape)
    return arr


def zeros(shape: Sequence[int]) -> Tensor4:
    return np.zeros(check_shape(shape), dtype=np.float64)


def constant_init(shape: Sequence[int], value: float) -> Tensor4:
    return np.full(check_shape(shape), float(value), dtype=np.float64)


def gaussian_init(shape: Sequence[int], std: float, rng: np.random.Generator) -> Tensor4:
    """Zero-mean Gaussian samples with standard deviation ``std``."""
    if not std > 0:
        raise ValueError(f"std must be positive, got {std}")
    return rng.standard_normal(check_shape(shape)) * std


def reshape4(x: Tensor4, shape: Sequence[int]) -> Tensor4:
    shape = check_shape(shape)
    if int(np.prod(shape)) != x.size:
        raise InvalidShapeError(f"cannot reshape {x.shape} to {shape}")
    return np.ascontiguousarray(x).reshape(shape)


def element(x: Tensor4, n: int, c: int, h: int, w: int) -> float:
    """Read ``data[((n*C + c)*H + h)*W + w]`` from the flat buffer."""
    _, C, H, W = x.shape
    return float(np.ascontiguousarray(x).ravel()[((n * C + c) * H + h) * W + w])


def tensor_sum(x: Tensor4) -> float:
    """Sum in linear storage order, one addition at a time.

    ``ndarray.sum`` uses pairwise summation, whose rounding differs from a
    plain loop; ``add.accumulate`` is strictly sequential.
    """
    flat = np.ascontiguousarray(x, dtype=np.float64).ravel()
    return float(np.add.accumulate(flat)[-1])


def tensor_mean(x: Tensor4) -> float:
    return tensor_sum(x) / x.size


def tensor_max(x: Tensor4) -> float:
    return float(np.max(x))


def save_tensor(path: str | Path, x: Tensor4) -> None:
    x = as_tensor4(x)
    with open(path, "wb") as fh:
        fh.write(T4F_MAGIC)
        fh.write(struct.pack("<4Q", *x.shape))
        fh.write(x.astype("<f8").tobytes())


def load_tensor(path: str | Path) -> Tensor4:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != T4F_MAGIC:
        raise ValueError(f"{path}: not a T4F1 tensor file")
    if len(blob) < 36:
        raise ValueError(f"{path}: truncated header")
    shape = check_shape(struct.unpack("<4Q", blob[4:36]))
    count = int(np.prod(shape))
    if len(blob) != 36 + 8 * count:
        raise ValueError(f"{path}: expected {count} values, file size {len(blob)}")
    data = np.frombuffer(blob, dtype="<f8", offset=36, count=count)
    return data.astype(np.float64).reshape(shape)
