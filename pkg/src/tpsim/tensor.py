"""Dense float64 kernels with a fixed summation order, plus a SplitMix64 RNG.

Tensors are plain ``numpy.ndarray`` values of dtype float64. Element widths for
memory accounting are carried by the ledgers, never by the arrays.
"""
from __future__ import annotations

import numpy as np

from .errors import ShapeMismatch

_MASK = (1 << 64) - 1


class SplitMix64:
    """SplitMix64 generator. Identical seeds give identical streams."""

    def __init__(self, seed: int):
        self.state = seed & _MASK

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        return z ^ (z >> 31)

    def random(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def split(self) -> "SplitMix64":
        """Independent child stream seeded from this stream's next output."""
        return SplitMix64(self.next_u64())


def as_tensor(data) -> np.ndarray:
    return np.array(data, dtype=np.float64)


def random_uniform(rng: SplitMix64, shape, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    shape = tuple(int(s) for s in shape)
    n = int(np.prod(shape)) if shape else 1
    vals = [lo + (hi - lo) * rng.random() for _ in range(n)]
    return np.array(vals, dtype=np.float64).reshape(shape)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` accumulated over the inner index in ascending order.

    Avoids BLAS so the rounding of every output element is fixed by the
    operand values alone.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"cannot multiply {a.shape} by {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    for k in range(a.shape[1]):
        out += np.multiply.outer(a[:, k], b[k, :])
    return out


def transpose(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.T)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeMismatch(f"cannot add {a.shape} and {b.shape}")
    return a + b


def scale(a: np.ndarray, alpha: float) -> np.ndarray:
    return a * alpha


def softmax_rows(a: np.ndarray) -> np.ndarray:
    shifted = a - a.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def slice_block(a: np.ndarray, rows: tuple[int, int], cols: tuple[int, int]) -> np.ndarray:
    r0, r1 = rows
    c0, c1 = cols
    if not (0 <= r0 < r1 <= a.shape[0] and 0 <= c0 < c1 <= a.shape[1]):
        raise ShapeMismatch(f"block rows={rows} cols={cols} outside {a.shape}")
    return a[r0:r1, c0:c1].copy()


def concat_blocks(blocks: list[list[np.ndarray]]) -> np.ndarray:
    """Assemble a 2D grid of blocks (list of block-rows)."""
    try:
        return np.block(blocks)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
