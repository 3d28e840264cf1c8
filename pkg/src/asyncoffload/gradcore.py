"""Dense gradient matrices with column (input-channel) access.

Rows are the output dimension ``n`` and columns the input channels ``m``.
Everything here is a pure function over immutable inputs and doubles as the
exact ground truth the proxy-based modules are checked against.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

__all__ = [
    "DegenerateGradientWarning",
    "GradientMatrix",
    "as_gradient",
    "ceil_count",
    "column_norms_sq",
    "exact_topk_mask",
    "topk_flat_indices",
    "norm_energy_topfrac",
]


class DegenerateGradientWarning(UserWarning):
    """Raised (as a warning) when a metric is undefined for an all-zero matrix."""


@dataclass(frozen=True, eq=False)
class GradientMatrix:
    """Immutable 2-D float32 gradient stored column-major.

    ``data`` is Fortran-ordered so that ``data[:, j]`` (one channel) is a
    contiguous slice.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise ValueError(f"gradient matrix must be 2-D, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"gradient matrix needs rows >= 1 and cols >= 1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("gradient matrix contains non-finite entries")
        arr = np.array(arr, dtype=np.float32, order="F", copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def column(self, j: int) -> np.ndarray:
        return self.data[:, j]


def as_gradient(g) -> GradientMatrix:
    if isinstance(g, GradientMatrix):
        return g
    return GradientMatrix(np.asarray(g))


def ceil_count(ratio: float, total: int) -> int:
    """``ceil(ratio * total)`` without float noise pushing exact products up.

    ``0.1 * 30`` is ``3.0000000000000004`` in binary floating point; rounding
    to 9 decimals first keeps the count at 3.
    """
    return int(math.ceil(round(ratio * total, 9)))


def _check_fraction(name: str, value: float) -> None:
    if not (0.0 < value <= 1.0):
        raise ValueError(f"{name} must be in (0, 1], got {value!r}")


def column_norms_sq(g) -> np.ndarray:
    """Per-column sum of squares, accumulated in float64; length ``m``."""
    g = as_gradient(g)
    a = g.data.astype(np.float64)
    return (a * a).sum(axis=0)


def topk_flat_indices(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries of a 1-D array, ties to smaller index.

    Runs in O(N): one partition finds the k-th value, then the boundary tie
    group is resolved by index order. Returned indices are sorted ascending.
    """
    n = values.size
    if k <= 0:
        return np.empty(0, dtype=np.intp)
    if k >= n:
        return np.arange(n, dtype=np.intp)
    kth = np.partition(values, n - k)[n - k]
    above = np.flatnonzero(values > kth)
    ties = np.flatnonzero(values == kth)
    need = k - above.size
    return np.sort(np.concatenate([above, ties[:need]]))


def exact_topk_mask(g, k_ratio: float) -> np.ndarray:
    """Boolean mask of the ``ceil(k_ratio*n*m)`` largest-magnitude elements.

    Ties break toward the smaller row-major flat index.
    """
    _check_fraction("k_ratio", k_ratio)
    g = as_gradient(g)
    k = ceil_count(k_ratio, g.size)
    mag = np.abs(g.data).ravel(order="C")
    idx = topk_flat_indices(mag, k)
    mask = np.zeros(g.size, dtype=bool)
    mask[idx] = True
    return mask.reshape(g.shape)


def norm_energy_topfrac(g, frac: float) -> float:
    """Share of total squared norm carried by the top ``frac`` elements.

    An all-zero matrix has no energy to share; that returns 0.0 and emits a
    :class:`DegenerateGradientWarning`.
    """
    _check_fraction("frac", frac)
    g = as_gradient(g)
    e = g.data.astype(np.float64).ravel(order="C") ** 2
    total = math.fsum(e)
    if total == 0.0:
        warnings.warn("zero gradient matrix: energy fraction defined as 0", DegenerateGradientWarning)
        return 0.0
    k = ceil_count(frac, g.size)
    top = np.partition(e, e.size - k)[e.size - k:]
    return min(1.0, math.fsum(top) / total)
