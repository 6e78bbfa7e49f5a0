"""Dense real-matrix kernel.

Every other module does its arithmetic through these helpers. A "matrix" is
a two-dimensional ``float64`` :class:`numpy.ndarray`; the helpers validate
shapes, keep results finite and implement the four attention masks.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .exceptions import DegenerateRatioError, NonFiniteError, RestrictionError, ShapeError

__all__ = [
    "Dense",
    "Causal",
    "Window",
    "Sink",
    "MaskKind",
    "as_matrix",
    "visible",
    "matmul",
    "masked_row_softmax",
    "concat",
    "pad_constants",
]


@dataclass(frozen=True)
class Dense:
    """No masking: every query sees every key."""


@dataclass(frozen=True)
class Causal:
    """Query ``i`` sees keys ``j <= i``."""


@dataclass(frozen=True)
class Window:
    """Query ``i`` sees keys ``i - r < j <= i``."""

    r: int

    def __post_init__(self):
        if int(self.r) < 1:
            raise ValueError(f"window size must be >= 1, got {self.r}")


@dataclass(frozen=True)
class Sink:
    """Query ``i`` sees its ``r``-window plus the first ``s`` keys (never future keys)."""

    s: int
    r: int

    def __post_init__(self):
        if int(self.s) < 1 or int(self.r) < 1:
            raise ValueError(f"sink needs s >= 1 and r >= 1, got s={self.s}, r={self.r}")


MaskKind = Union[Dense, Causal, Window, Sink]


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Return ``a`` as a finite 2-D float64 array (no copy when already one)."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NonFiniteError(f"{name} contains NaN or infinite entries")
    return m


def _finite(m: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(m)):
        raise NonFiniteError(f"{op} produced non-finite entries")
    return m


def visible(mask: MaskKind, n_rows: int, n_cols: int) -> np.ndarray:
    """Boolean ``(n_rows, n_cols)`` array, True where query ``i`` may attend to key ``j``.

    Indices are 0-based and aligned at the top-left corner, so for a square
    matrix ``Causal`` is the lower triangle including the diagonal.
    """
    i = np.arange(n_rows)[:, None]
    j = np.arange(n_cols)[None, :]
    if isinstance(mask, Dense):
        return np.ones((n_rows, n_cols), dtype=bool)
    if isinstance(mask, Causal):
        return j <= i
    if isinstance(mask, Window):
        return (j <= i) & (j > i - mask.r)
    if isinstance(mask, Sink):
        return (j <= i) & ((j < mask.s) | (j > i - mask.r))
    raise TypeError(f"unknown mask kind {mask!r}")


def matmul(a, b) -> np.ndarray:
    """Matrix product with a shape check."""
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return _finite(a @ b, "matmul")


def masked_row_softmax(scores, mask: MaskKind = Dense()) -> np.ndarray:
    """Row-wise softmax restricted to the positions ``mask`` leaves visible.

    Masked positions get weight exactly zero. Each row is shifted by its
    maximum over visible entries before exponentiating, which leaves the
    result unchanged mathematically.
    """
    s = as_matrix(scores, "scores")
    keep = visible(mask, *s.shape)
    if not keep.any(axis=1).all():
        bad = int(np.flatnonzero(~keep.any(axis=1))[0])
        raise DegenerateRatioError(f"row {bad} is fully masked and cannot be normalised")
    shifted = np.where(keep, s, -np.inf)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    w = np.where(keep, np.exp(shifted), 0.0)
    return _finite(w / w.sum(axis=1, keepdims=True), "masked_row_softmax")


def concat(parts: Sequence, axis: str = "rows") -> np.ndarray:
    """Order-preserving concatenation along ``"rows"`` or ``"cols"``."""
    if axis not in ("rows", "cols"):
        raise ValueError(f"axis must be 'rows' or 'cols', got {axis!r}")
    mats = [as_matrix(p, f"part {k}") for k, p in enumerate(parts)]
    if not mats:
        raise ShapeError("nothing to concatenate")
    off = 1 if axis == "rows" else 0
    widths = {m.shape[off] for m in mats}
    if len(widths) != 1:
        raise ShapeError(f"cannot concatenate along {axis}: off-axis sizes {sorted(widths)}")
    return np.concatenate(mats, axis=0 if axis == "rows" else 1)


def pad_constants(
    m,
    values,
    axis: str = "rows",
    where: str = "end",
    budget: int | None = None,
) -> np.ndarray:
    """Append rows (or columns) of fixed constants to ``m``.

    ``values`` is one new row/column or a 2-D block of them, laid out as they
    will appear. ``budget`` caps the number of constants a single edit may
    introduce; exceeding it raises :class:`RestrictionError`.

    >>> pad_constants([[1., 2.], [3., 4.]], [1., 1.], axis="cols")
    array([[1., 2., 1.],
           [3., 4., 1.]])
    """
    m = as_matrix(m)
    block = np.asarray(values, dtype=np.float64)
    if budget is not None and block.size > budget:
        raise RestrictionError(f"padding {block.size} constants exceeds the budget of {budget}")
    if axis == "rows":
        block = block.reshape(-1, m.shape[1]) if block.ndim < 2 else block
        parts = [m, block] if where == "end" else [block, m]
    elif axis == "cols":
        block = block.reshape(m.shape[0], -1) if block.ndim < 2 else block
        parts = [m, block] if where == "end" else [block, m]
    else:
        raise ValueError(f"axis must be 'rows' or 'cols', got {axis!r}")
    if where not in ("end", "start"):
        raise ValueError(f"where must be 'end' or 'start', got {where!r}")
    return concat(parts, axis)
