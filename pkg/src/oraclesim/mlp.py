"""Closed catalogue of MLP primitives.

MLPs are modelled as compositions of a handful of simple per-token maps
rather than trained networks: affine maps, column selection, constant
padding, the ratio map ``x -> s * x / (1 - x)``, column products/quotients
and index-aware row lookups. Every primitive receives the token index, so
positional information is available exactly as an input MLP with positional
encoding would have it.

``MlpSpec.cost`` gives the per-token arithmetic count used to enforce the
``O(d^2)`` budget on MLP work.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .exceptions import DegenerateRatioError, RestrictionError, ShapeError
from .tensor import as_matrix

__all__ = [
    "Affine",
    "SelectCols",
    "PadConst",
    "RatioRecover",
    "ScaleCols",
    "DivideCols",
    "Reverse",
    "LookupShift",
    "OnCols",
    "Parallel",
    "Compose",
    "MlpSpec",
    "mlp_apply",
    "default_budget",
]


def _cols(cols, width: int) -> np.ndarray:
    if cols is None:
        return np.arange(width)
    if isinstance(cols, slice):
        return np.arange(width)[cols]
    return np.asarray(cols, dtype=int)


@dataclass(frozen=True, eq=False)
class Affine:
    """``x -> x @ weight + bias``."""

    weight: np.ndarray
    bias: np.ndarray | None = None

    def apply(self, x, index):
        w = as_matrix(self.weight, "affine weight")
        if x.shape[1] != w.shape[0]:
            raise ShapeError(f"affine expects width {w.shape[0]}, got {x.shape[1]}")
        out = x @ w
        if self.bias is not None:
            out = out + np.asarray(self.bias, dtype=np.float64).reshape(1, -1)
        return out

    def cost(self, width):
        w = np.shape(self.weight)
        return w[1], w[0] * w[1] + w[1]


@dataclass(frozen=True)
class SelectCols:
    """Keep the listed columns, in the listed order."""

    indices: tuple

    def apply(self, x, index):
        return x[:, list(self.indices)]

    def cost(self, width):
        return len(self.indices), len(self.indices)


@dataclass(frozen=True)
class PadConst:
    """Append constant columns.

    With ``rows=(start, stop)`` the constants are written only on tokens whose
    index lies in ``[start, stop)`` and zeros elsewhere: the indicator
    construction that turns any input into a block of ones. ``invert=True``
    writes them outside that range instead.
    """

    values: tuple
    rows: tuple | None = None
    invert: bool = False

    def apply(self, x, index):
        vals = np.asarray(self.values, dtype=np.float64).reshape(1, -1)
        block = np.repeat(vals, x.shape[0], axis=0)
        if self.rows is not None:
            start, stop = self.rows
            inside = (index >= start) & (index < stop)
            block[inside if self.invert else ~inside] = 0.0
        return np.concatenate([x, block], axis=1)

    def cost(self, width):
        return width + len(self.values), len(self.values)


@dataclass(frozen=True, eq=False)
class RatioRecover:
    """Replace column ``col`` holding ``x = A / (A + scale)`` by ``A``.

    Without ``den`` this is ``scale * x / (1 - x)``. With ``den`` naming a
    column that holds the complementary weight ``y = scale / (A + scale)``
    it is ``scale * x / y``, which stays accurate when ``A`` is so large
    that ``1 - x`` has lost its digits. ``scale`` may be a scalar or one
    value per token index.
    """

    col: int
    scale: float | Sequence[float] = 1.0
    den: int | None = None

    def apply(self, x, index):
        v = x[:, self.col]
        rest = (1.0 - v) if self.den is None else x[:, self.den]
        if np.any(rest <= 0.0):
            raise DegenerateRatioError("ratio recovery needs a positive complementary weight; the normaliser is too large to resolve")
        scale = np.asarray(self.scale, dtype=np.float64)
        if scale.ndim:
            scale = scale[index]
        out = x.copy()
        out[:, self.col] = scale * v / rest
        return out

    def cost(self, width):
        return width, 3


@dataclass(frozen=True)
class ScaleCols:
    """Multiply columns ``cols`` by column ``by``."""

    cols: tuple
    by: int

    def apply(self, x, index):
        out = x.copy()
        c = list(self.cols)
        out[:, c] = x[:, c] * x[:, [self.by]]
        return out

    def cost(self, width):
        return width, len(self.cols)


@dataclass(frozen=True)
class DivideCols:
    """Divide columns ``cols`` by column ``by``; tokens where it is zero get zero."""

    cols: tuple
    by: int

    def apply(self, x, index):
        out = x.copy()
        c = list(self.cols)
        den = x[:, [self.by]]
        safe = np.where(den == 0.0, 1.0, den)
        out[:, c] = np.where(den == 0.0, 0.0, x[:, c] / safe)
        return out

    def cost(self, width):
        return width, len(self.cols)


@dataclass(frozen=True)
class LookupShift:
    """Index-aware lookup: token ``p`` reads token ``p + offsets[p]`` on ``cols``.

    ``offsets`` is one integer for every token or a per-token sequence in
    which ``None`` yields zeros. Reads outside the sequence yield zeros. This
    is the lookup a single attention layer can implement with position
    information; it is kept in the catalogue so constructions can reorder
    tokens inside one oracle call.
    """

    offsets: int | tuple
    cols: slice | tuple | None = None

    def sources(self, n: int) -> list:
        if isinstance(self.offsets, (int, np.integer)):
            offs = [int(self.offsets)] * n
        else:
            offs = list(self.offsets) + [None] * max(0, n - len(self.offsets))
        src = []
        for p in range(n):
            o = offs[p]
            q = None if o is None else p + o
            src.append(q if q is not None and 0 <= q < n else None)
        return src

    def apply(self, x, index):
        n = x.shape[0]
        cols = _cols(self.cols, x.shape[1])
        out = x.copy()
        src = self.sources(n)
        for p, q in enumerate(src):
            out[p, cols] = 0.0 if q is None else x[q, cols]
        return out

    def cost(self, width):
        return width, width


@dataclass(frozen=True)
class Reverse(LookupShift):
    """Reverse token order on ``cols`` (token ``p`` reads token ``n - 1 - p``)."""

    offsets: int | tuple = 0

    def sources(self, n: int) -> list:
        return [n - 1 - p for p in range(n)]


@dataclass(frozen=True)
class OnCols:
    """Apply ``spec`` to the contiguous columns ``[start, stop)``; the rest pass through.

    ``spec`` must preserve the width of the block.
    """

    start: int
    stop: int
    spec: "MlpSpec"

    def apply(self, x, index):
        block = self.spec._run(x[:, self.start:self.stop], index)
        if block.shape[1] != self.stop - self.start:
            raise ShapeError("OnCols sub-spec changed the block width")
        out = x.copy()
        out[:, self.start:self.stop] = block
        return out

    def cost(self, width):
        return width, self.spec.cost(self.stop - self.start)[1]


@dataclass(frozen=True)
class Parallel:
    """Block-diagonal composition: each ``(start, stop, spec)`` maps its column block; outputs are concatenated."""

    blocks: tuple

    def apply(self, x, index):
        parts = [spec._run(x[:, a:b], index) for a, b, spec in self.blocks]
        return np.concatenate(parts, axis=1)

    def cost(self, width):
        outs = [spec.cost(b - a) for a, b, spec in self.blocks]
        return sum(o[0] for o in outs), sum(o[1] for o in outs)


@dataclass(frozen=True)
class Compose:
    """Sequential composition of nested specs."""

    specs: tuple

    def apply(self, x, index):
        for spec in self.specs:
            x = spec._run(x, index)
        return x

    def cost(self, width):
        total = 0
        for spec in self.specs:
            width, ops = spec.cost(width)
            total += ops
        return width, total


Primitive = Union[
    Affine, SelectCols, PadConst, RatioRecover, ScaleCols, DivideCols,
    LookupShift, Reverse, OnCols, Parallel, Compose,
]


@dataclass(frozen=True)
class MlpSpec:
    """An MLP: primitives applied in order to every token."""

    steps: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))

    @classmethod
    def identity(cls) -> "MlpSpec":
        return cls(())

    @property
    def is_identity(self) -> bool:
        return not self.steps

    def then(self, *steps) -> "MlpSpec":
        return MlpSpec(self.steps + tuple(steps))

    def cost(self, width: int) -> tuple[int, int]:
        """Return ``(output_width, arithmetic_ops_per_token)`` for an input of ``width`` columns."""
        total = 0
        for step in self.steps:
            width, ops = step.cost(width)
            total += ops
        return width, total

    def _run(self, x: np.ndarray, index: np.ndarray) -> np.ndarray:
        for step in self.steps:
            x = step.apply(x, index)
        return x


def default_budget(width: int) -> int:
    """Per-token arithmetic budget for an MLP on ``width``-dimensional tokens."""
    return 8 * max(width, 1) ** 2


def mlp_apply(spec: MlpSpec, x, budget: int | None = None) -> np.ndarray:
    """Apply ``spec`` token-wise to the rows of ``x``.

    Token ``i`` is row ``i``; index-aware primitives see that index. The
    per-token cost is checked against ``budget`` (default
    :func:`default_budget` of the widest of input and output).
    """
    x = as_matrix(x, "mlp input")
    if spec.is_identity:
        return x
    width_out, ops = spec.cost(x.shape[1])
    limit = budget if budget is not None else default_budget(max(x.shape[1], width_out))
    if ops > limit:
        raise RestrictionError(f"MLP needs {ops} operations per token, budget is {limit}")
    out = spec._run(x, np.arange(x.shape[0]))
    return as_matrix(out, "mlp output")
