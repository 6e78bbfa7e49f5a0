"""Ground-truth dense transformer.

Straightforward evaluation of attention heads, layers and full forward passes
under every mask kind. The simulations are judged against this module, and
the oracle executes its calls through it.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .exceptions import ConfigurationError, ShapeError
from .mlp import MlpSpec, mlp_apply
from .tensor import Dense, MaskKind, as_matrix, concat, masked_row_softmax, matmul

__all__ = [
    "HeadParams",
    "Layer",
    "TransformerParams",
    "attention_head",
    "layer_forward",
    "transformer_forward",
    "head_slices",
]


@dataclass(frozen=True, eq=False)
class HeadParams:
    """Query, key and value weights of one attention head, each ``m x m``."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray

    def __post_init__(self):
        shapes = set()
        for name in ("wq", "wk", "wv"):
            w = as_matrix(getattr(self, name), name)
            object.__setattr__(self, name, w)
            shapes.add(w.shape)
        if len(shapes) != 1:
            raise ShapeError(f"head weights must share a shape, got {sorted(shapes)}")
        (m, k), = shapes
        if m != k:
            raise ShapeError(f"head weights must be square, got {m}x{k}")

    @property
    def m(self) -> int:
        return self.wq.shape[0]

    @classmethod
    def zeros(cls, m: int) -> "HeadParams":
        z = np.zeros((m, m))
        return cls(z, z, z)


@dataclass(frozen=True, eq=False)
class Layer:
    """One attention layer: ``H`` heads followed by a token-wise layer MLP.

    ``residual=True`` adds the layer input to the concatenated head outputs
    before the MLP. The large models simulated here never use it; packed
    oracle calls do, so that results computed in an early layer survive the
    later ones.
    """

    heads: tuple
    mlp: MlpSpec = field(default_factory=MlpSpec.identity)
    residual: bool = False

    def __post_init__(self):
        object.__setattr__(self, "heads", tuple(self.heads))
        if not self.heads:
            raise ConfigurationError("a layer needs at least one head")
        if len({h.m for h in self.heads}) != 1:
            raise ConfigurationError("all heads of a layer must share their width")


@dataclass(frozen=True, eq=False)
class TransformerParams:
    """Full parameterisation of a transformer.

    ``d`` is the embedding width seen by the layers (the input MLP output
    width); every layer has ``H`` heads of width ``d / H``.
    """

    layers: tuple
    d: int
    mask: MaskKind = Dense()
    input_mlp: MlpSpec = field(default_factory=MlpSpec.identity)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ConfigurationError("a transformer needs at least one layer")
        H = len(self.layers[0].heads)
        if self.d % H:
            raise ConfigurationError(f"embedding dim {self.d} is not divisible by H={H}")
        for k, layer in enumerate(self.layers):
            if len(layer.heads) != H:
                raise ConfigurationError(f"layer {k} has {len(layer.heads)} heads, expected {H}")
            if layer.heads[0].m * H != self.d:
                raise ConfigurationError(
                    f"layer {k} head width {layer.heads[0].m} does not equal d/H = {self.d // H}"
                )

    @property
    def H(self) -> int:
        return len(self.layers[0].heads)

    @property
    def L(self) -> int:
        return len(self.layers)

    @property
    def m(self) -> int:
        return self.d // self.H


def head_slices(d: int, H: int) -> list[slice]:
    """Column partition ``D_1..D_H`` of a ``d``-wide embedding."""
    if d % H:
        raise ConfigurationError(f"embedding dim {d} is not divisible by H={H}")
    m = d // H
    return [slice(h * m, (h + 1) * m) for h in range(H)]


def attention_head(x, head: HeadParams, mask: MaskKind = Dense()) -> np.ndarray:
    """``softmax(mask((x Wq)(x Wk)^T)) (x Wv)``."""
    x = as_matrix(x, "head input")
    if x.shape[1] != head.m:
        raise ShapeError(f"head expects width {head.m}, got {x.shape[1]}")
    q = matmul(x, head.wq)
    k = matmul(x, head.wk)
    v = matmul(x, head.wv)
    return matmul(masked_row_softmax(matmul(q, k.T), mask), v)


def layer_forward(
    x,
    heads: Sequence[HeadParams],
    layer_mlp: MlpSpec = MlpSpec(),
    mask: MaskKind = Dense(),
    residual: bool = False,
    mlp_budget: int | None = None,
) -> np.ndarray:
    """Partition columns among the heads, attend, concatenate, apply the layer MLP."""
    x = as_matrix(x, "layer input")
    slices = head_slices(x.shape[1], len(heads))
    outs = [attention_head(x[:, sl], h, mask) for sl, h in zip(slices, heads)]
    y = concat(outs, "cols")
    if residual:
        y = x + y
    return mlp_apply(layer_mlp, y, mlp_budget)


def transformer_forward(x, params: TransformerParams, mlp_budget: int | None = None) -> np.ndarray:
    """Input MLP, then every layer in turn."""
    h = mlp_apply(params.input_mlp, as_matrix(x, "transformer input"), mlp_budget)
    if h.shape[1] != params.d:
        raise ShapeError(f"input MLP produced width {h.shape[1]}, model expects d={params.d}")
    for layer in params.layers:
        h = layer_forward(h, layer.heads, layer.mlp, params.mask, layer.residual, mlp_budget)
    return h
