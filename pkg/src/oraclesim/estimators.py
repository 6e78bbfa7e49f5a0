"""scikit-learn style wrappers.

``fit`` validates the configuration against the input shape (and sizes an
oracle when none is given); ``transform`` runs the forward pass. After a
transform the ledger of the last run is kept on ``ledger_``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ._calls import capacity_for
from .exceptions import ConfigurationError, ShapeError
from .oracle import Oracle, OracleCapacity, Workbench
from .reference import TransformerParams, transformer_forward
from .sim_linear import avg_call_count, avg_simulate, sink_simulate, window_call_count, window_simulate
from .sim_quadratic import quadratic_call_count, simulate_full, simulate_full_causal
from .tensor import Causal, Dense, Sink, Window

__all__ = ["ReferenceTransformer", "OracleSimulator"]


def _check_width(X: np.ndarray, params: TransformerParams) -> None:
    # the input MLP may change the width, so only an identity input map pins it
    if params.input_mlp.is_identity and X.shape[1] != params.d:
        raise ShapeError(f"X has {X.shape[1]} columns, the model expects d={params.d}")


class ReferenceTransformer(TransformerMixin, BaseEstimator):
    """Direct evaluation of a fixed transformer."""

    def __init__(self, params: TransformerParams | None = None):
        self.params = params

    def fit(self, X, y=None):
        if self.params is None:
            raise ConfigurationError("ReferenceTransformer needs params")
        X = check_array(X, dtype=np.float64)
        _check_width(X, self.params)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_array(X, dtype=np.float64)
        _check_width(X, self.params)
        return transformer_forward(X, self.params)


class OracleSimulator(TransformerMixin, BaseEstimator):
    """Forward pass of ``params`` through a length-limited oracle.

    ``mode="auto"`` picks the exact simulation that matches
    ``params.mask`` (blockwise for dense and causal masks, prefix
    differences for window and sink masks); ``mode="average"`` runs the
    randomized estimator instead. Without ``capacity`` the smallest oracle
    for ``chunk`` is used, with ``h_small * l_small`` packed slots.
    """

    def __init__(
        self,
        params: TransformerParams | None = None,
        chunk: int | None = None,
        capacity: OracleCapacity | None = None,
        mode: str = "auto",
        h_small: int = 1,
        l_small: int = 1,
        pack: bool = True,
        pure_oracle: bool = False,
        random_state: int = 0,
        epsilon: float = 0.25,
    ):
        self.params = params
        self.chunk = chunk
        self.capacity = capacity
        self.mode = mode
        self.h_small = h_small
        self.l_small = l_small
        self.pack = pack
        self.pure_oracle = pure_oracle
        self.random_state = random_state
        self.epsilon = epsilon

    def _resolve_mode(self) -> str:
        mask = self.params.mask
        if self.mode == "average":
            if mask != Dense():
                raise ConfigurationError("mode='average' needs a dense model")
            return "average"
        if self.mode != "auto":
            raise ConfigurationError(f"mode must be 'auto' or 'average', got {self.mode!r}")
        if isinstance(mask, Dense):
            return "quadratic"
        if isinstance(mask, Causal):
            return "quadratic-causal"
        return "sink" if isinstance(mask, Sink) else "window"

    def fit(self, X, y=None):
        if self.params is None:
            raise ConfigurationError("OracleSimulator needs params")
        X = check_array(X, dtype=np.float64)
        _check_width(X, self.params)
        self.mode_ = self._resolve_mode()
        oracle_mask = Dense() if self.mode_ in ("quadratic", "average") else Causal()
        if self.capacity is not None:
            cap = self.capacity
            chunk = self.chunk if self.chunk is not None else cap.m_max - 1
        else:
            if self.chunk is None:
                raise ConfigurationError("give either chunk or capacity")
            chunk = int(self.chunk)
            extra = 0
            if isinstance(self.params.mask, Sink):
                extra = self.params.mask.s + chunk - self.params.mask.r + 1
            if self.pure_oracle:
                t = X.shape[0] // chunk
                extra = max(extra, 2 * t - 1 if self.mode_ == "quadratic-causal" else t)
            cap = capacity_for(
                self.params.m, oracle_mask, chunk, h_small=self.h_small, l_small=self.l_small, extra_rows=extra,
            )
        self.capacity_ = cap
        self.chunk_ = chunk
        self.n_features_in_ = X.shape[1]
        self.expected_calls_ = self.expected_calls(X.shape[0])
        return self

    def expected_calls(self, n: int) -> int:
        """Closed-form oracle calls for a length-``n`` input."""
        check_is_fitted(self, "capacity_")
        p, cap, c = self.params, self.capacity_, self.chunk_
        if self.mode_ in ("quadratic", "quadratic-causal"):
            return quadratic_call_count(n, c, p.H, p.L, cap.slots, self.pack, self.pure_oracle)
        if self.mode_ == "average":
            return avg_call_count(n, c, p.H, p.L, cap.slots, self.pack)
        s = p.mask.s if isinstance(p.mask, Sink) else 0
        return window_call_count(n, c, p.mask.r, s, p.H, p.L, cap.slots, self.pack)

    def transform(self, X):
        check_is_fitted(self, "capacity_")
        X = check_array(X, dtype=np.float64)
        _check_width(X, self.params)
        oracle = Oracle(self.capacity_)
        bench = Workbench(self.capacity_.d_small)
        p, c = self.params, self.chunk_
        if self.mode_ == "quadratic":
            out = simulate_full(oracle, X, p, c, bench, self.pure_oracle, self.pack)
        elif self.mode_ == "quadratic-causal":
            out = simulate_full_causal(oracle, X, p, c, bench, self.pure_oracle, self.pack)
        elif self.mode_ == "average":
            self.estimate_ = avg_simulate(oracle, X, p, c, self.random_state, bench, self.epsilon, self.pack)
            out = self.estimate_.output
        elif isinstance(p.mask, Sink):
            out = sink_simulate(oracle, X, p, c, bench, self.pack)
        elif isinstance(p.mask, Window):
            out = window_simulate(oracle, X, p, c, bench, self.pack)
        else:  # pragma: no cover - _resolve_mode covers every mask
            raise ConfigurationError(f"unsupported mask {p.mask!r}")
        self.ledger_ = oracle.ledger
        self.bench_ = bench
        return out
