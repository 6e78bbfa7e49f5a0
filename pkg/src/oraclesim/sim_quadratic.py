"""Exact simulation of long-context attention with a short-context oracle.

A length-``N`` head is split into ``T = N / chunk`` blocks. For every
(query block, key block) pair one oracle call recovers the block normaliser
``A = sum_j exp(<q, k_j>)`` and another the block ratio ``B / A``; the host
recombines ``sum_t (B/A)_t A_t / sum_t A_t``, which is exactly the full
softmax. Heads and layers are simulated one after another; independent
block calls are packed into the heads and layers of one oracle call.

The causal variant splits each visible key block into the keys before and
after the query position inside the block, both computed by causal oracle
calls (the second with the block order reversed).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._calls import (
    Job,
    batch_sizes,
    denom_job,
    pack_instances,
    packed_width,
    ratio_job,
    run_jobs,
    suffix_denom_job,
    suffix_ratio_job,
    task_width,
)
from ._engine import HeadPlan, check_chunk, default_bench, run_model, run_plans
from .exceptions import ConfigurationError, DegenerateRatioError
from .mlp import DivideCols, MlpSpec, ScaleCols
from .oracle import Oracle, Workbench, sum_via_oracle
from .reference import HeadParams, TransformerParams
from .tensor import Causal, Dense, as_matrix

__all__ = [
    "BlockStats",
    "CausalBlockStats",
    "denom_block",
    "ratio_block",
    "recombine",
    "simulate_single_head",
    "flatten_heads_layers",
    "pack_instances",
    "simulate_full",
    "prefix_denoms_causal",
    "suffix_stats_causal",
    "simulate_full_causal",
    "quadratic_call_count",
    "quadratic_round_count",
]


@dataclass(frozen=True, eq=False)
class BlockStats:
    """Per-query block normalisers ``a`` (``N x T``) and block ratios ``r`` (``T`` blocks of ``N x m``)."""

    a: np.ndarray
    r: tuple
    chunk: int

    def __post_init__(self):
        object.__setattr__(self, "r", tuple(self.r))
        if self.a.shape[1] != len(self.r):
            raise ConfigurationError("one ratio block per normaliser column is required")
        if np.any(self.a <= 0):
            raise DegenerateRatioError("block normalisers must be strictly positive")

    @property
    def t_count(self) -> int:
        return len(self.r)


@dataclass(frozen=True, eq=False)
class CausalBlockStats:
    """Split statistics of one query block against an earlier key block.

    ``a1``/``r1`` cover keys at or before the query's in-block position,
    ``a2``/``r2`` the keys after it; ``a1 + a2`` is the full block normaliser.
    """

    a1: np.ndarray
    a2: np.ndarray
    r1: np.ndarray
    r2: np.ndarray
    chunk: int

    @property
    def a(self) -> np.ndarray:
        return self.a1 + self.a2


# ---------------------------------------------------------------- single blocks


def _single(oracle: Oracle, bench: Workbench | None, job: Job) -> np.ndarray:
    bench = default_bench(oracle, bench)
    return run_jobs(oracle, bench, [job])[0]


def denom_block(oracle: Oracle, x_queries, x_keys, wq, wk, bench: Workbench | None = None) -> np.ndarray:
    """``A_i = sum_j exp(<q_i, k_j>)`` for every query row against the key block (one call).

    ``x_keys=None`` uses the query block as its own key block.
    """
    b = default_bench(oracle, bench)
    causal = isinstance(oracle.capacity.mask, Causal)
    if causal and x_keys is not None:
        raise ConfigurationError("a causal oracle only sees full cross blocks through suffix_stats_causal")
    job = denom_job(b, as_matrix(x_queries), None if x_keys is None else as_matrix(x_keys), as_matrix(wq), as_matrix(wk), causal=causal)
    return _single(oracle, b, job)[:, 0]


def ratio_block(oracle: Oracle, x_queries, x_keys, head: HeadParams, bench: Workbench | None = None) -> np.ndarray:
    """Attention of the query rows restricted to one key block (one call)."""
    b = default_bench(oracle, bench)
    job = ratio_job(b, as_matrix(x_queries), None if x_keys is None else as_matrix(x_keys), head)
    return _single(oracle, b, job)


def prefix_denoms_causal(oracle: Oracle, x_block, wq, wk, bench: Workbench | None = None) -> np.ndarray:
    """``sum_{j <= i} exp(<q_i, k_j>)`` inside one block, from one causal call."""
    if not isinstance(oracle.capacity.mask, Causal):
        raise ConfigurationError("prefix normalisers need a causal oracle")
    b = default_bench(oracle, bench)
    return _single(oracle, b, denom_job(b, as_matrix(x_block), None, as_matrix(wq), as_matrix(wk), causal=True))[:, 0]


def suffix_stats_causal(oracle: Oracle, x_queries, x_keys, head: HeadParams, bench: Workbench | None = None):
    """Normaliser and ratio over keys strictly after each query's in-block position (two causal calls).

    Returns ``(a2, r2)``; the last query has an empty suffix, ``a2 = 0``.
    """
    if not isinstance(oracle.capacity.mask, Causal):
        raise ConfigurationError("suffix statistics need a causal oracle")
    b = default_bench(oracle, bench)
    xq, xk = as_matrix(x_queries), as_matrix(x_keys)
    a2, r2 = run_jobs(oracle, b, [suffix_denom_job(b, xq, xk, head.wq, head.wk), suffix_ratio_job(b, xq, xk, head)], pack=False)
    return a2[:, 0], r2


# ---------------------------------------------------------------- recombination


def _oracle_average(oracle: Oracle, bench: Workbench, ratios, weights) -> np.ndarray:
    """Row-wise weighted average with every sum done by one oracle call per row."""
    m = ratios[0].shape[1]
    if len(ratios) > oracle.capacity.m_max:
        raise ConfigurationError(
            f"oracle-side recombination sums {len(ratios)} terms per row, above m_max={oracle.capacity.m_max}"
        )
    pre = MlpSpec([ScaleCols(tuple(range(m)), m)])
    post = MlpSpec([DivideCols(tuple(range(m)), m)])
    rows = []
    for i in range(ratios[0].shape[0]):
        terms = bench.concat(
            [bench.concat([bench.select(r, rows=[i]), bench.select(w.reshape(-1, 1), rows=[i])], "cols") for r, w in zip(ratios, weights)],
            "rows",
        )
        out = sum_via_oracle(oracle, terms, input_mlp=pre, output_mlp=post, tag="recombine")
        rows.append(bench.select(out, cols=slice(0, m)))
    return bench.concat(rows, "rows")


def recombine(stats: BlockStats, bench: Workbench | None = None, oracle: Oracle | None = None) -> np.ndarray:
    """``sum_t r_t a_t / sum_t a_t`` row by row; with ``oracle`` the sums run inside oracle calls."""
    b = bench if bench is not None else Workbench(max(stats.r[0].shape[1], 2))
    weights = [stats.a[:, t] for t in range(stats.t_count)]
    if oracle is not None:
        return _oracle_average(oracle, b, list(stats.r), weights)
    return b.weighted_average(list(stats.r), weights)


# ---------------------------------------------------------------- plans


def _blocks(bench: Workbench, x: np.ndarray, chunk: int) -> list[np.ndarray]:
    return [bench.select(x, rows=slice(t * chunk, (t + 1) * chunk)) for t in range(x.shape[0] // chunk)]


def _dense_plan(oracle, bench, x, head, chunk, pure) -> HeadPlan:
    xb = _blocks(bench, x, chunk)
    T = len(xb)
    dens, rats = [], []
    for tq in range(T):
        for tk in range(T):
            keys = None if tq == tk else xb[tk]
            dens.append(denom_job(bench, xb[tq], keys, head.wq, head.wk, causal=False))
            rats.append(ratio_job(bench, xb[tq], keys, head))

    def combine(ans):
        den, rat = ans
        cols = [bench.concat([den[tq * T + tk] for tq in range(T)], "rows") for tk in range(T)]
        stats = BlockStats(
            a=bench.concat(cols, "cols"),
            r=[bench.concat([rat[tq * T + tk] for tq in range(T)], "rows") for tk in range(T)],
            chunk=chunk,
        )
        return recombine(stats, bench, oracle if pure else None)

    return HeadPlan([dens, rats], combine, oracle_combine=pure)


def _causal_plan(oracle, bench, x, head, chunk, pure) -> HeadPlan:
    xb = _blocks(bench, x, chunk)
    T = len(xb)
    dens, rats = [], []
    layout = []  # per query block: indices into dens/rats, in term order
    for t in range(T):
        terms = [(len(dens), len(rats))]
        dens.append(denom_job(bench, xb[t], None, head.wq, head.wk, causal=True, tag="prefix"))
        rats.append(ratio_job(bench, xb[t], None, head))
        for tk in range(t):
            terms.append((len(dens), len(rats)))
            dens.append(denom_job(bench, xb[t], xb[tk], head.wq, head.wk, causal=True))
            rats.append(ratio_job(bench, xb[t], xb[tk], head))
            terms.append((len(dens), len(rats)))
            dens.append(suffix_denom_job(bench, xb[t], xb[tk], head.wq, head.wk))
            rats.append(suffix_ratio_job(bench, xb[t], xb[tk], head))
        layout.append(terms)

    def combine(ans):
        den, rat = ans
        out = []
        for terms in layout:
            ratios = [rat[j] for _, j in terms]
            weights = [den[i][:, 0] for i, _ in terms]
            if pure:
                out.append(_oracle_average(oracle, bench, ratios, weights))
            else:
                out.append(bench.weighted_average(ratios, weights))
        return bench.concat(out, "rows")

    return HeadPlan([dens, rats], combine, oracle_combine=pure)


def _check_capacity(oracle: Oracle, params: TransformerParams, want_mask, pack: bool) -> None:
    cap = oracle.capacity
    if params.mask != want_mask:
        raise ConfigurationError(f"this simulation expects a {want_mask!r} large model, got {params.mask!r}")
    if cap.mask != want_mask:
        raise ConfigurationError(f"this simulation expects a {want_mask!r} oracle, got {cap.mask!r}")
    need = packed_width(task_width(params.m), cap, cap.slots if pack else 1)
    if need > cap.d_small:
        raise ConfigurationError(
            f"oracle width d_small={cap.d_small} is too small: head width {params.m} needs {need} "
            f"with {cap.slots if pack else 1} packed slot(s)"
        )


def simulate_single_head(
    oracle: Oracle,
    x,
    head: HeadParams,
    chunk: int | None = None,
    bench: Workbench | None = None,
    pure_oracle: bool = False,
) -> np.ndarray:
    """Exact output of one attention head over ``N`` rows in ``2 T^2`` oracle calls.

    The head is masked like the oracle: dense or causal.
    """
    x = as_matrix(x, "x")
    b = default_bench(oracle, bench)
    chunk = check_chunk(x.shape[0], chunk, oracle.capacity.m_max)
    plan = _causal_plan if isinstance(oracle.capacity.mask, Causal) else _dense_plan
    return run_plans(oracle, b, [plan(oracle, b, x, head, chunk, pure_oracle)])[0]


def _simulate(oracle, x, params, chunk, bench, pure_oracle, pack, mask, plan) -> np.ndarray:
    x = as_matrix(x, "x")
    _check_capacity(oracle, params, mask, pack)
    b = default_bench(oracle, bench)
    chunk = check_chunk(x.shape[0], chunk, oracle.capacity.m_max)
    return run_model(
        oracle, b, x, params,
        lambda xh, head, li, hi: plan(oracle, b, xh, head, chunk, pure_oracle),
        pack=pack,
    )


def simulate_full(
    oracle: Oracle,
    x,
    params: TransformerParams,
    chunk: int | None = None,
    bench: Workbench | None = None,
    pure_oracle: bool = False,
    pack: bool = True,
) -> np.ndarray:
    """Exact dense transformer forward pass, independent block calls packed ``H' L'`` per call."""
    return _simulate(oracle, x, params, chunk, bench, pure_oracle, pack, Dense(), _dense_plan)


def flatten_heads_layers(
    oracle: Oracle,
    x,
    params: TransformerParams,
    chunk: int | None = None,
    bench: Workbench | None = None,
    pure_oracle: bool = False,
) -> np.ndarray:
    """Head-by-head, layer-by-layer simulation with one single-head call per block."""
    return simulate_full(oracle, x, params, chunk, bench, pure_oracle, pack=False)


def simulate_full_causal(
    oracle: Oracle,
    x,
    params: TransformerParams,
    chunk: int | None = None,
    bench: Workbench | None = None,
    pure_oracle: bool = False,
    pack: bool = True,
) -> np.ndarray:
    """Exact causal transformer forward pass through a causal oracle."""
    return _simulate(oracle, x, params, chunk, bench, pure_oracle, pack, Causal(), _causal_plan)


# ---------------------------------------------------------------- closed forms


def quadratic_call_count(
    n: int, chunk: int, heads: int = 1, layers: int = 1, slots: int = 1,
    pack: bool = True, pure_oracle: bool = False,
) -> int:
    """Oracle calls of :func:`simulate_full` / :func:`simulate_full_causal`.

    Per layer there are ``T^2 H`` normaliser tasks of ``chunk + 1`` rows and
    ``T^2 H`` ratio tasks of ``chunk`` rows, batched ``slots`` at a time; the
    causal split has the same counts. Oracle-side recombination adds one call
    per query row and head.
    """
    T = n // chunk
    per = T * T * heads
    calls = batch_sizes({chunk + 1: per, chunk: per}, slots, pack)
    if pure_oracle:
        calls += n * heads
    return layers * calls


def quadratic_round_count(layers: int, pure_oracle: bool = False) -> int:
    """Normalisers, then ratios, then (oracle-side only) recombination, per layer."""
    return layers * (3 if pure_oracle else 2)
