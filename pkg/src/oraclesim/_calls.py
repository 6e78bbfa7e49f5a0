"""Construction, packing and execution of single-head oracle calls.

A :class:`Task` is one self-contained single-layer single-head small
transformer evaluation: raw input rows, an input MLP, one head and a layer
MLP. Builders below produce the tasks the simulations need (block
normalisers, block ratios, suffix statistics, sink statistics), each paired
with an :class:`Extract` that says which output rows/columns carry the
answer. :func:`run_jobs` batches independent tasks into as few packed oracle
calls as the capacity allows.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import groupby
from typing import Sequence

import numpy as np

from .exceptions import ConfigurationError, ShapeError
from .mlp import Affine, DivideCols, LookupShift, MlpSpec, OnCols, PadConst, Parallel, RatioRecover, Reverse
from .oracle import Oracle, OracleCapacity, Workbench
from .reference import HeadParams, Layer, TransformerParams
from .tensor import Causal, MaskKind


@dataclass(frozen=True, eq=False)
class Task:
    x: np.ndarray
    head: HeadParams
    input_mlp: MlpSpec = field(default_factory=MlpSpec.identity)
    layer_mlp: MlpSpec = field(default_factory=MlpSpec.identity)
    tag: str = "call"

    @property
    def rows(self) -> int:
        return self.x.shape[0]

    @property
    def width(self) -> int:
        return self.head.m

    def params(self, mask: MaskKind) -> TransformerParams:
        return TransformerParams(
            layers=(Layer((self.head,), self.layer_mlp),),
            d=self.width,
            mask=mask,
            input_mlp=self.input_mlp,
        )


@dataclass(frozen=True)
class Extract:
    """Output row for each answer (``None`` means an empty sum: zeros) and the column range."""

    rows: tuple
    cols: slice


@dataclass(frozen=True, eq=False)
class Job:
    task: Task
    extract: Extract


@dataclass(frozen=True, eq=False)
class PackedCall:
    x: np.ndarray
    params: TransformerParams
    slots: tuple  # (start, stop) output columns of each packed task


def _same_rows(xq, xk) -> None:
    # cross calls put query i and key i on one token
    if xk is not None and xk.shape[0] != xq.shape[0]:
        raise ShapeError(f"query block has {xq.shape[0]} rows but key block has {xk.shape[0]}; cross blocks must match")


def _square(w: int) -> np.ndarray:
    return np.zeros((w, w))


def task_width(m: int) -> int:
    """Widest single task the builders below produce for head width ``m``."""
    return 2 * m + 3


# ---------------------------------------------------------------- builders


def denom_job(bench: Workbench, xq, xk, wq, wk, *, causal: bool, scale=1.0, query_shift: int = 0, tag="denominator") -> Job:
    """Block normaliser ``A_i = scale * sum_j exp(<q_i, k_j>)`` via one synthetic token.

    The synthetic row has a zero key, so it contributes ``exp(1)`` next to
    ``exp(<q,k> + 1)`` for every real key. Value column 0 marks real rows and
    reads ``x = A / (A + 1)``; value column 1 marks the synthetic row and
    reads ``y = 1 / (A + 1)``; the layer MLP returns ``scale * x / y``. Under
    a causal oracle the synthetic row goes first so every query sees it.
    With ``xk=None`` queries and keys come from the same block.
    """
    _same_rows(xq, xk)
    m = wq.shape[0]
    diagonal = xk is None and query_shift == 0
    if diagonal:
        z = xq
        qcols, kcols = slice(0, m), slice(0, m)
        pre = []
    else:
        z = bench.concat([xk if xk is not None else xq, xq], "cols")
        kcols, qcols = slice(0, m), slice(m, 2 * m)
        pre = [LookupShift(query_shift, cols=qcols)] if query_shift else []
    n = z.shape[0]
    width_in = z.shape[1]
    z = bench.pad_constants(z, np.zeros(width_in), "rows", "start" if causal else "end")
    real = (1, n + 1) if causal else (0, n)
    w = width_in + 3
    one, ind, syn = width_in, width_in + 1, width_in + 2
    WQ, WK, WV = _square(w), _square(w), _square(w)
    WQ[qcols, :m] = wq
    WQ[one, m] = 1.0
    WK[kcols, :m] = wk
    WK[one, m] = 1.0
    WV[ind, 0] = 1.0
    WV[syn, 1] = 1.0
    task = Task(
        x=z,
        head=HeadParams(WQ, WK, WV),
        input_mlp=MlpSpec(pre + [PadConst((1.0,)), PadConst((1.0,), rows=real), PadConst((1.0,), rows=real, invert=True)]),
        layer_mlp=MlpSpec([RatioRecover(0, scale, den=1)]),
        tag=tag,
    )
    rows = tuple(
        (u - query_shift + real[0]) if u - query_shift >= 0 else None for u in range(n)
    )
    return Job(task, Extract(rows, slice(0, 1)))


def ratio_job(bench: Workbench, xq, xk, head: HeadParams, *, query_shift: int = 0, tag="ratio") -> Job:
    """Block ratio ``B_i / A_i``: attention of the queries over the key block only."""
    _same_rows(xq, xk)
    m = head.m
    if xk is None and query_shift == 0:
        task = Task(x=xq, head=head, tag=tag)
        return Job(task, Extract(tuple(range(xq.shape[0])), slice(0, m)))
    z = bench.concat([xk if xk is not None else xq, xq], "cols")
    n = z.shape[0]
    w = 2 * m
    WQ, WK, WV = _square(w), _square(w), _square(w)
    WQ[m:, :m] = head.wq
    WK[:m, :m] = head.wk
    WV[:m, :m] = head.wv
    pre = [LookupShift(query_shift, cols=slice(m, 2 * m))] if query_shift else []
    task = Task(x=z, head=HeadParams(WQ, WK, WV), input_mlp=MlpSpec(pre), tag=tag)
    rows = tuple((u - query_shift) if u - query_shift >= 0 else None for u in range(n))
    return Job(task, Extract(rows, slice(0, m)))


def suffix_denom_job(bench: Workbench, xq, xk, wq, wk, tag="suffix") -> Job:
    """``A2_u = sum_{j > u} exp(<q_u, k_j>)`` over a key block, under a causal oracle.

    Queries are laid out in reverse order and keys in reverse order behind a
    zero synthetic row, so the causal mask shows query ``u`` exactly the keys
    after position ``u`` plus the synthetic token.
    """
    m = wq.shape[0]
    n = xq.shape[0]
    z = bench.pad_constants(bench.concat([xq, xk], "cols"), np.zeros(2 * m), "rows", "end")
    q_offsets = tuple([n - 1 - 2 * p for p in range(n)] + [None])
    k_offsets = tuple([None] + [n - 2 * p for p in range(1, n + 1)])
    w = 2 * m + 2
    WQ, WK, WV = _square(w), _square(w), _square(w)
    WQ[:m, :m] = wq
    WK[m:2 * m, :m] = wk
    WV[2 * m, 0] = 1.0
    WV[2 * m + 1, 1] = 1.0
    task = Task(
        x=z,
        head=HeadParams(WQ, WK, WV),
        input_mlp=MlpSpec([
            LookupShift(q_offsets, cols=slice(0, m)),
            LookupShift(k_offsets, cols=slice(m, 2 * m)),
            PadConst((1.0,), rows=(1, n + 1)),
            PadConst((1.0,), rows=(1, n + 1), invert=True),
        ]),
        layer_mlp=MlpSpec([RatioRecover(0, den=1)]),
        tag=tag,
    )
    return Job(task, Extract(tuple(n - 1 - u for u in range(n)), slice(0, 1)))


def suffix_ratio_job(bench: Workbench, xq, xk, head: HeadParams, tag="suffix") -> Job:
    """``B2_u / A2_u`` (keys strictly after ``u``) under a causal oracle.

    Keys are reversed; queries are reversed and moved up one row, so query
    ``u`` sits at row ``n - 2 - u`` and sees keys ``n-1, ..., u+1``. The last
    query has an empty suffix and gets zeros.
    """
    m = head.m
    n = xq.shape[0]
    z = bench.concat([xq, xk], "cols")
    q_offsets = tuple([n - 2 - 2 * p for p in range(n - 1)] + [None])
    w = 2 * m
    WQ, WK, WV = _square(w), _square(w), _square(w)
    WQ[:m, :m] = head.wq
    WK[m:, :m] = head.wk
    WV[m:, :m] = head.wv
    task = Task(
        x=z,
        head=HeadParams(WQ, WK, WV),
        input_mlp=MlpSpec([LookupShift(q_offsets, cols=slice(0, m)), Reverse(cols=slice(m, 2 * m))]),
        tag=tag,
    )
    rows = tuple((n - 2 - u) if u < n - 1 else None for u in range(n))
    return Job(task, Extract(rows, slice(0, m)))


def sink_job(bench: Workbench, x_sink, x_queries, sigma: Sequence[int], head: HeadParams, tag="sink") -> Job:
    """Sink statistics for a batch of queries under a causal oracle.

    Query ``k`` needs ``A = sum_{j < sigma[k]} exp(<q_k, k_j>)`` over the first
    ``sigma[k]`` sink keys and the matching ratio ``B / A``. Sink keys sit in
    rows ``1..s`` behind a zero synthetic row; each query is placed at the
    row where the causal mask shows it exactly ``sigma[k]`` sink keys, and the
    zero-key rows it also sees (the synthetic token plus any later rows) are
    a known count the layer MLP divides out. Queries with ``sigma = 0`` get
    zeros.
    """
    m = head.m
    s = x_sink.shape[0]
    place, taken_full = [], 0
    for sg in sigma:
        if sg <= 0:
            place.append(None)
        elif sg < s:
            place.append(int(sg))
        else:
            place.append(s + taken_full)
            taken_full += 1
    used = [k for k, p in enumerate(place) if p is not None]
    z = bench.concat([x_sink, bench.select(x_queries, rows=used)], "rows")
    z = bench.pad_constants(z, np.zeros(m), "rows", "start")
    n = z.shape[0]
    k_offsets = tuple(0 if 1 <= p <= s else None for p in range(n))
    q_src = {place[k]: 1 + s + rank for rank, k in enumerate(used)}
    q_offsets = tuple((q_src[p] - p) if p in q_src else None for p in range(n))
    dummies = tuple(float(1 + max(0, p - s)) for p in range(n))
    w = 2 * m + 2
    WQ, WK, WV = _square(w), _square(w), _square(w)
    WQ[m:2 * m, :m] = head.wq
    WK[:m, :m] = head.wk
    WV[2 * m, 0] = 1.0
    WV[:m, 1:m + 1] = head.wv
    WV[2 * m + 1, m + 1] = 1.0
    task = Task(
        x=z,
        head=HeadParams(WQ, WK, WV),
        input_mlp=MlpSpec([
            Affine(np.hstack([np.eye(m), np.eye(m)])),
            LookupShift(k_offsets, cols=slice(0, m)),
            LookupShift(q_offsets, cols=slice(m, 2 * m)),
            PadConst((1.0,), rows=(1, s + 1)),
            PadConst((1.0,), rows=(1, s + 1), invert=True),
        ]),
        layer_mlp=MlpSpec([DivideCols(tuple(range(1, m + 1)), 0), RatioRecover(0, dummies, den=m + 1)]),
        tag=tag,
    )
    return Job(task, Extract(tuple(place), slice(0, m + 1)))


# ---------------------------------------------------------------- packing


def pack_instances(tasks: Sequence[Task], capacity: OracleCapacity) -> PackedCall:
    """Arrange independent single-head tasks into one multi-head, multi-layer call.

    Task ``k`` takes slot ``(head k % H', layer k // H')``. Every slot owns a
    column block of width ``2 * w`` (``w`` the widest task): an input half
    holding the task's embedded input and an output half, zero until the
    slot's layer writes the task's attention output there. Each head's weights
    read only its active slot's input half and write only its output half; the
    layers carry a residual path, so every other column passes through
    unchanged. The layer MLP touches only the active slots' output halves.
    A single task is returned in its own standalone arrangement.
    """
    tasks = list(tasks)
    if not tasks:
        raise ConfigurationError("nothing to pack")
    rows = {t.rows for t in tasks}
    if len(rows) != 1:
        raise ConfigurationError(f"packed tasks must share their row count, got {sorted(rows)}")
    if len(tasks) > capacity.slots:
        raise ConfigurationError(f"{len(tasks)} tasks exceed the {capacity.slots} slots of one call")
    if len(tasks) == 1:
        t = tasks[0]
        return PackedCall(t.x, t.params(capacity.mask), ((0, t.width),))

    n_heads = min(capacity.h_small, len(tasks))
    n_layers = -(-len(tasks) // n_heads)
    wmax = max(t.width for t in tasks)
    W = 2 * wmax
    mh = n_layers * W
    slot_of = {k: (k % n_heads, k // n_heads) for k in range(len(tasks))}
    at = {v: k for k, v in slot_of.items()}

    raw_off = np.cumsum([0] + [t.x.shape[1] for t in tasks])
    blocks = []
    for h in range(n_heads):
        for ell in range(n_layers):
            k = at.get((h, ell))
            if k is None:
                blocks.append((0, 0, MlpSpec([PadConst((0.0,) * W)])))
                continue
            t = tasks[k]
            fill = MlpSpec([PadConst((0.0,) * (W - t.width))])
            blocks.append((int(raw_off[k]), int(raw_off[k + 1]), MlpSpec(t.input_mlp.steps + fill.steps)))
    input_mlp = MlpSpec([Parallel(tuple(blocks))])

    layers = []
    slots = [None] * len(tasks)
    for ell in range(n_layers):
        heads, post = [], []
        for h in range(n_heads):
            k = at.get((h, ell))
            if k is None:
                heads.append(HeadParams.zeros(mh))
                continue
            t = tasks[k]
            base = ell * W
            wi = t.width
            WQ, WK, WV = _square(mh), _square(mh), _square(mh)
            WQ[base:base + wi, base:base + wi] = t.head.wq
            WK[base:base + wi, base:base + wi] = t.head.wk
            WV[base:base + wi, base + wmax:base + wmax + wi] = t.head.wv
            heads.append(HeadParams(WQ, WK, WV))
            start = h * mh + base + wmax
            slots[k] = (start, start + wi)
            if not t.layer_mlp.is_identity:
                post.append(OnCols(start, start + wi, t.layer_mlp))
        layers.append(Layer(tuple(heads), MlpSpec(post), residual=True))

    x = np.concatenate([t.x for t in tasks], axis=1)
    params = TransformerParams(layers=tuple(layers), d=n_heads * mh, mask=capacity.mask, input_mlp=input_mlp)
    return PackedCall(x, params, tuple(slots))


def packed_width(task_width: int, capacity: OracleCapacity, count: int | None = None) -> int:
    """Embedding width a packed call of ``count`` (default: all slots) tasks needs."""
    count = capacity.slots if count is None else count
    if count <= 1:
        return task_width
    n_heads = min(capacity.h_small, count)
    n_layers = -(-count // n_heads)
    return n_heads * n_layers * 2 * task_width


def batch_sizes(counts_by_rows: dict[int, int], slots: int, pack: bool = True) -> int:
    """Closed-form number of oracle calls for independent tasks grouped by row count."""
    if not pack:
        return sum(counts_by_rows.values())
    return sum(-(-c // slots) for c in counts_by_rows.values())


def run_jobs(oracle: Oracle, bench: Workbench, jobs: Sequence[Job], pack: bool = True) -> list[np.ndarray]:
    """Execute independent jobs and return each job's extracted answer.

    Jobs are grouped by input length (packed tasks must share it) and issued
    in batches of ``capacity.slots``; with ``pack=False`` every job is its own
    call.
    """
    cap = oracle.capacity
    size = cap.slots if pack else 1
    results: list = [None] * len(jobs)
    order = sorted(range(len(jobs)), key=lambda k: jobs[k].task.rows)
    for _, grp in groupby(order, key=lambda k: jobs[k].task.rows):
        grp = list(grp)
        for b in range(0, len(grp), size):
            batch = grp[b:b + size]
            tasks = [jobs[k].task for k in batch]
            call = pack_instances(tasks, cap)
            tags = {t.tag for t in tasks}
            tag = tags.pop() if len(tags) == 1 else "pack"
            out = oracle(call.x, call.params, tag=tag, instances=len(tasks))
            for k, (a, z) in zip(batch, call.slots):
                results[k] = _extract(bench, bench.select(out, cols=slice(a, z)), jobs[k].extract)
    return results


def _extract(bench: Workbench, out: np.ndarray, ex: Extract) -> np.ndarray:
    block = bench.select(out, cols=ex.cols)
    if any(r is None for r in ex.rows):
        block = bench.pad_constants(block, np.zeros(block.shape[1]), "rows", "end")
        zero = block.shape[0] - 1
        return bench.select(block, rows=[zero if r is None else r for r in ex.rows])
    return bench.select(block, rows=list(ex.rows))


def is_causal(cap: OracleCapacity) -> bool:
    return isinstance(cap.mask, Causal)


def capacity_for(
    head_width: int,
    mask: MaskKind,
    chunk: int,
    *,
    h_small: int = 1,
    l_small: int = 1,
    m_max: int | None = None,
    d_small: int | None = None,
    extra_rows: int = 0,
) -> OracleCapacity:
    """Smallest oracle able to run the block constructions for ``chunk``-row blocks.

    ``extra_rows`` reserves room beyond ``chunk + 1`` (sink calls need it).
    """
    rows = max(chunk + 1, extra_rows)
    slots = h_small * l_small
    width = packed_width(task_width(head_width), OracleCapacity(m_max=1, h_small=h_small, l_small=l_small, d_small=h_small), slots)
    if d_small is None:
        d_small = -(-width // h_small) * h_small
    return OracleCapacity(
        m_max=rows if m_max is None else m_max,
        l_small=l_small,
        h_small=h_small,
        d_small=d_small,
        mask=mask,
    )
