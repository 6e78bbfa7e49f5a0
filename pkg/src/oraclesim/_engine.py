"""Round-synchronous execution of per-head plans across a whole model."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ._calls import Job, run_jobs
from .exceptions import ConfigurationError
from .oracle import Oracle, Workbench
from .reference import HeadParams, TransformerParams, head_slices


@dataclass
class HeadPlan:
    """Oracle work for one head: ``rounds`` of mutually independent jobs, then ``combine``.

    ``combine`` receives the extracted answers round by round. When
    ``oracle_combine`` is set, combining issues its own oracle calls and gets
    a round of its own.
    """

    rounds: list
    combine: Callable[[list], np.ndarray]
    oracle_combine: bool = False


def run_plans(oracle: Oracle, bench: Workbench, plans: Sequence[HeadPlan], pack: bool = True) -> list[np.ndarray]:
    depth = max((len(p.rounds) for p in plans), default=0)
    answers: list[list] = [[] for _ in plans]
    for r in range(depth):
        jobs: list[Job] = []
        owner: list[int] = []
        for k, p in enumerate(plans):
            if r < len(p.rounds):
                jobs.extend(p.rounds[r])
                owner.extend([k] * len(p.rounds[r]))
        if not jobs:
            continue
        oracle.begin_round()
        outs = run_jobs(oracle, bench, jobs, pack)
        for k in range(len(plans)):
            if r < len(plans[k].rounds):
                answers[k].append([o for o, w in zip(outs, owner) if w == k])
    if any(p.oracle_combine for p in plans):
        oracle.begin_round()
    return [p.combine(a) for p, a in zip(plans, answers)]


PlanFactory = Callable[[np.ndarray, HeadParams, int, int], HeadPlan]


def run_model(oracle: Oracle, bench: Workbench, x, params: TransformerParams, plan_for: PlanFactory, pack: bool = True) -> np.ndarray:
    """Input MLP, then per layer: all heads' plans in lockstep, concatenation, layer MLP."""
    h = bench.apply_mlp(params.input_mlp, x, "input_mlp")
    slices = head_slices(params.d, params.H)
    for li, layer in enumerate(params.layers):
        parts = [bench.select(h, cols=sl) for sl in slices]
        plans = [plan_for(parts[k], layer.heads[k], li, k) for k in range(params.H)]
        outs = run_plans(oracle, bench, plans, pack)
        h = bench.apply_mlp(layer.mlp, bench.concat(outs, "cols"), "layer_mlp")
    return h


def check_chunk(n: int, chunk: int | None, m_max: int, headroom: int = 1) -> int:
    """Resolve the chunk size (default ``m_max - headroom``) and validate it against ``n``."""
    if chunk is None:
        chunk = m_max - headroom
    chunk = int(chunk)
    if chunk < 1:
        raise ConfigurationError(f"chunk must be >= 1, got {chunk}")
    if chunk > m_max - headroom:
        raise ConfigurationError(
            f"chunk={chunk} leaves no room for the synthetic token: need chunk <= m_max - {headroom} = {m_max - headroom}"
        )
    if n % chunk:
        raise ConfigurationError(f"sequence length N={n} is not divisible by chunk={chunk}")
    return chunk


def default_bench(oracle: Oracle, bench: Workbench | None) -> Workbench:
    return bench if bench is not None else Workbench(oracle.capacity.d_small)
