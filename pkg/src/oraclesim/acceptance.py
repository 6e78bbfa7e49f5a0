"""The acceptance suite: nine pass/fail criteria at fixed seeds.

Shared by ``oraclesim verify`` and ``tests/test_acceptance.py``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from ._calls import Task, pack_instances, task_width
from .harness import run
from .instances import generate_instance, preset
from .oracle import CallLedger, Oracle, OracleCapacity, Workbench, audit_restriction
from .reference import HeadParams, transformer_forward
from .rng import rng_for
from .sim_linear import avg_denominator_estimate
from .sim_quadratic import quadratic_call_count, simulate_full
from .tensor import Dense, masked_row_softmax

SEEDS = (0, 1, 2, 3, 4)


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: dict = field(default_factory=dict)

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.number}. {self.name}"

    def to_dict(self) -> dict:
        return {"number": self.number, "name": self.name, "passed": self.passed, "detail": self.detail}


def _exactness(mode: str, seed: int, extra: tuple = ()) -> tuple[bool, dict]:
    ok, detail = True, {}
    for s in SEEDS:
        rep = run(preset(mode, seed=seed + s))
        keys = ("exact", "call_count", "restricted") + extra
        good = all(rep.criteria[k] for k in keys)
        ok &= good
        detail[f"seed_{seed + s}"] = {
            "max_rel_error": rep.max_rel_error,
            "calls": rep.calls_total,
            "expected_calls": rep.expected_calls,
            **{k: rep.criteria[k] for k in keys},
            **({"first_row_rel_error": rep.details["first_row_rel_error"]} if "first_row" in extra else {}),
            "seconds": rep.details.get("simulation_seconds"),
        }
    return ok, detail


def criterion_quadratic(seed: int = 0) -> CriterionResult:
    ok, detail = _exactness("quadratic", seed)
    fast = all(v["seconds"] < 1.0 for v in detail.values())
    closed = quadratic_call_count(16, 4, 2, 2, 4)
    stated_form = math.ceil(2 * (16 // 4) ** 2 * 2 * 2 / 4)
    detail["closed_form"] = closed
    return CriterionResult(1, "quadratic exactness and call count", ok and fast and closed == stated_form == 32, detail)


def criterion_causal(seed: int = 0) -> CriterionResult:
    ok, detail = _exactness("quadratic-causal", seed, ("first_row",))
    return CriterionResult(2, "causal exactness and first-row prefix property", ok, detail)


def criterion_rounds(seed: int = 0) -> CriterionResult:
    rep = run(preset("quadratic", seed=seed))
    return CriterionResult(3, "adaptivity rounds <= 3L", rep.rounds <= 3 * 2, {"rounds": rep.rounds, "limit": 6})


def criterion_average(seed: int = 0) -> CriterionResult:
    rep = run(preset("average", seed=seed))
    return CriterionResult(
        4, "average-case statistical accuracy and linear calls", rep.passed,
        {**{k: v for k, v in rep.details.items() if k != "row_fraction_within_target"}, "criteria": rep.criteria},
    )


def criterion_unbiased(seed: int = 0) -> CriterionResult:
    rng = rng_for(seed, "acceptance-unbiased")
    n, chunk, m = 4, 2, 3
    x = rng.normal(size=(n, m))
    head = HeadParams(rng.normal(size=(m, m)) / 2, rng.normal(size=(m, m)) / 2, np.eye(m))
    truth = np.exp((x @ head.wq) @ (x @ head.wk).T).sum(axis=1)
    oracle = Oracle(OracleCapacity(m_max=chunk + 1, d_small=task_width(m)))
    perms = list(itertools.permutations(range(n)))
    mean = np.mean([avg_denominator_estimate(oracle, x, head, p, chunk) for p in perms], axis=0)
    err = float(np.max(np.abs(mean - truth) / truth))
    return CriterionResult(
        5, "estimator unbiasedness by full enumeration", err <= 1e-12 and len(perms) == 24,
        {"max_rel_error": err, "permutations": len(perms), "calls": len(oracle.ledger)},
    )


def criterion_window(seed: int = 0) -> CriterionResult:
    ok, detail = True, {}
    for mode in ("window", "sink"):
        for s in SEEDS:
            rep = run(preset(mode, seed=seed + s))
            ok &= rep.passed
            detail[f"{mode}_seed_{seed + s}"] = {
                "max_rel_error": rep.max_rel_error,
                "calls": rep.calls_total,
                "calls_per_head": rep.details["calls_per_head"],
                "bound_per_head": rep.details["window_bound_per_head"],
                "window_growth_ratio": rep.details["window_growth_ratio"],
                "total_growth_ratio": rep.details["growth_ratio"],
                "criteria": rep.criteria,
            }
    return CriterionResult(6, "window and sink exactness, call bound, linear growth", ok, detail)


def criterion_reverse(seed: int = 0) -> CriterionResult:
    rep = run(preset("reverse", seed=seed))
    return CriterionResult(
        7, "reverse simulation error, audit counts and tag invariants", rep.passed,
        {**rep.details, "calls_by_tag": rep.calls_by_tag, "criteria": rep.criteria},
    )


class UnrestrictedWorkbench(Workbench):
    """Test double: a host that can evaluate attention directly."""

    def softmax_attention(self, q, k, v):
        self._note("softmax_attention")
        return masked_row_softmax(q @ k.T) @ v

    def weighted_average(self, ratios, weights, signs=None, label="recombine"):
        return super().weighted_average(ratios, weights, signs, label)


def _shortcut(bench: UnrestrictedWorkbench, x, params, oracle: Oracle):
    """A 'simulation' that ignores the oracle and attends on the host."""
    oracle.begin_round()
    h = x
    for layer in params.layers:
        outs = []
        m = params.m
        for k, head in enumerate(layer.heads):
            xs = bench.select(h, cols=slice(k * m, (k + 1) * m))
            outs.append(bench.softmax_attention(xs @ head.wq, xs @ head.wk, xs @ head.wv))
        h = bench.apply_mlp(layer.mlp, bench.concat(outs, "cols"))
    return h


def criterion_restriction(seed: int = 0) -> CriterionResult:
    cfg = preset("quadratic", seed=seed)
    inst = generate_instance(cfg)
    cap = cfg.capacity()
    expected = quadratic_call_count(cfg.n, cfg.chunk, cfg.h, cfg.l, cap.slots)

    honest_oracle, honest_bench = Oracle(cap), Workbench(cap.d_small)
    simulate_full(honest_oracle, inst.x, inst.params, cfg.chunk, honest_bench)
    honest = audit_restriction(honest_bench, honest_oracle.ledger, expected)

    cheat_oracle, cheat_bench = Oracle(cap), UnrestrictedWorkbench(cap.d_small)
    y = _shortcut(cheat_bench, inst.x, inst.params, cheat_oracle)
    cheat = audit_restriction(cheat_bench, cheat_oracle.ledger, expected)
    right = bool(np.allclose(y, transformer_forward(inst.x, inst.params)))

    passed = not honest and len(cheat) > 0
    return CriterionResult(
        8, "restriction audit detects an unrestricted workbench", passed,
        {"honest_findings": honest, "double_findings": cheat, "double_output_correct": right},
    )


def _random_task(rng, m: int, rows: int) -> Task:
    return Task(
        x=rng.normal(size=(rows, m)),
        head=HeadParams(*(rng.normal(size=(m, m)) / math.sqrt(m) for _ in range(3))),
        tag="pack-test",
    )


def criterion_packing(seed: int = 0) -> CriterionResult:
    rng = rng_for(seed, "acceptance-packing")
    m, rows = 3, 5
    tasks = [_random_task(rng, m, rows) for _ in range(4)]
    cap = OracleCapacity(m_max=rows, h_small=2, l_small=2, d_small=2 * 2 * 2 * m)
    ledger = CallLedger()
    oracle = Oracle(cap, ledger)

    def run_packed(ts):
        call = pack_instances(ts, cap)
        out = oracle(call.x, call.params, tag="pack", instances=len(ts))
        return [out[:, a:b] for a, b in call.slots]

    packed = run_packed(tasks)
    alone = [transformer_forward(t.x, t.params(Dense())) for t in tasks]
    err = max(float(np.max(np.abs(p - a))) for p, a in zip(packed, alone))
    bumped = list(tasks)
    bumped[1] = Task(x=tasks[1].x + rng.normal(size=tasks[1].x.shape), head=tasks[1].head)
    again = run_packed(bumped)
    isolated = all(np.array_equal(again[k], packed[k]) for k in (0, 2, 3))
    changed = not np.array_equal(again[1], packed[1])
    return CriterionResult(
        9, "packing isolation", err <= 1e-9 and isolated and changed and len(ledger) == 2,
        {"max_abs_error": err, "others_bit_identical": isolated, "perturbed_slot_changed": changed},
    )


CRITERIA = (
    criterion_quadratic,
    criterion_causal,
    criterion_rounds,
    criterion_average,
    criterion_unbiased,
    criterion_window,
    criterion_reverse,
    criterion_restriction,
    criterion_packing,
)


def run_all(seed: int = 0) -> list[CriterionResult]:
    return [c(seed) for c in CRITERIA]
