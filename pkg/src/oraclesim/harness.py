"""Run a configured simulation and judge it against the reference and the closed forms.

Every report compares the simulation's output with the reference forward
pass row by row and compares the ledger with call counts computed from the
algorithm's structure (never from the ledger itself).
"""
from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .instances import Instance, RunConfig, generate_instance
from .mlp import mlp_apply
from .oracle import CallLedger, Oracle, Workbench, audit_restriction
from .reference import attention_head, head_slices, transformer_forward
from .reverse import ReverseConfig, make_tags, reverse_simulate
from .rng import rng_for
from .sim_linear import avg_call_count, avg_simulate, sink_simulate, window_call_count, window_simulate
from .sim_quadratic import quadratic_call_count, quadratic_round_count, simulate_full, simulate_full_causal

OUTPUT_ENV = "ORACLESIM_OUTPUT_DIR"
EXACT_TOL = 1e-8
PREFIX_TOL = 1e-10


@dataclass
class SimulationReport:
    mode: str
    config: dict
    max_rel_error: float
    mean_rel_error: float
    calls_total: int
    calls_by_tag: dict
    expected_calls: int | dict
    rounds: int
    expected_rounds: int | None
    criteria: dict
    details: dict = field(default_factory=dict)
    wall_time: float = 0.0
    row_errors: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(self.criteria.values())

    def to_dict(self, include_time: bool = True) -> dict:
        out = {
            "mode": self.mode,
            "passed": self.passed,
            "criteria": dict(self.criteria),
            "max_rel_error": self.max_rel_error,
            "mean_rel_error": self.mean_rel_error,
            "calls_total": self.calls_total,
            "calls_by_tag": dict(self.calls_by_tag),
            "expected_calls": self.expected_calls,
            "rounds": self.rounds,
            "expected_rounds": self.expected_rounds,
            "details": {k: v for k, v in self.details.items() if not k.endswith("seconds")},
            "config": self.config,
        }
        if include_time:
            out["wall_time"] = self.wall_time
            out["timings"] = {k: v for k, v in self.details.items() if k.endswith("seconds")}
        return out


def row_errors(y, ref) -> tuple[np.ndarray, np.ndarray]:
    """Per-row (relative, absolute) Euclidean errors."""
    diff = np.linalg.norm(np.asarray(y) - np.asarray(ref), axis=1)
    norm = np.linalg.norm(ref, axis=1)
    rel = np.divide(diff, norm, out=np.where(diff == 0, 0.0, np.inf), where=norm > 0)
    return rel, diff


def _rows(rel, ab, trial=0) -> list[dict]:
    return [{"trial": trial, "row": i, "rel_error": float(r), "abs_error": float(a)} for i, (r, a) in enumerate(zip(rel, ab))]


def first_row_image(inst: Instance) -> np.ndarray:
    """Causal first token: it sees only itself, so each head returns its own value row."""
    p = inst.params
    h = mlp_apply(p.input_mlp, inst.x[:1])
    for layer in p.layers:
        parts = [h[:, sl] @ head.wv for sl, head in zip(head_slices(p.d, p.H), layer.heads)]
        h = mlp_apply(layer.mlp, np.concatenate(parts, axis=1))
    return h[0]


def _quadratic(cfg: RunConfig) -> SimulationReport:
    inst = generate_instance(cfg)
    cap = cfg.capacity()
    oracle = Oracle(cap)
    bench = Workbench(cap.d_small)
    causal = cfg.mode == "quadratic-causal"
    sim = simulate_full_causal if causal else simulate_full
    t0 = time.perf_counter()
    y = sim(oracle, inst.x, inst.params, cfg.chunk, bench, pure_oracle=cfg.pure_oracle_recombination)
    elapsed = time.perf_counter() - t0
    ref = transformer_forward(inst.x, inst.params)
    rel, ab = row_errors(y, ref)
    expected = quadratic_call_count(cfg.n, cfg.chunk, cfg.h, cfg.l, cap.slots, True, cfg.pure_oracle_recombination)
    exp_rounds = quadratic_round_count(cfg.l, cfg.pure_oracle_recombination)
    ledger = oracle.ledger
    criteria = {
        "exact": bool(rel.max() <= EXACT_TOL),
        "call_count": len(ledger) == expected,
        "rounds": ledger.rounds <= 3 * cfg.l,
        "restricted": not audit_restriction(bench, ledger, expected),
    }
    details = {"simulation_seconds": elapsed, "slots": cap.slots, "capacity": _cap_dict(cap)}
    if causal:
        img = first_row_image(inst)
        err = float(np.linalg.norm(y[0] - img) / max(np.linalg.norm(img), 1e-300))
        criteria["first_row"] = err <= PREFIX_TOL
        details["first_row_rel_error"] = err
    return SimulationReport(
        cfg.mode, cfg.to_dict(), float(rel.max()), float(rel.mean()), len(ledger), ledger.by_tag(),
        expected, ledger.rounds, exp_rounds, criteria, details, row_errors=_rows(rel, ab),
    )


def _cap_dict(cap) -> dict:
    return {"m_max": cap.m_max, "l_small": cap.l_small, "h_small": cap.h_small, "d_small": cap.d_small, "mask": repr(cap.mask)}


def _average(cfg: RunConfig) -> SimulationReport:
    cap = cfg.capacity()
    expected = avg_call_count(cfg.n, cfg.chunk, cfg.h, cfg.l, cap.slots)
    per_step = (cfg.n // cfg.chunk) * cfg.h * cfg.l
    trial_rates, rows, all_rel = [], [], []
    calls_ok, steps_ok, bounded_ok = True, True, True
    tags: dict = {}
    rounds = calls = 0
    t0 = time.perf_counter()
    for trial in range(cfg.trials):
        inst = generate_instance(cfg, trial)
        bounded_ok &= bool(inst.boundedness["passed"])
        oracle = Oracle(cap)
        bench = Workbench(cap.d_small)
        seed = int(rng_for(cfg.seed, "trial-seed", trial).integers(2 ** 31))
        est = avg_simulate(oracle, inst.x, inst.params, cfg.chunk, seed, bench, cfg.epsilon_target)
        rel, ab = row_errors(est.output, transformer_forward(inst.x, inst.params))
        trial_rates.append(float(np.mean(rel <= cfg.epsilon_target)))
        all_rel.append(rel)
        rows.extend(_rows(rel, ab, trial))
        led = oracle.ledger
        calls_ok &= len(led) == expected and not audit_restriction(bench, led, expected)
        if cap.slots == 1:
            steps_ok &= led.count("denominator") == per_step and led.count("ratio") == per_step
        tags = led.by_tag()
        rounds = led.rounds
        calls = len(led)
    elapsed = time.perf_counter() - t0
    rel_all = np.concatenate(all_rel)
    passing = [r >= 0.9 for r in trial_rates]
    pass_rate = float(np.mean(passing))
    criteria = {
        "pass_rate": pass_rate >= 0.9,
        "call_count": bool(calls_ok),
        "linear_steps": bool(steps_ok),
        "bounded_instances": bool(bounded_ok),
        "runtime": elapsed < 30.0,
    }
    details = {
        "pass_rate": pass_rate,
        "epsilon_target": cfg.epsilon_target,
        "row_fraction_within_target": trial_rates,
        "calls_per_step": per_step,
        "seconds": elapsed,
        "note": (
            "statistical acceptance: a trial passes when at least 90% of rows are within epsilon; "
            "this substitutes for the probability-0.9 guarantee, whose sample-size constants are not met here"
        ),
    }
    return SimulationReport(
        cfg.mode, cfg.to_dict(), float(rel_all.max()), float(rel_all.mean()), calls, tags,
        expected, rounds, 2 * cfg.l, criteria, details, row_errors=rows,
    )


def _window_once(cfg: RunConfig):
    inst = generate_instance(cfg)
    cap = cfg.capacity()
    oracle = Oracle(cap)
    bench = Workbench(cap.d_small)
    sim = sink_simulate if cfg.mode == "sink" else window_simulate
    y = sim(oracle, inst.x, inst.params, cfg.chunk, bench)
    s = cfg.sink_s if cfg.mode == "sink" else 0
    expected = window_call_count(cfg.n, cfg.chunk, cfg.window_r, s, cfg.h, cfg.l, cap.slots)
    return inst, oracle, bench, y, expected


def _window(cfg: RunConfig) -> SimulationReport:
    inst, oracle, bench, y, expected = _window_once(cfg)
    ref = transformer_forward(inst.x, inst.params)
    rel, ab = row_errors(y, ref)
    led = oracle.ledger
    q = cfg.chunk - cfg.window_r
    per_head = len(led) / (cfg.h * cfg.l)
    bound = 6 * math.ceil(cfg.n / q)
    surcharge = led.count("sink") / (cfg.h * cfg.l)
    _, big, _, _, big_expected = _window_once(replace(cfg, n=2 * cfg.n))
    ratio = len(big.ledger) / len(led)
    # the sink surcharge is affine in N (leading queries never reach past their window),
    # so exact doubling is asserted on the window calls and the total is reported as is
    window_ratio = (len(big.ledger) - big.ledger.count("sink")) / (len(led) - led.count("sink"))
    criteria = {
        "exact": bool(rel.max() <= EXACT_TOL),
        "call_count": len(led) == expected,
        "call_bound": per_head <= bound + surcharge,
        "window_bound": (per_head - surcharge) <= bound,
        "linear_growth": window_ratio == 2.0 and len(big.ledger) == big_expected,
        "restricted": not audit_restriction(bench, led, expected),
    }
    details = {
        "calls_per_head": per_head,
        "window_bound_per_head": bound,
        "sink_calls_per_head": surcharge,
        "doubled_n_calls": len(big.ledger),
        "growth_ratio": ratio,
        "window_growth_ratio": window_ratio,
    }
    return SimulationReport(
        cfg.mode, cfg.to_dict(), float(rel.max()), float(rel.mean()), len(led), led.by_tag(),
        expected, led.rounds, cfg.l, criteria, details, row_errors=_rows(rel, ab),
    )


def _reverse(cfg: RunConfig) -> SimulationReport:
    inst = generate_instance(cfg)
    ledger = CallLedger()
    rcfg = ReverseConfig(cfg.c_bound, cfg.target_err)
    m_len = cfg.n // cfg.instances
    resolved = rcfg.resolve(cfg.n, m_len, cfg.instances)
    outs = reverse_simulate(inst.parts, rcfg, ledger)
    rel_l, ab_l = [], []
    for (xi, head), yi in zip(inst.parts, outs):
        r, a = row_errors(yi, attention_head(xi, head))
        rel_l.append(r)
        ab_l.append(a)
    rel, ab = np.concatenate(rel_l), np.concatenate(ab_l)
    tags_ok = all(not make_tags(c, resolved.b_scale).violations() for c in range(1, 71))
    expected = {"large-call": 1, "small-matmul": 3 * cfg.instances}
    criteria = {
        "abs_error": bool(ab.max() <= cfg.target_err),
        "large_calls": ledger.count("large-call") == 1,
        "small_matmuls": ledger.count("small-matmul") == 3 * cfg.instances,
        "tag_invariants": tags_ok,
    }
    details = {
        "b_scale": resolved.b_scale,
        "tag_width": resolved.r,
        "error_bound": resolved.bound(cfg.n, m_len),
        "max_abs_error": float(ab.max()),
    }
    return SimulationReport(
        cfg.mode, cfg.to_dict(), float(rel.max()), float(rel.mean()), len(ledger), ledger.by_tag(),
        expected, ledger.rounds, None, criteria, details, row_errors=_rows(rel, ab),
    )


_RUNNERS = {
    "quadratic": _quadratic,
    "quadratic-causal": _quadratic,
    "average": _average,
    "window": _window,
    "sink": _window,
    "reverse": _reverse,
}


def run(cfg: RunConfig) -> SimulationReport:
    """Execute one mode and return its report (files are written by :func:`write_outputs`)."""
    cfg.validate()
    t0 = time.perf_counter()
    report = _RUNNERS[cfg.mode](cfg)
    report.wall_time = time.perf_counter() - t0
    return report


def output_dir(path: str | None = None) -> Path:
    return Path(path or os.environ.get(OUTPUT_ENV) or "oraclesim-out")


def write_outputs(reports: list[SimulationReport], path: str | None = None) -> list[Path]:
    """Write ``<mode>.json`` and ``<mode>_errors.csv`` per report into the output directory."""
    out = output_dir(path)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for rep in reports:
        js = out / f"{rep.mode}.json"
        js.write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        cs = out / f"{rep.mode}_errors.csv"
        with cs.open("w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=["mode", "trial", "row", "rel_error", "abs_error"])
            w.writeheader()
            for row in rep.row_errors:
                w.writerow({"mode": rep.mode, **row})
        written += [js, cs]
    return written
