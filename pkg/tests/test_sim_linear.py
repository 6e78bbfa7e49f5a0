import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oraclesim._calls import capacity_for
from oraclesim.exceptions import ConfigurationError
from oraclesim.instances import generate_instance, preset
from oraclesim.mlp import Affine, MlpSpec
from oraclesim.oracle import Oracle
from oraclesim.reference import HeadParams, Layer, TransformerParams, transformer_forward
from oraclesim.sim_linear import (
    BoundednessProfile, avg_call_count, avg_denominator_estimate, avg_simulate, check_boundedness, hoeffding_chunk,
    sink_simulate, window_call_count, window_partition, window_simulate,
)
from oraclesim.tensor import Causal, Dense, Sink, Window

from helpers import rel_err


def head(rng, m):
    return HeadParams(*(rng.normal(size=(m, m)) / np.sqrt(m) for _ in range(3)))


def model(rng, mask, n_layers=1, n_heads=1, m=2, mlp=True):
    d = m * n_heads
    layers = []
    for _ in range(n_layers):
        spec = MlpSpec([Affine(np.eye(d) + 0.1 * rng.normal(size=(d, d)))]) if mlp else MlpSpec()
        layers.append(Layer(tuple(head(rng, m) for _ in range(n_heads)), spec))
    return TransformerParams(tuple(layers), d, mask)


def causal_oracle(m, chunk, extra=0, slots=(1, 1)):
    return Oracle(capacity_for(m, Causal(), chunk, h_small=slots[0], l_small=slots[1], extra_rows=extra))


# ---------------------------------------------------------------- boundedness


def test_zero_query_weights_are_bounded(rng):
    x = rng.normal(size=(6, 2))
    h = HeadParams(np.zeros((2, 2)), rng.normal(size=(2, 2)), np.eye(2))
    rep = check_boundedness(np.abs(x) + 1, h, BoundednessProfile(1.0, 0.5))
    assert rep.c_needed == 1.0 and rep.passed


def test_aligned_values_reach_full_ratio(rng):
    x = np.tile([[1.0, 2.0]], (5, 1))
    rep = check_boundedness(x, HeadParams(np.zeros((2, 2)), np.zeros((2, 2)), np.eye(2)), BoundednessProfile(1.0, 1.0))
    assert rep.d_achieved == pytest.approx(1.0) and rep.passed


def test_generated_average_instance_is_bounded():
    inst = generate_instance(preset("average", n=64, chunk=16))
    assert inst.boundedness["passed"]
    assert inst.boundedness["c_needed"] <= math.exp(0.5) + 1e-12


def test_profile_validation():
    with pytest.raises(ConfigurationError):
        BoundednessProfile(0.5, 0.5)
    with pytest.raises(ConfigurationError):
        BoundednessProfile(2.0, 0.0)


def test_hoeffding_chunk_formula():
    assert hoeffding_chunk(1.0, 10, 1.0) == math.ceil(8 * math.log(400))


# ---------------------------------------------------------------- average case


def _dense_oracle(m, chunk):
    return Oracle(capacity_for(m, Dense(), chunk))


def test_denominator_full_sample_is_exact(rng):
    x, h = rng.normal(size=(4, 2)), head(rng, 2)
    truth = np.exp((x @ h.wq) @ (x @ h.wk).T).sum(1)
    got = avg_denominator_estimate(_dense_oracle(2, 4), x, h, np.arange(4), 4)
    assert np.allclose(got, truth, rtol=1e-12)


def test_denominator_zero_scores(rng):
    x = rng.normal(size=(6, 2))
    z = HeadParams(np.zeros((2, 2)), np.zeros((2, 2)), np.eye(2))
    for perm in (np.arange(6), rng.permutation(6)):
        assert np.allclose(avg_denominator_estimate(_dense_oracle(2, 2), x, z, perm, 2), 6.0)


def test_denominator_unbiased_over_all_permutations():
    # every query sees key weights (1, 2, 3, 4)
    x = np.c_[np.ones(4), np.log(np.arange(1, 5))]
    h = HeadParams(np.array([[1.0, 0], [0, 0]]), np.array([[0.0, 0], [1, 0]]), np.eye(2))
    oracle = _dense_oracle(2, 2)
    perms = list(itertools.permutations(range(4)))
    mean = np.mean([avg_denominator_estimate(oracle, x, h, p, 2) for p in perms], axis=0)
    assert len(perms) == 24
    assert np.allclose(mean, 10.0, rtol=1e-12)


def test_denominator_rejects_bad_permutation(rng):
    with pytest.raises(ConfigurationError):
        avg_denominator_estimate(_dense_oracle(2, 2), rng.normal(size=(4, 2)), head(rng, 2), [0, 0, 1, 2], 2)


def test_avg_full_chunk_is_exact(rng):
    x, p = rng.normal(size=(6, 2)), model(rng, Dense())
    est = avg_simulate(_dense_oracle(2, 6), x, p, 6, seed=3)
    assert rel_err(est.output, transformer_forward(x, p)) <= 1e-12


def test_avg_uniform_instance_is_exact(rng):
    v = np.array([[0.3, -1.2]])
    x = np.repeat(v, 8, axis=0)
    p = TransformerParams((Layer((HeadParams(np.zeros((2, 2)), np.zeros((2, 2)), np.eye(2)),)),), 2)
    for seed in range(3):
        est = avg_simulate(_dense_oracle(2, 2), x, p, 2, seed=seed)
        assert np.allclose(est.output, np.repeat(v, 8, 0))


def test_avg_calls_linear_and_reproducible(rng):
    x, p = rng.normal(size=(16, 4)), model(rng, Dense(), n_layers=2, n_heads=2)
    o1, o2 = _dense_oracle(2, 4), _dense_oracle(2, 4)
    a = avg_simulate(o1, x, p, 4, seed=11)
    b = avg_simulate(o2, x, p, 4, seed=11)
    assert np.array_equal(a.output, b.output)
    assert len(o1.ledger) == avg_call_count(16, 4, 2, 2) == 2 * (16 // 4) * 2 * 2
    assert o1.ledger.rounds == 4
    doc = json.loads(a.to_json(transformer_forward(x, p)))
    assert len(doc["row_relative_errors"]) == 16
    assert np.asarray(doc["denom_estimates"]).shape == (2, 2, 16)


def test_avg_needs_dense(rng):
    with pytest.raises(ConfigurationError):
        avg_simulate(causal_oracle(2, 2), rng.normal(size=(4, 2)), model(rng, Causal()), 2)


# ---------------------------------------------------------------- window and sink


def test_window_partition_covers_every_query():
    parts = window_partition(32, 8, 4)
    queries = [i for _, qs, stop in parts for i in range(qs, stop)]
    assert queries == list(range(32))
    assert all(stop - s0 <= 8 for s0, _, stop in parts)
    assert parts[0] == (0, 0, 4) and parts[1] == (0, 4, 8)


def test_window_r1_returns_own_value_row(rng):
    x = rng.normal(size=(6, 2))
    p = model(rng, Window(1), mlp=False)
    y = window_simulate(causal_oracle(2, 2), x, p, 2)
    assert np.allclose(y, x @ p.layers[0].heads[0].wv, atol=1e-12)


def test_wide_window_equals_causal(rng):
    x = rng.normal(size=(4, 2))
    p = model(rng, Window(4))
    causal = TransformerParams(p.layers, p.d, Causal())
    y = window_simulate(causal_oracle(2, 5), x, p, 5)
    assert rel_err(y, transformer_forward(x, causal)) <= 1e-10


def test_window_random_matches_reference(rng):
    x, p = rng.normal(size=(32, 4)), model(rng, Window(4), n_heads=2)
    oracle = causal_oracle(2, 8)
    y = window_simulate(oracle, x, p, 8)
    assert rel_err(y, transformer_forward(x, p)) <= 1e-8
    assert len(oracle.ledger) == window_call_count(32, 8, 4, heads=2)


def test_window_calls_double_with_n():
    for r, chunk in ((1, 2), (4, 8), (3, 5)):
        q = chunk - r
        base = window_call_count(8 * q, chunk, r)
        assert window_call_count(16 * q, chunk, r) == 2 * base
        assert base <= 6 * math.ceil(8 * q / q)


def test_sink_covering_everything_equals_causal(rng):
    x = rng.normal(size=(6, 2))
    p = model(rng, Sink(3, 3))
    causal = TransformerParams(p.layers, p.d, Causal())
    y = sink_simulate(causal_oracle(2, 4, extra=5), x, p, 4)
    assert rel_err(y, transformer_forward(x, causal)) <= 1e-10


def test_sink_random_and_leading_rows(rng):
    s, r, chunk = 3, 4, 8
    x, p = rng.normal(size=(32, 4)), model(rng, Sink(s, r), n_heads=2)
    oracle = causal_oracle(2, chunk, extra=s + chunk - r + 1)
    y = sink_simulate(oracle, x, p, chunk)
    assert rel_err(y, transformer_forward(x, p)) <= 1e-8
    causal = transformer_forward(x, TransformerParams(p.layers, p.d, Causal()))
    assert rel_err(y[: s + r], causal[: s + r]) <= 1e-8
    assert len(oracle.ledger) == window_call_count(32, chunk, r, s, heads=2)


def test_sink_capacity_is_checked(rng):
    p = model(rng, Sink(6, 4))  # 6 + 4 + 1 rows against m_max = 9
    with pytest.raises(ConfigurationError):
        sink_simulate(causal_oracle(2, 8), rng.normal(size=(8, 2)), p, 8)


def test_window_mask_required(rng):
    with pytest.raises(ConfigurationError):
        window_simulate(causal_oracle(2, 2), rng.normal(size=(4, 2)), model(rng, Causal()), 2)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 3), st.integers(1, 3), st.integers(0, 3), st.integers(2, 4))
def test_window_and_sink_exact(seed, r, extra_q, s, blocks):
    chunk = r + extra_q
    n = extra_q * blocks
    rr = np.random.default_rng(seed)
    mask = Sink(s, r) if s else Window(r)
    x, p = rr.normal(size=(n, 2)), model(rr, mask)
    oracle = causal_oracle(2, chunk, extra=s + extra_q + 1 if s else 0)
    sim = sink_simulate if s else window_simulate
    y = sim(oracle, x, p, chunk)
    assert rel_err(y, transformer_forward(x, p)) <= 1e-8
    assert len(oracle.ledger) == window_call_count(n, chunk, r, s)
