import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oraclesim._calls import Task, capacity_for, pack_instances
from oraclesim.exceptions import ConfigurationError, ShapeError
from oraclesim.mlp import Affine, MlpSpec
from oraclesim.oracle import Oracle, OracleCapacity, Workbench
from oraclesim.reference import HeadParams, Layer, TransformerParams, attention_head, transformer_forward
from oraclesim.sim_quadratic import (
    BlockStats, denom_block, flatten_heads_layers, prefix_denoms_causal, quadratic_call_count, quadratic_round_count,
    ratio_block, recombine, simulate_full, simulate_full_causal, simulate_single_head, suffix_stats_causal,
)
from oraclesim.tensor import Causal, Dense

from helpers import rel_err


def head(rng, m, scale=None):
    s = 1 / np.sqrt(m) if scale is None else scale
    return HeadParams(*(rng.normal(size=(m, m)) * s for _ in range(3)))


def model(rng, n_layers, n_heads, m, mask=Dense()):
    d = m * n_heads
    layers = [
        Layer(tuple(head(rng, m) for _ in range(n_heads)), MlpSpec([Affine(np.eye(d) + 0.1 * rng.normal(size=(d, d)))]))
        for _ in range(n_layers)
    ]
    return TransformerParams(tuple(layers), d, mask)


def oracle_for(m, chunk, mask=Dense(), h_small=1, l_small=1, **kw):
    return Oracle(capacity_for(m, mask, chunk, h_small=h_small, l_small=l_small, **kw))


# ---------------------------------------------------------------- blocks


def test_denom_block_zero_scores():
    x = np.ones((4, 2))
    z = np.zeros((2, 2))
    assert np.allclose(denom_block(oracle_for(2, 4), x, x, z, z), 4.0)


def test_denom_block_single_pair():
    one = np.ones((1, 1))
    assert denom_block(oracle_for(1, 1), one, one, one, one)[0] == pytest.approx(np.e, rel=1e-12)


def test_denom_block_random(rng):
    xq, xk = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    h = head(rng, 4)
    want = [sum(np.exp((xq[i] @ h.wq) @ (xk[j] @ h.wk)) for j in range(4)) for i in range(4)]
    got = denom_block(oracle_for(4, 4), xq, xk, h.wq, h.wk)
    assert np.allclose(got, want, rtol=1e-10, atol=0)


@pytest.mark.parametrize("target", [1e-6, 1e-3, 1.0, 1e3, 1e6])
def test_denom_block_recovers_wide_range(target):
    # one query, one key, score log(target)
    x = np.array([[np.log(target)]])
    got = denom_block(oracle_for(1, 1), x, np.ones((1, 1)), np.ones((1, 1)), np.ones((1, 1)))[0]
    assert got == pytest.approx(target, rel=1e-9)


def test_denom_block_causal_oracle_rejects_cross_keys(rng):
    x = rng.normal(size=(2, 2))
    with pytest.raises(ConfigurationError):
        denom_block(oracle_for(2, 2, Causal()), x, x, np.eye(2), np.eye(2))


def test_ratio_block_uniform_and_single_key(rng):
    xq, xk = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    h = HeadParams(np.zeros((2, 2)), rng.normal(size=(2, 2)), rng.normal(size=(2, 2)))
    out = ratio_block(oracle_for(2, 3), xq, xk, h)
    assert np.allclose(out, np.repeat((xk @ h.wv).mean(0, keepdims=True), 3, 0))
    h = head(rng, 2)
    # every key equal to one row: the block behaves as a single key
    one = ratio_block(oracle_for(2, 3), xq, np.repeat(xk[:1], 3, 0), h)
    assert np.allclose(one, np.repeat(xk[:1] @ h.wv, 3, 0))
    single = ratio_block(oracle_for(2, 1), xq[:1], xk[:1], h)
    assert np.allclose(single, xk[:1] @ h.wv)


def test_cross_blocks_must_match(rng):
    with pytest.raises(ShapeError):
        ratio_block(oracle_for(2, 3), rng.normal(size=(3, 2)), rng.normal(size=(1, 2)), head(rng, 2))


def test_ratio_block_cross_reference(rng):
    xq, xk = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    h = head(rng, 3)
    s = (xq @ h.wq) @ (xk @ h.wk).T
    p = np.exp(s) / np.exp(s).sum(1, keepdims=True)
    assert np.allclose(ratio_block(oracle_for(3, 4), xq, xk, h), p @ (xk @ h.wv), atol=1e-12)


# ---------------------------------------------------------------- recombination


def test_recombine_single_block_is_identity(rng):
    r = rng.normal(size=(4, 2))
    assert np.allclose(recombine(BlockStats(rng.uniform(1, 2, size=(4, 1)), (r,), 4)), r)


def test_recombine_symmetric_blocks(rng):
    v = rng.normal(size=(4, 2))
    assert np.allclose(recombine(BlockStats(np.full((4, 2), 3.0), (v, v), 2)), v)


def test_recombine_random_equals_dense(rng):
    n, c, m = 8, 2, 3
    x = rng.normal(size=(n, m))
    h = head(rng, m)
    q, k, v = x @ h.wq, x @ h.wk, x @ h.wv
    e = np.exp(q @ k.T)
    a = np.stack([e[:, t * c:(t + 1) * c].sum(1) for t in range(n // c)], axis=1)
    r = [e[:, t * c:(t + 1) * c] @ v[t * c:(t + 1) * c] / a[:, t:t + 1] for t in range(n // c)]
    assert rel_err(recombine(BlockStats(a, r, c)), attention_head(x, h)) <= 1e-10


def test_recombine_on_oracle(rng):
    n, c, m = 6, 2, 2
    a = rng.uniform(0.5, 3, size=(n, n // c))
    r = [rng.normal(size=(n, m)) for _ in range(n // c)]
    oracle = oracle_for(m, c, extra_rows=n // c)
    got = recombine(BlockStats(a, r, c), Workbench(oracle.capacity.d_small), oracle)
    want = sum(rr * a[:, [t]] for t, rr in enumerate(r)) / a.sum(1, keepdims=True)
    assert np.allclose(got, want, atol=1e-12)
    assert len(oracle.ledger) == n


# ---------------------------------------------------------------- single head


def test_single_block_takes_two_calls(rng):
    x = rng.normal(size=(4, 2))
    h = head(rng, 2)
    oracle = oracle_for(2, 4)
    assert rel_err(simulate_single_head(oracle, x, h, 4), attention_head(x, h)) <= 1e-12
    assert len(oracle.ledger) == 2


def test_single_head_call_count(rng):
    oracle = oracle_for(2, 2)
    simulate_single_head(oracle, rng.normal(size=(8, 2)), head(rng, 2), 2)
    assert len(oracle.ledger) == 32 == quadratic_call_count(8, 2)


def test_single_head_accuracy(rng):
    x = rng.normal(size=(16, 4))
    h = head(rng, 4)
    oracle = oracle_for(4, 4)
    assert rel_err(simulate_single_head(oracle, x, h, 4), attention_head(x, h)) <= 1e-8


def test_single_head_rounds(rng):
    x, h = rng.normal(size=(8, 2)), head(rng, 2)
    plain = oracle_for(2, 2)
    simulate_single_head(plain, x, h, 2)
    pure = oracle_for(2, 2, extra_rows=4)
    y = simulate_single_head(pure, x, h, 2, pure_oracle=True)
    assert plain.ledger.rounds == quadratic_round_count(1) == 2
    assert pure.ledger.rounds == quadratic_round_count(1, True) == 3
    assert len(pure.ledger) == quadratic_call_count(8, 2, pure_oracle=True)
    assert rel_err(y, attention_head(x, h)) <= 1e-10


def test_chunk_must_fit_oracle(rng):
    with pytest.raises(ConfigurationError):
        simulate_single_head(oracle_for(2, 2), rng.normal(size=(8, 2)), head(rng, 2), 4)


# ---------------------------------------------------------------- full models


def test_flatten_single_head_matches_single_head(rng):
    x, p = rng.normal(size=(8, 2)), model(rng, 1, 1, 2)
    p = TransformerParams((Layer(p.layers[0].heads),), 2)
    a = flatten_heads_layers(oracle_for(2, 2), x, p, 2)
    b = simulate_single_head(oracle_for(2, 2), x, p.layers[0].heads[0], 2)
    assert np.allclose(a, b, atol=1e-14)


def test_flatten_identical_heads_give_identical_halves(rng):
    h = head(rng, 2)
    x = rng.normal(size=(8, 2))
    p = TransformerParams((Layer((h, h)),), 4)
    y = flatten_heads_layers(oracle_for(2, 2), np.c_[x, x], p, 2)
    assert np.allclose(y[:, :2], y[:, 2:], atol=1e-14)


def test_flatten_random_model(rng):
    x, p = rng.normal(size=(8, 4)), model(rng, 2, 2, 2)
    assert rel_err(flatten_heads_layers(oracle_for(2, 2), x, p, 2), transformer_forward(x, p)) <= 1e-8


def test_packed_counts_and_accuracy(rng):
    x, p = rng.normal(size=(8, 4)), model(rng, 2, 2, 2)
    flat = oracle_for(2, 2)
    flatten_heads_layers(flat, x, p, 2)
    unpacked = oracle_for(2, 2)
    simulate_full(unpacked, x, p, 2, pack=True)
    assert len(flat.ledger) == len(unpacked.ledger) == 128
    packed = oracle_for(2, 2, h_small=2, l_small=2)
    y = simulate_full(packed, x, p, 2)
    assert len(packed.ledger) == 32 == quadratic_call_count(8, 2, 2, 2, 4)
    assert rel_err(y, transformer_forward(x, p)) <= 1e-8


def test_pure_oracle_dense_model(rng):
    x, p = rng.normal(size=(8, 4)), model(rng, 2, 2, 2)
    oracle = oracle_for(2, 2, h_small=2, l_small=2, extra_rows=4)
    y = simulate_full(oracle, x, p, 2, pure_oracle=True)
    assert rel_err(y, transformer_forward(x, p)) <= 1e-8
    assert len(oracle.ledger) == quadratic_call_count(8, 2, 2, 2, 4, pure_oracle=True)


# ---------------------------------------------------------------- packing


def _tasks(rng, count, rows=4, m=2):
    return [Task(x=rng.normal(size=(rows, m)), head=head(rng, m)) for _ in range(count)]


@pytest.mark.parametrize("h_small,l_small,count", [(1, 1, 1), (2, 1, 2), (2, 2, 4), (2, 2, 3)])
def test_pack_instances_match_standalone(rng, h_small, l_small, count):
    tasks = _tasks(rng, count)
    cap = OracleCapacity(m_max=4, h_small=h_small, l_small=l_small, d_small=64)
    call = pack_instances(tasks, cap)
    out = Oracle(cap)(call.x, call.params)
    for t, (a, b) in zip(tasks, call.slots):
        assert np.allclose(out[:, a:b], attention_head(t.x, t.head), atol=1e-9)


def test_single_instance_packing_is_identity(rng):
    t = _tasks(rng, 1)[0]
    call = pack_instances([t], OracleCapacity(m_max=4, d_small=2))
    assert np.array_equal(call.x, t.x)
    assert call.params.L == call.params.H == 1


# ---------------------------------------------------------------- causal


def test_prefix_denoms_zero_scores():
    z = np.zeros((2, 2))
    got = prefix_denoms_causal(oracle_for(2, 5, Causal()), np.ones((5, 2)), z, z)
    assert got.tolist() == pytest.approx([1, 2, 3, 4, 5])


def test_prefix_denoms_random(rng):
    x, h = rng.normal(size=(5, 3)), head(rng, 3)
    q, k = x @ h.wq, x @ h.wk
    want = [sum(np.exp(q[i] @ k[j]) for j in range(i + 1)) for i in range(5)]
    got = prefix_denoms_causal(oracle_for(3, 5, Causal()), x, h.wq, h.wk)
    assert got[0] == pytest.approx(np.exp(q[0] @ k[0]), rel=1e-14)
    assert np.allclose(got, want, rtol=1e-10, atol=0)


def test_suffix_stats_zero_scores(rng):
    xq, xk = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
    h = HeadParams(np.zeros((2, 2)), np.zeros((2, 2)), np.eye(2))
    a2, r2 = suffix_stats_causal(oracle_for(2, 4, Causal()), xq, xk, h)
    assert a2.tolist() == pytest.approx([3, 2, 1, 0], abs=1e-12)
    assert np.allclose(r2[:3], [xk[i + 1:].mean(0) for i in range(3)])


def test_suffix_stats_random(rng):
    xq, xk = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    h = head(rng, 3)
    q, k, v = xq @ h.wq, xk @ h.wk, xk @ h.wv
    a2, r2 = suffix_stats_causal(oracle_for(3, 4, Causal()), xq, xk, h)
    for i in range(3):
        w = np.exp(q[i] @ k[i + 1:].T)
        assert a2[i] == pytest.approx(w.sum(), rel=1e-10)
        assert np.allclose(r2[i], w @ v[i + 1:] / w.sum(), atol=1e-10)
    assert a2[3] == 0.0


def test_causal_single_block(rng):
    x, p = rng.normal(size=(4, 2)), model(rng, 1, 1, 2, Causal())
    oracle = oracle_for(2, 4, Causal())
    y = simulate_full_causal(oracle, x, p, 4)
    assert rel_err(y, transformer_forward(x, p)) <= 1e-12
    assert oracle.ledger.by_tag() == {"prefix": 1, "diagonal": 1} or len(oracle.ledger) == 2


def test_causal_random_and_first_row(rng):
    x, p = rng.normal(size=(8, 2)), model(rng, 1, 1, 2, Causal())
    y = simulate_full_causal(oracle_for(2, 2, Causal()), x, p, 2)
    ref = transformer_forward(x, p)
    assert rel_err(y, ref) <= 1e-8
    first = (x[:1] @ p.layers[0].heads[0].wv) @ p.layers[0].mlp.steps[0].weight
    assert np.allclose(y[0], first[0], atol=1e-10)


def test_causal_call_count_equals_dense(rng):
    x, p = rng.normal(size=(16, 4)), model(rng, 2, 2, 2, Causal())
    oracle = oracle_for(2, 4, Causal(), h_small=2, l_small=2)
    y = simulate_full_causal(oracle, x, p, 4)
    assert len(oracle.ledger) == quadratic_call_count(16, 4, 2, 2, 4) == 32
    assert rel_err(y, transformer_forward(x, p)) <= 1e-8


def test_causal_large_scores_stay_exact(rng):
    # normalisers near 1e13 used to cost digits in ratio recovery
    x, p = rng.normal(size=(8, 2)) * 3, model(rng, 1, 1, 2, Causal())
    y = simulate_full_causal(oracle_for(2, 2, Causal()), x, p, 2)
    assert rel_err(y, transformer_forward(x, p)) <= 1e-8


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([(4, 1), (4, 2), (6, 3), (8, 4)]), st.booleans())
def test_exact_for_random_instances(seed, shape, causal):
    n, c = shape
    r = np.random.default_rng(seed)
    mask = Causal() if causal else Dense()
    x, p = r.normal(size=(n, 2)), model(r, 1, 1, 2, mask)
    sim = simulate_full_causal if causal else simulate_full
    oracle = oracle_for(2, c, mask)
    assert rel_err(sim(oracle, x, p, c), transformer_forward(x, p)) <= 1e-8
    assert len(oracle.ledger) == quadratic_call_count(n, c)
