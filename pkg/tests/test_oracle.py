import json

import numpy as np
import pytest

from oraclesim._calls import capacity_for
from oraclesim.exceptions import RestrictionError
from oraclesim.mlp import Affine, MlpSpec
from oraclesim.oracle import (
    ALLOWED_WORKBENCH_OPS, CallLedger, Oracle, OracleCapacity, Workbench, audit_restriction, sum_via_oracle,
)
from oraclesim.reference import HeadParams, Layer, TransformerParams, attention_head
from oraclesim.sim_quadratic import ratio_block
from oraclesim.tensor import Causal, Dense


def _params(rng, m, mlp=None):
    head = HeadParams(*(rng.normal(size=(m, m)) for _ in range(3)))
    return head, TransformerParams((Layer((head,), mlp or MlpSpec.identity()),), m)


def test_single_token_gives_mlp_image_of_value_row(rng):
    w = rng.normal(size=(2, 2))
    head, p = _params(rng, 2, MlpSpec([Affine(w)]))
    x = rng.normal(size=(1, 2))
    out = Oracle(OracleCapacity(m_max=4, d_small=2))(x, p)
    assert np.allclose(out, (x @ head.wv) @ w)


def test_length_boundary(rng):
    _, p = _params(rng, 2)
    oracle = Oracle(OracleCapacity(m_max=4, d_small=2))
    oracle(rng.normal(size=(4, 2)), p)
    with pytest.raises(RestrictionError):
        oracle(rng.normal(size=(5, 2)), p)
    assert len(oracle.ledger) == 1


def test_capacity_checks(rng):
    _, p = _params(rng, 4)
    with pytest.raises(RestrictionError):
        Oracle(OracleCapacity(m_max=4, d_small=2))(np.ones((2, 4)), p)
    with pytest.raises(RestrictionError):
        Oracle(OracleCapacity(m_max=4, d_small=4, mask=Causal()))(np.ones((2, 4)), p)


def test_rounds():
    led = CallLedger()
    assert led.rounds == 0
    led.begin_round()
    led.begin_round()
    assert led.rounds == 2


def test_ledger_json_round_trip():
    led = CallLedger()
    led.begin_round()
    led.record("ratio", 4, 2)
    led.record("denominator", 5)
    back = CallLedger.from_dict(json.loads(led.to_json()))
    assert back.to_dict() == led.to_dict()
    assert led.by_tag() == {"denominator": 1, "ratio": 1}


@pytest.mark.parametrize("rows", [[[1.0, 2.0, 3.0]], [[1.0, 0.0], [0.0, 1.0]]])
def test_sum_via_oracle_small(rows):
    oracle = Oracle(OracleCapacity(m_max=4, d_small=8))
    assert np.allclose(sum_via_oracle(oracle, rows), np.sum(rows, axis=0, keepdims=True))


def test_sum_via_oracle_random(rng):
    rows = rng.normal(size=(5, 3))
    for mask in (None, Causal()):
        cap = OracleCapacity(m_max=5, d_small=4, **({"mask": mask} if mask else {}))
        got = sum_via_oracle(Oracle(cap), rows)
        assert np.allclose(got, rows.sum(0, keepdims=True), rtol=0, atol=1e-10)


def test_workbench_has_no_attention_primitive():
    bench = Workbench(4)
    for name in ("exp", "softmax", "softmax_attention", "matmul"):
        assert not hasattr(bench, name)
    assert audit_restriction(bench) == []
    assert set(ALLOWED_WORKBENCH_OPS) >= {"select", "weighted_average"}


def test_audit_catches_patched_instance_and_extra_ops():
    bench = Workbench(4)
    bench.apply_mlp = lambda spec, x, label="": x
    assert any("callable attribute" in p for p in audit_restriction(bench))

    class Leaky(Workbench):
        def exp(self, x):
            return np.exp(x)

    assert any("unrestricted" in p for p in audit_restriction(Leaky(4)))


def test_audit_checks_call_count():
    led = CallLedger()
    led.record("x", 1)
    assert audit_restriction(Workbench(2), led, 2)
    assert not audit_restriction(Workbench(2), led, 1)


def test_weighted_average_signs_and_zero_weights():
    bench = Workbench(2)
    r1, r2 = np.array([[1.0, 1.0]]), np.array([[3.0, 3.0]])
    out = bench.weighted_average([r1, r2], [np.array([3.0]), np.array([1.0])], signs=[1, -1])
    # (3*1 - 1*3) / (3 - 1)
    assert np.allclose(out, [[0.0, 0.0]])
    junk = np.array([[1e300, -1e300]])
    assert np.allclose(bench.weighted_average([r1, junk], [np.array([2.0]), np.array([0.0])]), r1)


def test_oracle_block_equals_reference_on_block(rng):
    m, chunk = 3, 4
    head = HeadParams(*(rng.normal(size=(m, m)) for _ in range(3)))
    x = rng.normal(size=(chunk, m))
    oracle = Oracle(capacity_for(m, Dense(), chunk))
    assert np.allclose(ratio_block(oracle, x, None, head), attention_head(x, head), atol=1e-12)
