import json

import numpy as np
import pytest

from oraclesim.exceptions import ConfigurationError
from oraclesim.instances import MODES, RunConfig, generate_instance, instance_to_dict, preset


@pytest.mark.parametrize("mode", MODES)
def test_same_seed_same_instance(mode):
    a = generate_instance(preset(mode, seed=5))
    b = generate_instance(preset(mode, seed=5))
    assert np.array_equal(a.x, b.x)
    assert json.dumps(instance_to_dict(a)) == json.dumps(instance_to_dict(b))
    c = generate_instance(preset(mode, seed=6))
    assert not np.array_equal(a.x, c.x)


def test_head_dims_follow_d_over_h():
    inst = generate_instance(preset("quadratic", n=8, d=4, h=2))
    assert all(h.wq.shape == (2, 2) for layer in inst.params.layers for h in layer.heads)


@pytest.mark.parametrize(
    "overrides,needle",
    [
        (dict(n=15), "divisible by chunk"),
        (dict(d=5), "divisible by h"),
        (dict(chunk=0), "chunk must be >= 1"),
        (dict(m_cap=4), "m_cap - 1"),
    ],
)
def test_validation_names_constraint(overrides, needle):
    with pytest.raises(ConfigurationError, match=needle):
        preset("quadratic", **overrides).validate()


def test_window_validation():
    with pytest.raises(ConfigurationError, match="window_r"):
        preset("window", window_r=8).validate()
    with pytest.raises(ConfigurationError, match="chunk - window_r"):
        preset("window", n=30).validate()


def test_unknown_mode():
    with pytest.raises(ConfigurationError):
        RunConfig(mode="cubic").validate()


def test_from_dict_accepts_kebab_case_and_rejects_unknown():
    cfg = RunConfig.from_dict({"mode": "window", "window-r": 2, "chunk": 4, "n": 8})
    assert cfg.window_r == 2
    with pytest.raises(ConfigurationError, match="unknown"):
        RunConfig.from_dict({"nope": 1})


def test_capacity_reserves_rows():
    plain = preset("sink").capacity()
    assert plain.m_max >= 3 + (8 - 4) + 1
    pure = preset("quadratic-causal", pure_oracle_recombination=True).capacity()
    assert pure.m_max >= 2 * 4 - 1
