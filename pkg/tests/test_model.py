import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfaimd import (
    OFF,
    ConfigError,
    Constant,
    LoadAffine,
    ReciprocalLoadAffine,
    UserState,
    WindowTimesLoadAffine,
    config_from_doc,
    eval_rates,
    node_loads,
    plus,
    trace_distance,
    validate_config,
)
from mfaimd.model import Dirac, Exponential, Uniform
from mfaimd.util import config_digest

from conftest import read_doc


# ---------------------------------------------------------------------------
# states and the trace metric
# ---------------------------------------------------------------------------

def test_state_basics():
    s = UserState.on(2.5)
    assert s.wplus == 2.5 and s.value == 2.5
    assert OFF.wplus == 0.0 and OFF.value == -1.0
    assert plus(OFF) == 0.0
    assert UserState.from_value(-1.0) == OFF
    assert UserState.from_value(0.5) == UserState.on(0.5)
    with pytest.raises(ValueError):
        UserState.on(-0.1)


def test_trace_metric_values():
    assert trace_distance(UserState.on(1.0), UserState.on(3.0)) == 2.0
    assert trace_distance(OFF, UserState.on(1.0)) == 2.0
    assert trace_distance(OFF, OFF) == 0.0


state_values = st.one_of(st.just(-1.0), st.floats(0.0, 1e6, allow_nan=False))


@given(state_values, state_values)
def test_plus_is_1_lipschitz_for_trace_metric(x, y):
    sx, sy = UserState.from_value(x), UserState.from_value(y)
    assert abs(plus(sx) - plus(sy)) <= trace_distance(sx, sy) + 1e-12


# ---------------------------------------------------------------------------
# node loads
# ---------------------------------------------------------------------------

def test_node_loads_example():
    states = [[UserState.on(2.0), OFF], [UserState.on(0.5)]]
    A = [[1.0, 1.0], [0.0, 2.0]]
    assert np.allclose(node_loads(states, A), [2.5, 1.0])
    assert np.allclose(node_loads(states, A, scale=3), [2.5 / 3, 1.0 / 3])


def test_node_loads_all_off():
    states = [[OFF, OFF], [OFF]]
    assert np.allclose(node_loads(states, [[1.0, 1.0], [0.0, 2.0]]), 0.0)


def test_node_loads_dimension_mismatch():
    with pytest.raises(ConfigError):
        node_loads([[OFF]], [[1.0, 2.0]])


@given(
    st.lists(st.floats(0, 100), min_size=1, max_size=6),
    st.lists(st.floats(0, 100), min_size=1, max_size=6),
    st.floats(0.01, 50),
)
@settings(max_examples=50)
def test_node_loads_additive_and_homogeneous(w1, w2, c):
    A = [[1.0], [0.4]]
    s1 = [[UserState.on(w) for w in w1]]
    s2 = [[UserState.on(w) for w in w2]]
    both = [[UserState.on(w) for w in w1 + w2]]
    assert np.allclose(node_loads(both, A), node_loads(s1, A) + node_loads(s2, A))
    scaled = [[UserState.on(c * w) for w in w1]]
    assert np.allclose(node_loads(scaled, A), c * node_loads(s1, A))


# ---------------------------------------------------------------------------
# rate families
# ---------------------------------------------------------------------------

def test_eval_rates_examples(constant_cfg):
    a = ReciprocalLoadAffine(tau=0.1, t=(0.0,))
    assert a.value(0.0, (5.0,)) == pytest.approx(10.0)
    a2 = ReciprocalLoadAffine(tau=0.1, t=(0.05,))
    assert a2.value(0.0, (2.0,)) == pytest.approx(5.0)
    b = WindowTimesLoadAffine(delta=0.5, d=(0.0,))
    assert b.value(4.0, (1.0,)) == pytest.approx(2.0)
    lam, mu, av, bv = eval_rates(constant_cfg, 0, UserState.on(3.0), (0.7,))
    assert (lam, mu, av, bv) == (1.0, 2.0, 1.0, 0.0)


def _families_for(J):
    return [
        Constant(1.3),
        LoadAffine(0.2, (0.5,) * J),
        WindowTimesLoadAffine(0.3, (0.7,) * J),
        ReciprocalLoadAffine(0.4, (0.2,) * J),
    ]


def test_families_nonnegative_on_box():
    gen = np.random.default_rng(2024)
    J = 2
    for fam in _families_for(J):
        w = gen.uniform(0, 50, 10_000)
        u = gen.uniform(0, 20, (10_000, J))
        for wi, ui in zip(w[:200], u[:200]):
            assert fam.value(float(wi), tuple(ui)) >= 0.0
        vals = np.asarray(fam.value(w, u.mean(axis=0)))
        assert np.all(vals >= 0.0)


def test_sup_box_dominates_interior():
    # the thinning majorants rely on sup_box bounding the family on the box
    gen = np.random.default_rng(7)
    J = 2
    for fam in _families_for(J):
        for _ in range(300):
            w_hi = gen.uniform(0, 10)
            u_lo = gen.uniform(0, 5, J)
            u_hi = u_lo + gen.uniform(0, 5, J)
            sup = float(fam.sup_box(w_hi, tuple(u_lo), tuple(u_hi)))
            w = gen.uniform(0, w_hi)
            u = tuple(gen.uniform(u_lo, u_hi))
            assert fam.value(w, u) <= sup + 1e-12
            assert fam.inf_box(0.0, tuple(u_lo), tuple(u_hi)) <= fam.value(w, u) + 1e-12


def test_family_bounds():
    assert Constant(2.0).bound() == 2.0
    assert LoadAffine(3.0, (0.0,)).bound() == 3.0
    assert LoadAffine(3.0, (0.1,)).bound() is None
    assert WindowTimesLoadAffine(1.0, (0.0,)).bound() is None
    assert ReciprocalLoadAffine(0.25, (1.0,)).bound() == 4.0


def test_initial_laws():
    assert Dirac(1.5).mean == 1.5
    assert Exponential(0.7).mean == 0.7
    assert Uniform(1.0, 2.0).mean == 1.5
    gen = np.random.default_rng(1)
    xs = Exponential(0.7).sample(gen, 20_000)
    assert xs.mean() == pytest.approx(0.7, rel=0.05)
    assert np.all(Uniform(1.0, 2.0).sample(gen, 100) >= 1.0)
    with pytest.raises(ConfigError):
        Uniform(-1.0, 2.0)
    with pytest.raises(ConfigError):
        Dirac(-0.5)


# ---------------------------------------------------------------------------
# configuration parsing and validation
# ---------------------------------------------------------------------------

def test_parse_rejects_bad_r():
    doc = read_doc("constant_rates")
    doc["classes"][0]["r"] = 1.3
    with pytest.raises(ConfigError, match=r"classes\[0\]\.r"):
        config_from_doc(doc)


def test_parse_rejects_negative_rate():
    doc = read_doc("constant_rates")
    doc["classes"][0]["mu"] = {"family": "constant", "params": {"c": -2.0}}
    with pytest.raises(ConfigError, match=r"classes\[0\]\.mu"):
        config_from_doc(doc)


def test_parse_rejects_bad_proportions():
    doc = read_doc("two_class_rtt")
    doc["proportions"] = [0.5, 0.6]
    with pytest.raises(ConfigError, match="proportions"):
        config_from_doc(doc)


def test_parse_rejects_unbounded_growth():
    doc = read_doc("constant_rates")
    doc["classes"][0]["a"] = {"family": "window_times_load_affine", "params": {"delta": 1.0, "d": [0.0]}}
    with pytest.raises(ConfigError, match=r"classes\[0\]\.a"):
        config_from_doc(doc)


def test_parse_rejects_window_dependent_lambda():
    doc = read_doc("constant_rates")
    doc["classes"][0]["lambda"] = {"family": "window_times_load_affine", "params": {"delta": 1.0, "d": [0.0]}}
    with pytest.raises(ConfigError, match=r"classes\[0\]\.lambda"):
        config_from_doc(doc)


def test_validation_branches(constant_cfg, coupled_cfg, two_class_cfg):
    rep = validate_config(constant_cfg)
    assert rep.ok
    assert rep.class_reports[0].branch == 1
    assert rep.class_reports[0].gamma_finite  # inf mu = 2 > 0

    rep2 = validate_config(coupled_cfg)
    assert rep2.ok
    assert rep2.class_reports[0].branch == 2
    assert not rep2.class_reports[0].gamma_finite  # mu vanishes at w = 0

    rep3 = validate_config(two_class_cfg)
    assert rep3.ok
    assert all(c.branch == 2 for c in rep3.class_reports)
    assert all(c.a_positive for c in rep3.class_reports)


def test_validation_mixed_branch_warns(constant_cfg):
    doc = constant_cfg.to_doc()
    doc["classes"][0]["b"] = {"family": "window_times_load_affine", "params": {"delta": 0.5, "d": [0.0]}}
    cfg = config_from_doc(doc)
    rep = validate_config(cfg)
    assert rep.ok
    assert rep.class_reports[0].branch is None
    assert any("branch" in w for w in rep.warnings)


def test_digest_stable_under_key_order(constant_cfg):
    doc = constant_cfg.to_doc()
    shuffled = json.loads(json.dumps(doc))
    shuffled["classes"][0] = dict(reversed(list(shuffled["classes"][0].items())))
    reordered = {k: shuffled[k] for k in reversed(list(shuffled))}
    assert config_digest(doc) == config_digest(reordered)


def test_config_roundtrip(two_class_cfg):
    doc = two_class_cfg.to_doc()
    cfg2 = config_from_doc(doc)
    assert cfg2.to_doc() == doc
