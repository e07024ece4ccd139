import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shieldcraft.envmodel import ENV_NAMES, make_env
from shieldcraft.geometry import AffineMap, LinPred, region_mask
from shieldcraft.shield import (
    NoMatchingComponent,
    PwlShield,
    ShieldError,
    deserialize,
    eval_batch,
    eval_shield,
    initial_shield,
    load_checkpoint,
    region_index,
    serialize,
    split,
)


def const(v, n=1):
    return AffineMap.constant([v], n)


def two_piece():
    return PwlShield([((LinPred([1.0], 0.0),), const(-1.0)), ((), const(1.0))])


def test_catch_all_zero():
    g = PwlShield([((), AffineMap([[0.0, 0.0]], [0.0]))])
    for s in np.random.default_rng(0).normal(size=(10, 2)):
        assert eval_shield(g, s)[0] == 0.0


def test_first_match_examples():
    g = two_piece()
    assert eval_shield(g, [-1.0])[0] == -1.0
    assert eval_shield(g, [1.0])[0] == 1.0
    assert eval_shield(g, [0.0])[0] == -1.0
    assert [region_index(g, [x]) for x in (-1.0, 1.0, 0.0)] == [0, 1, 0]


def test_no_match_raises():
    g = PwlShield([((LinPred([1.0], 0.0),), const(-1.0))])
    with pytest.raises(NoMatchingComponent):
        eval_shield(g, [1.0])


def test_action_bounds_clip():
    from shieldcraft.geometry import Box
    g = PwlShield([((), AffineMap([[10.0]], [0.0]))], Box([-2.0], [2.0]))
    assert eval_shield(g, [1.0])[0] == 2.0


def test_split_catch_all():
    g = PwlShield([((), const(0.0))])
    g2 = split(g, 0, LinPred([1.0], 0.0), const(-1.0), const(1.0))
    assert len(g2) == 2
    assert g2 == two_piece()
    assert eval_shield(g2, [-0.5])[0] == -1.0


def test_split_invalid_index():
    with pytest.raises(ShieldError):
        split(two_piece(), 5, LinPred([1.0], 0.0), const(0.0), const(0.0))


def test_split_preserves_other_components():
    rng = np.random.default_rng(1)
    g = PwlShield([((LinPred([1.0, 0.0], 0.0),), AffineMap([[1.0, 2.0]], [0.0])),
                   ((LinPred([0.0, 1.0], 1.0),), AffineMap([[0.0, -1.0]], [1.0])),
                   ((), AffineMap([[0.5, 0.5]], [-1.0]))])
    g1, g2 = AffineMap([[3.0, 0.0]], [0.0]), AffineMap([[0.0, 3.0]], [0.0])
    s2 = split(g, 1, LinPred([1.0, 1.0], 0.5), g1, g2)
    for s in rng.uniform(-3, 3, (2000, 2)):
        i = region_index(g, s)
        a = eval_shield(s2, s)[0]
        if i == 1:
            assert a in (g1(s)[0], g2(s)[0])
        else:
            assert a == eval_shield(g, s)[0]


def test_effective_regions_disjoint_cover():
    rng = np.random.default_rng(2)
    g = PwlShield([((LinPred([1.0, 0.0], 0.0),), AffineMap([[1.0, 2.0]], [0.0])),
                   ((LinPred([0.0, 1.0], 1.0),), AffineMap([[0.0, -1.0]], [1.0])),
                   ((), AffineMap([[0.5, 0.5]], [-1.0]))])
    states = rng.uniform(-3, 3, (10_000, 2))
    hits = sum(region_mask(c.region, states).astype(int) for c in g.components)
    assert np.all(hits == 1)


def test_roundtrip_and_errors():
    g = PwlShield([((LinPred([0.1, -0.3], 1 / 3),), AffineMap([[np.pi, 1e-17]], [2 / 7])), ((), const(0.0, 2))])
    assert deserialize(serialize(g)) == g
    d = json.loads(serialize(g))
    del d["components"]
    with pytest.raises(ShieldError, match="components"):
        deserialize(json.dumps(d))
    d = json.loads(serialize(g))
    d["components"][0]["guard"][0]["w"] = [0.0, 0.0]
    with pytest.raises(ShieldError):
        deserialize(json.dumps(d))
    with pytest.raises(ShieldError):
        deserialize("{not json")


coef = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(coef, coef, coef, coef), min_size=1, max_size=4))
def test_serialize_identity(rows):
    comps = []
    for w0, b, k, c in rows:
        guard = (LinPred([w0 if w0 != 0 else 1.0, 0.5], b),)
        comps.append((guard, AffineMap([[k, -k]], [c])))
    comps.append(((), const(0.0, 2)))
    g = PwlShield(comps)
    back = deserialize(serialize(g))
    assert back == g
    for a, b in zip(back.components, g.components):
        assert np.array_equal(a.policy.matrix, b.policy.matrix)


@pytest.mark.parametrize("name", ENV_NAMES)
def test_shipped_shields_load(name):
    env = make_env(name)
    g = initial_shield(name)
    assert g.state_dim == env.state_dim and g.action_dim == env.action_dim
    states = env.state_bounds.sample(np.random.default_rng(3), 2000)
    acts = eval_batch(g, states)
    assert np.all(acts >= env.action_bounds.lo) and np.all(acts <= env.action_bounds.hi)


def test_checkpoint_with_invariant():
    from tests.conftest import shipped
    env, g, phi = shipped("road")
    g2, phi2 = load_checkpoint(serialize(g, phi))
    assert g2 == g and [b for b in phi2.boxes] == phi.boxes
