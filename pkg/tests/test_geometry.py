import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shieldcraft.geometry import (
    FP_SLACK,
    AffineMap,
    Box,
    GeometryError,
    IntervalMatrix,
    LinPred,
    Region,
    Truth,
    affine_image,
    box_join,
    box_meet,
    interval_affine_image,
    pred_eval_box,
    region_contains,
    region_mask,
    region_meet_box,
)

TOL = 1e-8


def close_box(b, lo, hi, tol=TOL):
    return np.allclose(b.lo, lo, atol=tol) and np.allclose(b.hi, hi, atol=tol)


# -- boxes ------------------------------------------------------------------------

def test_join_disjoint_intervals():
    assert box_join(Box([0], [1]), Box([2], [3])) == Box([0], [3])


def test_join_empty_is_identity():
    b = Box([0, 1], [2, 3])
    assert box_join(b, Box.empty(2)) == b
    assert box_join(Box.empty(2), b) == b


def test_join_per_axis_hull():
    assert box_join(Box([0, 0], [1, 1]), Box([-1, 2], [0, 3])) == Box([-1, 0], [1, 3])


def test_meet_examples():
    assert box_meet(Box([0], [2]), Box([1], [3])) == Box([1], [2])
    assert box_meet(Box([0], [1]), Box([2], [3])).is_empty
    b = Box([0, -1], [1, 4])
    assert box_meet(b, b) == b


def test_dimension_mismatch_rejected():
    with pytest.raises(GeometryError):
        box_join(Box([0], [1]), Box([0, 0], [1, 1]))
    with pytest.raises(GeometryError):
        box_meet(Box([0], [1]), Box([0, 0], [1, 1]))


def test_box_validation():
    with pytest.raises(GeometryError):
        Box([1.0], [0.0])
    with pytest.raises(GeometryError):
        Box([np.nan], [0.0])
    e = Box.empty(3)
    assert e.is_empty and e != Box([0, 0, 0], [0, 0, 0])


def test_box_json_roundtrip():
    b = Box([0.1, -2.5], [0.3, 1e-300])
    assert Box.from_json(b.to_json()) == b
    assert Box.from_json(Box.empty(2).to_json()).is_empty


def boxes(dim):
    pair = st.tuples(st.floats(-100, 100), st.floats(0, 50))
    return st.lists(pair, min_size=dim, max_size=dim).map(
        lambda ps: Box([p[0] for p in ps], [p[0] + p[1] for p in ps]))


@settings(max_examples=200, deadline=None)
@given(boxes(3), boxes(3), boxes(3))
def test_join_meet_lattice(a, b, c):
    assert box_join(a, b) == box_join(b, a)
    assert box_meet(a, b) == box_meet(b, a)
    assert box_join(box_join(a, b), c) == box_join(a, box_join(b, c))
    assert box_meet(box_meet(a, b), c) == box_meet(a, box_meet(b, c))
    # absorption
    assert box_join(a, box_meet(a, b)) == a
    assert box_meet(a, box_join(a, b)) == a


# -- transformers -------------------------------------------------------------------

def test_affine_image_examples():
    assert close_box(affine_image(AffineMap([[2.0]], [1.0]), Box([0], [1])), [1], [3])
    b = Box([-1, 2], [0.5, 7])
    assert close_box(affine_image(AffineMap(np.eye(2), [0, 0]), b), b.lo, b.hi)
    assert close_box(affine_image(AffineMap([[1.0, -1.0]], [0.0]), Box([0, 0], [1, 1])), [-1], [1])


def test_affine_image_pads_by_slack():
    out = affine_image(AffineMap([[1.0]], [0.0]), Box([0], [1]))
    assert out.lo[0] == -FP_SLACK and out.hi[0] == 1 + FP_SLACK


def test_interval_affine_examples():
    assert close_box(interval_affine_image(IntervalMatrix([[1.0]], [[2.0]]), Box([0], [0]), Box([1], [1])),
                     [1], [2])
    assert close_box(interval_affine_image(IntervalMatrix([[-1.0]], [[1.0]]), Box([0], [0]), Box([-1], [1])),
                     [-1], [1])
    out = interval_affine_image(IntervalMatrix([[0.5]], [[1.5]]), Box([-0.1], [0.1]), Box([2], [3]))
    assert close_box(out, [0.9], [4.6])


def test_interval_affine_brute_force_grid():
    K = np.linspace(0.5, 1.5, 100)
    c = np.linspace(-0.1, 0.1, 100)
    x = np.linspace(2, 3, 100)
    vals = K[:, None, None] * x[None, None, :] + c[None, :, None]
    out = interval_affine_image(IntervalMatrix([[0.5]], [[1.5]]), Box([-0.1], [0.1]), Box([2], [3]))
    assert out.lo[0] <= vals.min() and vals.max() <= out.hi[0]
    # near-tight: the grid reaches the corners
    assert vals.min() - out.lo[0] < 1e-8 and out.hi[0] - vals.max() < 1e-8


def test_affine_dimension_mismatch():
    with pytest.raises(GeometryError):
        affine_image(AffineMap([[1.0, 2.0]], [0.0]), Box([0], [1]))
    with pytest.raises(GeometryError):
        interval_affine_image(IntervalMatrix([[1.0]], [[1.0]]), Box([0, 0], [0, 0]), Box([0], [1]))


def test_affine_soundness_fuzz():
    rng = np.random.default_rng(0)
    for _ in range(2000):
        n, m = rng.integers(1, 5, 2)
        f = AffineMap(rng.normal(size=(m, n)) * 10, rng.normal(size=m) * 10)
        lo = rng.normal(size=n) * 10
        b = Box(lo, lo + rng.exponential(3, n))
        img = affine_image(f, b)
        for x in b.sample(rng, 5):
            assert img.contains(f(x))


def test_affine_exact_on_corners():
    rng = np.random.default_rng(1)
    for _ in range(300):
        n, m = rng.integers(1, 5, 2)
        f = AffineMap(rng.normal(size=(m, n)), rng.normal(size=m))
        lo = rng.normal(size=n)
        b = Box(lo, lo + rng.exponential(1, n))
        corners = np.array(np.meshgrid(*[[b.lo[k], b.hi[k]] for k in range(n)])).reshape(n, -1).T
        imgs = f.apply_batch(corners)
        out = affine_image(f, b)
        assert np.allclose(out.lo, imgs.min(axis=0), atol=1e-9 + FP_SLACK)
        assert np.allclose(out.hi, imgs.max(axis=0), atol=1e-9 + FP_SLACK)


def test_interval_affine_soundness_fuzz():
    rng = np.random.default_rng(2)
    for _ in range(2000):
        n, m = rng.integers(1, 4, 2)
        klo = rng.normal(size=(m, n))
        khi = klo + rng.exponential(1, (m, n))
        clo = rng.normal(size=m)
        cb = Box(clo, clo + rng.exponential(1, m))
        xlo = rng.normal(size=n) * 3
        xb = Box(xlo, xlo + rng.exponential(2, n))
        out = interval_affine_image(IntervalMatrix(klo, khi), cb, xb)
        K = klo + (khi - klo) * rng.random((m, n))
        c = cb.sample(rng)
        x = xb.sample(rng)
        assert out.contains(K @ x + c)


# -- predicates and regions -----------------------------------------------------

def test_pred_eval_box_examples():
    p = LinPred([1.0], 5.0)
    assert pred_eval_box(p, Box([0], [1])) is Truth.TRUE
    assert pred_eval_box(p, Box([6], [7])) is Truth.FALSE
    assert pred_eval_box(p, Box([4], [6])) is Truth.UNKNOWN


def test_pred_eval_box_agrees_with_samples():
    rng = np.random.default_rng(3)
    for _ in range(200):
        n = int(rng.integers(1, 4))
        p = LinPred(rng.normal(size=n), float(rng.normal()))
        lo = rng.normal(size=n)
        b = Box(lo, lo + rng.exponential(0.5, n))
        t = pred_eval_box(p, b)
        held = p.holds_batch(b.sample(rng, 1000))
        if t is Truth.TRUE:
            assert held.all()
        elif t is Truth.FALSE:
            assert not held.any()


def test_zero_normal_rejected():
    with pytest.raises(GeometryError):
        LinPred([0.0, 0.0], 1.0)


def test_region_contains_examples():
    assert region_contains(Region(), [3.0, -1.0])
    assert region_contains(Region((LinPred([1.0], 0.0),)), [-1.0])
    r = Region((LinPred([1.0], 2.0),), (LinPred([1.0], 0.0),))
    assert region_contains(r, [1.0])
    assert not region_contains(r, [0.0])
    assert np.array_equal(region_mask(r, np.array([[1.0], [0.0], [3.0]])), [True, False, False])


def test_region_meet_box_examples():
    assert close_box(region_meet_box(Region((LinPred([1.0], 0.5),)), Box([0], [1])), [0], [0.5])
    sq = Box([0, 0], [1, 1])
    assert region_meet_box(Region((LinPred([1.0, 1.0], 0.0),)), sq) == sq
    assert region_meet_box(Region((LinPred([1.0], -1.0),)), Box([0], [1])).is_empty


def test_region_meet_box_is_sound():
    rng = np.random.default_rng(4)
    for _ in range(300):
        n = int(rng.integers(1, 4))
        preds = [LinPred(rng.normal(size=n) if rng.random() < 0.5 else np.eye(n)[rng.integers(n)],
                         float(rng.normal())) for _ in range(3)]
        r = Region(tuple(preds[:2]), tuple(preds[2:]))
        lo = rng.normal(size=n)
        b = Box(lo, lo + rng.exponential(1, n))
        out = region_meet_box(r, b)
        pts = b.sample(rng, 300)
        inside = pts[region_mask(r, pts)]
        if out.is_empty:
            assert inside.shape[0] == 0
        else:
            assert all(out.contains(x) for x in inside)
            assert b.contains_box(out)
