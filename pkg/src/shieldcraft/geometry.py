"""Boxes, linear predicates and sound interval transformers.

Every abstract state in the package is an axis-aligned box. The transformers
here round outward by ``FP_SLACK`` so that the concrete float computations done
by the simulators always land inside the abstract results.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

FP_SLACK = 1e-9


class GeometryError(ValueError):
    pass


def as_vec(x, name: str = "vector") -> np.ndarray:
    v = np.array(x, dtype=float).reshape(-1)
    if v.size == 0:
        raise GeometryError(f"{name} must have dimension >= 1")
    if not np.all(np.isfinite(v)):
        raise GeometryError(f"{name} has non-finite entries: {v}")
    return v


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


class Box:
    """Closed hyperinterval ``[lo, hi]``; ``Box.empty(n)`` is the bottom element."""

    __slots__ = ("lo", "hi", "_empty")

    def __init__(self, lo, hi):
        lo = as_vec(lo, "Box.lo")
        hi = as_vec(hi, "Box.hi")
        if lo.shape != hi.shape:
            raise GeometryError(f"Box bounds differ in dimension: {lo.size} vs {hi.size}")
        if np.any(lo > hi):
            raise GeometryError(f"Box has lo > hi: lo={lo.tolist()} hi={hi.tolist()}")
        self.lo = _frozen(lo)
        self.hi = _frozen(hi)
        self._empty = False

    @classmethod
    def _raw(cls, lo: np.ndarray, hi: np.ndarray) -> "Box":
        # unchecked constructor for hot paths; caller guarantees lo <= hi
        b = object.__new__(cls)
        b.lo = _frozen(lo)
        b.hi = _frozen(hi)
        b._empty = False
        return b

    @classmethod
    def empty(cls, dim: int) -> "Box":
        if dim < 1:
            raise GeometryError("Box dimension must be >= 1")
        b = object.__new__(cls)
        b.lo = _frozen(np.full(dim, np.inf))
        b.hi = _frozen(np.full(dim, -np.inf))
        b._empty = True
        return b

    @classmethod
    def point(cls, x) -> "Box":
        v = as_vec(x, "point")
        return cls._raw(v, v.copy())

    @classmethod
    def from_bounds(cls, lo, hi) -> "Box":
        """Like the constructor but returns EMPTY instead of raising when lo > hi."""
        lo = np.array(lo, dtype=float).reshape(-1)
        hi = np.array(hi, dtype=float).reshape(-1)
        if np.any(lo > hi):
            return cls.empty(lo.size)
        return cls._raw(lo, hi)

    @property
    def is_empty(self) -> bool:
        return self._empty

    @property
    def dim(self) -> int:
        return self.lo.size

    @property
    def width(self) -> np.ndarray:
        if self._empty:
            return np.zeros(self.dim)
        return self.hi - self.lo

    @property
    def center(self) -> np.ndarray:
        if self._empty:
            raise GeometryError("EMPTY box has no center")
        return 0.5 * (self.lo + self.hi)

    def volume(self) -> float:
        return 0.0 if self._empty else float(np.prod(self.hi - self.lo))

    def contains(self, x) -> bool:
        if self._empty:
            return False
        x = np.asarray(x, dtype=float)
        return bool(np.all(self.lo <= x) and np.all(x <= self.hi))

    def contains_box(self, other: "Box") -> bool:
        _check_dim(self, other)
        if other._empty:
            return True
        if self._empty:
            return False
        return bool(np.all(self.lo <= other.lo) and np.all(other.hi <= self.hi))

    def intersects(self, other: "Box") -> bool:
        return not box_meet(self, other).is_empty

    def sample(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        if self._empty:
            raise GeometryError("cannot sample from EMPTY box")
        shape = (self.dim,) if n is None else (n, self.dim)
        return self.lo + (self.hi - self.lo) * rng.random(shape)

    def to_json(self) -> dict:
        if self._empty:
            return {"empty": True, "dim": self.dim}
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "Box":
        if d.get("empty"):
            return cls.empty(int(d["dim"]))
        return cls(d["lo"], d["hi"])

    def __eq__(self, other) -> bool:
        if not isinstance(other, Box):
            return NotImplemented
        if self.dim != other.dim or self._empty != other._empty:
            return False
        return self._empty or (np.array_equal(self.lo, other.lo) and np.array_equal(self.hi, other.hi))

    def __hash__(self):
        return hash((self._empty, self.lo.tobytes(), self.hi.tobytes()))

    def __repr__(self) -> str:
        if self._empty:
            return f"Box.empty({self.dim})"
        return f"Box({self.lo.tolist()}, {self.hi.tolist()})"


def _check_dim(a: Box, b: Box) -> None:
    if a.dim != b.dim:
        raise GeometryError(f"dimension mismatch: {a.dim} vs {b.dim}")


def box_join(a: Box, b: Box) -> Box:
    _check_dim(a, b)
    if a.is_empty:
        return b
    if b.is_empty:
        return a
    return Box._raw(np.minimum(a.lo, b.lo), np.maximum(a.hi, b.hi))


def box_meet(a: Box, b: Box) -> Box:
    _check_dim(a, b)
    if a.is_empty or b.is_empty:
        return Box.empty(a.dim)
    lo = np.maximum(a.lo, b.lo)
    hi = np.minimum(a.hi, b.hi)
    if np.any(lo > hi):
        return Box.empty(a.dim)
    return Box._raw(lo, hi)


def join_all(boxes: Iterable[Box], dim: int) -> Box:
    out = Box.empty(dim)
    for b in boxes:
        out = box_join(out, b)
    return out


def box_add(a: Box, b: Box) -> Box:
    """Minkowski sum."""
    _check_dim(a, b)
    if a.is_empty or b.is_empty:
        return Box.empty(a.dim)
    return Box._raw(a.lo + b.lo, a.hi + b.hi)


def box_product(a: Box, b: Box) -> Box:
    """Cartesian product ``a x b`` (used to form ``[s; a]`` boxes)."""
    if a.is_empty or b.is_empty:
        return Box.empty(a.dim + b.dim)
    return Box._raw(np.concatenate([a.lo, b.lo]), np.concatenate([a.hi, b.hi]))


def box_clip(a: Box, bounds: Box) -> Box:
    """Image of ``a`` under coordinatewise clipping into ``bounds``.

    Coincides with ``box_meet`` when the two overlap, but stays sound when a
    concrete successor is clipped back onto the envelope from outside.
    """
    _check_dim(a, bounds)
    if a.is_empty:
        return a
    lo = np.clip(a.lo, bounds.lo, bounds.hi)
    hi = np.clip(a.hi, bounds.lo, bounds.hi)
    return Box._raw(lo, hi)


@dataclass(frozen=True, eq=False)
class LinPred:
    """Half-space ``w . x <= b``."""

    w: np.ndarray
    b: float

    def __post_init__(self):
        w = as_vec(self.w, "LinPred.w")
        if not np.any(w != 0.0):
            raise GeometryError("LinPred normal must not be the zero vector")
        if not np.isfinite(self.b):
            raise GeometryError("LinPred offset must be finite")
        object.__setattr__(self, "w", _frozen(w))
        object.__setattr__(self, "b", float(self.b))
        nz = np.flatnonzero(w)
        object.__setattr__(self, "_axis", int(nz[0]) if nz.size == 1 else None)

    @property
    def dim(self) -> int:
        return self.w.size

    def holds(self, x) -> bool:
        return float(np.dot(self.w, x)) <= self.b

    def holds_batch(self, xs: np.ndarray) -> np.ndarray:
        return xs @ self.w <= self.b

    def axis(self) -> int | None:
        return self._axis

    def to_json(self) -> dict:
        return {"w": self.w.tolist(), "b": self.b}

    @classmethod
    def from_json(cls, d: dict) -> "LinPred":
        return cls(np.array(d["w"], dtype=float), float(d["b"]))

    def __eq__(self, other):
        if not isinstance(other, LinPred):
            return NotImplemented
        return self.b == other.b and np.array_equal(self.w, other.w)

    def __hash__(self):
        return hash((self.w.tobytes(), self.b))

    def __repr__(self):
        return f"LinPred(w={self.w.tolist()}, b={self.b})"


def axis_pred(dim: int, k: int, bound: float, upper: bool = True) -> LinPred:
    """``x_k <= bound`` (or ``x_k >= bound`` when ``upper`` is False)."""
    w = np.zeros(dim)
    w[k] = 1.0 if upper else -1.0
    return LinPred(w, bound if upper else -bound)


@dataclass(frozen=True)
class Region:
    """Conjunction of ``positive`` half-spaces and strict negations of ``negative`` ones."""

    positive: tuple[LinPred, ...] = ()
    negative: tuple[LinPred, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "positive", tuple(self.positive))
        object.__setattr__(self, "negative", tuple(self.negative))

    def to_json(self) -> dict:
        return {"positive": [p.to_json() for p in self.positive],
                "negative": [p.to_json() for p in self.negative]}

    @classmethod
    def from_json(cls, d: dict) -> "Region":
        return cls(tuple(LinPred.from_json(p) for p in d.get("positive", [])),
                   tuple(LinPred.from_json(p) for p in d.get("negative", [])))


@dataclass(frozen=True, eq=False)
class AffineMap:
    """``x -> matrix @ x + bias``."""

    matrix: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.ndim != 2:
            raise GeometryError(f"AffineMap matrix must be 2-D, got shape {m.shape}")
        c = np.array(self.bias, dtype=float).reshape(-1)
        if c.size != m.shape[0]:
            raise GeometryError(f"bias has {c.size} entries, matrix has {m.shape[0]} rows")
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(c))):
            raise GeometryError("AffineMap entries must be finite")
        object.__setattr__(self, "matrix", _frozen(m))
        object.__setattr__(self, "bias", _frozen(c))

    @property
    def in_dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def out_dim(self) -> int:
        return self.matrix.shape[0]

    def __call__(self, x) -> np.ndarray:
        return self.matrix @ np.asarray(x, dtype=float) + self.bias

    def apply_batch(self, xs: np.ndarray) -> np.ndarray:
        return xs @ self.matrix.T + self.bias

    def params(self) -> np.ndarray:
        """Flattened ``(matrix, bias)`` parameter vector."""
        return np.concatenate([self.matrix.ravel(), self.bias])

    @classmethod
    def from_params(cls, theta, out_dim: int, in_dim: int) -> "AffineMap":
        theta = np.asarray(theta, dtype=float)
        k = out_dim * in_dim
        return cls(theta[:k].reshape(out_dim, in_dim), theta[k:k + out_dim])

    @classmethod
    def constant(cls, value, in_dim: int) -> "AffineMap":
        c = as_vec(value, "constant")
        return cls(np.zeros((c.size, in_dim)), c)

    def to_json(self) -> dict:
        return {"K": self.matrix.tolist(), "c": self.bias.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "AffineMap":
        return cls(np.array(d["K"], dtype=float), np.array(d["c"], dtype=float))

    def __eq__(self, other):
        if not isinstance(other, AffineMap):
            return NotImplemented
        return np.array_equal(self.matrix, other.matrix) and np.array_equal(self.bias, other.bias)

    def __hash__(self):
        return hash((self.matrix.tobytes(), self.bias.tobytes()))

    def __repr__(self):
        return f"AffineMap(K={self.matrix.tolist()}, c={self.bias.tolist()})"


@dataclass(frozen=True, eq=False)
class IntervalMatrix:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.array(self.lo, dtype=float)
        hi = np.array(self.hi, dtype=float)
        if lo.ndim != 2 or lo.shape != hi.shape:
            raise GeometryError(f"IntervalMatrix bounds must be equal-shape 2-D arrays: {lo.shape} vs {hi.shape}")
        if np.any(lo > hi):
            raise GeometryError("IntervalMatrix has lo > hi")
        object.__setattr__(self, "lo", _frozen(lo))
        object.__setattr__(self, "hi", _frozen(hi))

    @classmethod
    def point(cls, m) -> "IntervalMatrix":
        m = np.array(m, dtype=float)
        return cls(m, m.copy())

    @property
    def shape(self) -> tuple[int, int]:
        return self.lo.shape

    def contains(self, m) -> bool:
        m = np.asarray(m, dtype=float)
        return bool(np.all(self.lo <= m) and np.all(m <= self.hi))


def affine_image(f: AffineMap, b: Box, slack: float = FP_SLACK) -> Box:
    if f.in_dim != b.dim:
        raise GeometryError(f"affine map expects dim {f.in_dim}, box has dim {b.dim}")
    if b.is_empty:
        return Box.empty(f.out_dim)
    m = f.matrix
    mp = np.maximum(m, 0.0)
    mn = np.minimum(m, 0.0)
    lo = mp @ b.lo + mn @ b.hi + f.bias - slack
    hi = mp @ b.hi + mn @ b.lo + f.bias + slack
    return Box._raw(lo, hi)


def interval_matvec(klo: np.ndarray, khi: np.ndarray, xlo: np.ndarray, xhi: np.ndarray):
    """Bounds of ``K x`` over ``K in [klo, khi]``, ``x in [xlo, xhi]`` (no slack)."""
    p1 = klo * xlo
    p2 = klo * xhi
    p3 = khi * xlo
    p4 = khi * xhi
    lo = np.minimum(np.minimum(p1, p2), np.minimum(p3, p4)).sum(axis=1)
    hi = np.maximum(np.maximum(p1, p2), np.maximum(p3, p4)).sum(axis=1)
    return lo, hi


def interval_affine_image(k: IntervalMatrix, bias_box: Box, b: Box, slack: float = FP_SLACK) -> Box:
    rows, cols = k.shape
    if cols != b.dim or bias_box.dim != rows:
        raise GeometryError(f"interval map {rows}x{cols} incompatible with box dim {b.dim} / bias dim {bias_box.dim}")
    if b.is_empty or bias_box.is_empty:
        return Box.empty(rows)
    lo, hi = interval_matvec(k.lo, k.hi, b.lo, b.hi)
    return Box._raw(lo + bias_box.lo - slack, hi + bias_box.hi + slack)


class Truth(enum.Enum):
    TRUE = "true"
    FALSE = "false"
    UNKNOWN = "unknown"


def _dot_range(w: np.ndarray, b: Box) -> tuple[float, float]:
    wp = np.maximum(w, 0.0)
    wn = np.minimum(w, 0.0)
    return float(wp @ b.lo + wn @ b.hi), float(wp @ b.hi + wn @ b.lo)


def pred_eval_box(p: LinPred, b: Box, slack: float = FP_SLACK) -> Truth:
    if p.dim != b.dim:
        raise GeometryError(f"predicate dim {p.dim} vs box dim {b.dim}")
    if b.is_empty:
        raise GeometryError("pred_eval_box on EMPTY box")
    lo, hi = _dot_range(p.w, b)
    if hi + slack <= p.b:
        return Truth.TRUE
    if lo - slack > p.b:
        return Truth.FALSE
    return Truth.UNKNOWN


def region_contains(r: Region, x) -> bool:
    x = np.asarray(x, dtype=float)
    for p in r.positive:
        if not float(np.dot(p.w, x)) <= p.b:
            return False
    for p in r.negative:
        if not float(np.dot(p.w, x)) > p.b:
            return False
    return True


def region_mask(r: Region, xs: np.ndarray) -> np.ndarray:
    """Vectorized ``region_contains`` over the rows of ``xs``."""
    mask = np.ones(xs.shape[0], dtype=bool)
    for p in r.positive:
        mask &= xs @ p.w <= p.b
    for p in r.negative:
        mask &= xs @ p.w > p.b
    return mask


def _axis_bound(p: LinPred, k: int, slack: float) -> float:
    wk = p.w[k]
    bound = p.b / wk
    if abs(wk) != 1.0:
        # the division may round inward
        bound += slack if wk > 0 else -slack
    return bound


def region_meet_box(r: Region, b: Box, slack: float = FP_SLACK) -> Box:
    """Sound box over-approximation of ``r`` intersected with ``b``.

    Axis-aligned predicates tighten their axis. Other predicates only prune:
    when one is provably violated on the box the result is EMPTY.
    """
    if b.is_empty:
        return b
    lo = b.lo.copy()
    hi = b.hi.copy()
    general: list[tuple[LinPred, bool]] = []
    for p in r.positive:
        k = p.axis()
        if k is None:
            general.append((p, True))
        elif p.w[k] > 0:
            hi[k] = min(hi[k], _axis_bound(p, k, slack))
        else:
            lo[k] = max(lo[k], _axis_bound(p, k, slack))
    for p in r.negative:
        k = p.axis()
        if k is None:
            general.append((p, False))
        elif p.w[k] > 0:
            lo[k] = max(lo[k], _axis_bound(p, k, -slack))
        else:
            hi[k] = min(hi[k], _axis_bound(p, k, -slack))
    if np.any(lo > hi):
        return Box.empty(b.dim)
    out = Box._raw(lo, hi)
    for p, positive in general:
        t = pred_eval_box(p, out, slack)
        if (positive and t is Truth.FALSE) or (not positive and t is Truth.TRUE):
            return Box.empty(b.dim)
    return out


def region_feasible_on(r: Region, b: Box) -> bool:
    return not region_meet_box(r, b).is_empty


def vec_to_json(x: Sequence[float]) -> list[float]:
    return [float(v) for v in x]
