"""Bounded-horizon reach analysis for shields over the box domain.

``verify_bounded`` pushes a start box through the closed loop ``T`` times and
reports the first unsafe overlap. ``safe_space`` turns a shield into an
invariant (one certified box per component), trimming boxes that fail.
``verify_param_box`` certifies a whole interval of affine controllers at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .envmodel import EnvModel, closed_loop_post
from .geometry import (
    Box,
    IntervalMatrix,
    Region,
    box_meet,
    region_meet_box,
)
from .shield import PwlShield


class NotCoverable(RuntimeError):
    """The initial states of some component cannot be covered by a certified box."""

    def __init__(self, component: int, uncovered: Box, message: str = ""):
        self.component = component
        self.uncovered = uncovered
        super().__init__(message or f"initial states not coverable: component {component}, sub-box {uncovered}")


@dataclass(frozen=True)
class Certificate:
    start: Box
    horizon: int
    reach_trace: tuple[Box, ...]

    def to_json(self) -> dict:
        return {"kind": "certificate", "start": self.start.to_json(), "horizon": self.horizon,
                "reach_trace": [b.to_json() for b in self.reach_trace]}


@dataclass(frozen=True)
class Counterexample:
    component: int | None
    step: int
    reach: Box
    unsafe: Box

    def to_json(self) -> dict:
        return {"kind": "counterexample", "component": self.component, "step": self.step,
                "reach": self.reach.to_json(), "unsafe": self.unsafe.to_json()}


@dataclass(frozen=True)
class InvariantPiece:
    component: int
    boxes: tuple[Box, ...]


@dataclass(frozen=True, eq=False)
class Invariant:
    """Union of boxes, grouped by the shield component they were certified for."""

    pieces: tuple[InvariantPiece, ...]
    dim: int
    horizon: int
    certificates: tuple[Certificate, ...] = field(default=(), repr=False)
    trims: tuple[int, ...] = field(default=(), repr=False)

    def __post_init__(self):
        boxes = [b for p in self.pieces for b in p.boxes if not b.is_empty]
        if boxes:
            los = np.stack([b.lo for b in boxes])
            his = np.stack([b.hi for b in boxes])
        else:
            los = np.empty((0, self.dim))
            his = np.empty((0, self.dim))
        object.__setattr__(self, "_los", los)
        object.__setattr__(self, "_his", his)

    @property
    def boxes(self) -> list[Box]:
        return [b for p in self.pieces for b in p.boxes if not b.is_empty]

    def to_json(self) -> dict:
        return {"dim": self.dim, "horizon": self.horizon,
                "pieces": [{"component": p.component, "boxes": [b.to_json() for b in p.boxes]}
                           for p in self.pieces]}

    @classmethod
    def from_json(cls, d: dict) -> "Invariant":
        pieces = tuple(InvariantPiece(int(p["component"]), tuple(Box.from_json(b) for b in p["boxes"]))
                       for p in d["pieces"])
        return cls(pieces, int(d["dim"]), int(d["horizon"]))


# -- abstract post ----------------------------------------------------------

# (region, K interval, c interval): a controller acting on a region
Controller = tuple[Region, IntervalMatrix, Box]


def shield_controllers(g: PwlShield) -> list[Controller]:
    return [(c.region, IntervalMatrix.point(c.policy.matrix), Box.point(c.policy.bias))
            for c in g.components]


def controllers_post_parts(env: EnvModel, parts: Sequence[Controller], S: Box) -> list[Box]:
    out = []
    for region, K, c in parts:
        piece = region_meet_box(region, S)
        out.append(piece if piece.is_empty else closed_loop_post(env, piece, K, c))
    return out


def controllers_post(env: EnvModel, parts: Sequence[Controller], S: Box) -> Box:
    lo = hi = None
    for img in controllers_post_parts(env, parts, S):
        if img.is_empty:
            continue
        if lo is None:
            lo, hi = img.lo, img.hi
        else:
            lo, hi = np.minimum(lo, img.lo), np.maximum(hi, img.hi)
    if lo is None:
        return Box.empty(env.state_dim)
    return Box._raw(lo, hi)


def shield_post(env: EnvModel, g: PwlShield, S: Box) -> Box:
    if S.is_empty:
        return S
    return controllers_post(env, shield_controllers(g), S)


def _first_unsafe(env: EnvModel, B: Box) -> Box | None:
    if B.is_empty:
        return None
    for u in env.unsafe:
        if np.all(B.lo <= u.hi) and np.all(u.lo <= B.hi):
            return u
    return None


def _unsafe_overlap(env: EnvModel, B: Box) -> float:
    """Fraction of B's volume inside the unsafe set (degenerate axes count as 1)."""
    total = 0.0
    w = B.hi - B.lo
    for u in env.unsafe:
        m = box_meet(B, u)
        if m.is_empty:
            continue
        mw = m.hi - m.lo
        frac = np.where(w > 0, mw / np.where(w > 0, w, 1.0), 1.0)
        total += float(np.prod(frac))
    return total


def _reach(env: EnvModel, parts: Sequence[Controller], start: Box, T: int,
           phi: "Invariant | None" = None):
    """Run the box iteration; returns (trace, failing_step or None, offending unsafe box)."""
    B = start
    trace = [B]
    for k in range(T + 1):
        u = _first_unsafe(env, B)
        if u is not None:
            return trace, k, u
        if phi is not None and k > 0 and not invariant_covers_box(phi, B):
            return trace, k, None
        if k == T:
            break
        nxt = controllers_post(env, parts, B)
        if nxt.is_empty or B.contains_box(nxt):
            # descending from here on by monotonicity; B stands in for the rest
            rest = nxt if not nxt.is_empty else B
            trace.extend([rest] * (T - k))
            if phi is not None and not rest.is_empty and not invariant_covers_box(phi, rest):
                return trace, k + 1, None
            return trace, None, None
        B = nxt
        trace.append(B)
    return trace, None, None


def _blame(env: EnvModel, parts: Sequence[Controller], prev: Box, u: Box) -> int | None:
    for i, img in enumerate(controllers_post_parts(env, parts, prev)):
        if not img.is_empty and not box_meet(img, u).is_empty:
            return i
    return None


def verify_bounded(env: EnvModel, g: PwlShield, start: Box, T: int | None = None) -> Certificate | Counterexample:
    T = env.horizon if T is None else T
    parts = shield_controllers(g)
    trace, k, u = _reach(env, parts, start, T)
    if k is None:
        return Certificate(start, T, tuple(trace[1:T + 1]))
    comp = _blame(env, parts, trace[k - 1], u) if k > 0 else None
    return Counterexample(comp, k, trace[k], u)


# -- invariant construction -------------------------------------------------

def _trim_candidates(C: Box, keep: Box) -> list[Box]:
    out = []
    target_lo = keep.lo if not keep.is_empty else C.center
    target_hi = keep.hi if not keep.is_empty else C.center
    for a in range(C.dim):
        for side in ("lo", "hi"):
            lo = C.lo.copy()
            hi = C.hi.copy()
            if side == "lo":
                if target_lo[a] - C.lo[a] <= 1e-12 * max(1.0, abs(C.lo[a])):
                    continue
                lo[a] = 0.5 * (C.lo[a] + target_lo[a])
            else:
                if C.hi[a] - target_hi[a] <= 1e-12 * max(1.0, abs(C.hi[a])):
                    continue
                hi[a] = 0.5 * (C.hi[a] + target_hi[a])
            out.append(Box._raw(lo, hi))
    return out


def _trim(env: EnvModel, parts: Sequence[Controller], C: Box, keep: Box, T: int) -> Box | None:
    """One bisection step on one side of ``C``.

    Candidates are ranked by: verifies outright, then later first failure,
    then smaller unsafe overlap at the failure, then larger kept volume.
    """
    best = None
    for cand in _trim_candidates(C, keep):
        trace, k, _ = _reach(env, parts, cand, T)
        vol = float(np.prod(np.where(C.width > 0, cand.width / np.where(C.width > 0, C.width, 1.0), 1.0)))
        if k is None:
            score = (0, 0, 0.0, -vol)
        else:
            score = (1, -k, _unsafe_overlap(env, trace[k]), -vol)
        if best is None or score < best[0]:
            best = (score, cand)
    return None if best is None else best[1]


def _contract(env: EnvModel, parts: Sequence[Controller], region: Region, outer: Box, keep: Box,
              T: int, iters: int = 12) -> tuple[Box, Certificate | None]:
    """Largest certified box on the segment from ``keep`` out to ``outer``, by bisection."""

    def at(lam: float) -> Box:
        return region_meet_box(region, Box._raw(keep.lo + lam * (outer.lo - keep.lo),
                                                keep.hi + lam * (outer.hi - keep.hi)))

    trace, k, _ = _reach(env, parts, keep, T)
    if k is not None:
        return keep, None
    best = (keep, Certificate(keep, T, tuple(trace[1:T + 1])))
    lo, hi = 0.0, 1.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        B = at(mid)
        trace, k, _ = _reach(env, parts, B, T)
        if k is None:
            lo = mid
            best = (B, Certificate(B, T, tuple(trace[1:T + 1])))
        else:
            hi = mid
    return best


def safe_space(env: EnvModel, g: PwlShield, T: int | None = None, max_trim: int = 40) -> Invariant:
    T = env.horizon if T is None else T
    parts = shield_controllers(g)
    pieces: list[InvariantPiece] = []
    certs: list[Certificate] = []
    trims: list[int] = []
    for i, comp in enumerate(g.components):
        C = region_meet_box(comp.region, env.state_bounds)
        keep = region_meet_box(comp.region, env.init_box)
        if C.is_empty:
            trims.append(0)
            continue
        n_trim = 0
        cert = None
        while True:
            trace, k, u = _reach(env, parts, C, T)
            if k is None:
                cert = Certificate(C, T, tuple(trace[1:T + 1]))
                break
            if n_trim >= max_trim:
                break
            nxt = _trim(env, parts, C, keep, T)
            if nxt is None:
                break
            C = nxt
            n_trim += 1
        if cert is None and not keep.is_empty:
            C, cert = _contract(env, parts, comp.region, env.state_bounds, keep, T)
        trims.append(n_trim)
        if cert is None:
            if not keep.is_empty:
                raise NotCoverable(i, keep)
            continue
        pieces.append(InvariantPiece(i, (C,)))
        certs.append(cert)
    inv = Invariant(tuple(pieces), env.state_dim, T, tuple(certs), tuple(trims))
    if not any(True for _ in inv.boxes):
        raise NotCoverable(-1, env.init_box, "initial states not coverable: no component could be certified")
    if not invariant_covers_box(inv, env.init_box):
        raise NotCoverable(-1, env.init_box, "initial states not coverable by the union of certified boxes")
    return inv


def is_inductive(env: EnvModel, g: PwlShield, phi: Invariant) -> bool:
    """Whether one shield step from any invariant box stays inside the invariant."""
    return all(invariant_covers_box(phi, shield_post(env, g, b)) for b in phi.boxes)


# -- membership -------------------------------------------------------------

def invariant_contains(phi: Invariant, s) -> bool:
    if phi._los.shape[0] == 0:
        return False
    s = np.asarray(s, dtype=float)
    return bool(np.any(np.all(phi._los <= s, axis=1) & np.all(s <= phi._his, axis=1)))


def invariant_contains_batch(phi: Invariant, states: np.ndarray) -> np.ndarray:
    if phi._los.shape[0] == 0:
        return np.zeros(states.shape[0], dtype=bool)
    inside = np.all(phi._los[None] <= states[:, None], axis=2) & np.all(states[:, None] <= phi._his[None], axis=2)
    return np.any(inside, axis=1)


def invariant_covers_box(phi: Invariant, B: Box, depth: int = 8) -> bool:
    if B.is_empty:
        return True
    los, his = phi._los, phi._his
    if los.shape[0] == 0:
        return False
    return _covers(los, his, B.lo, B.hi, depth)


def _split_point(los, his, lo, hi) -> tuple[int, float]:
    """Cut along a face of the piece overlapping [lo, hi] the most; midpoint of the longest axis otherwise."""
    width = hi - lo
    ov = np.clip(np.minimum(his, hi) - np.maximum(los, lo), 0.0, None)
    frac = np.where(width > 0, ov / np.where(width > 0, width, 1.0), 1.0)
    order = np.argsort(-np.prod(frac, axis=1), kind="stable")
    for j in order:
        best = None
        for a in range(lo.size):
            for face in (los[j, a], his[j, a]):
                if lo[a] < face < hi[a]:
                    # prefer the cut that keeps the bigger covered share
                    keep = (hi[a] - face) if face == los[j, a] else (face - lo[a])
                    if best is None or keep > best[0]:
                        best = (keep, a, float(face))
        if best is not None:
            return best[1], best[2]
    a = int(np.argmax(width))
    return a, 0.5 * (lo[a] + hi[a])


def _covers(los, his, lo, hi, depth) -> bool:
    if np.any(np.all(los <= lo, axis=1) & np.all(hi <= his, axis=1)):
        return True
    if depth == 0:
        return False
    # boxes touching [lo, hi]; if none, nothing can cover it
    touching = np.all(los <= hi, axis=1) & np.all(lo <= his, axis=1)
    if not np.any(touching):
        return False
    los, his = los[touching], his[touching]
    a, mid = _split_point(los, his, lo, hi)
    left_hi = hi.copy()
    left_hi[a] = mid
    right_lo = lo.copy()
    right_lo[a] = mid
    return _covers(los, his, lo, left_hi, depth - 1) and _covers(los, his, right_lo, hi, depth - 1)


# -- parameter-interval certification ---------------------------------------

def verify_param_box(env: EnvModel, region: Region, K_box: IntervalMatrix, c_box: Box, phi: Invariant,
                     T: int | None = None, shield: PwlShield | None = None, component: int | None = None,
                     require_cover: bool = False) -> bool:
    """True iff every controller ``K s + c`` with K, c in the boxes is safe on ``region``.

    The iteration starts from ``region`` intersected with each invariant box.
    With ``shield`` and ``component`` given, the interval controller replaces
    that component and the other components keep acting on their own regions;
    otherwise the interval controller acts everywhere.
    """
    T = env.horizon if T is None else T
    if shield is not None:
        if component is None:
            raise ValueError("component index required together with shield")
        parts = shield_controllers(shield)
        parts[component] = (shield.components[component].region, K_box, c_box)
    else:
        parts = [(Region(), K_box, c_box)]
    for P in phi.boxes:
        start = region_meet_box(region, box_meet(P, env.state_bounds))
        if start.is_empty:
            continue
        _, k, _ = _reach(env, parts, start, T, phi if require_cover else None)
        if k is not None:
            return False
    return True


# -- Monte Carlo oracle -----------------------------------------------------

def sample_disturbances(env: EnvModel, modes: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Disturbances inside each state's mode box: uniform, or a random vertex half the time."""
    n = modes.shape[0]
    lo = np.stack([env.modes[m].disturbance.lo for m in range(len(env.modes))])[modes]
    hi = np.stack([env.modes[m].disturbance.hi for m in range(len(env.modes))])[modes]
    u = rng.random((n, env.state_dim))
    vertex = rng.random(n) < 0.5
    u[vertex] = np.round(u[vertex])
    return lo + (hi - lo) * u


def monte_carlo_violations(env: EnvModel, g: PwlShield, start: Box, T: int, n: int,
                           rng: np.random.Generator) -> int:
    """Number of rollouts (of ``n``) that reach an unsafe state within ``T`` shield steps."""
    from .shield import eval_batch

    states = start.sample(rng, n)
    hit = env.unsafe_mask(states)
    for _ in range(T):
        modes = env.mode_index_batch(states)
        acts = np.clip(eval_batch(g, states), env.action_bounds.lo, env.action_bounds.hi)
        states = env.successor_batch(states, acts, sample_disturbances(env, modes, rng), modes)
        hit |= env.unsafe_mask(states)
    return int(hit.sum())
