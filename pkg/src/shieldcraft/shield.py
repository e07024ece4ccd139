"""Piecewise-affine shields with first-match guard semantics."""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from typing import Sequence

import numpy as np

from .geometry import AffineMap, Box, GeometryError, LinPred, Region


class ShieldError(ValueError):
    pass


class NoMatchingComponent(ShieldError):
    pass


@dataclass(frozen=True)
class ShieldComponent:
    guard: tuple[LinPred, ...]
    policy: AffineMap
    region: Region
    # False when the region over-approximates the first-match region
    exact: bool = True


def _effective_region(guards: Sequence[tuple[LinPred, ...]], i: int) -> tuple[Region, bool]:
    own = guards[i]
    negatives: list[LinPred] = []
    exact = True
    for j in range(i):
        extra = [p for p in guards[j] if p not in own]
        if len(extra) == 1:
            if extra[0] not in negatives:
                negatives.append(extra[0])
        else:
            # either unreachable (extra empty) or a disjunction a Region cannot hold
            exact = False
    return Region(tuple(own), tuple(negatives)), exact


class PwlShield:
    """Ordered list of ``(guard, affine policy)``; the first satisfied guard wins.

    ``action_bounds`` (optional) clips every action the shield emits.
    """

    def __init__(self, components: Sequence[tuple[Sequence[LinPred], AffineMap]],
                 action_bounds: Box | None = None):
        if not components:
            raise ShieldError("a shield needs at least one component")
        guards = [tuple(g) for g, _ in components]
        policies = [p for _, p in components]
        n = policies[0].in_dim
        m = policies[0].out_dim
        for k, (g, p) in enumerate(zip(guards, policies)):
            if p.in_dim != n or p.out_dim != m:
                raise ShieldError(f"component {k}: policy is {p.out_dim}x{p.in_dim}, expected {m}x{n}")
            for q in g:
                if q.dim != n:
                    raise ShieldError(f"component {k}: guard predicate has dim {q.dim}, expected {n}")
        if action_bounds is not None and action_bounds.dim != m:
            raise ShieldError(f"action_bounds has dim {action_bounds.dim}, expected {m}")
        comps = []
        for k in range(len(guards)):
            region, exact = _effective_region(guards, k)
            comps.append(ShieldComponent(guards[k], policies[k], region, exact))
        self.components: tuple[ShieldComponent, ...] = tuple(comps)
        self.state_dim = n
        self.action_dim = m
        self.action_bounds = action_bounds

    def __len__(self) -> int:
        return len(self.components)

    def pairs(self) -> list[tuple[tuple[LinPred, ...], AffineMap]]:
        return [(c.guard, c.policy) for c in self.components]

    def with_policy(self, i: int, policy: AffineMap) -> "PwlShield":
        pairs = self.pairs()
        pairs[i] = (pairs[i][0], policy)
        return PwlShield(pairs, self.action_bounds)

    def clip(self, a: np.ndarray) -> np.ndarray:
        if self.action_bounds is None:
            return a
        return np.clip(a, self.action_bounds.lo, self.action_bounds.hi)

    def __eq__(self, other):
        if not isinstance(other, PwlShield):
            return NotImplemented
        return self.pairs() == other.pairs() and self.action_bounds == other.action_bounds

    def __repr__(self):
        return f"PwlShield({len(self)} components)"


def region_index(g: PwlShield, s) -> int:
    s = np.asarray(s, dtype=float)
    for i, c in enumerate(g.components):
        if all(float(np.dot(p.w, s)) <= p.b for p in c.guard):
            return i
    raise NoMatchingComponent(f"no shield component matches state {s.tolist()}")


def region_index_batch(g: PwlShield, states: np.ndarray) -> np.ndarray:
    idx = np.full(states.shape[0], -1, dtype=int)
    for i, c in enumerate(g.components):
        hit = idx < 0
        for p in c.guard:
            hit &= states @ p.w <= p.b
        idx[hit] = i
    if np.any(idx < 0):
        bad = states[np.argmax(idx < 0)]
        raise NoMatchingComponent(f"no shield component matches state {bad.tolist()}")
    return idx


def eval_shield(g: PwlShield, s) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    return g.clip(g.components[region_index(g, s)].policy(s))


def eval_batch(g: PwlShield, states: np.ndarray) -> np.ndarray:
    idx = region_index_batch(g, states)
    out = np.empty((states.shape[0], g.action_dim))
    for i, c in enumerate(g.components):
        sel = idx == i
        if np.any(sel):
            out[sel] = c.policy.apply_batch(states[sel])
    if g.action_bounds is not None:
        out = np.clip(out, g.action_bounds.lo, g.action_bounds.hi)
    return out


def split(g: PwlShield, i: int, psi: LinPred, g1: AffineMap, g2: AffineMap) -> PwlShield:
    """Replace component ``i`` by ``(guard_i + [psi], g1)`` followed by ``(guard_i, g2)``."""
    if not 0 <= i < len(g):
        raise ShieldError(f"component index {i} out of range for a {len(g)}-component shield")
    pairs = g.pairs()
    guard = pairs[i][0]
    new = pairs[:i] + [(guard + (psi,), g1), (guard, g2)] + pairs[i + 1:]
    return PwlShield(new, g.action_bounds)


# -- serialization ----------------------------------------------------------

def shield_to_json(g: PwlShield) -> dict:
    d = {
        "state_dim": g.state_dim,
        "action_dim": g.action_dim,
        "components": [{"guard": [p.to_json() for p in c.guard], **c.policy.to_json()}
                       for c in g.components],
    }
    if g.action_bounds is not None:
        d["action_bounds"] = g.action_bounds.to_json()
    return d


def shield_from_json(d: dict) -> PwlShield:
    if not isinstance(d, dict):
        raise ShieldError("shield JSON must be an object")
    for key in ("state_dim", "action_dim", "components"):
        if key not in d:
            raise ShieldError(f"shield JSON is missing the {key!r} key")
    n, m = int(d["state_dim"]), int(d["action_dim"])
    comps = []
    try:
        for k, c in enumerate(d["components"]):
            guard = tuple(LinPred.from_json(p) for p in c.get("guard", []))
            policy = AffineMap.from_json(c)
            if policy.in_dim != n or policy.out_dim != m:
                raise ShieldError(f"component {k}: K must be {m}x{n}, got {policy.out_dim}x{policy.in_dim}")
            comps.append((guard, policy))
        bounds = Box.from_json(d["action_bounds"]) if "action_bounds" in d else None
    except (GeometryError, KeyError, TypeError) as e:
        raise ShieldError(f"invalid shield component: {e}") from e
    return PwlShield(comps, bounds)


def serialize(g: PwlShield, invariant=None, indent: int | None = 2) -> bytes:
    d = shield_to_json(g)
    if invariant is not None:
        d["invariant"] = invariant.to_json()
    # json writes floats with repr, the shortest round-trip form
    return json.dumps(d, indent=indent).encode()


def deserialize(data: bytes | str) -> PwlShield:
    try:
        d = json.loads(data)
    except json.JSONDecodeError as e:
        raise ShieldError(f"malformed shield JSON: {e}") from e
    return shield_from_json(d)


def load_checkpoint(data: bytes | str):
    """Return ``(shield, invariant or None)`` from checkpoint JSON."""
    from .verifier import Invariant

    d = json.loads(data)
    g = shield_from_json(d)
    inv = Invariant.from_json(d["invariant"]) if "invariant" in d else None
    return g, inv


def initial_shield(env_name: str) -> PwlShield:
    """The hand-written starting shield shipped for ``env_name``."""
    try:
        text = resources.files("shieldcraft.shields").joinpath(f"{env_name}.json").read_text()
    except FileNotFoundError as e:
        raise ShieldError(f"no shipped shield for environment {env_name!r}") from e
    return deserialize(text)
