"""Benchmark MDPs with a sampled step and a sound worst-case transformer.

Every environment is a list of modes. A mode is a region of the state space,
an affine map over the stacked vector ``[s; a]`` and a disturbance box added
to the successor. The worst-case transformer pushes boxes through every mode
that may apply; the simulator picks the unique mode containing the state and
draws a disturbance from the mode's box.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .geometry import (
    FP_SLACK,
    AffineMap,
    Box,
    IntervalMatrix,
    Region,
    affine_image,
    axis_pred,
    box_add,
    box_clip,
    box_meet,
    box_product,
    interval_affine_image,
    interval_matvec,
    region_contains,
    region_mask,
    region_meet_box,
)

ENV_NAMES = ("acc", "pendulum", "road", "obstacle2")

DT = 0.1
EPISODE_LEN = 100
GAMMA = 0.99
HORIZON = 50


class ModelingError(RuntimeError):
    pass


class UnknownEnvError(ValueError):
    pass


@dataclass(frozen=True)
class Mode:
    region: Region
    dynamics: AffineMap
    disturbance: Box


# noise(mode_index, states, actions, rng) -> disturbances, one row per state
NoiseFn = Callable[[int, np.ndarray, np.ndarray, np.random.Generator], np.ndarray]
CostFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class Transition:
    next_state: np.ndarray
    cost: float
    violated: bool


@dataclass(frozen=True, eq=False)
class EnvModel:
    name: str
    state_dim: int
    action_dim: int
    init_box: Box
    unsafe: tuple[Box, ...]
    state_bounds: Box
    action_bounds: Box
    modes: tuple[Mode, ...]
    cost_spec: str
    cost_fn: CostFn
    dt: float = DT
    horizon: int = HORIZON
    episode_len: int = EPISODE_LEN
    gamma: float = GAMMA
    noise: NoiseFn | None = None
    noise_spec: str = "uniform over the mode disturbance box"
    cost_scale: float = 1.0
    state_names: tuple[str, ...] = ()
    action_names: tuple[str, ...] = ()
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        n, m = self.state_dim, self.action_dim
        for b, what, d in [(self.init_box, "init_box", n), (self.state_bounds, "state_bounds", n),
                           (self.action_bounds, "action_bounds", m)]:
            if b.dim != d or b.is_empty:
                raise ModelingError(f"{self.name}: {what} must be a non-empty box of dim {d}")
        if not self.state_bounds.contains_box(self.init_box):
            raise ModelingError(f"{self.name}: init_box is not inside state_bounds")
        for u in self.unsafe:
            if u.dim != n:
                raise ModelingError(f"{self.name}: unsafe box has dim {u.dim}, expected {n}")
            if not box_meet(u, self.init_box).is_empty:
                raise ModelingError(f"{self.name}: init_box intersects unsafe box {u}")
        if not self.modes:
            raise ModelingError(f"{self.name}: at least one mode is required")
        for i, md in enumerate(self.modes):
            if md.dynamics.in_dim != n + m or md.dynamics.out_dim != n:
                raise ModelingError(f"{self.name}: mode {i} dynamics must map R^{n + m} -> R^{n}")
            if md.disturbance.dim != n or not md.disturbance.contains(np.zeros(n)):
                raise ModelingError(f"{self.name}: mode {i} disturbance must contain the zero vector")

    # -- concrete semantics -------------------------------------------------

    def mode_index(self, s) -> int:
        for i, md in enumerate(self.modes):
            if region_contains(md.region, s):
                return i
        raise ModelingError(f"{self.name}: state {np.asarray(s).tolist()} lies in no mode region")

    def mode_index_batch(self, states: np.ndarray) -> np.ndarray:
        idx = np.full(states.shape[0], -1, dtype=int)
        for i, md in enumerate(self.modes):
            hit = (idx < 0) & region_mask(md.region, states)
            idx[hit] = i
        if np.any(idx < 0):
            bad = states[np.argmax(idx < 0)]
            raise ModelingError(f"{self.name}: state {bad.tolist()} lies in no mode region")
        return idx

    def clip_action(self, a) -> np.ndarray:
        a = np.asarray(a, dtype=float).reshape(-1)
        return np.clip(a, self.action_bounds.lo, self.action_bounds.hi)

    def clip_state(self, s) -> np.ndarray:
        return np.clip(s, self.state_bounds.lo, self.state_bounds.hi)

    def successor_batch(self, states: np.ndarray, actions: np.ndarray, disturbances: np.ndarray,
                        modes: np.ndarray | None = None) -> np.ndarray:
        """Deterministic successors given explicit disturbances (rows)."""
        if modes is None:
            modes = self.mode_index_batch(states)
        sa = np.concatenate([states, actions], axis=1)
        out = np.empty_like(states)
        for i, md in enumerate(self.modes):
            sel = modes == i
            if np.any(sel):
                out[sel] = md.dynamics.apply_batch(sa[sel])
        out += disturbances
        return np.clip(out, self.state_bounds.lo, self.state_bounds.hi)

    def sample_noise(self, mode: int, states: np.ndarray, actions: np.ndarray,
                     rng: np.random.Generator) -> np.ndarray:
        if self.noise is not None:
            return self.noise(mode, states, actions, rng)
        d = self.modes[mode].disturbance
        return d.lo + (d.hi - d.lo) * rng.random(states.shape)

    def cost(self, s, a) -> float:
        return float(self.cost_fn(np.atleast_2d(s), np.atleast_2d(a))[0])

    def unsafe_mask(self, states: np.ndarray) -> np.ndarray:
        hit = np.zeros(states.shape[0], dtype=bool)
        for u in self.unsafe:
            hit |= np.all((states >= u.lo) & (states <= u.hi), axis=1)
        return hit

    def describe(self) -> dict:
        return {
            "name": self.name,
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "state_names": list(self.state_names),
            "action_names": list(self.action_names),
            "dt": self.dt,
            "horizon": self.horizon,
            "episode_len": self.episode_len,
            "gamma": self.gamma,
            "init_box": self.init_box.to_json(),
            "unsafe": [u.to_json() for u in self.unsafe],
            "state_bounds": self.state_bounds.to_json(),
            "action_bounds": self.action_bounds.to_json(),
            "modes": [{"region": md.region.to_json(), "dynamics": md.dynamics.to_json(),
                       "disturbance": md.disturbance.to_json()} for md in self.modes],
            "cost_spec": self.cost_spec,
            "noise_spec": self.noise_spec,
            **self.extras,
        }


def reset(env: EnvModel, rng: np.random.Generator) -> np.ndarray:
    b = env.init_box
    return b.lo + (b.hi - b.lo) * rng.random(env.state_dim)


def step(env: EnvModel, s, a, rng: np.random.Generator) -> Transition:
    s = np.asarray(s, dtype=float).reshape(1, -1)
    a = env.clip_action(a).reshape(1, -1)
    mode = env.mode_index(s[0])
    w = env.sample_noise(mode, s, a, rng)
    nxt = env.successor_batch(s, a, w, np.array([mode]))[0]
    return Transition(nxt, env.cost(s[0], a[0]), is_unsafe(env, nxt))


def is_unsafe(env: EnvModel, s) -> bool:
    return any(u.contains(s) for u in env.unsafe)


def worst_case_post(env: EnvModel, S: Box, A: Box) -> Box:
    """Box containing every successor of every ``s in S`` under every ``a in A``."""
    n = env.state_dim
    if S.is_empty or A.is_empty:
        return Box.empty(n)
    S = box_meet(S, env.state_bounds)
    if S.is_empty:
        return S
    A = box_clip(A, env.action_bounds)
    lo = hi = None
    for md in env.modes:
        piece = region_meet_box(md.region, S)
        if piece.is_empty:
            continue
        img = box_add(affine_image(md.dynamics, box_product(piece, A)), md.disturbance)
        if lo is None:
            lo, hi = img.lo, img.hi
        else:
            lo, hi = np.minimum(lo, img.lo), np.maximum(hi, img.hi)
    if lo is None:
        return Box.empty(n)
    return box_clip(Box._raw(lo, hi), env.state_bounds)


def closed_loop_post(env: EnvModel, S: Box, K: IntervalMatrix, c: Box) -> Box:
    """Successors of ``S`` under every controller ``a = K s + c`` with K, c in the given intervals.

    When the controller's action range stays inside ``action_bounds`` the
    action is substituted into the dynamics symbolically, which keeps the
    correlation between state and action. Otherwise the action range is
    clipped and treated as an independent input.
    """
    n = env.state_dim
    if S.is_empty:
        return S
    S = box_meet(S, env.state_bounds)
    if S.is_empty:
        return S
    A = interval_affine_image(K, c, S)
    if not env.action_bounds.contains_box(A):
        return worst_case_post(env, S, box_clip(A, env.action_bounds))
    lo = hi = None
    for md in env.modes:
        piece = region_meet_box(md.region, S)
        if piece.is_empty:
            continue
        ms = md.dynamics.matrix[:, :n]
        ma = md.dynamics.matrix[:, n:]
        map_ = np.maximum(ma, 0.0)
        man = np.minimum(ma, 0.0)
        # closed-loop matrix Ms + Ma K as an interval, bias Ma c + d exactly
        klo = ms + map_ @ K.lo + man @ K.hi
        khi = ms + map_ @ K.hi + man @ K.lo
        blo = map_ @ c.lo + man @ c.hi + md.dynamics.bias
        bhi = map_ @ c.hi + man @ c.lo + md.dynamics.bias
        ilo, ihi = interval_matvec(klo, khi, piece.lo, piece.hi)
        ilo = ilo + blo + md.disturbance.lo - FP_SLACK
        ihi = ihi + bhi + md.disturbance.hi + FP_SLACK
        if lo is None:
            lo, hi = ilo, ihi
        else:
            lo, hi = np.minimum(lo, ilo), np.maximum(hi, ihi)
    if lo is None:
        return Box.empty(n)
    return box_clip(Box._raw(lo, hi), env.state_bounds)


# -- benchmark definitions --------------------------------------------------

def _acc() -> EnvModel:
    dt = DT
    # state (d, v_rel), action a_ego; v_rel' = v_rel + dt (a_lead - a_ego)
    dyn = AffineMap([[1.0, dt, 0.0], [0.0, 1.0, -dt]], [0.0, 0.0])
    dist = Box([0.0, -dt * 1.0], [0.0, dt * 1.0])

    def noise(mode, states, actions, rng):
        a_lead = np.clip(rng.normal(0.0, 0.5, size=states.shape[0]), -1.0, 1.0)
        w = np.zeros_like(states)
        w[:, 1] = dt * a_lead
        return w

    def cost(states, actions):
        return np.maximum(states[:, 0], 0.0)

    return EnvModel(
        name="acc", state_dim=2, action_dim=1,
        init_box=Box([9.9, -0.1], [10.1, 0.1]),
        unsafe=(Box([-1.0, -5.0], [0.0, 5.0]),),
        state_bounds=Box([-1.0, -5.0], [30.0, 5.0]),
        action_bounds=Box([-2.0], [2.0]),
        modes=(Mode(Region(), dyn, dist),),
        cost_spec="c = max(d, 0)",
        cost_fn=cost, noise=noise,
        noise_spec="lead acceleration ~ N(0, 0.5^2) clipped to [-1, 1]",
        cost_scale=10.0,
        state_names=("d", "v_rel"), action_names=("a_ego",),
    )


def _sin_envelope(lo: float, hi: float, n: int = 10_000) -> tuple[float, float, float]:
    """Affine fit ``alpha*x + beta`` and radius ``r`` with |sin x - alpha x - beta| <= r on [lo, hi]."""
    xs = np.linspace(lo, hi, n)
    ys = np.sin(xs)
    secant = (ys[-1] - ys[0]) / (hi - lo)
    best = None
    for alpha in np.linspace(secant - 0.5, secant + 0.5, 2001):
        res = ys - alpha * xs
        r = 0.5 * (res.max() - res.min())
        if best is None or r < best[2]:
            best = (alpha, 0.5 * (res.max() + res.min()), r)
    alpha, beta, r = best
    # grid spacing times the Lipschitz constant of the residual covers off-grid points
    r += (1.0 + abs(alpha)) * (hi - lo) / (n - 1) + 1e-9
    return float(alpha), float(beta), float(r)


def _pendulum() -> EnvModel:
    dt = DT
    g_over_l = 10.0
    inertia = 1.0
    segments = [(-math.pi, -1.0), (-1.0, 1.0), (1.0, math.pi)]
    fits = [_sin_envelope(a, b) for a, b in segments]
    modes = []
    for k, (alpha, beta, r) in enumerate(fits):
        # theta' = theta + dt w ; w' = w + dt (-(g/l)(alpha theta + beta + e) + u / I)
        dyn = AffineMap([[1.0, dt, 0.0], [-dt * g_over_l * alpha, 1.0, dt / inertia]],
                        [0.0, -dt * g_over_l * beta])
        rad = dt * g_over_l * r
        dist = Box([0.0, -rad], [0.0, rad])
        if k == 0:
            region = Region((axis_pred(2, 0, -1.0),))
        elif k == 1:
            region = Region((axis_pred(2, 0, 1.0),), (axis_pred(2, 0, -1.0),))
        else:
            region = Region((), (axis_pred(2, 0, 1.0),))
        modes.append(Mode(region, dyn, dist))

    def noise(mode, states, actions, rng):
        alpha, beta, _ = fits[mode]
        th = states[:, 0]
        w = np.zeros_like(states)
        w[:, 1] = -dt * g_over_l * (np.sin(th) - alpha * th - beta)
        return w

    def cost(states, actions):
        return states[:, 0] ** 2 + 0.1 * states[:, 1] ** 2 + 0.001 * actions[:, 0] ** 2

    return EnvModel(
        name="pendulum", state_dim=2, action_dim=1,
        init_box=Box([-0.3, -0.1], [0.3, 0.1]),
        unsafe=(Box([-math.pi, 1.5], [math.pi, 2.0]), Box([-math.pi, -2.0], [math.pi, -1.5])),
        state_bounds=Box([-math.pi, -2.0], [math.pi, 2.0]),
        action_bounds=Box([-8.0], [8.0]),
        modes=tuple(modes),
        cost_spec="c = theta^2 + 0.1 omega^2 + 0.001 u^2",
        cost_fn=cost, noise=noise,
        noise_spec="exact residual of sin(theta) against the mode's affine fit",
        cost_scale=1.0,
        state_names=("theta", "omega"), action_names=("u",),
        extras={"sin_envelopes": [{"segment": list(s), "alpha": a, "beta": b, "radius": r}
                                  for s, (a, b, r) in zip(segments, fits)]},
    )


def _road() -> EnvModel:
    dt = DT
    dyn = AffineMap([[1.0, dt, 0.0], [0.0, 1.0, dt]], [0.0, 0.0])

    def cost(states, actions):
        return np.abs(states[:, 0] - 10.0)

    return EnvModel(
        name="road", state_dim=2, action_dim=1,
        init_box=Box([0.0, 0.0], [0.1, 0.1]),
        unsafe=(Box([-2.0, 2.0], [15.0, 3.0]),),
        state_bounds=Box([-2.0, -3.0], [15.0, 3.0]),
        action_bounds=Box([-2.0], [2.0]),
        modes=(Mode(Region(), dyn, Box([0.0, 0.0], [0.0, 0.0])),),
        cost_spec="c = |p - 10|",
        cost_fn=cost,
        noise_spec="none",
        cost_scale=10.0,
        state_names=("p", "v"), action_names=("a",),
        extras={"goal": [10.0]},
    )


def _obstacle2() -> EnvModel:
    dt = DT
    m = np.zeros((4, 6))
    m[:4, :4] = np.eye(4)
    m[0, 2] = m[1, 3] = dt
    m[2, 4] = m[3, 5] = dt
    dyn = AffineMap(m, np.zeros(4))
    dist = Box([0.0, 0.0, -0.02, -0.02], [0.0, 0.0, 0.02, 0.02])
    goal = np.array([5.0, 5.0])

    def cost(states, actions):
        return np.linalg.norm(states[:, :2] - goal, axis=1)

    return EnvModel(
        name="obstacle2", state_dim=4, action_dim=2,
        init_box=Box([0.0, 0.0, -0.05, -0.05], [0.2, 0.2, 0.05, 0.05]),
        unsafe=(Box([2.0, 2.0, -2.0, -2.0], [3.0, 3.0, 2.0, 2.0]),),
        state_bounds=Box([-1.0, -1.0, -2.0, -2.0], [7.0, 7.0, 2.0, 2.0]),
        action_bounds=Box([-1.0, -1.0], [1.0, 1.0]),
        modes=(Mode(Region(), dyn, dist),),
        cost_spec="c = ||(x, y) - (5, 5)||",
        cost_fn=cost,
        cost_scale=5.0,
        state_names=("x", "y", "vx", "vy"), action_names=("ax", "ay"),
        extras={"goal": goal.tolist()},
    )


_BUILDERS = {"acc": _acc, "pendulum": _pendulum, "road": _road, "obstacle2": _obstacle2}
_CACHE: dict[str, EnvModel] = {}


def make_env(name: str) -> EnvModel:
    if name not in _BUILDERS:
        raise UnknownEnvError(f"unknown environment {name!r}; available: {', '.join(ENV_NAMES)}")
    if name not in _CACHE:
        _CACHE[name] = _BUILDERS[name]()
    return _CACHE[name]
