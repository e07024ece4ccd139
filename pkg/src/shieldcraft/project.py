"""Shield re-synthesis: cut a shield component in two and fit each half to the network.

Each half is fitted by projected gradient descent over its affine parameters,
where the projection clamps into a parameter interval that the verifier has
certified as a whole.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .blend import BlendedPolicy
from .envmodel import EnvModel
from .geometry import AffineMap, Box, IntervalMatrix, LinPred, Region, region_meet_box
from .neural import Mlp
from .shield import PwlShield, eval_batch, region_index_batch, split
from .verifier import (
    Certificate,
    Invariant,
    NotCoverable,
    safe_space,
    verify_bounded,
    verify_param_box,
)


class NotImitable(RuntimeError):
    """Even the unperturbed component fails verification on its region."""


@dataclass
class ProjectConfig:
    t_cut: int = 8                 # cutting-plane candidates per call
    pgd_iters: int = 10
    pgd_step: float = 1.0          # alpha, as a multiple of 1/L for the squared loss
    dagger_states: int = 500       # imitation states per region (cap)
    min_states: int = 32           # top up with uniform samples below this
    init_half_width: float = 0.5
    trim_iters: int = 8
    sample_size: int = 2_000       # visited states used for scoring
    horizon: int | None = None

    def __post_init__(self):
        if self.t_cut < 0 or self.pgd_iters < 0 or self.pgd_step < 0:
            raise ValueError("ProjectConfig.t_cut, pgd_iters and pgd_step must be non-negative")
        for name in ("dagger_states", "min_states", "init_half_width", "trim_iters", "sample_size"):
            if not getattr(self, name) > 0:
                raise ValueError(f"ProjectConfig.{name} must be positive")


@dataclass
class CutCandidate:
    component: int
    plane: LinPred
    pieces: tuple[AffineMap, AffineMap]
    shield: PwlShield
    score: float
    imitable: tuple[bool, bool] = (True, True)

    def to_json(self) -> dict:
        return {"component": self.component, "plane": self.plane.to_json(), "score": self.score,
                "imitable": list(self.imitable), "pieces": [p.to_json() for p in self.pieces]}


# -- divergence -----------------------------------------------------------------

def _targets(h: BlendedPolicy, states: np.ndarray) -> np.ndarray:
    return h.f.forward(states)


def divergence(g: PwlShield, h: BlendedPolicy, states: np.ndarray) -> float:
    """Mean squared distance between the shield's actions and the network's on ``states``."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    if states.shape[0] == 0:
        raise ValueError("divergence needs at least one state")
    d = eval_batch(g, states) - _targets(h, states)
    return float(np.mean(np.sum(d * d, axis=1)))


def linear_loss(theta: np.ndarray, X: np.ndarray, Y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error of ``K x + c`` against ``Y`` and its gradient in ``AffineMap.params`` order."""
    m, n = Y.shape[1], X.shape[1]
    K = theta[:m * n].reshape(m, n)
    c = theta[m * n:]
    r = X @ K.T + c - Y
    N = X.shape[0]
    loss = float(np.sum(r * r) / N)
    dK = 2.0 * r.T @ X / N
    dc = 2.0 * r.sum(axis=0) / N
    return loss, np.concatenate([dK.ravel(), dc])


def _lipschitz(X: np.ndarray) -> float:
    phi = np.hstack([X, np.ones((X.shape[0], 1))])
    return 2.0 * float(np.linalg.eigvalsh(phi.T @ phi / X.shape[0])[-1])


# -- cutting planes and selection ---------------------------------------------

def cutting_plane(region: Region, visited: np.ndarray, rng: np.random.Generator,
                  bounds: Box | None = None) -> LinPred:
    """A unit-normal plane through the median of the visited states in ``region``.

    Half the time the normal is a coordinate axis. With fewer than two states
    in the region the plane bisects the longest axis of the region's hull.
    """
    from .geometry import region_mask

    visited = np.atleast_2d(np.asarray(visited, dtype=float))
    dim = visited.shape[1] if visited.size else (bounds.dim if bounds is not None else region.positive[0].dim)
    inside = visited[region_mask(region, visited)] if visited.size else np.empty((0, dim))
    if inside.shape[0] < 2:
        if bounds is None:
            raise ValueError("cutting_plane fallback needs bounds")
        hull = region_meet_box(region, bounds)
        hull = bounds if hull.is_empty else hull
        k = int(np.argmax(hull.width))
        w = np.zeros(dim)
        w[k] = 1.0
        return LinPred(w, float(hull.center[k]))
    if rng.random() < 0.5:
        w = np.zeros(dim)
        w[rng.integers(dim)] = 1.0
    else:
        w = rng.normal(size=dim)
        w /= np.linalg.norm(w)
    return LinPred(w, float(np.median(inside @ w)))


def component_divergences(g: PwlShield, h: BlendedPolicy, states: np.ndarray) -> np.ndarray:
    idx = region_index_batch(g, states)
    d = eval_batch(g, states) - _targets(h, states)
    per = np.sum(d * d, axis=1)
    return np.bincount(idx, weights=per, minlength=len(g))


def select_component(g: PwlShield, h: BlendedPolicy, visited: np.ndarray) -> int:
    """Component with the largest summed divergence over visited states; ties go low."""
    return int(np.argmax(component_divergences(g, h, np.atleast_2d(visited))))


# -- safe parameter regions -------------------------------------------------------

def _param_boxes(theta_lo: np.ndarray, theta_hi: np.ndarray, m: int, n: int) -> tuple[IntervalMatrix, Box]:
    k = m * n
    return (IntervalMatrix(theta_lo[:k].reshape(m, n), theta_hi[:k].reshape(m, n)),
            Box._raw(theta_lo[k:].copy(), theta_hi[k:].copy()))


def compute_safe_region(env: EnvModel, region: Region, g_lin: AffineMap, phi: Invariant, T: int | None = None,
                        cfg: ProjectConfig | None = None, half_width: np.ndarray | float | None = None,
                        shield: PwlShield | None = None, component: int | None = None,
                        check_center: bool = True) -> tuple[IntervalMatrix, Box]:
    """A certified parameter interval around ``g_lin``.

    Starts from ``g_lin`` plus/minus ``half_width`` and halves the widest
    intervals until the whole interval verifies. Falls back to the degenerate
    interval when trims run out. ``check_center=False`` skips re-verifying
    ``g_lin`` itself (the caller knows it lies in a certified interval).
    """
    cfg = ProjectConfig() if cfg is None else cfg
    m, n = g_lin.out_dim, g_lin.in_dim
    theta = g_lin.params()
    ctx = dict(shield=shield, component=component)
    K0, c0 = _param_boxes(theta, theta, m, n)
    if check_center and not verify_param_box(env, region, K0, c0, phi, T, **ctx):
        raise NotImitable("component not safely imitable: the current piece fails verification on its region")
    w = np.broadcast_to(np.asarray(cfg.init_half_width if half_width is None else half_width, dtype=float),
                        theta.shape).copy()
    for _ in range(cfg.trim_iters + 1):
        K, c = _param_boxes(theta - w, theta + w, m, n)
        if verify_param_box(env, region, K, c, phi, T, **ctx):
            return K, c
        widest = w >= w.max() * (1 - 1e-12)
        w[widest] *= 0.5
    return K0, c0


def _imitation_states(env: EnvModel, g: PwlShield, j: int, states: np.ndarray, cfg: ProjectConfig,
                      rng: np.random.Generator) -> np.ndarray:
    X = states[region_index_batch(g, states) == j] if states.size else states
    if X.shape[0] > cfg.dagger_states:
        X = X[rng.choice(X.shape[0], cfg.dagger_states, replace=False)]
    if X.shape[0] < cfg.min_states:
        hull = region_meet_box(g.components[j].region, env.state_bounds)
        if not hull.is_empty:
            extra = hull.sample(rng, 4 * cfg.min_states)
            extra = extra[region_index_batch(g, extra) == j][:cfg.min_states - X.shape[0]]
            X = np.concatenate([X.reshape(-1, env.state_dim), extra])
    return X


def imitate_safely(env: EnvModel, f: Mlp, g_lin: AffineMap, region: Region, phi: Invariant,
                   cfg: ProjectConfig | None = None, rng: np.random.Generator | None = None,
                   states: np.ndarray | None = None, shield: PwlShield | None = None,
                   component: int | None = None, log: dict | None = None) -> AffineMap:
    """Fit an affine piece to ``f`` on ``states`` by projected gradient descent.

    Every iterate is clamped into a parameter interval certified around the
    previous iterate, so the result is always certified. ``log`` (if given)
    receives the losses and the final certified interval.
    """
    cfg = ProjectConfig() if cfg is None else cfg
    rng = np.random.default_rng(0) if rng is None else rng
    T = cfg.horizon if cfg.horizon is not None else env.horizon
    m, n = g_lin.out_dim, g_lin.in_dim
    theta = g_lin.params()
    K_box, c_box = _param_boxes(theta, theta, m, n)
    losses: list[float] = []
    X = np.empty((0, n)) if states is None else np.atleast_2d(np.asarray(states, dtype=float))
    if X.shape[0] and cfg.pgd_iters and cfg.pgd_step > 0:
        Y = f.forward(X)
        step = cfg.pgd_step / _lipschitz(X)
        lo = hi = None
        for _ in range(cfg.pgd_iters):
            loss, grad = linear_loss(theta, X, Y)
            losses.append(loss)
            proposal = theta - step * grad
            # the certified interval is re-centred only when the step would leave it
            if lo is None or np.any(proposal < lo) or np.any(proposal > hi):
                current = AffineMap.from_params(theta, m, n)
                hw = np.maximum(cfg.init_half_width, 2.0 * step * np.abs(grad))
                K_box, c_box = compute_safe_region(env, region, current, phi, T, cfg, hw, shield, component,
                                                   check_center=lo is None)
                lo = np.concatenate([K_box.lo.ravel(), c_box.lo])
                hi = np.concatenate([K_box.hi.ravel(), c_box.hi])
            new = np.clip(proposal, lo, hi)
            if np.array_equal(new, theta):
                break
            theta = new
        losses.append(linear_loss(theta, X, Y)[0])
    if log is not None:
        log.update(losses=losses, K_lo=K_box.lo.tolist(), K_hi=K_box.hi.tolist(),
                   c_lo=c_box.lo.tolist(), c_hi=c_box.hi.tolist())
    return AffineMap.from_params(theta, m, n)


# -- projection -------------------------------------------------------------------

@dataclass
class ProjectResult:
    shield: PwlShield
    invariant: Invariant
    log: dict = field(default_factory=dict)


def _candidate(env: EnvModel, h: BlendedPolicy, i: int, psi: LinPred, states: np.ndarray,
               cfg: ProjectConfig, rng: np.random.Generator, audit: list) -> CutCandidate:
    base = h.g.components[i].policy
    g = split(h.g, i, psi, base, base)
    ok = []
    for j in (i, i + 1):
        X = _imitation_states(env, g, j, states, cfg, rng)
        rec: dict = {"component": j}
        try:
            piece = imitate_safely(env, h.f, g.components[j].policy, g.components[j].region, h.phi, cfg, rng,
                                   X, shield=g, component=j, log=rec)
            g = g.with_policy(j, piece)
            ok.append(True)
            rec["params"] = piece.params().tolist()
            audit.append(rec)
        except NotImitable:
            ok.append(False)
    return CutCandidate(i, psi, (g.components[i].policy, g.components[i + 1].policy), g,
                        divergence(g, h, states), tuple(ok))


def project(env: EnvModel, h: BlendedPolicy, visited: np.ndarray, cfg: ProjectConfig | None = None,
            rng: np.random.Generator | None = None) -> ProjectResult:
    """Keep-best over cutting-plane candidates, then certify the winner.

    Candidates are tried in score order (ties by candidate index); the first
    that scores strictly below the incumbent and certifies wins. If none
    does, the incumbent shield and invariant are returned unchanged.
    """
    cfg = ProjectConfig() if cfg is None else cfg
    rng = np.random.default_rng(0) if rng is None else rng
    visited = np.atleast_2d(np.asarray(visited, dtype=float))
    if visited.shape[0] > cfg.sample_size:
        visited = visited[rng.choice(visited.shape[0], cfg.sample_size, replace=False)]
    log: dict = {"candidates": [], "chosen": None, "fallback": None, "imitations": []}
    if cfg.t_cut == 0 or visited.shape[0] == 0:
        log["fallback"] = "no candidates"
        return ProjectResult(h.g, h.phi, log)
    incumbent = divergence(h.g, h, visited)
    log["incumbent_score"] = incumbent
    cands: list[CutCandidate] = []
    contrib = component_divergences(h.g, h, visited)
    # the first candidate cuts the argmax component; later ones cycle through the rest by contribution
    ranked = [int(i) for i in np.argsort(-contrib, kind="stable") if contrib[i] > 0] or [select_component(h.g, h, visited)]
    for k in range(cfg.t_cut):
        i = ranked[k % len(ranked)]
        psi = cutting_plane(h.g.components[i].region, visited, rng, env.state_bounds)
        cand = _candidate(env, h, i, psi, visited, cfg, rng, log["imitations"])
        cands.append(cand)
        log["candidates"].append(cand.to_json())
    order = sorted(range(len(cands)), key=lambda k: (cands[k].score, k))
    for k in order:
        cand = cands[k]
        if not cand.score < incumbent:
            break
        try:
            phi = safe_space(env, cand.shield, cfg.horizon)
        except NotCoverable as e:
            log.setdefault("rejected", []).append({"candidate": k, "reason": str(e)})
            continue
        if not isinstance(verify_bounded(env, cand.shield, env.init_box, cfg.horizon), Certificate):
            log.setdefault("rejected", []).append({"candidate": k, "reason": "init box not certified"})
            continue
        log["chosen"] = k
        log["score"] = cand.score
        log["trims"] = list(phi.trims)
        log["components"] = len(cand.shield)
        return ProjectResult(cand.shield, phi, log)
    log["fallback"] = "incumbent kept"
    log["score"] = incumbent
    return ProjectResult(h.g, h.phi, log)
