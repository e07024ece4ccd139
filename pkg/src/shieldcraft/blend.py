"""Neural actor gated by a runtime monitor that falls back to the shield."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .envmodel import EnvModel, reset, step, worst_case_post
from .geometry import Box
from .neural import DaggerConfig, Mlp, dagger_imitate, make_actor
from .shield import PwlShield, eval_batch, eval_shield
from .verifier import Invariant, invariant_contains, invariant_covers_box


@dataclass(frozen=True)
class ActLog:
    action: np.ndarray
    used_network: bool  # the safety indicator Z


@dataclass(frozen=True, eq=False)
class BlendedPolicy:
    """h = (g, phi, f): run f when its worst-case successor stays in phi, else g."""

    g: PwlShield
    phi: Invariant
    f: Mlp
    env: EnvModel

    def safe_for(self, s: np.ndarray, a: np.ndarray) -> bool:
        post = worst_case_post(self.env, Box.point(s), Box.point(self.env.clip_action(a)))
        return invariant_covers_box(self.phi, post)

    def gate(self, s: np.ndarray, proposed: np.ndarray) -> tuple[np.ndarray, bool]:
        if self.safe_for(s, proposed):
            return proposed, True
        return eval_shield(self.g, s), False

    def contains(self, s: np.ndarray) -> bool:
        return invariant_contains(self.phi, s)

    def with_shield(self, g: PwlShield, phi: Invariant) -> "BlendedPolicy":
        return BlendedPolicy(g, phi, self.f, self.env)


def act(h: BlendedPolicy, env: EnvModel, s) -> ActLog:
    s = np.asarray(s, dtype=float)
    a, z = h.gate(s, h.f.forward(s))
    return ActLog(np.asarray(a, dtype=float), z)


def lift(g: PwlShield, phi: Invariant, env: EnvModel, rng: np.random.Generator,
         hidden: tuple[int, ...] = (64, 64), rounds: int | None = None,
         dagger: DaggerConfig | None = None) -> BlendedPolicy:
    """Embed a certified shield: a fresh network imitates g, the monitor keeps it safe."""
    f = make_actor(env, hidden, rng)
    try:
        f = dagger_imitate(f, lambda X: eval_batch(g, X), env, rounds, rng, dagger)
    except (FloatingPointError, ValueError) as e:
        warnings.warn(f"imitation of the shield failed ({e}); continuing with an untrained network")
    return BlendedPolicy(g, phi, f, env)


@dataclass
class RolloutMetrics:
    costs: list[float]          # discounted cost per episode
    violations: int
    zeta: float                 # mean shield-invocation rate, 1 - mean(Z)
    steps: int
    monitor_breaches: int = 0

    @property
    def mean_cost(self) -> float:
        return float(np.mean(self.costs)) if self.costs else float("nan")


def rollout_policy(policy: Callable[[np.ndarray], tuple[np.ndarray, bool]], env: EnvModel, episodes: int,
                   rng: np.random.Generator, contains: Callable[[np.ndarray], bool] | None = None) -> RolloutMetrics:
    """Roll out ``policy(s) -> (action, used_network)`` for whole episodes."""
    costs = []
    violations = steps = shield_steps = breaches = 0
    for _ in range(episodes):
        s = reset(env, rng)
        total, disc = 0.0, 1.0
        for _ in range(env.episode_len):
            a, z = policy(s)
            tr = step(env, s, a, rng)
            total += disc * tr.cost
            disc *= env.gamma
            violations += tr.violated
            shield_steps += not z
            if z and contains is not None and not contains(tr.next_state):
                breaches += 1
            steps += 1
            s = tr.next_state
        costs.append(total)
    zeta = shield_steps / steps if steps else 0.0
    return RolloutMetrics(costs, violations, zeta, steps, breaches)


def rollout(h: BlendedPolicy, env: EnvModel, episodes: int, rng: np.random.Generator) -> RolloutMetrics:
    def policy(s):
        log = act(h, env, s)
        return log.action, log.used_network

    return rollout_policy(policy, env, episodes, rng, h.contains)


def shield_rollout(g: PwlShield, env: EnvModel, episodes: int, rng: np.random.Generator) -> RolloutMetrics:
    """The shield alone (every step counts as a shield step)."""
    return rollout_policy(lambda s: (eval_shield(g, s), False), env, episodes, rng)
