"""Small numpy networks with hand-written backprop, a DDPG-lite trainer and DAgger."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .envmodel import EnvModel, reset
from .geometry import Box


class Mlp:
    """Fully connected net: tanh hidden layers, linear output.

    Inputs are rescaled from ``in_box`` to [-1, 1]. With ``out_box`` set the
    output is squashed into it by a scaled tanh (actors); otherwise it stays
    linear (critics).
    """

    def __init__(self, sizes: Sequence[int], in_box: Box, out_box: Box | None = None,
                 rng: np.random.Generator | None = None, final_scale: float = 3e-3):
        if len(sizes) < 2 or any(int(s) < 1 for s in sizes):
            raise ValueError(f"invalid layer sizes {list(sizes)}")
        if in_box.dim != sizes[0]:
            raise ValueError(f"input box has dim {in_box.dim}, first layer expects {sizes[0]}")
        if out_box is not None and out_box.dim != sizes[-1]:
            raise ValueError(f"output box has dim {out_box.dim}, last layer gives {sizes[-1]}")
        rng = np.random.default_rng() if rng is None else rng
        self.sizes = tuple(int(s) for s in sizes)
        self.in_box = in_box
        self.out_box = out_box
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for k, (n_in, n_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            last = k == len(self.sizes) - 2
            scale = final_scale if last else 1.0 / np.sqrt(n_in)
            self.weights.append(rng.uniform(-scale, scale, (n_out, n_in)))
            self.biases.append(np.zeros(n_out) if not last else rng.uniform(-scale, scale, n_out))
        self._in_mid = in_box.center
        half = 0.5 * in_box.width
        self._in_half = np.where(half > 0, half, 1.0)
        if out_box is not None:
            self._out_mid = out_box.center
            self._out_half = 0.5 * out_box.width

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, theta: np.ndarray) -> None:
        i = 0
        for p in self.params():
            p[...] = theta[i:i + p.size].reshape(p.shape)
            i += p.size

    def copy(self) -> "Mlp":
        return copy.deepcopy(self)

    # -- passes ---------------------------------------------------------------

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.forward_cache(x)[0]

    def forward_cache(self, x: np.ndarray):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        X = np.atleast_2d(x)
        if X.shape[1] != self.in_dim:
            raise ValueError(f"input has dim {X.shape[1]}, network expects {self.in_dim}")
        h = (X - self._in_mid) / self._in_half
        acts = [h]
        n = len(self.weights)
        for k in range(n):
            z = h @ self.weights[k].T + self.biases[k]
            h = np.tanh(z) if k < n - 1 else z
            acts.append(h)
        y = h
        if self.out_box is not None:
            y = self._out_mid + self._out_half * np.tanh(h)
        out = y[0] if single else y
        return out, (acts, y, single)

    def backward(self, cache, dy: np.ndarray):
        """Gradients of ``sum(dy * y)``: (param grads in ``params()`` order, input grad)."""
        acts, y, single = cache
        g = np.atleast_2d(np.asarray(dy, dtype=float))
        if self.out_box is not None:
            t = (y - self._out_mid) / np.where(self._out_half > 0, self._out_half, 1.0)
            g = g * self._out_half * (1.0 - t * t)
        grads: list[np.ndarray] = []
        n = len(self.weights)
        for k in reversed(range(n)):
            if k < n - 1:
                g = g * (1.0 - acts[k + 1] ** 2)
            grads.append(g.sum(axis=0))
            grads.append(g.T @ acts[k])
            g = g @ self.weights[k]
        grads.reverse()
        dx = g / self._in_half
        return grads, (dx[0] if single else dx)

    # -- serialization --------------------------------------------------------

    def to_json(self) -> dict:
        d = {"sizes": list(self.sizes), "in_box": self.in_box.to_json(),
             "weights": [w.tolist() for w in self.weights], "biases": [b.tolist() for b in self.biases]}
        if self.out_box is not None:
            d["out_box"] = self.out_box.to_json()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Mlp":
        out_box = Box.from_json(d["out_box"]) if "out_box" in d else None
        net = cls(d["sizes"], Box.from_json(d["in_box"]), out_box, np.random.default_rng(0))
        for k, (w, b) in enumerate(zip(d["weights"], d["biases"])):
            net.weights[k][...] = np.asarray(w, dtype=float)
            net.biases[k][...] = np.asarray(b, dtype=float)
        return net


def forward(net: Mlp, x) -> np.ndarray:
    return net.forward(x)


def make_actor(env: EnvModel, hidden: Sequence[int], rng: np.random.Generator) -> Mlp:
    return Mlp([env.state_dim, *hidden, env.action_dim], env.state_bounds, env.action_bounds, rng)


def make_critic(env: EnvModel, hidden: Sequence[int], rng: np.random.Generator) -> Mlp:
    sa = Box(np.concatenate([env.state_bounds.lo, env.action_bounds.lo]),
             np.concatenate([env.state_bounds.hi, env.action_bounds.hi]))
    return Mlp([env.state_dim + env.action_dim, *hidden, 1], sa, None, rng)


def grad_check(net: Mlp, rng: np.random.Generator | None = None, batch: int = 4,
               h: float = 1e-5, x: np.ndarray | None = None) -> float:
    """Max relative error between backprop and central differences.

    Covers every parameter and the input gradient. Entries where both
    gradients are below 1e-7 in magnitude are compared absolutely.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    if x is None:
        x = net.in_box.sample(rng, batch)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    r = rng.normal(size=(x.shape[0], net.out_dim))

    def loss(xx):
        return float(np.sum(r * net.forward(xx)))

    y, cache = net.forward_cache(x)
    grads, dx = net.backward(cache, r)
    analytic = np.concatenate([g.ravel() for g in grads] + [np.ravel(dx)])

    theta = net.flat()
    numeric = np.empty(theta.size + x.size)
    for i in range(theta.size):
        t = theta.copy()
        t[i] += h
        net.set_flat(t)
        up = loss(x)
        t[i] -= 2 * h
        net.set_flat(t)
        numeric[i] = (up - loss(x)) / (2 * h)
    net.set_flat(theta)
    flat_x = x.ravel()
    for j in range(x.size):
        xp = flat_x.copy()
        xp[j] += h
        up = loss(xp.reshape(x.shape))
        xp[j] -= 2 * h
        numeric[theta.size + j] = (up - loss(xp.reshape(x.shape))) / (2 * h)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-7)
    return float(np.max(np.abs(analytic - numeric) / denom))


class Adam:
    """Adam with global-norm gradient clipping (same interface as Sgd)."""

    def __init__(self, net: Mlp, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8,
                 clip: float = 10.0):
        self.net = net
        self.lr, self.b1, self.b2, self.eps, self.clip = lr, b1, b2, eps, clip
        self.m = [np.zeros_like(p) for p in net.params()]
        self.v = [np.zeros_like(p) for p in net.params()]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
        scale = self.clip / norm if self.clip and norm > self.clip else 1.0
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v, g in zip(self.net.params(), self.m, self.v, grads):
            g = g * scale
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class Sgd:
    """SGD with momentum and global-norm gradient clipping."""

    def __init__(self, net: Mlp, lr: float, momentum: float = 0.9, clip: float = 10.0):
        self.net = net
        self.lr = lr
        self.momentum = momentum
        self.clip = clip
        self.velocity = [np.zeros_like(p) for p in net.params()]

    def step(self, grads: Sequence[np.ndarray]) -> None:
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
        scale = self.clip / norm if self.clip and norm > self.clip else 1.0
        for p, v, g in zip(self.net.params(), self.velocity, grads):
            v *= self.momentum
            v -= self.lr * scale * g
            p += v


def soft_update(target: Mlp, source: Mlp, tau: float) -> None:
    for t, s in zip(target.params(), source.params()):
        t *= 1.0 - tau
        t += tau * s


# -- replay ---------------------------------------------------------------------

class ReplayBuffer:
    """Fixed-capacity ring of (s, a, cost, s', done) with uniform sampling."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        if capacity < 1:
            raise ValueError("replay capacity must be positive")
        self.capacity = capacity
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, action_dim))
        self.c = np.zeros(capacity)
        self.s2 = np.zeros((capacity, state_dim))
        self.done = np.zeros(capacity)
        self.size = 0
        self._next = 0

    def __len__(self) -> int:
        return self.size

    def add(self, s, a, cost: float, s2, done: bool) -> None:
        i = self._next
        self.s[i], self.a[i], self.c[i], self.s2[i], self.done[i] = s, a, cost, s2, float(done)
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, rng: np.random.Generator, n: int):
        idx = rng.integers(0, self.size, n)
        return self.s[idx], self.a[idx], self.c[idx], self.s2[idx], self.done[idx]


# -- DDPG-lite ------------------------------------------------------------------

@dataclass
class TrainConfig:
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    batch_size: int = 64
    buffer_capacity: int = 50_000
    sigma_expl: float = 0.1          # fraction of the action range
    tau: float = 0.005
    steps: int = 4_000
    hidden: tuple[int, ...] = (64, 64)
    warmup: int = 500                # transitions stored before updates start
    update_every: int = 1
    violation_penalty: float = 100.0
    terminate_on_violation: bool = False
    optimizer: str = "adam"          # "adam" or "sgd" (momentum 0.9)
    normalize_cost: bool = True      # train on (1 - gamma) * cost so values stay O(1)

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        for name in ("actor_lr", "critic_lr", "batch_size", "buffer_capacity", "sigma_expl", "tau",
                     "update_every"):
            if not getattr(self, name) > 0:
                raise ValueError(f"TrainConfig.{name} must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.steps < 0 or self.warmup < 0:
            raise ValueError("TrainConfig.steps and warmup must be non-negative")


class ActionGate(Protocol):
    """Turns a proposed action into the executed one; returns (action, used_network)."""

    def gate(self, s: np.ndarray, proposed: np.ndarray) -> tuple[np.ndarray, bool]: ...


class RawGate:
    """No monitor: the proposed action is executed as is."""

    def gate(self, s, proposed):
        return proposed, True


@dataclass
class EpisodeLog:
    cost: float                # discounted raw environment cost
    violations: int
    zeta: float                # fraction of steps where the shield acted
    steps: int
    monitor_breaches: int = 0  # network steps whose successor left the invariant


@dataclass
class DdpgAgent:
    actor: Mlp
    critic: Mlp
    actor_target: Mlp
    critic_target: Mlp
    actor_opt: Sgd
    critic_opt: Sgd
    buffer: ReplayBuffer
    total_steps: int = 0


def make_agent(env: EnvModel, cfg: TrainConfig, rng: np.random.Generator, actor: Mlp | None = None) -> DdpgAgent:
    actor = make_actor(env, cfg.hidden, rng) if actor is None else actor
    critic = make_critic(env, cfg.hidden, rng)
    opt = Adam if cfg.optimizer == "adam" else Sgd
    return DdpgAgent(actor, critic, actor.copy(), critic.copy(), opt(actor, cfg.actor_lr),
                     opt(critic, cfg.critic_lr),
                     ReplayBuffer(cfg.buffer_capacity, env.state_dim, env.action_dim))


def _learn(agent: DdpgAgent, env: EnvModel, cfg: TrainConfig, rng: np.random.Generator) -> None:
    s, a, c, s2, done = agent.buffer.sample(rng, cfg.batch_size)
    a2 = agent.actor_target.forward(s2)
    q2 = agent.critic_target.forward(np.concatenate([s2, a2], axis=1))[:, 0]
    y = c + env.gamma * (1.0 - done) * q2
    q, cache = agent.critic.forward_cache(np.concatenate([s, a], axis=1))
    grads, _ = agent.critic.backward(cache, (q[:, 0:1] - y[:, None]) / len(y))
    agent.critic_opt.step(grads)

    # deterministic policy gradient on the cost critic: descend dQ/da
    mu, acache = agent.actor.forward_cache(s)
    _, qcache = agent.critic.forward_cache(np.concatenate([s, mu], axis=1))
    _, dsa = agent.critic.backward(qcache, np.full((len(s), 1), 1.0 / len(s)))
    agrads, _ = agent.actor.backward(acache, dsa[:, env.state_dim:])
    agent.actor_opt.step(agrads)

    soft_update(agent.actor_target, agent.actor, cfg.tau)
    soft_update(agent.critic_target, agent.critic, cfg.tau)


def run_episode(agent: DdpgAgent, gate: ActionGate, env: EnvModel, cfg: TrainConfig, rng: np.random.Generator,
                learn: bool = True, explore: bool = True, visited: list | None = None,
                contains: Callable[[np.ndarray], bool] | None = None) -> EpisodeLog:
    """One episode with exploration noise added before the gate; optionally learns online."""
    from .envmodel import step as env_step

    s = reset(env, rng)
    sigma = cfg.sigma_expl * env.action_bounds.width
    cost = 0.0
    disc = 1.0
    violations = shield_steps = breaches = 0
    n = 0
    for _ in range(env.episode_len):
        a = agent.actor.forward(s)
        if explore:
            a = env.clip_action(a + sigma * rng.normal(size=env.action_dim))
        a, used_net = gate.gate(s, a)
        a = env.clip_action(a)
        tr = env_step(env, s, a, rng)
        if visited is not None:
            visited.append(s)
        n += 1
        cost += disc * tr.cost
        disc *= env.gamma
        shield_steps += not used_net
        if used_net and contains is not None and not contains(tr.next_state):
            breaches += 1
        c = tr.cost / env.cost_scale
        terminal = False
        if tr.violated:
            violations += 1
            c += cfg.violation_penalty
            terminal = cfg.terminate_on_violation
        if cfg.normalize_cost:
            c *= 1.0 - env.gamma
        if learn:
            agent.buffer.add(s, a, c, tr.next_state, terminal)
            agent.total_steps += 1
            if len(agent.buffer) >= max(cfg.warmup, cfg.batch_size) and agent.total_steps % cfg.update_every == 0:
                _learn(agent, env, cfg, rng)
        s = tr.next_state
        if terminal:
            break
    return EpisodeLog(cost, violations, shield_steps / n, n, breaches)


def ddpg_update(agent: DdpgAgent, gate: ActionGate, env: EnvModel, cfg: TrainConfig, rng: np.random.Generator,
                steps: int | None = None, visited: list | None = None,
                contains: Callable[[np.ndarray], bool] | None = None) -> list[EpisodeLog]:
    """Run whole episodes until at least ``steps`` environment steps have been taken."""
    steps = cfg.steps if steps is None else steps
    logs: list[EpisodeLog] = []
    done = 0
    while done < steps:
        log = run_episode(agent, gate, env, cfg, rng, visited=visited, contains=contains)
        logs.append(log)
        done += log.steps
    return logs


# -- DAgger ---------------------------------------------------------------------

@dataclass
class DaggerConfig:
    rounds: int = 4
    episodes_per_round: int = 4
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-2
    val_fraction: float = 0.2
    uniform_states: int = 500        # extra labelled states drawn over the state bounds
    history: list = field(default_factory=list, repr=False)


def _fit(net: Mlp, X: np.ndarray, Y: np.ndarray, Xv: np.ndarray, Yv: np.ndarray, cfg: DaggerConfig,
         rng: np.random.Generator, best: tuple[float, Mlp]) -> tuple[float, Mlp]:
    opt = Sgd(net, cfg.lr)
    for _ in range(cfg.epochs):
        order = rng.permutation(len(X))
        for i in range(0, len(X), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            y, cache = net.forward_cache(X[idx])
            grads, _ = net.backward(cache, 2.0 * (y - Y[idx]) / len(idx))
            opt.step(grads)
        val = float(np.mean(np.sum((net.forward(Xv) - Yv) ** 2, axis=1)))
        if val < best[0]:
            best = (val, net.copy())
    return best


def _dagger_states(env: EnvModel, teacher, net: Mlp | None, beta: float, episodes: int,
                   rng: np.random.Generator) -> np.ndarray:
    from .envmodel import step as env_step

    out = []
    for _ in range(episodes):
        s = reset(env, rng)
        for _ in range(env.episode_len):
            out.append(s)
            use_teacher = net is None or rng.random() < beta
            a = teacher(s[None])[0] if use_teacher else net.forward(s)
            s = env_step(env, s, a, rng).next_state
    return np.array(out)


def dagger_imitate(student: Mlp, teacher: Callable[[np.ndarray], np.ndarray], env: EnvModel,
                   rounds: int | None, rng: np.random.Generator, cfg: DaggerConfig | None = None) -> Mlp:
    """Imitate ``teacher`` (a batch policy: states -> actions) and return the best validation snapshot.

    Round ``i`` rolls out a mixture that follows the teacher with probability
    0.5**i and the student otherwise; every visited state is labelled by the
    teacher. Rollouts ignore safety but stay within the state bounds. The
    validation set is drawn once up front, so ``cfg.history`` (best loss after
    each round) never increases.
    """
    cfg = DaggerConfig() if cfg is None else cfg
    rounds = cfg.rounds if rounds is None else rounds
    if rounds <= 0:
        return student
    net = student.copy()
    n_uniform = cfg.uniform_states
    n_val = max(1, int(cfg.val_fraction * n_uniform))
    Xv = np.concatenate([env.state_bounds.sample(rng, n_val),
                         _dagger_states(env, teacher, None, 1.0, 1, rng)])
    Yv = teacher(Xv)
    data = [env.state_bounds.sample(rng, n_uniform)] if n_uniform else []
    best: tuple[float, Mlp] = (float(np.mean(np.sum((net.forward(Xv) - Yv) ** 2, axis=1))), net.copy())
    history = []
    for r in range(rounds):
        data.append(_dagger_states(env, teacher, net, 0.5 ** r, cfg.episodes_per_round, rng))
        X = np.concatenate(data)
        best = _fit(net, X, teacher(X), Xv, Yv, cfg, rng, best)
        history.append(best[0])
    cfg.history[:] = history
    return best[1]
