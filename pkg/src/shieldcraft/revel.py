"""Training loop: lift the shield, update the network under the monitor, re-project the shield."""

from __future__ import annotations

import csv
import io
import json
import time
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .blend import BlendedPolicy, lift, shield_rollout
from .envmodel import ENV_NAMES, EnvModel, UnknownEnvError, make_env
from .neural import DaggerConfig, EpisodeLog, RawGate, TrainConfig, ddpg_update, make_agent
from .project import ProjectConfig, project
from .shield import initial_shield, serialize
from .verifier import Certificate, safe_space, verify_bounded

METRICS_HEADER = ("episode", "cost", "cum_violations", "zeta", "phase")
BASELINE_KINDS = ("ddpg-unshielded", "static-shield")
VISITED_CAPACITY = 10_000


class ConfigError(ValueError):
    pass


@dataclass
class RevelConfig:
    env: str = "road"
    seed: int = 0
    total_steps: int = 20_000
    syntheses: int = 5
    relift: bool = False
    dagger_rounds: int = 4
    eval_episodes: int = 10
    train: TrainConfig = field(default_factory=TrainConfig)
    project: ProjectConfig = field(default_factory=ProjectConfig)
    out_dir: str | None = None

    def validate(self) -> None:
        if self.env not in ENV_NAMES:
            raise UnknownEnvError(f"unknown environment {self.env!r}; available: {', '.join(ENV_NAMES)}")
        if self.syntheses < 1:
            raise ConfigError("syntheses must be at least 1")
        if self.total_steps < 0 or self.total_steps % self.syntheses:
            raise ConfigError(f"total_steps ({self.total_steps}) must be a non-negative multiple of "
                              f"syntheses ({self.syntheses})")

    @property
    def interval_steps(self) -> int:
        return self.total_steps // self.syntheses

    def to_json(self) -> dict:
        d = asdict(self)
        d["train"]["hidden"] = list(self.train.hidden)
        return d

    @classmethod
    def from_json(cls, d: dict, base: "RevelConfig | None" = None) -> "RevelConfig":
        """Override ``base`` (or the defaults) field by field; unknown keys are rejected."""
        base = cls() if base is None else base
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        kw = {f.name: getattr(base, f.name) for f in fields(cls)}
        for key, sub in (("train", TrainConfig), ("project", ProjectConfig)):
            if key in d:
                if not isinstance(d[key], dict):
                    raise ConfigError(f"config key {key!r} must be an object")
                sub_known = {f.name for f in fields(sub)}
                bad = set(d[key]) - sub_known
                if bad:
                    raise ConfigError(f"unknown {key} config keys: {', '.join(sorted(bad))}")
                cur = asdict(kw[key])
                cur.update(d[key])
                try:
                    kw[key] = sub(**cur)
                except (TypeError, ValueError) as e:
                    raise ConfigError(f"invalid {key} config: {e}") from e
        for k, v in d.items():
            if k not in ("train", "project"):
                kw[k] = v
        cfg = cls(**kw)
        cfg.validate()
        return cfg


@dataclass
class EpisodeRow:
    episode: int
    cost: float
    cum_violations: int
    zeta: float
    phase: int


@dataclass
class RunMetrics:
    rows: list[EpisodeRow] = field(default_factory=list)
    network_seconds: float = 0.0
    shield_seconds: float = 0.0
    monitor_breaches: int = 0
    network_steps: int = 0
    g0_cost: float | None = None
    checkpoints_certified: list[bool] = field(default_factory=list)
    synthesis_log: list[dict] = field(default_factory=list)

    @property
    def violations(self) -> int:
        return self.rows[-1].cum_violations if self.rows else 0

    def final_cost(self, n: int = 10) -> float:
        return float(np.mean([r.cost for r in self.rows[-n:]])) if self.rows else float("nan")

    def mean_zeta(self) -> float:
        return float(np.mean([r.zeta for r in self.rows])) if self.rows else 0.0

    def add(self, logs: list[EpisodeLog], phase: int) -> None:
        cum = self.violations
        for log in logs:
            cum += log.violations
            self.monitor_breaches += log.monitor_breaches
            self.network_steps += log.steps
            self.rows.append(EpisodeRow(len(self.rows), log.cost, cum, log.zeta, phase))

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in self.rows:
            w.writerow([r.episode, repr(float(r.cost)), r.cum_violations, repr(float(r.zeta)), r.phase])
        return buf.getvalue()

    def timing(self) -> dict:
        return {"network_seconds": self.network_seconds, "shield_seconds": self.shield_seconds}


def _write_outputs(cfg: RevelConfig, metrics: RunMetrics) -> None:
    if cfg.out_dir is None:
        return
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(metrics.csv_text())
    (out / "timing.json").write_text(json.dumps(metrics.timing(), indent=2))
    (out / "synthesis_log.json").write_text(json.dumps(metrics.synthesis_log, indent=2))
    summary = {"env": cfg.env, "seed": cfg.seed, "episodes": len(metrics.rows),
               "violations": metrics.violations, "final_cost": metrics.final_cost(),
               "mean_zeta": metrics.mean_zeta(), "monitor_breaches": metrics.monitor_breaches,
               "g0_cost": metrics.g0_cost, "checkpoints_certified": metrics.checkpoints_certified,
               "config": cfg.to_json()}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))


def _checkpoint(cfg: RevelConfig, env: EnvModel, h: BlendedPolicy, t: int, metrics: RunMetrics) -> None:
    ok = isinstance(verify_bounded(env, h.g, env.init_box), Certificate)
    metrics.checkpoints_certified.append(ok)
    if cfg.out_dir is None:
        return
    ck = Path(cfg.out_dir) / "checkpoints"
    ck.mkdir(parents=True, exist_ok=True)
    (ck / f"shield_{t}.json").write_bytes(serialize(h.g, h.phi))
    (ck / f"actor_{t}.json").write_text(json.dumps(h.f.to_json()))


def _run(cfg: RevelConfig, update_shield: bool) -> tuple[BlendedPolicy, RunMetrics]:
    cfg.validate()
    env = make_env(cfg.env)
    rng = np.random.default_rng(cfg.seed)
    metrics = RunMetrics()

    t0 = time.perf_counter()
    g0 = initial_shield(cfg.env)
    phi0 = safe_space(env, g0)
    metrics.shield_seconds += time.perf_counter() - t0
    metrics.g0_cost = shield_rollout(g0, env, cfg.eval_episodes, np.random.default_rng(cfg.seed + 10_000)).mean_cost

    t0 = time.perf_counter()
    dagger = DaggerConfig(rounds=cfg.dagger_rounds)
    h = lift(g0, phi0, env, rng, cfg.train.hidden, dagger=dagger)
    agent = make_agent(env, cfg.train, rng, actor=h.f)
    metrics.network_seconds += time.perf_counter() - t0
    _checkpoint(cfg, env, h, 0, metrics)

    visited: deque = deque(maxlen=VISITED_CAPACITY)
    for t in range(cfg.syntheses):
        t0 = time.perf_counter()
        logs = ddpg_update(agent, h, env, cfg.train, rng, cfg.interval_steps, visited, h.contains)
        metrics.network_seconds += time.perf_counter() - t0
        metrics.add(logs, t)

        t0 = time.perf_counter()
        if update_shield:
            res = project(env, h, np.array(visited) if visited else np.empty((0, env.state_dim)),
                          cfg.project, rng)
            res.log["synthesis"] = t
            metrics.synthesis_log.append(res.log)
            h = h.with_shield(res.shield, res.invariant)
        metrics.shield_seconds += time.perf_counter() - t0

        if update_shield and cfg.relift and t < cfg.syntheses - 1:
            t0 = time.perf_counter()
            fresh = lift(h.g, h.phi, env, rng, cfg.train.hidden, dagger=dagger).f
            agent.actor.set_flat(fresh.flat())
            agent.actor_target.set_flat(fresh.flat())
            metrics.network_seconds += time.perf_counter() - t0
        _checkpoint(cfg, env, h, t + 1, metrics)
    _write_outputs(cfg, metrics)
    return h, metrics


def train_revel(cfg: RevelConfig) -> tuple[BlendedPolicy, RunMetrics]:
    return _run(cfg, update_shield=True)


def train_baseline(kind: str, cfg: RevelConfig) -> RunMetrics:
    """``static-shield``: the same loop without re-projection. ``ddpg-unshielded``: the raw actor,
    penalized and cut short on violations."""
    if kind not in BASELINE_KINDS:
        raise ConfigError(f"unknown baseline kind {kind!r}; available: {', '.join(BASELINE_KINDS)}")
    if kind == "static-shield":
        return _run(cfg, update_shield=False)[1]
    cfg.validate()
    env = make_env(cfg.env)
    rng = np.random.default_rng(cfg.seed)
    train = TrainConfig(**{**asdict(cfg.train), "terminate_on_violation": True})
    agent = make_agent(env, train, rng)
    metrics = RunMetrics()
    metrics.g0_cost = shield_rollout(initial_shield(cfg.env), env, cfg.eval_episodes,
                                     np.random.default_rng(cfg.seed + 10_000)).mean_cost
    for t in range(cfg.syntheses):
        t0 = time.perf_counter()
        logs = ddpg_update(agent, RawGate(), env, train, rng, cfg.interval_steps)
        metrics.network_seconds += time.perf_counter() - t0
        metrics.add(logs, t)
    _write_outputs(cfg, metrics)
    return metrics
