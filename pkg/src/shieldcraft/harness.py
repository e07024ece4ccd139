"""Command-line entry point and the multi-seed reproduction driver."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .blend import BlendedPolicy, rollout, shield_rollout
from .envmodel import ENV_NAMES, UnknownEnvError, make_env
from .neural import Mlp, grad_check
from .revel import BASELINE_KINDS, ConfigError, RevelConfig, train_baseline, train_revel
from .shield import ShieldError, deserialize, initial_shield, load_checkpoint
from .verifier import Certificate, safe_space, verify_bounded

EXIT_OK, EXIT_USAGE, EXIT_VERIFY = 0, 1, 2
METHODS = ("revel", "static-shield", "ddpg-unshielded")
SUMMARY_HEADER = ("env", "method", "runs", "final_cost_mean", "final_cost_sd", "violations", "zeta",
                  "monitor_breaches", "network_seconds", "shield_seconds")
RUNS_HEADER = ("env", "method", "seed", "final_cost", "g0_cost", "violations", "zeta", "monitor_breaches",
               "network_seconds", "shield_seconds")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; this CLI reserves 2 for failed verification
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="shieldcraft", description="Verified-exploration RL with piecewise-affine shields.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def run_flags(sp):
        sp.add_argument("--env", required=True)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--steps", type=int, default=None, help="total environment steps")
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--config", default=None, help="JSON file overriding the run configuration")

    run_flags(sub.add_parser("train", help="train with shield re-synthesis"))
    b = sub.add_parser("baseline", help="train a baseline")
    run_flags(b)
    b.add_argument("--kind", required=True, choices=BASELINE_KINDS)

    v = sub.add_parser("verify", help="bounded-horizon check of a shield from the initial states")
    v.add_argument("--env", required=True)
    v.add_argument("--shield", default=None, help="shield JSON (default: the shipped starting shield)")
    v.add_argument("--horizon", type=int, default=None)

    r = sub.add_parser("rollout", help="evaluate a shield, or a shield plus network, over episodes")
    r.add_argument("--env", required=True)
    r.add_argument("--shield", default=None, help="shield or checkpoint JSON (default: shipped shield)")
    r.add_argument("--actor", default=None, help="actor JSON; with it the monitored policy is rolled out")
    r.add_argument("--episodes", type=int, default=10)
    r.add_argument("--seed", type=int, default=0)

    d = sub.add_parser("describe-env", help="print an environment model as JSON")
    d.add_argument("--env", required=True)

    g = sub.add_parser("grad-check", help="finite-difference check of the backprop code")
    g.add_argument("--nets", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)

    rp = sub.add_parser("reproduce", help="all methods on all environments over several seeds")
    rp.add_argument("--out", required=True)
    rp.add_argument("--seeds", type=int, default=5)
    rp.add_argument("--steps", type=int, default=None)
    rp.add_argument("--env", action="append", default=None, help="restrict to an environment (repeatable)")
    return p


def _check_env(name: str) -> None:
    if name not in ENV_NAMES:
        raise UnknownEnvError(f"unknown environment {name!r}; available: {', '.join(ENV_NAMES)}")


def _run_config(args) -> RevelConfig:
    _check_env(args.env)
    cfg = RevelConfig(env=args.env)
    if args.config:
        try:
            overrides = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {args.config}: {e}") from e
        if not isinstance(overrides, dict):
            raise ConfigError("config JSON must be an object")
        cfg = RevelConfig.from_json(overrides, cfg)
    flags = {"env": args.env}
    if args.seed is not None:
        flags["seed"] = args.seed
    if args.steps is not None:
        flags["total_steps"] = args.steps
    if args.out is not None:
        flags["out_dir"] = args.out
    return RevelConfig.from_json(flags, cfg)


def _load_shield(env_name: str, path: str | None):
    if path is None:
        g = initial_shield(env_name)
        return g, None
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ShieldError(f"cannot read shield file {path}: {e}") from e
    return load_checkpoint(text) if '"invariant"' in text else (deserialize(text), None)


def _summary_line(metrics) -> dict:
    return {"episodes": len(metrics.rows), "final_cost": metrics.final_cost(), "violations": metrics.violations,
            "mean_zeta": metrics.mean_zeta(), "monitor_breaches": metrics.monitor_breaches,
            "g0_cost": metrics.g0_cost, **metrics.timing()}


def _cmd_verify(args) -> int:
    _check_env(args.env)
    env = make_env(args.env)
    g, _ = _load_shield(args.env, args.shield)
    res = verify_bounded(env, g, env.init_box, args.horizon)
    print(json.dumps(res.to_json()))
    return EXIT_OK if isinstance(res, Certificate) else EXIT_VERIFY


def _cmd_rollout(args) -> int:
    _check_env(args.env)
    env = make_env(args.env)
    g, phi = _load_shield(args.env, args.shield)
    rng = np.random.default_rng(args.seed)
    if args.actor is None:
        m = shield_rollout(g, env, args.episodes, rng)
    else:
        f = Mlp.from_json(json.loads(Path(args.actor).read_text()))
        phi = safe_space(env, g) if phi is None else phi
        m = rollout(BlendedPolicy(g, phi, f, env), env, args.episodes, rng)
    print(json.dumps({"mean_cost": m.mean_cost, "costs": m.costs, "violations": m.violations,
                      "zeta": m.zeta, "steps": m.steps, "monitor_breaches": m.monitor_breaches}))
    return EXIT_OK


def _cmd_grad_check(args) -> int:
    worst = max_grad_error(args.nets, args.seed)
    print(json.dumps({"nets": args.nets, "max_relative_error": worst}))
    return EXIT_OK if worst < 1e-4 else EXIT_VERIFY


def max_grad_error(nets: int = 100, seed: int = 0) -> float:
    """Worst grad_check error over random architectures, input boxes and squashes."""
    from .geometry import Box

    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(nets):
        n_in = int(rng.integers(1, 6))
        hidden = [int(rng.integers(1, 9)) for _ in range(int(rng.integers(1, 4)))]
        n_out = int(rng.integers(1, 4))
        lo = rng.uniform(-5, 0, n_in)
        in_box = Box(lo, lo + rng.uniform(0.1, 5, n_in))
        out_box = None
        if k % 2:
            olo = rng.uniform(-3, 0, n_out)
            out_box = Box(olo, olo + rng.uniform(0.1, 3, n_out))
        net = Mlp([n_in, *hidden, n_out], in_box, out_box, rng, final_scale=1.0)
        worst = max(worst, grad_check(net, rng))
    return worst


# -- reproduction -------------------------------------------------------------------

@dataclass
class RunRecord:
    env: str
    method: str
    seed: int
    final_cost: float
    g0_cost: float
    violations: int
    zeta: float
    monitor_breaches: int
    network_seconds: float
    shield_seconds: float


def _one_run(job: tuple[str, str, int, int | None, str]) -> RunRecord:
    env, method, seed, steps, out = job
    kw = {"env": env, "seed": seed, "out_dir": out}
    if steps is not None:
        kw["total_steps"] = steps
    cfg = RevelConfig.from_json(kw)
    if method == "revel":
        _, m = train_revel(cfg)
    else:
        m = train_baseline(method, cfg)
    return RunRecord(env, method, seed, m.final_cost(), m.g0_cost, m.violations, m.mean_zeta(),
                     m.monitor_breaches, m.network_seconds, m.shield_seconds)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("SHIELDCRAFT_THREADS", "1")))
    except ValueError:
        return 1


def reproduce_all(out_dir: str | os.PathLike, seeds: int = 5, steps: int | None = None,
                  envs: tuple[str, ...] = ENV_NAMES) -> tuple[list[dict], list[RunRecord]]:
    """Every method on every environment and seed; writes runs.csv and summary.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(e, m, s, steps, str(out / e / m / f"seed{s}")) for e in envs for m in METHODS for s in range(seeds)]
    workers = min(_threads(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            records = list(pool.map(_one_run, jobs))
    else:
        records = [_one_run(j) for j in jobs]

    with open(out / "runs.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RUNS_HEADER)
        for r in records:
            w.writerow([getattr(r, k) for k in RUNS_HEADER])
    summary = []
    for e in envs:
        for m in METHODS:
            rs = [r for r in records if r.env == e and r.method == m]
            costs = np.array([r.final_cost for r in rs])
            summary.append({
                "env": e, "method": m, "runs": len(rs),
                "final_cost_mean": float(costs.mean()), "final_cost_sd": float(costs.std(ddof=0)),
                "violations": int(sum(r.violations for r in rs)),
                "zeta": float(np.mean([r.zeta for r in rs])),
                "monitor_breaches": int(sum(r.monitor_breaches for r in rs)),
                "network_seconds": float(sum(r.network_seconds for r in rs)),
                "shield_seconds": float(sum(r.shield_seconds for r in rs)),
            })
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, SUMMARY_HEADER, lineterminator="\n")
        w.writeheader()
        w.writerows(summary)
    return summary, records


def _cmd_reproduce(args) -> int:
    envs = tuple(args.env) if args.env else ENV_NAMES
    for e in envs:
        _check_env(e)
    summary, _ = reproduce_all(args.out, args.seeds, args.steps, envs)
    for row in summary:
        print(json.dumps(row))
    bad = [r for r in summary if r["method"] != "ddpg-unshielded" and (r["violations"] or r["monitor_breaches"])]
    if bad:
        print(f"error: safety violations in shielded runs: {bad}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def run_cli(argv: list[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "train":
            cfg = _run_config(args)
            _, metrics = train_revel(cfg)
            print(json.dumps(_summary_line(metrics)))
            return EXIT_OK
        if args.command == "baseline":
            cfg = _run_config(args)
            print(json.dumps(_summary_line(train_baseline(args.kind, cfg))))
            return EXIT_OK
        if args.command == "verify":
            return _cmd_verify(args)
        if args.command == "rollout":
            return _cmd_rollout(args)
        if args.command == "describe-env":
            _check_env(args.env)
            print(json.dumps(make_env(args.env).describe(), indent=2))
            return EXIT_OK
        if args.command == "grad-check":
            return _cmd_grad_check(args)
        if args.command == "reproduce":
            return _cmd_reproduce(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (UnknownEnvError, ConfigError, ShieldError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_USAGE


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
