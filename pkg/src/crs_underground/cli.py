"""Command-line entry point.

Exit codes: 0 success, 2 configuration or input error, 3 runtime fault.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .actions import ConstraintViolation, Strategy
from .channel import ChannelDomainError
from .config import PRESETS, ConfigError, load_config
from .environment import Environment
from .harness import (CURVE_COLUMNS, STRATEGIES, SWEEP_VARIABLES, ExperimentSpec, RunManifest,
                      curve_row, evaluate_policy, fixed_policy, ppo_policy, rate_eval, run_convergence,
                      run_sweep, summarize, train_cell, uniform_action, write_csv, write_trajectory)
from .neural import load_arrays
from .ppo import PolicyNetworks, load_checkpoint, save_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _parse_sets(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _config(args, seed: int | None = None):
    overrides = _parse_sets(args.set)
    if seed is not None:
        overrides["seed"] = seed
    return load_config(args.preset, args.config, overrides)


def _log(args):
    return None if args.quiet else (lambda msg: print(msg, file=sys.stderr, flush=True))


def cmd_train(args) -> int:
    cfg = _config(args, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("train", cfg.settings, {"strategy": args.strategy, "seed": cfg.seed,
                                                   "eval_draws": cfg.eval_draws})
    log = _log(args)
    sink = None
    if log:
        every = max(1, cfg.hyper.epochs // 10)
        sink = lambda s: s.episode % every == 0 and log(f"episode {s.episode} reward {s.mean_reward:.4f}")
    cell = train_cell(cfg, args.strategy, cfg.seed, sink)
    curve_path = out / f"curve_{args.strategy}_seed{cfg.seed}.csv"
    write_csv(curve_path, CURVE_COLUMNS, map(curve_row, cell.curve))
    manifest.record(curve_path)
    if cell.nets is not None:
        ck = out / f"policy_{args.strategy}_seed{cfg.seed}.npz"
        save_checkpoint(ck, cell.nets, cfg.hyper)
        manifest.record(ck)
    rates = evaluate_policy(cfg, args.strategy, cell.policy, cfg.seed, cfg.eval_draws)
    initial, final = summarize(cell.rewards())
    eval_path = out / f"eval_{args.strategy}_seed{cfg.seed}.csv"
    write_csv(eval_path, ("strategy", "seed", "initial_mean", "final_mean", "eval_mean", "eval_std"),
              [(args.strategy, cfg.seed, initial, final, rates.mean(), rates.std())])
    manifest.record(eval_path)
    manifest.write(out / "manifest.json")
    print(f"{args.strategy} seed {cfg.seed}: initial {initial:.6g} final {final:.6g} "
          f"eval {rates.mean():.6g} +- {rates.std():.3g}")
    return EXIT_OK


def cmd_convergence(args) -> int:
    cfg = _config(args)
    spec = ExperimentSpec(cfg, strategies=tuple(args.strategies), seeds=tuple(args.seeds))
    results = run_convergence(spec, Path(args.out), save_policies=args.save_policies,
                              progress=_log(args))
    for strategy, cells in results.items():
        finals = [summarize(c.rewards())[1] for c in cells.values()]
        print(f"{strategy}: final mean {np.mean(finals):.6g}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    spec = ExperimentSpec(cfg, strategies=tuple(args.strategies), seeds=tuple(args.seeds),
                          sweep_var=args.var, sweep_values=tuple(args.values),
                          eval_draws=args.draws)
    rows = run_sweep(spec, Path(args.out), progress=_log(args))
    for var, value, strategy, seed, mean, std in rows:
        print(f"{var}={value:g} {strategy} seed {seed}: {mean:.6g} +- {std:.3g}")
    return EXIT_OK


def cmd_rate_eval(args) -> int:
    try:
        dump = json.loads(Path(args.input).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read {args.input}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.input} is not valid JSON: {exc}") from None
    if not isinstance(dump, dict):
        raise ConfigError("rate dump must be a JSON object")
    report = rate_eval(dump)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_trajectory(args) -> int:
    cfg = _config(args, args.seed)
    strategy = args.strategy
    if args.policy:
        env = Environment(cfg, strategy)
        hyper = cfg.hyper
        nets = PolicyNetworks(env.state_dim, env.layout, np.random.default_rng(0), hyper.hidden,
                              hyper.init_log_std)
        try:
            _, meta = load_arrays(args.policy)
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError(f"cannot load policy {args.policy}: {exc}") from None
        if meta.get("strategy") != strategy or meta.get("num_uds") != cfg.num_uds:
            raise ConfigError(f"policy was trained for {meta.get('strategy')} with "
                              f"N={meta.get('num_uds')}, not {strategy} with N={cfg.num_uds}")
        try:
            load_checkpoint(args.policy, nets)
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"policy {args.policy} does not match the configured network: {exc}") from None
        policy = ppo_policy(nets, env.total_power)
    else:
        policy = fixed_policy(uniform_action(cfg, strategy))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rewards = write_trajectory(cfg, strategy, policy, cfg.seed, args.steps, out)
    print(f"{args.steps} steps, mean min-rate {rewards.mean():.6g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--preset", choices=sorted(PRESETS), default="desk",
                        help="base settings (default: desk)")
    common.add_argument("--config", help="key = value settings file applied over the preset")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one setting; repeatable")
    common.add_argument("--quiet", action="store_true", help="suppress progress on stderr")

    parser = argparse.ArgumentParser(prog="crs-underground",
                                     description="Cooperative rate-splitting for underground IoT links.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train one agent and evaluate it")
    p.add_argument("--strategy", choices=STRATEGIES, default="crs")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("convergence", parents=[common], help="learning curves for every strategy")
    p.add_argument("--strategies", nargs="+", choices=STRATEGIES, default=list(STRATEGIES))
    p.add_argument("--seeds", nargs="+", type=int, default=[0])
    p.add_argument("--save-policies", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_convergence)

    p = sub.add_parser("sweep", parents=[common], help="retrain and evaluate across one variable")
    p.add_argument("--var", choices=sorted(SWEEP_VARIABLES), required=True)
    p.add_argument("--values", nargs="+", type=float, required=True)
    p.add_argument("--strategies", nargs="+", choices=STRATEGIES, default=list(STRATEGIES))
    p.add_argument("--seeds", nargs="+", type=int, default=[0])
    p.add_argument("--draws", type=int, help="evaluation draws per cell (default: eval.draws)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("rate-eval", help="evaluate one (links, action) JSON dump")
    p.add_argument("--in", dest="input", required=True)
    p.set_defaults(func=cmd_rate_eval)

    p = sub.add_parser("trajectory", parents=[common], help="per-step rollout dump")
    p.add_argument("--strategy", choices=[s.value for s in Strategy], default="crs")
    p.add_argument("--policy", help="checkpoint from train; default is the uniform fixed action")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int, default=256)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_trajectory)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ConstraintViolation, ChannelDomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"fault: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
