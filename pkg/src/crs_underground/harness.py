"""Experiment driver: convergence comparison, parameter sweeps, run manifests.

Every training cell is keyed by (strategy, seed, configuration). The UD
layout depends only on the seed, so cells sharing a seed see the same
geometry and differ only in the swept quantity.

CSV column contracts (schema version ``CSV_SCHEMA_VERSION``):

* learning curves: ``episode, mean_reward, actor_loss, critic_loss, entropy,
  mean_theta, mean_Pc_fraction``
* convergence summary: ``strategy, seed, initial_mean, final_mean``
* gains: ``strategy, baseline, gain``
* sweep: ``variable, value, strategy, seed, mean, std``
* trajectory: ``step, reward, theta, power_0..., split_0...``
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import __version__
from .actions import ActionLayout, ResourceAction, Strategy, validate_action
from .channel import LinkRealization
from .config import ConfigError, SystemConfig
from .environment import Environment, greedy_agent
from .ppo import EpisodeStats, InferenceSnapshot, PolicyNetworks, act, save_checkpoint, train
from .rate_engine import RateReport, evaluate_crs, evaluate_rsma, evaluate_sdma

CSV_SCHEMA_VERSION = 1
STRATEGIES = ("crs", "rsma", "sdma", "greedy")
CURVE_COLUMNS = ("episode", "mean_reward", "actor_loss", "critic_loss", "entropy",
                 "mean_theta", "mean_Pc_fraction")
SWEEP_VARIABLES = {"ud_count": "ud.count", "depth": "soil.burial_depth_m", "vwc": "soil.vwc"}
# window for the initial/final means of a learning curve
SUMMARY_WINDOW = 50

Policy = Callable[[np.ndarray], ResourceAction]


class CellFault(RuntimeError):
    """A training or evaluation cell failed; the message names the cell."""


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "%.17g" % float(x)
    return str(x)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(x) for x in row])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class ExperimentSpec:
    """What to run. ``sweep_var`` of None means a convergence run."""

    config: SystemConfig
    strategies: tuple[str, ...] = STRATEGIES
    seeds: tuple[int, ...] = (0,)
    sweep_var: str | None = None
    sweep_values: tuple[float, ...] = ()
    eval_draws: int | None = None

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        bad = set(self.strategies) - set(STRATEGIES)
        if bad or not self.strategies:
            raise ConfigError(f"unknown strategies {sorted(bad)}; choose from {STRATEGIES}")
        if self.sweep_var is not None:
            if self.sweep_var not in SWEEP_VARIABLES:
                raise ConfigError(f"sweep variable must be one of {sorted(SWEEP_VARIABLES)}")
            if not self.sweep_values:
                raise ConfigError("sweep values must be nonempty")
        draws = self.config.eval_draws if self.eval_draws is None else self.eval_draws
        if draws < 1:
            raise ConfigError("evaluation draws must be >= 1")
        self.eval_draws = draws

    def cell_config(self, value) -> SystemConfig:
        key = SWEEP_VARIABLES[self.sweep_var]
        return self.config.override({key: int(value) if key == "ud.count" else float(value)})

    def describe(self) -> dict:
        return {"strategies": list(self.strategies), "seeds": list(self.seeds),
                "sweep_var": self.sweep_var, "sweep_values": list(self.sweep_values),
                "eval_draws": self.eval_draws}


@dataclass
class RunManifest:
    command: str
    settings: dict
    spec: dict
    version: str = __version__
    schema_version: int = CSV_SCHEMA_VERSION
    wall_time_s: float = 0.0
    outputs: dict[str, str] = field(default_factory=dict)

    def input_digest(self) -> str:
        blob = json.dumps({"command": self.command, "settings": self.settings, "spec": self.spec,
                           "version": self.version, "schema": self.schema_version},
                          sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()

    def record(self, path: Path) -> None:
        self.outputs[Path(path).name] = file_digest(path)

    def write(self, path: Path) -> None:
        payload = {"command": self.command, "version": self.version,
                   "schema_version": self.schema_version, "input_digest": self.input_digest(),
                   "settings": self.settings, "spec": self.spec,
                   "wall_time_s": round(self.wall_time_s, 3),
                   "outputs": dict(sorted(self.outputs.items()))}
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n",
                              encoding="utf-8")


@dataclass
class CellResult:
    strategy: str
    seed: int
    curve: list[EpisodeStats]
    policy: Policy
    nets: PolicyNetworks | None = None

    def rewards(self) -> np.ndarray:
        return np.array([s.mean_reward for s in self.curve])


def _rngs(seed: int, strategy: str) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent streams for weight init and training noise of one cell."""
    tag = STRATEGIES.index(strategy)
    init_seq, train_seq = np.random.SeedSequence([int(seed), tag]).spawn(2)
    return np.random.default_rng(init_seq), np.random.default_rng(train_seq)


def ppo_policy(nets: PolicyNetworks, total_power: float) -> Policy:
    """Deterministic mean action under a frozen copy of the state normalizer."""
    norm = nets.normalizer
    mean, std, clip = norm.mean.copy(), norm.std.copy(), norm.clip
    snap = InferenceSnapshot(nets)

    def policy(state: np.ndarray) -> ResourceAction:
        s = np.clip((state - mean) / std, -clip, clip)
        return act(nets, s, None, total_power, deterministic=True, snapshot=snap).action

    return policy


def train_cell(config: SystemConfig, strategy: str, seed: int,
               sink: Callable[[EpisodeStats], None] | None = None) -> CellResult:
    """Train one PPO agent, or run the greedy archive for the same budget."""
    hyper = config.hyper
    cell = f"strategy={strategy} seed={seed} N={config.num_uds}"
    init_rng, train_rng = _rngs(seed, strategy)
    try:
        if strategy == "greedy":
            env = Environment(config, Strategy.CRS, seed=seed)
            result = greedy_agent(env, hyper.epochs * hyper.batch, train_rng, config.greedy_explore)
            per_ep = result.rewards.reshape(hyper.epochs, hyper.batch)
            curve = []
            for i, row in enumerate(per_ep):
                curve.append(EpisodeStats(episode=i, mean_reward=float(row.mean()),
                                          actor_loss=math.nan, critic_loss=math.nan,
                                          entropy=math.nan, mean_theta=math.nan,
                                          mean_Pc_fraction=math.nan))
            best = result.best_action
            if sink is not None:
                for stats in curve:
                    sink(stats)
            return CellResult(strategy, seed, curve, lambda state: best)
        env = Environment(config, strategy, seed=seed)
        nets = PolicyNetworks(env.state_dim, env.layout, init_rng, hyper.hidden, hyper.init_log_std)
        curve = train(env, nets, hyper, train_rng, sink)
        return CellResult(strategy, seed, curve, ppo_policy(nets, env.total_power), nets)
    except (ConfigError, CellFault):
        raise
    except Exception as exc:
        raise CellFault(f"cell {cell} failed: {exc}") from exc


def evaluate_policy(config: SystemConfig, strategy: str, policy: Policy, seed: int,
                    draws: int) -> np.ndarray:
    """Min-rate of ``policy`` over ``draws`` fresh fading realizations.

    The layout matches training for the same seed; the fading stream is a
    separate child of the seed so evaluation never replays training draws.
    """
    env = Environment(config, Strategy.CRS if strategy == "greedy" else strategy, seed=seed)
    env.reseed_fading(1)
    state = env.state.copy()
    out = np.empty(draws)
    for t in range(draws):
        outcome = env.step(policy(state))
        out[t] = outcome.reward
        state = outcome.next_state
    return out


def fixed_policy(action: ResourceAction) -> Policy:
    return lambda state: action


def uniform_action(config: SystemConfig, strategy: str = "crs") -> ResourceAction:
    """Equal power over every stream, equal common split, θ = 1/2 for CRS."""
    env_strategy = Strategy.CRS if strategy == "greedy" else Strategy(strategy)
    n = config.num_uds
    p_dim = {Strategy.CRS: n + 2, Strategy.RSMA: n + 1, Strategy.SDMA: n}[env_strategy]
    s_dim = {Strategy.CRS: n + 1, Strategy.RSMA: n, Strategy.SDMA: 0}[env_strategy]
    total = config.gains.tx_power_sat
    return ResourceAction(power=np.full(p_dim, total / p_dim),
                          common_split=np.full(s_dim, 1.0 / s_dim) if s_dim else np.zeros(0),
                          theta=0.5 if env_strategy is Strategy.CRS else 1.0)


def curve_row(s: EpisodeStats) -> tuple:
    return (s.episode, s.mean_reward, s.actor_loss, s.critic_loss, s.entropy,
            s.mean_theta, s.mean_Pc_fraction)


def summarize(rewards: np.ndarray, window: int = SUMMARY_WINDOW) -> tuple[float, float]:
    w = min(window, len(rewards))
    return float(rewards[:w].mean()), float(rewards[-w:].mean())


def run_convergence(spec: ExperimentSpec, out_dir: Path, *, save_policies: bool = False,
                    progress: Callable[[str], None] | None = None) -> dict[str, dict[int, CellResult]]:
    """Learning curves for each (strategy, seed), per-strategy mean curves,
    a final-reward summary and CRS gains over each baseline."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    manifest = RunManifest("convergence", spec.config.settings, spec.describe())
    results: dict[str, dict[int, CellResult]] = {}
    summary_rows = []
    for strategy in spec.strategies:
        results[strategy] = {}
        for seed in spec.seeds:
            if progress:
                progress(f"training {strategy} seed {seed}")
            cell = train_cell(spec.config, strategy, seed)
            results[strategy][seed] = cell
            path = out / f"curve_{strategy}_seed{seed}.csv"
            write_csv(path, CURVE_COLUMNS, map(curve_row, cell.curve))
            manifest.record(path)
            if save_policies and cell.nets is not None:
                ck = out / f"policy_{strategy}_seed{seed}.npz"
                save_checkpoint(ck, cell.nets, spec.config.hyper)
                manifest.record(ck)
            summary_rows.append((strategy, seed, *summarize(cell.rewards())))
        stacked = np.array([[curve_row(s) for s in c.curve]
                            for c in results[strategy].values()])
        mean_rows = [(i, *row[1:]) for i, row in enumerate(np.mean(stacked, axis=0))]
        path = out / f"curve_{strategy}_mean.csv"
        write_csv(path, CURVE_COLUMNS, mean_rows)
        manifest.record(path)

    path = out / "summary.csv"
    write_csv(path, ("strategy", "seed", "initial_mean", "final_mean"), summary_rows)
    manifest.record(path)
    if "crs" in results:
        finals = {s: np.mean([r[3] for r in summary_rows if r[0] == s]) for s in results}
        gains = [("crs", b, (finals["crs"] - finals[b]) / finals[b]) for b in results if b != "crs"]
        path = out / "gains.csv"
        write_csv(path, ("strategy", "baseline", "gain"), gains)
        manifest.record(path)
    manifest.wall_time_s = time.perf_counter() - start
    manifest.write(out / "manifest.json")
    return results


def run_sweep(spec: ExperimentSpec, out_dir: Path, *,
              progress: Callable[[str], None] | None = None) -> list[tuple]:
    """Retrain in every cell, then evaluate the frozen policy on fresh draws."""
    if spec.sweep_var is None:
        raise ConfigError("run_sweep needs a sweep variable")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    manifest = RunManifest("sweep", spec.config.settings, spec.describe())
    rows = []
    for value in spec.sweep_values:
        cfg = spec.cell_config(value)
        for strategy in spec.strategies:
            for seed in spec.seeds:
                if progress:
                    progress(f"{spec.sweep_var}={value} {strategy} seed {seed}")
                cell = train_cell(cfg, strategy, seed)
                try:
                    rates = evaluate_policy(cfg, strategy, cell.policy, seed, spec.eval_draws)
                except Exception as exc:
                    raise CellFault(f"evaluation of {spec.sweep_var}={value} {strategy} "
                                    f"seed {seed} failed: {exc}") from exc
                rows.append((spec.sweep_var, value, strategy, seed,
                             float(rates.mean()), float(rates.std())))
    path = out / f"sweep_{spec.sweep_var}.csv"
    write_csv(path, ("variable", "value", "strategy", "seed", "mean", "std"), rows)
    manifest.record(path)
    manifest.wall_time_s = time.perf_counter() - start
    manifest.write(out / "manifest.json")
    return rows


def write_trajectory(config: SystemConfig, strategy: str, policy: Policy, seed: int,
                     steps: int, path: Path) -> np.ndarray:
    """Per-step dump of a policy rollout on the evaluation stream."""
    env = Environment(config, Strategy.CRS if strategy == "greedy" else strategy, seed=seed)
    env.reseed_fading(1)
    lay = env.layout
    header = (["step", "reward", "theta"] + [f"power_{i}" for i in range(lay.power_dim)]
              + [f"split_{i}" for i in range(lay.split_dim)])
    rows, rewards = [], np.empty(steps)
    state = env.state.copy()
    for t in range(steps):
        action = policy(state)
        outcome = env.step(action)
        rewards[t] = outcome.reward
        rows.append([t, outcome.reward, float(action.theta), *action.power, *action.common_split])
        state = outcome.next_state
    write_csv(path, header, rows)
    return rewards


# -- rate-eval dumps -------------------------------------------------------

def _complex_array(value, name: str) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"'{name}' must be numbers or [re, im] pairs") from None
    if arr.ndim == 0 or arr.shape[-1] != 2:
        raise ConfigError(f"'{name}' entries must be [re, im] pairs")
    return arr[..., 0] + 1j * arr[..., 1]


def parse_rate_dump(dump: dict) -> tuple[str, LinkRealization, ResourceAction, float, float]:
    """Structured (links, action) dump; complex numbers are [re, im] pairs.

    Keys: strategy, noise_power, relay_power (CRS), h_ar, h_ud, h_relay_ud,
    power, common_split, theta.
    """
    try:
        strategy = Strategy(dump.get("strategy", "crs"))
        links = LinkRealization(h_ar=_complex_array(dump["h_ar"], "h_ar"),
                                h_ud=_complex_array(dump["h_ud"], "h_ud"),
                                h_relay_ud=_complex_array(dump["h_relay_ud"], "h_relay_ud"))
        action = ResourceAction(power=np.asarray(dump["power"], dtype=float),
                                common_split=np.asarray(dump.get("common_split", []), dtype=float),
                                theta=float(dump.get("theta", 1.0)))
        noise = float(dump["noise_power"])
        relay = float(dump.get("relay_power", 0.0))
    except KeyError as exc:
        raise ConfigError(f"rate dump lacks key {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"invalid rate dump: {exc}") from None
    if not noise > 0 or relay < 0:
        raise ConfigError("noise_power must be > 0 and relay_power >= 0")
    return strategy, links, action, noise, relay


def rate_eval(dump: dict) -> RateReport:
    strategy, links, action, noise, relay = parse_rate_dump(dump)
    total = float(np.sum(action.power))
    validate_action(action, ActionLayout(strategy, links.h_ud.shape[0]), total)
    if strategy is Strategy.CRS:
        return evaluate_crs(links, action, noise_power=noise, relay_power=relay)
    if strategy is Strategy.RSMA:
        return evaluate_rsma(links, action, noise_power=noise)
    return evaluate_sdma(links, action, noise_power=noise)
