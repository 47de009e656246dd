"""The resource-allocation MDP and the greedy archive baseline.

One step is one reporting period: a fresh fading draw over a fixed UD
layout, evaluated with the chosen strategy's rate engine. The state is the
previous period's common rate, total rates and SINR feedback.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import channel
from .actions import (ActionLayout, ConstraintViolation, ResourceAction, Strategy,
                      random_feasible_action, validate_action)
from .channel import LinkRealization
from .config import ConfigError, SystemConfig
from .rate_engine import RateReport, evaluate_crs, evaluate_rsma, evaluate_sdma


@dataclass(frozen=True, eq=False)
class StepOutcome:
    reward: float
    next_state: np.ndarray
    report: RateReport
    links: LinkRealization


def state_dim(strategy: Strategy, num_uds: int) -> int:
    n = num_uds
    return {Strategy.CRS: 3 * n + 4, Strategy.RSMA: 3 * n + 1, Strategy.SDMA: 2 * n}[strategy]


def pack_state(report: RateReport, strategy: Strategy, log_sinr: bool = True) -> np.ndarray:
    """CRS: [R_c, R_tot(AR, UDs), γ_c,ar, γ_p,ar, γ_c,UDs, γ_p,UDs].

    RSMA drops the AR entries; SDMA keeps UD totals and private SINRs.
    """
    f = np.log1p if log_sinr else (lambda x: np.asarray(x, dtype=float))
    if strategy is Strategy.CRS:
        parts = [[report.rate_common], report.rate_total,
                 f([report.sinr_common_relay, report.sinr_priv_relay]),
                 f(report.sinr_common_ud), f(report.sinr_priv_ud)]
    elif strategy is Strategy.RSMA:
        parts = [[report.rate_common], report.rate_total[1:],
                 f(report.sinr_common_ud), f(report.sinr_priv_ud)]
    else:
        parts = [report.rate_total[1:], f(report.sinr_priv_ud)]
    return np.concatenate([np.asarray(p, dtype=float) for p in parts])


class Environment:
    """Continuing MDP for one strategy. UD layout and LoS phases are fixed
    at :meth:`reset`; only the small-scale fading changes per step."""

    def __init__(self, config: SystemConfig, strategy: Strategy | str | None = None,
                 seed: int | None = None, validate: bool = True):
        self.config = config
        self.strategy = Strategy(strategy or config.strategy)
        self.seed = config.seed if seed is None else int(seed)
        self.validate = validate
        if config.num_uds < 1:
            raise ConfigError("at least one UD is required")
        self.layout = ActionLayout(self.strategy, config.num_uds)
        self.state_dim = state_dim(self.strategy, config.num_uds)
        self.total_power = config.gains.tx_power_sat
        self.reset()

    def reset(self) -> np.ndarray:
        cfg = self.config
        layout_seq, fading_seq = np.random.SeedSequence(self.seed).spawn(2)
        layout_rng = np.random.default_rng(layout_seq)
        self.rng = np.random.default_rng(fading_seq)
        positions = channel.place_uds(cfg.num_uds, cfg.area_radius, layout_rng)
        self.los = channel.random_los_phases(cfg.num_uds, cfg.gains.num_antennas, layout_rng)
        self.geometry = channel.build_geometry(positions, cfg.relay_height,
                                               cfg.soil.burial_depth, cfg.sat_range)
        self.budget = channel.link_budget(cfg.soil, self.geometry, cfg.gains)
        self.state = np.zeros(self.state_dim)
        return self.state.copy()

    def reseed_fading(self, stream: int) -> None:
        """Switch to fading stream ``stream`` of this seed; 0 is the training stream
        set by :meth:`reset`. Layout and LoS phases are untouched."""
        seq = np.random.SeedSequence(self.seed, spawn_key=(2 + int(stream),) if stream else (1,))
        self.rng = np.random.default_rng(seq)

    def draw_links(self) -> LinkRealization:
        return channel.draw_links(self.budget, self.config.gains, self.rng, self.los)

    def evaluate(self, action: ResourceAction, links: LinkRealization) -> RateReport:
        g = self.config.gains
        if self.strategy is Strategy.CRS:
            return evaluate_crs(links, action, noise_power=g.noise_power,
                                relay_power=g.tx_power_relay)
        if self.strategy is Strategy.RSMA:
            return evaluate_rsma(links, action, noise_power=g.noise_power)
        return evaluate_sdma(links, action, noise_power=g.noise_power)

    def step(self, action: ResourceAction, links: LinkRealization | None = None) -> StepOutcome:
        """Advance one period. ``links`` overrides the fading draw."""
        if self.validate:
            try:
                validate_action(action, self.layout, self.total_power)
            except ConstraintViolation as exc:
                raise ConstraintViolation(f"contract fault, infeasible action reached env: {exc}") from None
        if links is None:
            links = self.draw_links()
        report = self.evaluate(action, links)
        self.state = pack_state(report, self.strategy, self.config.log_sinr)
        return StepOutcome(reward=report.min_rate, next_state=self.state.copy(),
                           report=report, links=links)


@dataclass
class GreedyResult:
    rewards: np.ndarray
    best_action: ResourceAction
    best_reward: float
    explored: np.ndarray


def greedy_agent(env: Environment, steps: int, rng: np.random.Generator,
                 explore: float = 0.3) -> GreedyResult:
    """Archive every (action, reward); explore a uniform feasible action with
    probability ``explore`` (always on the first step), else replay the best."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    rewards = np.empty(steps)
    explored = np.zeros(steps, dtype=bool)
    best_action, best_reward = None, -np.inf
    for t in range(steps):
        if best_action is None or rng.random() < explore:
            action = random_feasible_action(env.layout, env.total_power, rng)
            explored[t] = True
        else:
            action = best_action
        reward = env.step(action).reward
        rewards[t] = reward
        if reward > best_reward:
            best_action, best_reward = action, reward
    return GreedyResult(rewards=rewards, best_action=best_action, best_reward=best_reward,
                        explored=explored)
