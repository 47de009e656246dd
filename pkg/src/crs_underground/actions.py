"""Resource actions, their per-strategy layout, and the feasibility mapping."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np


class Strategy(str, enum.Enum):
    CRS = "crs"
    RSMA = "rsma"
    SDMA = "sdma"


class ConstraintViolation(ValueError):
    """An action falls outside the feasible set of the max-min problem."""


@dataclass(frozen=True, eq=False)
class ResourceAction:
    """Powers (W), common-rate split fractions and direct-phase time share.

    For CRS the layout is power=(P_c, P_ar, P_1..P_N), common_split=(C_ar,
    C_1..C_N). RSMA drops the relay entries; SDMA carries private powers only.
    """

    power: np.ndarray
    common_split: np.ndarray
    theta: float = 1.0


@dataclass(frozen=True)
class ActionLayout:
    strategy: Strategy
    num_uds: int

    @property
    def power_dim(self) -> int:
        return {Strategy.CRS: self.num_uds + 2, Strategy.RSMA: self.num_uds + 1,
                Strategy.SDMA: self.num_uds}[self.strategy]

    @property
    def split_dim(self) -> int:
        return {Strategy.CRS: self.num_uds + 1, Strategy.RSMA: self.num_uds,
                Strategy.SDMA: 0}[self.strategy]

    @property
    def has_theta(self) -> bool:
        return self.strategy is Strategy.CRS

    @property
    def raw_dim(self) -> int:
        return self.power_dim + self.split_dim + int(self.has_theta)

    def split_raw(self, raw: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        p, s = self.power_dim, self.split_dim
        return raw[..., :p], raw[..., p:p + s], raw[..., p + s:]


def _softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - np.max(x))
    return z / z.sum()


def _cap_sum(x: np.ndarray, limit: float) -> np.ndarray:
    """Shrink by a few ulps when rounding pushed the sum above ``limit``."""
    while x.sum() > limit:
        x = x * (1.0 - 2.0 ** -52)
    return x


def squash_action(raw: np.ndarray, layout: ActionLayout, total_power: float) -> ResourceAction:
    """Map an unconstrained vector onto the feasible set.

    Powers are a softmax scaled to the full budget. Split fractions are a
    softmax over the split logits plus one slack logit fixed at zero, with
    the slack entry discarded, so they sum to at most one. Both sums are
    kept at or below their bounds exactly, not just up to rounding.
    """
    raw = np.asarray(raw, dtype=float)
    if raw.shape != (layout.raw_dim,):
        raise ConstraintViolation(f"raw action must have length {layout.raw_dim}, got {raw.shape}")
    raw_p, raw_s, raw_t = layout.split_raw(raw)
    power = _cap_sum(_softmax(raw_p) * total_power, total_power)
    if layout.split_dim:
        # slack logit fixed at 0
        z = np.exp(raw_s - max(float(raw_s.max()), 0.0))
        split = _cap_sum(z / (z.sum() + math.exp(-max(float(raw_s.max()), 0.0))), 1.0)
    else:
        split = np.zeros(0)
    theta = _sigmoid_scalar(float(raw_t[0])) if layout.has_theta else 1.0
    return ResourceAction(power=power, common_split=split, theta=theta)


def _sigmoid_scalar(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    ex = math.exp(x)
    return ex / (1.0 + ex)


def random_feasible_action(layout: ActionLayout, total_power: float,
                           rng: np.random.Generator) -> ResourceAction:
    """Uniform draw over the power simplex, the split simplex and theta."""
    e_p = -np.log(1.0 - rng.random(layout.power_dim))
    power = e_p / e_p.sum() * total_power
    if layout.split_dim:
        e_s = -np.log(1.0 - rng.random(layout.split_dim + 1))
        split = (e_s / e_s.sum())[:-1]
    else:
        split = np.zeros(0)
    theta = float(rng.random()) if layout.has_theta else 1.0
    return ResourceAction(power=power, common_split=split, theta=theta)


def validate_action(action: ResourceAction, layout: ActionLayout, total_power: float,
                    rtol: float = 1e-9) -> None:
    """Raise :class:`ConstraintViolation` unless the action is feasible."""
    p = np.asarray(action.power)
    c = np.asarray(action.common_split)
    if p.shape != (layout.power_dim,) or c.shape != (layout.split_dim,):
        raise ConstraintViolation(
            f"{layout.strategy.value} action needs {layout.power_dim} powers and "
            f"{layout.split_dim} splits, got {p.shape} and {c.shape}")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(c)) and np.isfinite(action.theta)):
        raise ConstraintViolation("action has non-finite entries")
    if np.any(p < 0):
        raise ConstraintViolation("negative power")
    if p.sum() > total_power * (1.0 + rtol):
        raise ConstraintViolation(f"power sum {p.sum()} exceeds budget {total_power}")
    if np.any(c < 0):
        raise ConstraintViolation("negative common-rate split")
    if c.sum() > 1.0 + rtol:
        raise ConstraintViolation(f"common-rate splits sum to {c.sum()} > 1")
    if not 0.0 <= action.theta <= 1.0:
        raise ConstraintViolation(f"theta {action.theta} outside [0, 1]")
    if not layout.has_theta and action.theta != 1.0:
        raise ConstraintViolation("single-phase strategies use theta = 1")
