"""Flat key-value configuration, presets, and conversion to physical units.

A config file holds one ``key = value`` pair per line; ``#`` starts a
comment. dB quantities are converted to linear scale exactly once, in
:meth:`SystemConfig.from_settings`.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

from .actions import Strategy
from .channel import AntennaGains, ChannelDomainError, DielectricTable, SoilProfile
from .ppo import PpoHyper


class ConfigError(ValueError):
    pass


# Paper-scale defaults. geom.sat_range_m is not given by the source scenario;
# 550 km is a typical LEO altitude.
DEFAULTS: dict[str, object] = {
    "soil.eps_real": "auto",
    "soil.eps_imag": "auto",
    "soil.mu_r": 1.0,
    "soil.vwc": 0.15,
    "soil.clay": 0.1686,
    "soil.burial_depth_m": 0.6,
    "soil.table": "0.10:5.6:0.7,0.15:8.2:1.1,0.20:11.2:1.6,0.25:14.6:2.2",
    "geom.sat_range_m": 550e3,
    "geom.relay_height_m": 5.0,
    "geom.area_radius_m": 1000.0,
    "rf.freq_hz": 433e6,
    "rf.noise_dbm": -117.0,
    "rf.ple_leo": 2.0,
    "rf.ple_relay": 2.4,
    "rf.rician_leo": 10.0,
    "rf.rician_relay": 3.0,
    "sat.antennas": 6,
    "sat.tx_dbm": 30.0,
    "sat.gain_dbi": 22.6,
    "relay.tx_dbm": 20.0,
    "relay.gain_dbi": 5.0,
    "ud.count": 5,
    "ud.gain_dbi": 2.15,
    "seed": 0,
    "strategy": "crs",
    "ppo.epochs": 2000,
    "ppo.batch": 512,
    "ppo.update_rounds": 3,
    "ppo.discount": 0.9,
    "ppo.gae": 0.95,
    "ppo.clip": 0.2,
    "ppo.lr": 1e-4,
    "ppo.entropy_coef": 0.01,
    "ppo.adv_norm": True,
    "ppo.max_grad_norm": 0.5,
    "ppo.weight_decay": 1e-4,
    "ppo.hidden": "512,256",
    "ppo.init_log_std": -0.5,
    "greedy.explore": 0.3,
    "state.log_sinr": True,
    "eval.draws": 512,
}

PRESETS: dict[str, dict[str, object]] = {
    "paper": {},
    "desk": {"ud.count": 3, "ppo.epochs": 300, "ppo.batch": 256},
}

_INT_KEYS = {"sat.antennas", "ud.count", "seed", "ppo.epochs", "ppo.batch",
             "ppo.update_rounds", "eval.draws"}
_BOOL_KEYS = {"ppo.adv_norm", "state.log_sinr"}
_STR_KEYS = {"soil.table", "strategy", "ppo.hidden", "soil.eps_real", "soil.eps_imag"}


def db_to_linear(db: float) -> float:
    return 10.0 ** (db / 10.0)


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


def _coerce(key: str, value) -> object:
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key '{key}'")
    try:
        if key in _BOOL_KEYS:
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in ("1", "true", "yes", "on"):
                return True
            if text in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if key in _INT_KEYS:
            f = float(value)
            if f != int(f):
                raise ValueError(value)
            return int(f)
        if key in _STR_KEYS:
            text = str(value).strip()
            if key.startswith("soil.eps") and text != "auto":
                return float(text)
            return text
        return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"invalid value for '{key}': {value!r}") from None


def parse_config_text(text: str) -> dict[str, object]:
    settings = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        settings[key] = _coerce(key, value)
    return settings


def resolve_settings(preset: str | None = None, file: str | Path | None = None,
                     overrides: dict | None = None) -> dict[str, object]:
    """Defaults, then preset, then file, then explicit overrides."""
    settings = dict(DEFAULTS)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset '{preset}'")
        settings.update(PRESETS[preset])
    if file is not None:
        try:
            text = Path(file).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from None
        settings.update(parse_config_text(text))
    for key, value in (overrides or {}).items():
        settings[key] = _coerce(key, value)
    return settings


def settings_digest(settings: dict) -> str:
    blob = json.dumps(settings, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def parse_table(text: str, clay: float, freq: float) -> DielectricTable:
    try:
        rows = [tuple(float(x) for x in item.split(":")) for item in text.split(",") if item.strip()]
        vwc, er, ei = zip(*rows)
    except ValueError:
        raise ConfigError(f"soil.table must be 'vwc:eps_real:eps_imag,...', got {text!r}") from None
    try:
        return DielectricTable(vwc=vwc, eps_real=er, eps_imag=ei, clay=clay, freq_hz=freq)
    except ChannelDomainError as exc:
        raise ConfigError(str(exc)) from None


@dataclass(frozen=True, eq=False)
class SystemConfig:
    """Physical scenario with every quantity already linear."""

    soil: SoilProfile
    gains: AntennaGains
    sat_range: float
    relay_height: float
    area_radius: float
    num_uds: int
    seed: int
    strategy: Strategy
    log_sinr: bool
    greedy_explore: float
    eval_draws: int
    hyper: PpoHyper
    settings: dict

    @classmethod
    def from_settings(cls, settings: dict) -> "SystemConfig":
        s = {k: _coerce(k, v) for k, v in settings.items()}
        if s["ud.count"] < 1:
            raise ConfigError("ud.count must be >= 1")
        for key in ("geom.sat_range_m", "geom.relay_height_m", "geom.area_radius_m"):
            if not s[key] > 0:
                raise ConfigError(f"{key} must be > 0")
        if not 0.0 <= s["greedy.explore"] <= 1.0:
            raise ConfigError("greedy.explore must lie in [0, 1]")
        if s["eval.draws"] < 1:
            raise ConfigError("eval.draws must be >= 1")
        table = parse_table(s["soil.table"], s["soil.clay"], s["rf.freq_hz"])
        eps_r, eps_i = table.lookup(s["soil.vwc"])
        if s["soil.eps_real"] != "auto":
            eps_r = s["soil.eps_real"]
        if s["soil.eps_imag"] != "auto":
            eps_i = s["soil.eps_imag"]
        try:
            soil = SoilProfile(eps_real=eps_r, eps_imag=eps_i, burial_depth=s["soil.burial_depth_m"],
                               mu_r=s["soil.mu_r"], vwc=s["soil.vwc"], clay=s["soil.clay"])
            gains = AntennaGains(
                g_sat=db_to_linear(s["sat.gain_dbi"]),
                g_relay=db_to_linear(s["relay.gain_dbi"]),
                g_ud=db_to_linear(s["ud.gain_dbi"]),
                tx_power_sat=dbm_to_watts(s["sat.tx_dbm"]),
                tx_power_relay=dbm_to_watts(s["relay.tx_dbm"]),
                noise_power=dbm_to_watts(s["rf.noise_dbm"]),
                carrier_freq=s["rf.freq_hz"],
                num_antennas=s["sat.antennas"],
                rician_k_leo=s["rf.rician_leo"],
                rician_k_relay=s["rf.rician_relay"],
                ple_leo=s["rf.ple_leo"],
                ple_relay=s["rf.ple_relay"],
            )
        except ChannelDomainError as exc:
            raise ConfigError(str(exc)) from None
        try:
            strategy = Strategy(s["strategy"])
        except ValueError:
            raise ConfigError(f"unknown strategy '{s['strategy']}'") from None
        try:
            hidden = tuple(int(h) for h in str(s["ppo.hidden"]).split(","))
            hyper = PpoHyper(
                epochs=s["ppo.epochs"], batch=s["ppo.batch"], update_rounds=s["ppo.update_rounds"],
                discount=s["ppo.discount"], gae=s["ppo.gae"], clip=s["ppo.clip"], lr=s["ppo.lr"],
                entropy_coef=s["ppo.entropy_coef"], adv_norm=s["ppo.adv_norm"],
                max_grad_norm=s["ppo.max_grad_norm"], weight_decay=s["ppo.weight_decay"],
                hidden=hidden, init_log_std=s["ppo.init_log_std"])
        except ValueError as exc:
            raise ConfigError(f"invalid PPO settings: {exc}") from None
        if not all(math.isfinite(v) for v in (soil.eps_real, soil.eps_imag)):
            raise ConfigError("soil permittivity must be finite")
        return cls(soil=soil, gains=gains, sat_range=s["geom.sat_range_m"],
                   relay_height=s["geom.relay_height_m"], area_radius=s["geom.area_radius_m"],
                   num_uds=s["ud.count"], seed=s["seed"], strategy=strategy,
                   log_sinr=s["state.log_sinr"], greedy_explore=s["greedy.explore"],
                   eval_draws=s["eval.draws"], hyper=hyper, settings=s)

    def override(self, mapping: dict) -> "SystemConfig":
        settings = dict(self.settings)
        settings.update(mapping)
        return SystemConfig.from_settings(settings)


def load_config(preset: str | None = None, file=None, overrides: dict | None = None) -> SystemConfig:
    return SystemConfig.from_settings(resolve_settings(preset, file, overrides))
