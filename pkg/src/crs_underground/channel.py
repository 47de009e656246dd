"""Satellite, relay and soil propagation models.

All quantities are linear scale and SI units. dB values are converted in
:mod:`crs_underground.config` before anything here sees them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class ChannelDomainError(ValueError):
    """A channel parameter is outside the domain of the propagation model."""


@dataclass(frozen=True)
class PhysicalConstants:
    c: float = 299_792_458.0
    mu0: float = 1.25663706212e-6
    eps0: float = 8.8541878128e-12


CONSTANTS = PhysicalConstants()


@dataclass(frozen=True)
class SoilProfile:
    """Dielectric description of the burial medium.

    ``vwc`` and ``clay`` are provenance only; the physics reads the
    permittivity parts directly.
    """

    eps_real: float
    eps_imag: float
    burial_depth: float
    mu_r: float = 1.0
    vwc: float = float("nan")
    clay: float = float("nan")

    def __post_init__(self):
        if not self.eps_real >= 1.0:
            raise ChannelDomainError(f"eps_real must be >= 1, got {self.eps_real}")
        if not self.eps_imag >= 0.0:
            raise ChannelDomainError(f"eps_imag must be >= 0, got {self.eps_imag}")
        if not self.mu_r > 0.0:
            raise ChannelDomainError(f"mu_r must be > 0, got {self.mu_r}")
        if not self.burial_depth > 0.0:
            raise ChannelDomainError(f"burial_depth must be > 0, got {self.burial_depth}")


@dataclass(frozen=True)
class AntennaGains:
    """Radio parameters of the three node types, all linear."""

    g_sat: float
    g_relay: float
    g_ud: float
    tx_power_sat: float
    tx_power_relay: float
    noise_power: float
    carrier_freq: float
    num_antennas: int
    rician_k_leo: float = 10.0
    rician_k_relay: float = 3.0
    ple_leo: float = 2.0
    ple_relay: float = 2.4

    def __post_init__(self):
        for name in ("g_sat", "g_relay", "g_ud", "tx_power_sat", "tx_power_relay",
                     "noise_power", "carrier_freq", "ple_leo", "ple_relay"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ChannelDomainError(f"{name} must be finite and > 0, got {value}")
        if self.num_antennas < 1:
            raise ChannelDomainError(f"num_antennas must be >= 1, got {self.num_antennas}")
        for name in ("rician_k_leo", "rician_k_relay"):
            if not getattr(self, name) >= 0:
                raise ChannelDomainError(f"{name} must be >= 0")


@dataclass(frozen=True, eq=False)
class Geometry:
    """Distances of every link. ``relay_distance_ud`` includes the soil segment."""

    sat_distance_ar: float
    sat_distance_ud: np.ndarray
    relay_height: float
    ud_positions: np.ndarray
    relay_distance_ud: np.ndarray
    soil_distance: np.ndarray

    @property
    def num_uds(self) -> int:
        return len(self.ud_positions)


@dataclass(frozen=True, eq=False)
class LinkRealization:
    """One coherence-period draw of every channel.

    h_ar: (Q,) satellite to relay; h_ud: (N, Q) satellite to each UD;
    h_relay_ud: (N,) relay to each UD.
    """

    h_ar: np.ndarray
    h_ud: np.ndarray
    h_relay_ud: np.ndarray

    def __post_init__(self):
        q = self.h_ar.shape[0]
        if self.h_ud.ndim != 2 or self.h_ud.shape[1] != q:
            raise ChannelDomainError(f"h_ud must be (N, {q}), got {self.h_ud.shape}")
        if self.h_relay_ud.shape != (self.h_ud.shape[0],):
            raise ChannelDomainError("h_relay_ud must hold one scalar per UD")
        for arr in (self.h_ar, self.h_ud, self.h_relay_ud):
            if not np.all(np.isfinite(arr)):
                raise ChannelDomainError("channel realization contains non-finite entries")

    @property
    def num_uds(self) -> int:
        return self.h_ud.shape[0]

    @property
    def num_antennas(self) -> int:
        return self.h_ar.shape[0]


@dataclass(frozen=True, eq=False)
class LinkBudget:
    """Deterministic amplitude factors multiplying the small-scale fading."""

    amp_ar: float
    amp_ud: np.ndarray
    amp_relay_ud: np.ndarray


@dataclass(frozen=True, eq=False)
class LosPhases:
    """Fixed line-of-sight phases per link, held constant across draws."""

    ar: np.ndarray | float = 0.0
    ud: np.ndarray | float = 0.0
    relay_ud: np.ndarray | float = 0.0


def _check_finite(value: float, name: str) -> float:
    if not math.isfinite(value):
        raise ChannelDomainError(f"non-finite result; check parameter '{name}'")
    return value


def attenuation_constants(soil: SoilProfile, freq: float) -> tuple[float, float]:
    """Attenuation (Np/m) and phase (rad/m) constants of a lossy dielectric."""
    if not freq > 0:
        raise ChannelDomainError(f"freq must be > 0, got {freq}")
    ratio = soil.eps_imag / soil.eps_real
    root = math.hypot(1.0, ratio)
    # sqrt(1+r^2)-1 written without cancellation
    lower = ratio * ratio / (root + 1.0)
    upper = root + 1.0
    scale = soil.mu_r * CONSTANTS.mu0 * soil.eps_real * CONSTANTS.eps0 / 2.0
    omega = 2.0 * math.pi * freq
    alpha = omega * math.sqrt(scale * lower)
    beta = omega * math.sqrt(scale * upper)
    _check_finite(alpha, "freq" if not math.isfinite(omega) else "eps_imag")
    _check_finite(beta, "freq" if not math.isfinite(omega) else "eps_real")
    return alpha, beta


def refraction_loss(soil: SoilProfile) -> float:
    """Power loss factor (>0, linear) crossing the air-soil interface."""
    inner = math.sqrt((math.hypot(soil.eps_real, soil.eps_imag) + soil.eps_real) / 2.0)
    return _check_finite(((inner + 1.0) / 4.0) ** 2, "eps_real")


def soil_loss(soil: SoilProfile, freq: float, dist_soil: float) -> float:
    """Path loss factor of ``dist_soil`` metres of soil.

    Strictly positive distance is required: the model goes to zero at d=0.
    """
    if not dist_soil > 0:
        raise ChannelDomainError(f"dist_soil must be > 0, got {dist_soil}")
    alpha, beta = attenuation_constants(soil, freq)
    try:
        value = (2.0 * beta * dist_soil * math.exp(alpha * dist_soil)) ** 2
    except OverflowError:
        raise ChannelDomainError("soil loss overflow; check parameter 'dist_soil'") from None
    return _check_finite(value, "dist_soil")


def friis_gain(gain_tx: float, gain_rx: float, freq: float, dist: float,
               ple: float = 2.0) -> float:
    """Free-space power gain with a generalized exponent (1 m reference)."""
    for name, value in (("gain_tx", gain_tx), ("gain_rx", gain_rx), ("freq", freq),
                        ("dist", dist), ("ple", ple)):
        if not value > 0:
            raise ChannelDomainError(f"{name} must be > 0, got {value}")
    scale = CONSTANTS.c / (4.0 * math.pi * freq)
    return gain_tx * gain_rx * scale * scale * dist ** (-ple)


def sample_rician(k_factor: float, dims, rng: np.random.Generator,
                  los_phase=0.0) -> np.ndarray:
    """Unit-power Rician fading entries of shape ``dims``.

    ``k_factor=inf`` returns the pure LoS component.
    """
    if not k_factor >= 0:
        raise ChannelDomainError(f"k_factor must be >= 0, got {k_factor}")
    shape = (dims,) if np.isscalar(dims) else tuple(dims)
    los = np.broadcast_to(np.exp(1j * np.asarray(los_phase, dtype=float)), shape)
    if math.isinf(k_factor):
        return np.array(los, dtype=complex)
    scattered = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2.0)
    return math.sqrt(k_factor / (k_factor + 1.0)) * los + math.sqrt(1.0 / (k_factor + 1.0)) * scattered


def place_uds(count: int, radius: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform positions in a disk around the relay, one (x, y) row per UD.

    Rows are drawn one UD at a time, so the first k UDs of a larger
    deployment coincide with a k-UD deployment under the same seed.
    """
    if count < 1:
        raise ChannelDomainError(f"UD count must be >= 1, got {count}")
    u = rng.random((count, 2))
    r = radius * np.sqrt(u[:, 0])
    phi = 2.0 * np.pi * u[:, 1]
    return np.column_stack([r * np.cos(phi), r * np.sin(phi)])


def build_geometry(ud_positions: np.ndarray, relay_height: float, burial_depth: float,
                   sat_range: float) -> Geometry:
    ud_positions = np.asarray(ud_positions, dtype=float)
    n = len(ud_positions)
    if relay_height <= 0 or burial_depth <= 0 or sat_range <= 0:
        raise ChannelDomainError("relay_height, burial_depth and sat_range must be > 0")
    horizontal = np.hypot(ud_positions[:, 0], ud_positions[:, 1])
    air = np.sqrt(relay_height ** 2 + horizontal ** 2)
    return Geometry(
        sat_distance_ar=float(sat_range),
        sat_distance_ud=np.full(n, float(sat_range)),
        relay_height=float(relay_height),
        ud_positions=ud_positions,
        relay_distance_ud=air + burial_depth,
        soil_distance=np.full(n, float(burial_depth)),
    )


def link_budget(soil: SoilProfile, geometry: Geometry, gains: AntennaGains) -> LinkBudget:
    f = gains.carrier_freq
    l_refr = refraction_loss(soil)
    amp_ar = math.sqrt(friis_gain(gains.g_sat, gains.g_relay, f, geometry.sat_distance_ar,
                                  gains.ple_leo))
    amp_ud = np.empty(geometry.num_uds)
    amp_relay = np.empty(geometry.num_uds)
    for n in range(geometry.num_uds):
        buried = l_refr * soil_loss(soil, f, float(geometry.soil_distance[n]))
        amp_ud[n] = math.sqrt(friis_gain(gains.g_sat, gains.g_ud, f,
                                         float(geometry.sat_distance_ud[n]), gains.ple_leo) / buried)
        amp_relay[n] = math.sqrt(friis_gain(gains.g_relay, gains.g_ud, f,
                                            float(geometry.relay_distance_ud[n]),
                                            gains.ple_relay) / buried)
    return LinkBudget(amp_ar=amp_ar, amp_ud=amp_ud, amp_relay_ud=amp_relay)


def draw_links(budget: LinkBudget, gains: AntennaGains, rng: np.random.Generator,
               los: LosPhases | None = None) -> LinkRealization:
    """Apply fresh fading to a precomputed link budget."""
    los = los or LosPhases()
    q = gains.num_antennas
    n = len(budget.amp_ud)
    d_ar = sample_rician(gains.rician_k_leo, q, rng, los.ar)
    d_ud = sample_rician(gains.rician_k_leo, (n, q), rng, los.ud)
    d_relay = sample_rician(gains.rician_k_relay, n, rng, los.relay_ud)
    return LinkRealization(
        h_ar=budget.amp_ar * d_ar,
        h_ud=budget.amp_ud[:, None] * d_ud,
        h_relay_ud=budget.amp_relay_ud * d_relay,
    )


def realize_links(soil: SoilProfile, geometry: Geometry, gains: AntennaGains,
                  rng: np.random.Generator, los: LosPhases | None = None) -> LinkRealization:
    return draw_links(link_budget(soil, geometry, gains), gains, rng, los)


def random_los_phases(num_uds: int, num_antennas: int, rng: np.random.Generator) -> LosPhases:
    """Draw one fixed LoS phase per antenna entry of every link."""
    two_pi = 2.0 * np.pi
    return LosPhases(
        ar=two_pi * rng.random(num_antennas),
        ud=two_pi * rng.random((num_uds, num_antennas)),
        relay_ud=two_pi * rng.random(num_uds),
    )


@dataclass(frozen=True)
class DielectricTable:
    """Permittivity versus volumetric water content, linearly interpolated.

    Defaults are for a 16.86 % clay loam at 433 MHz. They are approximate
    values read off mineralogy-based dielectric model curves and are meant
    to be overridden when measured data for a site is available.
    """

    vwc: tuple[float, ...] = (0.10, 0.15, 0.20, 0.25)
    eps_real: tuple[float, ...] = (5.6, 8.2, 11.2, 14.6)
    eps_imag: tuple[float, ...] = (0.7, 1.1, 1.6, 2.2)
    clay: float = 0.1686
    freq_hz: float = 433e6

    def __post_init__(self):
        if not (len(self.vwc) == len(self.eps_real) == len(self.eps_imag) >= 2):
            raise ChannelDomainError("dielectric table needs >= 2 aligned rows")
        if any(b <= a for a, b in zip(self.vwc, self.vwc[1:])):
            raise ChannelDomainError("dielectric table VWC column must be increasing")

    def lookup(self, vwc: float) -> tuple[float, float]:
        """(eps_real, eps_imag) at ``vwc``; outside the table the end rows extrapolate."""
        xs = self.vwc

        def interp(ys):
            if vwc <= xs[0]:
                i = 0
            elif vwc >= xs[-1]:
                i = len(xs) - 2
            else:
                i = int(np.searchsorted(xs, vwc)) - 1
            t = (vwc - xs[i]) / (xs[i + 1] - xs[i])
            return ys[i] + t * (ys[i + 1] - ys[i])

        return float(interp(self.eps_real)), float(interp(self.eps_imag))
