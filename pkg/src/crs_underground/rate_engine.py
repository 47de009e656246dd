"""SINRs and achievable rates for cooperative rate splitting and its baselines.

Receivers are indexed AR first, then UDs; streams are common, AR private,
then UD privates. Everything works on the matrix of effective gains
``|h_k^H w_j|^2`` so each SINR is a ratio of row sums.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .actions import ResourceAction
from .channel import LinkRealization


class DegenerateChannelError(ValueError):
    """A channel vector has zero norm, so no matched filter exists."""


@dataclass(frozen=True, eq=False)
class Precoders:
    w_common: np.ndarray
    w_relay_priv: np.ndarray
    w_ud_priv: np.ndarray


@dataclass(frozen=True, eq=False)
class RateReport:
    """All SINRs and rates of one period. Rates in bps/Hz.

    ``rate_total`` is (AR, UD_1..UD_N). Strategies without a relay report
    zeros in the AR slots.
    """

    sinr_common_relay: float
    sinr_common_ud: np.ndarray
    sinr_priv_relay: float
    sinr_priv_ud: np.ndarray
    rate_common: float
    rate_coop_ud: np.ndarray
    rate_priv_relay: float
    rate_priv_ud: np.ndarray
    common_alloc: np.ndarray
    rate_total: np.ndarray
    min_rate: float

    def to_dict(self) -> dict:
        out = {}
        for key, value in self.__dict__.items():
            out[key] = value.tolist() if isinstance(value, np.ndarray) else float(value)
        return out


def _unit(h: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(h, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise DegenerateChannelError("zero-norm channel vector")
    return h / norm


def build_precoders(links: LinkRealization, include_relay: bool = True) -> Precoders:
    """Matched-filter private precoders and a multicast MRT common precoder.

    The common precoder is the normalized sum of the normalized channels of
    every receiver that must decode the common stream.
    """
    w_ar = _unit(links.h_ar)
    w_ud = _unit(links.h_ud)
    s = w_ud.sum(axis=0) + (w_ar if include_relay else 0.0)
    norm = np.linalg.norm(s)
    if norm == 0:
        raise DegenerateChannelError("normalized channels cancel; common precoder undefined")
    return Precoders(w_common=s / norm, w_relay_priv=w_ar, w_ud_priv=w_ud)


def effective_gains(links: LinkRealization, prec: Precoders) -> np.ndarray:
    """(N+1, N+2) matrix of |h_k^H w_j|^2; rows AR, UDs; cols common, AR, UDs."""
    h = np.vstack([links.h_ar[None, :], links.h_ud])
    w = np.vstack([prec.w_common[None, :], prec.w_relay_priv[None, :], prec.w_ud_priv])
    return np.abs(h.conj() @ w.T) ** 2


def sinr_common_direct(links: LinkRealization, prec: Precoders, action: ResourceAction,
                       noise_power: float, gains: np.ndarray | None = None):
    """Common-stream SINR at the AR and each UD, all private streams as noise."""
    g = effective_gains(links, prec) if gains is None else gains
    p = np.asarray(action.power)
    interference = g[:, 1:] @ p[1:]
    sinr = p[0] * g[:, 0] / (interference + noise_power)
    return float(sinr[0]), sinr[1:]


def sinr_private_direct(links: LinkRealization, prec: Precoders, action: ResourceAction,
                        noise_power: float, gains: np.ndarray | None = None):
    """Private-stream SINRs after the common stream has been cancelled."""
    g = effective_gains(links, prec) if gains is None else gains
    p = np.asarray(action.power)
    received = g[:, 1:] * p[1:]
    desired = np.diag(received)
    interference = received.sum(axis=1) - desired
    sinr = desired / (interference + noise_power)
    return float(sinr[0]), sinr[1:]


def cooperative_rate(links: LinkRealization, action: ResourceAction,
                     rate_common_relay_direct: float, relay_power: float,
                     noise_power: float) -> np.ndarray:
    """Rate at which each UD decodes the relay's re-encoded common stream."""
    snr = relay_power * np.abs(links.h_relay_ud) ** 2 / noise_power
    second_phase = (1.0 - action.theta) * np.log2(1.0 + snr)
    return np.minimum(rate_common_relay_direct, second_phase)


def _finish(sinr_c_ar, sinr_c_ud, sinr_p_ar, sinr_p_ud, rate_common, coop, theta,
            split_ar, split_ud) -> RateReport:
    rate_p_ar = theta * np.log2(1.0 + sinr_p_ar)
    rate_p_ud = theta * np.log2(1.0 + sinr_p_ud)
    alloc = np.concatenate([[split_ar], split_ud]) * rate_common
    total = np.concatenate([[rate_p_ar], rate_p_ud]) + alloc
    return RateReport(
        sinr_common_relay=float(sinr_c_ar),
        sinr_common_ud=np.asarray(sinr_c_ud, dtype=float),
        sinr_priv_relay=float(sinr_p_ar),
        sinr_priv_ud=np.asarray(sinr_p_ud, dtype=float),
        rate_common=float(rate_common),
        rate_coop_ud=np.asarray(coop, dtype=float),
        rate_priv_relay=float(rate_p_ar),
        rate_priv_ud=rate_p_ud,
        common_alloc=alloc,
        rate_total=total,
        min_rate=float(np.min(total[1:])),
    )


def evaluate_crs(links: LinkRealization, action: ResourceAction, *, noise_power: float,
                 relay_power: float, precoders: Precoders | None = None) -> RateReport:
    prec = precoders or build_precoders(links, include_relay=True)
    g = effective_gains(links, prec)
    c_ar, c_ud = sinr_common_direct(links, prec, action, noise_power, g)
    p_ar, p_ud = sinr_private_direct(links, prec, action, noise_power, g)
    theta = float(action.theta)
    direct_ar = theta * np.log2(1.0 + c_ar)
    direct_ud = theta * np.log2(1.0 + c_ud)
    coop = cooperative_rate(links, action, direct_ar, relay_power, noise_power)
    rate_common = min(direct_ar, float(np.min(direct_ud + coop)))
    split = np.asarray(action.common_split)
    return _finish(c_ar, c_ud, p_ar, p_ud, rate_common, coop, theta, split[0], split[1:])


def _with_silent_relay(action: ResourceAction, common_power: float) -> ResourceAction:
    p = np.asarray(action.power)
    return ResourceAction(power=np.concatenate([[common_power, 0.0], p]),
                          common_split=np.asarray(action.common_split), theta=1.0)


def evaluate_rsma(links: LinkRealization, action: ResourceAction, *, noise_power: float,
                  precoders: Precoders | None = None) -> RateReport:
    """One-layer RSMA without a relay; ``action.power`` is (P_c, P_1..P_N)."""
    prec = precoders or build_precoders(links, include_relay=False)
    p = np.asarray(action.power)
    full = _with_silent_relay(ResourceAction(power=p[1:], common_split=action.common_split),
                              float(p[0]))
    g = effective_gains(links, prec)
    _, c_ud = sinr_common_direct(links, prec, full, noise_power, g)
    _, p_ud = sinr_private_direct(links, prec, full, noise_power, g)
    rate_common = float(np.min(np.log2(1.0 + c_ud)))
    n = links.num_uds
    return _finish(0.0, c_ud, 0.0, p_ud, rate_common, np.zeros(n), 1.0, 0.0,
                   np.asarray(action.common_split))


def evaluate_sdma(links: LinkRealization, action: ResourceAction, *, noise_power: float,
                  precoders: Precoders | None = None) -> RateReport:
    """Private streams only, all inter-user interference treated as noise."""
    prec = precoders or build_precoders(links, include_relay=False)
    full = _with_silent_relay(action, 0.0)
    g = effective_gains(links, prec)
    _, p_ud = sinr_private_direct(links, prec, full, noise_power, g)
    n = links.num_uds
    return _finish(0.0, np.zeros(n), 0.0, p_ud, 0.0, np.zeros(n), 1.0, 0.0, np.zeros(n))


def check_common_budget(report: RateReport, tol: float = 1e-12) -> bool:
    """True when the allocated common portions fit inside the common rate."""
    return bool(np.all(report.common_alloc >= 0)
                and report.common_alloc.sum() <= report.rate_common * (1.0 + tol) + tol)
