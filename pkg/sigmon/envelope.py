"""Parametric envelope of a single arriving phase.

g(t) = 0                                 t <= tau
       alpha (t - tau) / rho             tau < t <= tau + rho
       alpha (t - tau + 1)^-gamma e^(-beta (t - tau))   otherwise

The two branches do not meet at t = tau + rho unless gamma = beta = 0; the
form is kept as is.
"""
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.optimize import brentq

from sigmon.base import DomainError


# floor applied to gamma/beta before taking logs
SHAPE_FLOOR = 1e-6


@dataclass(frozen=True)
class ArrivalParams:
    tau: float
    rho: float
    alpha: float
    gamma: float
    beta: float

    def validate(self) -> None:
        if not (self.rho > 0 and self.alpha > 0):
            raise DomainError(f"rise time and amplitude must be positive: {self}")
        if self.gamma < 0 or self.beta < 0:
            raise DomainError(f"decay rates must be nonnegative: {self}")

    def peak_time(self) -> float:
        return self.tau + self.rho


def _evaluate(t: np.ndarray, theta: ArrivalParams) -> np.ndarray:
    dt = t - theta.tau
    out = np.zeros_like(dt)
    onset = (dt > 0) & (dt <= theta.rho)
    decay = dt > theta.rho
    out[onset] = theta.alpha * dt[onset] / theta.rho
    dd = dt[decay]
    out[decay] = theta.alpha * np.power(dd + 1.0, -theta.gamma) * np.exp(-theta.beta * dd)
    return out


def envelope_at(times: np.ndarray, theta: ArrivalParams) -> np.ndarray:
    return _evaluate(np.asarray(times, dtype=float), theta)


def envelope_value(t: float, theta: ArrivalParams) -> float:
    # same kernel as envelope_series so that both agree bit for bit
    return float(_evaluate(np.array([t], dtype=float), theta)[0])


def sample_times(start_time: float, n_samples: int, rate_hz: float) -> np.ndarray:
    return start_time + np.arange(n_samples, dtype=float) / rate_hz


def envelope_series(theta: ArrivalParams, start_time: float, n_samples: int, rate_hz: float) -> np.ndarray:
    if rate_hz <= 0:
        raise DomainError("sample rate must be positive")
    if n_samples <= 0:
        return np.zeros(0)
    return _evaluate(sample_times(start_time, n_samples, rate_hz), theta)


def decay_is_bounded(theta: ArrivalParams) -> bool:
    return theta.gamma > 0 or theta.beta > 0


def log_shape(theta: ArrivalParams) -> Tuple[float, float, float, float]:
    """(log alpha, log rho, log gamma, log beta), the parameterization the GPs model."""
    return (math.log(theta.alpha), math.log(theta.rho),
            math.log(max(theta.gamma, SHAPE_FLOOR)), math.log(max(theta.beta, SHAPE_FLOOR)))


def from_log_shape(tau: float, log_alpha: float, log_rho: float, log_gamma: float, log_beta: float) -> ArrivalParams:
    return ArrivalParams(tau=tau, rho=math.exp(log_rho), alpha=math.exp(log_alpha),
                         gamma=math.exp(log_gamma), beta=math.exp(log_beta))


def from_log_vector(vector) -> ArrivalParams:
    """Inverse of (tau, *log_shape(theta))."""
    tau, log_alpha, log_rho, log_gamma, log_beta = (float(v) for v in vector)
    return from_log_shape(tau, log_alpha, log_rho, log_gamma, log_beta)


def envelope_support(theta: ArrivalParams, floor: float = 0.01, max_coda_s: float = 600.0) -> float:
    """Last time at which the envelope is still modelled as nonzero.

    The decay branch is cut once it drops below floor * alpha; the cut never
    lies beyond tau + max_coda_s nor before the peak.
    """
    if floor <= 0.0 or not decay_is_bounded(theta):
        return theta.tau + max(theta.rho, max_coda_s)
    target = -math.log(floor)

    def excess(dt: float) -> float:
        return theta.gamma * math.log(dt + 1.0) + theta.beta * dt - target

    lo, hi = theta.rho, max(theta.rho, max_coda_s)
    if excess(lo) >= 0.0:
        return theta.tau + lo
    if excess(hi) <= 0.0:
        return theta.tau + hi
    return theta.tau + brentq(excess, lo, hi, xtol=1e-9)
