"""Closed-form discrete-time strategy for independent assets.

At a state ``(s, x)`` and step length ``dt`` the optimal corner action trades
against the sign of ``x`` (with ``sign(0) = +1``) in the asset maximising the
strike-scaled one-step call value

    (s_i + |x|) * Phi(d1_i) - s_i * Phi(d2_i),
    d1_i = (log(1 + |x|/s_i) + sigma_i**2 dt / 2) / (sigma_i sqrt(dt)),
    d2_i = d1_i - sigma_i sqrt(dt).

Action indices follow the global corner ordering ``(+e1, -e1, +e2, -e2, ...)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .errors import CorrelatedMarket, DomainError

# scipy's ndtr (Cephes erf/erfc rational approximations, ~1e-16 relative).
Phi = ndtr


@dataclass(frozen=True)
class CallQuote:
    s: float
    x_abs: float
    sigma: float
    dt: float
    value: float
    d1: float
    d2: float


@dataclass(frozen=True)
class CornerAction:
    asset_index: int  # 1-based
    direction: int  # +1 or -1

    def __post_init__(self):
        if self.asset_index < 1 or self.direction not in (1, -1):
            raise ValueError("invalid corner action")

    @property
    def index(self) -> int:
        """Position in the global corner ordering."""
        return 2 * (self.asset_index - 1) + (0 if self.direction > 0 else 1)

    @classmethod
    def from_index(cls, index: int) -> "CornerAction":
        return cls(asset_index=index // 2 + 1, direction=1 if index % 2 == 0 else -1)

    def vector(self, d: int) -> np.ndarray:
        q = np.zeros(d)
        q[self.asset_index - 1] = self.direction
        return q


def corner_vectors(d: int) -> np.ndarray:
    """Matrix of shape (2d, d) whose rows are +e1, -e1, ..., +ed, -ed."""
    out = np.zeros((2 * d, d))
    for i in range(d):
        out[2 * i, i] = 1.0
        out[2 * i + 1, i] = -1.0
    return out


def sign0(x):
    """Sign with the convention sign(0) = +1."""
    return np.where(np.asarray(x) >= 0, 1.0, -1.0)


def _check_domain(s, x_abs, sigma, dt):
    if np.any(np.asarray(s) <= 0) or np.any(np.asarray(sigma) <= 0) or np.any(np.asarray(dt) <= 0):
        raise DomainError("s, sigma and dt must be positive")
    if np.any(np.asarray(x_abs) < 0):
        raise DomainError("x_abs must be non-negative")


def scaled_call_value(s, x_abs, sigma, dt):
    """Vectorised ``kappa * CP(s / kappa)`` with ``kappa = (|x| + s) / s``."""
    _check_domain(s, x_abs, sigma, dt)
    s, x_abs, sigma, dt = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (s, x_abs, sigma, dt)))
    vol = sigma * np.sqrt(dt)
    d1 = (np.log1p(x_abs / s) + 0.5 * vol**2) / vol
    d2 = d1 - vol
    return (s + x_abs) * Phi(d1) - s * Phi(d2)


def scaled_call(s: float, x_abs: float, sigma: float, dt: float) -> CallQuote:
    _check_domain(s, x_abs, sigma, dt)
    vol = sigma * math.sqrt(dt)
    d1 = (math.log1p(x_abs / s) + 0.5 * vol**2) / vol
    d2 = d1 - vol
    value = (s + x_abs) * Phi(d1) - s * Phi(d2)
    return CallQuote(s=s, x_abs=x_abs, sigma=sigma, dt=dt, value=float(value), d1=d1, d2=d2)


def unit_strike_call(kappa, sigma, dt):
    """Call with spot ``kappa``, strike 1 and maturity ``dt`` (zero rate)."""
    kappa, sigma, dt = (np.asarray(a, dtype=float) for a in (kappa, sigma, dt))
    vol = sigma * np.sqrt(dt)
    d1 = (np.log(kappa) + 0.5 * vol**2) / vol
    return kappa * Phi(d1) - Phi(d1 - vol)


def optimal_action_indices(s, x, sigma, dt):
    """Optimal corner indices for a batch of states ``s`` (n, d), ``x`` (n,)."""
    s = np.atleast_2d(np.asarray(s, dtype=float))
    x = np.atleast_1d(np.asarray(x, dtype=float))
    values = scaled_call_value(s, np.abs(x)[:, None], np.asarray(sigma)[None, :], dt)
    j = np.argmax(values, axis=1)
    return 2 * j + (sign0(x) > 0).astype(int)  # -sign(x) > 0 means the odd slot


def optimal_action(state, params, dt: float, heuristic: bool = False) -> CornerAction:
    """Optimal corner action at ``state``; ``heuristic`` allows correlated markets."""
    if not params.uncorrelated and not heuristic:
        raise CorrelatedMarket("assets are correlated; pass heuristic=True to apply anyway")
    values = scaled_call_value(np.asarray(state.s, dtype=float), abs(state.x), params.sigma, dt)
    j = int(np.argmax(values))
    return CornerAction(asset_index=j + 1, direction=-int(sign0(state.x)))


def _expected_positive_part(a, b, s, sigma, dt):
    """E[(a*S + b)^+] for S lognormal with mean s and log-volatility sigma*sqrt(dt)."""
    vol = sigma * math.sqrt(dt)
    if a == 0.0:
        return max(b, 0.0)
    strike = -b / a
    if a > 0:
        if strike <= 0.0:
            return a * s + b
        d1 = (math.log(s / strike) + 0.5 * vol**2) / vol
        return a * (s * Phi(d1) - strike * Phi(d1 - vol))
    if strike <= 0.0:
        return 0.0
    d1 = (math.log(s / strike) + 0.5 * vol**2) / vol
    return -a * (strike * Phi(vol - d1) - s * Phi(-d1))


def _phi_check(z, s, x_abs, sigma, dt):
    if np.any(np.asarray(z) < 0):
        raise DomainError("z must be non-negative")
    _check_domain(s, x_abs, sigma, dt)


def _over_z(fn, z):
    if np.ndim(z) == 0:
        return float(fn(float(z)))
    return np.array([fn(float(v)) for v in np.ravel(z)]).reshape(np.shape(z))


def phi_minus(z, s, x_abs, sigma, dt):
    """E[max(|kappa*S - s|, z)] with kappa = (|x| + s) / s; ``z`` may be an array."""
    _phi_check(z, s, x_abs, sigma, dt)
    kappa = (x_abs + s) / s
    return _over_z(lambda v: _expected_positive_part(kappa, -(s + v), s, sigma, dt)
                   + _expected_positive_part(kappa, -(s - v), s, sigma, dt) - x_abs, z)


def phi_plus(z, s, x_abs, sigma, dt):
    """E[max(|kappa_tilde*S + s|, z)] with kappa_tilde = (|x| - s) / s; ``z`` may be an array."""
    _phi_check(z, s, x_abs, sigma, dt)
    kt = (x_abs - s) / s
    return _over_z(lambda v: _expected_positive_part(kt, s + v, s, sigma, dt)
                   + _expected_positive_part(kt, s - v, s, sigma, dt) - x_abs, z)


def lognormal_abs_moment(mu, sigma, c):
    """E|S - c| for log S ~ N(mu, sigma**2)."""
    mean = math.exp(mu + 0.5 * sigma**2)
    if c <= 0:
        return mean - c
    d1 = (mu - math.log(c) + sigma**2) / sigma
    call = mean * Phi(d1) - c * Phi(d1 - sigma)
    return 2.0 * call - (mean - c)


def lognormal_median_inequality(mu, sigma, c1, c2):
    """Return (|m - c1| > |m - c2|, E|S - c1| > E|S - c2|) with median m = exp(mu)."""
    m = math.exp(mu)
    if sigma <= 0 or not c1 > max(m, c2):
        raise DomainError("need sigma > 0 and c1 > max(median, c2)")
    hypothesis = abs(m - c1) > abs(m - c2)
    conclusion = lognormal_abs_moment(mu, sigma, c1) > lognormal_abs_moment(mu, sigma, c2)
    return hypothesis, conclusion
