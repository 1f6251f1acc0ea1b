"""Correlated Black-Scholes market in discounted units.

All prices and wealth values handled here are discounted, so the drift of the
log-price is ``-sigma**2 / 2`` and ``r`` only enters through the configuration.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng
from .errors import ActionNormViolation, ConfigError, NotPositiveSemidefinite
from .parallel import chunked_map

PIVOT_CLAMP = 1e-10
NORM_TOL = 1e-12


def cholesky(rho) -> np.ndarray:
    """Lower-triangular ``A`` with ``A @ A.T == rho``.

    Pivots in ``[-1e-10, 0]`` are clamped to zero so perfectly correlated
    assets are allowed; the corresponding column is then left at zero.
    """
    rho = np.asarray(rho, dtype=float)
    d = rho.shape[0]
    if rho.shape != (d, d):
        raise ConfigError("correlation matrix must be square")
    if not np.allclose(rho, rho.T, atol=1e-12, rtol=0):
        raise ConfigError("correlation matrix must be symmetric")
    if not np.allclose(np.diag(rho), 1.0, atol=1e-12, rtol=0):
        raise ConfigError("correlation matrix must have unit diagonal")
    a = np.zeros((d, d))
    for j in range(d):
        pivot = rho[j, j] - a[j, :j] @ a[j, :j]
        if pivot < -PIVOT_CLAMP:
            raise NotPositiveSemidefinite(f"negative pivot {pivot:.3e} at column {j}")
        pivot = max(pivot, 0.0)
        a[j, j] = math.sqrt(pivot)
        for i in range(j + 1, d):
            off = rho[i, j] - a[i, :j] @ a[j, :j]
            if a[j, j] > 0.0:
                a[i, j] = off / a[j, j]
            elif abs(off) > 1e-8:
                raise NotPositiveSemidefinite(f"inconsistent degenerate column {j}")
    return a


@dataclass(frozen=True)
class MarketParams:
    r: float
    sigma: np.ndarray
    rho: np.ndarray
    s0: np.ndarray
    x0: float = 0.0
    chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        sigma = np.atleast_1d(np.asarray(self.sigma, dtype=float))
        s0 = np.atleast_1d(np.asarray(self.s0, dtype=float))
        rho = np.atleast_2d(np.asarray(self.rho, dtype=float))
        if sigma.ndim != 1 or s0.shape != sigma.shape or rho.shape != (sigma.size,) * 2:
            raise ConfigError("sigma, s0 and rho dimensions disagree")
        if not np.all(sigma > 0):
            raise ConfigError("volatilities must be positive")
        if not np.all(s0 > 0):
            raise ConfigError("initial prices must be positive")
        if not math.isfinite(self.r) or not math.isfinite(self.x0):
            raise ConfigError("r and x0 must be finite")
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "s0", s0)
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "x0", float(self.x0))
        object.__setattr__(self, "r", float(self.r))
        object.__setattr__(self, "chol", cholesky(rho))

    @property
    def d(self) -> int:
        return self.sigma.size

    @property
    def uncorrelated(self) -> bool:
        return bool(np.max(np.abs(self.rho - np.eye(self.d))) <= 1e-12)

    @classmethod
    def from_mapping(cls, m) -> "MarketParams":
        unknown = set(m) - {"r", "sigma", "rho", "s0", "x0"}
        if unknown:
            raise ConfigError(f"unknown keys in [market]: {', '.join(sorted(unknown))}")
        try:
            sigma = m["sigma"]
            d = len(sigma)
            rho = m.get("rho", np.eye(d).tolist())
            return cls(r=float(m.get("r", 0.0)), sigma=sigma, rho=rho,
                       s0=m.get("s0", [1.0] * d), x0=float(m.get("x0", 0.0)))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"invalid market section: {exc}") from exc

    def to_mapping(self) -> dict:
        return {"r": self.r, "sigma": self.sigma.tolist(), "rho": self.rho.tolist(),
                "s0": self.s0.tolist(), "x0": self.x0}


def load_market(path) -> MarketParams:
    """Read the ``[market]`` table (or top-level keys) of a TOML file."""
    from .config import read_toml

    data = read_toml(path)
    return MarketParams.from_mapping(data.get("market", data))


@dataclass(frozen=True)
class TimeGrid:
    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or t.size < 2:
            raise ConfigError("time grid needs at least two points")
        if t[0] != 0.0 or not np.all(np.diff(t) > 0):
            raise ConfigError("time grid must start at 0 and be strictly increasing")
        object.__setattr__(self, "times", t)

    @classmethod
    def uniform(cls, T: float, N: int) -> "TimeGrid":
        if N < 1 or T <= 0:
            raise ConfigError("need T > 0 and N >= 1")
        return cls(np.linspace(0.0, T, N + 1))

    @property
    def N(self) -> int:
        return self.times.size - 1

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)


@dataclass(frozen=True)
class MarketState:
    k: int
    s: np.ndarray
    x: float


@dataclass
class PathBatch:
    assets: np.ndarray  # (n_paths, N + 1, d)
    seed: int
    first_path: int = 0

    @property
    def n_paths(self) -> int:
        return self.assets.shape[0]

    def to_csv(self, path) -> None:
        n, steps, d = self.assets.shape
        idx = np.indices((n, steps, d)).reshape(3, -1).T
        idx[:, 0] += self.first_path
        vals = self.assets.reshape(-1)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write("path,step,asset,value\n")
            lines = [f"{p},{k},{i + 1},{v!r}" for (p, k, i), v in zip(idx.tolist(), vals.tolist())]
            fh.write("\n".join(lines))
            fh.write("\n")


def _log_increments(params: MarketParams, grid: TimeGrid, z: np.ndarray) -> np.ndarray:
    n = z.shape[0]
    z = z.reshape(n, grid.N, params.d)
    dt = grid.dt[None, :, None]
    corr = z @ params.chol.T
    return -0.5 * params.sigma**2 * dt + params.sigma * np.sqrt(dt) * corr


def simulate(params: MarketParams, grid: TimeGrid, n_paths: int, seed: int,
             first_path: int = 0, sub: int = 0, tag: int = rng.MARKET) -> PathBatch:
    """Exact log-normal discounted price paths, one counter block per path."""
    if n_paths < 1:
        raise ConfigError("n_paths must be at least 1")
    per_path = grid.N * params.d

    def work(a, b):
        z = rng.path_normals(seed, tag, per_path, b - a, first_path + a, sub)
        logs = np.cumsum(_log_increments(params, grid, z), axis=1)
        out = np.empty((b - a, grid.N + 1, params.d))
        out[:, 0, :] = params.s0
        out[:, 1:, :] = params.s0 * np.exp(logs)
        return out

    parts = chunked_map(work, n_paths)
    assets = parts[0] if len(parts) == 1 else np.concatenate(parts)
    return PathBatch(assets=assets, seed=seed, first_path=first_path)


def simulate_step(params: MarketParams, s: np.ndarray, dt: float, z: np.ndarray) -> np.ndarray:
    """Advance discounted prices ``s`` (n, d) by ``dt`` with standard normals ``z`` (n, d)."""
    return s * np.exp(-0.5 * params.sigma**2 * dt + params.sigma * math.sqrt(dt) * (z @ params.chol.T))


def portfolio_step(x, s_prev, s_next, q):
    """``x + sum_i q_i (s_next_i - s_prev_i)``; works on scalars or path batches."""
    q = np.asarray(q, dtype=float)
    norm = np.abs(q).sum(axis=-1)
    if np.any(norm > 1.0 + NORM_TOL):
        raise ActionNormViolation(f"action l1-norm {np.max(norm):.6g} exceeds 1")
    ds = np.asarray(s_next, dtype=float) - np.asarray(s_prev, dtype=float)
    out = np.asarray(x, dtype=float) + (q * ds).sum(axis=-1)
    return float(out) if out.ndim == 0 else out
