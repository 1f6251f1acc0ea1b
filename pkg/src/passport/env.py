"""Relaxed trading MDP: corner actions lifted to distributions.

Two stepping rules are supported.  ``mixture`` moves the portfolio with the
probability-weighted mean corner; ``sampled`` draws one corner per path and
step.  A third rule, ``modal``, always plays the most likely corner.

Policies are callables ``policy(k, t_norm, s, x) -> probs`` working on path
batches: ``s`` has shape (n, d), ``x`` shape (n,), and ``probs`` (n, 2d) in the
corner order (+e1, -e1, ..., +ed, -ed).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .analytic import CornerAction, corner_vectors, optimal_action_indices
from .approximator import ActionDistribution, Approximator, policy_features
from .errors import ConfigError, CorrelatedMarket
from .market import MarketParams, MarketState, PathBatch, TimeGrid, portfolio_step, simulate

MODES = ("mixture", "sampled", "modal")


def _check_dist(dist) -> ActionDistribution:
    return dist if isinstance(dist, ActionDistribution) else ActionDistribution(dist)


def mean_action(probs, d):
    return np.asarray(probs) @ corner_vectors(d)


def step_mixture(state: MarketState, dist, s_next) -> MarketState:
    dist = _check_dist(dist)
    d = len(state.s)
    q = mean_action(dist.probs, d)
    x = portfolio_step(state.x, state.s, s_next, q)
    return MarketState(k=state.k + 1, s=np.asarray(s_next, float), x=x)


def step_sampled(state: MarketState, dist, s_next, rng_stream: np.random.Generator):
    dist = _check_dist(dist)
    d = len(state.s)
    u = rng_stream.random()
    idx = min(int(np.searchsorted(np.cumsum(dist.probs), u, side="right")), 2 * d - 1)
    while dist.probs[idx] == 0.0:  # guard against rounding onto a zero-mass slot
        idx -= 1
    action = CornerAction.from_index(idx)
    x = portfolio_step(state.x, state.s, s_next, action.vector(d))
    return MarketState(k=state.k + 1, s=np.asarray(s_next, float), x=x), action


def sample_indices(probs, u):
    """Inverse-CDF corner draw per row of ``probs`` with uniforms ``u``."""
    cum = np.cumsum(probs, axis=1)
    idx = (u[:, None] >= cum).sum(axis=1)
    idx = np.minimum(idx, probs.shape[1] - 1)
    # rounding can land on a zero-probability slot at the top of the CDF
    bad = probs[np.arange(len(idx)), idx] == 0.0
    if np.any(bad):
        positive = probs[bad] > 0
        idx[bad] = probs.shape[1] - 1 - np.argmax(positive[:, ::-1], axis=1)
    return idx


@dataclass
class Trajectory:
    states: list
    actions: list
    terminal_payoff: float


@dataclass
class TrajectoryBatch:
    """Arrays for a batch of rollouts."""

    s: np.ndarray  # (n, N+1, d)
    x: np.ndarray  # (n, N+1)
    probs: np.ndarray  # (n, N, 2d)
    actions: np.ndarray  # (n, N) corner indices, -1 under mixture stepping
    mode: str
    seed: int

    @property
    def n_paths(self) -> int:
        return self.x.shape[0]

    @property
    def x_T(self) -> np.ndarray:
        return self.x[:, -1]

    @property
    def prob_assigned(self) -> np.ndarray:
        if self.mode == "mixture":
            return np.full(self.actions.shape, np.nan)
        rows = np.arange(self.n_paths)[:, None]
        steps = np.arange(self.actions.shape[1])[None, :]
        return self.probs[rows, steps, self.actions]

    def trajectory(self, i: int) -> Trajectory:
        N = self.actions.shape[1]
        states = [MarketState(k=k, s=self.s[i, k].copy(), x=float(self.x[i, k])) for k in range(N + 1)]
        if self.mode == "mixture":
            actions = [ActionDistribution(p / p.sum()) for p in self.probs[i]]
        else:
            actions = [CornerAction.from_index(int(a)) for a in self.actions[i]]
        return Trajectory(states=states, actions=actions, terminal_payoff=abs(float(self.x[i, -1])))

    def to_csv(self, path, max_paths=None) -> None:
        n = self.n_paths if max_paths is None else min(max_paths, self.n_paths)
        N = self.actions.shape[1]
        d = self.s.shape[2]
        pa = self.prob_assigned
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write("path,step,x," + ",".join(f"s{i + 1}" for i in range(d)) + ",action_index,prob_assigned\n")
            for p in range(n):
                for k in range(N + 1):
                    s_txt = ",".join(repr(float(v)) for v in self.s[p, k])
                    if k < N and self.mode != "mixture":
                        tail = f"{int(self.actions[p, k])},{float(pa[p, k])!r}"
                    else:
                        tail = ","
                    fh.write(f"{p},{k},{float(self.x[p, k])!r},{s_txt},{tail}\n")


def rollout_paths(policy, paths: np.ndarray, x0, grid: TimeGrid, mode: str, u=None):
    """Run ``policy`` along given asset paths (n, N+1, d) from wealth ``x0``."""
    if mode not in MODES:
        raise ConfigError(f"unknown stepping mode {mode!r}")
    n, steps, d = paths.shape
    N = steps - 1
    corners = corner_vectors(d)
    x = np.empty((n, N + 1))
    x[:, 0] = x0
    probs = np.empty((n, N, 2 * d))
    actions = np.full((n, N), -1, dtype=np.int64)
    ds = np.diff(paths, axis=1)
    for k in range(N):
        p = np.asarray(policy(k, k / N, paths[:, k, :], x[:, k]), dtype=float)
        probs[:, k] = p
        if mode == "mixture":
            q = p @ corners
        else:
            if mode == "sampled":
                idx = sample_indices(p, u[:, k])
            else:
                idx = np.argmax(p, axis=1)
            actions[:, k] = idx
            q = corners[idx]
        x[:, k + 1] = x[:, k] + np.einsum("nd,nd->n", q, ds[:, k])
    return x, probs, actions


def rollout(policy, params: MarketParams, grid: TimeGrid, n_paths: int, seed: int,
            mode: str = "sampled", paths: PathBatch | None = None, action_sub: int = 0) -> TrajectoryBatch:
    """Simulate markets and trade them with ``policy``; deterministic in (seed, mode)."""
    batch = paths if paths is not None else simulate(params, grid, n_paths, seed)
    u = rng.path_uniforms(seed, rng.ACTIONS, grid.N, batch.n_paths, sub=action_sub) if mode == "sampled" else None
    x, probs, actions = rollout_paths(policy, batch.assets, params.x0, grid, mode, u)
    return TrajectoryBatch(s=batch.assets, x=x, probs=probs, actions=actions, mode=mode, seed=seed)


# -- ready-made policies -------------------------------------------------------
def net_policy(net: Approximator):
    def policy(k, t_norm, s, x):
        return net(policy_features(t_norm, s, x))
    policy.net = net
    return policy


def analytic_policy(params: MarketParams, grid: TimeGrid, heuristic=False):
    """Dirac policy on the independent-asset optimal corner."""
    if not params.uncorrelated and not heuristic:
        raise CorrelatedMarket("assets are correlated; use heuristic=True")
    dt = grid.dt
    d = params.d

    def policy(k, t_norm, s, x):
        idx = optimal_action_indices(s, x, params.sigma, dt[k])
        out = np.zeros((len(idx), 2 * d))
        out[np.arange(len(idx)), idx] = 1.0
        return out
    return policy


def constant_policy(index: int, d: int):
    def policy(k, t_norm, s, x):
        out = np.zeros((np.atleast_2d(s).shape[0], 2 * d))
        out[:, index] = 1.0
        return out
    return policy


def uniform_policy(d: int):
    def policy(k, t_norm, s, x):
        return np.full((np.atleast_2d(s).shape[0], 2 * d), 1.0 / (2 * d))
    return policy


def sign_policy():
    """One-asset ``-sign(x)`` rule (sign(0) = +1)."""
    def policy(k, t_norm, s, x):
        out = np.zeros((len(x), 2))
        out[np.arange(len(x)), np.where(np.asarray(x) >= 0, 1, 0)] = 1.0
        return out
    return policy
