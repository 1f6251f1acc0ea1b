"""Advantage actor-critic for the relaxed passport-option MDP.

One iteration samples ``B`` episodes with the current strategy network, records
the critic along each path, forms advantages
``A_t = gamma**(N - t) * |x_N| - V(t, s_t, x_t)`` for ``t = 0..N`` and takes one
Adam step on each of

    actor  = -mean_paths( (1/N) sum_t log pi(a_t) A_t - tau * e ),
    critic =  mean_paths( (1/N) sum_{t=0..N} A_t**2 ),

with ``e = gamma * sum_t sum_a pi(a) log pi(a)``.  Advantages are constants in
the actor loss.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .analytic import corner_vectors
from .approximator import (Adam, Approximator, log_softmax, policy_features, policy_network,
                           softmax, value_network)
from .env import sample_indices
from .errors import ConfigError, NonFiniteLoss
from .market import MarketParams, TimeGrid, simulate


@dataclass
class A2CConfig:
    niter: int = 2000
    B: int = 256
    tau: float | None = None  # None -> 1e-3 for one asset, 1e-2 otherwise
    gamma: float = 1.0
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    hidden: tuple = (64, 64)

    def __post_init__(self):
        if self.niter < 0 or self.B < 1:
            raise ConfigError("niter must be >= 0 and B >= 1")
        if self.tau is not None and self.tau < 0:
            raise ConfigError("entropy weight tau must be non-negative")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("gamma must lie in (0, 1]")
        if self.actor_lr <= 0 or self.critic_lr <= 0:
            raise ConfigError("learning rates must be positive")
        self.hidden = tuple(int(h) for h in self.hidden)

    def entropy_weight(self, d: int) -> float:
        if self.tau is not None:
            return self.tau
        return 1e-3 if d == 1 else 1e-2


@dataclass
class EpisodeTape:
    """Recorded batch of episodes (first axis = path)."""

    critics: np.ndarray  # (B, N+1)
    log_pis: np.ndarray  # (B, N)
    e: np.ndarray  # (B,)
    x_T: np.ndarray  # (B,)
    actions: np.ndarray  # (B, N)
    features: np.ndarray = field(repr=False)  # (B, N+1, d+2)
    probs: np.ndarray = field(repr=False)  # (B, N, 2d)

    @property
    def N(self) -> int:
        return self.log_pis.shape[1]


def x_scale_for(params: MarketParams, grid: TimeGrid) -> float:
    return float(np.max(params.s0 * params.sigma) * math.sqrt(grid.T))


def make_nets(params: MarketParams, grid: TimeGrid, seed: int, hidden=(64, 64)):
    xs = x_scale_for(params, grid)
    actor = policy_network(params.d, params.s0, xs, hidden, seed=seed, sub=0)
    critic = value_network(params.d, params.s0, xs, hidden, seed=seed, sub=1)
    return actor, critic


def forward(actor: Approximator, critic: Approximator, params: MarketParams, grid: TimeGrid,
            B: int, gamma: float, seed: int, sub: int = 0) -> EpisodeTape:
    """Sample ``B`` episodes in sampled-action mode."""
    N, d = grid.N, params.d
    paths = simulate(params, grid, B, seed, sub=sub).assets
    u = rng.path_uniforms(seed, rng.ACTIONS, N, B, sub=sub)
    corners = corner_vectors(d)
    x = np.full(B, params.x0)
    feats = np.empty((B, N + 1, d + 2))
    log_pis = np.empty((B, N))
    probs = np.empty((B, N, 2 * d))
    actions = np.empty((B, N), dtype=np.int64)
    e = np.zeros(B)
    rows = np.arange(B)
    for k in range(N):
        f = policy_features(k / N, paths[:, k], x)
        feats[:, k] = f
        logp = log_softmax(actor.pre_activation(f))
        p = np.exp(logp)
        idx = sample_indices(p, u[:, k])
        probs[:, k] = p
        actions[:, k] = idx
        log_pis[:, k] = logp[rows, idx]
        e += gamma * np.sum(p * logp, axis=1)
        x = x + np.einsum("nd,nd->n", corners[idx], paths[:, k + 1] - paths[:, k])
    feats[:, N] = policy_features(1.0, paths[:, N], x)
    critics = critic(feats.reshape(-1, d + 2)).reshape(B, N + 1)
    return EpisodeTape(critics=critics, log_pis=log_pis, e=e, x_T=x, actions=actions,
                       features=feats, probs=probs)


def advantages(tape: EpisodeTape, gamma: float) -> np.ndarray:
    N = tape.N
    disc = gamma ** (N - np.arange(N + 1))
    return disc[None, :] * np.abs(tape.x_T)[:, None] - tape.critics


def losses(tape: EpisodeTape, actor: Approximator, critic: Approximator, gamma: float, tau: float):
    """Return ``((actor_loss, actor_grad), (critic_loss, critic_grad))``."""
    B, N = tape.log_pis.shape
    d2 = tape.probs.shape[2]
    A = advantages(tape, gamma)

    f_actor = tape.features[:, :N].reshape(B * N, -1)
    z, hidden = actor.pre_activation(f_actor, keep=True)
    logp = log_softmax(z)
    p = np.exp(logp)
    a_flat = tape.actions.reshape(-1)
    rows = np.arange(B * N)
    chosen = logp[rows, a_flat].reshape(B, N)
    e = gamma * np.sum(p * logp, axis=1).reshape(B, N).sum(axis=1)
    actor_loss = -np.mean(np.sum(chosen * A[:, :N], axis=1) / N - tau * e)
    onehot = np.zeros((B * N, d2))
    onehot[rows, a_flat] = 1.0
    w = (A[:, :N] / (B * N)).reshape(-1, 1)
    dz = -w * (onehot - p)
    g_ent = logp - np.sum(p * logp, axis=1, keepdims=True)
    dz += (tau * gamma / B) * p * g_ent
    actor_grad = actor.backward(hidden, dz)

    f_critic = tape.features.reshape(B * (N + 1), -1)
    v, c_hidden = critic.pre_activation(f_critic, keep=True)
    target = (gamma ** (N - np.arange(N + 1)))[None, :] * np.abs(tape.x_T)[:, None]
    resid = target - v.reshape(B, N + 1)
    critic_loss = np.mean(np.sum(resid**2, axis=1) / N)
    dv = (-2.0 * resid / (B * N)).reshape(-1, 1)
    critic_grad = critic.backward(c_hidden, dv)

    if not (math.isfinite(actor_loss) and math.isfinite(critic_loss)):
        raise NonFiniteLoss("actor or critic loss is not finite")
    return (float(actor_loss), actor_grad), (float(critic_loss), critic_grad)


@dataclass
class A2CResult:
    actor: Approximator
    critic: Approximator
    log: list

    def log_rows(self):
        return self.log


def train(config: A2CConfig, params: MarketParams, grid: TimeGrid, seed: int,
          actor: Approximator | None = None, critic: Approximator | None = None,
          callback=None) -> A2CResult:
    """Run ``config.niter`` A2C iterations; deterministic given ``seed``."""
    if actor is None or critic is None:
        a0, c0 = make_nets(params, grid, seed, config.hidden)
        actor = actor or a0
        critic = critic or c0
    tau = config.entropy_weight(params.d)
    opt_a = Adam(actor.n_params, lr=config.actor_lr)
    opt_c = Adam(critic.n_params, lr=config.critic_lr)
    log = []
    for it in range(config.niter):
        tape = forward(actor, critic, params, grid, config.B, config.gamma, seed, sub=it + 1)
        (al, ag), (cl, cg) = losses(tape, actor, critic, config.gamma, tau)
        opt_a.step(actor, ag)
        opt_c.step(critic, cg)
        ent = -np.sum(tape.probs * np.log(np.maximum(tape.probs, 1e-300)), axis=2).mean()
        row = {"iter": it, "mean_abs_xT": float(np.abs(tape.x_T).mean()), "actor_loss": al,
               "critic_loss": cl, "mean_entropy": float(ent)}
        log.append(row)
        if callback is not None:
            callback(row)
    return A2CResult(actor=actor, critic=critic, log=log)
