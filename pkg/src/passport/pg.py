"""Backward-in-time policy gradient with greedy Monte Carlo targets.

For t = N-1 down to 1 the trainer samples states visited by the current
stochastic strategy, scores each corner by the mean continuation payoff
``|X_T|`` over ``B`` rollouts that keep following the current strategy, and
fits the strategy network to the winning corner under the total-variation
loss minus an entropy bonus.  All corners of one state share the same
continuation noise.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .analytic import CornerAction, corner_vectors
from .approximator import (Adam, Approximator, neg_entropy_loss, policy_features, policy_network,
                           softmax, tv_loss)
from .env import sample_indices
from .errors import ConfigError, ResampleCapExceeded
from .market import MarketParams, MarketState, TimeGrid, simulate

SAMPLERS = ("rollout", "box")


@dataclass
class PGConfig:
    dppt: object = 256  # int or one count per time index 0..N-1
    B: int = 256
    lr: float = 1e-3
    epochs: object = 40
    batch_size: object = 32
    entropy_weight: float | None = None  # None -> 0 for one asset, 1e-3 otherwise
    resample_cap: int = 100
    sweeps: int = 1
    include_t0: bool = False
    state_sampler: str = "rollout"
    hidden: tuple = (64, 64)

    def __post_init__(self):
        for name in ("dppt", "epochs", "batch_size"):
            v = getattr(self, name)
            vals = [v] if np.isscalar(v) else list(v)
            if not vals or any(int(c) != c for c in vals):
                raise ConfigError(f"{name} must be an integer or a list of integers")
            low = 0 if name == "dppt" else 1
            if any(c < low for c in vals):
                raise ConfigError(f"{name} entries must be >= {low}")
        if self.B < 1 or self.resample_cap < 1 or self.sweeps < 1:
            raise ConfigError("B, resample_cap and sweeps must be >= 1")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.entropy_weight is not None and self.entropy_weight < 0:
            raise ConfigError("entropy weight must be non-negative")
        if self.state_sampler not in SAMPLERS:
            raise ConfigError(f"state_sampler must be one of {SAMPLERS}")
        self.hidden = tuple(int(h) for h in self.hidden)

    def per_step(self, name: str, t: int) -> int:
        v = getattr(self, name)
        if np.isscalar(v):
            return int(v)
        if t >= len(v):
            raise ConfigError(f"{name} has no entry for time index {t}")
        return int(v[t])

    def entropy_for(self, d: int) -> float:
        if self.entropy_weight is not None:
            return float(self.entropy_weight)
        return 0.0 if d == 1 else 1e-3


@dataclass
class LabeledState:
    t: int
    state: MarketState
    target: CornerAction
    estimates: np.ndarray  # mean |X_T| per corner

    def __post_init__(self):
        if int(np.argmax(self.estimates)) != self.target.index:
            raise ValueError("target must be the argmax of the estimates")


@dataclass
class LabeledBatch:
    """Vectorised form of a list of LabeledStates at one time index."""

    t: int
    s: np.ndarray  # (n, d)
    x: np.ndarray  # (n,)
    estimates: np.ndarray  # (n, 2d)
    targets: np.ndarray = field(init=False)
    resamples: int = 0

    def __post_init__(self):
        self.targets = np.argmax(self.estimates, axis=1)  # ties -> lowest index

    def __len__(self) -> int:
        return self.x.size

    def item(self, i: int) -> LabeledState:
        return LabeledState(t=self.t, state=MarketState(k=self.t, s=self.s[i].copy(), x=float(self.x[i])),
                            target=CornerAction.from_index(int(self.targets[i])),
                            estimates=self.estimates[i].copy())


def _sub(sweep: int, t: int, attempt: int) -> int:
    return ((sweep << 20) | (t << 8) | attempt) + 1


def _box_states(params: MarketParams, n: int, seed: int, sub: int, x_half_width: float):
    u = rng.path_uniforms(seed, rng.STATE_SAMPLER, params.d + 1, n, sub=sub)
    s = params.s0 * np.exp(np.log(2.0) * (2.0 * u[:, :params.d] - 1.0))
    x = x_half_width * (2.0 * u[:, params.d] - 1.0)
    return s, x


def _rollout_states(net, params: MarketParams, grid: TimeGrid, t: int, n: int, seed: int, sub: int):
    """States at time ``t`` reached by the current strategy in sampled mode."""
    x = np.full(n, params.x0)
    if t == 0:
        return np.tile(params.s0, (n, 1)), x
    sub_grid = TimeGrid(grid.times[:t + 1])
    paths = simulate(params, sub_grid, n, seed, sub=sub, tag=rng.STATE_SAMPLER).assets
    u = rng.path_uniforms(seed, rng.ACTIONS, t, n, sub=sub)
    corners = corner_vectors(params.d)
    N = grid.N
    for k in range(t):
        p = net(policy_features(k / N, paths[:, k], x))
        idx = sample_indices(p, u[:, k])
        x = x + np.einsum("nd,nd->n", corners[idx], paths[:, k + 1] - paths[:, k])
    return paths[:, t].copy(), x


def continuation_values(net, params: MarketParams, grid: TimeGrid, t: int, s, x, B: int,
                        seed: int, sub: int) -> np.ndarray:
    """Mean ``|X_T|`` per (state, corner played at ``t``); shape (n, 2d).

    Later decisions follow ``net`` in sampled mode.  Every corner of a state
    sees the same price paths and the same action uniforms.
    """
    s = np.atleast_2d(np.asarray(s, dtype=float))
    x = np.asarray(x, dtype=float).reshape(-1)
    n, d = s.shape
    N = grid.N
    m = N - t
    unit = dataclasses.replace(params, s0=np.ones(d))
    rel = simulate(unit, TimeGrid(grid.times[t:] - grid.times[t]), n * B, seed, sub=sub,
                   tag=rng.CONTINUATION).assets.reshape(n, B, m + 1, d)
    paths = rel * s[:, None, None, :]
    corners = corner_vectors(d)
    n_act = 2 * d
    # axes: state, corner, continuation path
    ds0 = paths[:, :, 1] - paths[:, :, 0]  # (n, B, d)
    xa = x[:, None, None] + np.einsum("ad,nbd->nab", corners, ds0)
    if m > 1:
        u = rng.path_uniforms(seed, rng.ACTIONS, m - 1, n * B, sub=sub).reshape(n, B, m - 1)
        for j in range(1, m):
            k = t + j
            sk = np.broadcast_to(paths[:, None, :, j], (n, n_act, B, d)).reshape(-1, d)
            p = net(policy_features(k / N, sk, xa.reshape(-1)))
            uk = np.broadcast_to(u[:, None, :, j - 1], (n, n_act, B)).reshape(-1)
            idx = sample_indices(p, uk)
            ds = np.broadcast_to((paths[:, :, j + 1] - paths[:, :, j])[:, None], (n, n_act, B, d))
            xa = xa + np.einsum("md,md->m", corners[idx], ds.reshape(-1, d)).reshape(n, n_act, B)
    return np.abs(xa).mean(axis=2)


def collect(net, config: PGConfig, t: int, grid: TimeGrid, params: MarketParams, n: int,
            seed: int, sweep: int = 0, x_half_width: float | None = None) -> LabeledBatch:
    """Draw ``n`` labelled states at time ``t``; redraw any whose best estimate is 0."""
    d = params.d
    s = np.empty((n, d))
    x = np.empty(n)
    est = np.empty((n, 2 * d))
    todo = np.arange(n)
    attempt = 0
    resamples = 0
    while todo.size:
        if attempt >= config.resample_cap:
            raise ResampleCapExceeded(
                f"{todo.size} states at t={t} still have zero continuation value after "
                f"{config.resample_cap} draws")
        sub = _sub(sweep, t, attempt)
        if config.state_sampler == "box":
            hw = x_half_width if x_half_width is not None else 1.0
            s_new, x_new = _box_states(params, n, seed, sub, hw)
        else:
            s_new, x_new = _rollout_states(net, params, grid, t, n, seed, sub)
        s_new, x_new = s_new[todo], x_new[todo]
        e_new = continuation_values(net, params, grid, t, s_new, x_new, config.B, seed, sub)
        s[todo], x[todo], est[todo] = s_new, x_new, e_new
        bad = e_new.max(axis=1) == 0.0
        resamples += int(bad.sum())
        todo = todo[bad]
        attempt += 1
    return LabeledBatch(t=t, s=s, x=x, estimates=est, resamples=resamples)


def data_gen(net, B: int, t: int, grid: TimeGrid, params: MarketParams, seed: int,
             resample_cap: int = 100, sweep: int = 0, index: int = 0) -> LabeledState:
    """One labelled state at time ``t`` (``index`` selects an independent draw)."""
    if not 1 <= t <= grid.N - 1:
        raise ConfigError("data_gen needs 1 <= t <= N-1")
    cfg = PGConfig(B=B, resample_cap=resample_cap)
    return collect(net, cfg, t, grid, params, index + 1, seed, sweep).item(index)


def fit_step(net: Approximator, opt: Adam, batch: LabeledBatch, grid: TimeGrid, epochs: int,
             batch_size: int, entropy_weight: float, seed: int, sweep: int = 0):
    """Minibatch descent on TV(target, pi) - w * H(pi); returns per-epoch metrics."""
    n = len(batch)
    feats = policy_features(batch.t / grid.N, batch.s, batch.x)
    d2 = batch.estimates.shape[1]
    targets = np.eye(d2)[batch.targets]
    gen = rng.generator(seed, rng.SHUFFLE, _sub(sweep, batch.t, 0))
    rows = []
    for epoch in range(epochs):
        order = gen.permutation(n)
        for a in range(0, n, batch_size):
            sel = order[a:a + batch_size]
            z, hidden = net.pre_activation(feats[sel], keep=True)
            _, dz = tv_loss(z, targets[sel])
            if entropy_weight > 0:
                _, dz_h = neg_entropy_loss(z)
                dz = dz + entropy_weight * dz_h
            opt.step(net, net.backward(hidden, dz))
        z = net.pre_activation(feats)
        p = softmax(z)
        tv, _ = tv_loss(z, targets)
        ent = -np.sum(p * np.log(np.maximum(p, 1e-300)), axis=1)
        rows.append({"sweep": sweep, "t": batch.t, "epoch": epoch, "mean_tv_loss": tv,
                     "target_agreement": float(np.mean(np.argmax(p, axis=1) == batch.targets)),
                     "mean_entropy": float(ent.mean())})
    return rows


@dataclass
class PGResult:
    net: Approximator
    log: list


def train(config: PGConfig, params: MarketParams, grid: TimeGrid, seed: int,
          net: Approximator | None = None, callback=None) -> PGResult:
    """Backward sweeps over t = N-1..1 (..0 with ``include_t0``); deterministic in ``seed``."""
    from .a2c import x_scale_for

    xs = x_scale_for(params, grid)
    if net is None:
        net = policy_network(params.d, params.s0, xs, config.hidden, seed=seed, sub=0)
    opt = Adam(net.n_params, lr=config.lr)
    w = config.entropy_for(params.d)
    last = 0 if config.include_t0 else 1
    log = []
    for sweep in range(config.sweeps):
        for t in range(grid.N - 1, last - 1, -1):
            n = config.per_step("dppt", t)
            if n == 0:
                continue
            batch = collect(net, config, t, grid, params, n, seed, sweep, x_half_width=2.0 * xs)
            rows = fit_step(net, opt, batch, grid, config.per_step("epochs", t),
                            config.per_step("batch_size", t), w, seed, sweep)
            log.extend(rows)
            if callback is not None:
                for row in rows:
                    callback(row)
    return PGResult(net=net, log=log)
