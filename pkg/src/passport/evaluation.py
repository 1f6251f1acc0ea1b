"""Monte Carlo pricing, surfaces, payoff comparisons and baseline strategies.

The option price is ``E[(X_T)^+]`` in discounted units; every estimate also
carries ``E|X_T|`` since ``(x)^+ = (x + |x|) / 2`` path by path.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import approximator as ap
from . import rng
from .analytic import CornerAction
from .approximator import Adam, Approximator, policy_features
from .env import (analytic_policy, constant_policy, net_policy, rollout, uniform_policy)
from .errors import ConfigError, CorruptFile, PropertyViolation
from .market import MarketParams, TimeGrid, simulate

IDENTITY_TOL = 1e-12
KINDS = ("analytic", "constant", "random", "policy", "deep-hedging")


# -- estimates ------------------------------------------------------------------
@dataclass(frozen=True)
class PriceEstimate:
    mean: float
    stderr: float
    ci_low: float
    ci_high: float
    n_paths: int

    def __post_init__(self):
        if self.stderr < 0 or not self.ci_low <= self.mean <= self.ci_high:
            raise ValueError("inconsistent price estimate")

    def overlaps(self, other: "PriceEstimate") -> bool:
        return self.ci_low <= other.ci_high and other.ci_low <= self.ci_high


def t_interval(samples, level: float = 0.95) -> PriceEstimate:
    """Student-t interval for the mean with n - 1 degrees of freedom."""
    x = np.asarray(samples, dtype=float).reshape(-1)
    n = x.size
    if n < 2:
        raise ConfigError("a confidence interval needs at least two samples")
    mean = float(x.mean())
    se = float(x.std(ddof=1) / math.sqrt(n))
    half = float(stats.t.ppf(0.5 + level / 2.0, n - 1)) * se
    return PriceEstimate(mean=mean, stderr=se, ci_low=mean - half, ci_high=mean + half, n_paths=n)


@dataclass
class PricingRun:
    """Price with the companion statistics of one evaluation."""

    price: PriceEstimate
    abs_payoff: PriceEstimate
    mean_x: float
    identity_gap: float
    x_T: np.ndarray = field(repr=False)


def identity_gap(x_T) -> float:
    """``|mean(x^+) - (mean|x| + mean x) / 2|`` over one sample set."""
    x = np.asarray(x_T, dtype=float)
    return abs(float(np.maximum(x, 0.0).mean()) - 0.5 * (float(np.abs(x).mean()) + float(x.mean())))


# -- strategies -------------------------------------------------------------------
@dataclass(frozen=True)
class StrategySpec:
    kind: str
    action: int | None = None  # corner index for ``constant``
    path: str | None = None  # checkpoint file or directory
    mode: str = "sampled"  # stepping rule for policy networks
    heuristic: bool = False  # allow the closed-form rule on correlated markets

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown strategy kind {self.kind!r}; valid: {', '.join(KINDS)}")
        if self.kind == "constant" and self.action is None:
            raise ConfigError("constant strategy needs an action")
        if self.kind in ("policy", "deep-hedging") and not self.path:
            raise ConfigError(f"{self.kind} strategy needs a checkpoint path")

    @classmethod
    def parse(cls, text: str, heuristic: bool = False) -> "StrategySpec":
        """``analytic | constant:+e1 | random | policy:PATH | deep-hedging:DIR``."""
        tag, _, arg = text.partition(":")
        tag = tag.strip()
        if tag == "analytic":
            return cls("analytic", heuristic=heuristic)
        if tag == "random":
            return cls("random")
        if tag == "constant":
            return cls("constant", action=parse_corner(arg or "+e1").index)
        if tag == "policy":
            path, _, mode = arg.partition("@")
            return cls("policy", path=path, mode=mode or "sampled")
        if tag == "deep-hedging":
            return cls("deep-hedging", path=arg)
        raise ConfigError(f"unknown strategy tag {tag!r}; valid tags: analytic, constant:+eI, random, "
                          "policy:PATH, deep-hedging:DIR")

    @property
    def label(self) -> str:
        if self.kind == "constant":
            a = CornerAction.from_index(self.action)
            return f"constant:{'+' if a.direction > 0 else '-'}e{a.asset_index}"
        if self.kind in ("policy", "deep-hedging"):
            return f"{self.kind}:{self.path}"
        return self.kind

    def build(self, params: MarketParams, grid: TimeGrid):
        """Return ``(policy, stepping mode)``."""
        d = params.d
        if self.kind == "analytic":
            return analytic_policy(params, grid, heuristic=self.heuristic), "modal"
        if self.kind == "random":
            return uniform_policy(d), "sampled"
        if self.kind == "constant":
            if not 0 <= self.action < 2 * d:
                raise ConfigError(f"constant action {self.action} out of range for d={d}")
            return constant_policy(self.action, d), "modal"
        if self.kind == "policy":
            net = ap.load(self.path)
            if net.n_out != 2 * d:
                raise CorruptFile(f"checkpoint {self.path} has {net.n_out} actions, market needs {2 * d}")
            return net_policy(net), self.mode
        nets = load_deep_hedging(self.path)
        if len(nets) != grid.N or d != 1:
            raise CorruptFile(f"{self.path} holds {len(nets)} step networks for N={grid.N}, d={d}")
        return deep_hedging_policy(nets), "mixture"


def parse_corner(text: str) -> CornerAction:
    """``+e1`` / ``-e2`` (1-based asset) into a corner action."""
    t = text.strip()
    if len(t) < 3 or t[0] not in "+-" or t[1] != "e" or not t[2:].isdigit():
        raise ConfigError(f"bad corner {text!r}; expected like +e1 or -e2")
    return CornerAction(asset_index=int(t[2:]), direction=1 if t[0] == "+" else -1)


# -- pricing -------------------------------------------------------------------------
def run_strategy(strategy: StrategySpec, params: MarketParams, grid: TimeGrid, n_paths: int,
                 seed: int, paths=None):
    policy, mode = strategy.build(params, grid)
    return rollout(policy, params, grid, n_paths, seed, mode=mode, paths=paths)


def summarize(x_T, level: float = 0.95) -> PricingRun:
    x_T = np.asarray(x_T, dtype=float)
    gap = identity_gap(x_T)
    if gap > IDENTITY_TOL:
        raise PropertyViolation(f"positive-part identity off by {gap:.3g}", None)
    return PricingRun(price=t_interval(np.maximum(x_T, 0.0), level),
                      abs_payoff=t_interval(np.abs(x_T), level),
                      mean_x=float(x_T.mean()), identity_gap=gap, x_T=x_T)


def price(strategy: StrategySpec, params: MarketParams, grid: TimeGrid, n_paths: int = 100_000,
          seed: int = 0) -> PricingRun:
    """Monte Carlo ``E[(X_T)^+]`` with a 95% t-interval."""
    return summarize(run_strategy(strategy, params, grid, n_paths, seed).x_T)


@dataclass
class SurfaceTable:
    d: int
    rows: list  # (s tuple, x, PriceEstimate)

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(",".join(f"s{i + 1}" for i in range(self.d)) + ",x,mean,stderr,ci_low,ci_high\n")
            for s, x, est in self.rows:
                s_txt = ",".join(repr(float(v)) for v in s)
                fh.write(f"{s_txt},{float(x)!r},{est.mean!r},{est.stderr!r},{est.ci_low!r},{est.ci_high!r}\n")

    def lookup(self, s, x) -> PriceEstimate:
        for s_row, x_row, est in self.rows:
            if np.allclose(s_row, s) and math.isclose(x_row, x, abs_tol=1e-12):
                return est
        raise KeyError((tuple(s), x))


def _as_price_nodes(s_grid, d):
    out = []
    for s in s_grid:
        v = np.atleast_1d(np.asarray(s, dtype=float))
        if v.size == 1 and d > 1:
            v = np.full(d, float(v[0]))
        out.append(v)
    return out


def price_surface(strategy: StrategySpec, params: MarketParams, grid: TimeGrid, s_grid, x_grid,
                  n_paths: int = 10_000, seed: int = 0) -> SurfaceTable:
    """Price at every (s, x) node; all nodes share the same underlying noise."""
    rows = []
    for s in _as_price_nodes(s_grid, params.d):
        for x in np.asarray(x_grid, dtype=float):
            node = dataclasses.replace(params, s0=s, x0=float(x))
            rows.append((tuple(s), float(x), price(strategy, node, grid, n_paths, seed).price))
    return SurfaceTable(d=params.d, rows=rows)


def critic_price_surface(critic, s_grid, x_grid, d: int | None = None) -> SurfaceTable:
    """``(V(0, s, x) + x) / 2`` from a value network or its checkpoint path."""
    net = critic if isinstance(critic, Approximator) else ap.load(critic)
    if net.head != "linear":
        raise CorruptFile("critic checkpoint must have a linear head")
    d = net.widths[0] - 2 if d is None else d
    rows = []
    for s in _as_price_nodes(s_grid, d):
        xs = np.asarray(x_grid, dtype=float)
        v = net(policy_features(0.0, np.tile(s, (xs.size, 1)), xs))
        for x, val in zip(xs, v):
            p = 0.5 * (float(val) + float(x))
            rows.append((tuple(s), float(x), PriceEstimate(p, 0.0, p, p, 0)))
    return SurfaceTable(d=d, rows=rows)


# -- payoff comparison ----------------------------------------------------------------------
@dataclass
class PayoffReport:
    labels: list
    runs: list  # PricingRun per strategy
    overlap: np.ndarray  # pairwise CI-overlap flags on mean |X_T|

    def summary_rows(self):
        out = []
        for label, run in zip(self.labels, self.runs):
            a = run.abs_payoff
            out.append({"strategy": label, "mean_abs_xT": a.mean, "stderr": a.stderr,
                        "ci_low": a.ci_low, "ci_high": a.ci_high, "price": run.price.mean,
                        "mean_xT": run.mean_x, "n_paths": a.n_paths})
        return out

    def to_csv(self, samples_path, summary_path) -> None:
        with open(samples_path, "w", encoding="utf-8", newline="") as fh:
            fh.write("strategy,path,xT,abs_xT\n")
            for label, run in zip(self.labels, self.runs):
                for p, x in enumerate(run.x_T.tolist()):
                    fh.write(f"{label},{p},{x!r},{abs(x)!r}\n")
        with open(summary_path, "w", encoding="utf-8", newline="") as fh:
            cols = ["strategy", "mean_abs_xT", "stderr", "ci_low", "ci_high", "price", "mean_xT", "n_paths"]
            cols += [f"overlaps_{lab}" for lab in self.labels]
            fh.write(",".join(cols) + "\n")
            for i, row in enumerate(self.summary_rows()):
                vals = [row["strategy"]] + [repr(row[c]) for c in cols[1:8]]
                vals += [str(bool(f)).lower() for f in self.overlap[i]]
                fh.write(",".join(vals) + "\n")


def payoff_report(strategies, params: MarketParams, grid: TimeGrid, n_paths: int = 100_000,
                  seed: int = 0, labels=None) -> PayoffReport:
    """All strategies trade the same asset paths and action uniforms."""
    batch = simulate(params, grid, n_paths, seed)
    runs = [summarize(run_strategy(s, params, grid, n_paths, seed, paths=batch).x_T) for s in strategies]
    labels = list(labels) if labels is not None else [s.label for s in strategies]
    k = len(runs)
    overlap = np.array([[runs[i].abs_payoff.overlaps(runs[j].abs_payoff) for j in range(k)]
                        for i in range(k)])
    return PayoffReport(labels=labels, runs=runs, overlap=overlap)


# -- deep-hedging baseline ------------------------------------------------------------------
@dataclass
class DeepHedgingConfig:
    n_paths: int = 2**13
    epochs: int = 2**7
    batch_size: int = 2**8
    lr: float = 1e-3
    l2: float = 1e-4
    entropy_weight: float = 1e-18
    hidden: tuple = (64, 64)
    init_bias_range: float = 0.9  # initial outputs uniform in +-this
    init_spread: float = 0.05  # scale of the random last-layer weights

    def __post_init__(self):
        if min(self.n_paths, self.epochs, self.batch_size) < 1:
            raise ConfigError("deep-hedging counts must be >= 1")
        if self.lr <= 0 or self.l2 < 0 or self.entropy_weight < 0:
            raise ConfigError("deep-hedging lr must be positive and penalties non-negative")
        self.hidden = tuple(int(h) for h in self.hidden)


@dataclass
class DeepHedgingResult:
    nets: list
    log: list

    def save(self, directory) -> list:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for k, net in enumerate(self.nets):
            p = directory / f"step_{k:04d}.txt"
            ap.save(net, p)
            paths.append(p)
        return paths


def load_deep_hedging(directory) -> list:
    files = sorted(Path(directory).glob("step_*.txt"))
    if not files:
        raise CorruptFile(f"no step networks in {directory}")
    return [ap.load(f) for f in files]


def deep_hedging_policy(nets):
    """Continuous position ``q`` written as the corner mixture ((1+q)/2, (1-q)/2)."""
    def policy(k, t_norm, s, x):
        q = np.clip(nets[k](policy_features(t_norm, s, x)), -1.0, 1.0)
        return np.column_stack([0.5 * (1.0 + q), 0.5 * (1.0 - q)])
    policy.nets = nets
    return policy


def _dh_nets(params, grid, cfg: DeepHedgingConfig, seed):
    from .a2c import x_scale_for

    scale = np.concatenate([[1.0], params.s0, [x_scale_for(params, grid)]])
    nets = []
    for k in range(grid.N):
        net = Approximator([params.d + 2, *cfg.hidden, 1], head="tanh", seed=seed, sub=100 + k,
                           in_scale=scale)
        gen = rng.generator(seed, rng.INIT, 10_000 + k)
        net.W[-1][...] = cfg.init_spread * gen.standard_normal(net.W[-1].shape) / math.sqrt(net.W[-1].shape[0])
        net.b[-1][...] = np.arctanh(gen.uniform(-cfg.init_bias_range, cfg.init_bias_range))
        nets.append(net)
    return nets


def deep_hedging_loss(nets, S, x0: float, l2: float = 0.0, entropy_weight: float = 0.0):
    """Loss ``-mean|X_T| + l2 sum_k |theta_k|^2 - w mean H((1+q)/2)`` on price paths ``S`` (n, N+1).

    Returns ``(loss, mean |X_T|, per-network gradients)``; the gradient runs
    back through the wealth process.
    """
    S = np.asarray(S, dtype=float)
    b, N = S.shape[0], S.shape[1] - 1
    dS = np.diff(S, axis=1)
    x = np.full(b, float(x0))
    caches, qs = [], []
    for k in range(N):
        f = policy_features(k / N, S[:, k][:, None], x)
        z, hidden = nets[k].pre_activation(f, keep=True)
        q = np.tanh(z[:, 0])
        caches.append(hidden)
        qs.append(q)
        x = x + q * dS[:, k]
    ent = 0.0
    ent_grad = []
    for q in qs:
        qc = np.clip(q, -1 + 1e-15, 1 - 1e-15)
        p = 0.5 * (1.0 + qc)
        ent += float(np.sum(-p * np.log(p) - (1 - p) * np.log(1 - p)))
        ent_grad.append(-np.arctanh(qc))  # dH/dq
    mean_abs = float(np.abs(x).mean())
    loss = -mean_abs + l2 * sum(float(net.theta @ net.theta) for net in nets) - entropy_weight * ent / (b * N)
    grads = [None] * N
    g = -np.sign(x) / b  # d loss / d x_N
    for k in range(N - 1, -1, -1):
        dq = g * dS[:, k] - entropy_weight * ent_grad[k] / (b * N)
        dz = (dq * (1.0 - qs[k] ** 2))[:, None]
        grad, dinp = nets[k].backward(caches[k], dz, want_inputs=True)
        grads[k] = grad + 2.0 * l2 * nets[k].theta
        g = g + dinp[:, -1]
    return loss, mean_abs, grads


def deep_hedging_train(params: MarketParams, grid: TimeGrid, config: DeepHedgingConfig | None = None,
                       seed: int = 0) -> DeepHedgingResult:
    """Per-step networks ``q_k`` trained by gradient ascent on ``mean |X_T|``.

    The loss is ``-mean|X_T| + l2 * |theta|^2 - w * mean H((1+q)/2)`` and the
    gradient runs back through the wealth process, so ``q_k`` also sees how
    its input ``x_k`` depended on earlier positions.
    """
    cfg = config or DeepHedgingConfig()
    if params.d != 1:
        raise ConfigError("the deep-hedging baseline is defined for one asset")
    N = grid.N
    nets = _dh_nets(params, grid, cfg, seed)
    opts = [Adam(net.n_params, lr=cfg.lr) for net in nets]
    S = simulate(params, grid, cfg.n_paths, seed, tag=rng.MISC).assets[:, :, 0]
    gen = rng.generator(seed, rng.SHUFFLE, 1)
    log = []
    for epoch in range(cfg.epochs):
        order = gen.permutation(cfg.n_paths)
        losses = []
        for a in range(0, cfg.n_paths, cfg.batch_size):
            sel = order[a:a + cfg.batch_size]
            _, mean_abs, grads = deep_hedging_loss(nets, S[sel], params.x0, cfg.l2, cfg.entropy_weight)
            for k in range(N):
                opts[k].step(nets[k], grads[k])
            losses.append(-mean_abs)
        log.append({"epoch": epoch, "mean_abs_xT": -float(np.mean(losses))})
    return DeepHedgingResult(nets=nets, log=log)


def deep_hedging_diagnostics(nets, params: MarketParams, grid: TimeGrid, n_paths: int = 1000,
                             seed: int = 0):
    """Per-step output mean, spread across visited states and distance to {-1, 1}."""
    tb = rollout(deep_hedging_policy(nets), params, grid, n_paths, seed, mode="mixture")
    rows = []
    for k, net in enumerate(nets):
        q = net(policy_features(k / grid.N, tb.s[:, k], tb.x[:, k]))
        rows.append({"k": k, "mean": float(q.mean()), "sd": float(q.std()),
                     "dist_to_corner": float(np.max(1.0 - np.abs(q)))})
    return rows
