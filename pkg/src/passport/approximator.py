"""Small fully connected networks with hand-written reverse-mode gradients.

A network is a chain of affine layers with a smooth activation (``tanh``) on the
hidden layers and one of three heads:

* ``softmax`` - strategy network, outputs a distribution over the 2d corners,
* ``linear``  - value network, outputs a scalar,
* ``tanh``    - bounded continuous action in [-1, 1] (deep-hedging baseline).

All parameters live in one flat vector so optimisers and checkpoints only deal
with a single array.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng
from .errors import (CorruptFile, InvalidDistribution, NonFiniteGradient, ShapeMismatch,
                     VersionMismatch)

PROB_FLOOR = 1e-12
CHECKPOINT_VERSION = "passport-approximator/1"
HEADS = ("softmax", "linear", "tanh")


def corner_labels(d: int) -> str:
    return ",".join(f"{sgn}e{i + 1}" for i in range(d) for sgn in "+-")


@dataclass(frozen=True)
class ActionDistribution:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 1 or p.size % 2 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise InvalidDistribution(f"not a distribution over corners: {p}")
        object.__setattr__(self, "probs", p)

    @classmethod
    def dirac(cls, index: int, d: int) -> "ActionDistribution":
        p = np.zeros(2 * d)
        p[index] = 1.0
        return cls(p)

    @classmethod
    def uniform(cls, d: int) -> "ActionDistribution":
        return cls(np.full(2 * d, 1.0 / (2 * d)))


@dataclass
class GradientRecord:
    grad: np.ndarray
    loss: float
    floored: bool = False

    def __post_init__(self):
        if not np.all(np.isfinite(self.grad)):
            raise NonFiniteGradient("gradient has non-finite entries")


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class Approximator:
    """Feed-forward network ``widths[0] -> ... -> widths[-1]``."""

    def __init__(self, widths, head="softmax", activation="tanh", seed=0,
                 in_shift=None, in_scale=None, zero_last=True, sub=0):
        if head not in HEADS:
            raise ValueError(f"unknown head {head!r}")
        if activation != "tanh":
            raise ValueError("only tanh hidden activations are supported")
        self.widths = [int(w) for w in widths]
        self.head = head
        self.activation = activation
        n_in = self.widths[0]
        self.in_shift = np.zeros(n_in) if in_shift is None else np.asarray(in_shift, float).copy()
        self.in_scale = np.ones(n_in) if in_scale is None else np.asarray(in_scale, float).copy()
        self.theta = np.zeros(self.n_params)
        self._bind()
        gen = rng.generator(seed, rng.INIT, sub)
        for layer, (W, b) in enumerate(zip(self.W, self.b)):
            last = layer == len(self.W) - 1
            if last and zero_last:
                continue
            limit = math.sqrt(6.0 / (W.shape[0] + W.shape[1]))
            W[...] = gen.uniform(-limit, limit, size=W.shape)

    @property
    def n_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.widths[:-1], self.widths[1:]))

    @property
    def n_out(self) -> int:
        return self.widths[-1]

    def _bind(self):
        self.W, self.b = [], []
        pos = 0
        for a, b in zip(self.widths[:-1], self.widths[1:]):
            self.W.append(self.theta[pos:pos + a * b].reshape(a, b))
            pos += a * b
            self.b.append(self.theta[pos:pos + b])
            pos += b

    def copy(self) -> "Approximator":
        other = object.__new__(Approximator)
        other.widths = list(self.widths)
        other.head = self.head
        other.activation = self.activation
        other.in_shift = self.in_shift.copy()
        other.in_scale = self.in_scale.copy()
        other.theta = self.theta.copy()
        other._bind()
        return other

    def set_params(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != self.theta.shape:
            raise ShapeMismatch("parameter vector has the wrong length")
        self.theta[...] = theta

    # -- forward / backward -------------------------------------------------
    def pre_activation(self, inputs, keep=False):
        """Final-layer pre-activation ``z`` and (optionally) the cache for backward."""
        X = np.asarray(inputs, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[-1] != self.widths[0]:
            raise ShapeMismatch(f"expected {self.widths[0]} inputs, got {X.shape[-1]}")
        h = (X - self.in_shift) / self.in_scale
        hidden = [h]
        for W, b in zip(self.W[:-1], self.b[:-1]):
            h = np.tanh(h @ W + b)
            hidden.append(h)
        z = h @ self.W[-1] + self.b[-1]
        return (z, hidden) if keep else z

    def __call__(self, inputs):
        z = self.pre_activation(inputs)
        if self.head == "softmax":
            return softmax(z)
        if self.head == "tanh":
            return np.tanh(z[..., 0])
        return z[..., 0]

    def backward(self, hidden, dz, want_inputs=False):
        """Gradient of ``sum(dz * z)`` w.r.t. the flat parameters (and inputs)."""
        dz = np.asarray(dz, dtype=float)
        if dz.ndim == 1:
            dz = dz[:, None]
        grad = np.empty_like(self.theta)
        gW, gb = [], []
        pos = 0
        for a, b in zip(self.widths[:-1], self.widths[1:]):
            gW.append(grad[pos:pos + a * b].reshape(a, b))
            pos += a * b
            gb.append(grad[pos:pos + b])
            pos += b
        delta = dz
        for layer in range(len(self.W) - 1, -1, -1):
            h = hidden[layer]
            np.matmul(h.T, delta, out=gW[layer])
            gb[layer][...] = delta.sum(axis=0)
            if layer > 0 or want_inputs:
                delta = delta @ self.W[layer].T
                if layer > 0:
                    delta = delta * (1.0 - h * h)
        if want_inputs:
            return grad, delta / self.in_scale
        return grad


def policy_features(t_norm, s, x):
    """Network inputs ``(t/T, s, x)`` stacked as columns; scaling lives in the net."""
    s = np.atleast_2d(np.asarray(s, dtype=float))
    n = s.shape[0]
    t = np.broadcast_to(np.asarray(t_norm, dtype=float), (n,))
    x = np.broadcast_to(np.asarray(x, dtype=float), (n,))
    return np.column_stack([t, s, x])


def policy_network(d, s0, x_scale=1.0, hidden=(64, 64), seed=0, sub=0):
    """Default strategy network: zero final layer, so it starts uniform."""
    s0 = np.broadcast_to(np.asarray(s0, dtype=float), (d,))
    scale = np.concatenate([[1.0], s0, [x_scale]])
    return Approximator([d + 2, *hidden, 2 * d], head="softmax", seed=seed, sub=sub,
                        in_scale=scale)


def value_network(d, s0, x_scale=1.0, hidden=(64, 64), seed=0, sub=1):
    s0 = np.broadcast_to(np.asarray(s0, dtype=float), (d,))
    scale = np.concatenate([[1.0], s0, [x_scale]])
    return Approximator([d + 2, *hidden, 1], head="linear", seed=seed, sub=sub, in_scale=scale)


def forward_policy(net: Approximator, k, t_norm, s, x) -> ActionDistribution:
    """Distribution over the corners at a single state; ``k`` is informational."""
    if net.head != "softmax":
        raise ShapeMismatch("strategy network needs a softmax head")
    probs = net(policy_features(t_norm, s, x))[0]
    return ActionDistribution(probs / probs.sum())


# -- distances --------------------------------------------------------------
def tv_distance(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p, float) - np.asarray(q, float)).sum())


def kl_divergence(p, q, with_flag=False):
    """KL(p || q) with 0 log 0 = 0; a zero in ``q`` under mass of ``p`` saturates."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    mask = p > 0
    saturated = bool(np.any(q[mask] <= 0))
    val = float(np.sum(p[mask] * (np.log(p[mask]) - np.log(np.maximum(q[mask], PROB_FLOOR)))))
    return (val, saturated) if with_flag else val


def entropy(p) -> float:
    p = np.asarray(p, dtype=float)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


# -- loss heads: each returns (mean loss, dL/dz) for a batch of logits ------
def _softmax_vjp(p, g):
    return p * (g - np.sum(g * p, axis=-1, keepdims=True))


def tv_loss(z, targets):
    """Mean TV distance between softmax(z) and target distributions."""
    p = softmax(z)
    n = z.shape[0]
    diff = p - targets
    loss = 0.5 * np.abs(diff).sum(axis=-1).mean()
    g = 0.5 * np.sign(diff) / n  # subgradient 0 at the kink
    return float(loss), _softmax_vjp(p, g)


def kl_loss(z, targets):
    """Mean KL(target || softmax(z))."""
    logp = log_softmax(z)
    n = z.shape[0]
    t = np.asarray(targets, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        tlogt = np.where(t > 0, t * np.log(np.where(t > 0, t, 1.0)), 0.0)
    loss = (tlogt - t * logp).sum(axis=-1).mean()
    p = np.exp(logp)
    return float(loss), (p * t.sum(axis=-1, keepdims=True) - t) / n


def neg_entropy_loss(z):
    """Mean of -H(softmax(z))."""
    logp = log_softmax(z)
    p = np.exp(logp)
    n = z.shape[0]
    loss = (p * logp).sum(axis=-1).mean()
    return float(loss), _softmax_vjp(p, (logp + 1.0) / n)


def weighted_log_prob_loss(z, actions, weights):
    """``-mean(weights * log pi(actions))`` with the probability floor."""
    logp = log_softmax(z)
    n = z.shape[0]
    rows = np.arange(n)
    chosen = np.maximum(logp[rows, actions], math.log(PROB_FLOOR))
    loss = -np.mean(weights * chosen)
    onehot = np.zeros_like(z)
    onehot[rows, actions] = 1.0
    dz = -(weights / n)[:, None] * (onehot - np.exp(logp))
    return float(loss), dz


def squared_loss(v, targets):
    """Mean of (targets - v)**2 for a linear head."""
    v = np.asarray(v, dtype=float).reshape(-1)
    a = np.asarray(targets, dtype=float).reshape(-1) - v
    n = v.size
    return float(np.mean(a * a)), (-2.0 * a / n)[:, None]


def grad_log_prob(net: Approximator, inputs, action_index: int) -> GradientRecord:
    """Exact gradient of ``log pi(a | inputs)`` w.r.t. all parameters."""
    if net.head != "softmax":
        raise ShapeMismatch("log-probabilities need a softmax head")
    if not 0 <= action_index < net.n_out:
        raise ShapeMismatch("action index out of range")
    z, hidden = net.pre_activation(inputs, keep=True)
    if z.shape[0] != 1:
        raise ShapeMismatch("grad_log_prob expects a single input row")
    logp = log_softmax(z)[0]
    dz = -np.exp(logp)
    dz[action_index] += 1.0
    floored = bool(logp[action_index] < math.log(PROB_FLOOR))
    value = max(float(logp[action_index]), math.log(PROB_FLOOR))
    return GradientRecord(grad=net.backward(hidden, dz[None, :]), loss=value, floored=floored)


def last_bias_slice(net: Approximator) -> slice:
    """Location of the final-layer bias inside the flat parameter vector."""
    return slice(net.n_params - net.n_out, net.n_params)


# -- optimiser ----------------------------------------------------------------
class Adam:
    """Adam with bias correction.

    m <- b1 m + (1 - b1) g,  v <- b2 v + (1 - b2) g^2,
    theta <- theta - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
    """

    def __init__(self, n_params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, net: Approximator, grad, lr=None):
        grad = grad.grad if isinstance(grad, GradientRecord) else np.asarray(grad, float)
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradient("refusing to apply a non-finite gradient")
        lr = self.lr if lr is None else lr
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        m_hat = self.m / (1 - self.b1**self.t)
        v_hat = self.v / (1 - self.b2**self.t)
        net.theta -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return net


def update(net, grad, state: Adam, lr=None):
    return state.step(net, grad, lr)


# -- checkpoints --------------------------------------------------------------
def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in np.ravel(values))


def dumps(net: Approximator, labels: str | None = None) -> str:
    if labels is None:
        labels = corner_labels(net.n_out // 2) if net.head == "softmax" else "scalar"
    lines = [CHECKPOINT_VERSION, f"actions {labels}", f"activation {net.activation}",
             f"head {net.head}", f"widths {' '.join(map(str, net.widths))}",
             f"in_shift {_fmt(net.in_shift)}", f"in_scale {_fmt(net.in_scale)}"]
    for i, (W, b) in enumerate(zip(net.W, net.b)):
        lines.append(f"layer {i} {W.shape[0]} {W.shape[1]}")
        lines.append("W " + _fmt(W))
        lines.append("b " + _fmt(b))
    lines.append("end")
    return "\n".join(lines) + "\n"


def loads(text: str) -> Approximator:
    lines = text.splitlines()
    if not lines:
        raise CorruptFile("empty checkpoint")
    if lines[0] != CHECKPOINT_VERSION:
        if lines[0].startswith("passport-approximator/"):
            raise VersionMismatch(f"unsupported checkpoint version {lines[0]}")
        raise CorruptFile("not a passport checkpoint")
    if lines[-1] != "end":
        raise CorruptFile("checkpoint is truncated")
    try:
        fields = {}
        for line in lines[1:7]:
            key, _, rest = line.partition(" ")
            fields[key] = rest
        widths = [int(w) for w in fields["widths"].split()]
        net = object.__new__(Approximator)
        net.widths = widths
        net.head = fields["head"]
        net.activation = fields["activation"]
        net.in_shift = np.array([float(v) for v in fields["in_shift"].split()])
        net.in_scale = np.array([float(v) for v in fields["in_scale"].split()])
        net.theta = np.zeros(net.n_params)
        net._bind()
        body = lines[7:-1]
        if len(body) != 3 * (len(widths) - 1):
            raise CorruptFile("layer count does not match widths")
        for i in range(len(widths) - 1):
            head, wline, bline = body[3 * i:3 * i + 3]
            _, idx, a, b = head.split()
            if int(idx) != i or (int(a), int(b)) != net.W[i].shape:
                raise CorruptFile(f"layer {i} shape mismatch")
            W = np.array([float(v) for v in wline[2:].split()])
            bias = np.array([float(v) for v in bline[2:].split()])
            if W.size != net.W[i].size or bias.size != net.b[i].size:
                raise CorruptFile(f"layer {i} value count mismatch")
            net.W[i][...] = W.reshape(net.W[i].shape)
            net.b[i][...] = bias
    except CorruptFile:
        raise
    except (KeyError, ValueError, IndexError) as exc:
        raise CorruptFile(f"malformed checkpoint: {exc}") from exc
    if net.head not in HEADS or net.in_shift.size != widths[0] or net.in_scale.size != widths[0]:
        raise CorruptFile("malformed checkpoint header")
    return net


def save(net: Approximator, path) -> None:
    Path(path).write_text(dumps(net), encoding="utf-8")


def load(path) -> Approximator:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise CorruptFile(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(text)
