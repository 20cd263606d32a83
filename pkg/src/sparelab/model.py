"""Two-layer fully connected network in the 1/sqrt(m), 1/sqrt(d) parametrization.

    f(x) = Z^T phi(W x / sqrt(d)) / sqrt(m)

W is m x d, Z is m x o (o = 1 for the scalar binary head).
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import erf, expit

ACTIVATIONS = ("relu", "leaky", "tanh", "erf", "softplus", "identity")
_TAGS = {name: i for i, name in enumerate(ACTIVATIONS)}


@dataclass(frozen=True)
class Activation:
    name: str = "relu"
    a: float = 0.0  # negative-side slope, leaky only

    def __post_init__(self):
        if self.name not in ACTIVATIONS:
            raise ValueError(f"unsupported activation {self.name!r}; choose from {ACTIVATIONS}")

    @classmethod
    def parse(cls, spec: "str | Activation") -> "Activation":
        """Accept ``relu``, ``tanh``, ``leaky(0.1)`` etc."""
        if isinstance(spec, Activation):
            return spec
        spec = spec.strip()
        if spec.startswith("leaky"):
            inner = spec[len("leaky"):].strip("() ")
            return cls("leaky", float(inner) if inner else 0.01)
        return cls(spec)

    def __str__(self):
        return f"leaky({self.a})" if self.name == "leaky" else self.name

    @property
    def piecewise_linear(self) -> bool:
        return self.name in ("relu", "leaky")

    def phi(self, u):
        if self.name == "relu":
            return np.maximum(u, 0.0)
        if self.name == "leaky":
            return np.where(u >= 0, u, self.a * u)
        if self.name == "tanh":
            return np.tanh(u)
        if self.name == "erf":
            return erf(u)
        if self.name == "softplus":
            return np.logaddexp(0.0, u)
        return np.asarray(u, dtype=float)

    def dphi(self, u):
        # piecewise-linear activations use phi'(0) = 1
        if self.name == "relu":
            return (u >= 0).astype(float)
        if self.name == "leaky":
            return np.where(u >= 0, 1.0, self.a)
        if self.name == "tanh":
            return 1.0 - np.tanh(u) ** 2
        if self.name == "erf":
            return 2.0 / math.sqrt(math.pi) * np.exp(-u * u)
        if self.name == "softplus":
            return expit(u)
        return np.ones_like(u, dtype=float)


@dataclass
class TwoLayerNet:
    W: np.ndarray
    Z: np.ndarray
    activation: Activation = field(default_factory=Activation)

    @property
    def m(self) -> int:
        return self.W.shape[0]

    @property
    def d(self) -> int:
        return self.W.shape[1]

    @property
    def o(self) -> int:
        return self.Z.shape[1]

    def copy(self) -> "TwoLayerNet":
        return TwoLayerNet(self.W.copy(), self.Z.copy(), self.activation)


def init_symmetric(m: int, d: int, o: int = 1, activation="relu", seed: int = 0) -> TwoLayerNet:
    """Paired-neuron initialization whose output is identically zero.

    Rows ``w_1..w_{m/2}`` are standard Gaussian and repeated; second-layer
    entries of the first half are uniform +-1 and negated in the second half.
    """
    if m % 2:
        raise ValueError(f"symmetric initialization needs an even width, got m={m}")
    rng = np.random.default_rng(seed)
    W0 = rng.standard_normal((m // 2, d))
    Z0 = rng.choice([-1.0, 1.0], size=(m // 2, o))
    return TwoLayerNet(np.vstack([W0, W0]), np.vstack([Z0, -Z0]), Activation.parse(activation))


def _check_dim(net: TwoLayerNet, X: np.ndarray):
    if X.shape[-1] != net.d:
        raise ValueError(f"input has dimension {X.shape[-1]}, network expects d={net.d}")


def forward(net: TwoLayerNet, x: np.ndarray) -> np.ndarray:
    """Network output; ``x`` of shape (d,) gives (o,), (n, d) gives (n, o)."""
    x = np.asarray(x, dtype=float)
    _check_dim(net, x)
    hidden = net.activation.phi(x @ net.W.T / math.sqrt(net.d))
    return hidden @ net.Z / math.sqrt(net.m)


def collect_outputs(net: TwoLayerNet, X: np.ndarray, layer_tag: str = "last_layer_outputs") -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    _check_dim(net, X)
    if layer_tag == "last_layer_outputs":
        return forward(net, X)
    if layer_tag == "penultimate_features":
        return net.activation.phi(X @ net.W.T / math.sqrt(net.d)) / math.sqrt(net.m)
    raise ValueError(f"unknown layer tag {layer_tag!r}")


def predict_label(net: TwoLayerNet, X: np.ndarray) -> np.ndarray:
    """Binary head: sign with sign(0) = +1.  Multiclass: argmax, ties to the lowest index."""
    out = forward(net, np.atleast_2d(X))
    if net.o == 1:
        return np.where(out[:, 0] >= 0, 1, -1)
    return np.argmax(out, axis=1)


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _per_example(loss: str, out: np.ndarray, y: np.ndarray, o: int):
    """Per-example losses and d(loss)/d(output)."""
    if loss == "l2":
        if o != 1:
            raise ValueError("l2 loss needs a scalar head (o=1); use cross_entropy for multiclass")
        r = out[:, 0] - y
        return 0.5 * r**2, r[:, None]
    if loss == "cross_entropy":
        if o < 2:
            raise ValueError("cross_entropy needs o >= 2 outputs")
        y = np.asarray(y, dtype=int)
        if y.min(initial=0) < 0 or y.max(initial=0) >= o:
            raise ValueError(f"labels must lie in [0, {o}), got range [{y.min()}, {y.max()}]")
        z = out - out.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        g = np.exp(logp)
        g[np.arange(len(y)), y] -= 1.0
        return -logp[np.arange(len(y)), y], g
    raise ValueError(f"unknown loss {loss!r}")


def l2_loss(net: TwoLayerNet, X: np.ndarray, y: np.ndarray) -> float:
    """(1/2n) sum (f(x_i) - y_i)^2 on a scalar head."""
    return float(_per_example("l2", forward(net, X), np.asarray(y, float), net.o)[0].mean())


def cross_entropy_loss(net: TwoLayerNet, X: np.ndarray, y: np.ndarray) -> float:
    return float(_per_example("cross_entropy", forward(net, X), y, net.o)[0].mean())


def loss_value(net, X, y, loss="l2") -> float:
    return l2_loss(net, X, y) if loss == "l2" else cross_entropy_loss(net, X, y)


def loss_and_grads(net: TwoLayerNet, X, y, loss="l2", sample_weight=None):
    """Weighted loss ``sum_i w_i l_i`` (default ``w_i = 1/n``) and its gradients."""
    X = np.asarray(X, dtype=float)
    _check_dim(net, X)
    n = len(X)
    w = np.full(n, 1.0 / n) if sample_weight is None else np.asarray(sample_weight, float)
    sd, sm = math.sqrt(net.d), math.sqrt(net.m)
    pre = X @ net.W.T / sd
    hidden = net.activation.phi(pre)
    out = hidden @ net.Z / sm
    ell, dout = _per_example(loss, out, y if loss == "cross_entropy" else np.asarray(y, float), net.o)
    G = dout * w[:, None]
    gZ = hidden.T @ G / sm
    gpre = (G @ net.Z.T / sm) * net.activation.dphi(pre)
    gW = gpre.T @ X / sd
    return float(ell @ w), gW, gZ


def layer_rates(net: TwoLayerNet, eta: float, parametrization: str = "ntk") -> tuple[float, float]:
    """Per-layer step sizes.

    ``standard`` reproduces, in function space, SGD with rate ``eta`` on a net
    written as ``Z_s^T phi(W_s x)`` with ``W_s = W/sqrt(d)``, ``Z_s = Z/sqrt(m)``.
    """
    if parametrization == "ntk":
        return eta, eta
    if parametrization == "standard":
        return eta * net.d, eta * net.m
    raise ValueError(f"unknown parametrization {parametrization!r}")


def grad_step(net: TwoLayerNet, X, y, eta: float, loss: str = "l2", weight_decay: float = 0.0,
              parametrization: str = "ntk", sample_weight=None) -> TwoLayerNet:
    """One simultaneous update of both layers from gradients at the current weights."""
    if eta < 0:
        raise ValueError("eta must be non-negative")
    _, gW, gZ = loss_and_grads(net, X, y, loss, sample_weight)
    rw, rz = layer_rates(net, eta, parametrization)
    decay = 1.0 - eta * weight_decay
    return TwoLayerNet(decay * net.W - rw * gW, decay * net.Z - rz * gZ, net.activation)


@dataclass
class TrainConfig:
    eta: float
    steps: int = 0
    epochs: int = 0
    batch_size: int | None = None  # None means full batch
    loss: str = "l2"
    seed: int = 0
    weight_decay: float = 0.0
    parametrization: str = "ntk"
    record_every: int = 1
    record_outputs: bool = False

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1 or None, got {self.batch_size}")

    def total_steps(self, n: int) -> int:
        if self.batch_size is None:
            return self.steps
        return self.epochs * math.ceil(n / self.batch_size)


@dataclass
class TrainTrace:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)

    def add(self, step: int, loss: float, outputs: np.ndarray | None = None):
        if self.steps and step <= self.steps[-1]:
            raise ValueError(f"trace steps must increase: {step} after {self.steps[-1]}")
        self.steps.append(step)
        self.losses.append(loss)
        if outputs is not None:
            self.outputs.append(outputs)


def batch_order(n: int, batch_size: int, epochs: int, seed: int):
    """Per-epoch shuffled mini-batches from a stream reserved for shuffling."""
    rng = np.random.default_rng([seed, 0x5F])
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield perm[start:start + batch_size]


def train(net: TwoLayerNet, X, y, config: TrainConfig, batches=None,
          callback: Callable[[int, TwoLayerNet], None] | None = None):
    """Plain (S)GD.  ``batches`` overrides the index stream (used by samplers).

    The trace holds full-training-set loss (and optionally outputs) after every
    ``record_every`` updates, starting with step 0.
    """
    X = np.asarray(X, dtype=float)
    trace = TrainTrace()

    def record(t, net):
        if t % config.record_every:
            return
        out = forward(net, X)
        ell = _per_example(config.loss, out, y if config.loss == "cross_entropy" else np.asarray(y, float), net.o)[0]
        trace.add(t, float(ell.mean()), out.copy() if config.record_outputs else None)
        if callback is not None:
            callback(t, net)

    if batches is None:
        if config.batch_size is None:
            batches = (slice(None) for _ in range(config.steps))
        else:
            batches = batch_order(len(X), config.batch_size, config.epochs, config.seed)
    record(0, net)
    t = 0
    for idx in batches:
        net = grad_step(net, X[idx], y[idx], config.eta, config.loss, config.weight_decay,
                        config.parametrization)
        t += 1
        record(t, net)
    return net, trace


# ---------------------------------------------------------------- checkpoints

SPNN_MAGIC = b"SPNN"
SPNN_VERSION = 1


def save_checkpoint(net: TwoLayerNet, path: str | Path) -> None:
    """Binary layout: magic, u32 version, u8 activation tag, f64 activation
    parameter, u64 m, d, o, then W and Z as little-endian f64 row-major."""
    with open(path, "wb") as fh:
        fh.write(SPNN_MAGIC)
        fh.write(struct.pack("<IBdQQQ", SPNN_VERSION, _TAGS[net.activation.name], net.activation.a,
                             net.m, net.d, net.o))
        fh.write(np.ascontiguousarray(net.W, "<f8").tobytes())
        fh.write(np.ascontiguousarray(net.Z, "<f8").tobytes())


def load_checkpoint(path: str | Path) -> TwoLayerNet:
    data = Path(path).read_bytes()
    if data[:4] != SPNN_MAGIC:
        raise ValueError(f"{path} is not an SPNN checkpoint")
    head = struct.calcsize("<IBdQQQ")
    version, tag, a, m, d, o = struct.unpack("<IBdQQQ", data[4:4 + head])
    if version != SPNN_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 4 + head
    if len(data) != off + 8 * (m * d + m * o):
        raise ValueError("checkpoint payload length mismatch")
    W = np.frombuffer(data, "<f8", m * d, off).reshape(m, d).copy()
    Z = np.frombuffer(data, "<f8", m * o, off + 8 * m * d).reshape(m, o).copy()
    return TwoLayerNet(W, Z, Activation(ACTIVATIONS[tag], a))


def with_activation(net: TwoLayerNet, activation) -> TwoLayerNet:
    return replace(net, activation=Activation.parse(activation))
