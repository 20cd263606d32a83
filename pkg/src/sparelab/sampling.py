"""Importance sampling over inferred groups, plus baseline reweighting schemes."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .inference import ClusterResult
from .model import (TrainConfig, TrainTrace, TwoLayerNet, _per_example, forward, grad_step,
                    layer_rates, loss_and_grads, train)


@dataclass
class SamplingPlan:
    weights: np.ndarray
    probs: np.ndarray
    lambdas: dict[int, float] = field(default_factory=dict)
    strategy: str = "uniform"

    def __post_init__(self):
        if np.any(self.probs < 0):
            raise ValueError("sampling probabilities must be nonnegative")
        total = self.probs.sum()
        if not math.isclose(total, 1.0, abs_tol=1e-9):
            raise ValueError(f"sampling probabilities sum to {total}, not 1")

    @property
    def n(self) -> int:
        return len(self.probs)


def _normalize(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    p = p / p.sum()
    # push the rounding residue into the largest entry so the sum is 1 to ~1 ulp
    p[np.argmax(p)] += 1.0 - p.sum()
    return p


def uniform_plan(n: int) -> SamplingPlan:
    return SamplingPlan(np.ones(n), _normalize(np.ones(n)), {}, "uniform")


def spare_weights(clusters: ClusterResult, lambdas: dict[int, float] | None = None,
                  class_mix="frequency", normalization: str = "per_class") -> SamplingPlan:
    """w_i = 1 / |own cluster|, p_i proportional to w_i^lambda.

    With ``per_class`` normalization the within-class distributions are mixed
    by ``class_mix`` (``frequency`` = n_c/n, ``uniform`` = 1/C, or a dict);
    ``global`` normalizes w_i^lambda over the whole dataset instead.
    """
    lambdas = lambdas if lambdas is not None else clusters.lambdas()
    sizes = clusters.cluster_sizes()
    if np.any(sizes <= 0):
        raise ValueError("every example must belong to a nonempty cluster")
    w = 1.0 / sizes
    p = np.zeros(clusters.n)
    n_cls = len(clusters.classes)
    for c, cc in clusters.classes.items():
        raw = w[cc.indices] ** lambdas[c]
        if normalization == "global":
            p[cc.indices] = raw
            continue
        if class_mix == "frequency":
            mix = len(cc.indices) / clusters.n
        elif class_mix == "uniform":
            mix = 1.0 / n_cls
        else:
            mix = class_mix[c]
        p[cc.indices] = mix * raw / raw.sum()
    if normalization not in ("per_class", "global"):
        raise ValueError(f"unknown normalization {normalization!r}")
    return SamplingPlan(w, _normalize(p), dict(lambdas), "spare")


def class_balance_plan(labels) -> SamplingPlan:
    labels = np.asarray(labels)
    _, inv, counts = np.unique(labels, return_inverse=True, return_counts=True)
    w = 1.0 / counts[inv]
    return SamplingPlan(w, _normalize(w), {}, "cb")


def group_balance_plan(groups) -> SamplingPlan:
    groups = np.asarray(groups)
    _, inv, counts = np.unique(groups, return_inverse=True, return_counts=True)
    w = 1.0 / counts[inv]
    return SamplingPlan(w, _normalize(w), {}, "gb")


def sample_minibatch(plan: SamplingPlan, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. draws with replacement from the plan's categorical distribution."""
    return rng.choice(plan.n, size=batch_size, replace=True, p=plan.probs)


def plan_batches(plan: SamplingPlan, batch_size: int, steps: int, seed: int):
    rng = np.random.default_rng([seed, 0xA3])
    for _ in range(steps):
        yield sample_minibatch(plan, batch_size, rng)


def train_with_sampler(net: TwoLayerNet, X, y, plan: SamplingPlan, config: TrainConfig, callback=None):
    """SGD on mini-batches drawn from ``plan``; an epoch is ceil(n / batch) draws."""
    if config.batch_size is None:
        raise ValueError("sampled training needs a batch size")
    steps = config.total_steps(len(X))
    return train(net, X, y, config, batches=plan_batches(plan, config.batch_size, steps, config.seed),
                 callback=callback)


def jtt_upsample(n: int, flagged_ids, factor: int) -> np.ndarray:
    """All ids once plus ``factor - 1`` extra copies of each flagged id."""
    if factor < 1 or int(factor) != factor:
        raise ValueError(f"factor must be an integer >= 1, got {factor}")
    flagged = np.asarray(flagged_ids, dtype=int)
    return np.concatenate([np.arange(n)] + [flagged] * (int(factor) - 1))


def misclassified(net: TwoLayerNet, X, y) -> np.ndarray:
    from .model import predict_label

    return np.flatnonzero(predict_label(net, X) != np.asarray(y))


def upsampled_batches(index_list: np.ndarray, batch_size: int, epochs: int, seed: int):
    rng = np.random.default_rng([seed, 0x77])
    for _ in range(epochs):
        perm = index_list[rng.permutation(len(index_list))]
        for start in range(0, len(perm), batch_size):
            yield perm[start:start + batch_size]


def gdro_step(net: TwoLayerNet, X, y, group_ids, q: np.ndarray, eta_net: float, eta_q: float,
              loss: str = "l2", weight_decay: float = 0.0, parametrization: str = "ntk"):
    """Exponentiated-gradient ascent on group weights, then descent on sum_g q_g L_g.

    Groups absent from the batch contribute L_g = 0 for this step.
    """
    group_ids = np.asarray(group_ids)
    out = forward(net, X)
    yy = y if loss == "cross_entropy" else np.asarray(y, float)
    ell, _ = _per_example(loss, out, yy, net.o)
    G = len(q)
    counts = np.bincount(group_ids, minlength=G)
    sums = np.bincount(group_ids, weights=ell, minlength=G)
    L = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
    q = q * np.exp(eta_q * L)
    q = q / q.sum()
    w = q[group_ids] / counts[group_ids]
    net = grad_step(net, X, y, eta_net, loss, weight_decay, parametrization, sample_weight=w)
    return net, q


def train_gdro(net: TwoLayerNet, X, y, group_ids, config: TrainConfig, eta_q: float = 0.01, callback=None):
    group_ids = np.asarray(group_ids)
    G = int(group_ids.max()) + 1
    q = np.full(G, 1.0 / G)
    trace = TrainTrace()
    yy = y if config.loss == "cross_entropy" else np.asarray(y, float)

    def record(t, net):
        if t % config.record_every == 0:
            trace.add(t, float(_per_example(config.loss, forward(net, X), yy, net.o)[0].mean()))
            if callback is not None:
                callback(t, net)

    from .model import batch_order

    record(0, net)
    t = 0
    for idx in batch_order(len(X), config.batch_size or len(X), config.epochs, config.seed):
        net, q = gdro_step(net, X[idx], y[idx], group_ids[idx], q, config.eta, eta_q, config.loss,
                           config.weight_decay, config.parametrization)
        t += 1
        record(t, net)
    return net, q, trace


def write_plan_json(plan: SamplingPlan, path: str | Path) -> None:
    doc = {
        "strategy": plan.strategy,
        "lambdas": {str(c): v for c, v in plan.lambdas.items()},
        "examples": [{"id": i, "w": float(w), "p": float(p)} for i, (w, p) in enumerate(zip(plan.weights, plan.probs))],
    }
    Path(path).write_text(json.dumps(doc, indent=1))
