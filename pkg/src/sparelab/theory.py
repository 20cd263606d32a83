"""Numerical checks of the early-training feature-learning results.

* phase 1: outputs on isolated core/spurious features grow linearly in t with
  slope 2 eta zeta^2 ||v||^2 / d * (signed count / n);
* separability: per-class 2-means on outputs splits majority from minority;
* phase 2: at T = c2 d ln d / eta the spurious feature dominates the output
  when its noise-to-signal ratio is much smaller than the core feature's;
* linear coupling: network and psi-linear model agree early on.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datagen import Dataset, nsr
from .linear_proxy import (LinearModel, PsiConstants, constants_for, coupling_gap, feature_gap,
                           linear_closed_form, linear_forward, train_linear)
from .model import TrainConfig, TwoLayerNet, forward, init_symmetric, train


@dataclass
class NetConfig:
    m: int = 2000
    activation: str = "relu"
    seed: int = 0


@dataclass
class TheoryConfig:
    alpha: float = 0.1
    probe_steps: list[int] | None = None
    c2: float = 1.0
    slope_tolerance: float = 0.15
    separability_step: int | None = None

    def __post_init__(self):
        if not 0 < self.alpha < 0.25:
            raise ValueError(f"alpha must lie in (0, 1/4), got {self.alpha}")


@dataclass
class PhaseReport:
    steps: list[int]
    probes: dict[str, list[float]]
    predicted_slopes: dict[str, float]
    fitted_slopes: dict[str, float]
    relative_errors: dict[str, float]
    kappa: float
    noise_floor: float
    fit_steps: list[int] = field(default_factory=list)
    separability: dict[int, dict[int, float]] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)


def early_window(d: int, eta: float) -> int:
    return max(1, round(0.5 * math.sqrt(d / eta)))


def default_probe_steps(d: int, eta: float, points: int = 12) -> list[int]:
    """Geometric grid over [1, round(0.5 sqrt(d/eta))]."""
    hi = early_window(d, eta)
    return sorted({int(round(s)) for s in np.geomspace(1, hi, points)})


def phase2_step(d: int, eta: float, c2: float = 1.0) -> int:
    return int(round(c2 * d * math.log(d) / eta))


def feasibility(n: int, m: int, d: int, alpha: float) -> list[str]:
    notes = []
    if n < d or m < d:
        notes.append(f"n={n}, m={m} below d={d}")
    need = d ** (1 + alpha)
    if n < need or m < need:
        notes.append(f"n={n}, m={m} below d^(1+alpha)={need:.0f} for alpha={alpha}")
    return notes


def probe_feature(model, v: np.ndarray, constants: PsiConstants | None = None) -> float:
    """Model output with the isolated feature vector as input."""
    if isinstance(model, TwoLayerNet):
        return float(forward(model, v)[0])
    if constants is None:
        raise ValueError("a linear model needs its psi constants")
    return float(linear_forward(model, v, constants))


def feature_signed_counts(ds: Dataset) -> dict[str, float]:
    """sum_i y_i over examples carrying each feature, for a binary +-1 dataset."""
    out = {}
    for c in ds.bank.core:
        out[f"core:{c}"] = float(np.sum(ds.y[ds.y == c]))
    spur = ds.spurious
    for s in ds.bank.spurious:
        out[f"spurious:{s}"] = float(np.sum(ds.y[spur == s]))
    return out


def predicted_slopes(ds: Dataset, eta: float, zeta: float) -> dict[str, float]:
    """2 eta zeta^2 ||v||^2 / d * (signed count / n) for every bank feature."""
    counts = feature_signed_counts(ds)
    vecs = ds.bank.vectors()
    return {k: 2 * eta * zeta**2 * float(vecs[k] @ vecs[k]) / ds.d * counts[k] / ds.n for k in vecs}


def kappa(ds: Dataset) -> float:
    """Total noise effect on outputs (binary datasets, classes +-1)."""
    bank = ds.bank
    core = sum(ds.class_counts()[c] ** 2 * bank.core_sigma[c] ** 2 * float(bank.core[c] @ bank.core[c])
               for c in bank.core if c in ds.class_counts())
    spur = 0.0
    spur_ids = ds.spurious
    for s, v in bank.spurious.items():
        imbalance = float(np.sum(np.sign(ds.y[spur_ids == s])))
        spur += imbalance**2 * bank.spurious_sigma[s] ** 2 * float(v @ v)
    return (math.sqrt(core) + math.sqrt(spur)) / ds.n


def fit_slope_through_origin(t: np.ndarray, values: np.ndarray) -> float:
    t = np.asarray(t, float)
    return float(t @ np.asarray(values, float) / (t @ t))


def _train_probe(ds: Dataset, net_config: NetConfig, train_config: TrainConfig, steps: list[int],
                 features: dict[str, np.ndarray], record_outputs_at=()):
    net = init_symmetric(net_config.m, ds.d, 1, net_config.activation, net_config.seed)
    probes = {k: [] for k in features}
    outputs = {}
    wanted = set(steps)
    V = np.array(list(features.values()))

    def cb(t, net):
        if t in wanted:
            vals = forward(net, V)[:, 0]
            for k, val in zip(features, vals):
                probes[k].append(float(val))
        if t in record_outputs_at:
            outputs[t] = forward(net, ds.X)[:, 0]

    cfg = TrainConfig(eta=train_config.eta, steps=max(steps), loss="l2", seed=train_config.seed,
                      record_every=1)
    net, _ = train(net, ds.X, ds.y.astype(float), cfg, callback=cb)
    return net, probes, outputs


def separability_score(outputs, labels, is_majority) -> dict[int, float]:
    """Per class: optimal 1-D 2-means on outputs, scored by overlap with the majority/minority tags.

    The score is the fraction of the class whose cluster matches its tag under
    the better of the two cluster-to-tag assignments.  Classes with fewer than
    two examples are omitted.
    """
    outputs = np.asarray(outputs, float).ravel()
    labels = np.asarray(labels)
    is_majority = np.asarray(is_majority, bool)
    scores = {}
    for c in np.unique(labels):
        mask = labels == c
        if mask.sum() < 2:
            continue
        assign = two_means_1d(outputs[mask])
        tag = is_majority[mask]
        agree = float(np.mean(assign == tag))
        scores[int(c)] = max(agree, 1.0 - agree)
    return scores


def two_means_1d(values: np.ndarray) -> np.ndarray:
    """Exact 1-D 2-means: best threshold over sorted values.  Returns a boolean
    cluster assignment; all points land in one cluster when values are constant."""
    v = np.asarray(values, float)
    order = np.argsort(v, kind="stable")
    s = v[order]
    n = len(s)
    if n < 2 or s[-1] == s[0]:
        return np.zeros(n, dtype=bool)
    csum = np.cumsum(s)
    csq = np.cumsum(s * s)
    k = np.arange(1, n)
    left = csq[:-1] - csum[:-1] ** 2 / k
    right = (csq[-1] - csq[:-1]) - (csum[-1] - csum[:-1]) ** 2 / (n - k)
    cost = left + right
    cost[s[1:] == s[:-1]] = np.inf  # split only between distinct values
    cut = int(np.argmin(cost)) + 1
    assign = np.zeros(n, dtype=bool)
    assign[order[cut:]] = True
    return assign


def phase1_check(ds: Dataset, net_config: NetConfig, train_config: TrainConfig,
                 theory_config: TheoryConfig | None = None) -> PhaseReport:
    theory_config = theory_config or TheoryConfig()
    eta = train_config.eta
    steps = theory_config.probe_steps or default_probe_steps(ds.d, eta)
    notes = feasibility(ds.n, net_config.m, ds.d, theory_config.alpha)
    for note in notes:
        warnings.warn(note)
    consts = constants_for(net_config.activation, ds.X)
    features = ds.bank.vectors()
    sep_step = theory_config.separability_step
    record = (sep_step,) if sep_step is not None else ()
    all_steps = sorted(set(steps) | set(record))
    _, probes_all, outputs = _train_probe(ds, net_config, train_config, all_steps, features, record)
    idx = [all_steps.index(t) for t in steps]
    probes = {k: [v[i] for i in idx] for k, v in probes_all.items()}

    half = max(steps) / 2
    fit_steps = [t for t in steps if t <= half] or steps[:1]
    sel = [steps.index(t) for t in fit_steps]
    predicted = predicted_slopes(ds, eta, consts.zeta)
    fitted = {k: fit_slope_through_origin(fit_steps, np.array(probes[k])[sel]) for k in features}
    rel = {k: (abs(fitted[k] - predicted[k]) / abs(predicted[k]) if predicted[k] != 0 else math.inf)
           for k in features}
    kap = kappa(ds)
    floor = 3 * kap * 2 * eta * consts.zeta**2 / ds.d
    report = PhaseReport(steps, probes, predicted, fitted, rel, kap, floor, fit_steps, warnings=notes)
    if sep_step is not None:
        report.separability[sep_step] = separability_score(outputs[sep_step], ds.y, ds.is_majority)
    return report


@dataclass
class Phase2Result:
    T: int
    ratio: float
    core_output: float
    bound: float
    per_class: dict[int, dict[str, float]]
    closed_form_ratio: float
    closed_form_weighted_ratio: float
    hypothesis_met: bool
    warnings: list[str] = field(default_factory=list)


def _majority_spurious(ds: Dataset) -> dict[int, str]:
    out = {}
    for g in ds.groups:
        if g.is_majority:
            out.setdefault(g.class_id, g.spurious_id)
    return out


def domination_ratio(f_s: float, f_c: float) -> float:
    return math.inf if f_c == 0 else abs(f_s) / abs(f_c)


def phase2_domination(ds: Dataset, net_config: NetConfig, train_config: TrainConfig,
                      theory_config: TheoryConfig | None = None) -> Phase2Result:
    """Train to T = round(c2 d ln d / eta) and compare spurious vs core feature outputs.

    ``ratio`` is the smallest |f(v_s)| / |f(v_c)| over classes (v_s the class's
    majority spurious feature) and ``core_output`` the largest |f(v_c)|.
    """
    theory_config = theory_config or TheoryConfig()
    notes = []
    counts = ds.class_counts()
    if len(set(counts.values())) > 1:
        notes.append(f"classes are not balanced: {counts}")
    maj = _majority_spurious(ds)
    minority = sum(g.size for g in ds.groups if not g.is_majority)
    if minority > ds.n ** 0.9:
        notes.append(f"minority total {minority} is not small relative to n={ds.n}")
    for note in notes:
        warnings.warn(note)

    T = phase2_step(ds.d, train_config.eta, theory_config.c2)
    net = init_symmetric(net_config.m, ds.d, 1, net_config.activation, net_config.seed)
    cfg = TrainConfig(eta=train_config.eta, steps=T, loss="l2", seed=train_config.seed, record_every=T)
    net, _ = train(net, ds.X, ds.y.astype(float), cfg)

    bank = ds.bank
    r_c = max(nsr(float(np.linalg.norm(v)), bank.core_sigma[c]) for c, v in bank.core.items())
    r_s = max(nsr(float(np.linalg.norm(bank.spurious[s])), bank.spurious_sigma[s]) for s in maj.values())
    bound = math.sqrt(2) * r_s / r_c if r_c > 0 else math.inf

    consts = constants_for(net_config.activation, ds.X)
    beta = linear_closed_form(ds.X, ds.y, consts, include_bias=False)
    per_class = {}
    for c, s in maj.items():
        vc, vs = bank.core[c], bank.spurious[s]
        fc, fs = probe_feature(net, vc), probe_feature(net, vs)
        bc, bs = float(beta.beta_data @ vc), float(beta.beta_data @ vs)
        per_class[c] = {
            "f_core": fc, "f_spurious": fs, "ratio": domination_ratio(fs, fc),
            "closed_core": bc, "closed_spurious": bs, "closed_ratio": domination_ratio(bs, bc),
            "closed_weighted_ratio": domination_ratio(bs * np.linalg.norm(vs), bc * np.linalg.norm(vc)),
        }
    return Phase2Result(
        T=T,
        ratio=min(p["ratio"] for p in per_class.values()),
        core_output=max(abs(p["f_core"]) for p in per_class.values()),
        bound=bound,
        per_class=per_class,
        closed_form_ratio=min(p["closed_ratio"] for p in per_class.values()),
        closed_form_weighted_ratio=min(p["closed_weighted_ratio"] for p in per_class.values()),
        hypothesis_met=r_s < min(r_c, 1.0) / 5,
        warnings=notes,
    )


@dataclass
class AssumptionReport:
    steps: list[int]
    train_gap: np.ndarray
    core_gap: np.ndarray
    spurious_gap: np.ndarray


def assumption_check(ds: Dataset, net_config: NetConfig, train_config: TrainConfig,
                     steps: int = 100, record_every: int = 1) -> AssumptionReport:
    """Network vs psi-linear model on the training set and on isolated features."""
    consts = constants_for(net_config.activation, ds.X)
    maj = _majority_spurious(ds)
    core = {f"core:{c}": v for c, v in ds.bank.core.items()}
    spur = {f"spurious:{s}": ds.bank.spurious[s] for s in sorted(set(maj.values()))}
    y = ds.y.astype(float)

    lin_models = {}
    _, lin_trace = train_linear(ds.X, y, consts, train_config.eta, steps, record_every=record_every,
                                callback=lambda t, mdl: lin_models.__setitem__(t, mdl))
    core_gap, spur_gap = [], []

    def cb(t, net):
        mdl = lin_models[t]
        core_gap.append(max(feature_gap(net, mdl, core, consts).values()))
        spur_gap.append(max(feature_gap(net, mdl, spur, consts).values()))

    net = init_symmetric(net_config.m, ds.d, 1, net_config.activation, net_config.seed)
    cfg = TrainConfig(eta=train_config.eta, steps=steps, loss="l2", record_every=record_every,
                      record_outputs=True)
    _, net_trace = train(net, ds.X, y, cfg, callback=cb)
    return AssumptionReport(list(net_trace.steps), coupling_gap(net_trace, lin_trace),
                            np.array(core_gap), np.array(spur_gap))


# ---------------------------------------------------------------- CSV output

def write_probe_csv(report: PhaseReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "feature_id", "probe_value", "predicted_value"])
        for k, vals in report.probes.items():
            for t, v in zip(report.steps, vals):
                w.writerow([t, k, repr(v), repr(report.predicted_slopes[k] * t)])


def write_separability_csv(rows: list[tuple], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "step", "separability", "minority_recall"])
        for c, t, *vals in rows:
            w.writerow([c, t, *map(repr, map(float, vals))])


def write_assumption_csv(report: AssumptionReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "train_gap", "core_gap", "spurious_gap"])
        for row in zip(report.steps, report.train_gap, report.core_gap, report.spurious_gap):
            w.writerow([row[0], *map(repr, map(float, row[1:]))])


def two_means_minority_recall(outputs, labels, is_majority) -> dict[int, float]:
    """Per class: fraction of true minority examples that fall in the smaller 2-means cluster."""
    outputs = np.asarray(outputs, float).ravel()
    labels = np.asarray(labels)
    is_majority = np.asarray(is_majority, bool)
    out = {}
    for c in np.unique(labels):
        mask = labels == c
        minority = ~is_majority[mask]
        if not minority.any():
            continue
        assign = two_means_1d(outputs[mask])
        small = assign if assign.sum() <= (~assign).sum() else ~assign
        out[int(c)] = float(np.mean(small[minority]))
    return out


def separability_trace(ds: Dataset, net_config: NetConfig, train_config: TrainConfig,
                       steps: list[int]) -> list[tuple[int, int, float, float]]:
    """Rows (class, step, separability score, minority recall) along one training run."""
    _, _, outputs = _train_probe(ds, net_config, train_config, steps, ds.bank.vectors(), set(steps))
    rows = []
    for t in sorted(outputs):
        sep = separability_score(outputs[t], ds.y, ds.is_majority)
        rec = two_means_minority_recall(outputs[t], ds.y, ds.is_majority)
        for c in sorted(sep):
            rows.append((c, t, sep[c], rec.get(c, math.nan)))
    return rows
