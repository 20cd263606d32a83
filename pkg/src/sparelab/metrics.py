"""Group-robustness metrics and group-inference quality scores."""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


def group_accuracies(preds, labels, groups) -> dict:
    preds, labels, groups = map(np.asarray, (preds, labels, groups))
    out = {}
    for g in np.unique(groups):
        msk = groups == g
        out[g.item() if hasattr(g, "item") else g] = float(np.mean(preds[msk] == labels[msk]))
    return out


def worst_group_error(preds, labels, groups) -> float:
    """Largest per-group error rate; groups without examples do not count."""
    accs = group_accuracies(preds, labels, groups)
    if not accs:
        raise ValueError("no nonempty groups")
    return 1.0 - min(accs.values())


def average_accuracy(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if len(preds) == 0:
        raise ValueError("no predictions")
    return float(np.mean(preds == labels))


def adjusted_average_accuracy(per_group_acc: dict, train_group_sizes: dict) -> float:
    """sum_g (n_g / n) acc_g with n_g the training-split group sizes."""
    missing = set(per_group_acc) - set(train_group_sizes)
    if missing:
        raise KeyError(f"groups {sorted(missing)} have no training size")
    total = sum(train_group_sizes[g] for g in per_group_acc)
    if total <= 0:
        raise ValueError("training group sizes sum to zero")
    return float(sum(train_group_sizes[g] * acc for g, acc in per_group_acc.items()) / total)


def minority_recall(inferred_minority, true_minority) -> float | None:
    """Fraction of true minority examples inferred as minority; None with no true minority."""
    true = set(np.asarray(true_minority).tolist())
    if not true:
        return None
    return len(true & set(np.asarray(inferred_minority).tolist())) / len(true)


def minority_in_majority(inferred_minority, true_minority) -> int:
    """True minority examples that landed in an inferred majority cluster."""
    return len(set(np.asarray(true_minority).tolist()) - set(np.asarray(inferred_minority).tolist()))


def majority_in_minority(inferred_minority, true_minority, n: int) -> float | None:
    """Fraction of true majority examples inferred as minority."""
    true = set(np.asarray(true_minority).tolist())
    n_major = n - len(true)
    if n_major <= 0:
        return None
    wrong = set(np.asarray(inferred_minority).tolist()) - true
    return len(wrong) / n_major


def contingency(a, b) -> np.ndarray:
    _, ia = np.unique(np.asarray(a), return_inverse=True)
    _, ib = np.unique(np.asarray(b), return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1))
    np.add.at(table, (ia, ib), 1)
    return table


def cramers_v_table(table) -> float:
    """sqrt(chi2 / (n (min(r, c) - 1))), Pearson chi2 without continuity correction."""
    table = np.asarray(table, dtype=float)
    r, c = table.shape
    if min(r, c) < 2:
        warnings.warn("Cramer's V needs two levels on each axis; returning 0")
        return 0.0
    n = table.sum()
    expected = table.sum(1, keepdims=True) * table.sum(0, keepdims=True) / n
    chi2 = float(np.sum((table - expected) ** 2 / expected))
    return math.sqrt(chi2 / (n * (min(r, c) - 1)))


def cramers_v(attribute_values, group_ids) -> float:
    return cramers_v_table(contingency(attribute_values, group_ids))


@dataclass
class EvalReport:
    group_accuracy: dict
    worst_group_accuracy: float
    average_accuracy: float
    adjusted_average_accuracy: float | None = None
    minority_recall: float | None = None
    minority_in_majority_count: int | None = None
    majority_in_minority_fraction: float | None = None
    cramers_v: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        d["group_accuracy"] = {str(k): v for k, v in self.group_accuracy.items()}
        return d


def evaluate_predictions(preds, labels, groups, train_group_sizes: dict | None = None,
                         group_names: list[str] | None = None) -> EvalReport:
    accs = group_accuracies(preds, labels, groups)
    if group_names is not None:
        accs = {group_names[g]: a for g, a in accs.items()}
        if train_group_sizes is not None:
            train_group_sizes = {group_names[g]: s for g, s in train_group_sizes.items()}
    adj = adjusted_average_accuracy(accs, train_group_sizes) if train_group_sizes else None
    return EvalReport(accs, min(accs.values()), average_accuracy(preds, labels), adj)


def add_inference_quality(report: EvalReport, inferred_minority, true_minority, n: int) -> EvalReport:
    report.minority_recall = minority_recall(inferred_minority, true_minority)
    report.minority_in_majority_count = minority_in_majority(inferred_minority, true_minority)
    report.majority_in_minority_fraction = majority_in_minority(inferred_minority, true_minority, n)
    return report


METRIC_COLUMNS = ["epoch", "split", "avg_acc", "adjusted_avg_acc", "worst_group_acc"]


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def write_metrics_csv(rows: list[tuple[int, str, EvalReport]], path: str | Path) -> None:
    """One row per (epoch, split) with a column per group accuracy."""
    groups = []
    for _, _, rep in rows:
        for g in rep.group_accuracy:
            if str(g) not in groups:
                groups.append(str(g))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS + [f"acc[{g}]" for g in groups])
        for epoch, split, rep in rows:
            accs = {str(k): v for k, v in rep.group_accuracy.items()}
            w.writerow([epoch, split, _fmt(rep.average_accuracy), _fmt(rep.adjusted_average_accuracy),
                        _fmt(rep.worst_group_accuracy)] + [_fmt(accs.get(g)) for g in groups])


def write_metrics_json(reports: dict[str, EvalReport], path: str | Path, extra: dict | None = None) -> None:
    doc = {k: r.to_json() for k, r in reports.items()}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))
