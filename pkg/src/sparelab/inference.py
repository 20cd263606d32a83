"""Group inference: per-class clustering of early-training model outputs."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import TwoLayerNet, collect_outputs


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    history: list[float] = field(default_factory=list)


def _sq_dists(X, C):
    d = (X * X).sum(1)[:, None] - 2 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(X, k, rng):
    n = len(X)
    centers = [X[rng.integers(n)]]
    d2 = _sq_dists(X, np.array(centers))[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        i = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers.append(X[i])
        d2 = np.minimum(d2, _sq_dists(X, X[i:i + 1])[:, 0])
    return np.array(centers, dtype=float)


def _lloyd(X, C, max_iter, tol):
    k = len(C)
    history = []
    for _ in range(max_iter):
        D = _sq_dists(X, C)
        labels = D.argmin(1)
        history.append(float(D[np.arange(len(X)), labels].sum()))
        counts = np.bincount(labels, minlength=k)
        # refill empty clusters with the point farthest from its own centroid
        for j in np.flatnonzero(counts == 0):
            own = D[np.arange(len(X)), labels].copy()
            own[counts[labels] <= 1] = -1.0
            i = int(np.argmax(own))
            counts[labels[i]] -= 1
            labels[i] = j
            counts[j] = 1
        newC = np.array([X[labels == j].mean(0) for j in range(k)])
        shift = float(np.max(np.linalg.norm(newC - C, axis=1)))
        C = newC
        if shift < tol:
            break
    D = _sq_dists(X, C)
    inertia = float(D[np.arange(len(X)), labels].sum())
    history.append(inertia)
    return labels, C, inertia, history


def kmeans(points, k: int, seed: int = 0, max_iter: int = 300, tol: float = 1e-10,
           n_init: int = 10) -> KMeansResult:
    """Lloyd iterations from k-means++ seeds; the best of ``n_init`` restarts is kept."""
    X = np.asarray(points, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(X):
        raise ValueError(f"k={k} exceeds the number of points ({len(X)})")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        labels, C, inertia, hist = _lloyd(X, _kmeans_pp(X, k, rng), max_iter, tol)
        if best is None or inertia < best.inertia - 1e-12 * max(1.0, abs(best.inertia)):
            best = KMeansResult(labels, C, inertia, hist)
    return best


def silhouette(points, labels, chunk: int = 1024) -> tuple[np.ndarray, float, bool]:
    """Per-point silhouette (b - a) / max(a, b) with Euclidean distances.

    Points in singleton clusters score 0.  Returns ``(scores, mean, degenerate)``
    where ``degenerate`` flags a single cluster overall (mean reported as 0).
    """
    X = np.asarray(points, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    labels = np.asarray(labels)
    uniq, lab = np.unique(labels, return_inverse=True)
    n, k = len(X), len(uniq)
    if k < 2:
        return np.zeros(n), 0.0, True
    onehot = np.zeros((n, k))
    onehot[np.arange(n), lab] = 1.0
    sizes = onehot.sum(0)
    scores = np.zeros(n)
    sq = (X * X).sum(1)
    for start in range(0, n, chunk):
        sl = slice(start, min(start + chunk, n))
        D = np.sqrt(np.maximum(sq[sl, None] - 2 * X[sl] @ X.T + sq[None, :], 0.0))
        D[np.arange(D.shape[0]), np.arange(sl.start, sl.stop)] = 0.0
        sums = D @ onehot
        own = lab[sl]
        own_size = sizes[own]
        a = np.where(own_size > 1, sums[np.arange(len(own)), own] / np.maximum(own_size - 1, 1), 0.0)
        other = sums / sizes
        other[np.arange(len(own)), own] = np.inf
        b = other.min(1)
        denom = np.maximum(a, b)
        s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
        scores[sl] = np.where(own_size > 1, s, 0.0)
    return scores, float(scores.mean()), False


def choose_k(points, k_range=range(2, 6), seed: int = 0) -> tuple[int, dict[int, float]]:
    """k with the highest mean silhouette; ties go to the smallest k."""
    X = np.asarray(points, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    ks = sorted(k_range)
    if not ks:
        raise ValueError("empty k range")
    if len(X) < ks[0]:
        warnings.warn(f"{len(X)} points are fewer than the smallest k={ks[0]}; using k=1")
        return 1, {}
    profile = {}
    for k in ks:
        if k > len(X):
            break
        res = kmeans(X, k, seed)
        profile[k] = silhouette(X, res.labels)[1]
    best = max(profile.values())
    return min(k for k, s in profile.items() if s >= best - 1e-12), profile


def choose_lambda(mean_silhouette: float) -> int:
    """Sampling exponent from cluster quality: 1 if >= 0.9, 2 if >= 0.7, else 3."""
    if mean_silhouette >= 0.9:
        return 1
    if mean_silhouette >= 0.7:
        return 2
    return 3


@dataclass
class ClassClusters:
    class_id: int
    indices: np.ndarray
    k: int
    labels: np.ndarray
    centroids: np.ndarray
    silhouette: np.ndarray
    mean_silhouette: float
    lam: int
    k_profile: dict[int, float] = field(default_factory=dict)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.k)

    def inferred_minority(self) -> np.ndarray:
        """Dataset indices outside the largest cluster of this class."""
        sizes = self.sizes()
        return self.indices[self.labels != int(np.argmax(sizes))]


@dataclass
class ClusterResult:
    classes: dict[int, ClassClusters]
    n: int
    T_init: int | None = None
    layer_tag: str = "last_layer_outputs"

    def cluster_of(self) -> np.ndarray:
        out = np.full(self.n, -1)
        for cc in self.classes.values():
            out[cc.indices] = cc.labels
        return out

    def cluster_sizes(self) -> np.ndarray:
        """Size of each example's own cluster."""
        out = np.zeros(self.n, dtype=int)
        for cc in self.classes.values():
            out[cc.indices] = cc.sizes()[cc.labels]
        return out

    def lambdas(self) -> dict[int, int]:
        return {c: cc.lam for c, cc in self.classes.items()}

    def inferred_minority(self) -> np.ndarray:
        parts = [cc.inferred_minority() for cc in self.classes.values()]
        return np.sort(np.concatenate(parts)) if parts else np.array([], dtype=int)

    def inferred_groups(self) -> np.ndarray:
        """A global group id per example: (class, cluster) pairs numbered in class order."""
        out = np.zeros(self.n, dtype=int)
        offset = 0
        for c in sorted(self.classes):
            cc = self.classes[c]
            out[cc.indices] = offset + cc.labels
            offset += cc.k
        return out


def cluster_class(points, k_range=range(2, 6), seed=0) -> tuple:
    X = np.asarray(points, dtype=float)
    if len(X) < 2:
        return 1, np.zeros(len(X), int), X.mean(0, keepdims=True) if len(X) else X, np.zeros(len(X)), 0.0, {}
    k, profile = choose_k(X, k_range, seed)
    res = kmeans(X, k, seed)
    scores, mean, _ = silhouette(X, res.labels)
    return k, res.labels, res.centroids, scores, mean, profile


def infer_groups(net: TwoLayerNet, X, y, layer_tag: str = "last_layer_outputs", k_range=range(2, 6),
                 seed: int = 0, output_norm: str = "none", lambda_override: int | None = None,
                 T_init: int | None = None) -> ClusterResult:
    """Cluster each class's model outputs; pick k and the sampling exponent per class.

    ``output_norm='l2'`` rescales every output vector to unit length before
    clustering, which removes the input-scale factor of a bias-free
    positively homogeneous network.
    """
    out = collect_outputs(net, X, layer_tag)
    if output_norm == "l2":
        norms = np.linalg.norm(out, axis=1, keepdims=True)
        out = out / np.where(norms > 0, norms, 1.0)
    elif output_norm != "none":
        raise ValueError(f"unknown output_norm {output_norm!r}")
    y = np.asarray(y)
    classes = {}
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        k, labels, cents, scores, mean, profile = cluster_class(out[idx], k_range, seed)
        lam = lambda_override if lambda_override is not None else choose_lambda(mean)
        classes[int(c)] = ClassClusters(int(c), idx, k, labels, cents, scores, mean, lam, profile)
    return ClusterResult(classes, len(y), T_init, layer_tag)


def write_groups_json(result: ClusterResult, path: str | Path, weights: np.ndarray | None = None) -> None:
    cluster = result.cluster_of()
    label_of = np.zeros(result.n, dtype=int)
    for c, cc in result.classes.items():
        label_of[cc.indices] = c
    examples = {}
    for i in range(result.n):
        entry = {"class": int(label_of[i]), "cluster": int(cluster[i])}
        if weights is not None:
            entry["weight"] = float(weights[i])
        examples[str(i)] = entry
    doc = {
        "T_init": result.T_init,
        "layer_tag": result.layer_tag,
        "classes": {str(c): {"k": cc.k, "mean_silhouette": cc.mean_silhouette, "lambda": cc.lam,
                             "cluster_sizes": cc.sizes().tolist(),
                             "k_profile": {str(k): v for k, v in cc.k_profile.items()}}
                    for c, cc in result.classes.items()},
        "examples": examples,
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))
