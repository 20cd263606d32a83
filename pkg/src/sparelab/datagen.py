"""Synthetic core/spurious feature datasets and Colored MNIST.

Every example is ``x = v_c + v_s + noise`` where ``v_c`` is the core feature
of its class and ``v_s`` the spurious feature of its group.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np


@dataclass
class FeatureBank:
    d: int
    core: dict[int, np.ndarray]
    spurious: dict[str, np.ndarray]
    core_sigma: dict[int, float]
    spurious_sigma: dict[str, float]

    def vectors(self) -> dict[str, np.ndarray]:
        out = {f"core:{c}": v for c, v in self.core.items()}
        out.update({f"spurious:{s}": v for s, v in self.spurious.items()})
        return out

    def unit_directions(self) -> np.ndarray:
        vs = np.array(list(self.vectors().values()))
        return vs / np.linalg.norm(vs, axis=1, keepdims=True)

    def gram(self) -> np.ndarray:
        vs = np.array(list(self.vectors().values()))
        return vs @ vs.T

    def max_coherence(self) -> float:
        u = self.unit_directions()
        g = np.abs(u @ u.T)
        np.fill_diagonal(g, 0.0)
        return float(g.max()) if len(g) > 1 else 0.0

    def to_json(self) -> dict:
        return {
            "d": self.d,
            "core": {str(c): v.tolist() for c, v in self.core.items()},
            "spurious": {s: v.tolist() for s, v in self.spurious.items()},
            "core_sigma": {str(c): s for c, s in self.core_sigma.items()},
            "spurious_sigma": dict(self.spurious_sigma),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FeatureBank":
        return cls(
            d=int(obj["d"]),
            core={int(c): np.asarray(v, dtype=float) for c, v in obj["core"].items()},
            spurious={s: np.asarray(v, dtype=float) for s, v in obj["spurious"].items()},
            core_sigma={int(c): float(s) for c, s in obj["core_sigma"].items()},
            spurious_sigma={s: float(v) for s, v in obj["spurious_sigma"].items()},
        )


@dataclass(frozen=True)
class GroupSpec:
    class_id: int
    spurious_id: str
    size: int
    is_majority: bool

    @property
    def key(self) -> str:
        return group_key(self.class_id, self.spurious_id)


def group_key(class_id, spurious_id) -> str:
    return f"{class_id}|{spurious_id}"


class Example(NamedTuple):
    id: int
    features: np.ndarray
    label: int
    group: tuple[int, str]
    split: str


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    group: np.ndarray  # index into ``groups``
    groups: list[GroupSpec]
    bank: FeatureBank | None = None
    split: str = "train"
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def classes(self) -> list[int]:
        return sorted({g.class_id for g in self.groups})

    @property
    def label_index(self) -> np.ndarray:
        """Labels mapped to ``0..C-1`` in sorted class order."""
        return np.searchsorted(np.array(self.classes), self.y)

    @property
    def is_majority(self) -> np.ndarray:
        flags = np.array([g.is_majority for g in self.groups], dtype=bool)
        return flags[self.group]

    @property
    def group_keys(self) -> np.ndarray:
        keys = np.array([g.key for g in self.groups], dtype=object)
        return keys[self.group]

    @property
    def spurious(self) -> np.ndarray:
        ids = np.array([g.spurious_id for g in self.groups], dtype=object)
        return ids[self.group]

    def class_counts(self) -> dict[int, int]:
        return {int(c): int(np.sum(self.y == c)) for c in self.classes}

    def group_counts(self) -> dict[str, int]:
        counts = np.bincount(self.group, minlength=len(self.groups))
        return {g.key: int(k) for g, k in zip(self.groups, counts)}

    def example(self, i: int) -> Example:
        g = self.groups[self.group[i]]
        return Example(i, self.X[i], int(self.y[i]), (g.class_id, g.spurious_id), self.split)

    def subset(self, idx: np.ndarray, split: str | None = None) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.X[idx], self.y[idx], self.group[idx], self.groups, self.bank,
                       split or self.split, dict(self.meta))


def build_feature_bank(d, core_magnitudes, spurious_magnitudes, core_sigmas=None,
                       spurious_sigmas=None, rotate=False, seed=0) -> FeatureBank:
    """Place every feature on its own coordinate axis, optionally rotated.

    Core features take the first coordinates in class order, spurious features
    the next ones.  ``rotate=True`` applies one random orthogonal matrix to all
    vectors, which keeps the Gram matrix.
    """
    n_feat = len(core_magnitudes) + len(spurious_magnitudes)
    if d < n_feat:
        raise ValueError(f"d={d} is too small: need d >= {n_feat} (one axis per feature)")
    mags = list(core_magnitudes.values()) + list(spurious_magnitudes.values())
    if min(mags) <= 0:
        raise ValueError("feature magnitudes must be positive")
    basis = np.eye(d)
    if rotate:
        q, r = np.linalg.qr(np.random.default_rng(seed).standard_normal((d, d)))
        basis = (q * np.sign(np.diag(r))).T
    core = {}
    spurious = {}
    axis = 0
    for c, mag in core_magnitudes.items():
        core[int(c)] = float(mag) * basis[axis]
        axis += 1
    for s, mag in spurious_magnitudes.items():
        spurious[str(s)] = float(mag) * basis[axis]
        axis += 1
    core_sigmas = core_sigmas or {}
    spurious_sigmas = spurious_sigmas or {}
    return FeatureBank(
        d=d, core=core, spurious=spurious,
        core_sigma={c: float(core_sigmas.get(c, 0.0)) for c in core},
        spurious_sigma={s: float(spurious_sigmas.get(s, 0.0)) for s in spurious},
    )


def validate_groups(groups: list[GroupSpec]) -> None:
    for cls in {g.class_id for g in groups}:
        members = [g for g in groups if g.class_id == cls]
        maj = [g.size for g in members if g.is_majority]
        mino = [g.size for g in members if not g.is_majority]
        if maj and mino and min(maj) < max(mino):
            raise ValueError(f"class {cls}: a minority group is larger than a majority group")
    for g in groups:
        if g.size <= 0:
            raise ValueError(f"group {g.key} has non-positive size {g.size}")


def generate_synthetic(bank: FeatureBank, groups: list[GroupSpec], seed: int,
                       ambient_sigma: float = 0.0, split: str = "train") -> Dataset:
    """Draw ``size`` examples per group as ``v_c + v_s + xi``.

    ``xi`` has a Gaussian component of scale ``sigma_c`` along the core direction,
    ``sigma_s`` along the spurious direction and ``ambient_sigma`` isotropic noise
    on the orthogonal complement of all feature directions.
    """
    validate_groups(groups)
    for g in groups:
        if g.class_id not in bank.core:
            raise KeyError(f"unknown class id {g.class_id}")
        if g.spurious_id not in bank.spurious:
            raise KeyError(f"unknown spurious id {g.spurious_id!r}")
    rng = np.random.default_rng(seed)
    U = bank.unit_directions()
    xs, gs = [], []
    for gi, g in enumerate(groups):
        vc, vs = bank.core[g.class_id], bank.spurious[g.spurious_id]
        uc, us = vc / np.linalg.norm(vc), vs / np.linalg.norm(vs)
        ac = rng.standard_normal(g.size) * bank.core_sigma[g.class_id]
        as_ = rng.standard_normal(g.size) * bank.spurious_sigma[g.spurious_id]
        x = vc + vs + ac[:, None] * uc + as_[:, None] * us
        if ambient_sigma > 0:
            amb = rng.standard_normal((g.size, bank.d))
            amb -= (amb @ U.T) @ U
            x = x + ambient_sigma * amb
        xs.append(x)
        gs.append(np.full(g.size, gi))
    group = np.concatenate(gs)
    y = np.array([groups[i].class_id for i in group])
    meta = {"seed": seed, "ambient_sigma": ambient_sigma, "source": "synthetic"}
    return Dataset(np.vstack(xs), y, group, list(groups), bank, split, meta)


def binary_groups(majority: int, minority: int, balanced_spurious: bool = False) -> list[GroupSpec]:
    """Two classes (+1, -1) and two spurious features A, B.

    A is carried by the majority of class +1 and B by the majority of class -1.
    ``balanced_spurious`` splits each class evenly between A and B instead.
    """
    if balanced_spurious:
        half = (majority + minority) // 2
        rest = majority + minority - half
        return [GroupSpec(1, "A", rest, True), GroupSpec(1, "B", half, False),
                GroupSpec(-1, "B", rest, True), GroupSpec(-1, "A", half, False)]
    return [GroupSpec(1, "A", majority, True), GroupSpec(1, "B", minority, False),
            GroupSpec(-1, "B", majority, True), GroupSpec(-1, "A", minority, False)]


def build_binary_dataset(d=100, core_magnitude=1.0, spurious_magnitude=2.0, core_sigma=0.1,
                         spurious_sigma=0.1, ambient_sigma=0.0, majority=950, minority=50,
                         balanced_spurious=False, seed=0, rotate=False, split="train") -> Dataset:
    bank = build_feature_bank(
        d, {1: core_magnitude, -1: core_magnitude}, {"A": spurious_magnitude, "B": spurious_magnitude},
        {1: core_sigma, -1: core_sigma}, {"A": spurious_sigma, "B": spurious_sigma},
        rotate=rotate, seed=seed,
    )
    return generate_synthetic(bank, binary_groups(majority, minority, balanced_spurious), seed,
                              ambient_sigma=ambient_sigma, split=split)


def nsr(magnitude: float, sigma: float) -> float:
    """Noise-to-signal ratio ``sigma / magnitude``."""
    if magnitude <= 0:
        raise ValueError(f"magnitude must be positive, got {magnitude}")
    return sigma / magnitude


def check_input_norms(X: np.ndarray, tol: float = 0.5) -> dict:
    """Report how far ``||x||^2 / d`` is from 1 (the near-isotropic input regime)."""
    r = np.sum(X**2, axis=1) / X.shape[1]
    dev = float(np.max(np.abs(r - 1.0)))
    return {"mean_sq_norm_over_d": float(r.mean()), "max_deviation": dev, "ok": dev <= tol}


# ---------------------------------------------------------------- Colored MNIST

DEFAULT_PALETTE = ("#ff0000", "#85ff00", "#00fff3", "#6e00ff", "#ff0018")
N_CMNIST_CLASSES = 5


def hex_to_rgb(color: str) -> np.ndarray:
    color = color.lstrip("#")
    return np.array([int(color[i:i + 2], 16) for i in (0, 2, 4)], dtype=float)


def digit_to_class(digits: np.ndarray) -> np.ndarray:
    return np.asarray(digits) // 2


def stratified_subset(labels: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of a class-stratified random subset of ``size`` examples."""
    labels = np.asarray(labels)
    if size >= len(labels):
        return np.arange(len(labels))
    classes, counts = np.unique(labels, return_counts=True)
    quota = np.floor(counts * size / len(labels)).astype(int)
    for i in np.argsort(-(counts * size / len(labels) - quota))[: size - quota.sum()]:
        quota[i] += 1
    picks = [rng.choice(np.flatnonzero(labels == c), q, replace=False) for c, q in zip(classes, quota)]
    return np.sort(np.concatenate(picks))


def build_cmnist(images, labels, p_corr=0.995, palette=DEFAULT_PALETTE, seed=0,
                 subset_size=None, split="train") -> Dataset:
    """Color MNIST digits so that color is spuriously correlated with the class.

    Digits are paired into 5 classes (``digit // 2``).  In every class exactly
    ``round(p_corr * n_c)`` examples get the class color; the rest get a color
    drawn uniformly from the other four.  Foreground pixels (intensity > 0) are
    tinted multiplicatively, so features are ``gray/255 * rgb/255`` laid out as
    3x28x28 and flattened.
    """
    if not 0 < p_corr <= 1:
        raise ValueError(f"p_corr must be in (0, 1], got {p_corr}")
    if len(palette) != N_CMNIST_CLASSES:
        raise ValueError(f"palette needs {N_CMNIST_CLASSES} colors, got {len(palette)}")
    rng = np.random.default_rng(seed)
    images = np.asarray(images)
    cls_all = digit_to_class(labels)
    if subset_size is not None:
        keep = stratified_subset(cls_all, subset_size, rng)
        images, cls_all = images[keep], cls_all[keep]
    n = len(cls_all)
    color = cls_all.copy()
    for c in range(N_CMNIST_CLASSES):
        members = np.flatnonzero(cls_all == c)
        n_min = len(members) - int(round(p_corr * len(members)))
        flip = rng.choice(members, n_min, replace=False)
        others = np.array([k for k in range(N_CMNIST_CLASSES) if k != c])
        color[flip] = others[rng.integers(0, len(others), n_min)]
    rgb = np.array([hex_to_rgb(h) for h in palette]) / 255.0
    gray = images.reshape(n, 1, 28 * 28).astype(float) / 255.0
    gray = np.where(gray > 0, gray, 0.0)
    X = (gray * rgb[color][:, :, None]).reshape(n, -1)

    pairs = sorted(set(zip(cls_all.tolist(), color.tolist())))
    index = {p: i for i, p in enumerate(pairs)}
    sizes = {p: 0 for p in pairs}
    for p in zip(cls_all.tolist(), color.tolist()):
        sizes[p] += 1
    groups = [GroupSpec(c, str(s), sizes[(c, s)], c == s) for c, s in pairs]
    group = np.array([index[p] for p in zip(cls_all.tolist(), color.tolist())])
    meta = {"source": "cmnist", "seed": seed, "p_corr": p_corr, "palette": list(palette)}
    return Dataset(X, cls_all.astype(np.int64), group, groups, None, split, meta)


# ---------------------------------------------------------------- export

SPDS_MAGIC = b"SPDS"
SPDS_VERSION = 1


def save_dataset(ds: Dataset, directory: str | Path, stem: str = "dataset") -> tuple[Path, Path]:
    """Write ``<stem>.json`` (metadata) and ``<stem>.spds`` (tensors)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    classes = ds.classes
    meta = {
        "split": ds.split,
        "n": ds.n,
        "d": ds.d,
        "classes": classes,
        "groups": [{"class_id": g.class_id, "spurious_id": g.spurious_id, "size": g.size,
                    "is_majority": g.is_majority} for g in ds.groups],
        "bank": ds.bank.to_json() if ds.bank is not None else None,
        "meta": ds.meta,
    }
    jpath, bpath = directory / f"{stem}.json", directory / f"{stem}.spds"
    jpath.write_text(json.dumps(meta, indent=2, sort_keys=True))
    with open(bpath, "wb") as fh:
        fh.write(SPDS_MAGIC)
        fh.write(struct.pack("<IQQ", SPDS_VERSION, ds.n, ds.d))
        fh.write(np.ascontiguousarray(ds.X, dtype="<f8").tobytes())
        fh.write(ds.label_index.astype("<u4").tobytes())
        fh.write(ds.group.astype("<u4").tobytes())
    return jpath, bpath


def read_spds(data: bytes) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if data[:4] != SPDS_MAGIC:
        raise ValueError("not an SPDS file")
    version, n, d = struct.unpack("<IQQ", data[4:24])
    if version != SPDS_VERSION:
        raise ValueError(f"unsupported SPDS version {version}")
    need = 24 + 8 * n * d + 8 * n
    if len(data) != need:
        raise ValueError(f"SPDS payload is {len(data)} bytes, expected {need}")
    off = 24
    X = np.frombuffer(data, "<f8", n * d, off).reshape(n, d).astype(float)
    off += 8 * n * d
    labels = np.frombuffer(data, "<u4", n, off).astype(np.int64)
    groups = np.frombuffer(data, "<u4", n, off + 4 * n).astype(np.int64)
    return X, labels, groups


def load_dataset(directory: str | Path, stem: str = "dataset") -> Dataset:
    directory = Path(directory)
    meta = json.loads((directory / f"{stem}.json").read_text())
    X, labels, group = read_spds((directory / f"{stem}.spds").read_bytes())
    y = np.array(meta["classes"])[labels]
    groups = [GroupSpec(int(g["class_id"]), str(g["spurious_id"]), int(g["size"]), bool(g["is_majority"]))
              for g in meta["groups"]]
    bank = FeatureBank.from_json(meta["bank"]) if meta["bank"] else None
    return Dataset(X, y, group, groups, bank, meta["split"], meta["meta"])
