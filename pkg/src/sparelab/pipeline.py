"""Experiment orchestration: datasets from a RunConfig, strategy training, run directories."""
from __future__ import annotations

import json
import math
import platform
from contextlib import contextmanager, nullcontext
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, dump_config
from .datagen import (Dataset, GroupSpec, binary_groups, build_binary_dataset, build_cmnist,
                      generate_synthetic, load_dataset, save_dataset, stratified_subset)
from .idx import load_bundled_mnist, load_mnist
from .inference import ClusterResult, infer_groups, write_groups_json
from .metrics import (EvalReport, add_inference_quality, cramers_v, evaluate_predictions,
                      write_metrics_csv, write_metrics_json)
from .model import (TrainConfig, TwoLayerNet, init_symmetric, load_checkpoint, predict_label,
                    save_checkpoint, train)
from .sampling import (SamplingPlan, class_balance_plan, group_balance_plan, jtt_upsample,
                       misclassified, spare_weights, train_gdro, train_with_sampler,
                       upsampled_batches, write_plan_json)


# ---------------------------------------------------------------- datasets

def load_digits(cfg: RunConfig):
    """(train_images, train_labels, test_images, test_labels) from IDX files or the bundled sample."""
    ds = cfg.dataset
    if ds.mnist_dir:
        tr_x, tr_y = load_mnist(ds.mnist_dir, "train")
        te_x, te_y = load_mnist(ds.mnist_dir, "test")
        return tr_x, tr_y, te_x, te_y
    images, labels = load_bundled_mnist()
    rng = np.random.default_rng([cfg.run.seed, 0xD1])
    test = stratified_subset(labels, int(round(ds.test_fraction * len(labels))), rng)
    train_mask = np.ones(len(labels), bool)
    train_mask[test] = False
    return images[train_mask], labels[train_mask], images[test], labels[test]


def build_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    ds, seed = cfg.dataset, cfg.run.seed
    if ds.source == "synthetic":
        train_ds = build_binary_dataset(ds.d, ds.core_magnitude, ds.spurious_magnitude, ds.core_sigma,
                                        ds.spurious_sigma, ds.ambient_sigma, ds.majority, ds.minority,
                                        ds.balanced_spurious, seed, ds.rotate, "train")
        groups = [GroupSpec(g.class_id, g.spurious_id, ds.test_per_group, g.is_majority)
                  for g in train_ds.groups]
        test_ds = generate_synthetic(train_ds.bank, groups, seed + 1_000_003, ds.ambient_sigma, "test")
        return train_ds, test_ds
    tr_x, tr_y, te_x, te_y = load_digits(cfg)
    train_ds = build_cmnist(tr_x, tr_y, ds.p_corr, ds.palette, seed, ds.subset, "train")
    test_ds = build_cmnist(te_x, te_y, ds.test_p_corr, ds.palette, seed + 1, None, "test")
    return train_ds, test_ds


def output_dim(cfg: RunConfig, ds: Dataset) -> int:
    if cfg.model.o:
        return cfg.model.o
    return 1 if len(ds.classes) == 2 and cfg.train.loss == "l2" else len(ds.classes)


def targets(ds: Dataset, o: int) -> np.ndarray:
    """Training targets and prediction space: +-1 for a scalar head, class indices otherwise."""
    if o == 1:
        if set(np.unique(ds.y)) - {-1, 1}:
            raise ValueError("a scalar head needs labels in {-1, +1}")
        return ds.y.astype(np.int64)
    return ds.label_index


# ---------------------------------------------------------------- evaluation

def train_group_sizes(train_ds: Dataset) -> dict[str, int]:
    return train_ds.group_counts()


def evaluate(net: TwoLayerNet, ds: Dataset, sizes: dict[str, int]) -> EvalReport:
    y = targets(ds, net.o)
    preds = predict_label(net, ds.X)
    keys = ds.group_keys
    sizes = {k: sizes.get(k, 0) for k in np.unique(keys)}
    if sum(sizes.values()) == 0:
        sizes = None
    return evaluate_predictions(preds, y, keys, sizes)


@contextmanager
def strict_mode(enabled: bool):
    """Single-threaded BLAS so floating-point reductions run in a fixed order."""
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


# ---------------------------------------------------------------- training

@dataclass
class RunResult:
    net: TwoLayerNet
    rows: list = field(default_factory=list)  # (epoch, split, EvalReport)
    final: dict = field(default_factory=dict)  # split -> EvalReport
    clusters: ClusterResult | None = None
    plan: SamplingPlan | None = None
    stage1: TwoLayerNet | None = None
    extra: dict = field(default_factory=dict)


def _train_config(cfg: RunConfig, n: int, epochs: int | None = None) -> TrainConfig:
    tr = cfg.train
    batch = tr.batch_size or None
    epochs = tr.epochs if epochs is None else epochs
    steps = tr.steps
    per_epoch = math.ceil(n / batch) if batch else 1
    return TrainConfig(eta=tr.eta, steps=steps, epochs=epochs, batch_size=batch, loss=tr.loss,
                       seed=cfg.run.seed, weight_decay=tr.weight_decay, parametrization=tr.parametrization,
                       record_every=per_epoch if batch else max(1, steps // 20))


def _fresh_net(cfg: RunConfig, ds: Dataset, salt: int = 0) -> TwoLayerNet:
    return init_symmetric(cfg.model.m, ds.d, output_dim(cfg, ds), cfg.model.activation, cfg.run.seed + salt)


def stage1(cfg: RunConfig, train_ds: Dataset) -> tuple[TwoLayerNet, ClusterResult]:
    """T_init plain ERM epochs, then per-class clustering of the outputs."""
    net = _fresh_net(cfg, train_ds)
    y = targets(train_ds, net.o)
    tc = _train_config(cfg, train_ds.n, epochs=cfg.spare.T_init)
    if tc.batch_size is None:
        tc.steps = cfg.spare.T_init
    net, _ = train(net, train_ds.X, y, tc)
    sp = cfg.spare
    clusters = infer_groups(net, train_ds.X, y, sp.layer_tag, sp.k_range, cfg.run.seed, sp.output_norm,
                            sp.lambda_override, sp.T_init)
    return net, clusters


def true_minority(ds: Dataset) -> np.ndarray:
    return np.flatnonzero(~ds.is_majority)


def run_strategy(cfg: RunConfig, train_ds: Dataset, test_ds: Dataset) -> RunResult:
    strategy = cfg.run.strategy
    sizes = train_group_sizes(train_ds)
    rows = []
    result = RunResult(net=None)

    def cb(t, net):
        tc_every = tc.record_every
        epoch = t // tc_every if tc.batch_size else t
        rows.append((epoch, "train", evaluate(net, train_ds, sizes)))
        rows.append((epoch, "test", evaluate(net, test_ds, sizes)))

    tc = _train_config(cfg, train_ds.n)
    if strategy in ("spare", "jtt") or (strategy == "gdro" and cfg.spare.gdro_groups == "inferred"):
        result.stage1, result.clusters = stage1(cfg, train_ds)
        stage_rep = add_inference_quality(evaluate(result.stage1, train_ds, sizes),
                                          result.clusters.inferred_minority(), true_minority(train_ds),
                                          train_ds.n)
        result.extra["stage1"] = stage_rep.to_json()

    start = (_fresh_net(cfg, train_ds) if cfg.spare.reinit or result.stage1 is None
             else result.stage1.copy())
    y = targets(train_ds, start.o)
    if strategy == "erm":
        net, _ = train(start, train_ds.X, y, tc, callback=cb)
    elif strategy in ("cb", "gb", "spare"):
        if strategy == "cb":
            plan = class_balance_plan(train_ds.y)
        elif strategy == "gb":
            plan = group_balance_plan(train_ds.group)
        else:
            plan = spare_weights(result.clusters, class_mix=cfg.spare.class_mix,
                                 normalization=cfg.spare.normalization)
        result.plan = plan
        net, _ = train_with_sampler(start, train_ds.X, y, plan, tc, callback=cb)
    elif strategy == "jtt":
        if cfg.spare.jtt_flags == "misclassified":
            flagged = misclassified(result.stage1, train_ds.X, y)
        else:
            flagged = result.clusters.inferred_minority()
        index_list = jtt_upsample(train_ds.n, flagged, cfg.spare.jtt_factor)
        result.extra["jtt"] = {"flagged": int(len(flagged)), "list_length": int(len(index_list))}
        tc.record_every = math.ceil(len(index_list) / tc.batch_size)
        batches = upsampled_batches(index_list, tc.batch_size, tc.epochs, tc.seed)
        net, _ = train(start, train_ds.X, y, tc, batches=batches, callback=cb)
    elif strategy == "gdro":
        gids = result.clusters.inferred_groups() if result.clusters is not None else train_ds.group
        net, q, _ = train_gdro(start, train_ds.X, y, gids, tc, cfg.spare.gdro_eta_q, callback=cb)
        result.extra["gdro_q"] = [float(v) for v in q]
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    result.net = net
    result.rows = rows
    result.final = {"train": evaluate(net, train_ds, sizes), "test": evaluate(net, test_ds, sizes)}
    if result.clusters is not None:
        add_inference_quality(result.final["train"], result.clusters.inferred_minority(),
                              true_minority(train_ds), train_ds.n)
    result.final["train"].cramers_v = {"spurious_vs_class": cramers_v(train_ds.spurious, train_ds.y)}
    result.final["test"].cramers_v = {"spurious_vs_class": cramers_v(test_ds.spurious, test_ds.y)}
    return result


# ---------------------------------------------------------------- run directories

def manifest(cfg: RunConfig, command: str) -> dict:
    import scipy

    return {
        "command": command,
        "seed": cfg.run.seed,
        "strategy": cfg.run.strategy,
        "strict_determinism": cfg.run.strict_determinism,
        "rng_streams": {"data": cfg.run.seed, "init": cfg.run.seed, "batches": [cfg.run.seed, "0x5F/0xA3/0x77"]},
        "versions": {"sparelab": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
    }


def prepare_run_dir(cfg: RunConfig, out: str | Path, command: str) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.snapshot").write_text(dump_config(cfg))
    (out / "manifest.json").write_text(json.dumps(manifest(cfg, command), indent=1, sort_keys=True))
    return out


def save_data(train_ds: Dataset, test_ds: Dataset, out: Path) -> None:
    save_dataset(train_ds, out / "data", "train")
    save_dataset(test_ds, out / "data", "test")


def write_run(result: RunResult, out: Path) -> None:
    (out / "checkpoints").mkdir(exist_ok=True)
    save_checkpoint(result.net, out / "checkpoints" / "final.spnn")
    if result.stage1 is not None:
        save_checkpoint(result.stage1, out / "checkpoints" / "stage1.spnn")
    if result.clusters is not None:
        weights = result.plan.weights if result.plan is not None and result.plan.strategy == "spare" else None
        write_groups_json(result.clusters, out / "groups.json", weights)
    if result.plan is not None:
        write_plan_json(result.plan, out / "plan.json")
    write_metrics_csv(result.rows, out / "metrics.csv")
    write_metrics_json(result.final, out / "metrics.json", result.extra)


def train_run(cfg: RunConfig, out: str | Path | None = None, keep_data: bool = True) -> RunResult:
    with strict_mode(cfg.run.strict_determinism):
        train_ds, test_ds = build_datasets(cfg)
        result = run_strategy(cfg, train_ds, test_ds)
    if out is not None:
        out = prepare_run_dir(cfg, out, "train")
        if keep_data:
            save_data(train_ds, test_ds, out)
        write_run(result, out)
    return result


def evaluate_run(run_dir: str | Path, split: str = "test") -> EvalReport:
    """Recompute metrics from a run directory's checkpoint and stored datasets."""
    run_dir = Path(run_dir)
    ckpt = run_dir / "checkpoints" / "final.spnn"
    if not ckpt.exists():
        raise FileNotFoundError(f"no checkpoint at {ckpt}")
    net = load_checkpoint(ckpt)
    train_ds = load_dataset(run_dir / "data", "train")
    ds = train_ds if split == "train" else load_dataset(run_dir / "data", split)
    return evaluate(net, ds, train_group_sizes(train_ds))
