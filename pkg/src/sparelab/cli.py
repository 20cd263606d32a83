"""Command-line entry point: ``sparelab {generate,train,infer-groups,evaluate,theory}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .datagen import save_dataset

log = logging.getLogger("sparelab")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3


def _load(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig().validate()
    if args.seed is not None:
        cfg.run.seed = args.seed
    if args.strict_determinism:
        cfg.run.strict_determinism = True
    return cfg


def _group_table(ds) -> str:
    lines = [f"{'group':>12} {'size':>7} {'majority':>9}"]
    for key, size in ds.group_counts().items():
        g = next(g for g in ds.groups if g.key == key)
        lines.append(f"{key:>12} {size:>7} {str(g.is_majority):>9}")
    for c, n_c in ds.class_counts().items():
        maj = sum(s for k, s in ds.group_counts().items()
                  if next(g for g in ds.groups if g.key == k).is_majority and k.split("|")[0] == str(c))
        lines.append(f"class {c}: n={n_c} majority fraction={maj / n_c:.4f}")
    return "\n".join(lines)


def cmd_generate(cfg: RunConfig, out: Path) -> int:
    from .pipeline import build_datasets, prepare_run_dir

    out = prepare_run_dir(cfg, out, "generate")
    train_ds, test_ds = build_datasets(cfg)
    for ds in (train_ds, test_ds):
        save_dataset(ds, out / "data", ds.split)
        print(f"[{ds.split}] n={ds.n} d={ds.d}")
        print(_group_table(ds))
    return EXIT_OK


def _print_final(result) -> None:
    for split, rep in result.final.items():
        print(f"{split}: avg_acc={rep.average_accuracy:.4f} worst_group_acc={rep.worst_group_accuracy:.4f}")
    if result.clusters is not None:
        for c, cc in result.clusters.classes.items():
            print(f"class {c}: k={cc.k} mean_silhouette={cc.mean_silhouette:.3f} lambda={cc.lam} "
                  f"sizes={cc.sizes().tolist()}")


def cmd_train(cfg: RunConfig, out: Path) -> int:
    from .pipeline import train_run

    result = train_run(cfg, out)
    _print_final(result)
    return EXIT_OK


def cmd_infer_groups(cfg: RunConfig, out: Path) -> int:
    from .inference import write_groups_json
    from .model import save_checkpoint
    from .pipeline import build_datasets, prepare_run_dir, stage1, strict_mode
    from .sampling import spare_weights, write_plan_json

    out = prepare_run_dir(cfg, out, "infer-groups")
    with strict_mode(cfg.run.strict_determinism):
        train_ds, _ = build_datasets(cfg)
        net, clusters = stage1(cfg, train_ds)
        plan = spare_weights(clusters, class_mix=cfg.spare.class_mix, normalization=cfg.spare.normalization)
    (out / "checkpoints").mkdir(exist_ok=True)
    save_checkpoint(net, out / "checkpoints" / "stage1.spnn")
    write_groups_json(clusters, out / "groups.json", plan.weights)
    write_plan_json(plan, out / "plan.json")
    from .metrics import majority_in_minority, minority_in_majority, minority_recall

    inferred = clusters.inferred_minority()
    true = np.flatnonzero(~train_ds.is_majority)
    for c, cc in clusters.classes.items():
        print(f"class {c}: k={cc.k} mean_silhouette={cc.mean_silhouette:.3f} lambda={cc.lam} "
              f"sizes={cc.sizes().tolist()}")
    print(f"minority_recall={minority_recall(inferred, true)} "
          f"minority_in_majority={minority_in_majority(inferred, true)} "
          f"majority_in_minority={majority_in_minority(inferred, true, train_ds.n)}")
    return EXIT_OK


def cmd_evaluate(run_dir: Path, split: str) -> int:
    from .pipeline import evaluate_run

    rep = evaluate_run(run_dir, split)
    (run_dir / f"evaluate_{split}.json").write_text(json.dumps(rep.to_json(), indent=1, sort_keys=True))
    print(f"{split}: avg_acc={rep.average_accuracy:.4f} worst_group_acc={rep.worst_group_accuracy:.4f} "
          f"adjusted_avg_acc={rep.adjusted_average_accuracy}")
    return EXIT_OK


def run_theory(cfg: RunConfig, out: Path | None) -> list[tuple[str, str, bool]]:
    """Run the configured checks; returns (check, summary, passed) triples."""
    from .model import TrainConfig
    from .pipeline import build_datasets
    from .theory import (NetConfig, TheoryConfig, assumption_check, default_probe_steps, early_window,
                         phase1_check, phase2_domination, separability_trace, write_assumption_csv,
                         write_probe_csv, write_separability_csv)

    th = cfg.theory
    ds, _ = build_datasets(cfg)
    net_cfg = NetConfig(cfg.model.m, cfg.model.activation, th.net_seed)
    tr_cfg = TrainConfig(eta=cfg.train.eta, seed=cfg.run.seed)
    tcfg = TheoryConfig(th.alpha, None, th.c2, th.slope_tolerance, th.separability_step)
    theory_dir = None
    if out is not None:
        theory_dir = out / "theory"
        theory_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    if "phase1" in th.checks:
        rep = phase1_check(ds, net_cfg, tr_cfg, tcfg)
        worst = max(rep.relative_errors.values())
        core = max(v for k, v in rep.relative_errors.items() if k.startswith("core"))
        spur = max(v for k, v in rep.relative_errors.items() if k.startswith("spurious"))
        ok = worst <= th.slope_tolerance
        lines.append(("phase1", f"slope_rel_err core={core:.4f}, spurious={spur:.4f}", ok))
        if theory_dir:
            write_probe_csv(rep, theory_dir / "phase1_probes.csv")
    if "separability" in th.checks:
        step = th.separability_step or early_window(ds.d, cfg.train.eta)
        steps = sorted(set(default_probe_steps(ds.d, cfg.train.eta)) | {step})
        rows = separability_trace(ds, net_cfg, tr_cfg, steps)
        at = [r for r in rows if r[1] == step]
        score = min(r[2] for r in at)
        recall = min(r[3] for r in at)
        ok = score >= th.separability_min and recall >= th.separability_min
        lines.append(("separability", f"step={step} score={score:.4f} minority_recall={recall:.4f}", ok))
        if theory_dir:
            write_separability_csv(rows, theory_dir / "separability.csv")
    if "phase2" in th.checks:
        res = phase2_domination(ds, net_cfg, tr_cfg, tcfg)
        ok = (res.ratio >= th.domination_min and res.core_output <= res.bound + th.bound_slack
              and res.closed_form_ratio >= th.domination_min)
        lines.append(("phase2", f"T={res.T} ratio={res.ratio:.3f} core_output={res.core_output:.4f} "
                                f"bound={res.bound:.4f} closed_form_ratio={res.closed_form_ratio:.3f}", ok))
        if theory_dir:
            with open(theory_dir / "phase2.csv", "w") as fh:
                fh.write("class,f_core,f_spurious,ratio,closed_core,closed_spurious,closed_ratio\n")
                for c, p in res.per_class.items():
                    fh.write(",".join([str(c)] + [repr(float(p[k])) for k in
                             ("f_core", "f_spurious", "ratio", "closed_core", "closed_spurious", "closed_ratio")]) + "\n")
    if "assumption" in th.checks:
        rep = assumption_check(ds, net_cfg, tr_cfg, th.assumption_steps)
        gaps = (rep.train_gap.max(), rep.core_gap.max(), rep.spurious_gap.max())
        ok = max(gaps) <= th.gap_tolerance
        lines.append(("assumption", "max_gap train={:.2e} core={:.2e} spurious={:.2e}".format(*gaps), ok))
        if theory_dir:
            write_assumption_csv(rep, theory_dir / "assumption.csv")
    if theory_dir:
        (theory_dir / "summary.txt").write_text(
            "".join(f"{name}: {text} {'PASS' if ok else 'FAIL'}\n" for name, text, ok in lines))
    return lines


def cmd_theory(cfg: RunConfig, out: Path | None) -> int:
    from .pipeline import prepare_run_dir, strict_mode

    if out is not None:
        prepare_run_dir(cfg, out, "theory")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        with strict_mode(cfg.run.strict_determinism):
            lines = run_theory(cfg, out)
    for w in caught:
        print(f"warning: {w.message}")
    for name, text, ok in lines:
        print(f"{name}: {text} {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if all(ok for *_, ok in lines) else EXIT_CHECK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI run configuration")
    common.add_argument("--out", type=Path, help="run directory")
    common.add_argument("--seed", type=int, help="overrides run.seed")
    common.add_argument("--strict-determinism", action="store_true",
                        help="single-threaded numerics for byte-identical reruns")
    p = argparse.ArgumentParser(prog="sparelab", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="materialize train/test datasets")
    sub.add_parser("train", parents=[common], help="train with the configured strategy")
    sub.add_parser("infer-groups", parents=[common], help="stage 1 only: cluster early outputs")
    ev = sub.add_parser("evaluate", parents=[common], help="recompute metrics of a run directory")
    ev.add_argument("--split", default="test", choices=["train", "test"])
    sub.add_parser("theory", parents=[common], help="numerical checks of the early-dynamics results")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "evaluate":
            if args.out is None:
                raise ConfigError("evaluate needs --out pointing at a run directory")
            return cmd_evaluate(args.out, args.split)
        cfg = _load(args)
        if args.command in ("generate", "train", "infer-groups") and args.out is None:
            raise ConfigError(f"{args.command} needs --out")
        if args.command == "generate":
            return cmd_generate(cfg, args.out)
        if args.command == "train":
            return cmd_train(cfg, args.out)
        if args.command == "infer-groups":
            return cmd_infer_groups(cfg, args.out)
        return cmd_theory(cfg, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - surfaced with context and a distinct exit code
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
