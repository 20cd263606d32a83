"""Colored MNIST comparison of ERM, SPARE and the baselines over several seeds.

    python scripts/run_cmnist.py [--strategies erm spare] [--seeds 0 1 2] [--mnist-dir DIR]
"""
import argparse
import json
from pathlib import Path

import numpy as np

from sparelab.config import load_config
from sparelab.pipeline import train_run

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/cmnist"))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--strategies", nargs="+", default=["erm", "spare"])
    ap.add_argument("--mnist-dir", default="", help="directory with the official IDX files")
    ap.add_argument("--subset", type=int, default=None)
    args = ap.parse_args()
    summary = {}
    for strategy in args.strategies:
        cfg = load_config(CONFIGS / ("cmnist_spare.ini" if strategy == "spare" else "cmnist_erm.ini"))
        cfg.run.strategy = strategy
        if args.mnist_dir:
            cfg.dataset.mnist_dir = args.mnist_dir
        if args.subset:
            cfg.dataset.subset = args.subset
        worst, avg = [], []
        for seed in args.seeds:
            cfg.run.seed = seed
            res = train_run(cfg.validate(), args.out / strategy / f"seed{seed}", keep_data=False)
            rep = res.final["test"]
            worst.append(rep.worst_group_accuracy)
            avg.append(rep.average_accuracy)
            print(f"{strategy} seed={seed} worst_group={rep.worst_group_accuracy:.4f} avg={rep.average_accuracy:.4f}")
        summary[strategy] = {"worst_group_mean": float(np.mean(worst)), "worst_group_std": float(np.std(worst)),
                             "avg_mean": float(np.mean(avg)), "avg_std": float(np.std(avg))}
        print(f"{strategy}: worst_group {np.mean(worst):.4f} +- {np.std(worst):.4f}, "
              f"avg {np.mean(avg):.4f} +- {np.std(avg):.4f}")
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "summary.json").write_text(json.dumps(summary, indent=1))


if __name__ == "__main__":
    main()
