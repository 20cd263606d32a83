"""Run the early-dynamics checks on the bundled synthetic configs.

    python scripts/run_theory.py [--out runs/theory] [--seeds 0 1 2]
"""
import argparse
from pathlib import Path

from sparelab.cli import run_theory
from sparelab.config import load_config

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/theory"))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--configs", nargs="+", default=["reference_synthetic", "balanced_control", "domination"])
    args = ap.parse_args()
    for name in args.configs:
        cfg = load_config(CONFIGS / f"{name}.ini")
        for seed in args.seeds:
            cfg.run.seed = seed
            cfg.theory.net_seed = seed + 1
            out = args.out / name / f"seed{seed}"
            for check, text, ok in run_theory(cfg, out):
                print(f"{name} seed={seed} {check}: {text} {'PASS' if ok else 'FAIL'}")


if __name__ == "__main__":
    main()
