"""Train and score the ArcRank / sampling-mode / conditioning variants.

    python3 scripts/run_ablation.py --out runs/ablation [--variants full,no_arcrank]
"""

import argparse
import logging
from pathlib import Path

from delta_lfm import pipeline as pl
from delta_lfm.config import ExperimentConfig, load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path)
    ap.add_argument("--out", type=Path, default=Path("runs/ablation"))
    ap.add_argument("--variants", help=f"comma-separated subset of {','.join(pl.ABLATIONS)}")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    cfg = pl.override(cfg, {"out_dir": str(args.out)})
    rows = pl.ablate(cfg, pl.RunPaths(args.out), args.variants.split(",") if args.variants else None)
    print(f"{'variant':<14}{'delta-RMAE':>12}{'arc':>9}{'order':>8}")
    for r in rows:
        print(f"{r['variant']:<14}{r['delta_rmae_mean']:>12.4f}{r['arc_distance']:>9.3f}{r['order_fraction']:>8.1%}")


if __name__ == "__main__":
    main()
