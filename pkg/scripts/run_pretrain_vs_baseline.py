"""Compression-pretrained init vs contrastive-only baseline, several seeds.

    python scripts/run_pretrain_vs_baseline.py --config configs/toy.toml --seeds 0 1 2
"""

import argparse
import csv
import dataclasses
import logging
from pathlib import Path

import numpy as np

from compemb.config import load_config
from compemb.pipeline import run_pipeline


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/toy.toml")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--pretrain-steps", type=int)
    ap.add_argument("--contrastive-steps", type=int)
    ap.add_argument("--out", default="runs/reports/pretrain_vs_baseline.csv")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    base_rc = load_config(args.config)
    budget = {k: v for k, v in (("pretrain_steps", args.pretrain_steps), ("contrastive_steps", args.contrastive_steps)) if v is not None}
    rows = []
    for seed in args.seeds:
        rc = dataclasses.replace(base_rc, seed=seed)
        for variant, pretrain in (("pretrained", True), ("baseline", False)):
            p1 = run_pipeline(rc, pretrain=pretrain, budget=budget).p_at_1
            rows.append({"seed": seed, "variant": variant, **p1, "average": float(np.mean(list(p1.values())))})
            logging.info("seed %d %s %s", seed, variant, {k: round(v, 3) for k, v in p1.items()})

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    for variant in ("pretrained", "baseline"):
        sel = [r for r in rows if r["variant"] == variant]
        print(variant, {k: round(float(np.mean([r[k] for r in sel])), 3) for k in sel[0] if k not in ("seed", "variant")})


if __name__ == "__main__":
    main()
