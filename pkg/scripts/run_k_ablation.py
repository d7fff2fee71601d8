"""Sweep the number of compression tokens and dump the comparison table
plus one token-similarity matrix per K.

    python scripts/run_k_ablation.py --config configs/toy.toml --k 8 16 32 64
"""

import argparse
import logging
from pathlib import Path

from compemb.analysis import ablate_k, write_ablation_csv, write_similarity_csv
from compemb.config import load_config


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/toy.toml")
    ap.add_argument("--k", type=int, nargs="+", default=[8, 16, 32, 64])
    ap.add_argument("--pretrain-steps", type=int, default=300)
    ap.add_argument("--contrastive-steps", type=int, default=80)
    ap.add_argument("--out", default="runs/reports/k_ablation")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    rc = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = ablate_k(rc, args.k, {"pretrain_steps": args.pretrain_steps, "contrastive_steps": args.contrastive_steps})
    write_ablation_csv(out / "ablation_k.csv", rows)
    for r in rows:
        label = "baseline" if r.k is None else f"K={r.k}"
        print(f"{label:>9}  " + "  ".join(f"{t}={v:.3f}" for t, v in sorted(r.p_at_1.items())) + f"  avg={r.average:.3f}")
        if r.similarity is not None:
            write_similarity_csv(out / f"similarity_k{r.k}.csv", r.similarity, k_label=r.k)


if __name__ == "__main__":
    main()
