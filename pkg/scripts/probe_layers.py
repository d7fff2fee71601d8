"""Zero-shot retrieval from mean-pooled compression states at every layer,
before and after compression pretraining. Separates what pretraining does to
the representation from what contrastive training later recovers.

    python scripts/probe_layers.py --config configs/toy.toml --steps 1000
"""

import argparse

import numpy as np

from compemb import tensor as T
from compemb.analysis import precision_at_1
from compemb.config import load_config
from compemb.model import copy_params, forward, init_params, pack_payloads
from compemb.pipeline import pretrain_records, retrieval_sets
from compemb.pretrain import Pretrainer


def pooled_by_layer(params, cfg, payloads):
    tokens, masks, starts = pack_payloads(cfg, payloads)
    with T.no_grad():
        out = forward(params, cfg, tokens, masks)
    k = cfg.n_comp_tokens
    states = [h.data for h in out.hidden] + [out.final.data]
    return [np.stack([s[b, st : st + k].mean(0) for b, st in enumerate(starts)]) for s in states]


def probe(params, cfg, evals, tag):
    names = [f"layer{i}" for i in range(cfg.n_layers + 1)] + ["final"]
    for task in ("i2i", "t2i", "i2t", "class"):
        scores = np.zeros(len(names))
        for pairs in evals[task]:
            q = pooled_by_layer(params, cfg, [p.query for p in pairs])
            d = pooled_by_layer(params, cfg, [p.positive for p in pairs])
            scores += [precision_at_1(a, b, np.arange(len(pairs))) for a, b in zip(q, d)]
        scores /= len(evals[task])
        print(f"{tag:>9} {task:>5} " + " ".join(f"{n}={s:.3f}" for n, s in zip(names, scores)))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/toy.toml")
    ap.add_argument("--steps", type=int, default=1000)
    args = ap.parse_args()
    rc = load_config(args.config)
    _, evals = retrieval_sets(rc)
    base = init_params(rc.model, rc.sub_seed("init"))
    probe(base, rc.model, evals, "base")
    pre = copy_params(base)
    Pretrainer(pre, rc.model, rc.pretrain).train(pretrain_records(rc), steps=args.steps)
    probe(pre, rc.model, evals, "pretrain")


if __name__ == "__main__":
    main()
