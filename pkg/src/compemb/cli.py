"""Command-line entry point: ``compemb <command> --config run.toml [flags]``.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure.
"""

from __future__ import annotations

import os

# single-threaded BLAS keeps reductions, and so logged losses, reproducible
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import FORMATS, TASKS

log = logging.getLogger("compemb")

ANALYSES = ("sim", "pca", "lossdist", "ablate-k")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="compemb", description="Compression-token pretraining and contrastive embedding experiments.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def cmd(name, help_):
        c = sub.add_parser(name, help=help_, description=help_)
        c.add_argument("--config", required=name != "grad-check", help="run config (TOML)")
        c.add_argument("-v", "--verbose", action="store_true", help="debug logging")
        return c

    c = cmd("gen-data", "generate the pretraining dialogue corpus")
    c.add_argument("--format", choices=FORMATS, help="dialogue format (data.format)")
    c.add_argument("--count", type=int, help="number of images (data.n_pretrain)")
    c.add_argument("--seed", type=int, help="master seed")

    c = cmd("pretrain", "compression-token pretraining")
    c.add_argument("--loss", choices=("ntp", "kl"), help="objective (pretrain.loss_kind)")
    c.add_argument("--resume", action="store_true", help="continue from the saved pretrain checkpoint")
    c.add_argument("--steps", type=int, help="total optimizer steps (pretrain.steps)")
    c.add_argument("--lr", type=float, help="learning rate (pretrain.lr)")

    c = cmd("contrast", "contrastive fine-tuning")
    c.add_argument("--init", default=None, help="checkpoint path, or 'fresh' for an untrained model (default: pretrain checkpoint)")
    c.add_argument("--steps", type=int, help="optimizer steps (contrastive.steps)")
    c.add_argument("--lr", type=float, help="learning rate (contrastive.lr)")

    c = cmd("eval", "held-out P@1 per retrieval task")
    c.add_argument("--checkpoint", help="checkpoint to evaluate (default: contrast checkpoint)")
    c.add_argument("--task", action="append", choices=TASKS, help="task to evaluate; repeatable (default: all configured)")

    c = cmd("analyze", "diagnostic analyses written as CSV")
    c.add_argument("--kind", required=True, choices=ANALYSES, help="analysis to run")
    c.add_argument("--checkpoint", help="checkpoint for sim/lossdist (defaults: contrast / pretrain)")
    c.add_argument("--record", type=int, default=0, help="dataset record index for lossdist")
    c.add_argument("--samples", type=int, default=100, help="held-out payloads for sim/pca")
    c.add_argument("--k-values", default="8,16,32,64", help="comma-separated K list for ablate-k")
    c.add_argument("--pretrain-steps", type=int, help="per-run pretrain budget for ablate-k")
    c.add_argument("--contrastive-steps", type=int, help="per-run contrastive budget for ablate-k")

    cmd("grad-check", "finite-difference checks over all primitives and a small model")
    return p


def full_help() -> str:
    """Top-level help followed by every subcommand's help."""
    parser = build_parser()
    parts = [parser.format_help()]
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    parts += [p.format_help() for p in sub.choices.values()]
    return "\n".join(parts)


def _override(obj, field: str, value, section: str, overrides: list):
    if value is None:
        return obj
    old = getattr(obj, field)
    overrides.append(f"{section}.{field}={value!r} (config: {old!r})")
    return dataclasses.replace(obj, **{field: value})


def _echo(rc, command: str, overrides: list):
    for o in overrides:
        log.info("override %s", o)
    if rc is None:
        return
    logs = Path(rc.paths.logs)
    logs.mkdir(parents=True, exist_ok=True)
    with open(logs / "cli.log", "a") as fh:
        fh.write(json.dumps({"command": command, "overrides": overrides}) + "\n")


def _load(args):
    from .config import load_config

    rc = load_config(args.config)
    for d in (rc.paths.checkpoints, rc.paths.logs, rc.paths.reports):
        Path(d).mkdir(parents=True, exist_ok=True)
    return rc


def _records(rc):
    from .data import read_dataset

    path = Path(rc.paths.dataset)
    if not path.exists():
        raise UsageError(f"dataset {path} not found; run gen-data first")
    return read_dataset(path)


def _checkpoint(rc, path):
    from .checkpoint import load_checkpoint

    if not Path(path).exists():
        raise UsageError(f"checkpoint {path} not found")
    params, meta = load_checkpoint(path, rc.model)
    return params, meta


def _heldout_payloads(rc, n):
    from .data import TOKENIZER
    from .pipeline import retrieval_images

    _, heldout = retrieval_images(rc)
    return [TOKENIZER.encode_image(img) for img in heldout[:n]]


def cmd_gen_data(args, rc, overrides):
    from .data import write_dataset
    from .pipeline import pretrain_records

    rc.data = _override(rc.data, "format", args.format, "data", overrides)
    rc.data = _override(rc.data, "n_pretrain", args.count, "data", overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed!r} (config: {rc.seed!r})")
        rc = dataclasses.replace(rc, seed=args.seed)
    _echo(rc, "gen-data", overrides)
    records = pretrain_records(rc)
    Path(rc.paths.dataset).parent.mkdir(parents=True, exist_ok=True)
    write_dataset(records, rc.paths.dataset)
    log.info("wrote %d records to %s", len(records), rc.paths.dataset)


def cmd_pretrain(args, rc, overrides):
    from .model import init_params
    from .pretrain import Pretrainer

    rc.pretrain = _override(rc.pretrain, "loss_kind", args.loss, "pretrain", overrides)
    rc.pretrain = _override(rc.pretrain, "steps", args.steps, "pretrain", overrides)
    rc.pretrain = _override(rc.pretrain, "lr", args.lr, "pretrain", overrides)
    _echo(rc, "pretrain", overrides)
    records = _records(rc)
    ckpt, log_path = rc.checkpoint("pretrain"), rc.log("pretrain")
    step = seen = 0
    if args.resume:
        params, meta = _checkpoint(rc, ckpt)
        step, seen = int(meta.get("step", 0)), int(meta.get("tokens_seen", 0))
        log.info("resuming from step %d", step)
    else:
        params = init_params(rc.model, rc.sub_seed("init"))
        log_path.write_text("")
    trainer = Pretrainer(params, rc.model, rc.pretrain, step=step, tokens_seen=seen)
    hist = trainer.train(records, steps=max(rc.pretrain.steps - step, 0), log_path=log_path, checkpoint_path=ckpt)
    if hist:
        log.info("step %d loss %.4f", hist[-1]["step"], hist[-1]["loss"])


def cmd_contrast(args, rc, overrides):
    from .checkpoint import save_checkpoint
    from .contrastive import ContrastiveTrainer
    from .model import init_params
    from .pipeline import retrieval_sets

    rc.contrastive = _override(rc.contrastive, "steps", args.steps, "contrastive", overrides)
    rc.contrastive = _override(rc.contrastive, "lr", args.lr, "contrastive", overrides)
    _echo(rc, "contrast", overrides)
    init = args.init or str(rc.checkpoint("pretrain"))
    if init == "fresh":
        params = init_params(rc.model, rc.sub_seed("init"))
    else:
        params, _ = _checkpoint(rc, init)
    batches, evals = retrieval_sets(rc)
    log_path = rc.log("contrast")
    log_path.write_text("")
    trainer = ContrastiveTrainer(params, rc.model, rc.contrastive)
    trainer.train(batches, evals, log_path=log_path)
    save_checkpoint(params, rc.checkpoint("contrast"), rc.model, {"step": trainer.step_no, "init": init})
    log.info("final P@1 %s", trainer.evaluate(evals))


def cmd_eval(args, rc, overrides):
    from .analysis import EvalReport, evaluate_pairs
    from .pipeline import retrieval_sets

    _echo(rc, "eval", overrides)
    path = args.checkpoint or str(rc.checkpoint("contrast"))
    params, _ = _checkpoint(rc, path)
    _, evals = retrieval_sets(rc)
    tasks = args.task or list(rc.contrastive.tasks)
    missing = [t for t in tasks if t not in evals]
    if missing:
        raise UsageError(f"tasks {missing} are not configured in contrastive.tasks")
    p1 = {t: evaluate_pairs(params, rc.model, evals[t], rc.contrastive.chunk_size) for t in tasks}
    sizes = {t: sum(len(b) for b in evals[t]) for t in tasks}
    report = EvalReport(p1, sizes, rc.seed, path)
    line = json.dumps(report.to_dict(), sort_keys=True)
    (Path(rc.paths.reports) / "eval.jsonl").write_text(line + "\n")
    print(line)


def cmd_analyze(args, rc, overrides):
    from . import analysis as A

    _echo(rc, f"analyze {args.kind}", overrides)
    reports = Path(rc.paths.reports)
    if args.kind == "sim":
        params, _ = _checkpoint(rc, args.checkpoint or rc.checkpoint("contrast"))
        m = A.token_similarity_matrix(params, rc.model, _heldout_payloads(rc, args.samples))
        A.write_similarity_csv(reports / "similarity.csv", m)
        off = m[~np.eye(len(m), dtype=bool)]
        log.info("mean off-diagonal similarity %.4f", off.mean() if off.size else 1.0)
    elif args.kind == "pca":
        from .contrastive import encode
        from .data import TOKENIZER
        from .model import eos_states, init_params

        payloads = _heldout_payloads(rc, args.samples)
        base = init_params(rc.model, rc.sub_seed("init"))
        stages = {"base": eos_states(base, rc.model, payloads, TOKENIZER.eos_id)}
        for stage, ck in (("post-pretrain", "pretrain"), ("post-contrastive", "contrast")):
            params, _ = _checkpoint(rc, rc.checkpoint(ck))
            stages[stage] = encode(params, rc.model, payloads, rc.contrastive.chunk_size)
        res = A.stage_pca(stages)
        A.write_pca_csv(reports / "pca.csv", res)
        A.write_pca_variance_csv(reports / "pca_variance.csv", res)
        for stage, r in res.items():
            log.info("%s explained variance %s", stage, np.round(r.explained_variance_ratio, 4).tolist())
    elif args.kind == "lossdist":
        records = _records(rc)
        if not 0 <= args.record < len(records):
            raise UsageError(f"--record {args.record} outside dataset of {len(records)} records")
        params, _ = _checkpoint(rc, args.checkpoint or rc.checkpoint("pretrain"))
        dists = [A.loss_distribution(params, rc.model, records[args.record], kind) for kind in ("ntp", "kl")]
        A.write_loss_csv(reports / "loss_distribution.csv", dists)
        for d in dists:
            log.info("%s loss %.5f top-10%% share %.4f", d.kind, d.loss, d.concentration)
    else:
        try:
            ks = [int(k) for k in args.k_values.split(",") if k.strip()]
        except ValueError:
            raise UsageError(f"--k-values must be comma-separated integers, got {args.k_values!r}") from None
        budget = {}
        if args.pretrain_steps is not None:
            budget["pretrain_steps"] = args.pretrain_steps
        if args.contrastive_steps is not None:
            budget["contrastive_steps"] = args.contrastive_steps
        rows = A.ablate_k(rc, ks, budget, n_sim=args.samples)
        A.write_ablation_csv(reports / "ablation_k.csv", rows)
        for r in rows:
            if r.similarity is not None:
                A.write_similarity_csv(reports / f"similarity_k{r.k}.csv", r.similarity, k_label=r.k)
            log.info("K=%s average P@1 %.4f", "baseline" if r.k is None else r.k, r.average)


def cmd_grad_check(args, rc, overrides):
    from .gradcheck import run_all

    reports = run_all()
    failed = []
    for name, r in reports.items():
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {name:<18} max_rel_err={r.max_rel_error:.3e} entries={r.n_checked}")
        if not r.passed:
            failed.append(name)
    if failed:
        raise RuntimeError(f"gradient check failed for {failed}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "contrast": cmd_contrast,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    from .checkpoint import CheckpointError
    from .config import ConfigError

    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:  # --help (0) or a usage error (1)
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        rc = _load(args) if args.config else None
        COMMANDS[args.command](args, rc, [])
    except ConfigError as e:
        for path, msg in e.problems:
            print(f"config error: {path}: {msg}", file=sys.stderr)
        return 1
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except CheckpointError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # training divergence and other runtime failures
        log.debug("traceback", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
