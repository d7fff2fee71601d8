"""End-to-end run: data → compression pretraining → contrastive → held-out P@1."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

from .analysis import evaluate_pairs
from .config import RunConfig
from .contrastive import ContrastiveTrainer
from .data import TOKENIZER, gen_corpus, gen_images, gen_retrieval_pairs
from .model import ModelConfig, Params, init_params
from .pretrain import Pretrainer

log = logging.getLogger(__name__)


@dataclass
class PipelineResult:
    params: Params
    model_config: ModelConfig
    p_at_1: dict[str, float]
    pretrain_history: list[dict] = field(default_factory=list)
    contrast_history: list[dict] = field(default_factory=list)
    sample_payloads: list[list[int]] = field(default_factory=list)


def pretrain_records(rc: RunConfig, count: int | None = None):
    d = rc.data
    return gen_corpus(d.n_pretrain if count is None else count, rc.sub_seed("data"), d.format, d.grid_size, d.min_objects, d.max_objects)


def retrieval_images(rc: RunConfig):
    d = rc.data
    seed = rc.sub_seed("retrieval")
    train = gen_images(d.n_contrastive, seed, d.grid_size, d.min_objects, d.max_objects)
    heldout = gen_images(d.n_heldout, seed, d.grid_size, d.min_objects, d.max_objects, offset=d.n_contrastive)
    return train, heldout


def retrieval_sets(rc: RunConfig):
    """(training batches per task, one held-out evaluation batch per task)."""
    train, heldout = retrieval_images(rc)
    c = rc.contrastive
    batches, evals = {}, {}
    for task in c.tasks:
        batches[task] = gen_retrieval_pairs(train, task, c.batch_size, seed=rc.sub_seed(f"pairs/{task}"))
        evals[task] = gen_retrieval_pairs(heldout, task, c.eval_size, seed=rc.sub_seed(f"eval/{task}"))[: c.eval_batches]
    return batches, evals


def evaluate(params: Params, config: ModelConfig, evals) -> dict[str, float]:
    return {task: evaluate_pairs(params, config, pairs) for task, pairs in sorted(evals.items())}


def run_pipeline(rc: RunConfig, n_comp_tokens: int | None = None, pretrain: bool = True, budget: dict | None = None) -> PipelineResult:
    """Train from a fresh init; ``budget`` may override ``pretrain_steps`` and ``contrastive_steps``."""
    budget = budget or {}
    mcfg = rc.model if n_comp_tokens is None else dataclasses.replace(rc.model, n_comp_tokens=n_comp_tokens)
    params = init_params(mcfg, rc.sub_seed("init"))
    pre_hist = []
    if pretrain:
        trainer = Pretrainer(params, mcfg, rc.pretrain)
        pre_hist = trainer.train(pretrain_records(rc), steps=budget.get("pretrain_steps", rc.pretrain.steps))
    batches, evals = retrieval_sets(rc)
    ct = ContrastiveTrainer(params, mcfg, rc.contrastive)
    con_hist = ct.train(batches, steps=budget.get("contrastive_steps", rc.contrastive.steps))
    p1 = evaluate(params, mcfg, evals)
    log.info("K=%s pretrain=%s P@1=%s", mcfg.n_comp_tokens, pretrain, p1)
    _, heldout = retrieval_images(rc)
    sample = [TOKENIZER.encode_image(img) for img in heldout]
    return PipelineResult(params, mcfg, p1, pre_hist, con_hist, sample)
