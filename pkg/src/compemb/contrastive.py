"""Contrastive fine-tuning on mean-pooled compression embeddings.

Large effective batches use gradient caching: embed everything without a
graph, take the InfoNCE gradient with respect to the embedding matrices, then
re-encode chunk by chunk and push each cached gradient slice through the
encoder. Parameter gradients equal those of one monolithic backward.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import RetrievalPair
from .model import ModelConfig, Params, embed_batch, set_trainable, trainable_names
from .optim import AdamW
from .tensor import Tensor


@dataclass
class ContrastiveConfig:
    temperature: float = 0.05
    batch_size: int = 16
    chunk_size: int = 4
    lr: float = 5e-5
    steps: int = 200
    seed: int = 0
    tasks: tuple[str, ...] = ("t2i", "i2t", "i2i", "class")
    eval_every: int = 50
    eval_size: int = 16
    eval_batches: int = 4
    weight_decay: float = 0.0
    trainable: str = "adapters"

    def problems(self) -> list[tuple[str, str]]:
        out = []
        if not self.temperature > 0:
            out.append(("temperature", "must be > 0"))
        if not 0 < self.chunk_size <= self.batch_size:
            out.append(("chunk_size", f"must satisfy 0 < chunk_size <= batch_size ({self.batch_size})"))
        if not self.lr > 0:
            out.append(("lr", "must be > 0"))
        if self.trainable not in ("adapters", "full"):
            out.append(("trainable", "must be 'adapters' or 'full'"))
        return out


@dataclass
class EmbeddingSet:
    ids: list[str]
    vectors: np.ndarray

    def __post_init__(self):
        norms = np.linalg.norm(self.vectors, axis=1)
        if len(self.ids) != len(self.vectors):
            raise ValueError("one id per embedding row is required")
        if not np.allclose(norms, 1.0, atol=1e-5):
            raise ValueError("embedding rows must be unit vectors")


class DuplicatePositive(ValueError):
    pass


class CacheMismatch(RuntimeError):
    pass


def info_nce(q: Tensor, d: Tensor, temperature: float, doc_ids=None) -> Tensor:
    """Mean over queries of -log softmax(q·dᵀ/τ)[i, i]; row i of d is query i's positive."""
    if doc_ids is not None and len(set(doc_ids)) != len(doc_ids):
        raise DuplicatePositive("two queries in the batch share a positive")
    if q.shape != d.shape:
        raise T.DimensionError(f"query/doc embedding shapes differ: {q.shape} vs {d.shape}")
    n = q.shape[0]
    logits = T.scale(T.matmul(q, T.swap_last(d)), 1.0 / temperature)
    return T.cross_entropy(logits, np.arange(n), np.ones(n, dtype=bool))


def _chunks(n: int, size: int):
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]


def encode(params: Params, config: ModelConfig, payloads, chunk_size: int) -> np.ndarray:
    """Embeddings for all payloads without building a graph."""
    with T.no_grad():
        return np.concatenate([embed_batch(params, config, payloads[s]).data for s in _chunks(len(payloads), chunk_size)])


def grad_cache_backward(params: Params, config: ModelConfig, queries, docs, temperature: float, chunk_size: int, doc_ids=None, tol: float = 1e-6) -> float:
    """Accumulate InfoNCE parameter gradients into ``.grad`` chunk by chunk."""
    # pass 1: embeddings only
    q_emb = encode(params, config, queries, chunk_size)
    d_emb = encode(params, config, docs, chunk_size)
    # pass 2: loss and gradient w.r.t. the embedding matrices
    qt, dt = Tensor(q_emb, requires_grad=True), Tensor(d_emb, requires_grad=True)
    loss = info_nce(qt, dt, temperature, doc_ids)
    loss.backward()
    # pass 3: re-encode with graph, backprop the cached slices
    for payloads, cached, grad in ((queries, q_emb, qt.grad), (docs, d_emb, dt.grad)):
        for s in _chunks(len(payloads), chunk_size):
            emb = embed_batch(params, config, payloads[s])
            gap = float(np.max(np.abs(emb.data - cached[s])))
            if gap > tol:
                raise CacheMismatch(f"re-encoded chunk {s.start}:{s.stop} differs from pass 1 by {gap:.3g}")
            emb.backward(grad[s])
    return loss.item()


def monolithic_backward(params: Params, config: ModelConfig, queries, docs, temperature: float, doc_ids=None) -> float:
    q = embed_batch(params, config, queries)
    d = embed_batch(params, config, docs)
    loss = info_nce(q, d, temperature, doc_ids)
    loss.backward()
    return loss.item()


class ContrastiveTrainer:
    def __init__(self, params: Params, model_config: ModelConfig, config: ContrastiveConfig):
        self.params = params
        self.mcfg = model_config
        self.cfg = config
        self.names = trainable_names(params, config.trainable)
        set_trainable(params, self.names)
        self.opt = AdamW(params, self.names, config.lr, weight_decay=config.weight_decay)
        self.step_no = 0
        self.tokens_seen = 0

    def step(self, batch: list[RetrievalPair]) -> float:
        self.opt.zero_grad()
        loss = grad_cache_backward(
            self.params,
            self.mcfg,
            [p.query for p in batch],
            [p.positive for p in batch],
            self.cfg.temperature,
            self.cfg.chunk_size,
            [p.positive_id for p in batch],
        )
        self.step_no += 1
        if not math.isfinite(loss):
            from .pretrain import TrainingDiverged

            raise TrainingDiverged(self.step_no, loss)
        self.opt.step()
        self.tokens_seen += sum(len(p.query) + len(p.positive) for p in batch)
        return loss

    def evaluate(self, eval_sets: dict[str, list[RetrievalPair]]) -> dict[str, float]:
        from .analysis import evaluate_pairs

        return {task: evaluate_pairs(self.params, self.mcfg, batches, self.cfg.chunk_size) for task, batches in sorted(eval_sets.items())}

    def train(self, task_batches: dict[str, list[list[RetrievalPair]]], eval_sets=None, steps: int | None = None, log_path=None) -> list[dict]:
        """Round-robin over tasks, one batch per step, cycling each task's batches."""
        steps = self.cfg.steps if steps is None else steps
        tasks = [t for t in self.cfg.tasks if t in task_batches]
        if not tasks:
            raise ValueError("no training batches for the configured tasks")
        rng = np.random.default_rng(self.cfg.seed)
        cursors = {t: 0 for t in tasks}
        orders = {t: rng.permutation(len(task_batches[t])) for t in tasks}
        history = []
        fh = open(log_path, "a") if log_path else None
        try:
            for i in range(steps):
                task = tasks[i % len(tasks)]
                if cursors[task] == len(orders[task]):
                    orders[task] = rng.permutation(len(task_batches[task]))
                    cursors[task] = 0
                batch = task_batches[task][orders[task][cursors[task]]]
                cursors[task] += 1
                loss = self.step(batch)
                rec = {"step": self.step_no, "loss": loss, "lr": self.cfg.lr, "tokens_seen": self.tokens_seen, "task": task}
                history.append(rec)
                if fh:
                    fh.write(json.dumps(rec) + "\n")
                if eval_sets and self.cfg.eval_every and self.step_no % self.cfg.eval_every == 0:
                    for t, p in self.evaluate(eval_sets).items():
                        erec = {"step": self.step_no, "task": t, "p_at_1": p}
                        history.append(erec)
                        if fh:
                            fh.write(json.dumps(erec) + "\n")
        finally:
            if fh:
                fh.close()
        return history


def train_contrastive(params: Params, model_config: ModelConfig, config: ContrastiveConfig, task_batches, eval_sets=None, steps: int | None = None, log_path=None):
    """Train in place; returns (params, history)."""
    trainer = ContrastiveTrainer(params, model_config, config)
    history = trainer.train(task_batches, eval_sets, steps, log_path)
    return params, history
