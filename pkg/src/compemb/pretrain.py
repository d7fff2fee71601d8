"""Compression pretraining: answer-conditional next-token prediction through the
compression mask, plus the KL-distillation variant."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import TOKENIZER, Record
from .mask import Segment, build_compression_mask, causal_mask, pad_mask
from .model import ModelConfig, Params, SegmentedSequence, forward, set_trainable, trainable_names
from .optim import AdamW

log = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    loss_kind: str = "ntp"
    lr: float = 5e-5
    batch_size: int = 16
    steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 1
    trainable: str = "adapters"

    def problems(self) -> list[tuple[str, str]]:
        out = []
        if self.loss_kind not in ("ntp", "kl"):
            out.append(("loss_kind", f"must be 'ntp' or 'kl', got {self.loss_kind!r}"))
        if self.batch_size < 1:
            out.append(("batch_size", "must be >= 1"))
        if not self.lr > 0:
            out.append(("lr", "must be > 0"))
        if self.steps < 0:
            out.append(("steps", "must be >= 0"))
        if self.trainable not in ("adapters", "full"):
            out.append(("trainable", "must be 'adapters' or 'full'"))
        return out


class RecordRejected(ValueError):
    def __init__(self, record_id: str, reason: str):
        super().__init__(f"record {record_id!r} rejected: {reason}")
        self.record_id = record_id


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step


def serialize(record: Record, config: ModelConfig, payload=None) -> SegmentedSequence:
    """INPUT ⊕ COMPRESSION ⊕ (Q₁ A₁ … Q_T A_T); each answer ends with <eos>."""
    tok = TOKENIZER
    payload = tok.encode_image(record.image) if payload is None else list(payload)
    ids = list(payload) + list(config.comp_ids())
    segs = [Segment.INPUT] * len(payload) + [Segment.COMPRESSION] * config.n_comp_tokens
    loss = [False] * len(ids)
    for q, a in record.turns:
        q_ids = tok.encode(q)
        a_ids = tok.encode(a)
        if not a_ids:
            raise RecordRejected(record.id, "empty answer")
        if not q_ids:
            raise RecordRejected(record.id, "empty question")
        a_ids.append(tok.eos_id)
        ids += q_ids + a_ids
        segs += [Segment.QUESTION] * len(q_ids) + [Segment.ANSWER] * len(a_ids)
        loss += [False] * len(q_ids) + [True] * len(a_ids)
    if len(ids) > config.max_seq_len:
        raise RecordRejected(record.id, f"length {len(ids)} exceeds max_seq_len={config.max_seq_len}")
    return SegmentedSequence(np.array(ids), np.array(segs), np.array(loss), record.id)


@dataclass
class TrainBatch:
    tokens: np.ndarray  # (B, T)
    masks: np.ndarray  # (B, T, T) compression masks, padded
    teacher_masks: np.ndarray  # (B, T, T) plain causal masks, padded
    targets: np.ndarray  # (B, T) next token at each position
    loss_mask: np.ndarray  # (B, T) true where the next token is an answer token
    ids: list[str]
    sequences: list[SegmentedSequence] = field(default_factory=list)

    @property
    def n_tokens(self) -> int:
        return int(sum(len(s) for s in self.sequences))


def build_pretrain_batch(records, config: ModelConfig, pad_to: int | None = None) -> TrainBatch:
    formats = {r.format for r in records}
    if len(formats) > 1:
        raise ValueError(f"records in one batch must share a format, got {sorted(formats)}")
    seqs = [serialize(r, config) for r in records]
    n = max(len(s) for s in seqs)
    if pad_to is not None:
        n = max(n, pad_to)
    b = len(seqs)
    tokens = np.zeros((b, n), dtype=np.int64)
    targets = np.zeros((b, n), dtype=np.int64)
    loss_mask = np.zeros((b, n), dtype=bool)
    masks = np.zeros((b, n, n), dtype=bool)
    teacher = np.zeros((b, n, n), dtype=bool)
    for i, s in enumerate(seqs):
        t = len(s)
        tokens[i, :t] = s.tokens
        targets[i, : t - 1] = s.tokens[1:]
        loss_mask[i, : t - 1] = s.loss_mask[1:]
        masks[i] = pad_mask(s.compression_mask(), n)
        teacher[i] = pad_mask(causal_mask(t), n)
    return TrainBatch(tokens, masks, teacher, targets, loss_mask, [r.id for r in records], seqs)


def ntp_loss(params: Params, config: ModelConfig, batch: TrainBatch, rng=None):
    """(mean answer-token NLL, per-position NLL) under the compression mask."""
    out = forward(params, config, batch.tokens, batch.masks, rng=rng)
    per = T.token_cross_entropy(out.logits, batch.targets, batch.loss_mask)
    return T.masked_mean(per, batch.loss_mask), per


def kl_loss(params: Params, config: ModelConfig, batch: TrainBatch, teacher_masks=None, rng=None):
    """(mean KL(teacher || student), per-position KL) over answer positions.

    The teacher is the same weights with QA rows allowed to see the input.
    """
    teacher_masks = batch.teacher_masks if teacher_masks is None else teacher_masks
    with T.no_grad():
        teacher = forward(params, config, batch.tokens, teacher_masks).logits.data
    student = forward(params, config, batch.tokens, batch.masks, rng=rng)
    per = T.token_kl_div(teacher, student.logits, batch.loss_mask)
    return T.masked_mean(per, batch.loss_mask), per


LOSSES = {"ntp": ntp_loss, "kl": kl_loss}


class Pretrainer:
    def __init__(self, params: Params, model_config: ModelConfig, config: PretrainConfig, step: int = 0, tokens_seen: int = 0):
        self.params = params
        self.mcfg = model_config
        self.cfg = config
        self.names = trainable_names(params, config.trainable)
        set_trainable(params, self.names)
        self.opt = AdamW(params, self.names, config.lr, (config.beta1, config.beta2), config.eps, config.weight_decay)
        self.step_no = step
        self.tokens_seen = tokens_seen
        self.rng = np.random.default_rng(config.seed)

    def step(self, batch: TrainBatch, loss_kind: str | None = None) -> tuple[float, np.ndarray]:
        """One optimizer update; returns (loss, per-position losses)."""
        self.opt.zero_grad()
        loss, per = LOSSES[loss_kind or self.cfg.loss_kind](self.params, self.mcfg, batch, rng=self.rng if self.mcfg.dropout else None)
        value = loss.item()
        self.step_no += 1
        if not math.isfinite(value):
            raise TrainingDiverged(self.step_no, value)
        loss.backward()
        self.opt.step()
        self.tokens_seen += batch.n_tokens
        return value, per.data

    def batches(self, records):
        """Endless stream of shuffled batches, reshuffled each epoch."""
        by_format: dict[str, list[Record]] = {}
        for r in records:
            by_format.setdefault(r.format, []).append(r)
        while True:
            groups = []
            for fmt in sorted(by_format):
                rs = by_format[fmt]
                order = self.rng.permutation(len(rs))
                groups += [[rs[i] for i in order[j : j + self.cfg.batch_size]] for j in range(0, len(rs), self.cfg.batch_size)]
            for g in self.rng.permutation(len(groups)):
                yield build_pretrain_batch(groups[g], self.mcfg)

    def train(self, records, steps: int | None = None, log_path=None, checkpoint_path=None) -> list[dict]:
        from .checkpoint import save_checkpoint

        steps = self.cfg.steps if steps is None else steps
        history = []
        fh = open(log_path, "a") if log_path else None
        try:
            stream = self.batches(records)
            for _ in range(steps):
                loss, _ = self.step(next(stream))
                rec = {"step": self.step_no, "loss": loss, "lr": self.cfg.lr, "tokens_seen": self.tokens_seen}
                history.append(rec)
                if fh and self.step_no % self.cfg.log_every == 0:
                    fh.write(json.dumps(rec) + "\n")
                if checkpoint_path and self.cfg.checkpoint_every and self.step_no % self.cfg.checkpoint_every == 0:
                    save_checkpoint(self.params, checkpoint_path, self.mcfg, {"step": self.step_no, "tokens_seen": self.tokens_seen})
        finally:
            if fh:
                fh.close()
        if checkpoint_path:
            save_checkpoint(self.params, checkpoint_path, self.mcfg, {"step": self.step_no, "tokens_seen": self.tokens_seen})
        return history


def record_losses(params: Params, config: ModelConfig, records, loss_kind: str = "ntp", payloads=None) -> np.ndarray:
    """Mean answer loss per record, optionally with replaced INPUT payloads."""
    out = []
    with T.no_grad():
        for i, r in enumerate(records):
            seq = serialize(r, config, None if payloads is None else payloads[i])
            b = _single_batch(seq)
            loss, _ = LOSSES[loss_kind](params, config, b)
            out.append(loss.item())
    return np.array(out)


def _single_batch(seq: SegmentedSequence) -> TrainBatch:
    t = len(seq)
    targets = np.zeros(t, dtype=np.int64)
    targets[:-1] = seq.tokens[1:]
    lm = np.zeros(t, dtype=bool)
    lm[:-1] = seq.loss_mask[1:]
    return TrainBatch(seq.tokens[None], build_compression_mask(seq.layout)[None], causal_mask(t)[None], targets[None], lm[None], [seq.record_id], [seq])


def noise_payloads(records, seed: int) -> list[list[int]]:
    """Random patch tokens replacing each record's image (same length)."""
    rng = np.random.default_rng(seed)
    tok = TOKENIZER
    out = []
    for r in records:
        n = len(tok.encode_image(r.image))
        out.append(list(tok.vocab_text + rng.integers(0, tok.vocab_patch, size=n)))
    return out


def load_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
