"""Retrieval metrics and diagnostic analyses on trained checkpoints."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import TOKENIZER, Record, RetrievalPair
from .model import ModelConfig, Params, comp_states
from .pretrain import LOSSES, _single_batch, serialize


@dataclass
class EvalReport:
    p_at_1: dict[str, float]
    corpus_sizes: dict[str, int]
    seed: int
    checkpoint: str = ""

    def __post_init__(self):
        for task, p in self.p_at_1.items():
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"P@1 for {task} outside [0, 1]: {p}")

    def to_dict(self) -> dict:
        return asdict(self)


def precision_at_1(queries: np.ndarray, candidates: np.ndarray, gold, candidate_ids=None) -> float:
    """Fraction of queries whose most cosine-similar candidate is the gold one.

    ``gold`` holds one candidate index per query, or candidate ids when
    ``candidate_ids`` is given. Ties go to the lowest candidate index.
    """
    queries = np.asarray(queries, dtype=np.float64)
    candidates = np.asarray(candidates, dtype=np.float64)
    if candidate_ids is not None:
        pos = {c: i for i, c in enumerate(candidate_ids)}
        missing = [g for g in gold if g not in pos]
        if missing:
            raise KeyError(f"gold ids not among candidates: {missing[:5]}")
        gold = [pos[g] for g in gold]
    gold = np.asarray(gold, dtype=np.int64)
    if len(gold) != len(queries):
        raise ValueError("one gold entry per query is required")
    if len(gold) and (gold.min() < 0 or gold.max() >= len(candidates)):
        raise KeyError("gold index outside the candidate set")
    qn = queries / np.maximum(np.linalg.norm(queries, axis=1, keepdims=True), 1e-12)
    cn = candidates / np.maximum(np.linalg.norm(candidates, axis=1, keepdims=True), 1e-12)
    sims = qn @ cn.T
    # np.argmax returns the first maximum, i.e. the lowest index on ties
    return float(np.mean(np.argmax(sims, axis=1) == gold)) if len(gold) else 0.0


def evaluate_pairs(params: Params, config: ModelConfig, batches: list[list[RetrievalPair]], chunk_size: int = 32) -> float:
    """P@1 over all queries; each batch is its own candidate pool."""
    from .contrastive import encode

    hits = total = 0
    for pairs in batches:
        q = encode(params, config, [p.query for p in pairs], chunk_size)
        d = encode(params, config, [p.positive for p in pairs], chunk_size)
        hits += precision_at_1(q, d, np.arange(len(pairs))) * len(pairs)
        total += len(pairs)
    return hits / total if total else 0.0


def token_similarity_matrix(params: Params, config: ModelConfig, payloads) -> np.ndarray:
    """K×K mean (over payloads) cosine similarity between compression states."""
    states = comp_states(params, config, payloads).astype(np.float64)
    states /= np.maximum(np.linalg.norm(states, axis=-1, keepdims=True), 1e-12)
    sims = np.einsum("bkd,bjd->bkj", states, states).mean(axis=0)
    sims = 0.5 * (sims + sims.T)
    np.fill_diagonal(sims, 1.0)
    return np.clip(sims, -1.0, 1.0)


@dataclass
class PCAResult:
    points: np.ndarray  # (n, n_components)
    components: np.ndarray  # (n_components, d), orthonormal rows
    explained_variance_ratio: np.ndarray
    mean: np.ndarray
    degenerate: bool = False


def pca_project(points, n_components: int = 2) -> PCAResult:
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or len(x) < n_components + 1:
        raise ValueError(f"need at least {n_components + 1} points for {n_components} components")
    mu = x.mean(axis=0)
    xc = x - mu
    cov = xc.T @ xc / (len(x) - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals = np.maximum(vals[order], 0.0)
    vecs = vecs[:, order]
    total = vals.sum()
    k = n_components
    if total <= 1e-24:
        return PCAResult(np.zeros((len(x), k)), vecs[:, :k].T, np.zeros(k), mu, degenerate=True)
    comps = vecs[:, :k].T
    return PCAResult(xc @ comps.T, comps, vals[:k] / total, mu)


def top_share(values, frac: float = 0.1) -> float:
    """Share of the total carried by the largest ceil(frac·n) values."""
    v = np.sort(np.asarray(values, dtype=np.float64))[::-1]
    total = v.sum()
    if total <= 0:
        return 0.0
    return float(v[: max(1, math.ceil(frac * len(v)))].sum() / total)


@dataclass
class LossDistribution:
    tokens: list[str]
    values: np.ndarray
    loss: float
    kind: str

    @property
    def concentration(self) -> float:
        return top_share(self.values)


def loss_distribution(params: Params, config: ModelConfig, record: Record, loss_kind: str = "ntp") -> LossDistribution:
    """Per-answer-token losses for one record, labelled by the predicted token."""
    seq = serialize(record, config)
    batch = _single_batch(seq)
    with T.no_grad():
        loss, per = LOSSES[loss_kind](params, config, batch)
    m = batch.loss_mask[0]
    labels = [TOKENIZER.token_str(t) for t in batch.targets[0][m]]
    return LossDistribution(labels, per.data[0][m].astype(np.float64), loss.item(), loss_kind)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_similarity_csv(path, matrix: np.ndarray, k_label=None):
    rows = [[i, j, f"{matrix[i, j]:.8f}"] for i in range(len(matrix)) for j in range(len(matrix))]
    if k_label is not None:
        rows = [[k_label] + r for r in rows]
        write_csv(path, ["k", "i", "j", "cosine"], rows)
    else:
        write_csv(path, ["i", "j", "cosine"], rows)


def write_loss_csv(path, dists: list[LossDistribution]):
    rows = []
    for d in dists:
        rows += [[d.kind, pos, tok, f"{v:.8f}"] for pos, (tok, v) in enumerate(zip(d.tokens, d.values))]
    write_csv(path, ["loss_kind", "position", "token", "loss"], rows)


@dataclass
class AblationRow:
    k: int | None  # None for the contrastive-only baseline
    p_at_1: dict[str, float]
    similarity: np.ndarray | None = field(default=None, repr=False)

    @property
    def average(self) -> float:
        return float(np.mean(list(self.p_at_1.values())))


def ablate_k(run_config, k_values, budget: dict | None = None, with_baseline: bool = True, n_sim: int = 100) -> list[AblationRow]:
    """Pretrain + contrastive per K; one row of held-out P@1 per K, plus a
    contrastive-only baseline row at the config's own K."""
    from .pipeline import run_pipeline

    rows = []
    variants = [(k, True) for k in k_values]
    if with_baseline:
        variants.append((None, False))
    for k, pretrain in variants:
        result = run_pipeline(run_config, n_comp_tokens=k, pretrain=pretrain, budget=budget)
        sim = None
        if k is not None:
            sim = token_similarity_matrix(result.params, result.model_config, result.sample_payloads[:n_sim])
        rows.append(AblationRow(k, result.p_at_1, sim))
    return rows


def write_ablation_csv(path, rows: list[AblationRow]):
    tasks = sorted(rows[0].p_at_1)
    write_csv(
        path,
        ["k"] + tasks + ["average"],
        [["baseline" if r.k is None else r.k] + [f"{r.p_at_1[t]:.6f}" for t in tasks] + [f"{r.average:.6f}"] for r in rows],
    )


def stage_pca(stages: dict[str, np.ndarray], n_components: int = 2) -> dict[str, PCAResult]:
    """One PCA per stage; stages share the payload set but not a basis."""
    return {name: pca_project(points, n_components) for name, points in stages.items()}


def write_pca_csv(path, results: dict[str, PCAResult]):
    rows = []
    for stage, r in results.items():
        for i, p in enumerate(r.points):
            rows.append([stage, i] + [f"{v:.8f}" for v in p])
    k = next(iter(results.values())).points.shape[1]
    write_csv(path, ["stage", "index"] + [f"pc{j + 1}" for j in range(k)], rows)


def write_pca_variance_csv(path, results: dict[str, PCAResult]):
    rows = [[stage, j + 1, f"{v:.8f}", int(r.degenerate)] for stage, r in results.items() for j, v in enumerate(r.explained_variance_ratio)]
    write_csv(path, ["stage", "component", "explained_variance_ratio", "degenerate"], rows)
