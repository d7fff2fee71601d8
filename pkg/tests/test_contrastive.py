import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from compemb import tensor as T
from compemb.analysis import evaluate_pairs
from compemb.contrastive import (
    CacheMismatch,
    ContrastiveConfig,
    DuplicatePositive,
    EmbeddingSet,
    grad_cache_backward,
    info_nce,
    monolithic_backward,
    train_contrastive,
)
from compemb.data import gen_images, gen_retrieval_pairs
from compemb.model import init_params, set_trainable, trainable_names
from compemb.tensor import Tensor

from conftest import tiny_model_config, toy_config


def nce(q, d, tau):
    with T.precision(np.float64):
        return info_nce(Tensor(np.asarray(q, float)), Tensor(np.asarray(d, float)), tau).item()


def test_single_pair_has_zero_loss():
    assert nce([[0.6, 0.8]], [[1.0, 0.0]], 0.05) == 0.0


def test_one_negative_hand_value():
    eye = np.eye(2)
    assert abs(nce(eye, eye, 1.0) - math.log(1 + math.exp(-1))) < 1e-9
    assert abs(math.log(1 + math.exp(-1)) - 0.31326) < 1e-5


@pytest.mark.parametrize("n", [1, 3, 7, 15])
def test_equal_similarities_give_log_n_plus_one(n):
    q = np.tile([[0.0, 1.0]], (n + 1, 1))
    d = np.tile([[0.6, 0.8]], (n + 1, 1))
    assert abs(nce(q, d, 0.05) - math.log(n + 1)) < 1e-9


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (4, 4), elements=st.floats(-1, 1)), st.floats(-5, 5))
def test_row_shift_invariance(sims, c):
    n = len(sims)
    with T.precision(np.float64):
        a = T.cross_entropy(Tensor(sims / 0.05), np.arange(n), np.ones(n, bool)).item()
        b = T.cross_entropy(Tensor((sims + c) / 0.05), np.arange(n), np.ones(n, bool)).item()
    assert a == pytest.approx(b, rel=1e-9, abs=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_rotation_invariance(seed):
    r = np.random.default_rng(seed)
    q = r.normal(size=(5, 6))
    d = r.normal(size=(5, 6))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    rot, _ = np.linalg.qr(r.normal(size=(6, 6)))
    assert nce(q @ rot, d @ rot, 0.05) == pytest.approx(nce(q, d, 0.05), rel=1e-9)


def test_loss_positive_when_a_negative_ties():
    q = np.array([[1.0, 0.0], [1.0, 0.0]])
    d = np.array([[1.0, 0.0], [1.0, 0.0]])
    assert nce(q, d, 0.05) > 0


def test_duplicate_positive_rejected():
    with pytest.raises(DuplicatePositive):
        info_nce(Tensor(np.eye(2)), Tensor(np.eye(2)), 0.05, doc_ids=["a", "a"])


def test_embedding_set_requires_unit_rows():
    with pytest.raises(ValueError):
        EmbeddingSet(["a"], np.array([[1.0, 1.0]]))


def _f64_model(seed=0):
    cfg = tiny_model_config()
    with T.precision(np.float64):
        p = init_params(cfg, seed)
    r = np.random.default_rng(seed)
    for n, t in p.items():
        if n.endswith("lora_b"):
            t.data[...] = r.normal(scale=0.2, size=t.shape)
    set_trainable(p, trainable_names(p, "full"))
    return cfg, p


def _grads(p):
    return {n: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for n, t in p.items() if t.requires_grad}


@pytest.mark.parametrize("chunk", [1, 4, 16])
def test_grad_cache_matches_monolithic(chunk):
    cfg, p = _f64_model()
    batch = gen_retrieval_pairs(gen_images(64, 3), "t2i", 16, seed=0)[0]
    qs, ds = [x.query for x in batch], [x.positive for x in batch]
    with T.precision(np.float64):
        for t in p.values():
            t.grad = None
        ref_loss = monolithic_backward(p, cfg, qs, ds, 0.05)
        ref = _grads(p)
        for t in p.values():
            t.grad = None
        loss = grad_cache_backward(p, cfg, qs, ds, 0.05, chunk)
        got = _grads(p)
    assert loss == pytest.approx(ref_loss, rel=1e-12)
    for n in ref:
        scale = max(np.abs(ref[n]).max(), 1e-12)
        assert np.abs(got[n] - ref[n]).max() / scale < 1e-5, n


def test_cache_mismatch_detected(monkeypatch):
    import compemb.contrastive as C

    cfg = tiny_model_config()
    p = init_params(cfg, 0)
    batch = gen_retrieval_pairs(gen_images(64, 3), "i2i", 8, seed=0)[0]
    orig, calls = C.embed_batch, []

    def drifting(params, config, payloads, rng=None):
        calls.append(1)
        out = orig(params, config, payloads)
        return out + Tensor(np.full(out.shape, 1e-3 * len(calls), dtype=out.dtype))

    monkeypatch.setattr(C, "embed_batch", drifting)
    with pytest.raises(CacheMismatch):
        grad_cache_backward(p, cfg, [x.query for x in batch], [x.positive for x in batch], 0.05, 4)


def test_training_loss_decreases_and_overfits_t2i():
    rc = toy_config(contrastive={"lr": 1e-3, "tasks": ["t2i"], "chunk_size": 16})
    params = init_params(rc.model, 0)
    images = gen_images(64, 5)
    batches = gen_retrieval_pairs(images, "t2i", 16, seed=0)[:2]
    _, hist = train_contrastive(params, rc.model, rc.contrastive, {"t2i": batches}, steps=120)
    losses = [h["loss"] for h in hist if "loss" in h]
    assert np.mean(losses[-20:]) < np.mean(losses[:20])
    assert evaluate_pairs(params, rc.model, batches) == 1.0


def test_config_problems():
    probs = dict(ContrastiveConfig(temperature=0.0, chunk_size=32, batch_size=16).problems())
    assert set(probs) == {"temperature", "chunk_size"}
