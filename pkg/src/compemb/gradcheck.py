"""Finite-difference checks over every differentiable op and a small model.

Each primitive is reduced to a scalar through a fixed random projection so
that every output entry contributes to the checked gradient.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .mask import SegmentLayout, build_compression_mask
from .tensor import GradCheckReport, Tensor, grad_check

PRIMITIVE_TOL = 1e-4
MODEL_TOL = 1e-3


def _proj(out: Tensor, seed: int = 99) -> Tensor:
    w = np.random.default_rng(seed).normal(size=out.shape)
    return T.sum_(T.mul(out, Tensor(w)))


def _case(fn: Callable, *shapes, seed=0, positive=False):
    rng = np.random.default_rng(seed)
    xs = []
    for s in shapes:
        a = rng.normal(size=s)
        xs.append(Tensor(np.abs(a) + 0.5 if positive else a))
    return (lambda: _proj(fn(*xs))), xs


def _primitive_cases() -> dict[str, Callable]:
    rng = np.random.default_rng(7)
    ids = rng.integers(0, 6, size=(2, 5))
    ids[0, :3] = 1  # repeated ids exercise gradient accumulation
    targets = rng.integers(0, 7, size=(2, 4))
    pos_mask = np.array([[1, 1, 0, 1], [0, 1, 1, 1]], dtype=bool)
    teacher = rng.normal(size=(2, 4, 7))
    ang = rng.normal(size=(5, 2))
    cos, sin = np.cos(ang), np.sin(ang)

    def scalar_ce(lg):
        return T.cross_entropy(lg, targets, pos_mask)

    def scalar_kl(lg):
        return T.kl_div(teacher, lg, pos_mask)

    return {
        "add": lambda: _case(T.add, (3, 4), (4,)),
        "sub": lambda: _case(T.sub, (3, 4), (3, 1)),
        "mul": lambda: _case(T.mul, (3, 4), (1, 4)),
        "scale": lambda: _case(lambda x: T.scale(x, 0.37), (3, 4)),
        "exp": lambda: _case(T.exp, (3, 4)),
        "log": lambda: _case(T.log, (3, 4), positive=True),
        "gelu": lambda: _case(T.gelu, (3, 5)),
        "reshape": lambda: _case(lambda x: T.reshape(x, (6, 2)), (3, 4)),
        "transpose": lambda: _case(lambda x: T.transpose(x, (2, 0, 1)), (2, 3, 4)),
        "swap_last": lambda: _case(T.swap_last, (2, 3, 4)),
        "slice": lambda: _case(lambda x: T.slice_(x, (slice(None), slice(1, 3))), (3, 4)),
        "slice_fancy": lambda: _case(lambda x: T.slice_(x, np.array([0, 2, 2, 1])), (3, 4)),
        "concat": lambda: _case(lambda a, b: T.concat([a, b], axis=1), (2, 3), (2, 2)),
        "sum": lambda: _case(lambda x: T.sum_(x, axis=1, keepdims=True), (3, 4)),
        "mean": lambda: _case(lambda x: T.mean(x, axis=0), (3, 4)),
        "mean_pool": lambda: _case(lambda x: T.mean_pool(x, axis=1), (2, 3, 4)),
        "matmul": lambda: _case(T.matmul, (2, 3, 4), (4, 5)),
        "linear": lambda: _case(T.linear, (2, 3, 4), (5, 4), (5,)),
        "softmax": lambda: _case(lambda x: T.softmax(x, axis=-1), (3, 5)),
        "log_softmax": lambda: _case(lambda x: T.log_softmax(x, axis=-1), (3, 5)),
        "layer_norm": lambda: _case(T.layer_norm, (3, 6), (6,), (6,)),
        "l2_normalize": lambda: _case(T.l2_normalize, (3, 5)),
        "cosine_sim_matrix": lambda: _case(T.cosine_sim_matrix, (3, 5), (4, 5)),
        "embedding_lookup": lambda: _case(lambda tab: T.embedding_lookup(tab, ids), (6, 3)),
        "rotary": lambda: _case(lambda x: T.rotary(x, cos, sin), (2, 5, 4)),
        "cross_entropy": lambda: _case(scalar_ce, (2, 4, 7)),
        "kl_div": lambda: _case(scalar_kl, (2, 4, 7)),
    }


PRIMITIVES = tuple(_primitive_cases())


def check_primitive(name: str, eps: float = 1e-6) -> GradCheckReport:
    with T.precision(np.float64):
        f, xs = _primitive_cases()[name]()
        return grad_check(f, xs, eps=eps, tol=PRIMITIVE_TOL)


def small_model_check(seed: int = 0, n_layers: int = 2, max_entries: int = 12) -> GradCheckReport:
    """NTP loss of a tiny LoRA model under a compression mask, every tensor probed."""
    from .model import ModelConfig, init_params, trainable_names

    cfg = ModelConfig(vocab_text=9, vocab_patch=5, d_model=8, n_layers=n_layers, n_heads=2, d_ff=16, n_comp_tokens=2, max_seq_len=16, lora_rank=2)
    rng = np.random.default_rng(seed)
    with T.precision(np.float64):
        params = init_params(cfg, seed)
        # nonzero adapters and head so every path carries gradient
        for name, t in params.items():
            if name.endswith("lora_b") or name == "head.weight":
                t.data[...] = rng.normal(scale=0.3, size=t.shape)
        layout = SegmentLayout(3, 2, 4)
        tokens = np.concatenate([cfg.patch_offset + rng.integers(0, 5, 3), cfg.comp_ids(), rng.integers(0, 9, 4)])
        mask = build_compression_mask(layout)
        targets = np.roll(tokens, -1)
        lm = np.zeros(layout.total, dtype=bool)
        lm[layout.len_input + layout.len_comp : -1] = True
        from .model import forward

        def f():
            return T.cross_entropy(forward(params, cfg, tokens, mask).logits, targets, lm)

        xs = [params[n] for n in trainable_names(params, "full")]
        return grad_check(f, xs, tol=MODEL_TOL, max_entries=max_entries, seed=seed)


def run_all(model: bool = True) -> dict[str, GradCheckReport]:
    out = {name: check_primitive(name) for name in PRIMITIVES}
    if model:
        out["model"] = small_model_check()
    return out
