"""Segment layouts and the compression attention mask.

A sequence is INPUT ⊕ COMPRESSION ⊕ QA. Input rows are causal over the input,
compression rows see the whole input plus earlier compression tokens, and QA
rows see every compression token plus earlier QA tokens but never the input.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np

from .tensor import MASK_VALUE


class Segment(IntEnum):
    INPUT = 0
    COMPRESSION = 1
    QUESTION = 2
    ANSWER = 3
    PAD = 4


@dataclass(frozen=True)
class SegmentLayout:
    len_input: int
    len_comp: int
    len_qa: int = 0

    def __post_init__(self):
        if min(self.len_input, self.len_comp, self.len_qa) < 0:
            raise ValueError(f"segment lengths must be >= 0, got {self}")
        if self.len_qa >= 1 and self.len_comp < 1:
            raise ValueError("a conversational segment needs at least one compression token")

    @property
    def total(self) -> int:
        return self.len_input + self.len_comp + self.len_qa

    @property
    def comp_slice(self) -> slice:
        return slice(self.len_input, self.len_input + self.len_comp)

    @property
    def qa_slice(self) -> slice:
        return slice(self.len_input + self.len_comp, self.total)


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def build_compression_mask(layout: SegmentLayout) -> np.ndarray:
    """Boolean (T, T) mask, True where row may attend to column."""
    mask = causal_mask(layout.total)
    mask[layout.qa_slice, : layout.len_input] = False
    return mask


def additive(mask: np.ndarray, dtype=np.float32) -> np.ndarray:
    return np.where(mask, 0.0, MASK_VALUE).astype(dtype)


def pad_mask(mask: np.ndarray, length: int) -> np.ndarray:
    """Embed a (t, t) mask into (length, length); pad rows attend only to themselves."""
    t = mask.shape[0]
    if length < t:
        raise ValueError(f"cannot pad a {t}-mask down to {length}")
    out = np.eye(length, dtype=bool)
    out[:t, :t] = mask
    return out


def dump_mask(mask: np.ndarray) -> str:
    return "\n".join("".join("1" if v else "0" for v in row) for row in mask) + "\n"


def load_mask(text: str) -> np.ndarray:
    rows = [line.strip() for line in text.splitlines() if line.strip()]
    if any(len(r) != len(rows) or set(r) - {"0", "1"} for r in rows):
        raise ValueError("mask dump must be a square grid of 0/1 characters")
    return np.array([[c == "1" for c in r] for r in rows], dtype=bool).reshape(len(rows), len(rows))


def write_mask(mask: np.ndarray, path: str | Path):
    Path(path).write_text(dump_mask(mask))


@dataclass
class IndependenceReport:
    passed: bool
    max_logit_diff: float
    max_qa_input_mass: float
    violations: list[dict]


def verify_conditional_independence(params, config, sequence, mask: np.ndarray | None = None, logit_tol: float = 1e-5, mass_tol: float = 1e-30) -> IndependenceReport:
    """Check that QA positions depend on the input only through compression states.

    Runs the full forward (under ``mask``, default the compression mask), then
    recomputes QA logits from compression-position states alone and compares.
    Also inspects every layer/head for attention mass from QA rows onto input
    columns.
    """
    from .model import forward, replay_qa
    from .tensor import no_grad

    layout = sequence.layout
    if mask is None:
        mask = build_compression_mask(layout)
    if layout.len_input == 0 or layout.len_qa == 0:
        return IndependenceReport(True, 0.0, 0.0, [])
    with no_grad():
        full = forward(params, config, sequence.tokens, mask, record_attention=True)
        replay = replay_qa(params, config, sequence.tokens, layout, full.hidden)
    diff = float(np.max(np.abs(full.logits.data[layout.qa_slice] - replay.data)))
    violations = []
    worst_mass = 0.0
    for li, probs in enumerate(full.attention):
        mass = probs[:, layout.qa_slice, : layout.len_input].sum(axis=-1)  # (H, len_qa)
        worst_mass = max(worst_mass, float(mass.max()))
        for h, row in zip(*np.nonzero(mass >= mass_tol)):
            violations.append({"layer": li, "head": int(h), "row": int(layout.len_input + layout.len_comp + row), "mass": float(mass[h, row])})
    if diff >= logit_tol:
        violations.append({"kind": "replay", "max_logit_diff": diff})
    return IndependenceReport(not violations, diff, worst_mass, violations)
