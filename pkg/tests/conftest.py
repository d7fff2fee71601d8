import numpy as np
import pytest

from compemb.config import config_from_dict
from compemb.data import TOKENIZER
from compemb.model import ModelConfig

TOY_MODEL = {"d_model": 64, "n_layers": 2, "n_heads": 4, "d_ff": 256, "n_comp_tokens": 16}


def toy_config(seed=0, **sections):
    raw = {"seed": seed, "model": dict(TOY_MODEL)}
    for name, values in sections.items():
        raw.setdefault(name, {}).update(values)
    return config_from_dict(raw)


def tiny_model_config(**kw):
    base = dict(vocab_text=TOKENIZER.vocab_text, vocab_patch=TOKENIZER.vocab_patch, d_model=16, n_layers=2, n_heads=2, d_ff=32, n_comp_tokens=4, max_seq_len=160, lora_rank=4)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny():
    return tiny_model_config()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
