"""Run configuration: one TOML file with [model], [data], [pretrain],
[contrastive] and [paths] sections plus a top-level master ``seed``."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .contrastive import ContrastiveConfig
from .data import FORMATS, TASKS, TOKENIZER
from .model import ModelConfig
from .pretrain import PretrainConfig


class ConfigError(ValueError):
    def __init__(self, problems: list[tuple[str, str]]):
        self.problems = problems
        super().__init__("\n".join(f"{path}: {msg}" for path, msg in problems))


@dataclass
class DataConfig:
    grid_size: int = 4
    min_objects: int = 2
    max_objects: int = 5
    format: str = "multi_turn"
    n_pretrain: int = 256
    n_contrastive: int = 512
    n_heldout: int = 128

    def problems(self) -> list[tuple[str, str]]:
        out = []
        if self.grid_size < 1:
            out.append(("grid_size", "must be >= 1"))
        if self.format not in FORMATS:
            out.append(("format", f"must be one of {list(FORMATS)}"))
        if self.min_objects < 1 or self.max_objects < self.min_objects:
            out.append(("max_objects", "need 1 <= min_objects <= max_objects"))
        for name in ("n_pretrain", "n_contrastive", "n_heldout"):
            if getattr(self, name) < 0:
                out.append((name, "must be >= 0"))
        return out


@dataclass
class PathsConfig:
    dataset: str = "runs/data/pretrain.jsonl"
    checkpoints: str = "runs/checkpoints"
    logs: str = "runs/logs"
    reports: str = "runs/reports"

    def resolved(self, base: Path) -> PathsConfig:
        return PathsConfig(*(str((base / getattr(self, f.name)).resolve()) for f in dataclasses.fields(self)))


@dataclass
class RunConfig:
    model: ModelConfig
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    seed: int = 0

    def sub_seed(self, name: str) -> int:
        return derive_seed(self.seed, name)

    def checkpoint(self, stage: str) -> Path:
        return Path(self.paths.checkpoints) / f"{stage}.ckpt"

    def log(self, stage: str) -> Path:
        return Path(self.paths.logs) / f"{stage}.jsonl"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("vocab_text", "vocab_patch"):
            d["model"].pop(k)
        d["contrastive"]["tasks"] = list(d["contrastive"]["tasks"])
        return d


def derive_seed(master: int, name: str) -> int:
    return int(np.random.SeedSequence([master, *name.encode()]).generate_state(1)[0])


def _build(cls, section: str, raw: dict, problems: list, **fixed):
    names = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in names or key in fixed:
            problems.append((f"{section}.{key}", "unknown field"))
    kwargs = {k: v for k, v in raw.items() if k in names and k not in fixed}
    kwargs.update(fixed)
    defaults = {f.name: f.default for f in dataclasses.fields(cls) if f.default is not dataclasses.MISSING}
    for k, v in kwargs.items():
        ref = defaults.get(k)
        if isinstance(ref, bool) or ref is None:
            continue
        if isinstance(ref, int) and not (isinstance(v, int) and not isinstance(v, bool)):
            problems.append((f"{section}.{k}", f"expected an integer, got {v!r}"))
            return None
        if isinstance(ref, float) and not isinstance(v, (int, float)):
            problems.append((f"{section}.{k}", f"expected a number, got {v!r}"))
            return None
        if isinstance(ref, str) and not isinstance(v, str):
            problems.append((f"{section}.{k}", f"expected a string, got {v!r}"))
            return None
    if cls is ModelConfig:
        obj = object.__new__(cls)
        obj.__dict__.update({f.name: f.default for f in dataclasses.fields(cls) if f.default is not dataclasses.MISSING})
        obj.__dict__.update(kwargs)
    else:
        obj = cls(**kwargs)
    if hasattr(obj, "problems"):
        problems.extend((f"{section}.{k}", msg) for k, msg in obj.problems())
    return obj


def config_from_dict(raw: dict, base_dir: Path | None = None) -> RunConfig:
    problems: list[tuple[str, str]] = []
    known = {"seed", "model", "data", "pretrain", "contrastive", "paths"}
    problems += [(k, "unknown section") for k in raw if k not in known]
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        problems.append(("seed", f"expected an integer, got {seed!r}"))
        seed = 0
    model = _build(ModelConfig, "model", raw.get("model", {}), problems, vocab_text=TOKENIZER.vocab_text, vocab_patch=TOKENIZER.vocab_patch)
    data = _build(DataConfig, "data", raw.get("data", {}), problems)
    pre = _build(PretrainConfig, "pretrain", raw.get("pretrain", {}), problems, seed=derive_seed(seed, "pretrain"))
    craw = dict(raw.get("contrastive", {}))
    if "tasks" in craw:
        tasks = craw["tasks"]
        bad = [t for t in tasks if t not in TASKS] if isinstance(tasks, list) else [tasks]
        if bad or not tasks:
            problems.append(("contrastive.tasks", f"must be a non-empty list drawn from {list(TASKS)}"))
        craw["tasks"] = tuple(tasks) if isinstance(tasks, list) else ()
    con = _build(ContrastiveConfig, "contrastive", craw, problems, seed=derive_seed(seed, "contrastive"))
    paths = _build(PathsConfig, "paths", raw.get("paths", {}), problems)
    if problems:
        raise ConfigError(problems)
    if base_dir is not None:
        paths = paths.resolved(base_dir)
        for name in ("checkpoints", "logs", "reports"):
            p = Path(getattr(paths, name))
            if p.exists() and not p.is_dir():
                problems.append((f"paths.{name}", f"{p} exists and is not a directory"))
        if Path(paths.dataset).is_dir():
            problems.append(("paths.dataset", f"{paths.dataset} is a directory"))
    if model is not None and model.n_comp_tokens * 1 > model.max_seq_len:
        problems.append(("model.n_comp_tokens", "does not fit in max_seq_len"))
    if data is not None and model is not None:
        longest_payload = 2 * data.grid_size * data.grid_size
        if longest_payload + model.n_comp_tokens > model.max_seq_len:
            problems.append(("model.max_seq_len", f"too small for {longest_payload} patch tokens plus {model.n_comp_tokens} compression tokens"))
    if problems:
        raise ConfigError(problems)
    return RunConfig(model, data, pre, con, paths, seed)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError([("<file>", f"config file {path} not found")]) from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError([("<file>", f"invalid TOML: {e}")]) from None
    return config_from_dict(raw, path.parent)


def replace_model(rc: RunConfig, **changes) -> RunConfig:
    return dataclasses.replace(rc, model=dataclasses.replace(rc.model, **changes))
