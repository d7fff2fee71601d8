"""Deterministic symbolic images, QA dialogues and retrieval pairs.

An image is a G×G grid; each occupied cell holds an object with a color, a
shape and a size. Every cell becomes two patch tokens (color, sized shape) in
row-major order, so distinct images always give distinct token sequences.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

COLORS = ("red", "green", "blue", "yellow", "purple", "orange")
SHAPES = ("circle", "square", "triangle", "star", "heart")
SIZES = ("small", "large")
NUMBERS = (
    "zero one two three four five six seven eight nine ten eleven twelve "
    "thirteen fourteen fifteen sixteen"
).split()
FORMATS = ("multi_turn", "single_turn", "single_turn_split", "description")
TASKS = ("t2i", "i2t", "i2i", "class")
FAMILIES = ("attribute", "count", "spatial", "compare", "gist")

_WORDS = (
    "<pad> <eos> ? . what which how many is are the object objects at row column in "
    "image there do and have same color shape size more than yes no describe a find "
    "with"
).split()
TEXT_VOCAB = tuple(_WORDS) + COLORS + SHAPES + SIZES + tuple(n for n in NUMBERS if n not in _WORDS)
PATCH_VOCAB = (
    tuple(f"c:{c}" for c in COLORS)
    + ("c:none",)
    + tuple(f"s:{z}-{s}" for s in SHAPES for z in SIZES)
    + ("s:none",)
)
EOS = "<eos>"


class Tokenizer:
    """Whitespace tokenizer over the closed text vocabulary plus patch ids.

    Model ids: text words in [0, vocab_text), patches in
    [vocab_text, vocab_text + vocab_patch).
    """

    def __init__(self):
        self.words = TEXT_VOCAB
        self.word_id = {w: i for i, w in enumerate(self.words)}
        self.patch_id = {p: i for i, p in enumerate(PATCH_VOCAB)}

    @property
    def vocab_text(self) -> int:
        return len(self.words)

    @property
    def vocab_patch(self) -> int:
        return len(PATCH_VOCAB)

    @property
    def eos_id(self) -> int:
        return self.word_id[EOS]

    def encode(self, text: str) -> list[int]:
        try:
            return [self.word_id[w] for w in text.split()]
        except KeyError as e:
            raise ValueError(f"word {e.args[0]!r} is not in the text vocabulary") from None

    def decode(self, ids) -> str:
        return " ".join(self.token_str(i) for i in ids)

    def token_str(self, i: int) -> str:
        i = int(i)
        if i < self.vocab_text:
            return self.words[i]
        if i < self.vocab_text + self.vocab_patch:
            return PATCH_VOCAB[i - self.vocab_text]
        return f"<C{i - self.vocab_text - self.vocab_patch}>"

    def encode_image(self, image: SymbolicImage) -> list[int]:
        off = self.vocab_text
        out = []
        for cell in image.cells():
            if cell is None:
                out += [off + self.patch_id["c:none"], off + self.patch_id["s:none"]]
            else:
                color, shape, size = cell
                out += [off + self.patch_id[f"c:{color}"], off + self.patch_id[f"s:{size}-{shape}"]]
        return out


TOKENIZER = Tokenizer()


@dataclass
class SymbolicImage:
    grid: list  # G rows of G cells; a cell is None or [color, shape, size]
    id: str = ""
    seed: int = 0

    @property
    def size(self) -> int:
        return len(self.grid)

    def cells(self):
        for row in self.grid:
            yield from row

    def objects(self) -> list[tuple[int, int, str, str, str]]:
        """(row, col, color, shape, size) for occupied cells, row-major, 0-based."""
        return [
            (r, c, cell[0], cell[1], cell[2])
            for r, row in enumerate(self.grid)
            for c, cell in enumerate(row)
            if cell is not None
        ]

    def key(self) -> tuple:
        return tuple(tuple(cell) if cell else None for cell in self.cells())

    def multiset(self) -> tuple:
        return tuple(sorted((o[3], o[2]) for o in self.objects()))


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def record_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


def gen_image(seed: int, grid_size: int = 4, min_objects: int = 2, max_objects: int = 5, image_id: str = "") -> SymbolicImage:
    rng = _rng(seed)
    n_cells = grid_size * grid_size
    lo, hi = min(max(min_objects, 1), n_cells), min(max_objects, n_cells)
    n = int(rng.integers(lo, max(lo, hi) + 1))
    cells = rng.choice(n_cells, size=n, replace=False)
    grid = [[None] * grid_size for _ in range(grid_size)]
    for cell in sorted(cells):
        grid[cell // grid_size][cell % grid_size] = [
            COLORS[rng.integers(len(COLORS))],
            SHAPES[rng.integers(len(SHAPES))],
            SIZES[rng.integers(len(SIZES))],
        ]
    return SymbolicImage(grid, image_id, seed)


def shuffled_copy(image: SymbolicImage, seed: int, image_id: str = "") -> SymbolicImage:
    """Same objects placed in a different set of cells."""
    rng = _rng(seed)
    g = image.size
    objs = [list(o[2:]) for o in image.objects()]
    if len(objs) == g * g and len({tuple(o) for o in objs}) == 1:
        raise ValueError("image has no distinct rearrangement")
    while True:
        cells = rng.choice(g * g, size=len(objs), replace=False)
        order = rng.permutation(len(objs))
        grid = [[None] * g for _ in range(g)]
        for cell, j in zip(cells, order):
            grid[cell // g][cell % g] = objs[j]
        out = SymbolicImage(grid, image_id, seed)
        if out.key() != image.key():
            return out


# -- dialogues -----------------------------------------------------------


@dataclass
class Dialogue:
    turns: list[tuple[str, str]]
    format: str


def _num(n: int) -> str:
    return NUMBERS[n]


def _object_clause(o) -> str:
    r, c, color, shape, size = o
    return f"a {size} {color} {shape} at row {_num(r + 1)} column {_num(c + 1)} ."


def describe(image: SymbolicImage) -> str:
    return " ".join(_object_clause(o) for o in image.objects())


def _ask_attribute(image, rng):
    r, c, color, shape, size = image.objects()[rng.integers(len(image.objects()))]
    attr = ("color", "shape", "size")[rng.integers(3)]
    q = f"what {attr} is the object at row {_num(r + 1)} column {_num(c + 1)} ?"
    return q, {"color": color, "shape": shape, "size": size}[attr]


def _ask_count(image, rng):
    pools = (COLORS, SHAPES, SIZES)
    pool = pools[rng.integers(3)]
    value = pool[rng.integers(len(pool))]
    q = f"how many {value} objects are there ?"
    return q, answer_question(image, q)


def _unique_pairs(image):
    counts = Counter((o[2], o[3]) for o in image.objects())
    return [o for o in image.objects() if counts[(o[2], o[3])] == 1]


def _ask_spatial(image, rng):
    cands = _unique_pairs(image)
    if not cands:
        return None
    o = cands[rng.integers(len(cands))]
    axis = ("row", "column")[rng.integers(2)]
    q = f"which {axis} is the {o[2]} {o[3]} in ?"
    return q, answer_question(image, q)


def _ask_compare(image, rng):
    objs = image.objects()
    if len(objs) < 2:
        return None
    i, j = rng.choice(len(objs), size=2, replace=False)
    a, b = objs[i], objs[j]
    attr = ("color", "shape", "size")[rng.integers(3)]
    q = (
        f"do the objects at row {_num(a[0] + 1)} column {_num(a[1] + 1)} and row {_num(b[0] + 1)} "
        f"column {_num(b[1] + 1)} have the same {attr} ?"
    )
    return q, answer_question(image, q)


def _ask_gist(image, rng):
    if rng.integers(2):
        q = "how many objects are in the image ?"
    else:
        q = "are there more large objects than small objects ?"
    return q, answer_question(image, q)


_ASKERS = {
    "attribute": _ask_attribute,
    "count": _ask_count,
    "spatial": _ask_spatial,
    "compare": _ask_compare,
    "gist": _ask_gist,
}

_NUM = "(" + "|".join(NUMBERS) + ")"
_PATTERNS = [
    ("attribute", re.compile(rf"^what (color|shape|size) is the object at row {_NUM} column {_NUM} \?$")),
    ("count", re.compile(r"^how many (\w+) objects are there \?$")),
    ("spatial", re.compile(r"^which (row|column) is the (\w+) (\w+) in \?$")),
    ("compare", re.compile(rf"^do the objects at row {_NUM} column {_NUM} and row {_NUM} column {_NUM} have the same (color|shape|size) \?$")),
    ("total", re.compile(r"^how many objects are in the image \?$")),
    ("more", re.compile(r"^are there more large objects than small objects \?$")),
    ("describe", re.compile(r"^describe the image \.$")),
]


def answer_question(image: SymbolicImage, question: str) -> str:
    """Ground truth for any templated question, by scanning the grid."""
    idx = {"color": 0, "shape": 1, "size": 2}
    for kind, pat in _PATTERNS:
        m = pat.match(question)
        if not m:
            continue
        g = m.groups()
        if kind == "attribute":
            cell = image.grid[NUMBERS.index(g[1]) - 1][NUMBERS.index(g[2]) - 1]
            if cell is None:
                raise ValueError(f"no object at the cell asked about: {question!r}")
            return cell[idx[g[0]]]
        if kind == "count":
            n = 0
            for cell in image.cells():
                if cell is not None and g[0] in cell:
                    n += 1
            return _num(n)
        if kind == "spatial":
            hits = [
                (r, c)
                for r, row in enumerate(image.grid)
                for c, cell in enumerate(row)
                if cell is not None and cell[0] == g[1] and cell[1] == g[2]
            ]
            if len(hits) != 1:
                raise ValueError(f"spatial question does not pick a unique object: {question!r}")
            r, c = hits[0]
            return _num((r if g[0] == "row" else c) + 1)
        if kind == "compare":
            a = image.grid[NUMBERS.index(g[0]) - 1][NUMBERS.index(g[1]) - 1]
            b = image.grid[NUMBERS.index(g[2]) - 1][NUMBERS.index(g[3]) - 1]
            if a is None or b is None:
                raise ValueError(f"comparison refers to an empty cell: {question!r}")
            return "yes" if a[idx[g[4]]] == b[idx[g[4]]] else "no"
        if kind == "total":
            return _num(sum(cell is not None for cell in image.cells()))
        if kind == "more":
            sizes = [cell[2] for cell in image.cells() if cell is not None]
            return "yes" if sizes.count("large") > sizes.count("small") else "no"
        return describe(image)
    raise ValueError(f"question does not match any template: {question!r}")


def gen_dialogue(image: SymbolicImage, format: str, seed: int) -> Dialogue:
    if format not in FORMATS:
        raise ValueError(f"unknown dialogue format {format!r}")
    rng = _rng(seed)
    if format == "description":
        return Dialogue([("describe the image .", describe(image))], format)
    n_turns = 1 if format == "single_turn" else int(rng.integers(3, 6))
    turns = []
    for fam in rng.permutation(FAMILIES):
        qa = _ASKERS[fam](image, rng)
        if qa is not None:
            turns.append(qa)
        if len(turns) == n_turns:
            break
    return Dialogue(turns, format)


# -- dataset records -----------------------------------------------------


@dataclass
class Record:
    id: str
    grid: list
    turns: list[tuple[str, str]]
    format: str

    @property
    def image(self) -> SymbolicImage:
        return SymbolicImage(self.grid, self.id.split("/")[0])

    def to_json(self) -> str:
        return json.dumps(
            {"id": self.id, "grid": self.grid, "turns": [list(t) for t in self.turns], "format": self.format},
            separators=(",", ":"),
        )


def records_for(image: SymbolicImage, dialogue: Dialogue) -> list[Record]:
    if dialogue.format == "single_turn_split":
        return [Record(f"{image.id}/{i}", image.grid, [t], dialogue.format) for i, t in enumerate(dialogue.turns)]
    return [Record(image.id, image.grid, list(dialogue.turns), dialogue.format)]


def gen_images(n: int, master_seed: int, grid_size: int = 4, min_objects: int = 2, max_objects: int = 5, offset: int = 0) -> list[SymbolicImage]:
    return [
        gen_image(record_seed(master_seed, i), grid_size, min_objects, max_objects, image_id=f"img{i:06d}")
        for i in range(offset, offset + n)
    ]


def gen_corpus(n: int, master_seed: int, format: str = "multi_turn", grid_size: int = 4, min_objects: int = 2, max_objects: int = 5, offset: int = 0) -> list[Record]:
    records = []
    for img in gen_images(n, master_seed, grid_size, min_objects, max_objects, offset):
        dialogue = gen_dialogue(img, format, img.seed ^ 0x5EED)
        records += records_for(img, dialogue)
    return records


class DatasetFormatError(ValueError):
    def __init__(self, line_no: int, msg: str):
        super().__init__(f"line {line_no}: {msg}")
        self.line_no = line_no


def write_dataset(records, path: str | Path):
    Path(path).write_text("".join(r.to_json() + "\n" for r in records))


def read_dataset(path: str | Path) -> list[Record]:
    out = []
    for i, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise DatasetFormatError(i, f"malformed JSON ({e.msg})") from None
        missing = {"id", "grid", "turns", "format"} - set(obj)
        if missing:
            raise DatasetFormatError(i, f"missing fields {sorted(missing)}")
        if obj["format"] not in FORMATS:
            raise DatasetFormatError(i, f"unknown format {obj['format']!r}")
        out.append(Record(obj["id"], obj["grid"], [tuple(t) for t in obj["turns"]], obj["format"]))
    return out


# -- retrieval pairs -----------------------------------------------------


@dataclass
class RetrievalPair:
    task: str
    query: list[int]
    positive: list[int]
    query_id: str
    positive_id: str
    meta: dict = field(default_factory=dict)


class CorpusTooSmallError(ValueError):
    pass


def _attrs(image) -> set:
    return {(o[4], o[2], o[3]) for o in image.objects()}


def _class_attr(image, taken_attrs, batch_images, rng):
    """A (size, color, shape) the image has that no batch image has, if any."""
    mine = _attrs(image)
    if any(a in mine for a in taken_attrs):
        return None
    mine = sorted(mine)
    rng.shuffle(mine)
    for a in mine:
        if not any(a in _attrs(other) for other in batch_images):
            return a
    return None


def gen_retrieval_pairs(images, task: str, batch_size: int, seed: int = 0, drop_last: bool = True) -> list[list[RetrievalPair]]:
    """Group query/positive pairs into batches whose positives are unambiguous.

    Within a batch no query can match another item's positive: images and
    captions are distinct, i2i attribute multisets are distinct and class
    attributes occur in exactly one batch image.
    """
    if task not in TASKS:
        raise ValueError(f"unknown retrieval task {task!r}")
    tok = TOKENIZER
    rng = _rng(seed)
    order = [images[i] for i in rng.permutation(len(images))]
    batches, cur, cur_imgs, keys, attrs = [], [], [], set(), []

    def flush():
        nonlocal cur, cur_imgs, keys, attrs
        batches.append(cur)
        cur, cur_imgs, keys, attrs = [], [], set(), []

    for img in order:
        if task in ("t2i", "i2t"):
            key = img.key()
            if key in keys:
                continue
            cap = describe(img)
            img_tok, cap_tok = tok.encode_image(img), tok.encode(cap)
            if task == "t2i":
                pair = RetrievalPair(task, cap_tok, img_tok, f"cap:{img.id}", img.id, {"caption": cap})
            else:
                pair = RetrievalPair(task, img_tok, cap_tok, img.id, f"cap:{img.id}", {"caption": cap})
        elif task == "i2i":
            key = img.multiset()
            if key in keys:
                continue
            try:
                pos = shuffled_copy(img, img.seed ^ 0x1217, image_id=f"{img.id}~i2i")
            except ValueError:
                continue
            pair = RetrievalPair(task, tok.encode_image(img), tok.encode_image(pos), img.id, pos.id, {"multiset": [list(m) for m in key]})
        else:
            attr = _class_attr(img, attrs, cur_imgs, rng)
            if attr is None:
                continue
            key = attr
            text = "find a {} {} {}".format(*attr)
            pair = RetrievalPair(task, tok.encode(text), tok.encode_image(img), f"class:{img.id}", img.id, {"size": attr[0], "color": attr[1], "shape": attr[2]})
            attrs.append(attr)
        keys.add(key)
        cur.append(pair)
        cur_imgs.append(img)
        if len(cur) == batch_size:
            flush()
    if cur and not drop_last:
        flush()
    if not batches:
        raise CorpusTooSmallError(
            f"{len(images)} images cannot fill one {task} batch of {batch_size} with unique positives"
        )
    return batches
