"""Deterministic grid-VQA generator: toy stand-ins for staged-reasoning data.

Each sample is a colored-shape grid serialized as a token prefix, a question,
three gold reasoning-stage texts (summary / caption / reasoning), and an
answer that is fully derivable from the grid and question alone.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .vocab import Vocab, build_vocab

DEFAULT_COLORS = ("red", "green", "blue", "yellow")
DEFAULT_SHAPES = ("circle", "square", "triangle", "star")
QUESTION_KINDS = (
    "count-color",
    "count-shape",
    "count-pair",
    "exists",
    "attribute-of-unique",
    "compare-counts",
)
DEFAULT_STAGE_NAMES = ("Summary", "Caption", "Reasoning")

PAD, BOS, EOS = "<PAD>", "<BOS>", "<EOS>"
IMG_OPEN, IMG_CLOSE = "<IMG>", "</IMG>"
ANS_OPEN, ANS_CLOSE = "<ANSWER>", "</ANSWER>"
EMPTY_CELL = "empty"

# Offset separating test-sample indices from train indices, so the two splits
# can never share an id.
TEST_INDEX_OFFSET = 1_000_000

SCHEMA_VERSION = 1

# Words used by question / stage / explanatory-prompt templates.  Color,
# shape, digit, and marker symbols live in their own categories.
_TEMPLATE_WORDS = (
    "how many cells ? is there a cell what shape color are more than "
    "the question asks for number of in grid whether contains unique "
    "outnumber . : ; checking each matches count = found yes no verdict "
    "according to can you explain thinking progress ,"
).split()


class TaskGenError(ValueError):
    pass


@dataclass(frozen=True)
class GenConfig:
    grid_size: int = 4
    colors: tuple[str, ...] = DEFAULT_COLORS
    shapes: tuple[str, ...] = DEFAULT_SHAPES
    question_kinds: tuple[str, ...] = QUESTION_KINDS
    fill_probability: float = 0.5
    seed: int = 0
    stage_names: tuple[str, ...] = DEFAULT_STAGE_NAMES

    def __post_init__(self) -> None:
        if self.grid_size < 2:
            raise TaskGenError("grid_size must be >= 2")
        if not self.question_kinds:
            raise TaskGenError("at least one question kind must be enabled")
        for k in self.question_kinds:
            if k not in QUESTION_KINDS:
                raise TaskGenError(f"unknown question kind {k!r}")
        if not 0.0 <= self.fill_probability <= 1.0:
            raise TaskGenError("fill_probability must be in [0, 1]")


@dataclass(frozen=True)
class Sample:
    id: int
    visual_tokens: tuple[str, ...]
    question_tokens: tuple[str, ...]
    stages: tuple[tuple[str, ...], ...]
    answer_tokens: tuple[str, ...]
    meta: dict = field(compare=False)

    def to_record(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "id": self.id,
            "visual": list(self.visual_tokens),
            "question": list(self.question_tokens),
            "stages": [list(s) for s in self.stages],
            "answer": list(self.answer_tokens),
            "meta": self.meta,
        }

    @staticmethod
    def from_record(rec: dict) -> "Sample":
        if rec.get("schema_version") != SCHEMA_VERSION:
            raise TaskGenError(f"unsupported sample schema {rec.get('schema_version')!r}")
        return Sample(
            id=int(rec["id"]),
            visual_tokens=tuple(rec["visual"]),
            question_tokens=tuple(rec["question"]),
            stages=tuple(tuple(s) for s in rec["stages"]),
            answer_tokens=tuple(rec["answer"]),
            meta=rec["meta"],
        )


def grammar_categories(cfg: GenConfig) -> list[tuple[str, list[str]]]:
    """Symbol inventory for ``vocab.build_vocab``, grouped by category."""
    structural = [PAD, BOS, EOS, IMG_OPEN, IMG_CLOSE, ANS_OPEN, ANS_CLOSE]
    for name in cfg.stage_names:
        structural += [f"<{name}>", f"</{name}>"]
    cells = [f"{c}_{s}" for c in cfg.colors for s in cfg.shapes] + [EMPTY_CELL]
    positions = [
        f"r{i}c{j}"
        for i in range(1, cfg.grid_size + 1)
        for j in range(1, cfg.grid_size + 1)
    ]
    digits = [str(n) for n in range(cfg.grid_size * cfg.grid_size + 1)]
    return [
        ("structural", structural),
        ("colors", list(cfg.colors)),
        ("shapes", list(cfg.shapes)),
        ("cells", cells),
        ("positions", positions),
        ("digits", digits),
        ("words", list(dict.fromkeys(_TEMPLATE_WORDS))),
    ]


def build_task_vocab(cfg: GenConfig) -> Vocab:
    return build_vocab(grammar_categories(cfg))


def stage_markers(stage_name: str) -> tuple[str, str]:
    return f"<{stage_name}>", f"</{stage_name}>"


# ---------------------------------------------------------------------------
# grid helpers

def _cells(meta_grid: list[list]) -> list[tuple[int, int, str, str]]:
    """Non-empty cells as (row, col, color, shape), 1-based, row-major."""
    out = []
    for i, row in enumerate(meta_grid):
        for j, cell in enumerate(row):
            if cell is not None:
                out.append((i + 1, j + 1, cell[0], cell[1]))
    return out


def _matches(meta_grid, color=None, shape=None):
    return [
        c
        for c in _cells(meta_grid)
        if (color is None or c[2] == color) and (shape is None or c[3] == shape)
    ]


def _describe(color: str | None, shape: str | None) -> list[str]:
    d = []
    if color:
        d.append(color)
    if shape:
        d.append(shape)
    return d


# ---------------------------------------------------------------------------
# question instantiation

def _draw_question(rng: np.random.Generator, cfg: GenConfig, grid) -> dict:
    """Pick a feasible question kind and its arguments.

    Unsatisfiable draws (attribute-of-unique with no unique attribute value)
    are retried a bounded number of times, then fall back to count-color,
    which is always feasible.
    """
    kinds = cfg.question_kinds
    for _ in range(8):
        kind = kinds[int(rng.integers(len(kinds)))]
        if kind == "count-color":
            return {"kind": kind, "color": cfg.colors[int(rng.integers(len(cfg.colors)))]}
        if kind == "count-shape":
            return {"kind": kind, "shape": cfg.shapes[int(rng.integers(len(cfg.shapes)))]}
        if kind == "count-pair":
            return {
                "kind": kind,
                "color": cfg.colors[int(rng.integers(len(cfg.colors)))],
                "shape": cfg.shapes[int(rng.integers(len(cfg.shapes)))],
            }
        if kind == "exists":
            return {
                "kind": kind,
                "color": cfg.colors[int(rng.integers(len(cfg.colors)))],
                "shape": cfg.shapes[int(rng.integers(len(cfg.shapes)))],
            }
        if kind == "compare-counts":
            i = int(rng.integers(len(cfg.colors)))
            j = int(rng.integers(len(cfg.colors) - 1))
            if j >= i:
                j += 1
            return {"kind": kind, "color_a": cfg.colors[i], "color_b": cfg.colors[j]}
        if kind == "attribute-of-unique":
            by_color = [c for c in cfg.colors if len(_matches(grid, color=c)) == 1]
            by_shape = [s for s in cfg.shapes if len(_matches(grid, shape=s)) == 1]
            options = [("shape-of-color", c) for c in by_color]
            options += [("color-of-shape", s) for s in by_shape]
            if not options:
                continue
            variant, value = options[int(rng.integers(len(options)))]
            return {"kind": kind, "variant": variant, "value": value}
    return {"kind": "count-color", "color": cfg.colors[int(rng.integers(len(cfg.colors)))]}


def _question_tokens(q: dict) -> list[str]:
    kind = q["kind"]
    if kind == "count-color":
        return ["how", "many", q["color"], "cells", "?"]
    if kind == "count-shape":
        return ["how", "many", q["shape"], "cells", "?"]
    if kind == "count-pair":
        return ["how", "many", q["color"], q["shape"], "cells", "?"]
    if kind == "exists":
        return ["is", "there", "a", q["color"], q["shape"], "cell", "?"]
    if kind == "attribute-of-unique":
        attr = "shape" if q["variant"] == "shape-of-color" else "color"
        return ["what", attr, "is", "the", q["value"], "cell", "?"]
    if kind == "compare-counts":
        return ["are", "there", "more", q["color_a"], "cells", "than", q["color_b"], "cells", "?"]
    raise TaskGenError(f"unknown question kind {kind!r}")


def _question_filter(q: dict) -> tuple[str | None, str | None]:
    """(color, shape) predicate the question scans for, when it has one."""
    kind = q["kind"]
    if kind == "count-color":
        return q["color"], None
    if kind == "count-shape":
        return None, q["shape"]
    if kind in ("count-pair", "exists"):
        return q["color"], q["shape"]
    if kind == "attribute-of-unique":
        if q["variant"] == "shape-of-color":
            return q["value"], None
        return None, q["value"]
    return None, None


# ---------------------------------------------------------------------------
# stage rendering

def _render_summary(q: dict) -> list[str]:
    kind = q["kind"]
    if kind in ("count-color", "count-shape", "count-pair"):
        desc = _describe(q.get("color"), q.get("shape"))
        return ["the", "question", "asks", "for", "the", "number", "of", *desc,
                "cells", "in", "the", "grid", "."]
    if kind == "exists":
        return ["the", "question", "asks", "whether", "the", "grid", "contains",
                "a", q["color"], q["shape"], "cell", "."]
    if kind == "attribute-of-unique":
        attr = "shape" if q["variant"] == "shape-of-color" else "color"
        return ["the", "question", "asks", "for", "the", attr, "of", "the",
                "unique", q["value"], "cell", "."]
    if kind == "compare-counts":
        return ["the", "question", "asks", "whether", q["color_a"], "cells",
                "outnumber", q["color_b"], "cells", "."]
    raise TaskGenError(f"unknown question kind {kind!r}")


def _render_caption(grid) -> list[str]:
    cells = _cells(grid)
    if not cells:
        return ["the", "grid", "contains", "no", "cells", "."]
    toks = ["the", "grid", "contains", ":"]
    for i, j, color, shape in cells:
        toks += [f"r{i}c{j}", color, shape, ";"]
    toks.append(".")
    return toks


def _render_reasoning(q: dict, grid) -> tuple[list[str], list[str]]:
    """Returns (stage-3 tokens, answer tokens)."""
    kind = q["kind"]
    if kind == "compare-counts":
        na = len(_matches(grid, color=q["color_a"]))
        nb = len(_matches(grid, color=q["color_b"]))
        verdict = "yes" if na > nb else "no"  # ties are strict "no"
        toks = [q["color_a"], "count", "=", str(na), ";",
                q["color_b"], "count", "=", str(nb), ";",
                "verdict", "=", verdict, "."]
        return toks, [verdict]

    color, shape = _question_filter(q)
    desc = _describe(color, shape)
    matched = _matches(grid, color=color, shape=shape)
    toks = ["checking", "each", "cell", "for", *desc, ":"]
    for i, j, _c, _s in matched:
        toks += [f"r{i}c{j}", "matches", ";"]

    if kind in ("count-color", "count-shape", "count-pair"):
        n = len(matched)
        toks += ["count", "=", str(n), "."]
        return toks, [str(n)]
    if kind == "exists":
        verdict = "yes" if matched else "no"
        toks += ["found", "=", verdict, "."]
        return toks, [verdict]
    if kind == "attribute-of-unique":
        _i, _j, c, s = matched[0]
        answer = s if q["variant"] == "shape-of-color" else c
        attr = "shape" if q["variant"] == "shape-of-color" else "color"
        toks += ["the", attr, "is", answer, "."]
        return toks, [answer]
    raise TaskGenError(f"unknown question kind {kind!r}")


# ---------------------------------------------------------------------------
# public generation API

def gen_sample(cfg: GenConfig, index: int) -> Sample:
    """Pure function of (cfg.seed, index); identical calls return identical samples."""
    rng = np.random.default_rng([cfg.seed, index])
    g = cfg.grid_size
    grid: list[list] = []
    for _i in range(g):
        row = []
        for _j in range(g):
            if rng.random() < cfg.fill_probability:
                color = cfg.colors[int(rng.integers(len(cfg.colors)))]
                shape = cfg.shapes[int(rng.integers(len(cfg.shapes)))]
                row.append([color, shape])
            else:
                row.append(None)
        grid.append(row)

    q = _draw_question(rng, cfg, grid)
    question = _question_tokens(q)
    summary = _render_summary(q)
    caption = _render_caption(grid)
    reasoning, answer = _render_reasoning(q, grid)

    visual = [IMG_OPEN]
    for row in grid:
        for cell in row:
            visual.append(EMPTY_CELL if cell is None else f"{cell[0]}_{cell[1]}")
    visual.append(IMG_CLOSE)

    meta = {
        "grid": grid,
        "question": q,
        "seed": cfg.seed,
        "index": index,
    }
    return Sample(
        id=index,
        visual_tokens=tuple(visual),
        question_tokens=tuple(question),
        stages=(tuple(summary), tuple(caption), tuple(reasoning)),
        answer_tokens=tuple(answer),
        meta=meta,
    )


def answer_oracle(meta: dict) -> list[str]:
    """Recompute the answer by direct enumeration over the grid contents.

    Independent of the template renderer: counts are taken straight from the
    stored grid with explicit loops.
    """
    grid = meta["grid"]
    q = meta["question"]
    kind = q["kind"]

    def count(color=None, shape=None):
        n = 0
        for row in grid:
            for cell in row:
                if cell is None:
                    continue
                if color is not None and cell[0] != color:
                    continue
                if shape is not None and cell[1] != shape:
                    continue
                n += 1
        return n

    if kind == "count-color":
        return [str(count(color=q["color"]))]
    if kind == "count-shape":
        return [str(count(shape=q["shape"]))]
    if kind == "count-pair":
        return [str(count(color=q["color"], shape=q["shape"]))]
    if kind == "exists":
        return ["yes" if count(color=q["color"], shape=q["shape"]) > 0 else "no"]
    if kind == "compare-counts":
        return ["yes" if count(color=q["color_a"]) > count(color=q["color_b"]) else "no"]
    if kind == "attribute-of-unique":
        hits = []
        for row in grid:
            for cell in row:
                if cell is None:
                    continue
                if q["variant"] == "shape-of-color" and cell[0] == q["value"]:
                    hits.append(cell[1])
                elif q["variant"] == "color-of-shape" and cell[1] == q["value"]:
                    hits.append(cell[0])
        if len(hits) != 1:
            raise TaskGenError(f"attribute-of-unique question is not unique: {len(hits)} hits")
        return [hits[0]]
    raise TaskGenError(f"unknown question kind {kind!r}")


def split_indices(split: str, n: int) -> range:
    if split == "train":
        return range(0, n)
    if split == "test":
        return range(TEST_INDEX_OFFSET, TEST_INDEX_OFFSET + n)
    raise TaskGenError(f"unknown split {split!r}")


def gen_dataset(cfg: GenConfig, n: int, split: str, path) -> str:
    """Write n samples as JSON lines; returns the file's sha256 digest."""
    if n < 1:
        raise TaskGenError("n must be >= 1")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h = hashlib.sha256()
    with open(path, "w", encoding="utf-8") as f:
        for idx in split_indices(split, n):
            line = json.dumps(gen_sample(cfg, idx).to_record(), sort_keys=True)
            f.write(line + "\n")
            h.update((line + "\n").encode("utf-8"))
    return h.hexdigest()


def load_dataset(path) -> list[Sample]:
    samples = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                samples.append(Sample.from_record(json.loads(line)))
    return samples


def dataset_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
