"""Closed word-level vocabulary and the thinking-token registry.

Every symbol is an atomic word; ids are contiguous and bijective with the
symbol list, so token counts in tests are exact. Thinking tokens are special
symbols appended after the base vocabulary, one per reasoning stage.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence


class VocabError(ValueError):
    pass


def thinking_symbol(stage_name: str) -> str:
    return f"<Thinking_of_{stage_name}>"


@dataclass(frozen=True)
class ThinkingTokenSpec:
    """Stage names and the per-stage thinking-token count policy.

    ``mode="fixed"`` emits ``tokens_per_stage`` tokens for every stage;
    ``mode="ratio"`` sizes each stage's token count as a fraction of the
    original stage text length (see ``curriculum.retention_counts``).
    """

    stage_names: tuple[str, ...] = ("Summary", "Caption", "Reasoning")
    tokens_per_stage: int = 1
    mode: str = "fixed"
    ratio: float | None = None

    def __post_init__(self) -> None:
        if len(self.stage_names) < 1:
            raise VocabError("ThinkingTokenSpec needs at least one stage")
        if len(set(self.stage_names)) != len(self.stage_names):
            raise VocabError("stage names must be unique")
        if self.tokens_per_stage < 1:
            raise VocabError("tokens_per_stage must be >= 1")
        if self.mode not in ("fixed", "ratio"):
            raise VocabError(f"unknown mode {self.mode!r}")
        if self.mode == "ratio":
            if self.ratio is None or not (0.0 < self.ratio <= 1.0):
                raise VocabError("ratio mode requires 0 < ratio <= 1")

    @property
    def num_stages(self) -> int:
        return len(self.stage_names)

    def token_symbols(self) -> tuple[str, ...]:
        return tuple(thinking_symbol(n) for n in self.stage_names)


@dataclass(frozen=True)
class Vocab:
    """Immutable symbol table; safe to share across threads read-only."""

    symbols: tuple[str, ...]
    base_size: int
    reserved: frozenset[int]
    thinking_ids: tuple[int, ...]
    _id_of: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "_id_of", {s: i for i, s in enumerate(self.symbols)})
        if len(self._id_of) != len(self.symbols):
            raise VocabError("duplicate symbols in vocabulary")

    @property
    def size(self) -> int:
        return len(self.symbols)

    def __len__(self) -> int:
        return len(self.symbols)

    def __contains__(self, symbol: str) -> bool:
        return symbol in self._id_of

    def id(self, symbol: str) -> int:
        try:
            return self._id_of[symbol]
        except KeyError:
            raise VocabError(f"unknown symbol {symbol!r}") from None

    def symbol(self, idx: int) -> str:
        if not 0 <= idx < len(self.symbols):
            raise VocabError(f"id {idx} out of range [0, {len(self.symbols)})")
        return self.symbols[idx]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        ids = []
        for pos, tok in enumerate(tokens):
            idx = self._id_of.get(tok)
            if idx is None:
                raise VocabError(f"unknown symbol {tok!r} at position {pos}")
            ids.append(idx)
        return ids

    def decode(self, ids: Iterable[int]) -> list[str]:
        out = []
        n = len(self.symbols)
        for pos, idx in enumerate(ids):
            i = int(idx)
            if not 0 <= i < n:
                raise VocabError(f"id {i} out of range at position {pos}")
            out.append(self.symbols[i])
        return out

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.symbols).encode("utf-8")).hexdigest()

    def save(self, path) -> str:
        """Write one symbol per line with a digest header; returns the digest."""
        d = self.digest()
        header = (
            f"# latentcot-vocab v1 digest=sha256:{d} base={self.base_size}"
            f" reserved={','.join(str(i) for i in sorted(self.reserved))}"
            f" thinking={','.join(str(i) for i in self.thinking_ids)}\n"
        )
        with open(path, "w", encoding="utf-8") as f:
            f.write(header)
            for s in self.symbols:
                f.write(s + "\n")
        return d

    @staticmethod
    def load(path) -> "Vocab":
        with open(path, "r", encoding="utf-8") as f:
            header = f.readline().rstrip("\n")
            symbols = tuple(line.rstrip("\n") for line in f)
        fields = dict(
            part.split("=", 1) for part in header.split() if "=" in part
        )
        want = fields.get("digest", "").removeprefix("sha256:")
        got = hashlib.sha256("\n".join(symbols).encode("utf-8")).hexdigest()
        if want != got:
            raise VocabError(f"vocab digest mismatch: header {want} vs content {got}")
        reserved = frozenset(
            int(x) for x in fields.get("reserved", "").split(",") if x
        )
        thinking = tuple(int(x) for x in fields.get("thinking", "").split(",") if x)
        return Vocab(
            symbols=symbols,
            base_size=int(fields["base"]),
            reserved=reserved,
            thinking_ids=thinking,
        )


def build_vocab(
    categories: Sequence[tuple[str, Sequence[str]]],
    reserved_category: str = "structural",
) -> Vocab:
    """Build the base vocabulary from grammar categories.

    Symbols are sorted lexicographically within each category and categories
    keep their given order, so the id assignment is a pure function of the
    grammar. Duplicate symbols (within or across categories) are rejected.
    """
    symbols: list[str] = []
    seen: dict[str, str] = {}
    reserved_ids: set[int] = set()
    for cat_name, cat_symbols in categories:
        for sym in sorted(cat_symbols):
            if not sym or any(ch.isspace() for ch in sym):
                raise VocabError(f"invalid symbol {sym!r} in category {cat_name!r}")
            if sym in seen:
                raise VocabError(
                    f"duplicate symbol {sym!r} in category {cat_name!r}"
                    f" (already in {seen[sym]!r})"
                )
            seen[sym] = cat_name
            if cat_name == reserved_category:
                reserved_ids.add(len(symbols))
            symbols.append(sym)
    if not symbols:
        raise VocabError("no symbols")
    return Vocab(
        symbols=tuple(symbols),
        base_size=len(symbols),
        reserved=frozenset(reserved_ids),
        thinking_ids=(),
    )


def register_thinking_tokens(v: Vocab, spec: ThinkingTokenSpec) -> Vocab:
    """Append one unique special token per stage, after all base ids."""
    if v.thinking_ids:
        raise VocabError("thinking tokens already registered")
    new_symbols = []
    for name in spec.stage_names:
        sym = thinking_symbol(name)
        if sym in v:
            raise VocabError(f"thinking token for stage {name!r} collides with {sym!r}")
        new_symbols.append(sym)
    n0 = v.size
    return Vocab(
        symbols=v.symbols + tuple(new_symbols),
        base_size=v.base_size,
        reserved=v.reserved,
        thinking_ids=tuple(range(n0, n0 + len(new_symbols))),
    )
