"""Tokenizer, special-token inventory and the triple serialization template.

A triple (h, r, t) becomes::

    <s> [H] h... </s> </s> [R] r... </s> </s> [T] t... [E]

The query prefix ends at ``[T]``; the tail subtokens and ``[E]`` are the
generation target.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .numerics import ContractError

BOS, SEP, HEAD, REL, TAIL, END, PAD, UNK = "<s>", "</s>", "[H]", "[R]", "[T]", "[E]", "<pad>", "<unk>"
SPECIAL_TOKENS = (BOS, SEP, HEAD, REL, TAIL, END, PAD, UNK)
SPECIAL_NAMES = ("bos", "sep", "head", "rel", "tail", "end", "pad", "unk")

DEFAULT_MAX_SEQ_LEN = 35
MODES = ("char", "word")


class SequenceTooLong(ValueError):
    pass


class Vocabulary:
    def __init__(self, tokens: list[str], mode: str = "char"):
        if mode not in MODES:
            raise ContractError(f"unknown tokenizer mode {mode!r}")
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ContractError("vocabulary must start with the special tokens")
        if len(set(tokens)) != len(tokens):
            raise ContractError("duplicate tokens in vocabulary")
        self.mode = mode
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        (self.bos, self.sep, self.head, self.rel, self.tail,
         self.end, self.pad, self.unk) = range(len(SPECIAL_TOKENS))

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.mode == other.mode and self.tokens == other.tokens

    @property
    def specials(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(SPECIAL_NAMES)}

    def split(self, text: str) -> list[str]:
        return list(text) if self.mode == "char" else text.split()

    def encode(self, text: str) -> list[int]:
        return [self.index.get(piece, self.unk) for piece in self.split(text)]

    def decode(self, ids: Iterable[int]) -> str:
        """Inverse of ``encode`` for plain text; special tokens are rendered inline."""
        out: list[str] = []
        prev_plain = False
        for i in ids:
            tok = self.tokens[i]
            plain = i >= len(SPECIAL_TOKENS)
            if self.mode == "word" and plain and prev_plain:
                out.append(" ")
            out.append(tok)
            prev_plain = plain
        return "".join(out)

    def to_json(self) -> dict:
        return {"tokens": self.tokens, "specials": self.specials, "mode": self.mode}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        vocab = cls(list(obj["tokens"]), obj.get("mode", "char"))
        if obj.get("specials", vocab.specials) != vocab.specials:
            raise ContractError("special token ids in file do not match this build")
        return vocab

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), ensure_ascii=False, indent=1) + "\n",
                              encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_json(), ensure_ascii=False, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


def build_vocab(graphs, mode: str = "char") -> Vocabulary:
    """Vocabulary over every entity and relation surface form of ``graphs``.

    Plain tokens are sorted so that id assignment does not depend on input order.
    """
    if mode not in MODES:
        raise ContractError(f"unknown tokenizer mode {mode!r}")
    surfaces: list[str] = []
    for g in graphs:
        surfaces.extend(g.entities.values())
        surfaces.extend(g.relations.values())
    if not surfaces:
        raise ContractError("cannot build a vocabulary from an empty corpus")
    pieces: set[str] = set()
    for s in surfaces:
        pieces.update(list(s) if mode == "char" else s.split())
    pieces -= set(SPECIAL_TOKENS)
    return Vocabulary(list(SPECIAL_TOKENS) + sorted(pieces), mode)


@dataclass(frozen=True)
class SerializedTriple:
    """Token ids of one serialized triple (or query prefix) with role positions.

    Spans are half-open ``(start, stop)`` index ranges. ``tail_span`` is empty and
    ``pos_e`` is ``None`` for a query prefix.
    """

    ids: tuple[int, ...]
    head_span: tuple[int, int]
    rel_span: tuple[int, int]
    tail_span: tuple[int, int]
    pos_h: int
    pos_r: int
    pos_t: int
    pos_e: int | None
    query_len: int

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def is_query(self) -> bool:
        return self.pos_e is None and len(self.ids) == self.query_len

    @property
    def target_ids(self) -> tuple[int, ...]:
        return self.ids[self.query_len:]

    def with_tail(self, tail_ids: Iterable[int]) -> "SerializedTriple":
        """Query prefix extended by (possibly partial) tail ids, no ``[E]``."""
        tail_ids = tuple(tail_ids)
        ids = self.ids[: self.query_len] + tail_ids
        return SerializedTriple(ids, self.head_span, self.rel_span,
                                (self.query_len, self.query_len + len(tail_ids)),
                                self.pos_h, self.pos_r, self.pos_t, None, self.query_len)


def _serialize(head: str, relation: str, tail: str | None, vocab: Vocabulary,
               max_seq_len: int, what: str) -> SerializedTriple:
    h = vocab.encode(head)
    r = vocab.encode(relation)
    ids = [vocab.bos, vocab.head]
    head_span = (len(ids), len(ids) + len(h))
    ids += h + [vocab.sep, vocab.sep, vocab.rel]
    pos_r = len(ids) - 1
    rel_span = (len(ids), len(ids) + len(r))
    ids += r + [vocab.sep, vocab.sep, vocab.tail]
    pos_t = len(ids) - 1
    query_len = len(ids)
    pos_e = None
    tail_span = (query_len, query_len)
    if tail is not None:
        t = vocab.encode(tail)
        tail_span = (query_len, query_len + len(t))
        ids += t + [vocab.end]
        pos_e = len(ids) - 1
    if len(ids) > max_seq_len:
        raise SequenceTooLong(f"{what} serializes to {len(ids)} tokens, above max_seq_len={max_seq_len}")
    return SerializedTriple(tuple(ids), head_span, rel_span, tail_span, 1, pos_r, pos_t, pos_e, query_len)


def serialize_triple(head: str, relation: str, tail: str, vocab: Vocabulary,
                     max_seq_len: int = DEFAULT_MAX_SEQ_LEN) -> SerializedTriple:
    return _serialize(head, relation, tail, vocab, max_seq_len, f"triple ({head!r}, {relation!r}, {tail!r})")


def serialize_query(head: str, relation: str, vocab: Vocabulary,
                    max_seq_len: int = DEFAULT_MAX_SEQ_LEN) -> SerializedTriple:
    return _serialize(head, relation, None, vocab, max_seq_len, f"query ({head!r}, {relation!r}, ?)")


def template_text(head: str, relation: str, tail: str | None = None) -> str:
    """The template string a serialized triple decodes to (char mode)."""
    text = f"{BOS}{HEAD}{head}{SEP}{SEP}{REL}{relation}{SEP}{SEP}{TAIL}"
    return text if tail is None else f"{text}{tail}{END}"
