"""Closed-world decoding over an entity trie."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .model import TransformerLM, build_visibility_mask
from .numerics import ContractError
from .vocab import SerializedTriple


class AmbiguousEntity(ValueError):
    pass


class _Node:
    __slots__ = ("children", "entity")

    def __init__(self):
        self.children: dict[int, _Node] = {}
        self.entity: str | None = None


class EntityTrie:
    """Prefix tree over entity token ids; a node is terminal when it ends an entity."""

    def __init__(self, lang: str | None = None):
        self.root = _Node()
        self.lang = lang
        self.size = 0

    def insert(self, entity_id: str, token_ids: Sequence[int]) -> None:
        if not token_ids:
            raise ContractError(f"entity {entity_id!r} has an empty token sequence")
        node = self.root
        for tok in token_ids:
            node = node.children.setdefault(int(tok), _Node())
        if node.entity is not None and node.entity != entity_id:
            raise AmbiguousEntity(f"entities {node.entity!r} and {entity_id!r} share the same token sequence")
        if node.entity is None:
            self.size += 1
        node.entity = entity_id

    def find(self, token_ids: Sequence[int]) -> str | None:
        node = self.root
        for tok in token_ids:
            node = node.children.get(int(tok))
            if node is None:
                return None
        return node.entity

    def __contains__(self, token_ids) -> bool:
        return self.find(token_ids) is not None

    def __len__(self) -> int:
        return self.size

    def paths(self) -> list[tuple[str, tuple[int, ...]]]:
        out = []
        stack = [(self.root, ())]
        while stack:
            node, prefix = stack.pop()
            if node.entity is not None:
                out.append((node.entity, prefix))
            for tok, child in node.children.items():
                stack.append((child, prefix + (tok,)))
        return sorted(out, key=lambda x: x[1])


def build_trie(entities: Iterable[tuple[str, Sequence[int]]], lang: str | None = None) -> EntityTrie:
    trie = EntityTrie(lang)
    for eid, ids in entities:
        trie.insert(eid, ids)
    return trie


@dataclass
class BeamHypothesis:
    tokens: tuple[int, ...]
    logprob: float
    node: _Node = field(repr=False)
    completed: bool = False
    entity: str | None = None

    def sort_key(self):
        # higher score first, then smaller token ids, then shorter
        return (-self.logprob, self.tokens)


@dataclass
class DecodeResult:
    ranked: list[tuple[str, float]]
    truncated: bool = False

    @property
    def entities(self) -> list[str]:
        return [e for e, _ in self.ranked]


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def next_token_logprobs(model: TransformerLM, query: SerializedTriple, prefixes: Sequence[tuple[int, ...]]) -> np.ndarray:
    """Log-probabilities ``[n, V]`` of the next tail token after each equal-length prefix."""
    seqs = [query.with_tail(p) for p in prefixes]
    ids = np.array([s.ids for s in seqs], dtype=np.int64)
    mask = np.stack([build_visibility_mask(s, model.cfg.mask_mode) for s in seqs])
    hidden = model.forward(ids, mask)
    last = hidden.data[:, -1, :]
    return _log_softmax(last @ model.output_weight.data.T)


def constrained_beam_search(model: TransformerLM, query: SerializedTriple, trie: EntityTrie,
                            end_id: int, beam_width: int = 10, k: int = 10) -> DecodeResult:
    """Top-``k`` entities by summed token log-probability, restricted to trie paths.

    At every step all live hypotheses are expanded with their trie children (and
    ``[E]`` where the node ends an entity); the best ``beam_width`` candidates
    survive and completed ones are frozen. No length normalisation is applied.
    """
    if not 1 <= k <= beam_width:
        raise ContractError(f"need beam_width >= k >= 1, got beam_width={beam_width}, k={k}")
    if not query.is_query:
        raise ContractError("decoding needs a query prefix ending at [T]")
    max_len = model.cfg.max_seq_len
    live = [BeamHypothesis((), 0.0, trie.root)]
    done: list[BeamHypothesis] = []
    truncated = False
    while live:
        depth = len(live[0].tokens)
        if query.query_len + depth >= max_len:
            # no room for another token or [E]
            truncated = True
            break
        logp = next_token_logprobs(model, query, [h.tokens for h in live])
        cands: list[BeamHypothesis] = []
        for h, row in zip(live, logp):
            if h.node.entity is not None:
                cands.append(BeamHypothesis(h.tokens, h.logprob + float(row[end_id]), h.node, True, h.node.entity))
            if query.query_len + depth + 1 >= max_len:
                if h.node.children:
                    truncated = True
                continue
            for tok, child in h.node.children.items():
                cands.append(BeamHypothesis(h.tokens + (tok,), h.logprob + float(row[tok]), child))
        cands.sort(key=BeamHypothesis.sort_key)
        kept = cands[:beam_width]
        done.extend(c for c in kept if c.completed)
        live = [c for c in kept if not c.completed]
        if len(done) >= k:
            done.sort(key=BeamHypothesis.sort_key)
            # log-probabilities only fall as hypotheses grow
            if not live or max(h.logprob for h in live) < done[k - 1].logprob:
                break
    done.sort(key=BeamHypothesis.sort_key)
    best: dict[str, float] = {}
    order: list[str] = []
    for h in done:
        if h.entity not in best:
            best[h.entity] = h.logprob
            order.append(h.entity)
    ranked = [(e, best[e]) for e in order[:k]]
    return DecodeResult(ranked, truncated and len(ranked) < k)


def greedy_decode(model: TransformerLM, query: SerializedTriple, trie: EntityTrie, end_id: int) -> str | None:
    res = constrained_beam_search(model, query, trie, end_id, beam_width=1, k=1)
    return res.ranked[0][0] if res.ranked else None


def sequence_logprob(model: TransformerLM, query: SerializedTriple, tokens: Sequence[int], end_id: int) -> float:
    """Teacher-forced ``sum log p`` of ``tokens + [E]`` after the query, from one forward pass."""
    full = query.with_tail(tuple(tokens) + (end_id,))
    mask = build_visibility_mask(full, model.cfg.mask_mode)
    hidden = model.forward(np.array(full.ids), mask).data
    q = query.query_len
    logp = _log_softmax(hidden[q - 1: len(full) - 1] @ model.output_weight.data.T)
    targets = full.ids[q:]
    total = 0.0
    for row, tok in zip(logp, targets):
        total += float(row[tok])
    return total


def rank_exhaustive(model: TransformerLM, query: SerializedTriple,
                    candidates: Sequence[tuple[str, Sequence[int]]], end_id: int) -> list[tuple[str, float]]:
    """Score every candidate by teacher forcing and sort with the beam's tie rule."""
    scored = [(-sequence_logprob(model, query, toks, end_id), tuple(toks), eid) for eid, toks in candidates]
    scored.sort(key=lambda x: (x[0], x[1]))
    return [(eid, -neg) for neg, _, eid in scored]
