"""Embedding baselines (TransE, RotatE, ComplEx) trained per graph with corrupted negatives."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .kgdata import DatasetSplit, KnowledgeGraph, Triple
from .numerics import Array, ContractError
from .objectives import global_score
from .rng import derive_rng

VARIANTS = {"transe": "transe_l1", "rotate": "rotate", "complex": "complex"}


@dataclass
class BaselineConfig:
    dim: int = 32
    epochs: int = 200
    batch_size: int = 128
    lr: float = 0.01
    margin: float = 4.0
    l2: float = 1e-3   # ComplEx regulariser
    seed: int = 0


class EmbeddingModel:
    def __init__(self, variant: str, entities: list[str], relations: list[str], cfg: BaselineConfig):
        if variant not in VARIANTS:
            raise ContractError(f"variant must be one of {sorted(VARIANTS)}")
        if variant != "transe" and cfg.dim % 2:
            raise ContractError("complex-valued baselines need an even dimension")
        self.variant = variant
        self.score_name = VARIANTS[variant]
        self.ent_index = {e: i for i, e in enumerate(entities)}
        self.rel_index = {r: i for i, r in enumerate(relations)}
        self.entities = entities
        rng = derive_rng(cfg.seed, "baseline", variant)
        bound = 6.0 / np.sqrt(cfg.dim)
        self.E = Array(rng.uniform(-bound, bound, (len(entities), cfg.dim)), requires_grad=True, name="E")
        rel = rng.uniform(-bound, bound, (len(relations), cfg.dim))
        if variant == "rotate":
            rel[:, : cfg.dim // 2] = rng.uniform(-np.pi, np.pi, (len(relations), cfg.dim // 2))
        self.R = Array(rel, requires_grad=True, name="R")

    def parameters(self) -> list[Array]:
        return [self.E, self.R]

    def distance(self, h, r, t) -> Array:
        """Lower is more plausible, for every variant."""
        return global_score(nx.embedding(self.E, h), nx.embedding(self.R, r), nx.embedding(self.E, t),
                            self.score_name)

    def rank_tails(self, head: str, relation: str) -> list[str]:
        """All entities sorted from most to least plausible tail (ties by entity order)."""
        n = len(self.entities)
        d = self.distance(np.full(n, self.ent_index[head]), np.full(n, self.rel_index[relation]),
                          np.arange(n)).data
        return [self.entities[i] for i in np.argsort(d, kind="stable")]


def _ids(model: EmbeddingModel, triples: list[Triple]) -> np.ndarray:
    return np.array([[model.ent_index[t.head], model.rel_index[t.relation], model.ent_index[t.tail]]
                     for t in triples], dtype=np.int64)


def train_embedding_baseline(g: KnowledgeGraph, split: DatasetSplit, variant: str = "transe",
                             cfg: BaselineConfig | None = None, lang: str | None = None) -> EmbeddingModel:
    """Margin ranking (TransE/RotatE) or logistic loss (ComplEx) with uniform head/tail corruption."""
    cfg = cfg or BaselineConfig()
    # per-language baselines leave out cross-lingual alignment edges
    align = g.alignment_relations if lang is not None else set()
    train = [t for t in split.all_train() if (lang is None or t.lang == lang) and t.relation not in align]
    if not train:
        raise ContractError("no training triples for the baseline")
    entities = sorted({e for t in train for e in (t.head, t.tail)} | set(g.entities_of(lang)))
    relations = sorted({t.relation for t in train})
    model = EmbeddingModel(variant, entities, relations, cfg)
    data = _ids(model, train)
    opt = nx.OptimizerState(model.parameters(), cfg.lr)
    rng = derive_rng(cfg.seed, "baseline-batches", variant)
    n_ent = len(entities)
    for _ in range(cfg.epochs):
        perm = rng.permutation(len(data))
        for i in range(0, len(data), cfg.batch_size):
            pos = data[perm[i:i + cfg.batch_size]]
            neg = pos.copy()
            corrupt_tail = rng.random(len(pos)) < 0.5
            random_ents = rng.integers(n_ent, size=len(pos))
            neg[corrupt_tail, 2] = random_ents[corrupt_tail]
            neg[~corrupt_tail, 0] = random_ents[~corrupt_tail]
            with nx.Tape() as tape:
                d_pos = model.distance(pos[:, 0], pos[:, 1], pos[:, 2])
                d_neg = model.distance(neg[:, 0], neg[:, 1], neg[:, 2])
                if variant == "complex":
                    # distance is the negated trilinear score
                    loss = nx.softplus(d_pos).mean() + nx.softplus(-d_neg).mean()
                    loss = loss + (nx.mul(model.E, model.E).mean() + nx.mul(model.R, model.R).mean()) * cfg.l2
                else:
                    loss = nx.relu(d_pos - d_neg + cfg.margin).mean()
            tape.backward(loss)
            opt.step()
    return model


def evaluate_baseline(model: EmbeddingModel, triples: list[Triple], ks=(1, 3, 10)) -> dict[str, float]:
    """Raw Hits@k and mean rank of the gold tail over all entities."""
    if not triples:
        raise ContractError("no queries to evaluate")
    ranks = []
    for t in triples:
        ranking = model.rank_tails(t.head, t.relation)
        ranks.append(ranking.index(t.tail) + 1)
    ranks = np.array(ranks)
    out = {f"hits@{k}": float(np.mean(ranks <= k)) for k in ks}
    out["mean_rank"] = float(ranks.mean())
    return out
