"""Hits@k, per-language and answer-length reports, entity-alignment evaluation."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from .inference import EntityTrie, build_trie, constrained_beam_search
from .kgdata import DatasetSplit, KnowledgeGraph, Triple
from .model import TransformerLM
from .numerics import ContractError
from .vocab import Vocabulary, serialize_query

KS = (1, 3, 10)


class ClosedWorldViolation(RuntimeError):
    pass


def hits_at_k(predictions: Sequence[Sequence[str]], golds: Sequence[str], k: int) -> float:
    """Fraction of queries whose gold entity is among the first ``k`` predictions."""
    if k < 1:
        raise ContractError("k must be >= 1")
    if not golds:
        raise ContractError("hits@k over an empty query set")
    if len(predictions) != len(golds):
        raise ContractError("one ranked list per gold answer is required")
    hit = sum(1 for ranked, gold in zip(predictions, golds) if gold in ranked[:k])
    return hit / len(golds)


def gold_rank(ranked: Sequence[str], gold: str) -> int | None:
    try:
        return ranked.index(gold) + 1
    except ValueError:
        return None


@dataclass
class LengthBucket:
    length: int
    count: int
    hits: dict[int, float]
    excluded: bool


def length_report(predictions, golds, gold_lengths: Sequence[int], threshold: int = 10,
                  ks: Sequence[int] = KS) -> list[LengthBucket]:
    """Hits@k grouped by gold answer token length; small buckets are flagged ``excluded``."""
    groups: dict[int, list[int]] = {}
    for i, n in enumerate(gold_lengths):
        groups.setdefault(int(n), []).append(i)
    out = []
    for n in sorted(groups):
        idx = groups[n]
        preds = [predictions[i] for i in idx]
        gs = [golds[i] for i in idx]
        out.append(LengthBucket(n, len(idx), {k: hits_at_k(preds, gs, k) for k in ks}, len(idx) < threshold))
    return out


@dataclass
class EvalConfig:
    beam_width: int = 10
    candidates: str = "language"   # or "global"
    filtered: bool = False
    length_threshold: int = 10
    split: str = "test"
    mode: str = "kgc"              # or "alignment"

    def __post_init__(self):
        if self.beam_width < max(KS):
            raise ContractError(f"beam_width must be at least {max(KS)} so Hits@10 is defined")
        if self.candidates not in ("language", "global"):
            raise ContractError("candidates must be 'language' or 'global'")
        if self.mode not in ("kgc", "alignment"):
            raise ContractError("mode must be 'kgc' or 'alignment'")


@dataclass
class EvalReport:
    per_language: dict[str, dict]
    macro: dict[str, float]
    buckets: list[dict]
    config: dict
    n_queries: int
    predictions: list[dict] = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("predictions")
        return d

    def table(self) -> str:
        """Aligned text table of Hits@k in percent with two decimals."""
        langs = sorted(self.per_language)
        cols = langs + ["AVG"]
        width = max(8, *(len(c) + 2 for c in cols))
        lines = ["".ljust(10) + "".join(c.rjust(width) for c in cols)]
        for k in KS:
            vals = [self.per_language[l][f"hits@{k}"] for l in langs] + [self.macro[f"hits@{k}"]]
            lines.append(f"Hits@{k}".ljust(10) + "".join(f"{100 * v:.2f}".rjust(width) for v in vals))
        lines.append("")
        lines.append("answer length  count  " + "  ".join(f"Hits@{k}" for k in KS) + "  note")
        for b in self.buckets:
            note = "excluded" if b["excluded"] else ""
            vals = "  ".join(f"{100 * b['hits'][str(k)]:6.2f}" for k in KS)
            lines.append(f"{b['length']:>13}  {b['count']:>5}  {vals}  {note}".rstrip())
        return "\n".join(lines) + "\n"


class CandidateSets:
    """Entity tries per language (or a single global trie), built once per graph."""

    def __init__(self, g: KnowledgeGraph, vocab: Vocabulary, mode: str = "language"):
        self.g, self.vocab, self.mode = g, vocab, mode
        self._tries: dict[str | None, EntityTrie] = {}

    def trie(self, lang: str) -> EntityTrie:
        key = None if self.mode == "global" else lang
        if key not in self._tries:
            ents = self.g.entities_of(key)
            self._tries[key] = build_trie(((e, self.vocab.encode(self.g.entities[e])) for e in ents), key)
        return self._tries[key]


def known_tails(triples: Sequence[Triple]) -> dict[tuple[str, str], set[str]]:
    out: dict[tuple[str, str], set[str]] = {}
    for t in triples:
        out.setdefault((t.head, t.relation), set()).add(t.tail)
    return out


def evaluate(model: TransformerLM, vocab: Vocabulary, g: KnowledgeGraph, split: DatasetSplit,
             cfg: EvalConfig | None = None, checkpoint_id: str = "") -> EvalReport:
    """Decode every ``(h, r, ?)`` query of the chosen split part and score Hits@1/3/10."""
    cfg = cfg or EvalConfig()
    part = split.part(cfg.split)
    align_rels = g.alignment_relations
    if cfg.mode == "alignment" and not align_rels:
        raise ContractError("alignment evaluation needs alignment relations in the graph")
    cands = CandidateSets(g, vocab, cfg.candidates)
    filt = None
    if cfg.filtered:
        filt = known_tails(DatasetSplit.flatten(split.train) + DatasetSplit.flatten(split.valid)
                           + DatasetSplit.flatten(split.test))
    k_max = max(KS)

    per_lang_preds: dict[str, tuple[list, list]] = {}
    all_preds, all_golds, all_lengths, records = [], [], [], []
    for lang in sorted(part):
        for t in part[lang]:
            is_align = t.relation in align_rels
            if (cfg.mode == "alignment") != is_align:
                continue
            trie = cands.trie(t.lang)
            gold_tokens = vocab.encode(g.entities[t.tail])
            if trie.find(gold_tokens) != t.tail:
                raise ClosedWorldViolation(f"gold entity {t.tail!r} is not in the candidate set of {t.lang!r}")
            query = serialize_query(g.entities[t.head], g.relations[t.relation], vocab, model.cfg.max_seq_len)
            res = constrained_beam_search(model, query, trie, vocab.end, cfg.beam_width, cfg.beam_width)
            ranked = res.entities
            if filt is not None:
                others = filt.get((t.head, t.relation), set()) - {t.tail}
                ranked = [e for e in ranked if e not in others]
            ranked = ranked[:k_max]
            scores = dict(res.ranked)
            preds, golds = per_lang_preds.setdefault(lang, ([], []))
            preds.append(ranked)
            golds.append(t.tail)
            all_preds.append(ranked)
            all_golds.append(t.tail)
            all_lengths.append(len(gold_tokens))
            records.append({
                "lang": lang, "head": t.head, "relation": t.relation, "gold": t.tail,
                "gold_rank": gold_rank(ranked, t.tail),
                "topk": [[e, scores[e]] for e in ranked],
                "truncated": res.truncated,
            })
    if not all_golds:
        raise ContractError(f"no {cfg.mode} queries in the {cfg.split} split")

    per_language = {}
    for lang, (preds, golds) in per_lang_preds.items():
        row = {f"hits@{k}": hits_at_k(preds, golds, k) for k in KS}
        row["queries"] = len(golds)
        per_language[lang] = row
    macro = {f"hits@{k}": sum(r[f"hits@{k}"] for r in per_language.values()) / len(per_language) for k in KS}
    buckets = [
        {"length": b.length, "count": b.count, "hits": {str(k): v for k, v in b.hits.items()}, "excluded": b.excluded}
        for b in length_report(all_preds, all_golds, all_lengths, cfg.length_threshold)
    ]
    config = asdict(cfg)
    config["checkpoint"] = checkpoint_id
    return EvalReport(per_language, macro, buckets, config, len(all_golds), records)


def write_report(report: EvalReport, out_dir, stem: str = "eval") -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "json": out / f"{stem}.json",
        "table": out / f"{stem}.txt",
        "predictions": out / f"{stem}_predictions.jsonl",
        "svg": out / f"{stem}_lengths.svg",
    }
    paths["json"].write_text(json.dumps(report.to_json(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    paths["table"].write_text(report.table(), encoding="utf-8")
    paths["predictions"].write_text(
        "".join(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n" for r in report.predictions),
        encoding="utf-8")
    paths["svg"].write_text(length_svg(report.buckets), encoding="utf-8")
    return paths


def length_svg(buckets: Sequence[dict], ks: Sequence[int] = KS) -> str:
    """Grouped bar chart of Hits@k per answer length (non-excluded buckets only)."""
    shown = [b for b in buckets if not b["excluded"]]
    colors = ("#1f4e79", "#5b9bd5", "#bdd7ee")
    bar, gap, height, left, top = 14, 18, 200, 40, 20
    width = left + max(1, len(shown)) * (len(ks) * bar + gap) + 20
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height + 60}">',
             f'<line x1="{left}" y1="{top + height}" x2="{width - 10}" y2="{top + height}" stroke="black"/>',
             f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + height}" stroke="black"/>']
    for tick in (0, 50, 100):
        y = top + height - height * tick / 100
        parts.append(f'<text x="{left - 5}" y="{y + 4:.1f}" font-size="10" text-anchor="end">{tick}</text>')
    for i, b in enumerate(shown):
        x0 = left + gap / 2 + i * (len(ks) * bar + gap)
        for j, k in enumerate(ks):
            v = b["hits"][str(k)]
            h = height * v
            parts.append(f'<rect x="{x0 + j * bar:.1f}" y="{top + height - h:.1f}" width="{bar - 2}" '
                         f'height="{h:.1f}" fill="{colors[j % len(colors)]}"><title>len {b["length"]} '
                         f'Hits@{k} {100 * v:.2f}</title></rect>')
        parts.append(f'<text x="{x0 + len(ks) * bar / 2:.1f}" y="{top + height + 14}" font-size="10" '
                     f'text-anchor="middle">{b["length"]}</text>')
    for j, k in enumerate(ks):
        parts.append(f'<rect x="{left + j * 70}" y="{top + height + 30}" width="10" height="10" fill="{colors[j]}"/>'
                     f'<text x="{left + j * 70 + 14}" y="{top + height + 39}" font-size="10">Hits@{k}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
