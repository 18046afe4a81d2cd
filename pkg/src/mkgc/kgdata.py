"""Knowledge-graph storage, TSV ingestion, closed-world splits and synthetic data."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numerics import ContractError
from .rng import derive_rng

log = logging.getLogger(__name__)

ALIGN_PREFIX = "same_as_"


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Triple:
    head: str
    relation: str
    tail: str
    lang: str


@dataclass
class KnowledgeGraph:
    """Entity/relation registries (id -> surface form) plus a duplicate-free triple list.

    ``lang`` names the graph; for merged multilingual graphs ``entity_langs`` maps
    each entity to its own language and ``Triple.lang`` is the language of the
    answer (tail) entity.
    """

    lang: str
    entities: dict[str, str] = field(default_factory=dict)
    relations: dict[str, str] = field(default_factory=dict)
    triples: list[Triple] = field(default_factory=list)
    entity_langs: dict[str, str] = field(default_factory=dict)
    duplicates_dropped: int = 0

    def __post_init__(self):
        self._seen = set(self.triples)

    def add_entity(self, eid: str, surface: str | None = None, lang: str | None = None) -> None:
        self.entities.setdefault(eid, eid if surface is None else surface)
        if lang is not None and lang != self.lang:
            self.entity_langs[eid] = lang

    def add_relation(self, rid: str, surface: str | None = None) -> None:
        self.relations.setdefault(rid, rid if surface is None else surface)

    def add_triple(self, t: Triple) -> bool:
        if t.head not in self.entities or t.tail not in self.entities:
            raise DataError(f"triple {t} references an unregistered entity")
        if t.relation not in self.relations:
            raise DataError(f"triple {t} references an unregistered relation")
        if t in self._seen:
            return False
        self._seen.add(t)
        self.triples.append(t)
        return True

    def entity_lang(self, eid: str) -> str:
        return self.entity_langs.get(eid, self.lang)

    @property
    def languages(self) -> list[str]:
        return sorted({t.lang for t in self.triples} | {self.entity_lang(e) for e in self.entities})

    def entities_of(self, lang: str | None) -> list[str]:
        """Entity ids of one language, or all entities for ``lang=None``, in registry order."""
        if lang is None:
            return list(self.entities)
        return [e for e in self.entities if self.entity_lang(e) == lang]

    @property
    def alignment_relations(self) -> set[str]:
        return {r for r in self.relations if r.startswith(ALIGN_PREFIX)}


@dataclass
class DatasetSplit:
    """Triples per language for train/valid/test, plus repair notes."""

    train: dict[str, list[Triple]]
    valid: dict[str, list[Triple]]
    test: dict[str, list[Triple]]
    warnings: list[str] = field(default_factory=list)

    def part(self, name: str) -> dict[str, list[Triple]]:
        if name not in ("train", "valid", "test"):
            raise ContractError(f"unknown split part {name!r}")
        return getattr(self, name)

    @staticmethod
    def flatten(part: dict[str, list[Triple]]) -> list[Triple]:
        return [t for lang in sorted(part) for t in part[lang]]

    def all_train(self) -> list[Triple]:
        return self.flatten(self.train)


# ingestion ----------------------------------------------------------------------

def load_tsv(path, lang: str) -> KnowledgeGraph:
    """Read ``head<TAB>relation<TAB>tail`` lines; surface forms double as ids."""
    g = KnowledgeGraph(lang)
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}")
        if any(not f.strip() for f in fields):
            raise DataError(f"{path}:{lineno}: empty field")
        h, r, t = (f.strip() for f in fields)
        g.add_entity(h)
        g.add_entity(t)
        g.add_relation(r)
        if not g.add_triple(Triple(h, r, t, lang)):
            g.duplicates_dropped += 1
    if g.duplicates_dropped:
        log.info("%s: dropped %d duplicate lines", path, g.duplicates_dropped)
    return g


def write_tsv(g: KnowledgeGraph, path) -> None:
    lines = [f"{g.entities[t.head]}\t{g.relations[t.relation]}\t{g.entities[t.tail]}" for t in g.triples]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def load_pairs(path) -> list[tuple[str, str]]:
    pairs = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 2 or not all(f.strip() for f in fields):
            raise DataError(f"{path}:{lineno}: expected entity1<TAB>entity2")
        pairs.append((fields[0].strip(), fields[1].strip()))
    return pairs


# merging and alignment ------------------------------------------------------------

def _ns(lang: str, key: str) -> str:
    return f"{lang}:{key}"


def merge_graphs(graphs: Sequence[KnowledgeGraph]) -> KnowledgeGraph:
    """Disjoint union; ids are namespaced as ``lang:id`` and triples keep their language."""
    langs = [g.lang for g in graphs]
    if len(set(langs)) != len(langs):
        raise ContractError(f"graphs to merge must have distinct languages, got {langs}")
    merged = KnowledgeGraph("+".join(langs))
    for g in graphs:
        for eid, surface in g.entities.items():
            merged.add_entity(_ns(g.lang, eid), surface, lang=g.entity_lang(eid))
            merged.entity_langs[_ns(g.lang, eid)] = g.entity_lang(eid)
        for rid, surface in g.relations.items():
            merged.add_relation(_ns(g.lang, rid), surface)
        for t in g.triples:
            merged.add_triple(Triple(_ns(g.lang, t.head), _ns(g.lang, t.relation), _ns(g.lang, t.tail), t.lang))
    return merged


def alignment_relation(lang1: str, lang2: str) -> str:
    return f"{ALIGN_PREFIX}{lang1}_{lang2}"


def add_alignment_edges(merged: KnowledgeGraph, lang1: str, lang2: str,
                        pairs: Iterable[tuple[str, str]]) -> int:
    """Add ``(e1, same_as_lang1_lang2, e2)`` for each pair of un-namespaced ids."""
    rel = alignment_relation(lang1, lang2)
    merged.add_relation(rel, f"{lang1}={lang2}")
    added = 0
    for e1, e2 in pairs:
        a, b = _ns(lang1, e1), _ns(lang2, e2)
        if a not in merged.entities or b not in merged.entities:
            raise DataError(f"alignment pair ({e1!r}, {e2!r}) names an unknown entity")
        added += merged.add_triple(Triple(a, rel, b, lang2))
    return added


def alignment_augment(g1: KnowledgeGraph, g2: KnowledgeGraph,
                      pairs: Sequence[tuple[str, str]]) -> KnowledgeGraph:
    """Merge two graphs and add one alignment triple per entity pair.

    Alignment queries ``(e1, same_as, ?)`` then become ordinary completion queries
    whose answer lives in ``g2``'s language.
    """
    merged = merge_graphs([g1, g2])
    add_alignment_edges(merged, g1.lang, g2.lang, pairs)
    return merged


# splitting and statistics -----------------------------------------------------------

def split_closed_world(g: KnowledgeGraph, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetSplit:
    """Per-language shuffled split, repaired so every valid/test entity and relation is in train.

    A valid/test candidate that would introduce an unseen entity or relation is moved to train.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ContractError(f"split ratios must be three positive numbers summing to 1, got {ratios}")
    rng = derive_rng(seed, "split")
    by_lang: dict[str, list[Triple]] = {}
    for t in g.triples:
        by_lang.setdefault(t.lang, []).append(t)
    train: dict[str, list[Triple]] = {}
    held: dict[str, tuple[list[Triple], list[Triple]]] = {}
    requested: dict[str, tuple[int, int]] = {}
    for lang in sorted(by_lang):
        items = by_lang[lang]
        order = rng.permutation(len(items))
        n_valid = int(round(len(items) * ratios[1]))
        n_test = int(round(len(items) * ratios[2]))
        shuffled = [items[i] for i in order]
        held[lang] = (shuffled[:n_valid], shuffled[n_valid:n_valid + n_test])
        train[lang] = shuffled[n_valid + n_test:]
        requested[lang] = (n_valid, n_test)

    seen_e: set[str] = set()
    seen_r: set[str] = set()
    for ts in train.values():
        for t in ts:
            seen_e.update((t.head, t.tail))
            seen_r.add(t.relation)

    valid: dict[str, list[Triple]] = {lang: [] for lang in by_lang}
    test: dict[str, list[Triple]] = {lang: [] for lang in by_lang}
    # one pass suffices: moving a triple only grows the seen sets
    for part, slot in ((valid, 0), (test, 1)):
        for lang in sorted(held):
            for t in held[lang][slot]:
                if t.head in seen_e and t.tail in seen_e and t.relation in seen_r:
                    part[lang].append(t)
                else:
                    train[lang].append(t)
                    seen_e.update((t.head, t.tail))
                    seen_r.add(t.relation)

    warnings = []
    for lang in sorted(by_lang):
        want_v, want_t = requested[lang]
        if len(valid[lang]) < want_v or len(test[lang]) < want_t:
            warnings.append(
                f"{lang}: closed-world repair moved {want_v - len(valid[lang])} valid and "
                f"{want_t - len(test[lang])} test triples to train")
    return DatasetSplit(train, valid, test, warnings)


def unseen_in_train(split: DatasetSplit) -> tuple[set[str], set[str]]:
    """Entities and relations of valid/test that never occur in train (empty when closed-world)."""
    ents, rels = set(), set()
    for t in split.all_train():
        ents.update((t.head, t.tail))
        rels.add(t.relation)
    bad_e, bad_r = set(), set()
    for part in (split.valid, split.test):
        for t in DatasetSplit.flatten(part):
            bad_e.update({t.head, t.tail} - ents)
            if t.relation not in rels:
                bad_r.add(t.relation)
    return bad_e, bad_r


def te_ratio_from_counts(n_train: int, n_valid: int, n_test: int, n_train_entities: int) -> float:
    """All triples over training entities; 0.5 when no two triples share an entity."""
    if n_train_entities <= 0:
        raise ContractError("T/E ratio needs at least one training entity")
    return (n_train + n_valid + n_test) / n_train_entities


def te_ratio(g: KnowledgeGraph, split: DatasetSplit, lang: str | None = None) -> float:
    langs = [lang] if lang is not None else sorted(split.train)
    n = [sum(len(part.get(l, [])) for l in langs) for part in (split.train, split.valid, split.test)]
    if sum(n) == 0:
        raise ContractError("T/E ratio of an empty split")
    ents = {e for l in langs for t in split.train.get(l, []) for e in (t.head, t.tail)}
    return te_ratio_from_counts(n[0], n[1], n[2], len(ents))


def split_statistics(g: KnowledgeGraph, split: DatasetSplit) -> dict[str, dict]:
    """Table-2-style counts per language.

    Entity counts for valid/test are given two ways: distinct entities in the
    split's triples, and distinct answer (tail) entities only.
    """
    stats: dict[str, dict] = {}
    for lang in sorted(split.train):
        row: dict = {}
        for name in ("train", "valid", "test"):
            ts = split.part(name).get(lang, [])
            row[name] = {
                "triples": len(ts),
                "entities": len({e for t in ts for e in (t.head, t.tail)}),
                "answer_entities": len({t.tail for t in ts}),
                "relations": len({t.relation for t in ts}),
            }
        row["te_ratio"] = round(te_ratio(g, split, lang), 4)
        stats[lang] = row
    return stats


# split manifest -------------------------------------------------------------------

def split_to_manifest(g: KnowledgeGraph, split: DatasetSplit) -> dict:
    index = {t: i for i, t in enumerate(g.triples)}
    out: dict = {"n_triples": len(g.triples), "warnings": split.warnings}
    for name in ("train", "valid", "test"):
        # split order is kept so a reloaded split batches identically
        out[name] = [index[t] for t in DatasetSplit.flatten(split.part(name))]
    return out


def split_from_manifest(g: KnowledgeGraph, manifest: dict) -> DatasetSplit:
    if manifest.get("n_triples") != len(g.triples):
        raise DataError(f"split manifest covers {manifest.get('n_triples')} triples, graph has {len(g.triples)}")
    parts = []
    for name in ("train", "valid", "test"):
        part: dict[str, list[Triple]] = {}
        for i in manifest[name]:
            t = g.triples[i]
            part.setdefault(t.lang, []).append(t)
        parts.append(part)
    langs = sorted({t.lang for t in g.triples})
    for part in parts:
        for lang in langs:
            part.setdefault(lang, [])
    return DatasetSplit(*parts, warnings=list(manifest.get("warnings", [])))


def save_manifest(g: KnowledgeGraph, split: DatasetSplit, path) -> None:
    Path(path).write_text(json.dumps(split_to_manifest(g, split)) + "\n", encoding="utf-8")


# synthetic data ---------------------------------------------------------------------

_LANG_ORDER = ("en", "de", "fr", "ru", "el", "it", "tr")
_LATIN_CONS = "bdfgklmnprstvz"
_LATIN_VOWELS = "aeiou"
# per-language respelling of the shared latent alphabet
_SCRIPTS = {
    "en": (_LATIN_CONS, _LATIN_VOWELS),
    "de": ("bdfgklmnprstwz", "aeiöu"),
    "fr": ("bdfgclmnprstvz", "aéiou"),
    "it": ("bdfgclmnprstvz", "aeiou"),
    "tr": ("bdfgklmnprştvz", "aeıou"),
    "ru": ("бдфгклмнпрствз", "аеиоу"),
    "el": ("βδφγκλμνπρστυζ", "αειου"),
}


def language_codes(n: int) -> list[str]:
    if n < 1 or n > len(_LANG_ORDER):
        raise ContractError(f"between 1 and {len(_LANG_ORDER)} languages are supported")
    return list(_LANG_ORDER[:n])


def _latent_names(n: int, rng: np.random.Generator, min_syl: int, max_syl: int) -> list[tuple[int, ...]]:
    # each syllable is (consonant index, vowel index); names are unique
    names: list[tuple[int, ...]] = []
    seen: set[tuple[int, ...]] = set()
    attempts = 0
    while len(names) < n:
        attempts += 1
        if attempts > 1000 * n + 1000:
            raise ContractError(f"cannot draw {n} distinct names")
        k = int(rng.integers(min_syl, max_syl + 1))
        name = tuple(int(x) for pair in zip(rng.integers(0, len(_LATIN_CONS), k),
                                            rng.integers(0, len(_LATIN_VOWELS), k)) for x in pair)
        if name not in seen:
            seen.add(name)
            names.append(name)
    return names


def _spell(name: tuple[int, ...], lang: str) -> str:
    cons, vowels = _SCRIPTS[lang]
    return "".join(cons[c] + vowels[v] for c, v in zip(name[0::2], name[1::2]))


@dataclass
class SynthSpec:
    n_entities: int = 200
    n_relations: int = 6
    n_triples: int = 500
    languages: int = 1
    pattern: str = "random"
    seed: int = 0
    functional: bool = True


def synth_generate(spec: SynthSpec) -> list[KnowledgeGraph]:
    """Random or compositional facts rendered in several languages.

    Every language holds the same facts over the same relation schema; surface
    forms are per-language respellings of a shared latent name. Under the
    compositional pattern, relations are grouped in triples (r1, r2, r3) and
    r3(a, c) is planted whenever r1(a, b) and r2(b, c) hold.
    """
    if spec.pattern not in ("random", "compositional"):
        raise ContractError(f"unknown pattern {spec.pattern!r}")
    if spec.n_entities < 2 or spec.n_relations < 1 or spec.n_triples < 1:
        raise ContractError("need at least 2 entities, 1 relation and 1 triple")
    if spec.pattern == "compositional" and spec.n_relations < 3:
        raise ContractError("the compositional pattern needs at least 3 relations")
    per_pair = 1 if spec.functional else spec.n_entities - 1
    capacity = spec.n_entities * spec.n_relations * per_pair
    if spec.n_triples > capacity:
        raise ContractError(f"{spec.n_triples} distinct triples do not fit {spec.n_entities} entities "
                            f"x {spec.n_relations} relations")
    langs = language_codes(spec.languages)
    rng = derive_rng(spec.seed, "synth")
    ent_names = _latent_names(spec.n_entities, rng, 2, 4)
    rel_names = _latent_names(spec.n_relations, rng, 1, 3)

    rules: list[tuple[int, int, int]] = []
    if spec.pattern == "compositional":
        rules = [(i, i + 1, i + 2) for i in range(0, spec.n_relations - 2, 3)]
    derived = {c for _, _, c in rules}
    base_rels = [r for r in range(spec.n_relations) if r not in derived]

    facts: list[tuple[int, int, int]] = []
    fact_set: set[tuple[int, int, int]] = set()
    tail_of: dict[tuple[int, int], int] = {}

    def add(h: int, r: int, t: int) -> bool:
        if h == t or (h, r, t) in fact_set or len(facts) >= spec.n_triples:
            return False
        if spec.functional and (h, r) in tail_of:
            return False
        facts.append((h, r, t))
        fact_set.add((h, r, t))
        tail_of.setdefault((h, r), t)
        by_head.setdefault((r, h), []).append(t)
        by_tail.setdefault((r, t), []).append(h)
        return True

    by_head: dict[tuple[int, int], list[int]] = {}
    by_tail: dict[tuple[int, int], list[int]] = {}

    def plant(h: int, r: int, t: int) -> None:
        for r1, r2, r3 in rules:
            if r == r1:
                for c in list(by_head.get((r2, t), ())):
                    add(h, r3, c)
            elif r == r2:
                for a in list(by_tail.get((r1, h), ())):
                    add(a, r3, t)

    attempts = 0
    limit = 200 * spec.n_triples + 10_000
    while len(facts) < spec.n_triples:
        attempts += 1
        if attempts > limit:
            raise ContractError(f"could not generate {spec.n_triples} triples under pattern {spec.pattern!r}")
        r = base_rels[int(rng.integers(len(base_rels)))]
        h, t = (int(x) for x in rng.integers(spec.n_entities, size=2))
        if add(h, r, t):
            plant(h, r, t)

    graphs = []
    for lang in langs:
        g = KnowledgeGraph(lang)
        for i, name in enumerate(ent_names):
            g.add_entity(f"e{i}", _spell(name, lang))
        for i, name in enumerate(rel_names):
            g.add_relation(f"r{i}", _spell(name, lang))
        for h, r, t in facts:
            g.add_triple(Triple(f"e{h}", f"r{r}", f"e{t}", lang))
        # keep only entities that occur in some triple
        used = {e for t in g.triples for e in (t.head, t.tail)}
        g.entities = {k: v for k, v in g.entities.items() if k in used}
        used_r = {t.relation for t in g.triples}
        g.relations = {k: v for k, v in g.relations.items() if k in used_r}
        graphs.append(g)
    return graphs


def compositional_rules(n_relations: int) -> list[tuple[str, str, str]]:
    return [(f"r{i}", f"r{i + 1}", f"r{i + 2}") for i in range(0, n_relations - 2, 3)]


# data directories -------------------------------------------------------------------

def write_synthetic_dir(graphs: Sequence[KnowledgeGraph], out_dir, align_pairs: int = 0, seed: int = 0) -> list[Path]:
    """Write one ``<lang>.tsv`` per graph and, if requested, ``align_<l1>_<l2>.tsv`` files.

    Alignment pairs link the first language to each other language through the
    shared latent entity ids of synthetic graphs.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for g in graphs:
        path = out / f"{g.lang}.tsv"
        write_tsv(g, path)
        written.append(path)
    if align_pairs and len(graphs) > 1:
        first = graphs[0]
        for other in graphs[1:]:
            common = [e for e in first.entities if e in other.entities]
            rng = derive_rng(seed, "align", other.lang)
            chosen = sorted(rng.choice(len(common), size=min(align_pairs, len(common)), replace=False))
            path = out / f"align_{first.lang}_{other.lang}.tsv"
            path.write_text("".join(f"{first.entities[common[i]]}\t{other.entities[common[i]]}\n" for i in chosen),
                            encoding="utf-8")
            written.append(path)
    return written


def load_dataset_dir(data_dir, seed: int = 0, ratios=(0.8, 0.1, 0.1)) -> tuple[KnowledgeGraph, DatasetSplit]:
    """Load ``<lang>.tsv`` and ``align_<l1>_<l2>.tsv`` files; reuse ``split.json`` when present."""
    d = Path(data_dir)
    if not d.is_dir():
        raise DataError(f"data directory not found: {d}")
    tsvs = sorted(p for p in d.glob("*.tsv") if not p.name.startswith("align_"))
    if not tsvs:
        raise DataError(f"no <lang>.tsv files in {d}")
    graphs = [load_tsv(p, p.stem) for p in tsvs]
    merged = merge_graphs(graphs)
    for p in sorted(d.glob("align_*.tsv")):
        _, l1, l2 = p.stem.split("_", 2)
        add_alignment_edges(merged, l1, l2, load_pairs(p))
    manifest = d / "split.json"
    if manifest.exists():
        split = split_from_manifest(merged, json.loads(manifest.read_text(encoding="utf-8")))
    else:
        split = split_closed_world(merged, ratios, seed)
    return merged, split
