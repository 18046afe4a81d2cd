import json

import numpy as np
import pytest

from mkgc.kgdata import (DataError, KnowledgeGraph, SynthSpec, Triple, alignment_augment, compositional_rules,
                         load_dataset_dir, load_tsv, merge_graphs, save_manifest, split_closed_world,
                         split_from_manifest, split_statistics, split_to_manifest, synth_generate, te_ratio,
                         te_ratio_from_counts, unseen_in_train, write_synthetic_dir, write_tsv)
from mkgc.numerics import ContractError


def graph(lang, triples):
    g = KnowledgeGraph(lang)
    for h, r, t in triples:
        g.add_entity(h)
        g.add_entity(t)
        g.add_relation(r)
        g.add_triple(Triple(h, r, t, lang))
    return g


def test_load_single_line(tmp_path):
    p = tmp_path / "en.tsv"
    p.write_text("a\tr\tb\n", encoding="utf-8")
    g = load_tsv(p, "en")
    assert len(g.entities) == 2 and len(g.relations) == 1 and len(g.triples) == 1


def test_duplicates_are_dropped_and_counted(tmp_path):
    p = tmp_path / "en.tsv"
    p.write_text("a\tr\tb\na\tr\tb\n", encoding="utf-8")
    g = load_tsv(p, "en")
    assert len(g.triples) == 1 and g.duplicates_dropped == 1


@pytest.mark.parametrize("body,line", [("a\tr\tb\nbad line\n", 2), ("a\tr\t \n", 1), ("a\tr\n", 1)])
def test_malformed_lines_report_line_number(tmp_path, body, line):
    p = tmp_path / "en.tsv"
    p.write_text(body, encoding="utf-8")
    with pytest.raises(DataError, match=f":{line}:"):
        load_tsv(p, "en")


def test_entity_count_matches_recount(tmp_path):
    rng = np.random.default_rng(4)
    rows = [(f"e{rng.integers(8)}", f"r{rng.integers(3)}", f"e{rng.integers(8)}") for _ in range(10)]
    p = tmp_path / "en.tsv"
    p.write_text("".join("\t".join(r) + "\n" for r in rows), encoding="utf-8")
    g = load_tsv(p, "en")
    assert len(g.entities) == len({x for h, _, t in rows for x in (h, t)})
    assert len(g.triples) == len(set(rows))


def test_tsv_round_trip(tmp_path):
    g = graph("en", [("a", "r", "b"), ("b", "s", "c")])
    write_tsv(g, tmp_path / "en.tsv")
    assert load_tsv(tmp_path / "en.tsv", "en").triples == g.triples


def test_chain_split_keeps_test_entities_in_train():
    g = graph("en", [("a", "r", "b"), ("b", "r", "c"), ("c", "r", "d")])
    for seed in range(10):
        split = split_closed_world(g, (0.5, 0.25, 0.25), seed)
        assert unseen_in_train(split) == (set(), set())
        assert sum(len(p["en"]) for p in (split.train, split.valid, split.test)) == 3


def test_small_graph_split_warns():
    g = graph("en", [(f"h{i}", "r", f"t{i}") for i in range(4)])
    split = split_closed_world(g, (0.5, 0.25, 0.25), 0)
    assert split.warnings and len(split.train["en"]) == 4


def test_split_is_deterministic():
    g = synth_generate(SynthSpec(n_entities=60, n_triples=120, seed=1))[0]
    a, b = split_closed_world(g, seed=5), split_closed_world(g, seed=5)
    assert a.train == b.train and a.valid == b.valid and a.test == b.test


def test_synthetic_split_is_closed_world():
    graphs = synth_generate(SynthSpec(n_entities=200, n_triples=500, languages=2, pattern="compositional"))
    g = merge_graphs(graphs)
    split = split_closed_world(g, seed=0)
    train_e = {e for t in split.all_train() for e in (t.head, t.tail)}
    train_r = {t.relation for t in split.all_train()}
    held = split.flatten(split.valid) + split.flatten(split.test)
    assert held
    assert all(t.head in train_e and t.tail in train_e and t.relation in train_r for t in held)


def test_bad_ratios_rejected():
    g = graph("en", [("a", "r", "b")])
    with pytest.raises(ContractError):
        split_closed_world(g, (0.5, 0.5, 0.5))


def test_te_ratio_published_counts():
    assert round(te_ratio_from_counts(27014, 264, 342, 39842), 2) == 0.69
    assert round(te_ratio_from_counts(24193, 614, 731, 27765), 2) == 0.92


def test_te_ratio_disjoint_triples_lower_bound():
    n = 6
    g = graph("en", [(f"h{i}", "r", f"t{i}") for i in range(n)])
    split = split_closed_world(g, (0.5, 0.25, 0.25), 0)
    assert te_ratio(g, split) == 0.5


def test_te_ratio_needs_entities():
    with pytest.raises(ContractError):
        te_ratio_from_counts(1, 0, 0, 0)


def test_statistics_shape():
    g = merge_graphs(synth_generate(SynthSpec(n_entities=40, n_triples=80, languages=2, seed=2)))
    stats = split_statistics(g, split_closed_world(g))
    assert sorted(stats) == ["de", "en"]
    for row in stats.values():
        assert row["te_ratio"] >= 0.5
        assert row["test"]["answer_entities"] <= row["test"]["entities"]


def test_tiny_random_spec():
    (g,) = synth_generate(SynthSpec(n_entities=4, n_relations=1, n_triples=3, pattern="random"))
    assert len(set(g.triples)) == 3


def test_compositional_paths_exist():
    (g,) = synth_generate(SynthSpec(n_entities=120, n_relations=6, n_triples=400, pattern="compositional", seed=7))
    facts = {(t.head, t.relation, t.tail) for t in g.triples}
    rules = compositional_rules(6)
    planted = 0
    for h, r, t in facts:
        for r1, r2, r3 in rules:
            if r == r3:
                planted += 1
                mids = {b for (a, rr, b) in facts if a == h and rr == r1}
                assert any((b, r2, t) in facts for b in mids)
    assert planted > 0


def test_generation_is_deterministic_and_shared_across_languages():
    spec = SynthSpec(n_entities=50, n_triples=90, languages=3, pattern="compositional", seed=9)
    a, b = synth_generate(spec), synth_generate(spec)
    assert [g.triples for g in a] == [g.triples for g in b]
    assert [g.entities for g in a] == [g.entities for g in b]
    keys = [[(t.head, t.relation, t.tail) for t in g.triples] for g in a]
    assert keys[0] == keys[1] == keys[2]


@pytest.mark.parametrize("spec", [SynthSpec(n_entities=3, n_relations=1, n_triples=10),
                                  SynthSpec(n_entities=10, n_relations=2, n_triples=5, pattern="compositional")])
def test_infeasible_spec(spec):
    with pytest.raises(ContractError):
        synth_generate(spec)


def test_alignment_augment_small():
    g1 = graph("en", [("a", "r", "b")])
    g2 = graph("de", [("x", "s", "y")])
    assert len(alignment_augment(g1, g2, [("a", "x")]).triples) == 3
    disjoint = alignment_augment(g1, g2, [])
    assert len(disjoint.triples) == 2


def test_alignment_counts_and_language():
    src = graph("en", [(f"a{i}", "r", f"b{i}") for i in range(20)])
    dst = graph("de", [(f"x{i}", "s", f"y{i}") for i in range(20)])
    m = alignment_augment(src, dst, [(f"a{i}", f"x{i}") for i in range(20)])
    align = [t for t in m.triples if t.relation in m.alignment_relations]
    assert len(align) == 20
    assert all(t.lang == "de" and m.entity_lang(t.tail) == "de" for t in align)


def test_alignment_unknown_entity_named():
    g1 = graph("en", [("a", "r", "b")])
    g2 = graph("de", [("x", "s", "y")])
    with pytest.raises(DataError, match="'q'"):
        alignment_augment(g1, g2, [("q", "x")])


def test_manifest_round_trip(tmp_path):
    g = merge_graphs(synth_generate(SynthSpec(n_entities=30, n_triples=60, languages=2)))
    split = split_closed_world(g, seed=3)
    save_manifest(g, split, tmp_path / "split.json")
    back = split_from_manifest(g, json.loads((tmp_path / "split.json").read_text()))
    assert back.train == split.train and back.valid == split.valid and back.test == split.test
    assert split_to_manifest(g, back) == split_to_manifest(g, split)


def test_dataset_dir_round_trip(tmp_path):
    graphs = synth_generate(SynthSpec(n_entities=30, n_triples=50, languages=2, seed=4))
    write_synthetic_dir(graphs, tmp_path, align_pairs=5, seed=4)
    g, split = load_dataset_dir(tmp_path, seed=0)
    assert len(g.alignment_relations) == 1
    assert sum(len(x.triples) for x in graphs) + 5 == len(g.triples)
    assert unseen_in_train(split) == (set(), set())


def test_dataset_dir_missing(tmp_path):
    with pytest.raises(DataError):
        load_dataset_dir(tmp_path / "nope")
