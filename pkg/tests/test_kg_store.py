import pytest

from kgqa.kg_store import (AugmentationError, KGFormatError, KnowledgeGraph, Triple, Vocab,
                           VocabLookupError, actions, augment, load_triples, save_triples)

from conftest import build_graph


def write(tmp_path, text, name="g.tsv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_duplicate_lines_are_merged(tmp_path):
    g, v = load_triples(write(tmp_path, "a\tr\tb\na\tr\tb\n"))
    assert len(g.triples) == 1 and v.n_entities == 2 and v.n_relations == 1


def test_empty_file(tmp_path):
    g, v = load_triples(write(tmp_path, ""))
    assert g.triples == [] and v.n_entities == 0 and v.n_relations == 0


def test_bad_field_count_names_line(tmp_path):
    with pytest.raises(KGFormatError, match=":2:"):
        load_triples(write(tmp_path, "a\tr\tb\na\tr\n"))


def test_frozen_vocab_rejects_unknown(tmp_path):
    v = Vocab(["a", "b"], ["r"]).freeze()
    with pytest.raises(VocabLookupError):
        load_triples(write(tmp_path, "a\tr\tc\n"), v)


def test_first_seen_ids(tmp_path):
    _, v = load_triples(write(tmp_path, "x\tp\ty\nz\tq\tx\n"))
    assert v.entity_names == ["x", "y", "z"] and v.relation_names == ["p", "q"]


def test_round_trip(tmp_path):
    g, v = load_triples(write(tmp_path, "a\tr\tb\nb\ts\tc\nc\tr\ta\n"))
    save_triples(g, tmp_path / "out.tsv")
    g2, _ = load_triples(tmp_path / "out.tsv", Vocab(v.entity_names, v.relation_names))
    assert sorted(g.triples) == sorted(g2.triples)


def test_vocab_files_round_trip(tmp_path):
    v = Vocab(["a", "b", "c"], ["r", "s"])
    v.save(tmp_path / "voc")
    w = Vocab.load(tmp_path / "voc")
    assert w.entity_names == v.entity_names and w.relation_names == v.relation_names
    assert (tmp_path / "voc.entities.tsv").read_text().splitlines()[1] == "b\t1"


def test_reserved_ids_distinct():
    v = Vocab(["a"], ["r", "s"])
    reserved = {v.no_op, v.no_answer, v.start, v.pad}
    assert len(reserved) == 4
    assert reserved.isdisjoint(range(2 * v.n_relations))
    assert v.sink not in range(v.n_entities)
    assert v.inverse(v.inverse(1)) == 1


def test_single_triple_all_flags_gives_seven_edges():
    g = build_graph([("a", "r", "b")])
    aug = augment(g, True, True, True)
    v = aug.vocab
    a, b, r = v.entity_id("a"), v.entity_id("b"), v.relation_id("r")
    expected = {
        Triple(a, r, b), Triple(b, v.inverse(r), a), Triple(a, v.no_op, a), Triple(b, v.no_op, b),
        Triple(a, v.no_answer, v.sink), Triple(b, v.no_answer, v.sink), Triple(v.sink, v.no_op, v.sink),
    }
    assert set(aug.edges()) == expected and aug.n_edges == 7


def test_empty_graph_all_flags_only_sink_loop():
    aug = augment(KnowledgeGraph(Vocab(), []), True, True, True)
    assert aug.edges() == [Triple(0, aug.vocab.no_op, 0)]


def test_no_flags_is_identity():
    g = build_graph([("a", "r", "b"), ("b", "r", "c")])
    assert augment(g, False, False, False) is g


def test_double_augmentation_rejected():
    aug = augment(build_graph([("a", "r", "b")]), True, True, True)
    with pytest.raises(AugmentationError):
        augment(aug, True, False, False)


def test_edge_count_formula():
    g = build_graph([("a", "r", "b"), ("b", "s", "c"), ("c", "r", "d"), ("d", "s", "a")])
    aug = augment(g, True, True, True)
    L, E = len(g.triples), g.vocab.n_entities
    assert aug.n_edges == 2 * L + E + E + 1


def test_sink_is_absorbing(fig1):
    v = fig1.vocab
    assert actions(fig1, v.sink) == [(v.no_op, v.sink)]


def test_fig1_inverse_action(fig1):
    v = fig1.vocab
    acts = actions(fig1, v.entity_id("France"))
    assert (v.inverse(v.relation_id("president_of")), v.entity_id("Macron")) in acts


def test_noop_only_entity():
    v = Vocab(["a", "b"], ["r"])
    g = augment(KnowledgeGraph(v, []), False, True, False)
    assert actions(g, 0) == [(v.no_op, 0)]


def test_cap_keeps_synthetic_and_is_stable():
    triples = [("hub", f"r{i % 7}", f"t{i}") for i in range(500)]
    aug = augment(build_graph(triples), True, True, True)
    v = aug.vocab
    hub = v.entity_id("hub")
    got = actions(aug, hub, max_out=200)
    assert len(got) == 200 and got == actions(aug, hub, max_out=200)
    assert (v.no_op, hub) in got and (v.no_answer, v.sink) in got
    # oracle: first 198 regular edges in (relation, tail) order plus the two synthetic ones
    regular = sorted(a for a in aug.adjacency[hub] if a[0] not in (v.no_op, v.no_answer))
    assert got == sorted(regular[:198] + [(v.no_op, hub), (v.no_answer, v.sink)])


def test_mask_removes_edges(fig1):
    v = fig1.vocab
    fr, pa, cap = v.entity_id("France"), v.entity_id("Paris"), v.relation_id("capital")
    assert (cap, pa) in actions(fig1, fr)
    assert (cap, pa) not in actions(fig1, fr, mask={(fr, cap, pa)})


def test_inverse_closure(fig1):
    v = fig1.vocab
    for h, r, t in fig1.triples:
        inv = [x for x in fig1.adjacency[t] if x == (v.inverse(r), h)]
        assert len(inv) == 1


def test_action_table_matches_actions(fig1):
    rels, ents, deg, _ = fig1.action_table(200)
    for e in range(fig1.vocab.n_entities_aug):
        assert list(zip(rels[e, :deg[e]].tolist(), ents[e, :deg[e]].tolist())) == actions(fig1, e)
