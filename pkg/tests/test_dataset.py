import math

import pytest

from kgqa.dataset import (Query, SyntheticSpec, generate_synthetic, load_queries, mask_for,
                          save_queries)
from kgqa.kg_store import Vocab, VocabLookupError, augment

SMALL = SyntheticSpec(n_entities=300, n_relations=14, n_queries=200, seed=3)


def hits_gold(g, q, hops):
    """Independent depth-limited walk over the raw adjacency (mask applied)."""
    mask = mask_for(q, g.vocab)

    def walk(e, left):
        if e in q.gold:
            return True
        if left == 0:
            return False
        return any(walk(t, left - 1) for r, t in g.adjacency.get(e, ()) if (e, r, t) not in mask)

    return walk(q.e_q, hops)


def test_merge_gold_sets(tmp_path):
    v = Vocab(["a", "b", "c"], ["q"])
    p = tmp_path / "q.tsv"
    p.write_text("a\tq\tb\na\tq\tc\n")
    (q,) = load_queries(p, v, "test")
    assert q.gold == {1, 2} and q.e_q == 0 and q.split == "test"


def test_empty_query_file(tmp_path):
    p = tmp_path / "q.tsv"
    p.write_text("")
    assert load_queries(p, Vocab(), "train") == []


def test_unknown_names_listed(tmp_path):
    p = tmp_path / "q.tsv"
    p.write_text("a\tq\tb\nzz\tq\tb\na\tq\tyy\n")
    with pytest.raises(VocabLookupError, match="line 2.*line 3"):
        load_queries(p, Vocab(["a", "b"], ["q"]), "train")


def test_query_round_trip(tmp_path):
    v = Vocab(["a", "b", "c"], ["q", "s"])
    qs = [Query(0, 0, frozenset({1, 2}), "valid"), Query(2, 1, frozenset({0}), "valid")]
    save_queries(qs, v, tmp_path / "q.tsv")
    assert load_queries(tmp_path / "q.tsv", v, "valid") == qs


def test_mask_train_query():
    v = Vocab(["a", "b", "c"], ["q"])
    q = Query(0, 0, frozenset({1}), "train")
    assert mask_for(q, v) == {(0, 0, 1), (1, v.inverse(0), 0)}
    assert len(mask_for(Query(0, 0, frozenset({1, 2}), "train"), v)) == 4


def test_mask_test_query_empty():
    v = Vocab(["a", "b"], ["q"])
    assert mask_for(Query(0, 0, frozenset({1}), "test"), v) == frozenset()


def test_mask_never_touches_synthetic_edges():
    v = Vocab(["a", "b"], ["q"])
    m = mask_for(Query(0, 0, frozenset({1}), "train"), v)
    assert all(r not in (v.no_op, v.no_answer) for _, r, _ in m)


@pytest.fixture(scope="module")
def small():
    return generate_synthetic(SMALL)


def test_unreachable_count(small):
    assert len(small.queries) == 200
    assert len(small.unreachable) == math.ceil(SMALL.unreachable_fraction * 200)


def test_reachability_verified_by_brute_force(small):
    g = augment(small.graph, True, False, False)
    for i, q in enumerate(small.queries):
        assert hits_gold(g, q, SMALL.hops) == (i not in small.unreachable)


def test_answerable_gold_follows_a_rule(small):
    g = small.graph
    heads = {h: (b1, b2) for h, b1, b2 in small.rules}
    for i, q in enumerate(small.queries):
        if i in small.unreachable:
            continue
        b1, b2 = heads[q.r_q]
        mids = [t for r, t in g.adjacency.get(q.e_q, ()) if r == b1]
        assert any((b2, a) in g.adjacency.get(m, ()) for m in mids for a in q.gold)


def test_default_spec_matches_fraction():
    data = generate_synthetic(SyntheticSpec(n_queries=1000))
    assert len(data.unreachable) == 156


def test_zero_unreachable():
    spec = SyntheticSpec(n_entities=300, n_relations=14, n_queries=150, unreachable_fraction=0.0, seed=1)
    data = generate_synthetic(spec)
    g = augment(data.graph, True, False, False)
    assert not data.unreachable
    assert all(hits_gold(g, q, 3) for q in data.queries)


def test_generation_is_deterministic(small):
    again = generate_synthetic(SMALL)
    assert again.graph.triples == small.graph.triples and again.queries == small.queries


def test_train_facts_in_graph_heldout_facts_not(small):
    present = set(small.graph.triples)
    for q in small.queries:
        for a in q.gold:
            assert ((q.e_q, q.r_q, a) in present) == (q.split == "train")


def test_infeasible_spec_rejected():
    with pytest.raises(ValueError):
        generate_synthetic(SyntheticSpec(n_entities=20, n_queries=500))
    with pytest.raises(ValueError):
        SyntheticSpec(unreachable_fraction=1.5).validate()
