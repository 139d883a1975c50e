import numpy as np
import pytest

from kgqa.dataset import Query
from kgqa.kg_store import KnowledgeGraph, Triple, Vocab, augment


def build_graph(triples, entities=(), relations=()):
    """Graph from name triples; extra entity/relation names are registered first."""
    v = Vocab(entities, relations)
    ids = [Triple(v.add_entity(h), v.add_relation(r), v.add_entity(t)) for h, r, t in triples]
    return KnowledgeGraph(v, sorted(set(ids)))


@pytest.fixture
def fig1():
    """France / Macron / Paris micro-graph; the capital fact is the training target."""
    g = build_graph([
        ("Macron", "president_of", "France"),
        ("Macron", "lives_in", "Paris"),
        ("France", "capital", "Paris"),
        ("Berlin", "capital_of_country", "Germany"),
    ])
    return augment(g, add_inverse=True, add_noop=True, add_noanswer=True)


@pytest.fixture
def fig1_query(fig1):
    v = fig1.vocab
    return Query(v.entity_id("France"), v.relation_id("capital"), frozenset([v.entity_id("Paris")]), "train")


def random_graph(rng, n_ent, n_rel, n_edges):
    v = Vocab([f"e{i}" for i in range(n_ent)], [f"r{i}" for i in range(n_rel)])
    trip = {Triple(int(rng.integers(n_ent)), int(rng.integers(n_rel)), int(rng.integers(n_ent)))
            for _ in range(n_edges)}
    return KnowledgeGraph(v, sorted(trip))


def numeric_grad(loss_fn, tensor, h=1e-5):
    """Central differences of ``loss_fn()`` (a float) w.r.t. every entry of ``tensor.value``."""
    out = np.zeros_like(tensor.value)
    flat = tensor.value.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = loss_fn()
        flat[i] = old - h
        down = loss_fn()
        flat[i] = old
        out.reshape(-1)[i] = (up - down) / (2 * h)
    return out


def rel_err(a, b):
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


_ACCEPTANCE: list[str] = []


@pytest.fixture
def record():
    """Log one PASS/FAIL line for an acceptance criterion (echoed in the terminal summary)."""
    def _record(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"criterion {number} [{title}]: {'PASS' if ok else 'FAIL'} - {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return ok
    return _record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
