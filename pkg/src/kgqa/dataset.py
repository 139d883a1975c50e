"""Query splits, train-time gold-edge masking, and a synthetic rule benchmark."""
from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kg_store import (KGFormatError, KnowledgeGraph, Triple, Vocab, VocabLookupError, augment,
                       reachable_within)

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")


@dataclass(frozen=True)
class Query:
    e_q: int
    r_q: int
    gold: frozenset
    split: str = "test"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")


def load_queries(path: str | Path, vocab: Vocab, split: str) -> list[Query]:
    """Read ``e_q<TAB>r_q<TAB>e_a`` lines; rows sharing ``(e_q, r_q)`` merge their gold sets.

    Queries come back in first-seen ``(e_q, r_q)`` order.
    """
    grouped: dict[tuple[int, int], set] = {}
    bad: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise KGFormatError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            try:
                key = (vocab.entity_id(parts[0]), vocab.relation_id(parts[1]))
                ans = vocab.entity_id(parts[2])
            except VocabLookupError as exc:
                bad.append(f"line {lineno}: {exc.args[0]}")
                continue
            grouped.setdefault(key, set()).add(ans)
    if bad:
        raise VocabLookupError(f"{path}: {len(bad)} line(s) with unknown names: " + "; ".join(bad[:20]))
    return [Query(e, r, frozenset(g), split) for (e, r), g in grouped.items()]


def save_queries(queries: list[Query], vocab: Vocab, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for q in queries:
            for a in sorted(q.gold):
                fh.write(f"{vocab.entity_names[q.e_q]}\t{vocab.relation_names[q.r_q]}\t{vocab.entity_names[a]}\n")


def mask_for(q: Query, vocab: Vocab) -> frozenset:
    """Edges hiding the query's own answer facts (train split only)."""
    if q.split != "train":
        return frozenset()
    inv = vocab.inverse(q.r_q)
    out = set()
    for a in q.gold:
        out.add(Triple(q.e_q, q.r_q, a))
        out.add(Triple(a, inv, q.e_q))
    return frozenset(out)


@dataclass
class SyntheticSpec:
    """Knobs for :func:`generate_synthetic`.

    Each planted rule reads ``head(x, z) <= body1(x, y) and body2(y, z)``.
    An intermediate ``y`` has ``body2`` edges to a small fan-out of tails;
    one of them is the query's gold answer, the rest are distractors.
    """

    n_entities: int = 1000
    n_relations: int = 20
    n_rules: int = 4
    n_queries: int = 1500
    noise_degree: float = 2.0
    unreachable_fraction: float = 0.156
    fanout_probs: tuple = (0.7, 0.15, 0.1, 0.05)
    split_fractions: tuple = (0.7, 0.15, 0.15)
    hops: int = 3
    seed: int = 0

    def validate(self) -> None:
        if self.n_relations < 3 * self.n_rules + 1:
            raise ValueError("need at least 3 relations per rule plus one noise relation")
        if not 0.0 <= self.unreachable_fraction <= 1.0:
            raise ValueError("unreachable_fraction must lie in [0, 1]")
        if self.n_entities < 10 or self.n_queries < 1:
            raise ValueError("synthetic graph too small")
        if abs(sum(self.fanout_probs) - 1.0) > 1e-9 or abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ValueError("fanout_probs and split_fractions must each sum to 1")
        # each query consumes one fresh start entity per rule
        if self.n_queries > self.n_rules * (self.n_entities // 2):
            raise ValueError("density too low: not enough entities to plant every query")


@dataclass
class SyntheticData:
    graph: KnowledgeGraph
    queries: list[Query]
    unreachable: frozenset = field(default_factory=frozenset)  # indices into queries
    rules: list[tuple[int, int, int]] = field(default_factory=list)

    def split(self, name: str) -> list[Query]:
        return [q for q in self.queries if q.split == name]


def generate_synthetic(spec: SyntheticSpec) -> SyntheticData:
    """Build a rule-structured graph with a verified share of unreachable queries.

    Train-split facts ``(e_q, head, gold)`` stay in the graph (they are masked
    during rollouts); valid/test facts are held out. Reachability is checked
    on the inverse-augmented graph under each query's own mask.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    E, R = spec.n_entities, spec.n_relations
    vocab = Vocab([f"e{i}" for i in range(E)], [f"r{i}" for i in range(R)]).freeze()
    heads = list(range(spec.n_rules))
    bodies = [(spec.n_rules + 2 * i, spec.n_rules + 2 * i + 1) for i in range(spec.n_rules)]
    noise_rels = list(range(3 * spec.n_rules, R))
    rules = [(h, b1, b2) for h, (b1, b2) in zip(heads, bodies)]

    edges: set[Triple] = set()
    n_noise = int(round(spec.noise_degree * E))
    while len(edges) < n_noise:
        h, t = rng.integers(E, size=2)
        if h != t:
            edges.add(Triple(int(h), int(rng.choice(noise_rels)), int(t)))

    n_unreach = math.ceil(spec.unreachable_fraction * spec.n_queries - 1e-9)
    n_answer = spec.n_queries - n_unreach
    used_start: dict[int, set] = defaultdict(set)   # rule -> start entities already used
    protected: set[Triple] = set()
    fanout: dict[tuple[int, int], list[int]] = {}   # (rule, mid) -> tails via body2
    plans: list[tuple[int, int, int]] = []          # (rule, e_q, gold)
    answerable_mids: dict[int, set] = defaultdict(set)
    fan_sizes = np.arange(1, len(spec.fanout_probs) + 1)

    def fresh_start(rule: int) -> int:
        for _ in range(100 * E):
            e = int(rng.integers(E))
            if e not in used_start[rule]:
                used_start[rule].add(e)
                return e
        raise ValueError("density too low: ran out of start entities")

    for i in range(n_answer):
        rule = i % spec.n_rules
        _, b1, b2 = rules[rule]
        e_q = fresh_start(rule)
        while True:
            mid = int(rng.integers(E))
            if mid == e_q:
                continue
            key = (rule, mid)
            if key not in fanout:
                k = int(rng.choice(fan_sizes, p=spec.fanout_probs))
                tails = [int(t) for t in rng.choice(E, size=min(E, k + 1), replace=False) if t != mid][:k]
                fanout[key] = tails
                for t in tails:
                    edges.add(Triple(mid, b2, t))
                    protected.add(Triple(mid, b2, t))
            options = [t for t in fanout[key] if t != e_q]
            if options:
                break
        edges.add(Triple(e_q, b1, mid))
        protected.add(Triple(e_q, b1, mid))
        answerable_mids[rule].add(mid)
        gold = options[int(rng.integers(len(options)))]
        plans.append((rule, e_q, gold))

    # broken-rule starts: either no body1 edge at all, or a body1 edge to a dead end
    unreach_plans: list[tuple[int, int]] = []
    for i in range(n_unreach):
        rule = i % spec.n_rules
        _, b1, b2 = rules[rule]
        e_q = fresh_start(rule)
        if rng.random() < 0.5:
            for _ in range(100):
                mid = int(rng.integers(E))
                if mid != e_q and (rule, mid) not in fanout:
                    break
            tr = Triple(e_q, b1, mid)
            edges.add(tr)
            protected.add(tr)
            fanout[(rule, mid)] = []
        unreach_plans.append((rule, e_q))

    # a dead-end mid must not have body2 edges (noise never uses body relations)
    split_names = _assign_splits(spec, rng)
    base = KnowledgeGraph(vocab, sorted(edges))
    aug = augment(base, add_inverse=True, add_noop=False, add_noanswer=False)

    queries: list[Query] = []
    unreachable: set[int] = set()
    for idx, (rule, e_q, gold) in enumerate(plans):
        queries.append(Query(e_q, rules[rule][0], frozenset([gold]), split_names[idx]))
    for j, (rule, e_q) in enumerate(unreach_plans):
        idx = n_answer + j
        ball = reachable_within(aug, e_q, spec.hops)
        candidates = [e for e in range(E) if e not in ball]
        if not candidates:
            raise ValueError("density too high: no entity lies outside the hop radius")
        gold = int(candidates[int(rng.integers(len(candidates)))])
        queries.append(Query(e_q, rules[rule][0], frozenset([gold]), split_names[idx]))
        unreachable.add(idx)

    # shuffle into a stable random order, then add train facts to the graph
    order = rng.permutation(len(queries))
    queries = [queries[i] for i in order]
    unreachable = {int(np.where(order == i)[0][0]) for i in unreachable}
    train_facts = {Triple(q.e_q, q.r_q, a) for q in queries if q.split == "train" for a in q.gold}
    graph = KnowledgeGraph(vocab, sorted(edges | train_facts))
    queries, unreachable = _repair_reachability(graph, queries, unreachable, protected, spec, rng)
    graph = KnowledgeGraph(vocab, sorted(set(graph.triples)))
    logger.info("synthetic graph: %d triples, %d queries (%d unreachable)",
                len(graph.triples), len(queries), len(unreachable))
    return SyntheticData(graph, queries, frozenset(unreachable), rules)


def _assign_splits(spec: SyntheticSpec, rng: np.random.Generator) -> list[str]:
    n = spec.n_queries
    n_train = int(round(spec.split_fractions[0] * n))
    n_valid = int(round(spec.split_fractions[1] * n))
    names = ["train"] * n_train + ["valid"] * n_valid + ["test"] * (n - n_train - n_valid)
    return [names[i] for i in rng.permutation(n)]


def _repair_reachability(graph: KnowledgeGraph, queries: list[Query], unreachable: set[int],
                         protected: set[Triple], spec: SyntheticSpec, rng) -> tuple[list[Query], set[int]]:
    """Re-draw gold answers until every unreachable query really is unreachable.

    Adding train facts can open new short paths to a previously isolated gold
    entity. Such a query gets a new gold entity drawn from outside its hop
    ball (its train fact moves with it); when the ball covers every entity an
    unprotected edge on the offending path is deleted instead. Finally every
    query is re-verified (answerable ones must stay reachable).
    """
    vocab = graph.vocab
    E = vocab.n_entities
    triples = set(graph.triples)

    def rebuild():
        return augment(KnowledgeGraph(vocab, sorted(triples)), add_inverse=True, add_noop=False)

    g = rebuild()
    for _ in range(100):
        changed = False
        for i in sorted(unreachable):
            q = queries[i]
            mask = mask_for(q, vocab)
            if _find_path(g, q.e_q, set(q.gold), spec.hops, mask) is None:
                continue
            changed = True
            ball = reachable_within(g, q.e_q, spec.hops, mask)
            candidates = [e for e in range(E) if e not in ball]
            if candidates:
                gold = int(candidates[int(rng.integers(len(candidates)))])
                if q.split == "train":
                    for a in q.gold:
                        triples.discard(Triple(q.e_q, q.r_q, a))
                    triples.add(Triple(q.e_q, q.r_q, gold))
                queries[i] = Query(q.e_q, q.r_q, frozenset([gold]), q.split)
            else:
                path = _find_path(g, q.e_q, set(q.gold), spec.hops, mask)
                keep = protected | {Triple(x.e_q, x.r_q, a) for x in queries if x.split == "train" for a in x.gold}
                cut = None
                for h, r, t in path:
                    base = Triple(h, r, t) if r < vocab.n_relations else Triple(t, vocab.inverse(r), h)
                    if base not in keep and base in triples:
                        cut = base
                        break
                if cut is None:
                    raise ValueError("could not break every short path to an unreachable gold answer")
                triples.discard(cut)
            g = rebuild()
        if not changed:
            break
    for i, q in enumerate(queries):
        found = _find_path(g, q.e_q, set(q.gold), spec.hops, mask_for(q, vocab)) is not None
        if found == (i in unreachable):
            raise ValueError(f"reachability verification failed for query {i}")
    graph.triples = sorted(triples)
    graph.adjacency = KnowledgeGraph(vocab, graph.triples).adjacency
    return queries, unreachable


def _find_path(g: KnowledgeGraph, start: int, targets: set, hops: int, mask) -> list | None:
    """Breadth-first search for any walk of length <= hops from start into targets."""
    parent = {start: None}
    frontier = [start]
    for _ in range(hops):
        nxt = []
        for e in frontier:
            for r, t in g.adjacency.get(e, ()):
                if (e, r, t) in mask or t in parent:
                    continue
                parent[t] = (e, r)
                if t in targets:
                    path = []
                    cur = t
                    while parent[cur] is not None:
                        pe, pr = parent[cur]
                        path.append((pe, pr, cur))
                        cur = pe
                    return path[::-1]
                nxt.append(t)
        frontier = nxt
    return None
