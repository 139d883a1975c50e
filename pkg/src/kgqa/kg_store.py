"""Integer-coded triple store with inverse / no-op / no-answer augmentation.

Relation id layout after augmentation (``R`` = number of dataset relations):

    0 .. R-1        dataset relations
    R .. 2R-1       inverses (``r + R``)
    2R              NO_OP
    2R + 1          NO_ANSWER
    2R + 2          START (first LSTM input, never an edge)
    2R + 3          PAD (filler for padded action rows, never an edge)

The no-answer sink entity gets id ``|E|``, one past the last dataset entity.
"""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

logger = logging.getLogger(__name__)

NO_OP_NAME = "NO_OP"
NO_ANSWER_NAME = "NO_ANSWER"
START_NAME = "START"
PAD_NAME = "PAD"
SINK_NAME = "NO_ANSWER_ENTITY"
INVERSE_SUFFIX = "_inv"


class KGFormatError(ValueError):
    """Malformed triple / query file line."""


class VocabLookupError(KeyError):
    """A name is missing from a frozen vocabulary."""


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


class Vocab:
    """Bijective name <-> id maps for entities and dataset relations."""

    def __init__(self, entities: Iterable[str] = (), relations: Iterable[str] = ()):
        self.entity_names: list[str] = []
        self.relation_names: list[str] = []
        self._ent: dict[str, int] = {}
        self._rel: dict[str, int] = {}
        self.frozen = False
        for name in entities:
            self.add_entity(name)
        for name in relations:
            self.add_relation(name)

    @property
    def n_entities(self) -> int:
        return len(self.entity_names)

    @property
    def n_relations(self) -> int:
        return len(self.relation_names)

    def add_entity(self, name: str) -> int:
        if name in self._ent:
            return self._ent[name]
        if self.frozen:
            raise VocabLookupError(f"unknown entity {name!r}")
        if name == SINK_NAME:
            raise ValueError(f"{name!r} is reserved")
        self._ent[name] = len(self.entity_names)
        self.entity_names.append(name)
        return self._ent[name]

    def add_relation(self, name: str) -> int:
        if name in self._rel:
            return self._rel[name]
        if self.frozen:
            raise VocabLookupError(f"unknown relation {name!r}")
        if name in (NO_OP_NAME, NO_ANSWER_NAME, START_NAME, PAD_NAME):
            raise ValueError(f"{name!r} is reserved")
        self._rel[name] = len(self.relation_names)
        self.relation_names.append(name)
        return self._rel[name]

    def entity_id(self, name: str) -> int:
        try:
            return self._ent[name]
        except KeyError:
            raise VocabLookupError(f"unknown entity {name!r}") from None

    def relation_id(self, name: str) -> int:
        try:
            return self._rel[name]
        except KeyError:
            raise VocabLookupError(f"unknown relation {name!r}") from None

    def freeze(self) -> "Vocab":
        self.frozen = True
        return self

    # reserved ids, all derived from the dataset relation count
    @property
    def no_op(self) -> int:
        return 2 * self.n_relations

    @property
    def no_answer(self) -> int:
        return 2 * self.n_relations + 1

    @property
    def start(self) -> int:
        return 2 * self.n_relations + 2

    @property
    def pad(self) -> int:
        return 2 * self.n_relations + 3

    @property
    def n_relations_aug(self) -> int:
        return 2 * self.n_relations + 4

    @property
    def sink(self) -> int:
        return self.n_entities

    @property
    def n_entities_aug(self) -> int:
        return self.n_entities + 1

    def inverse(self, rel: int) -> int:
        R = self.n_relations
        if rel < R:
            return rel + R
        if rel < 2 * R:
            return rel - R
        raise ValueError(f"relation {rel} has no inverse")

    def entity_name(self, eid: int) -> str:
        if eid == self.sink:
            return SINK_NAME
        return self.entity_names[eid]

    def relation_name(self, rid: int) -> str:
        R = self.n_relations
        if rid < R:
            return self.relation_names[rid]
        if rid < 2 * R:
            return self.relation_names[rid - R] + INVERSE_SUFFIX
        return {2 * R: NO_OP_NAME, 2 * R + 1: NO_ANSWER_NAME,
                2 * R + 2: START_NAME, 2 * R + 3: PAD_NAME}[rid]

    def save(self, prefix: str | Path) -> None:
        """Write ``<prefix>.entities.tsv`` and ``<prefix>.relations.tsv``."""
        prefix = str(prefix)
        for suffix, names in (("entities", self.entity_names), ("relations", self.relation_names)):
            with open(f"{prefix}.{suffix}.tsv", "w", encoding="utf-8") as fh:
                for i, name in enumerate(names):
                    fh.write(f"{name}\t{i}\n")

    @classmethod
    def load(cls, prefix: str | Path) -> "Vocab":
        prefix = str(prefix)
        vocab = cls()
        for suffix, add in (("entities", vocab.add_entity), ("relations", vocab.add_relation)):
            rows = []
            with open(f"{prefix}.{suffix}.tsv", encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, 1):
                    parts = line.rstrip("\n").split("\t")
                    if len(parts) != 2:
                        raise KGFormatError(f"{prefix}.{suffix}.tsv:{lineno}: expected name<TAB>id")
                    rows.append((int(parts[1]), parts[0]))
            for expected, (i, name) in enumerate(sorted(rows)):
                if i != expected:
                    raise KGFormatError(f"{prefix}.{suffix}.tsv: ids are not dense at {i}")
                add(name)
        return vocab


@dataclass
class KnowledgeGraph:
    vocab: Vocab
    triples: list[Triple]
    inverse_added: bool = False
    noop_added: bool = False
    noanswer_added: bool = False
    # entity -> edges sorted by (relation, tail); includes synthetic edges once augmented
    adjacency: dict[int, list[tuple[int, int]]] = field(default_factory=dict, repr=False)
    _action_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not self.adjacency:
            self.adjacency = _build_adjacency(self.triples)

    @property
    def n_edges(self) -> int:
        return sum(len(v) for v in self.adjacency.values())

    def edges(self) -> list[Triple]:
        """Every edge including synthetic ones, sorted by (head, relation, tail)."""
        return [Triple(h, r, t) for h in sorted(self.adjacency) for r, t in self.adjacency[h]]

    def has_edge(self, h: int, r: int, t: int) -> bool:
        return (r, t) in self._edge_sets().get(h, ())

    def _edge_sets(self) -> dict[int, set]:
        cache = self._action_cache.get("sets")
        if cache is None:
            cache = {h: set(v) for h, v in self.adjacency.items()}
            self._action_cache["sets"] = cache
        return cache

    def is_synthetic(self, rel: int) -> bool:
        return rel in (self.vocab.no_op, self.vocab.no_answer)

    def action_table(self, max_out: int = 200):
        """Padded per-entity action arrays for batched lookups.

        Returns ``(rels, ents, degree, truncated)``. ``rels``/``ents`` have shape
        ``(|E_aug|, W)``; row ``e`` holds ``actions(e, max_out=max_out)``
        followed by PAD filler. ``truncated[e]`` says whether the cap removed
        edges from ``e``.
        """
        key = ("table", max_out)
        if key not in self._action_cache:
            n = self.vocab.n_entities_aug
            rows = [actions(self, e, max_out=max_out) for e in range(n)]
            width = max(1, max(len(r) for r in rows))
            rels = np.full((n, width), self.vocab.pad, dtype=np.int64)
            ents = np.tile(np.arange(n, dtype=np.int64)[:, None], (1, width))
            deg = np.zeros(n, dtype=np.int64)
            truncated = np.zeros(n, dtype=bool)
            for e, row in enumerate(rows):
                deg[e] = len(row)
                truncated[e] = len(self.adjacency.get(e, ())) > len(row)
                if row:
                    arr = np.asarray(row, dtype=np.int64)
                    rels[e, : len(row)] = arr[:, 0]
                    ents[e, : len(row)] = arr[:, 1]
            self._action_cache[key] = (rels, ents, deg, truncated)
        return self._action_cache[key]


def _build_adjacency(triples: Iterable[Triple]) -> dict[int, list[tuple[int, int]]]:
    adj: dict[int, set] = defaultdict(set)
    for h, r, t in triples:
        adj[h].add((r, t))
    return {h: sorted(v) for h, v in adj.items()}


def load_triples(path: str | Path, vocab: Vocab | None = None) -> tuple[KnowledgeGraph, Vocab]:
    """Parse a ``head<TAB>relation<TAB>tail`` file into a deduplicated graph.

    A fresh vocab is extended in first-seen order; a frozen vocab raises
    :class:`VocabLookupError` on unknown names.
    """
    vocab = vocab if vocab is not None else Vocab()
    seen: set[Triple] = set()
    triples: list[Triple] = []
    n_dup = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise KGFormatError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            h = vocab.add_entity(parts[0])
            r = vocab.add_relation(parts[1])
            t = vocab.add_entity(parts[2])
            tr = Triple(h, r, t)
            if tr in seen:
                n_dup += 1
                continue
            seen.add(tr)
            triples.append(tr)
    if n_dup:
        logger.info("%s: dropped %d duplicate triples", path, n_dup)
    return KnowledgeGraph(vocab, triples), vocab


def save_triples(g: KnowledgeGraph, path: str | Path) -> None:
    """Write the dataset (non-synthetic) triples as names, in stored order."""
    v = g.vocab
    with open(path, "w", encoding="utf-8") as fh:
        for h, r, t in g.triples:
            fh.write(f"{v.entity_names[h]}\t{v.relation_names[r]}\t{v.entity_names[t]}\n")


class AugmentationError(RuntimeError):
    pass


def augment(g: KnowledgeGraph, add_inverse: bool = True, add_noop: bool = True,
            add_noanswer: bool = False) -> KnowledgeGraph:
    """Return a new graph with the requested synthetic edges added.

    With ``add_noanswer`` every dataset entity gets a NO_ANSWER edge to the
    shared sink; the sink itself only loops on NO_OP.
    """
    if (add_inverse and g.inverse_added) or (add_noop and g.noop_added) or (add_noanswer and g.noanswer_added):
        raise AugmentationError("graph is already augmented with the requested edges")
    if not (add_inverse or add_noop or add_noanswer):
        return g
    v = g.vocab
    v.freeze()
    adj: dict[int, set] = defaultdict(set)
    for h, edges in g.adjacency.items():
        adj[h].update(edges)
    if add_inverse:
        for h, r, t in g.triples:
            adj[t].add((v.inverse(r), h))
    noop = add_noop or g.noop_added
    noanswer = add_noanswer or g.noanswer_added
    if add_noop:
        for e in range(v.n_entities):
            adj[e].add((v.no_op, e))
    if add_noanswer:
        for e in range(v.n_entities):
            adj[e].add((v.no_answer, v.sink))
    if noanswer and noop:
        adj[v.sink] = {(v.no_op, v.sink)}
    elif noanswer:
        adj[v.sink] = set()
    out = KnowledgeGraph(
        v, list(g.triples),
        inverse_added=g.inverse_added or add_inverse,
        noop_added=noop,
        noanswer_added=noanswer,
        adjacency={h: sorted(e) for h, e in adj.items() if e or h == v.sink},
    )
    return out


def actions(g: KnowledgeGraph, e: int, mask: set | frozenset | None = None,
            max_out: int = 200) -> list[tuple[int, int]]:
    """Outgoing ``(relation, tail)`` edges of ``e`` minus ``mask``, capped at ``max_out``.

    ``mask`` holds ``(head, relation, tail)`` triples. Ordering is
    ``(relation, tail)`` ascending; NO_OP and NO_ANSWER edges survive the cap.
    """
    edges = g.adjacency.get(e, [])
    if mask:
        edges = [(r, t) for r, t in edges if (e, r, t) not in mask]
    if len(edges) <= max_out:
        return list(edges)
    reserved = [a for a in edges if g.is_synthetic(a[0])]
    regular = [a for a in edges if not g.is_synthetic(a[0])]
    keep = max(0, max_out - len(reserved))
    return sorted(regular[:keep] + reserved)


def reachable_within(g: KnowledgeGraph, start: int, hops: int, mask: set | frozenset | None = None) -> set[int]:
    """Entities reachable from ``start`` in at most ``hops`` edges (ignoring the action cap)."""
    frontier = {start}
    seen = {start}
    for _ in range(hops):
        nxt = set()
        for e in frontier:
            for r, t in g.adjacency.get(e, ()):
                if mask and (e, r, t) in mask:
                    continue
                if t not in seen:
                    nxt.add(t)
        seen |= nxt
        frontier = nxt
        if not frontier:
            break
    return seen
