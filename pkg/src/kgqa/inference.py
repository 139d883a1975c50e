"""Beam-search decoding and QA evaluation (hits@k, MRR, precision, answer rate, QA score)."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import policy as pol
from .dataset import Query
from .episode import ActionBatcher
from .kg_store import KnowledgeGraph


@dataclass
class Verdict:
    query: Query
    answered: bool
    top1: int | None
    ranked: list[tuple[int, float]] = field(default_factory=list)  # (entity, log-prob), sink excluded
    best_path: tuple = ()

    @property
    def correct(self) -> bool:
        return self.answered and self.top1 in self.query.gold

    def gold_rank(self, exclude: Iterable[int] = ()) -> int | None:
        """1-based rank of the best-ranked gold entity, or None if absent."""
        skip = set(exclude) - set(self.query.gold)
        rank = 0
        for e, _ in self.ranked:
            if e in skip:
                continue
            rank += 1
            if e in self.query.gold:
                return rank
        return None


@dataclass
class EvalReport:
    hits_at_1: float
    hits_at_10: float
    mrr: float
    precision: float
    answer_rate: float
    qa_score: float
    n_queries: int
    n_answered: int
    n_correct: int

    def to_dict(self) -> dict:
        return asdict(self)


def qa_score(precision: float, answer_rate: float) -> float:
    """Harmonic mean of precision and answer rate (0 when both are 0)."""
    s = precision + answer_rate
    return 0.0 if s == 0 else 2.0 * precision * answer_rate / s


def beam_decode(g: KnowledgeGraph, params, q: Query, T: int = 3, B: int = 20, max_out: int = 200) -> Verdict:
    """Keep the ``B`` most probable partial paths for ``T`` steps.

    Ties in cumulative log-prob break on (current entity, action sequence)
    ascending. Final entities keep their best path score; the query counts as
    answered unless the sink is the single best final entity.
    """
    v = g.vocab
    _, hidden = pol.dims(params)
    batcher = ActionBatcher(g, [q], np.zeros(1, dtype=np.int64), max_out)
    state = pol.PolicyState.zeros(1, hidden)
    score = np.zeros(1)
    cur = np.array([q.e_q], dtype=np.int64)
    prev_r = np.array([v.start], dtype=np.int64)
    seq = np.zeros((1, 0), dtype=np.int64)      # interleaved (rel, ent) columns
    for _ in range(T):
        n = len(cur)
        state = pol.step_history(params, state, prev_r, cur)
        batcher.row_query = np.zeros(n, dtype=np.int64)
        a_rels, a_ents, valid = batcher(cur)
        logp = pol.action_logits(params, state, cur, np.full(n, q.r_q), a_rels, a_ents, valid).value
        rows, cols = np.nonzero(valid)
        cand_score = score[rows] + logp[rows, cols]
        cand_ent = a_ents[rows, cols]
        cand_rel = a_rels[rows, cols]
        cand_seq = np.concatenate([seq[rows], cand_rel[:, None], cand_ent[:, None]], axis=1)
        # np.lexsort: last key is primary
        keys = [cand_seq[:, j] for j in range(cand_seq.shape[1] - 1, -1, -1)] + [cand_ent, -cand_score]
        order = np.lexsort(keys)[:B]
        parent = rows[order]
        state = state.take(parent)
        score = cand_score[order]
        cur = cand_ent[order]
        prev_r = cand_rel[order]
        seq = cand_seq[order]

    best: dict[int, tuple[float, int]] = {}
    for i, (e, s) in enumerate(zip(cur.tolist(), score.tolist())):
        if e not in best or s > best[e][0]:
            best[e] = (s, i)
    ordered = sorted(best.items(), key=lambda kv: (-kv[1][0], kv[0]))
    top_entity, (_, top_row) = ordered[0]
    ranked = [(e, s) for e, (s, _) in ordered if e != v.sink]
    answered = top_entity != v.sink
    return Verdict(q, answered, top_entity if answered else None, ranked,
                   tuple(int(x) for x in seq[top_row]))


def greedy_decode(g: KnowledgeGraph, params, q: Query, T: int = 3, max_out: int = 200) -> tuple:
    """Arg-max action at every step; returns the interleaved (rel, ent) sequence."""
    v = g.vocab
    _, hidden = pol.dims(params)
    batcher = ActionBatcher(g, [q], np.zeros(1, dtype=np.int64), max_out)
    state = pol.PolicyState.zeros(1, hidden)
    cur = np.array([q.e_q])
    prev_r = np.array([v.start])
    out = []
    for _ in range(T):
        state = pol.step_history(params, state, prev_r, cur)
        a_rels, a_ents, valid = batcher(cur)
        logp = pol.action_logits(params, state, cur, np.array([q.r_q]), a_rels, a_ents, valid).value[0]
        cols = np.nonzero(valid[0])[0]
        # highest log-prob, ties on (entity, relation) ascending like the beam
        j = min(cols, key=lambda c: (-logp[c], a_ents[0, c], a_rels[0, c]))
        out += [int(a_rels[0, j]), int(a_ents[0, j])]
        prev_r, cur = a_rels[0, j:j + 1], a_ents[0, j:j + 1]
    return tuple(out)


def aggregate(verdicts: Sequence[Verdict], filter_known: dict | None = None) -> EvalReport:
    """Fold verdicts into an :class:`EvalReport`.

    Unanswered queries count toward neither hits@k nor MRR numerators.
    ``filter_known`` maps ``(e_q, r_q)`` to other known answers to drop from
    the ranking (filtered setting).
    """
    n = len(verdicts)
    n_ans = sum(v.answered for v in verdicts)
    n_cor = sum(v.correct for v in verdicts)
    h1 = h10 = rr = 0.0
    for v in verdicts:
        if not v.answered:
            continue
        known = filter_known.get((v.query.e_q, v.query.r_q), ()) if filter_known else ()
        rank = v.gold_rank(known)
        if rank is None:
            continue
        h1 += rank <= 1
        h10 += rank <= 10
        rr += 1.0 / rank
    precision = n_cor / n_ans if n_ans else 0.0
    answer_rate = n_ans / n if n else 0.0
    return EvalReport(
        hits_at_1=h1 / n if n else 0.0,
        hits_at_10=h10 / n if n else 0.0,
        mrr=rr / n if n else 0.0,
        precision=precision,
        answer_rate=answer_rate,
        qa_score=qa_score(precision, answer_rate),
        n_queries=n,
        n_answered=n_ans,
        n_correct=n_cor,
    )


def evaluate(g: KnowledgeGraph, params, queries: Sequence[Query], T: int = 3, B: int = 20,
             max_out: int = 200) -> tuple[EvalReport, list[Verdict]]:
    verdicts = [beam_decode(g, params, q, T, B, max_out) for q in queries]
    return aggregate(verdicts), verdicts


def write_verdicts(verdicts: Sequence[Verdict], g: KnowledgeGraph, path: str | Path) -> None:
    """TSV: ``e_q, r_q, top1 or NO_ANSWER, correct flag, rank of gold or -1``."""
    v = g.vocab
    with open(path, "w", encoding="utf-8") as fh:
        for vd in verdicts:
            rank = vd.gold_rank() if vd.answered else None
            top = v.entity_name(vd.top1) if vd.answered else "NO_ANSWER"
            fh.write(f"{v.entity_name(vd.query.e_q)}\t{v.relation_name(vd.query.r_q)}\t{top}\t"
                     f"{int(vd.correct)}\t{rank if rank is not None else -1}\n")


def write_report(report: EvalReport, path: str | Path, extra: dict | None = None) -> None:
    doc = dict(report.to_dict())
    doc.update(extra or {})
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")
