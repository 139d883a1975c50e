"""Environment, rewards, rollouts, REINFORCE / supervised updates and DFS path mining."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from . import policy as pol
from .dataset import Query, mask_for
from .kg_store import KnowledgeGraph, actions


class TargetNotExecutable(ValueError):
    pass


@dataclass(frozen=True)
class State:
    t: int
    e_t: int
    e_q: int
    r_q: int


@dataclass(frozen=True)
class RewardConfig:
    mode: str = "ternary"
    r_pos: float = 10.0
    r_neg: float = -0.1
    r_neutral: float = 0.0

    def __post_init__(self):
        if self.mode not in ("binary", "ternary"):
            raise ValueError(f"unknown reward mode {self.mode!r}")
        if self.r_neutral != 0.0:
            raise ValueError("the neutral reward is fixed at 0")
        if self.mode == "ternary" and not (self.r_pos > 0 > self.r_neg):
            raise ValueError("ternary rewards need r_pos > 0 > r_neg")


def reward(e_T: int, gold, cfg: RewardConfig, sink: int | None = None) -> float:
    if e_T in gold:
        return cfg.r_pos if cfg.mode == "ternary" else 1.0
    if cfg.mode == "binary":
        return 0.0
    if sink is not None and e_T == sink:
        return cfg.r_neutral
    return cfg.r_neg


@dataclass
class Trajectory:
    query: Query
    rels: list[int]
    ents: list[int]
    log_probs: list[float]
    reward: float = 0.0

    @property
    def terminal(self) -> int:
        return self.ents[-1]

    def __len__(self) -> int:
        return len(self.rels)


@dataclass
class DfsExample:
    query: Query
    rels: tuple
    ents: tuple
    no_answer: bool = False


# ------------------------------------------------------------- environment

class ActionBatcher:
    """Padded action rows for a batch of episodes, honouring per-query masks."""

    def __init__(self, g: KnowledgeGraph, queries: Sequence[Query], row_query: np.ndarray, max_out: int = 200):
        self.g = g
        self.max_out = max_out
        self.rels_tab, self.ents_tab, self.deg, self.truncated = g.action_table(max_out)
        self.row_query = np.asarray(row_query, dtype=np.int64)
        self.masks = [mask_for(q, g.vocab) for q in queries]
        self.E = g.vocab.n_entities_aug
        self.R = g.vocab.n_relations_aug
        keys = [self._key(qi, h, r, t) for qi, m in enumerate(self.masks) for (h, r, t) in m]
        self.mask_keys = np.array(sorted(keys), dtype=np.int64)
        self.mask_heads = {(qi, h) for qi, m in enumerate(self.masks) for (h, _, _) in m}

    def _key(self, qi, h, r, t):
        return ((qi * self.E + h) * self.R + r) * self.E + t

    def __call__(self, cur: np.ndarray):
        """Return ``(rels, ents, valid)`` arrays of shape ``(n, W)`` for current entities."""
        deg = self.deg[cur]
        width = max(1, int(deg.max()))
        rels = self.rels_tab[cur, :width]
        ents = self.ents_tab[cur, :width]
        valid = np.arange(width)[None, :] < deg[:, None]
        if self.mask_keys.size:
            keys = self._key(self.row_query[:, None], cur[:, None], rels, ents)
            hit = np.isin(keys, self.mask_keys) & valid
            if hit.any():
                valid = valid & ~hit
                for row in np.nonzero(hit.any(axis=1) & self.truncated[cur])[0]:
                    rels, ents, valid = self._exact_row(row, cur[row], rels, ents, valid)
        if not valid.any(axis=1).all():
            raise RuntimeError("an episode reached an entity with no actions; augment with NO_OP first")
        return rels, ents, valid

    def _exact_row(self, row, e, rels, ents, valid):
        # the cap was applied before masking here; rebuild this row the slow, exact way
        acts = actions(self.g, int(e), self.masks[self.row_query[row]], self.max_out)
        rels, ents, valid = rels.copy(), ents.copy(), valid.copy()
        rels[row] = self.g.vocab.pad
        ents[row] = e
        valid[row] = False
        for j, (r, t) in enumerate(acts):
            rels[row, j], ents[row, j], valid[row, j] = r, t, True
        return rels, ents, valid


def query_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent generator per (seed, epoch, query id, ...) so worker count never matters."""
    return np.random.default_rng([int(seed), *[int(s) for s in stream]])


def _sample_rows(logp: np.ndarray, u: np.ndarray) -> np.ndarray:
    p = np.exp(logp)
    cdf = np.cumsum(p, axis=1)
    idx = (cdf < (u * cdf[:, -1])[:, None]).sum(axis=1)
    # guard against landing on a zero-probability tail slot
    last_valid = p.shape[1] - 1 - np.argmax((p > 0)[:, ::-1], axis=1)
    return np.minimum(idx, last_valid)


def rollout_batch(g: KnowledgeGraph, params, queries: Sequence[Query], cfg: RewardConfig,
                  K: int, T: int, uniforms: np.ndarray, max_out: int = 200) -> list[Trajectory]:
    """Sample ``K`` trajectories per query; ``uniforms`` has shape ``(len(queries), K, T)``."""
    nq = len(queries)
    n = nq * K
    row_query = np.repeat(np.arange(nq), K)
    e_q = np.array([q.e_q for q in queries], dtype=np.int64)[row_query]
    r_q = np.array([q.r_q for q in queries], dtype=np.int64)[row_query]
    u = np.asarray(uniforms, dtype=np.float64).reshape(n, T)
    batcher = ActionBatcher(g, queries, row_query, max_out)
    v = g.vocab
    _, hidden = pol.dims(params)
    state = pol.PolicyState.zeros(n, hidden)
    prev_r = np.full(n, v.start, dtype=np.int64)
    cur = e_q.copy()
    rels_out = np.zeros((n, T), dtype=np.int64)
    ents_out = np.zeros((n, T), dtype=np.int64)
    lp_out = np.zeros((n, T))
    for t in range(T):
        state = pol.step_history(params, state, prev_r, cur)
        a_rels, a_ents, valid = batcher(cur)
        logp = pol.action_logits(params, state, cur, r_q, a_rels, a_ents, valid).value
        idx = _sample_rows(np.where(valid, logp, -np.inf), u[:, t])
        rows = np.arange(n)
        rels_out[:, t] = a_rels[rows, idx]
        ents_out[:, t] = a_ents[rows, idx]
        lp_out[:, t] = logp[rows, idx]
        prev_r = rels_out[:, t]
        cur = ents_out[:, t]
    out = []
    for i in range(n):
        q = queries[row_query[i]]
        out.append(Trajectory(q, rels_out[i].tolist(), ents_out[i].tolist(), lp_out[i].tolist(),
                              reward(int(ents_out[i, -1]), q.gold, cfg, v.sink)))
    return out


def rollout(g: KnowledgeGraph, params, q: Query, cfg: RewardConfig, K: int,
            rng: np.random.Generator, T: int = 3, max_out: int = 200) -> list[Trajectory]:
    return rollout_batch(g, params, [q], cfg, K, T, rng.random((1, K, T)), max_out)


# --------------------------------------------------------- teacher forcing

def score_paths(g: KnowledgeGraph, params, queries: Sequence[Query], rels: np.ndarray,
                ents: np.ndarray, max_out: int = 200):
    """Replay fixed action sequences; return per-step ``(log_probs, chosen index, valid)``.

    Row ``i`` replays ``rels[i], ents[i]`` for ``queries[i]``. Must run inside a
    :class:`~kgqa.diffcore.Tape` for gradients to flow.
    """
    rels = np.asarray(rels, dtype=np.int64)
    ents = np.asarray(ents, dtype=np.int64)
    n, T = rels.shape
    v = g.vocab
    batcher = ActionBatcher(g, queries, np.arange(n), max_out)
    _, hidden = pol.dims(params)
    state = pol.PolicyState.zeros(n, hidden)
    e_q = np.array([q.e_q for q in queries], dtype=np.int64)
    r_q = np.array([q.r_q for q in queries], dtype=np.int64)
    prev_r = np.full(n, v.start, dtype=np.int64)
    cur = e_q
    steps = []
    for t in range(T):
        state = pol.step_history(params, state, prev_r, cur)
        a_rels, a_ents, valid = batcher(cur)
        match = (a_rels == rels[:, t:t + 1]) & (a_ents == ents[:, t:t + 1]) & valid
        if not match.any(axis=1).all():
            bad = int(np.nonzero(~match.any(axis=1))[0][0])
            raise TargetNotExecutable(
                f"step {t}: action ({rels[bad, t]}, {ents[bad, t]}) is not available at entity {cur[bad]}")
        idx = np.argmax(match, axis=1)
        logp = pol.action_logits(params, state, cur, r_q, a_rels, a_ents, valid)
        steps.append((logp, idx, valid))
        prev_r, cur = rels[:, t], ents[:, t]
    return steps


def _selected(steps, weights: np.ndarray) -> dc.Tensor:
    """Sum over steps of ``weights[i] * log_prob[i, chosen_i]``."""
    acc = None
    for logp, idx, _ in steps:
        sel = np.zeros(logp.shape)
        sel[np.arange(len(idx)), idx] = weights
        term = dc.total(dc.mul(dc.constant(sel), logp))
        acc = term if acc is None else dc.add(acc, term)
    return acc


def _neg_entropy(steps, coef: float) -> dc.Tensor:
    """``coef * sum p log p`` over all rows and steps (i.e. minus the entropy)."""
    acc = None
    for logp, _, _ in steps:
        term = dc.total(dc.mul(dc.exp(logp), logp))
        acc = term if acc is None else dc.add(acc, term)
    return dc.scale(acc, coef)


def _grads_by_name(params) -> dict[str, np.ndarray]:
    return {name: p.grad for name, p in params.items() if p.grad is not None}


def reinforce_loss(g: KnowledgeGraph, params, trajectories: Sequence[Trajectory], baseline,
                   entropy_weight: float, max_out: int = 200, scale=1.0) -> dc.Tensor:
    """Surrogate loss whose gradient is minus the REINFORCE estimate (plus entropy bonus).

    The advantage of trajectory ``i`` is ``(reward_i - baseline_i) * scale_i``.
    """
    n = len(trajectories)
    rewards = np.array([tr.reward for tr in trajectories])
    steps = score_paths(g, params, [tr.query for tr in trajectories],
                        np.array([tr.rels for tr in trajectories]),
                        np.array([tr.ents for tr in trajectories]), max_out)
    adv = (rewards - np.asarray(baseline, dtype=float)) * np.asarray(scale, dtype=float)
    loss = _selected(steps, -adv / n)
    if entropy_weight:
        loss = dc.add(loss, _neg_entropy(steps, entropy_weight / n))
    return loss


def query_groups(trajectories: Sequence[Trajectory]) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for i, tr in enumerate(trajectories):
        groups.setdefault(id(tr.query), []).append(i)
    return groups


def query_mean_baseline(trajectories: Sequence[Trajectory]) -> np.ndarray:
    """Per-trajectory baseline: mean reward of all rollouts that share its query."""
    rewards = np.array([tr.reward for tr in trajectories])
    out = np.zeros(len(rewards))
    for idx in query_groups(trajectories).values():
        out[idx] = rewards[idx].mean()
    return out


@dataclass
class BaselineTracker:
    """Exponential moving average of batch mean reward."""

    decay: float = 0.95
    value: float | None = None

    def update(self, batch_mean: float) -> float:
        if self.value is None:
            self.value = batch_mean
        else:
            self.value = self.decay * self.value + (1.0 - self.decay) * batch_mean
        return self.value


def reinforce_update(g: KnowledgeGraph, params, trajectories: Sequence[Trajectory], baseline,
                     entropy_weight: float, optimizer: dc.Adam, max_out: int = 200, scale=1.0) -> dict:
    """One Adam step on the REINFORCE surrogate; updates ``params`` in place.

    ``baseline`` and ``scale`` are scalars or one value per trajectory.
    """
    if not trajectories:
        raise ValueError("reinforce_update needs at least one trajectory")
    dc.zero_grads(params.values())
    with dc.Tape() as tape:
        loss = reinforce_loss(g, params, trajectories, baseline, entropy_weight, max_out, scale)
    tape.backward(loss)
    optimizer.step(params, _grads_by_name(params))
    rewards = np.array([tr.reward for tr in trajectories])
    return {"loss": float(loss.value.item()), "mean_reward": float(rewards.mean()),
            "baseline": float(np.mean(baseline))}


def supervised_loss(g: KnowledgeGraph, params, examples: Sequence[DfsExample], max_out: int = 200) -> dc.Tensor:
    """Mean over examples of the summed per-step negative log-likelihood."""
    n = len(examples)
    steps = score_paths(g, params, [ex.query for ex in examples],
                        np.array([ex.rels for ex in examples]),
                        np.array([ex.ents for ex in examples]), max_out)
    return _selected(steps, np.full(n, -1.0 / n))


def supervised_update(g: KnowledgeGraph, params, examples: Sequence[DfsExample], optimizer: dc.Adam,
                      max_out: int = 200) -> dict:
    if not examples:
        raise ValueError("supervised_update needs a non-empty batch")
    dc.zero_grads(params.values())
    with dc.Tape() as tape:
        loss = supervised_loss(g, params, examples, max_out)
    tape.backward(loss)
    optimizer.step(params, _grads_by_name(params))
    return {"loss": float(loss.value.item())}


# ---------------------------------------------------------------- DFS mining

def mine_dfs(g: KnowledgeGraph, q: Query, T: int = 3, max_paths: int | None = 100,
             rng: np.random.Generator | None = None, max_out: int = 200) -> list[DfsExample]:
    """Depth-first enumeration of simple paths (length 1..T) from ``e_q`` into the gold set.

    Child order is shuffled by ``rng`` (sorted order when ``rng`` is None) and
    the search stops after ``max_paths`` hits. Paths are padded to length ``T``
    with NO_OP. With no hit, the result is the single no-answer target, or an
    empty list when the graph has no NO_ANSWER edges.
    """
    v = g.vocab
    mask = mask_for(q, v)
    limit = float("inf") if max_paths is None else max_paths
    found: list[DfsExample] = []
    path_r: list[int] = []
    path_e: list[int] = []
    on_path = {q.e_q}

    def visit(e: int) -> bool:
        children = [a for a in actions(g, e, mask, max_out) if not g.is_synthetic(a[0])]
        if rng is not None and len(children) > 1:
            children = [children[i] for i in rng.permutation(len(children))]
        for r, t in children:
            if t in on_path:
                continue
            path_r.append(r)
            path_e.append(t)
            on_path.add(t)
            if t in q.gold:
                pad = T - len(path_r)
                found.append(DfsExample(q, tuple(path_r) + (v.no_op,) * pad, tuple(path_e) + (t,) * pad))
                if len(found) >= limit:
                    return True
            if len(path_r) < T and visit(t):
                return True
            path_r.pop()
            path_e.pop()
            on_path.discard(t)
        return False

    if T >= 1:
        visit(q.e_q)
    if found:
        return found
    if g.noanswer_added and g.has_edge(q.e_q, v.no_answer, v.sink):
        return [DfsExample(q, (v.no_answer,) + (v.no_op,) * (T - 1), (v.sink,) * T, no_answer=True)]
    return []


def save_dfs_examples(examples: Sequence[DfsExample], g: KnowledgeGraph, path: str | Path) -> None:
    v = g.vocab
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            hops = "|".join(f"{v.relation_name(r)},{v.entity_name(e)}" for r, e in zip(ex.rels, ex.ents))
            fh.write(f"{v.entity_name(ex.query.e_q)}\t{v.relation_name(ex.query.r_q)}\t{hops}\n")
