"""Policy network: history LSTM over taken actions and a dot-product action scorer.

Every function works on a batch of ``n`` rows (episodes or beam entries).
Parameter names are stable because they double as checkpoint keys:

    entity_emb, relation_emb                    embedding tables
    lstm.W_i, lstm.W_f, lstm.W_g, lstm.W_o      (2d + H, H), input is [r; e; h]
    lstm.b_i, lstm.b_f, lstm.b_g, lstm.b_o      (1, H)
    ffnn.W0, ffnn.b0, ...                       first layer (H + 2d, 2d), later ones (2d, 2d)
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

GATES = ("i", "f", "g", "o")


@dataclass(frozen=True)
class PolicyConfig:
    n_entities: int
    n_relations: int
    d: int = 16
    hidden: int = 32
    ffnn_layers: int = 1


@dataclass
class PolicyState:
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, n: int, hidden: int) -> "PolicyState":
        return cls(dc.constant(np.zeros((n, hidden))), dc.constant(np.zeros((n, hidden))))

    def take(self, rows) -> "PolicyState":
        """Row subset without gradient tracking (beam search bookkeeping)."""
        return PolicyState(dc.constant(self.h.value[rows]), dc.constant(self.c.value[rows]))


def _glorot(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    s = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-s, s, size=shape)


def init_params(n_entities: int, n_relations: int, d: int = 16, hidden: int = 32,
                seed: int = 0, ffnn_layers: int = 1) -> dict[str, Tensor]:
    """Glorot-uniform weights, zero biases except the LSTM forget gate (1.0)."""
    rng = np.random.default_rng(seed)
    p = {
        "entity_emb": _glorot(rng, (n_entities, d)),
        "relation_emb": _glorot(rng, (n_relations, d)),
    }
    for gate in GATES:
        p[f"lstm.W_{gate}"] = _glorot(rng, (2 * d + hidden, hidden))
        p[f"lstm.b_{gate}"] = np.full((1, hidden), 1.0 if gate == "f" else 0.0)
    fan_in = hidden + 2 * d
    for k in range(ffnn_layers):
        p[f"ffnn.W{k}"] = _glorot(rng, (fan_in, 2 * d))
        p[f"ffnn.b{k}"] = np.zeros((1, 2 * d))
        fan_in = 2 * d
    return {name: dc.parameter(v, name=name) for name, v in p.items()}


def dims(params: dict[str, Tensor]) -> tuple[int, int]:
    """``(d, hidden)`` read back from parameter shapes."""
    return params["entity_emb"].shape[1], params["lstm.b_f"].shape[1]


def step_history(params: dict[str, Tensor], state: PolicyState, prev_rel, prev_ent) -> PolicyState:
    """One LSTM cell update on input ``[r_prev; e_prev]``."""
    x = dc.concat([
        dc.embedding_lookup(params["relation_emb"], prev_rel),
        dc.embedding_lookup(params["entity_emb"], prev_ent),
        state.h,
    ])
    pre = {g: dc.bias_add(dc.matmul(x, params[f"lstm.W_{g}"]), params[f"lstm.b_{g}"]) for g in GATES}
    i = dc.sigmoid(pre["i"])
    f = dc.sigmoid(pre["f"])
    cand = dc.tanh(pre["g"])
    o = dc.sigmoid(pre["o"])
    c = dc.add(dc.mul(f, state.c), dc.mul(i, cand))
    h = dc.mul(o, dc.tanh(c))
    return PolicyState(h, c)


def query_vector(params: dict[str, Tensor], state: PolicyState, cur_ent, r_q) -> Tensor:
    """Feed-forward map of ``[h; e_t; r_q]`` into the 2d action space."""
    x = dc.concat([
        state.h,
        dc.embedding_lookup(params["entity_emb"], cur_ent),
        dc.embedding_lookup(params["relation_emb"], r_q),
    ])
    k = 0
    while f"ffnn.W{k}" in params:
        x = dc.tanh(dc.bias_add(dc.matmul(x, params[f"ffnn.W{k}"]), params[f"ffnn.b{k}"]))
        k += 1
    return x


def action_logits(params: dict[str, Tensor], state: PolicyState, cur_ent, r_q,
                  act_rels: np.ndarray, act_ents: np.ndarray, valid) -> Tensor:
    """Log-probabilities over padded action rows, shape ``(n, W)``.

    ``valid`` is a boolean ``(n, W)`` mask or a vector of per-row valid counts.
    Each score is the dot product of ``[r; e]`` with the feed-forward output.
    """
    act_rels = np.asarray(act_rels).reshape(len(act_rels), -1)
    act_ents = np.asarray(act_ents).reshape(act_rels.shape)
    n, width = act_rels.shape
    counts = valid.sum(axis=1) if np.asarray(valid).dtype == bool else np.asarray(valid)
    if (np.asarray(counts) < 1).any():
        raise ValueError("action_logits: every row needs at least one valid action")
    out = query_vector(params, state, cur_ent, r_q)
    acts = dc.concat([
        dc.embedding_lookup(params["relation_emb"], act_rels.reshape(-1)),
        dc.embedding_lookup(params["entity_emb"], act_ents.reshape(-1)),
    ])
    return dc.log_softmax(dc.rowdot(acts, out), valid)
