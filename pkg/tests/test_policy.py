import numpy as np
import pytest

from kgqa import diffcore as dc
from kgqa import policy as pol

from conftest import numeric_grad, rel_err

N_ENT, N_REL = 7, 6


def sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def dense_lstm(p, h, c, r_vec, e_vec):
    """Textbook LSTM cell written directly against the parameter arrays."""
    x = np.concatenate([r_vec, e_vec, h])
    i = sig(x @ p["lstm.W_i"] + p["lstm.b_i"][0])
    f = sig(x @ p["lstm.W_f"] + p["lstm.b_f"][0])
    g = np.tanh(x @ p["lstm.W_g"] + p["lstm.b_g"][0])
    o = sig(x @ p["lstm.W_o"] + p["lstm.b_o"][0])
    c2 = f * c + i * g
    return o * np.tanh(c2), c2


def dense_logp(p, h, e_t, r_q, rels, ents):
    x = np.concatenate([h, p["entity_emb"][e_t], p["relation_emb"][r_q]])
    k = 0
    while f"ffnn.W{k}" in p:
        x = np.tanh(x @ p[f"ffnn.W{k}"] + p[f"ffnn.b{k}"][0])
        k += 1
    acts = np.concatenate([p["relation_emb"][rels], p["entity_emb"][ents]], axis=1)
    s = acts @ x
    s = s - s.max()
    return s - np.log(np.exp(s).sum())


def values(params):
    return {k: t.value for k, t in params.items()}


def test_init_deterministic_and_shaped():
    a = pol.init_params(N_ENT, N_REL, d=4, hidden=8, seed=5)
    b = pol.init_params(N_ENT, N_REL, d=4, hidden=8, seed=5)
    assert all(np.array_equal(a[k].value, b[k].value) for k in a)
    assert a["ffnn.W0"].shape == (8 + 4 + 4, 8)
    assert a["lstm.W_f"].shape == (2 * 4 + 8, 8)
    assert np.all(a["lstm.b_f"].value == 1.0) and np.all(a["lstm.b_i"].value == 0.0)
    s = np.sqrt(6.0 / (N_ENT + 4))
    assert np.abs(a["entity_emb"].value).max() <= s
    assert pol.dims(a) == (4, 8)


def test_zero_weights_keep_zero_state():
    p = pol.init_params(N_ENT, N_REL, d=4, hidden=8)
    for t in p.values():
        t.value[...] = 0.0
    st = pol.PolicyState.zeros(2, 8)
    for _ in range(3):
        st = pol.step_history(p, st, np.array([1, 2]), np.array([3, 4]))
    assert not st.h.value.any() and not st.c.value.any()


def test_hand_set_lstm_cell():
    p = pol.init_params(3, 2, d=2, hidden=2, seed=0)
    rng = np.random.default_rng(11)
    for t in p.values():
        t.value[...] = rng.normal(size=t.shape)
    raw = values(p)
    h0, c0 = rng.normal(size=2), rng.normal(size=2)
    st = pol.PolicyState(dc.constant(h0[None]), dc.constant(c0[None]))
    out = pol.step_history(p, st, np.array([1]), np.array([2]))
    h1, c1 = dense_lstm(raw, h0, c0, raw["relation_emb"][1], raw["entity_emb"][2])
    np.testing.assert_allclose(out.h.value[0], h1, rtol=1e-12)
    np.testing.assert_allclose(out.c.value[0], c1, rtol=1e-12)


def test_scalar_lstm_hand_trace():
    # d=2, H=2 with every weight 0.1 and biases 0 except forget (1): compute by hand
    p = pol.init_params(3, 2, d=2, hidden=2)
    for k, t in p.items():
        t.value[...] = 0.1 if k.startswith("lstm.W") else 0.0
    p["lstm.b_f"].value[...] = 1.0
    p["relation_emb"].value[...] = 1.0
    p["entity_emb"].value[...] = 2.0
    st = pol.step_history(p, pol.PolicyState.zeros(1, 2), np.array([0]), np.array([0]))
    pre = 0.1 * (1 + 1 + 2 + 2)          # 0.6 into every gate
    c = sig(pre) * np.tanh(pre)           # forget term is zero on the first step
    h = sig(pre) * np.tanh(c)
    np.testing.assert_allclose(st.h.value, [[h, h]], rtol=1e-12)


def test_different_prev_actions_differ():
    for seed in range(5):
        p = pol.init_params(N_ENT, N_REL, d=4, hidden=8, seed=seed)
        st = pol.step_history(p, pol.PolicyState.zeros(2, 8), np.array([0, 1]), np.array([2, 2]))
        assert not np.allclose(st.h.value[0], st.h.value[1])


def logits(p, n_valid, rels, ents, seed=0, state=None):
    st = state or pol.PolicyState(dc.constant(np.random.default_rng(seed).normal(size=(1, 8))),
                                  dc.constant(np.zeros((1, 8))))
    return pol.action_logits(p, st, np.array([1]), np.array([2]), np.array([rels]), np.array([ents]),
                             np.array([n_valid]))


def test_identical_actions_split_evenly():
    p = pol.init_params(N_ENT, N_REL, d=4, hidden=8)
    out = logits(p, 2, [3, 3], [4, 4]).value[0]
    np.testing.assert_allclose(np.exp(out), [0.5, 0.5], rtol=1e-12)


def test_single_valid_action():
    p = pol.init_params(N_ENT, N_REL, d=4, hidden=8)
    out = logits(p, 1, [3, 5], [4, 0]).value[0]
    assert out[0] == 0.0 and np.exp(out[1]) < 1e-12


def test_zero_valid_rejected():
    p = pol.init_params(N_ENT, N_REL, d=4, hidden=8)
    with pytest.raises(ValueError):
        logits(p, 0, [3, 5], [4, 0])


def test_matches_dense_forward():
    p = pol.init_params(N_ENT, N_REL, d=4, hidden=8, seed=3)
    h = np.random.default_rng(0).normal(size=8)
    rels, ents = [0, 2, 4, 5, 1], [1, 3, 6, 0, 2]
    st = pol.PolicyState(dc.constant(h[None]), dc.constant(np.zeros((1, 8))))
    out = logits(p, 5, rels, ents, state=st).value[0]
    np.testing.assert_allclose(out, dense_logp(values(p), h, 1, 2, rels, ents), atol=1e-12)
    assert abs(np.exp(out).sum() - 1.0) < 1e-9


def test_permutation_equivariance():
    p = pol.init_params(N_ENT, N_REL, d=4, hidden=8, seed=1)
    rels, ents = np.array([0, 2, 4, 5, 1]), np.array([1, 3, 6, 0, 2])
    perm = np.array([3, 0, 4, 1, 2])
    a = logits(p, 5, rels, ents).value[0]
    b = logits(p, 5, rels[perm], ents[perm]).value[0]
    np.testing.assert_allclose(a[perm], b, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_sampled_logp_gradient(seed):
    p = pol.init_params(N_ENT, N_REL, d=4, hidden=8, seed=seed)
    rng = np.random.default_rng(seed)
    for t in p.values():
        t.value += 0.1 * rng.normal(size=t.shape)
    rels, ents = np.array([[0, 2, 4, 5], [1, 3, 0, 0]]), np.array([[1, 3, 6, 0], [2, 5, 0, 0]])
    valid = np.array([4, 2])
    pick = np.array([2, 1])

    def loss():
        st = pol.step_history(p, pol.PolicyState.zeros(2, 8), np.array([N_REL - 2, 1]), np.array([0, 4]))
        st = pol.step_history(p, st, np.array([3, 0]), np.array([1, 2]))
        lp = pol.action_logits(p, st, np.array([1, 2]), np.array([0, 2]), rels, ents, valid)
        sel = np.zeros(lp.shape)
        sel[np.arange(2), pick] = 1.0
        return dc.total(dc.mul(lp, dc.constant(sel)))

    dc.zero_grads(p.values())
    with dc.Tape() as tape:
        out = loss()
    tape.backward(out)
    for name, t in p.items():
        num = numeric_grad(lambda: float(loss().value.item()), t)
        assert rel_err(t.grad, num) < 1e-4, name
