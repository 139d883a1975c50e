"""A small dense reverse-mode autodiff engine over 2-D float64 arrays, plus Adam.

Operations only record themselves while a :class:`Tape` is active::

    with Tape() as tape:
        loss = total(mul(w, x))
    grads = tape.backward(loss)

Outside a tape the same functions just compute values, which is what the
rollout and beam-search code paths rely on.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
MASK_FILL = -1e30
CHECKPOINT_FORMAT = "kgqa-checkpoint"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple = ()
        self.backward_fn: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


def constant(value) -> Tensor:
    return Tensor(value)


def parameter(value, name: str | None = None) -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


class Tape:
    """Records primitive applications in execution order (already topological)."""

    _active: list["Tape"] = []

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        Tape._active.append(self)
        return self

    def __exit__(self, *exc):
        Tape._active.pop()
        return False

    @classmethod
    def current(cls) -> "Tape | None":
        return cls._active[-1] if cls._active else None

    def backward(self, loss: Tensor) -> dict[int, Tensor]:
        return backward(self, loss)


def _result(value: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(value)
    tape = Tape.current()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        tape.nodes.append(out)
    return out


def _send(t: Tensor, g: np.ndarray, grads: dict) -> None:
    if not t.requires_grad:
        return
    k = id(t)
    if k in grads:
        grads[k] = grads[k] + g
    else:
        grads[k] = g


def backward(tape: Tape, loss: Tensor) -> dict[int, Tensor]:
    """Accumulate d(loss)/d(leaf) into each leaf's ``.grad``.

    Returns ``{id(leaf): leaf}`` for every leaf parameter reached. A loss that
    does not depend on any parameter yields an empty dict.
    """
    if loss.value.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.backward_fn is None:
                leaves[id(parent)] = parent
            _send(parent, pg, grads)
    for k, leaf in leaves.items():
        g = grads.get(k)
        if g is None:
            continue
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return leaves


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- primitives

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    return _result(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _result(a.value + b.value, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    av, bv = a.value, b.value
    return _result(av * bv, (a, b), lambda g: (g * bv, g * av))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    vals = [t.value for t in tensors]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError:
        raise ShapeError("concat: incompatible shapes " + ", ".join(str(v.shape) for v in vals)) from None
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tuple(tensors), back)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Rows ``table[ids]``; the gradient scatter-adds back into a dense table."""
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    if table.value.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding_lookup: id out of range for table of {table.shape[0]} rows")
    n_rows = table.shape[0]

    def back(g):
        # one flat bincount is much faster than np.add.at for scatter-add
        width = g.shape[1]
        flat = (ids[:, None] * width + np.arange(width)).reshape(-1)
        full = np.bincount(flat, weights=g.reshape(-1), minlength=n_rows * width)
        return (full.reshape(n_rows, width),)

    return _result(table.value[ids], (table,), back)


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.value)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def log_softmax(x: Tensor, mask=None) -> Tensor:
    """Row-wise log-softmax; positions where ``mask`` is False are excluded.

    ``mask`` may be a boolean array shaped like ``x`` or a vector of valid
    lengths (one per row). Excluded positions come out as ``-1e30``.
    """
    v = x.value
    if v.ndim == 1:
        v2 = v[None, :]
    else:
        v2 = v
    valid = _as_mask(mask, v2.shape)
    if not valid.any(axis=1).all():
        raise ValueError("log_softmax: a row has no valid entries")
    z = np.where(valid, v2, MASK_FILL)
    z = z - z.max(axis=1, keepdims=True)
    e = np.where(valid, np.exp(z), 0.0)
    lse = np.log(e.sum(axis=1, keepdims=True))
    out = np.where(valid, z - lse, MASK_FILL)
    p = np.where(valid, np.exp(out), 0.0)

    def back(g):
        g2 = np.where(valid, g.reshape(v2.shape), 0.0)
        dx = g2 - p * g2.sum(axis=1, keepdims=True)
        return (dx.reshape(v.shape),)

    return _result(out.reshape(v.shape), (x,), back)


def _as_mask(mask, shape) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    m = np.asarray(mask)
    if m.dtype == bool:
        if m.size != shape[0] * shape[1]:
            raise ShapeError(f"log_softmax: mask shape {m.shape} does not match {shape}")
        return m.reshape(shape)
    lengths = m.reshape(-1)
    if lengths.shape[0] != shape[0] or (lengths > shape[1]).any():
        raise ShapeError(f"log_softmax: valid lengths {lengths.tolist()} do not fit {shape}")
    return np.arange(shape[1])[None, :] < lengths[:, None]


def rowdot(a: Tensor, b: Tensor) -> Tensor:
    """Scores ``out[i, j] = a[i * W + j] . b[i]`` for ``a`` of shape ``(n * W, k)``, ``b`` of ``(n, k)``.

    Equivalent to gathering ``b`` once per action row, multiplying and summing,
    without materialising the gathered copy.
    """
    n, k = b.shape
    if a.value.ndim != 2 or a.shape[1] != k or a.shape[0] % max(n, 1):
        raise ShapeError(f"rowdot: incompatible shapes {a.shape} and {b.shape}")
    width = a.shape[0] // n if n else 0
    av = a.value.reshape(n, width, k)
    bv = b.value

    def back(g):
        return ((g[:, :, None] * bv[:, None, :]).reshape(n * width, k),
                np.einsum("nw,nwk->nk", g, av))

    return _result(np.einsum("nwk,nk->nw", av, bv), (a, b), back)


# structural helpers the policy needs on top of the arithmetic primitives

def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    return _result(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.value)
    return _result(out, (a,), lambda g: (g * out,))


def total(a: Tensor) -> Tensor:
    """Sum of all entries as a (1, 1) tensor."""
    shape = a.shape
    return _result(a.value.sum().reshape(1, 1), (a,), lambda g: (np.full(shape, g.item(), dtype=DTYPE),))


def scale(a: Tensor, c: float) -> Tensor:
    return mul(a, constant(np.full(a.shape, c, dtype=DTYPE)))


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` for a (1, m) bias row, expressed as ``ones(n, 1) @ b`` to avoid broadcasting."""
    return add(x, matmul(constant(np.ones((x.shape[0], 1))), b))


# -------------------------------------------------------------------- Adam

class Adam:
    """Adam with bias correction; state is keyed by parameter name."""

    def __init__(self, lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
        adam_step(params, grads, self)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: Adam) -> None:
    """One in-place Adam update of every parameter that has a gradient."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name in sorted(params):
        g = grads.get(name)
        if g is None:
            continue
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient {g.shape} does not match parameter {name} {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.value -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# -------------------------------------------------------------- checkpoints

def save_checkpoint(path: str | Path, params: dict[str, Tensor], meta: dict | None = None) -> None:
    """Write named tensors as JSON (see README for the schema)."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "params": {
            name: {"shape": list(params[name].shape), "values": params[name].value.reshape(-1).tolist()}
            for name in sorted(params)
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], dict]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    params = {}
    for name, entry in doc["params"].items():
        arr = np.asarray(entry["values"], dtype=DTYPE).reshape(entry["shape"])
        params[name] = parameter(arr, name=name)
    return params, doc.get("meta", {})


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
