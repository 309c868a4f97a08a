"""Minimal dense-array reverse-mode differentiation core.

Values are float64 numpy arrays of rank 0, 1 or 2.  Graphs are built eagerly:
each operation returns a :class:`Variable` holding its value, references to
its parents and a closure that maps the output gradient to parent gradients.
``backward`` walks the graph once in reverse topological order.  There is no
broadcasting; every shape is explicit and mismatches raise
:class:`DimensionError` naming both operands.

Design constraints baked in here rather than configurable:

* relu derivative at exactly 0 is 0;
* the KL divergence clamps its second argument at ``KL_EPS`` and treats
  ``0 * log 0`` as 0;
* ``l2_distance`` has gradient 0 at coincident points (subgradient choice);
* disconnected parameters receive exact zero gradients.
"""
from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import (
    ContractError,
    DimensionError,
    DomainError,
    ConfigurationError,
    EvaluationError,
    IndexLookupError,
)

KL_EPS = 1e-10

_GRAD_ENABLED = True


class no_grad:
    """Context manager disabling graph recording for cheap inference passes."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Variable:
    """A node in the computation graph: a value plus how to backpropagate."""

    __slots__ = ("value", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, value, requires_grad=False, parents=(), grad_fn=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents = parents
        self._grad_fn = grad_fn

    def __repr__(self):
        return f"Variable(shape={self.value.shape}, requires_grad={self.requires_grad})"


def constant(value) -> Variable:
    return Variable(value, requires_grad=False)


def parameter(value) -> Variable:
    return Variable(value, requires_grad=True)


def _result(value, parents, grad_fn) -> Variable:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Variable(value, requires_grad=True, parents=parents, grad_fn=grad_fn)
    return Variable(value)


def _same_shape(a: Variable, b: Variable, op: str):
    if a.value.shape != b.value.shape:
        raise DimensionError(f"{op}: shapes {a.value.shape} and {b.value.shape} differ")


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Variable, b: Variable) -> Variable:
    _same_shape(a, b, "add")
    return _result(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Variable, b: Variable) -> Variable:
    _same_shape(a, b, "sub")
    return _result(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Variable, b: Variable) -> Variable:
    _same_shape(a, b, "mul")
    av, bv = a.value, b.value
    return _result(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Variable, c: float) -> Variable:
    c = float(c)
    return _result(a.value * c, (a,), lambda g: (g * c,))


def shift(a: Variable, c: float) -> Variable:
    return _result(a.value + float(c), (a,), lambda g: (g,))


def div(a: Variable, s: Variable) -> Variable:
    """Elementwise a / s where s is a 0-d scalar variable."""
    if s.value.shape != ():
        raise DimensionError(f"div: denominator must be scalar, got shape {s.value.shape}")
    sv = float(s.value)
    if sv == 0.0:
        raise DomainError("div: zero denominator")
    av = a.value

    def grad(g):
        return g / sv, np.asarray(-np.sum(g * av) / (sv * sv))

    return _result(av / sv, (a, s), grad)


def add_n(terms: Iterable[Variable]) -> Variable:
    """Sum of same-shape variables; gradient passes through to every term."""
    terms = tuple(terms)
    if not terms:
        raise ContractError("add_n: empty term list")
    shape = terms[0].value.shape
    for t in terms[1:]:
        if t.value.shape != shape:
            raise DimensionError(f"add_n: shapes {shape} and {t.value.shape} differ")
    total = terms[0].value.copy()
    for t in terms[1:]:
        total += t.value
    return _result(total, terms, lambda g: (g,) * len(terms))


def vsum(a: Variable) -> Variable:
    shape = a.value.shape
    return _result(np.asarray(np.sum(a.value)), (a,), lambda g: (np.full(shape, float(g)),))


def vmean(a: Variable) -> Variable:
    n = a.value.size
    if n == 0:
        raise DomainError("vmean: empty input")
    shape = a.value.shape
    return _result(np.asarray(a.value.mean()), (a,), lambda g: (np.full(shape, float(g) / n),))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Variable, b: Variable) -> Variable:
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")
    return _result(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def matvec(w: Variable, x: Variable) -> Variable:
    wv, xv = w.value, x.value
    if wv.ndim != 2 or xv.ndim != 1 or wv.shape[1] != xv.shape[0]:
        raise DimensionError(f"matvec: incompatible shapes {wv.shape} and {xv.shape}")
    return _result(wv @ xv, (w, x), lambda g: (np.outer(g, xv), wv.T @ g))


def vecmat(x: Variable, m: Variable) -> Variable:
    """Row vector times matrix: (r,) @ (r, d) -> (d,)."""
    xv, mv = x.value, m.value
    if xv.ndim != 1 or mv.ndim != 2 or xv.shape[0] != mv.shape[0]:
        raise DimensionError(f"vecmat: incompatible shapes {xv.shape} and {mv.shape}")
    return _result(xv @ mv, (x, m), lambda g: (mv @ g, np.outer(xv, g)))


def concat(a: Variable, b: Variable) -> Variable:
    av, bv = a.value, b.value
    if av.ndim != 1 or bv.ndim != 1:
        raise DimensionError(f"concat: expected vectors, got ranks {av.ndim} and {bv.ndim}")
    n = av.shape[0]
    return _result(np.concatenate([av, bv]), (a, b), lambda g: (g[:n], g[n:]))


def stack_rows(rows: Iterable[Variable]) -> Variable:
    """Stack 1-d variables into a matrix; gradient splits back by row."""
    rows = tuple(rows)
    if not rows:
        raise ContractError("stack_rows: empty row list")
    width = rows[0].value.shape
    for r in rows:
        if r.value.ndim != 1 or r.value.shape != width:
            raise DimensionError(f"stack_rows: row shapes {width} and {r.value.shape} differ")
    value = np.stack([r.value for r in rows])
    return _result(value, rows, lambda g: tuple(g[i] for i in range(len(rows))))


def pack(scalars: Iterable[Variable]) -> Variable:
    """Pack 0-d variables into a vector."""
    scalars = tuple(scalars)
    if not scalars:
        raise ContractError("pack: empty scalar list")
    for s in scalars:
        if s.value.shape != ():
            raise DimensionError(f"pack: expected scalars, got shape {s.value.shape}")
    value = np.array([float(s.value) for s in scalars])
    return _result(value, scalars, lambda g: tuple(np.asarray(g[i]) for i in range(len(scalars))))


def slice_head(a: Variable, n: int) -> Variable:
    """First n entries of a vector; gradient zero-pads the tail."""
    av = a.value
    if av.ndim != 1:
        raise DimensionError(f"slice_head: expected vector, got rank {av.ndim}")
    if not 0 < n <= av.shape[0]:
        raise DimensionError(f"slice_head: n={n} outside vector of length {av.shape[0]}")
    size = av.shape[0]

    def grad(g):
        out = np.zeros(size)
        out[:n] = g
        return (out,)

    return _result(av[:n].copy(), (a,), grad)


def take_row(m: Variable, i: int) -> Variable:
    mv = m.value
    if mv.ndim != 2:
        raise DimensionError(f"take_row: expected matrix, got rank {mv.ndim}")
    if not 0 <= i < mv.shape[0]:
        raise IndexLookupError(f"take_row: row {i} outside matrix with {mv.shape[0]} rows")
    shape = mv.shape

    def grad(g):
        out = np.zeros(shape)
        out[i] = g
        return (out,)

    return _result(mv[i].copy(), (m,), grad)


def lookup_embedding(table: Variable, index: int) -> Variable:
    """Row selection from an embedding table with sparse gradient accumulation."""
    tv = table.value
    if tv.ndim != 2:
        raise DimensionError(f"lookup_embedding: table must be rank 2, got {tv.ndim}")
    index = int(index)
    if not 0 <= index < tv.shape[0]:
        raise IndexLookupError(
            f"lookup_embedding: id {index} outside table with {tv.shape[0]} rows"
        )
    shape = tv.shape

    def grad(g):
        out = np.zeros(shape)
        out[index] = g
        return (out,)

    return _result(tv[index].copy(), (table,), grad)


# ---------------------------------------------------------------------------
# nonlinearities


def apply_activation(a: Variable, kind: str) -> Variable:
    av = a.value
    if kind == "relu":
        value = np.maximum(av, 0.0)
        mask = av > 0.0
        return _result(value, (a,), lambda g: (g * mask,))
    if kind == "sigmoid":
        value = 1.0 / (1.0 + np.exp(-av))
        return _result(value, (a,), lambda g: (g * value * (1.0 - value),))
    if kind == "tanh":
        value = np.tanh(av)
        return _result(value, (a,), lambda g: (g * (1.0 - value * value),))
    raise ConfigurationError(f"apply_activation: unknown activation {kind!r}")


def softmax(a: Variable) -> Variable:
    """Stable softmax over the last axis of a vector or matrix."""
    av = a.value
    if av.ndim not in (1, 2):
        raise DimensionError(f"softmax: expected rank 1 or 2, got {av.ndim}")
    if av.shape[-1] == 0:
        raise DomainError("softmax: empty input")
    if not np.all(np.isfinite(av)):
        raise DomainError("softmax: non-finite input")
    shifted = av - av.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=-1, keepdims=True)

    def grad(g):
        dot = np.sum(g * value, axis=-1, keepdims=True)
        return ((g - dot) * value,)

    return _result(value, (a,), grad)


# ---------------------------------------------------------------------------
# distances and divergences


def l2_distance(a: Variable, b: Variable) -> Variable:
    _same_shape(a, b, "l2_distance")
    diff = a.value - b.value
    d = float(np.sqrt(np.sum(diff * diff)))

    def grad(g):
        if d == 0.0:
            z = np.zeros_like(diff)
            return z, z.copy()
        da = (float(g) / d) * diff
        return da, -da

    return _result(np.asarray(d), (a, b), grad)


def kl_divergence(p: Variable, q: Variable, eps: float = KL_EPS) -> Variable:
    """KL(p || q) for distribution vectors; q is clamped at eps, 0*log 0 = 0."""
    _same_shape(p, q, "kl_divergence")
    pv, qv = p.value, q.value
    if pv.ndim != 1:
        raise DimensionError(f"kl_divergence: expected vectors, got rank {pv.ndim}")
    if np.any(pv < 0.0) or np.any(qv < 0.0):
        raise DomainError("kl_divergence: negative entries")
    qc = np.maximum(qv, eps)
    active = pv > 0.0
    ratio = np.ones_like(pv)
    ratio[active] = pv[active] / qc[active]
    log_ratio = np.log(ratio)
    value = float(np.sum(pv[active] * log_ratio[active]))

    def grad(g):
        gp = np.where(active, log_ratio + 1.0, 0.0) * float(g)
        gq = np.where(qv > eps, -pv / qc, 0.0) * float(g)
        return gp, gq

    return _result(np.asarray(value), (p, q), grad)


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Variable) -> list[Variable]:
    """Reachable requires-grad subgraph, parents before children."""
    order: list[Variable] = []
    seen: set[int] = set()
    stack: list[tuple[Variable, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            stack.append((parent, False))
    return order


def grad_table(loss: Variable) -> dict[int, np.ndarray]:
    """Gradients of a scalar loss keyed by ``id`` of each reachable variable.

    Every reachable node is visited exactly once; leaves that do not require
    gradients are skipped entirely.
    """
    if loss.value.shape != ():
        raise ContractError(f"grad_table: loss must be scalar, got shape {loss.value.shape}")
    if not np.isfinite(loss.value):
        raise ContractError("grad_table: loss is not finite")
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(1.0)}
    if not loss.requires_grad:
        return grads
    for node in reversed(_topo_order(loss)):
        g = grads.get(id(node))
        if g is None or node._grad_fn is None:
            continue
        parent_grads = node._grad_fn(g)
        for parent, pg in zip(node._parents, parent_grads):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            held = grads.get(key)
            if held is None:
                grads[key] = np.asarray(pg, dtype=np.float64).copy()
            else:
                held += pg
    return grads


def backward(loss: Variable, params: Mapping[str, Variable]) -> dict[str, np.ndarray]:
    """Gradient of a scalar loss for every named parameter.

    Parameters not reached by the graph map to exact zero arrays of the
    parameter's shape.
    """
    table = grad_table(loss)
    out: dict[str, np.ndarray] = {}
    for name, var in params.items():
        g = table.get(id(var))
        out[name] = np.zeros_like(var.value) if g is None else np.asarray(g)
    return out


def check_gradients(
    f: Callable[[Mapping[str, Variable]], Variable],
    params: Mapping[str, Variable],
    h: float = 1e-5,
) -> float:
    """Compare backward() against central finite differences.

    Returns the worst relative error ``|a - n| / max(|a|, |n|, 1e-8)`` over
    every coordinate of every parameter that requires gradients.  The scalar
    function is re-evaluated with perturbed parameter buffers; evaluations
    must stay finite.
    """
    out = f(params)
    if out.value.shape != () or not np.isfinite(out.value):
        raise EvaluationError("check_gradients: f must return a finite scalar")
    analytic = backward(out, params)
    worst = 0.0
    with no_grad():
        for name, var in params.items():
            if not var.requires_grad:
                continue
            flat = var.value.reshape(-1)
            grad_flat = analytic[name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f(params).value)
                flat[i] = orig - h
                fm = float(f(params).value)
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise EvaluationError(
                        f"check_gradients: non-finite evaluation near {name}[{i}]"
                    )
                numeric = (fp - fm) / (2.0 * h)
                a = float(grad_flat[i])
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                if err > worst:
                    worst = err
    return worst
