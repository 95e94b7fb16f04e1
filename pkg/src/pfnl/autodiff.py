"""Tape-based reverse-mode differentiation over float64 numpy values.

Values are plain ``np.ndarray``: shape ``()`` scalars, ``(n,)`` vectors and
``(m, n)`` matrices. A :class:`Tape` records each primitive application in
topological order (operands always precede results); :func:`backward` walks
the record once in reverse and accumulates gradients for every parameter
leaf. The tape is rebuilt from scratch for each episode, define-by-run
style; nothing is cached across episodes.

Zero-norm cosine arguments are hard errors rather than epsilon-smoothed so
degenerate data surfaces immediately instead of silently propagating NaNs.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import DegenerateInputError, DimensionError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Node:
    __slots__ = ("op", "value", "parents", "vjp")

    def __init__(self, op, value, parents, vjp):
        self.op = op
        self.value = value
        self.parents = parents
        self.vjp = vjp


class Var:
    """Handle to one tape node."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.idx].value

    @property
    def shape(self):
        return self.tape.nodes[self.idx].value.shape

    def __add__(self, other: "Var") -> "Var":
        return add(self, other)

    def __sub__(self, other: "Var") -> "Var":
        return sub(self, other)

    def __mul__(self, other: "Var") -> "Var":
        return mul(self, other)

    def __neg__(self) -> "Var":
        return scale(self, -1.0)

    def __repr__(self):
        node = self.tape.nodes[self.idx]
        return f"Var(#{self.idx} {node.op} shape={node.value.shape})"


class Tape:
    """Append-only record of primitive applications.

    ``grad_enabled=False`` switches the tape into value-only mode: ops still
    compute forward values but record no closures, which is what finite
    difference probes and inference-only passes use.
    """

    def __init__(self, grad_enabled: bool = True):
        self.nodes: list[Node] = []
        self.grad_enabled = grad_enabled
        self.param_ids: list[int] = []
        self.param_names: dict[int, str] = {}

    def _push(self, op: str, value: np.ndarray, parents: tuple, vjp) -> Var:
        if not self.grad_enabled:
            parents, vjp = (), None
        self.nodes.append(Node(op, value, parents, vjp))
        return Var(self, len(self.nodes) - 1)

    def param(self, value: np.ndarray, name: str) -> Var:
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise DegenerateInputError(f"non-finite entries in parameter {name!r}")
        var = self._push("param", value, (), None)
        self.param_ids.append(var.idx)
        self.param_names[var.idx] = name
        return var

    def const(self, value) -> Var:
        return self._push("const", np.asarray(value, dtype=np.float64), (), None)


def _val(x: Var) -> np.ndarray:
    return x.tape.nodes[x.idx].value


def _same_shape(a: Var, b: Var, op: str):
    va, vb = _val(a), _val(b)
    if va.shape != vb.shape:
        raise DimensionError(f"{op}: shape {va.shape} vs {vb.shape}")


# ---------------------------------------------------------------------------
# elementwise / structural primitives


def add(a: Var, b: Var) -> Var:
    _same_shape(a, b, "add")
    t = a.tape
    vjp = (lambda g: (g, g)) if t.grad_enabled else None
    return t._push("add", _val(a) + _val(b), (a.idx, b.idx), vjp)


def sub(a: Var, b: Var) -> Var:
    _same_shape(a, b, "sub")
    t = a.tape
    vjp = (lambda g: (g, -g)) if t.grad_enabled else None
    return t._push("sub", _val(a) - _val(b), (a.idx, b.idx), vjp)


def mul(a: Var, b: Var) -> Var:
    _same_shape(a, b, "mul")
    t = a.tape
    va, vb = _val(a), _val(b)
    vjp = (lambda g: (g * vb, g * va)) if t.grad_enabled else None
    return t._push("mul", va * vb, (a.idx, b.idx), vjp)


def scale(a: Var, c: float) -> Var:
    t = a.tape
    c = float(c)
    vjp = (lambda g: (g * c,)) if t.grad_enabled else None
    return t._push("scale", _val(a) * c, (a.idx,), vjp)


def add_const(a: Var, c) -> Var:
    t = a.tape
    vjp = (lambda g: (g,)) if t.grad_enabled else None
    return t._push("add_const", _val(a) + np.asarray(c, dtype=np.float64), (a.idx,), vjp)


def vsum(a: Var) -> Var:
    t = a.tape
    shape = _val(a).shape
    vjp = (lambda g: (np.full(shape, g),)) if t.grad_enabled else None
    return t._push("vsum", np.asarray(np.sum(_val(a))), (a.idx,), vjp)


def vmean(a: Var) -> Var:
    t = a.tape
    va = _val(a)
    n = va.size
    if n == 0:
        raise DegenerateInputError("vmean: empty input")
    shape = va.shape
    vjp = (lambda g: (np.full(shape, g / n),)) if t.grad_enabled else None
    return t._push("vmean", np.asarray(np.mean(va)), (a.idx,), vjp)


def stack(parts: Sequence[Var]) -> Var:
    """Stack scalar vars into a vector."""
    if not parts:
        raise DegenerateInputError("stack: empty input")
    t = parts[0].tape
    vals = np.array([float(_val(p)) for p in parts])
    if t.grad_enabled:
        n = len(parts)
        vjp = lambda g: tuple(g[i] for i in range(n))
    else:
        vjp = None
    return t._push("stack", vals, tuple(p.idx for p in parts), vjp)


def relu(a: Var) -> Var:
    t = a.tape
    va = _val(a)
    if t.grad_enabled:
        mask = va > 0
        vjp = lambda g: (g * mask,)
    else:
        vjp = None
    return t._push("relu", np.maximum(va, 0.0), (a.idx,), vjp)


def gelu(a: Var) -> Var:
    """Exact GELU: x * Phi(x) with the Gaussian CDF via erf."""
    t = a.tape
    x = _val(a)
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    if t.grad_enabled:
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        local = cdf + x * pdf
        vjp = lambda g: (g * local,)
    else:
        vjp = None
    return t._push("gelu", x * cdf, (a.idx,), vjp)


# ---------------------------------------------------------------------------
# linear algebra


def dot(a: Var, b: Var) -> Var:
    _same_shape(a, b, "dot")
    t = a.tape
    va, vb = _val(a), _val(b)
    if va.ndim != 1:
        raise DimensionError(f"dot: expected vectors, got shape {va.shape}")
    vjp = (lambda g: (g * vb, g * va)) if t.grad_enabled else None
    return t._push("dot", np.asarray(np.dot(va, vb)), (a.idx, b.idx), vjp)


def matvec(m: Var, x: Var) -> Var:
    t = m.tape
    vm, vx = _val(m), _val(x)
    if vm.ndim != 2 or vx.ndim != 1 or vm.shape[1] != vx.shape[0]:
        raise DimensionError(f"matvec: {vm.shape} @ {vx.shape}")
    vjp = (lambda g: (np.outer(g, vx), vm.T @ g)) if t.grad_enabled else None
    return t._push("matvec", vm @ vx, (m.idx, x.idx), vjp)


def matmat(a: Var, b: Var) -> Var:
    t = a.tape
    va, vb = _val(a), _val(b)
    if va.ndim != 2 or vb.ndim != 2 or va.shape[1] != vb.shape[0]:
        raise DimensionError(f"matmat: {va.shape} @ {vb.shape}")
    vjp = (lambda g: (g @ vb.T, va.T @ g)) if t.grad_enabled else None
    return t._push("matmat", va @ vb, (a.idx, b.idx), vjp)


def transpose(a: Var) -> Var:
    t = a.tape
    va = _val(a)
    if va.ndim != 2:
        raise DimensionError(f"transpose: expected matrix, got shape {va.shape}")
    vjp = (lambda g: (g.T,)) if t.grad_enabled else None
    return t._push("transpose", va.T, (a.idx,), vjp)


def affine(m: Var, x: Var, b: Var) -> Var:
    """m @ x + b."""
    return add(matvec(m, x), b)


def sumsq(a: Var) -> Var:
    t = a.tape
    va = _val(a)
    vjp = (lambda g: (2.0 * g * va,)) if t.grad_enabled else None
    return t._push("sumsq", np.asarray(np.sum(va * va)), (a.idx,), vjp)


# ---------------------------------------------------------------------------
# similarity / normalization / losses


def cosine(a: Var, b: Var) -> Var:
    _same_shape(a, b, "cosine")
    t = a.tape
    va, vb = _val(a), _val(b)
    if va.ndim != 1:
        raise DimensionError(f"cosine: expected vectors, got shape {va.shape}")
    na = np.sqrt(np.dot(va, va))
    nb = np.sqrt(np.dot(vb, vb))
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine: zero-norm argument")
    c = float(np.dot(va, vb) / (na * nb))
    if t.grad_enabled:
        def vjp(g):
            da = (vb / (na * nb) - c * va / (na * na)) * g
            db = (va / (na * nb) - c * vb / (nb * nb)) * g
            return da, db
    else:
        vjp = None
    return t._push("cosine", np.asarray(c), (a.idx, b.idx), vjp)


def softmax(a: Var) -> Var:
    t = a.tape
    va = _val(a)
    if va.ndim != 1 or va.size == 0:
        raise DimensionError(f"softmax: expected non-empty vector, got shape {va.shape}")
    e = np.exp(va - np.max(va))
    y = e / np.sum(e)
    vjp = (lambda g: (y * (g - np.dot(g, y)),)) if t.grad_enabled else None
    return t._push("softmax", y, (a.idx,), vjp)


def layer_norm(x: Var, gain: Var, bias: Var, eps: float = 1e-5) -> Var:
    t = x.tape
    vx, vg, vb = _val(x), _val(gain), _val(bias)
    if not (vx.shape == vg.shape == vb.shape) or vx.ndim != 1:
        raise DimensionError(f"layer_norm: shapes {vx.shape}/{vg.shape}/{vb.shape}")
    mu = np.mean(vx)
    var = np.mean((vx - mu) ** 2)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (vx - mu) * inv
    if t.grad_enabled:
        def vjp(g):
            gy = g * vg
            dx = inv * (gy - np.mean(gy) - xhat * np.mean(gy * xhat))
            return dx, g * xhat, g
    else:
        vjp = None
    return t._push("layer_norm", vg * xhat + vb, (x.idx, gain.idx, bias.idx), vjp)


def cross_entropy(logits: Var, label: int) -> Var:
    """-log softmax(logits)[label], computed via logsumexp."""
    t = logits.tape
    z = _val(logits)
    if z.ndim != 1:
        raise DimensionError(f"cross_entropy: expected vector, got shape {z.shape}")
    if not 0 <= label < z.size:
        raise DimensionError(f"cross_entropy: label {label} outside 0..{z.size - 1}")
    m = np.max(z)
    lse = m + np.log(np.sum(np.exp(z - m)))
    if t.grad_enabled:
        p = np.exp(z - lse)
        def vjp(g):
            d = p * g
            d[label] -= g
            return (d,)
    else:
        vjp = None
    return t._push("cross_entropy", np.asarray(lse - z[label]), (logits.idx,), vjp)


def mlp2(x: Var, w1: Var, b1: Var, w2: Var, b2: Var, activation: str = "gelu") -> Var:
    """Two-layer perceptron w2 @ act(w1 @ x + b1) + b2."""
    h = affine(w1, x, b1)
    if activation == "gelu":
        h = gelu(h)
    elif activation == "relu":
        h = relu(h)
    else:
        raise DegenerateInputError(f"mlp2: unknown activation {activation!r}")
    return affine(w2, h, b2)


# ---------------------------------------------------------------------------
# reverse pass


def backward(tape: Tape, loss: Var) -> dict[int, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter leaf on the tape.

    Returns a map {param node id -> gradient array}; parameters the loss
    never touched get explicit zeros. Each recorded node is visited at most
    once (reverse topological order is insertion order reversed).
    """
    if not tape.grad_enabled:
        raise DegenerateInputError("backward: tape was recorded with gradients disabled")
    root = tape.nodes[loss.idx]
    if root.value.shape != ():
        raise DimensionError(f"backward: loss must be scalar, got shape {root.value.shape}")

    adjoint: dict[int, np.ndarray] = {loss.idx: np.asarray(1.0)}
    grads: dict[int, np.ndarray] = {}
    nodes = tape.nodes
    for i in range(loss.idx, -1, -1):
        g = adjoint.pop(i, None)
        if g is None:
            continue
        node = nodes[i]
        if node.vjp is None:
            if node.op == "param":
                grads[i] = g
            continue
        for pid, contrib in zip(node.parents, node.vjp(g)):
            acc = adjoint.get(pid)
            adjoint[pid] = contrib if acc is None else acc + contrib
    for pid in tape.param_ids:
        if pid not in grads:
            grads[pid] = np.zeros_like(nodes[pid].value)
    return grads


def param_gradients(tape: Tape, loss: Var) -> dict[str, np.ndarray]:
    """backward(), keyed by parameter name."""
    grads = backward(tape, loss)
    return {tape.param_names[i]: grads[i] for i in tape.param_ids}


# ---------------------------------------------------------------------------
# plain-array helpers shared across modules


def check_vector(x, name: str = "vector") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError(f"{name}: expected 1-D, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DegenerateInputError(f"{name}: non-finite entries")
    return x


def check_matrix(x, name: str = "matrix") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"{name}: expected 2-D, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DegenerateInputError(f"{name}: non-finite entries")
    return x


def l2_normalize(x: np.ndarray, name: str = "vector") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=-1, keepdims=x.ndim > 1)
    if np.any(n == 0.0):
        raise DegenerateInputError(f"{name}: zero-norm row cannot be normalized")
    return x / n
