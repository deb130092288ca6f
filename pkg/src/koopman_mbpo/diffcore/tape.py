"""Array-valued reverse-mode tape with a forward-tangent facility.

Every operation appends a :class:`Node` to the tape that owns its inputs.
``backward`` sweeps the tape in reverse with numeric vector-Jacobian
products.  ``input_derivative`` walks forward from one leaf and emits the
tangent computation as *new tape nodes*, so a loss built from tangents can
itself be differentiated by ``backward`` (forward-over-reverse).
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ContractError(ValueError):
    """Raised when a caller breaks an operation's preconditions."""


class NonFiniteError(FloatingPointError):
    """Raised by backward when a forward value is NaN or infinite."""


class Node:
    __slots__ = ("tape", "idx", "value", "op", "parents", "aux", "requires_grad", "name")
    # make ndarray (op) Node defer to the Node's reflected operators
    __array_ufunc__ = None

    def __init__(self, tape, idx, value, op, parents, aux, requires_grad, name=None):
        self.tape = tape
        self.idx = idx
        self.value = value
        self.op = op
        self.parents = parents
        self.aux = aux
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def is_leaf(self):
        return not self.parents

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Node #{self.idx} {self.op}{label} shape={self.value.shape}>"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Ordered record of nodes.  Not thread-safe; use one tape per worker."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def var(self, value, name=None) -> Node:
        """Differentiable leaf (parameters and inputs we need derivatives for)."""
        return self._push("leaf", (), np.array(value, dtype=np.float64), None, True, name)

    def const(self, value, name=None) -> Node:
        return self._push("const", (), np.asarray(value, dtype=np.float64), None, False, name)

    def vars(self, blocks) -> dict:
        """Leaves for every block of a name -> array mapping."""
        return {k: self.var(v, name=k) for k, v in blocks.items()}

    def _push(self, op, parents, value, aux, requires_grad, name=None) -> Node:
        node = Node(self, len(self.nodes), value, op, parents, aux, requires_grad, name)
        self.nodes.append(node)
        return node


def _tape_of(args) -> Tape:
    for a in args:
        if isinstance(a, Node):
            return a.tape
    raise ContractError("operation needs at least one tape node")


def _lift(tape: Tape, x) -> Node:
    if isinstance(x, Node):
        if x.tape is not tape:
            raise ContractError("nodes from different tapes cannot be combined")
        return x
    return tape.const(x)


def _record(op, parents, value, aux=None) -> Node:
    tape = parents[0].tape
    req = any(p.requires_grad for p in parents)
    return tape._push(op, tuple(parents), value, aux, req)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ----------------------------------------------------------------- operations

def add(a, b):
    t = _tape_of((a, b))
    a, b = _lift(t, a), _lift(t, b)
    return _record("add", (a, b), a.value + b.value)


def sub(a, b):
    t = _tape_of((a, b))
    a, b = _lift(t, a), _lift(t, b)
    return _record("sub", (a, b), a.value - b.value)


def mul(a, b):
    t = _tape_of((a, b))
    a, b = _lift(t, a), _lift(t, b)
    return _record("mul", (a, b), a.value * b.value)


def div(a, b):
    t = _tape_of((a, b))
    a, b = _lift(t, a), _lift(t, b)
    return _record("div", (a, b), a.value / b.value)


def neg(a):
    return _record("neg", (a,), -a.value)


def matmul(a, b):
    t = _tape_of((a, b))
    a, b = _lift(t, a), _lift(t, b)
    if a.value.ndim > 2 or b.value.ndim > 2:
        raise ContractError("matmul supports 1-D and 2-D operands only")
    return _record("matmul", (a, b), a.value @ b.value)


def tanh(a):
    return _record("tanh", (a,), np.tanh(a.value))


def exp(a):
    return _record("exp", (a,), np.exp(a.value))


def log(a):
    return _record("log", (a,), np.log(a.value))


def sin(a):
    return _record("sin", (a,), np.sin(a.value))


def cos(a):
    return _record("cos", (a,), np.cos(a.value))


def square(a):
    return _record("square", (a,), a.value * a.value)


def sqrt(a):
    return _record("sqrt", (a,), np.sqrt(a.value))


def power(a, p: float):
    return _record("power", (a,), a.value ** p, float(p))


def abs_(a):
    return _record("abs", (a,), np.abs(a.value))


def sum_(a, axis=None, keepdims=False):
    return _record("sum", (a,), np.sum(a.value, axis=axis, keepdims=keepdims), (axis, keepdims))


def mean(a, axis=None, keepdims=False):
    n = a.value.size if axis is None else a.value.shape[axis]
    return sum_(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    return _record("reshape", (a,), a.value.reshape(shape), tuple(shape))


def transpose(a):
    return _record("transpose", (a,), a.value.T)


def getitem(a, key):
    return _record("getitem", (a,), a.value[key], key)


def broadcast_to(a, shape):
    return _record("broadcast", (a,), np.broadcast_to(a.value, shape).copy(), tuple(shape))


def concat(items: Sequence, axis=-1):
    t = _tape_of(items)
    items = [_lift(t, x) for x in items]
    value = np.concatenate([x.value for x in items], axis=axis)
    sizes = [x.value.shape[axis] for x in items]
    return _record("concat", tuple(items), value, (axis, sizes))


def minimum(a, b):
    t = _tape_of((a, b))
    a, b = _lift(t, a), _lift(t, b)
    mask = (a.value <= b.value).astype(np.float64)
    return _record("select", (a, b), np.minimum(a.value, b.value), mask)


def maximum(a, b):
    t = _tape_of((a, b))
    a, b = _lift(t, a), _lift(t, b)
    mask = (a.value >= b.value).astype(np.float64)
    return _record("select", (a, b), np.maximum(a.value, b.value), mask)


def clip(a, lo, hi):
    mask = ((a.value > lo) & (a.value < hi)).astype(np.float64)
    return _record("gate", (a,), np.clip(a.value, lo, hi), mask)


# --------------------------------------------------------- reverse rules (VJP)

def _vjp_matmul(g, n):
    a, b = n.parents[0].value, n.parents[1].value
    if a.ndim == 1 and b.ndim == 1:
        return g * b, g * a
    if a.ndim == 1:
        return g @ b.T, np.outer(a, g)
    if b.ndim == 1:
        return np.outer(g, b), a.T @ g
    return g @ b.T, a.T @ g


def _vjp_sum(g, n):
    axis, keepdims = n.aux
    shape = n.parents[0].value.shape
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, shape),)


def _vjp_getitem(g, n):
    out = np.zeros_like(n.parents[0].value)
    np.add.at(out, n.aux, g)
    return (out,)


def _vjp_concat(g, n):
    axis, sizes = n.aux
    cuts = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, cuts, axis=axis))


def _vjp_select(g, n):
    m = n.aux
    return (_unbroadcast(g * m, n.parents[0].value.shape),
            _unbroadcast(g * (1.0 - m), n.parents[1].value.shape))


VJP: dict[str, Callable] = {
    "add": lambda g, n: (_unbroadcast(g, n.parents[0].value.shape),
                         _unbroadcast(g, n.parents[1].value.shape)),
    "sub": lambda g, n: (_unbroadcast(g, n.parents[0].value.shape),
                         _unbroadcast(-g, n.parents[1].value.shape)),
    "mul": lambda g, n: (_unbroadcast(g * n.parents[1].value, n.parents[0].value.shape),
                         _unbroadcast(g * n.parents[0].value, n.parents[1].value.shape)),
    "div": lambda g, n: (_unbroadcast(g / n.parents[1].value, n.parents[0].value.shape),
                         _unbroadcast(-g * n.value / n.parents[1].value, n.parents[1].value.shape)),
    "neg": lambda g, n: (-g,),
    "matmul": _vjp_matmul,
    "tanh": lambda g, n: (g * (1.0 - n.value * n.value),),
    "exp": lambda g, n: (g * n.value,),
    "log": lambda g, n: (g / n.parents[0].value,),
    "sin": lambda g, n: (g * np.cos(n.parents[0].value),),
    "cos": lambda g, n: (-g * np.sin(n.parents[0].value),),
    "square": lambda g, n: (2.0 * g * n.parents[0].value,),
    "sqrt": lambda g, n: (g / (2.0 * n.value),),
    "power": lambda g, n: (g * n.aux * n.parents[0].value ** (n.aux - 1.0),),
    "abs": lambda g, n: (g * np.sign(n.parents[0].value),),
    "sum": _vjp_sum,
    "reshape": lambda g, n: (g.reshape(n.parents[0].value.shape),),
    "transpose": lambda g, n: (g.T,),
    "getitem": _vjp_getitem,
    "broadcast": lambda g, n: (_unbroadcast(g, n.parents[0].value.shape),),
    "concat": _vjp_concat,
    "select": _vjp_select,
    "gate": lambda g, n: (g * n.aux,),
}


# ------------------------------------------------ forward-tangent rules (JVP)
# Each rule receives the node and one tangent (Node or None) per parent and
# returns the output tangent as a tape node.

def _fit(t: Node, shape) -> Node:
    return t if t.value.shape == shape else broadcast_to(t, shape)


def _jvp_add(n, ts):
    da, db = ts
    if da is None:
        return _fit(db, n.value.shape)
    if db is None:
        return _fit(da, n.value.shape)
    return add(da, db)


def _jvp_sub(n, ts):
    da, db = ts
    if da is None:
        return _fit(neg(db), n.value.shape)
    if db is None:
        return _fit(da, n.value.shape)
    return sub(da, db)


def _jvp_mul(n, ts):
    a, b = n.parents
    da, db = ts
    out = None
    if da is not None:
        out = mul(da, b)
    if db is not None:
        term = mul(a, db)
        out = term if out is None else add(out, term)
    return _fit(out, n.value.shape)


def _jvp_div(n, ts):
    a, b = n.parents
    da, db = ts
    num = None
    if da is not None:
        num = da
    if db is not None:
        term = mul(n, db)
        num = neg(term) if num is None else sub(num, term)
    return _fit(div(num, b), n.value.shape)


def _jvp_matmul(n, ts):
    a, b = n.parents
    da, db = ts
    out = None
    if da is not None:
        out = matmul(da, b)
    if db is not None:
        term = matmul(a, db)
        out = term if out is None else add(out, term)
    return out


def _jvp_concat(n, ts):
    axis, _ = n.aux
    parts = [t if t is not None else n.tape.const(np.zeros_like(p.value))
             for p, t in zip(n.parents, ts)]
    return concat(parts, axis=axis)


def _jvp_select(n, ts):
    da, db = ts
    m = n.aux
    out = None
    if da is not None:
        out = mul(da, m)
    if db is not None:
        term = mul(db, 1.0 - m)
        out = term if out is None else add(out, term)
    return _fit(out, n.value.shape)


JVP: dict[str, Callable] = {
    "add": _jvp_add,
    "sub": _jvp_sub,
    "mul": _jvp_mul,
    "div": _jvp_div,
    "neg": lambda n, ts: neg(ts[0]),
    "matmul": _jvp_matmul,
    "tanh": lambda n, ts: mul(sub(1.0, mul(n, n)), ts[0]),
    "exp": lambda n, ts: mul(n, ts[0]),
    "log": lambda n, ts: div(ts[0], n.parents[0]),
    "sin": lambda n, ts: mul(cos(n.parents[0]), ts[0]),
    "cos": lambda n, ts: neg(mul(sin(n.parents[0]), ts[0])),
    "square": lambda n, ts: mul(mul(n.parents[0], 2.0), ts[0]),
    "sqrt": lambda n, ts: div(ts[0], mul(n, 2.0)),
    "power": lambda n, ts: mul(mul(power(n.parents[0], n.aux - 1.0), n.aux), ts[0]),
    "abs": lambda n, ts: mul(ts[0], np.sign(n.parents[0].value)),
    "sum": lambda n, ts: sum_(ts[0], *n.aux),
    "reshape": lambda n, ts: reshape(ts[0], n.aux),
    "transpose": lambda n, ts: transpose(ts[0]),
    "getitem": lambda n, ts: getitem(ts[0], n.aux),
    "broadcast": lambda n, ts: broadcast_to(ts[0], n.aux),
    "concat": _jvp_concat,
    "select": _jvp_select,
    "gate": lambda n, ts: mul(ts[0], n.aux),
}


# ------------------------------------------------------------------- drivers

def _first_nonfinite(tape: Tape, upto: int):
    for node in tape.nodes[: upto + 1]:
        if not np.all(np.isfinite(node.value)):
            return node
    return None


def backward(output: Node, wrt: Iterable[Node]) -> list[np.ndarray]:
    """Gradients of a scalar node with respect to each node in ``wrt``.

    Tape values are left untouched.  Leaves the output does not depend on
    get zero gradients.
    """
    if output.value.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.value.shape}")
    tape = output.tape
    if not np.isfinite(output.value).all():
        bad = _first_nonfinite(tape, output.idx)
        raise NonFiniteError(f"non-finite forward value at {bad!r}")
    wrt = list(wrt)
    grads: list = [None] * (output.idx + 1)
    grads[output.idx] = np.ones_like(output.value)
    nodes = tape.nodes
    for i in range(output.idx, -1, -1):
        g = grads[i]
        if g is None:
            continue
        node = nodes[i]
        if not node.parents:
            continue
        pgs = VJP[node.op](g, node)
        for p, pg in zip(node.parents, pgs):
            if not p.requires_grad:
                continue
            j = p.idx
            if grads[j] is None:
                grads[j] = np.array(pg, dtype=np.float64)
            else:
                grads[j] = grads[j] + pg
    out = []
    for w in wrt:
        g = grads[w.idx] if w.idx <= output.idx else None
        out.append(np.zeros_like(w.value) if g is None else np.asarray(g).reshape(w.value.shape))
    return out


def input_derivative(outputs: Sequence[Node], wrt: Node) -> list[Node]:
    """Tangents of ``outputs`` along an all-ones seed on the leaf ``wrt``.

    For batched inputs whose rows are independent (one sample per row) this
    is exactly the per-sample derivative d output / d input.  The returned
    tangents are tape nodes and can be fed into further operations.
    """
    if not wrt.is_leaf:
        raise ContractError(f"input_derivative needs a leaf input, got {wrt!r}")
    tape = wrt.tape
    last = max(o.idx for o in outputs)
    tangents: dict[int, Node] = {wrt.idx: tape.const(np.ones_like(wrt.value))}
    nodes = tape.nodes
    for i in range(wrt.idx + 1, last + 1):
        node = nodes[i]
        if not node.parents:
            continue
        ts = [tangents.get(p.idx) for p in node.parents]
        if all(t is None for t in ts):
            continue
        tangents[i] = JVP[node.op](node, ts)
    return [tangents[o.idx] if o.idx in tangents else tape.const(np.zeros_like(o.value))
            for o in outputs]


def dense(x: Node, w: Node, b: Node | None = None) -> Node:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def mlp(x: Node, layers: Sequence[tuple], act=tanh, last_linear: bool = True) -> Node:
    """Apply (W, b) pairs in order with ``act`` between them."""
    h = x
    for i, (w, b) in enumerate(layers):
        h = dense(h, w, b)
        if i < len(layers) - 1 or not last_linear:
            h = act(h)
    return h
