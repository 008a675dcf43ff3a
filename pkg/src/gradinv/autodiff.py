"""Static-graph reverse-mode autodiff with differentiable gradients.

A :class:`Graph` is an append-only store of nodes. Building an expression
only records nodes; :meth:`Graph.eval` computes values for a given
assignment of the variable leaves. :func:`gradient` appends the backward
pass as ordinary nodes, so its outputs can be differentiated again (double
backprop). This is what lets an attack differentiate a gradient-matching
loss ``||v - grad(x_hat)||^2`` with respect to ``x_hat``.

All values are float64 numpy arrays. Broadcasting is explicit: the only
broadcasts are the ``tile_*`` ops used for bias addition and reductions.

Example::

    g = Graph()
    x = g.variable((3,))
    y = (x * x * x).sum()
    (dx,) = gradient(y, [x])
    (ddx,) = gradient(dx.sum(), [x])
    g.eval({x: np.full(3, 2.0)}, [ddx])   # -> [array([12., 12., 12.])]
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class MissingLeafError(KeyError):
    """A variable needed for evaluation has no assigned value."""


@dataclass(frozen=True)
class _OpRecord:
    op: str
    parents: tuple
    shape: tuple
    attrs: dict = field(default_factory=dict)


class Node:
    """Handle to one node of a :class:`Graph`."""

    __slots__ = ("graph", "id")

    def __init__(self, graph, node_id):
        self.graph = graph
        self.id = node_id

    @property
    def op(self):
        return self.graph._records[self.id].op

    @property
    def parents(self):
        return self.graph._records[self.id].parents

    @property
    def shape(self):
        return self.graph._records[self.id].shape

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.shape})"

    def __hash__(self):
        return hash((id(self.graph), self.id))

    def __eq__(self, other):
        return isinstance(other, Node) and other.graph is self.graph and other.id == self.id

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self):
        return sum_all(self)


class Graph:
    """Append-only expression graph."""

    def __init__(self):
        self._records = []
        self._fns = []
        self.leaves = set()
        self._plans = {}

    def __len__(self):
        return len(self._records)

    def _append(self, op, parents, shape, fn, **attrs):
        for p in parents:
            if p.graph is not self:
                raise ValueError("operands belong to different graphs")
        nid = len(self._records)
        self._records.append(_OpRecord(op, tuple(p.id for p in parents), tuple(shape), attrs))
        self._fns.append(fn)
        return Node(self, nid)

    def variable(self, shape, name=None):
        node = self._append("var", (), shape, None, name=name)
        self.leaves.add(node.id)
        return node

    def constant(self, value):
        value = np.array(value, dtype=np.float64)
        value.setflags(write=False)
        return self._append("const", (), value.shape, None, value=value)

    def zeros(self, shape):
        return self.constant(np.zeros(shape))

    def _plan(self, targets):
        key = tuple(t.id for t in targets)
        plan = self._plans.get(key)
        if plan is None:
            need = set()
            stack = list(key)
            while stack:
                i = stack.pop()
                if i in need:
                    continue
                need.add(i)
                stack.extend(self._records[i].parents)
            plan = sorted(need)
            self._plans[key] = plan
        return plan

    def eval(self, leaf_values, targets):
        """Evaluate ``targets`` given values for the variable leaves.

        ``leaf_values`` maps variable nodes to arrays. Evaluation is a pure
        function of the graph and ``leaf_values``.
        """
        vals = {}
        for node, value in leaf_values.items():
            arr = np.asarray(value, dtype=np.float64)
            if arr.shape != node.shape:
                raise ShapeError(f"leaf {node.id} expects shape {node.shape}, got {arr.shape}")
            vals[node.id] = arr
        recs = self._records
        fns = self._fns
        for i in self._plan(targets):
            if i in vals:
                continue
            rec = recs[i]
            if rec.op == "var":
                name = rec.attrs.get("name")
                raise MissingLeafError(f"no value assigned to variable {i}" + (f" ({name})" if name else ""))
            if rec.op == "const":
                vals[i] = rec.attrs["value"]
                continue
            vals[i] = fns[i](*[vals[p] for p in rec.parents])
        return [vals[t.id] for t in targets]


def _require_same(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# --- elementwise -----------------------------------------------------------


def add(a, b):
    _require_same("add", a, b)
    return a.graph._append("add", (a, b), a.shape, np.add)


def sub(a, b):
    _require_same("sub", a, b)
    return a.graph._append("sub", (a, b), a.shape, np.subtract)


def mul(a, b):
    _require_same("mul", a, b)
    return a.graph._append("mul", (a, b), a.shape, np.multiply)


def scale(a, c):
    c = float(c)
    return a.graph._append("scale", (a,), a.shape, lambda x: c * x, c=c)


def shift(a, c):
    c = float(c)
    return a.graph._append("shift", (a,), a.shape, lambda x: x + c, c=c)


def sigmoid(a):
    return a.graph._append("sigmoid", (a,), a.shape, kernels.sigmoid)


def square(a):
    return mul(a, a)


# --- linear algebra and reshaping -------------------------------------------


def matmul(a, b):
    if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a.graph._append("matmul", (a, b), (a.shape[0], b.shape[1]), np.matmul)


def transpose(a):
    if len(a.shape) != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return a.graph._append("transpose", (a,), a.shape[::-1], lambda x: np.ascontiguousarray(x.T))


def reshape(a, shape):
    shape = tuple(shape)
    if int(np.prod(shape)) != int(np.prod(a.shape)):
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    return a.graph._append("reshape", (a,), shape, lambda x: x.reshape(shape))


def sum_all(a):
    return a.graph._append("sum", (a,), (), lambda x: np.asarray(x.sum()))


def fill(a, shape):
    """Broadcast scalar ``a`` to ``shape`` (adjoint of ``sum_all``)."""
    if a.shape != ():
        raise ShapeError(f"fill expects a scalar, got {a.shape}")
    shape = tuple(shape)
    return a.graph._append("fill", (a,), shape, lambda x: np.full(shape, float(x)))


def sum_rows(a):
    """(m, n) -> (n,), summing over rows."""
    if len(a.shape) != 2:
        raise ShapeError(f"sum_rows expects a matrix, got {a.shape}")
    return a.graph._append("sum_rows", (a,), (a.shape[1],), lambda x: x.sum(axis=0))


def tile_rows(a, m):
    """(n,) -> (m, n)."""
    if len(a.shape) != 1:
        raise ShapeError(f"tile_rows expects a vector, got {a.shape}")
    return a.graph._append(
        "tile_rows", (a,), (m, a.shape[0]), lambda x: np.broadcast_to(x, (m, x.shape[0])).copy(), m=m
    )


def sum_cols(a):
    """(m, n) -> (m,), summing over columns."""
    if len(a.shape) != 2:
        raise ShapeError(f"sum_cols expects a matrix, got {a.shape}")
    return a.graph._append("sum_cols", (a,), (a.shape[0],), lambda x: x.sum(axis=1))


def tile_cols(a, n):
    """(m,) -> (m, n)."""
    if len(a.shape) != 1:
        raise ShapeError(f"tile_cols expects a vector, got {a.shape}")
    return a.graph._append(
        "tile_cols", (a,), (a.shape[0], n), lambda x: np.repeat(x[:, None], n, axis=1), n=n
    )


def sum_chan(a):
    """(B, h, w, w) -> (h,)."""
    if len(a.shape) != 4:
        raise ShapeError(f"sum_chan expects a 4-d tensor, got {a.shape}")
    return a.graph._append("sum_chan", (a,), (a.shape[1],), lambda x: x.sum(axis=(0, 2, 3)))


def tile_chan(a, shape):
    """(h,) -> shape (B, h, w, w)."""
    shape = tuple(shape)
    if len(a.shape) != 1 or len(shape) != 4 or shape[1] != a.shape[0]:
        raise ShapeError(f"tile_chan cannot spread {a.shape} over {shape}")
    return a.graph._append(
        "tile_chan", (a,), shape, lambda x: np.broadcast_to(x[None, :, None, None], shape).copy()
    )


def add_bias(x, b):
    """Row-wise bias for (m, n) or channel-wise bias for (B, h, w, w)."""
    if len(x.shape) == 2:
        return add(x, tile_rows(b, x.shape[0]))
    if len(x.shape) == 4:
        return add(x, tile_chan(b, x.shape))
    raise ShapeError(f"add_bias: unsupported operand shape {x.shape}")


# --- softmax family ----------------------------------------------------------


def softmax(a):
    if len(a.shape) != 2:
        raise ShapeError(f"softmax expects (batch, classes), got {a.shape}")
    return a.graph._append("softmax", (a,), a.shape, kernels.softmax_rows)


def logsumexp(a):
    if len(a.shape) != 2:
        raise ShapeError(f"logsumexp expects (batch, classes), got {a.shape}")
    return a.graph._append("logsumexp", (a,), (a.shape[0],), kernels.logsumexp_rows)


def softmax_cross_entropy(logits, targets, reduction="mean"):
    """Cross-entropy of softmax(logits) against target distributions.

    Rows of ``targets`` need not sum to one; the loss is
    ``sum_j t_j * (logsumexp(a) - a_j)`` per row, which equals
    ``-sum_j t_j log p_j`` and has logits-gradient ``p * sum(t) - t``.
    """
    if logits.shape != targets.shape:
        raise ShapeError(f"logits {logits.shape} and targets {targets.shape} differ")
    if len(logits.shape) == 1:
        logits = reshape(logits, (1, logits.shape[0]))
        targets = reshape(targets, (1, targets.shape[0]))
    total = sub(mul(sum_cols(targets), logsumexp(logits)).sum(), mul(targets, logits).sum())
    if reduction == "mean":
        return scale(total, 1.0 / logits.shape[0])
    if reduction == "sum":
        return total
    raise ValueError(f"unknown reduction {reduction!r}")


# --- convolution -------------------------------------------------------------


def conv2d(x, kern, bias=None, stride=1, padding=0):
    """Square 2-D cross-correlation of (B, C, d, d) input with (h, C, k, k) kernels."""
    if len(x.shape) == 3:
        x = reshape(x, (1,) + x.shape)
    if len(x.shape) != 4 or len(kern.shape) != 4 or x.shape[1] != kern.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernels {kern.shape}")
    if x.shape[2] != x.shape[3] or kern.shape[2] != kern.shape[3]:
        raise ShapeError(f"conv2d: only square inputs and kernels, got {x.shape} and {kern.shape}")
    try:
        dp = kernels.out_width(x.shape[2], kern.shape[2], padding, stride)
    except ValueError as exc:
        raise ShapeError(f"conv2d: input {x.shape}, kernels {kern.shape}: {exc}") from None
    z = _conv(x, kern, stride, padding, dp)
    if bias is not None:
        if bias.shape != (kern.shape[0],):
            raise ShapeError(f"conv2d: bias {bias.shape} does not match {kern.shape[0]} kernels")
        z = add_bias(z, bias)
    return z


def _conv(x, kern, s, p, dp):
    shape = (x.shape[0], kern.shape[0], dp, dp)
    return x.graph._append("conv", (x, kern), shape, lambda a, k: kernels.conv2d(a, k, s, p), s=s, p=p)


def _conv_tx(g, kern, s, p, d):
    shape = (g.shape[0], kern.shape[1], d, d)
    return g.graph._append(
        "conv_tx", (g, kern), shape, lambda a, k: kernels.conv2d_input_grad(a, k, s, p, d), s=s, p=p, d=d
    )


def _conv_tw(x, g, s, p, k):
    shape = (g.shape[1], x.shape[1], k, k)
    return x.graph._append(
        "conv_tw", (x, g), shape, lambda a, b: kernels.conv2d_kernel_grad(a, b, s, p, k), s=s, p=p, k=k
    )


# --- backward rules ----------------------------------------------------------
# Each rule receives the graph, the node record, its parents as Nodes, the
# node itself and the upstream gradient node, and returns one gradient node
# (or None) per parent. Rules only build nodes, so their outputs are
# differentiable in turn.


def _vjp_conv(node, rec, ps, gy):
    x, kern = ps
    s, p = rec.attrs["s"], rec.attrs["p"]
    return _conv_tx(gy, kern, s, p, x.shape[2]), _conv_tw(x, gy, s, p, kern.shape[2])


def _vjp_conv_tx(node, rec, ps, gy):
    g, kern = ps
    s, p = rec.attrs["s"], rec.attrs["p"]
    return _conv(gy, kern, s, p, g.shape[2]), _conv_tw(gy, g, s, p, kern.shape[2])


def _vjp_conv_tw(node, rec, ps, gy):
    x, g = ps
    s, p = rec.attrs["s"], rec.attrs["p"]
    return _conv_tx(g, gy, s, p, x.shape[2]), _conv(x, gy, s, p, g.shape[2])


def _vjp_softmax(node, rec, ps, gy):
    n = node.shape[1]
    return (mul(node, sub(gy, tile_cols(sum_cols(mul(gy, node)), n))),)


def _vjp_logsumexp(node, rec, ps, gy):
    (a,) = ps
    return (mul(tile_cols(gy, a.shape[1]), softmax(a)),)


def _vjp_sigmoid(node, rec, ps, gy):
    return (mul(gy, mul(node, shift(scale(node, -1.0), 1.0))),)


_VJP = {
    "add": lambda node, rec, ps, gy: (gy, gy),
    "sub": lambda node, rec, ps, gy: (gy, scale(gy, -1.0)),
    "mul": lambda node, rec, ps, gy: (mul(gy, ps[1]), mul(gy, ps[0])),
    "scale": lambda node, rec, ps, gy: (scale(gy, rec.attrs["c"]),),
    "shift": lambda node, rec, ps, gy: (gy,),
    "sigmoid": _vjp_sigmoid,
    "matmul": lambda node, rec, ps, gy: (matmul(gy, transpose(ps[1])), matmul(transpose(ps[0]), gy)),
    "transpose": lambda node, rec, ps, gy: (transpose(gy),),
    "reshape": lambda node, rec, ps, gy: (reshape(gy, ps[0].shape),),
    "sum": lambda node, rec, ps, gy: (fill(gy, ps[0].shape),),
    "fill": lambda node, rec, ps, gy: (sum_all(gy),),
    "sum_rows": lambda node, rec, ps, gy: (tile_rows(gy, ps[0].shape[0]),),
    "tile_rows": lambda node, rec, ps, gy: (sum_rows(gy),),
    "sum_cols": lambda node, rec, ps, gy: (tile_cols(gy, ps[0].shape[1]),),
    "tile_cols": lambda node, rec, ps, gy: (sum_cols(gy),),
    "sum_chan": lambda node, rec, ps, gy: (tile_chan(gy, ps[0].shape),),
    "tile_chan": lambda node, rec, ps, gy: (sum_chan(gy),),
    "softmax": _vjp_softmax,
    "logsumexp": _vjp_logsumexp,
    "conv": _vjp_conv,
    "conv_tx": _vjp_conv_tx,
    "conv_tw": _vjp_conv_tw,
}


def gradient(output, wrt):
    """Gradient nodes of scalar ``output`` with respect to each node in ``wrt``.

    The returned nodes live in the same graph and can be differentiated
    again. A node in ``wrt`` that ``output`` does not depend on gets a
    constant zero gradient.
    """
    graph = output.graph
    if output.shape != ():
        raise ShapeError(f"gradient needs a scalar output, got shape {output.shape}")
    recs = graph._records
    wrt_ids = {n.id for n in wrt}

    ancestors = set(graph._plan([output]))
    # nodes on some path from a wrt node to the output
    live = set()
    for i in sorted(ancestors):
        if i in wrt_ids or any(p in live for p in recs[i].parents):
            live.add(i)

    grads = {output.id: graph.constant(1.0)}
    for i in sorted(live, reverse=True):
        gy = grads.get(i)
        rec = recs[i]
        if gy is None or not rec.parents:
            continue
        ps = [Node(graph, p) for p in rec.parents]
        contribs = _VJP[rec.op](Node(graph, i), rec, ps, gy)
        for p, gp in zip(rec.parents, contribs):
            if p not in live or gp is None:
                continue
            prev = grads.get(p)
            grads[p] = gp if prev is None else add(prev, gp)
    return [grads.get(n.id) or graph.zeros(n.shape) for n in wrt]
