"""Reverse-mode automatic differentiation over dense float64 arrays.

The engine records a flat tape of primitive operations (a ``Graph``) and
computes exact reverse-mode gradients of a scalar with respect to named
parameter leaves.  Two properties drive the design:

* every operation is also available in an *eager* flavour (``EAGER``) that
  runs the identical numpy kernels without recording anything, so network
  code can be written once against a backend object and reused for
  gradient-free forward passes (rollouts, target networks, perturbed twins);
* ``backward(..., create_graph=True)`` expresses the backward pass itself
  with tape operations, so gradients are differentiable and second-order
  quantities (gradients of functions of gradients) come out of the same
  machinery.

All tensors are C-contiguous float64.  Any NaN/Inf produced by an operation
raises ``NonFiniteError`` naming the offending node.  Shapes are validated at
build time.  There is no broadcasting except bias-style row vectors
(``bias_add``/``rowscale``) and python scalars.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Graph",
    "Node",
    "EAGER",
    "GraphError",
    "NonFiniteError",
    "primitive_ops",
    "evaluate_at",
]


class GraphError(Exception):
    """Raised for invalid graph construction or use."""


class NonFiniteError(GraphError):
    """Raised when an operation produces NaN or Inf."""


def _f64(x):
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        return a
    return np.ascontiguousarray(a)


def _finite(a):
    # cheap screen first; a.sum() is NaN/Inf whenever any entry is
    s = a.sum()
    if np.isfinite(s):
        return True
    return bool(np.isfinite(a).all())


# ---------------------------------------------------------------------------
# numpy kernels, shared verbatim by the eager backend and the graph ops


def k_affine(x, w, b):
    return x @ w + b


def k_softmax_last(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def k_gru_gates(x, h, wx, wh, bx, bh):
    """Fused GRU cell, gate order (reset, update, candidate).

    Returns (h_new, r, z, n, ghn) where ghn is the hidden contribution to
    the candidate pre-activation (needed by the backward pass).
    """
    hid = h.shape[-1]
    gx = x @ wx + bx
    gh = h @ wh + bh
    r = 1.0 / (1.0 + np.exp(-(gx[:, :hid] + gh[:, :hid])))
    z = 1.0 / (1.0 + np.exp(-(gx[:, hid:2 * hid] + gh[:, hid:2 * hid])))
    ghn = gh[:, 2 * hid:]
    n = np.tanh(gx[:, 2 * hid:] + r * ghn)
    h_new = (1.0 - z) * n + z * h
    return h_new, r, z, n, ghn


def k_elu(x):
    return np.where(x > 0.0, x, np.expm1(x))


# ---------------------------------------------------------------------------


class Node:
    """One tape entry: an op, its parents and the cached forward value."""

    __slots__ = ("graph", "idx", "op", "value", "parents", "ctx",
                 "requires_grad", "name")

    def __init__(self, graph, idx, op, value, parents, ctx, requires_grad, name):
        self.graph = graph
        self.idx = idx
        self.op = op
        self.value = value
        self.parents = parents
        self.ctx = ctx
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    # arithmetic sugar so VJP formulas read the same for nodes and arrays
    def __add__(self, other):
        g = self.graph
        if isinstance(other, Node):
            return g.add(self, other)
        return g.sadd(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        g = self.graph
        if isinstance(other, Node):
            return g.sub(self, other)
        return g.sadd(self, -float(other))

    def __rsub__(self, other):
        return self.graph.rsub(float(other), self)

    def __mul__(self, other):
        g = self.graph
        if isinstance(other, Node):
            return g.mul(self, other)
        return g.smul(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return self.graph.neg(self)

    def __matmul__(self, other):
        return self.graph.matmul(self, other)

    def __repr__(self):
        return f"Node#{self.idx}<{self.op}{list(self.shape)}>"


class _EagerOps:
    """Backend running the same kernels directly on ndarrays."""

    is_graph = False

    @staticmethod
    def constant(x):
        return _f64(x)

    @staticmethod
    def add(a, b):
        return a + b

    @staticmethod
    def sub(a, b):
        return a - b

    @staticmethod
    def mul(a, b):
        return a * b

    @staticmethod
    def neg(a):
        return -a

    @staticmethod
    def smul(a, c):
        return a * c

    @staticmethod
    def sadd(a, c):
        return a + c

    @staticmethod
    def rsub(c, a):
        return c - a

    @staticmethod
    def matmul(a, b):
        return a @ b

    @staticmethod
    def bmm(a, b):
        return np.matmul(a, b)

    @staticmethod
    def transpose(a):
        return np.ascontiguousarray(a.T)

    @staticmethod
    def swap_last(a):
        return np.ascontiguousarray(np.swapaxes(a, -1, -2))

    @staticmethod
    def reshape(a, shape):
        return np.reshape(a, shape)

    @staticmethod
    def concat_last(parts):
        return np.concatenate(parts, axis=-1)

    @staticmethod
    def concat_rows(parts):
        return np.concatenate(parts, axis=0)

    @staticmethod
    def slice_rows(a, start, stop):
        return a[start:stop].copy()

    @staticmethod
    def slice_cols(a, start, stop):
        return np.ascontiguousarray(a[..., start:stop])

    @staticmethod
    def embed_rows(a, start, total):
        out = np.zeros((total,) + a.shape[1:], dtype=np.float64)
        out[start:start + a.shape[0]] = a
        return out

    @staticmethod
    def embed_cols(a, start, total):
        out = np.zeros(a.shape[:-1] + (total,), dtype=np.float64)
        out[..., start:start + a.shape[-1]] = a
        return out

    @staticmethod
    def take_rows(a, idx):
        return a[idx]

    @staticmethod
    def scatter_rows(a, idx, total):
        out = np.zeros((total,) + a.shape[1:], dtype=np.float64)
        np.add.at(out, idx, a)
        return out

    @staticmethod
    def repeat_rows(a, k):
        return np.repeat(a, k, axis=0)

    @staticmethod
    def gather_last(a, idx):
        return np.take_along_axis(a, idx[..., None], axis=-1)[..., 0]

    @staticmethod
    def scatter_last(a, idx, width):
        out = np.zeros(a.shape + (width,), dtype=np.float64)
        np.put_along_axis(out, idx[..., None], a[..., None], axis=-1)
        return out

    @staticmethod
    def relu(a):
        return np.maximum(a, 0.0)

    @staticmethod
    def elu(a):
        return k_elu(a)

    @staticmethod
    def sigmoid(a):
        return 1.0 / (1.0 + np.exp(-a))

    @staticmethod
    def tanh(a):
        return np.tanh(a)

    @staticmethod
    def absolute(a):
        return np.abs(a)

    @staticmethod
    def square(a):
        return np.square(a)

    @staticmethod
    def sqrt(a):
        return np.sqrt(a)

    @staticmethod
    def reciprocal(a):
        return 1.0 / a

    @staticmethod
    def softmax_last(a):
        return k_softmax_last(a)

    @staticmethod
    def sum_all(a):
        return np.asarray(a.sum(), dtype=np.float64)

    @staticmethod
    def mean_all(a):
        return np.asarray(a.mean(), dtype=np.float64)

    @staticmethod
    def sum_axis(a, axis, keepdims=False):
        return a.sum(axis=axis, keepdims=keepdims)

    @staticmethod
    def expand_axis(a, axis, n):
        return np.repeat(np.expand_dims(a, axis), n, axis=axis)

    @staticmethod
    def bcast_full(a, shape):
        return np.full(shape, float(a), dtype=np.float64)

    @staticmethod
    def bias_add(a, b):
        return a + b

    @staticmethod
    def rowscale(a, s):
        return a * s

    @staticmethod
    def affine(x, w, b):
        return k_affine(x, w, b)

    @staticmethod
    def gru_cell(x, h, wx, wh, bx, bh):
        return k_gru_gates(x, h, wx, wh, bx, bh)[0]

    @staticmethod
    def col_norm(a):
        return np.sqrt(np.square(a).sum(axis=0))

    @staticmethod
    def diag_part(a):
        return np.ascontiguousarray(np.diagonal(a))

    @staticmethod
    def embed_diag(v):
        return np.diag(v)

    @staticmethod
    def stop_grad(a):
        return a

    @staticmethod
    def value_of(a):
        return a


EAGER = _EagerOps()


def _shape_err(op, msg):
    raise GraphError(f"{op}: {msg}")


class Graph:
    """A computation tape: ordered primitive-op records plus named leaves.

    Nodes are appended in topological order by construction.  The tape is
    replayable: :meth:`replay` re-executes every op from the recorded leaf
    values and reproduces identical outputs bit for bit.
    """

    is_graph = True

    def __init__(self, check_finite=True):
        self.nodes = []
        self.params = {}
        self.check_finite = check_finite

    # -- construction -------------------------------------------------

    def _push(self, op, value, parents=(), ctx=None, requires=None, name=None):
        value = np.asarray(value, dtype=np.float64)
        if self.check_finite and not _finite(value):
            raise NonFiniteError(
                f"non-finite value produced by op '{op}' (node {len(self.nodes)})")
        if requires is None:
            requires = any(p.requires_grad for p in parents)
        node = Node(self, len(self.nodes), op, value, tuple(parents), ctx,
                    requires, name)
        self.nodes.append(node)
        return node

    def leaf(self, name, value, requires_grad=True):
        if name in self.params:
            raise GraphError(f"duplicate parameter leaf '{name}'")
        node = self._push("leaf", _f64(value), requires=requires_grad, name=name)
        self.params[name] = node
        return node

    def constant(self, value):
        return self._push("constant", _f64(value), requires=False)

    def _n(self, x):
        return x if isinstance(x, Node) else self.constant(x)

    # -- elementwise / arithmetic --------------------------------------

    def add(self, a, b):
        a, b = self._n(a), self._n(b)
        if a.shape != b.shape:
            _shape_err("add", f"shape mismatch {a.shape} vs {b.shape}")
        return self._push("add", a.value + b.value, (a, b))

    def sub(self, a, b):
        a, b = self._n(a), self._n(b)
        if a.shape != b.shape:
            _shape_err("sub", f"shape mismatch {a.shape} vs {b.shape}")
        return self._push("sub", a.value - b.value, (a, b))

    def mul(self, a, b):
        a, b = self._n(a), self._n(b)
        if a.shape != b.shape:
            _shape_err("mul", f"shape mismatch {a.shape} vs {b.shape}")
        return self._push("mul", a.value * b.value, (a, b))

    def neg(self, a):
        return self._push("neg", -a.value, (a,))

    def smul(self, a, c):
        return self._push("smul", a.value * c, (a,), ctx=float(c))

    def sadd(self, a, c):
        return self._push("sadd", a.value + c, (a,), ctx=float(c))

    def rsub(self, c, a):
        return self._push("rsub", c - a.value, (a,), ctx=float(c))

    # -- linear algebra -------------------------------------------------

    def matmul(self, a, b):
        a, b = self._n(a), self._n(b)
        if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
            _shape_err("matmul", f"incompatible shapes {a.shape} @ {b.shape}")
        return self._push("matmul", a.value @ b.value, (a, b))

    def bmm(self, a, b):
        a, b = self._n(a), self._n(b)
        if a.value.ndim < 3 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
            _shape_err("bmm", f"incompatible shapes {a.shape} @ {b.shape}")
        return self._push("bmm", np.matmul(a.value, b.value), (a, b))

    def transpose(self, a):
        if a.value.ndim != 2:
            _shape_err("transpose", "expects a matrix")
        return self._push("transpose", EAGER.transpose(a.value), (a,))

    def swap_last(self, a):
        return self._push("swap_last", EAGER.swap_last(a.value), (a,))

    def reshape(self, a, shape):
        return self._push("reshape", np.reshape(a.value, shape), (a,),
                          ctx=a.shape)

    def concat_last(self, parts):
        parts = tuple(self._n(p) for p in parts)
        widths = tuple(p.shape[-1] for p in parts)
        return self._push("concat_last",
                          np.concatenate([p.value for p in parts], axis=-1),
                          parts, ctx=widths)

    def concat_rows(self, parts):
        parts = tuple(self._n(p) for p in parts)
        counts = tuple(p.shape[0] for p in parts)
        return self._push("concat_rows",
                          np.concatenate([p.value for p in parts], axis=0),
                          parts, ctx=counts)

    def slice_rows(self, a, start, stop):
        return self._push("slice_rows", a.value[start:stop].copy(), (a,),
                          ctx=(start, stop, a.shape[0]))

    def slice_cols(self, a, start, stop):
        return self._push("slice_cols", EAGER.slice_cols(a.value, start, stop),
                          (a,), ctx=(start, stop, a.shape[-1]))

    def embed_rows(self, a, start, total):
        return self._push("embed_rows", EAGER.embed_rows(a.value, start, total),
                          (a,), ctx=(start, a.shape[0], total))

    def embed_cols(self, a, start, total):
        return self._push("embed_cols", EAGER.embed_cols(a.value, start, total),
                          (a,), ctx=(start, a.shape[-1], total))

    def take_rows(self, a, idx):
        idx = np.asarray(idx, dtype=np.intp)
        return self._push("take_rows", a.value[idx], (a,),
                          ctx=(idx, a.shape[0]))

    def scatter_rows(self, a, idx, total):
        idx = np.asarray(idx, dtype=np.intp)
        return self._push("scatter_rows", EAGER.scatter_rows(a.value, idx, total),
                          (a,), ctx=(idx, total))

    def repeat_rows(self, a, k):
        return self._push("repeat_rows", np.repeat(a.value, k, axis=0), (a,),
                          ctx=(int(k), a.shape))

    def gather_last(self, a, idx):
        idx = np.asarray(idx, dtype=np.intp)
        if idx.shape != a.shape[:-1]:
            _shape_err("gather_last", f"index shape {idx.shape} vs {a.shape}")
        return self._push("gather_last", EAGER.gather_last(a.value, idx), (a,),
                          ctx=(idx, a.shape[-1]))

    def scatter_last(self, a, idx, width):
        idx = np.asarray(idx, dtype=np.intp)
        return self._push("scatter_last", EAGER.scatter_last(a.value, idx, width),
                          (a,), ctx=(idx, width))

    # -- nonlinearities ---------------------------------------------------

    def relu(self, a):
        return self._push("relu", np.maximum(a.value, 0.0), (a,))

    def elu(self, a):
        return self._push("elu", k_elu(a.value), (a,))

    def sigmoid(self, a):
        return self._push("sigmoid", EAGER.sigmoid(a.value), (a,))

    def tanh(self, a):
        return self._push("tanh", np.tanh(a.value), (a,))

    def absolute(self, a):
        return self._push("absolute", np.abs(a.value), (a,))

    def square(self, a):
        return self._push("square", np.square(a.value), (a,))

    def sqrt(self, a):
        return self._push("sqrt", np.sqrt(a.value), (a,))

    def reciprocal(self, a):
        return self._push("reciprocal", 1.0 / a.value, (a,))

    def softmax_last(self, a):
        return self._push("softmax_last", k_softmax_last(a.value), (a,))

    # -- reductions / broadcasts ----------------------------------------

    def sum_all(self, a):
        return self._push("sum_all", EAGER.sum_all(a.value), (a,), ctx=a.shape)

    def mean_all(self, a):
        return self._push("mean_all", EAGER.mean_all(a.value), (a,), ctx=a.shape)

    def sum_axis(self, a, axis, keepdims=False):
        axis = int(axis) % a.value.ndim
        return self._push("sum_axis", a.value.sum(axis=axis, keepdims=keepdims),
                          (a,), ctx=(axis, keepdims, a.shape))

    def expand_axis(self, a, axis, n):
        axis = int(axis) % (a.value.ndim + 1)
        return self._push("expand_axis", EAGER.expand_axis(a.value, axis, n),
                          (a,), ctx=(axis, int(n)))

    def bcast_full(self, a, shape):
        if a.value.shape != ():
            _shape_err("bcast_full", "expects a scalar")
        return self._push("bcast_full", EAGER.bcast_full(a.value, shape), (a,),
                          ctx=tuple(shape))

    def bias_add(self, a, b):
        a, b = self._n(a), self._n(b)
        if b.value.ndim != 1 or a.shape[-1] != b.shape[0]:
            _shape_err("bias_add", f"bias {b.shape} vs input {a.shape}")
        return self._push("bias_add", a.value + b.value, (a, b))

    def rowscale(self, a, s):
        a, s = self._n(a), self._n(s)
        if s.value.ndim != 1 or a.shape[-1] != s.shape[0]:
            _shape_err("rowscale", f"scale {s.shape} vs input {a.shape}")
        return self._push("rowscale", a.value * s.value, (a, s))

    # -- fused network ops -------------------------------------------------

    def affine(self, x, w, b):
        x, w, b = self._n(x), self._n(w), self._n(b)
        if x.shape[-1] != w.shape[0] or w.shape[1] != b.shape[0]:
            _shape_err("affine", f"{x.shape} @ {w.shape} + {b.shape}")
        return self._push("affine", k_affine(x.value, w.value, b.value),
                          (x, w, b))

    def gru_cell(self, x, h, wx, wh, bx, bh):
        x, h = self._n(x), self._n(h)
        hid = h.shape[-1]
        if wx.shape != (x.shape[-1], 3 * hid) or wh.shape != (hid, 3 * hid):
            _shape_err("gru_cell", f"weight shapes {wx.shape}/{wh.shape} "
                                   f"for input {x.shape}, hidden {h.shape}")
        h_new, r, z, n, ghn = k_gru_gates(x.value, h.value, wx.value,
                                          wh.value, bx.value, bh.value)
        return self._push("gru_cell", h_new, (x, h, wx, wh, bx, bh),
                          ctx=(r, z, n, ghn))

    def col_norm(self, a):
        if a.value.ndim != 2:
            _shape_err("col_norm", "expects a matrix")
        return self._push("col_norm", EAGER.col_norm(a.value), (a,))

    def diag_part(self, a):
        if a.value.ndim != 2 or a.shape[0] != a.shape[1]:
            _shape_err("diag_part", "expects a square matrix")
        return self._push("diag_part", EAGER.diag_part(a.value), (a,))

    def embed_diag(self, v):
        return self._push("embed_diag", np.diag(v.value), (v,))

    def stop_grad(self, a):
        return self._push("stop_grad", a.value, (a,), requires=False)

    @staticmethod
    def value_of(a):
        return a.value

    # -- execution ---------------------------------------------------------

    def replay(self):
        """Re-execute the tape from its leaf values; returns max abs drift.

        Identical leaves and op sequence must reproduce identical outputs,
        so the returned drift is 0.0 for a healthy tape.
        """
        values = {}
        drift = 0.0
        for node in self.nodes:
            if node.op in ("leaf", "constant"):
                values[node.idx] = node.value
                continue
            pv = [values[p.idx] for p in node.parents]
            new = _REPLAY[node.op](node, pv)
            values[node.idx] = new
            d = np.max(np.abs(np.asarray(new) - node.value)) if np.asarray(new).size else 0.0
            drift = max(drift, float(d))
        return drift

    # -- backward ------------------------------------------------------------

    def backward(self, root, wrt=None, create_graph=False):
        """Reverse-mode gradients of a scalar node w.r.t. parameter leaves.

        Returns a gradient map {leaf name: gradient}, with ndarray values in
        the default mode and Node values when ``create_graph`` is set (the
        backward pass is then recorded on this same tape, so the returned
        gradients can be differentiated again).

        Only leaves reachable from ``root`` through differentiable ops appear
        in the result; ``wrt`` optionally restricts which leaf names are kept.
        """
        if root.value.shape not in ((), (1,)):
            raise GraphError(
                f"backward needs a scalar output, got shape {root.value.shape}")
        if not root.requires_grad:
            return {}

        # needed set: ancestors of root that require grad
        needed = np.zeros(len(self.nodes), dtype=bool)
        stack = [root.idx]
        needed[root.idx] = True
        while stack:
            node = self.nodes[stack.pop()]
            for p in node.parents:
                if p.requires_grad and not needed[p.idx]:
                    needed[p.idx] = True
                    stack.append(p.idx)

        B = self if create_graph else EAGER
        if create_graph:
            seed = self.constant(np.ones(root.value.shape))
        else:
            seed = np.ones(root.value.shape)
        adjoint = {root.idx: seed}

        upto = root.idx
        for idx in range(upto, -1, -1):
            if not needed[idx] or idx not in adjoint:
                continue
            node = self.nodes[idx]
            if node.op in ("leaf", "constant", "stop_grad"):
                continue
            g = adjoint.pop(idx)
            vjp = _VJP[node.op]
            if create_graph:
                grads = vjp(B, g, node, node.parents)
            else:
                grads = vjp(B, g, node, [p.value for p in node.parents])
            for p, pg in zip(node.parents, grads):
                if pg is None or not p.requires_grad or not needed[p.idx]:
                    continue
                if not create_graph and self.check_finite and not _finite(pg):
                    raise NonFiniteError(
                        f"non-finite gradient at op '{node.op}' (node {idx})")
                if p.idx in adjoint:
                    if create_graph:
                        adjoint[p.idx] = self.add(adjoint[p.idx], pg)
                    else:
                        adjoint[p.idx] = adjoint[p.idx] + pg
                else:
                    adjoint[p.idx] = pg

        out = {}
        for name, leaf in self.params.items():
            if wrt is not None and name not in wrt:
                continue
            if leaf.idx in adjoint:
                out[name] = adjoint[leaf.idx]
        return out


# ---------------------------------------------------------------------------
# per-op adjoints, written once against a backend so the same formulas serve
# the fast ndarray path and the differentiable create_graph path


def _v_add(B, g, node, ps):
    return (g, g)


def _v_sub(B, g, node, ps):
    return (g, B.neg(g))


def _v_mul(B, g, node, ps):
    a, b = ps
    return (B.mul(g, b), B.mul(g, a))


def _v_neg(B, g, node, ps):
    return (B.neg(g),)


def _v_smul(B, g, node, ps):
    return (B.smul(g, node.ctx),)


def _v_sadd(B, g, node, ps):
    return (g,)


def _v_rsub(B, g, node, ps):
    return (B.neg(g),)


def _v_matmul(B, g, node, ps):
    a, b = ps
    return (B.matmul(g, B.transpose(b)), B.matmul(B.transpose(a), g))


def _v_bmm(B, g, node, ps):
    a, b = ps
    return (B.bmm(g, B.swap_last(b)), B.bmm(B.swap_last(a), g))


def _v_transpose(B, g, node, ps):
    return (B.transpose(g),)


def _v_swap_last(B, g, node, ps):
    return (B.swap_last(g),)


def _v_reshape(B, g, node, ps):
    return (B.reshape(g, node.ctx),)


def _v_concat_last(B, g, node, ps):
    widths = node.ctx
    grads, at = [], 0
    for w in widths:
        grads.append(B.slice_cols(g, at, at + w))
        at += w
    return tuple(grads)


def _v_concat_rows(B, g, node, ps):
    counts = node.ctx
    grads, at = [], 0
    for c in counts:
        grads.append(B.slice_rows(g, at, at + c))
        at += c
    return tuple(grads)


def _v_slice_rows(B, g, node, ps):
    start, _stop, total = node.ctx
    return (B.embed_rows(g, start, total),)


def _v_slice_cols(B, g, node, ps):
    start, _stop, total = node.ctx
    return (B.embed_cols(g, start, total),)


def _v_embed_rows(B, g, node, ps):
    start, count, _total = node.ctx
    return (B.slice_rows(g, start, start + count),)


def _v_embed_cols(B, g, node, ps):
    start, width, _total = node.ctx
    return (B.slice_cols(g, start, start + width),)


def _v_take_rows(B, g, node, ps):
    idx, total = node.ctx
    return (B.scatter_rows(g, idx, total),)


def _v_scatter_rows(B, g, node, ps):
    idx, _total = node.ctx
    return (B.take_rows(g, idx),)


def _v_repeat_rows(B, g, node, ps):
    k, orig = node.ctx
    folded = B.reshape(g, (orig[0], k) + orig[1:])
    return (B.sum_axis(folded, 1),)


def _v_gather_last(B, g, node, ps):
    idx, width = node.ctx
    return (B.scatter_last(g, idx, width),)


def _v_scatter_last(B, g, node, ps):
    idx, _width = node.ctx
    return (B.gather_last(g, idx),)


def _v_relu(B, g, node, ps):
    mask = (ps[0] if not B.is_graph else ps[0].value) > 0.0
    return (B.mul(g, B.constant(mask.astype(np.float64))),)


def _v_elu(B, g, node, ps):
    x = ps[0] if not B.is_graph else ps[0].value
    pos = (x > 0.0).astype(np.float64)
    # d elu = 1 for x>0, elu(x)+1 otherwise
    slope_neg = B.mul(B.sadd(node if B.is_graph else node.value, 1.0),
                      B.constant(1.0 - pos))
    return (B.mul(g, B.add(B.constant(pos), slope_neg)),)


def _v_sigmoid(B, g, node, ps):
    out = node if B.is_graph else node.value
    return (B.mul(g, B.mul(out, B.rsub(1.0, out))),)


def _v_tanh(B, g, node, ps):
    out = node if B.is_graph else node.value
    return (B.mul(g, B.rsub(1.0, B.square(out))),)


def _v_absolute(B, g, node, ps):
    x = ps[0] if not B.is_graph else ps[0].value
    return (B.mul(g, B.constant(np.sign(x))),)


def _v_square(B, g, node, ps):
    return (B.smul(B.mul(g, ps[0]), 2.0),)


def _v_sqrt(B, g, node, ps):
    out = node if B.is_graph else node.value
    return (B.smul(B.mul(g, B.reciprocal(out)), 0.5),)


def _v_reciprocal(B, g, node, ps):
    out = node if B.is_graph else node.value
    return (B.neg(B.mul(g, B.square(out))),)


def _v_softmax_last(B, g, node, ps):
    s = node if B.is_graph else node.value
    gs = B.mul(g, s)
    dot = B.sum_axis(gs, -1, keepdims=True)
    n = node.shape[-1]
    full = _bcast_keepdims(B, dot, n)
    return (B.mul(s, B.sub(g, full)),)


def _bcast_keepdims(B, x, n):
    # x has a trailing axis of size 1; tile it back to size n
    shape = x.shape
    squeezed = B.reshape(x, tuple(shape[:-1]))
    return B.expand_axis(squeezed, len(shape) - 1, n)


def _v_sum_all(B, g, node, ps):
    return (B.bcast_full(g, node.ctx),)


def _v_mean_all(B, g, node, ps):
    size = int(np.prod(node.ctx)) if node.ctx else 1
    return (B.smul(B.bcast_full(g, node.ctx), 1.0 / size),)


def _v_sum_axis(B, g, node, ps):
    axis, keepdims, orig = node.ctx
    n = orig[axis]
    if keepdims:
        g = B.reshape(g, orig[:axis] + orig[axis + 1:])
    return (B.expand_axis(g, axis, n),)


def _v_expand_axis(B, g, node, ps):
    axis, _n = node.ctx
    return (B.sum_axis(g, axis),)


def _v_bcast_full(B, g, node, ps):
    return (B.sum_all(g),)


def _v_bias_add(B, g, node, ps):
    a = ps[0]
    nd = (a.value if B.is_graph else a).ndim
    gb = g
    for _ in range(nd - 1):
        gb = B.sum_axis(gb, 0)
    return (g, gb)


def _v_rowscale(B, g, node, ps):
    a, s = ps
    ga = B.rowscale(g, s)
    gs = B.sum_axis(B.mul(g, a), 0)
    nd = (a.value if B.is_graph else a).ndim
    for _ in range(nd - 2):
        gs = B.sum_axis(gs, 0)
    return (ga, gs)


def _v_affine(B, g, node, ps):
    x, w, _b = ps
    gx = B.matmul(g, B.transpose(w))
    gw = B.matmul(B.transpose(x), g)
    gb = B.sum_axis(g, 0)
    return (gx, gw, gb)


def _gru_backward(B, g, x, h, wx, wh, r, z, n, ghn):
    """Shared GRU adjoint arithmetic; operands are arrays or nodes."""
    one_m_z = B.rsub(1.0, z)
    dz = B.mul(g, B.sub(h, n))
    dn = B.mul(g, one_m_z)
    dh = B.mul(g, z)
    dpre_n = B.mul(dn, B.rsub(1.0, B.square(n)))
    dr = B.mul(dpre_n, ghn)
    dghn = B.mul(dpre_n, r)
    dpre_r = B.mul(dr, B.mul(r, B.rsub(1.0, r)))
    dpre_z = B.mul(dz, B.mul(z, B.rsub(1.0, z)))
    dgx = B.concat_last([dpre_r, dpre_z, dpre_n])
    dgh = B.concat_last([dpre_r, dpre_z, dghn])
    dx = B.matmul(dgx, B.transpose(wx))
    dwx = B.matmul(B.transpose(x), dgx)
    dbx = B.sum_axis(dgx, 0)
    dh = B.add(dh, B.matmul(dgh, B.transpose(wh)))
    dwh = B.matmul(B.transpose(h), dgh)
    dbh = B.sum_axis(dgh, 0)
    return (dx, dh, dwx, dwh, dbx, dbh)


def _v_gru_cell(B, g, node, ps):
    x, h, wx, wh, bx, bh = ps
    if not B.is_graph:
        r, z, n, ghn = node.ctx
        return _gru_backward(B, g, x, h, wx, wh, r, z, n, ghn)
    # differentiable path: rebuild the gates from the parents with tape ops
    gparent = node.parents
    x_n, h_n, wx_n, wh_n, bx_n, bh_n = gparent
    hid = h_n.shape[-1]
    gx = B.affine(x_n, wx_n, bx_n)
    gh = B.affine(h_n, wh_n, bh_n)
    r = B.sigmoid(B.add(B.slice_cols(gx, 0, hid), B.slice_cols(gh, 0, hid)))
    z = B.sigmoid(B.add(B.slice_cols(gx, hid, 2 * hid),
                        B.slice_cols(gh, hid, 2 * hid)))
    ghn = B.slice_cols(gh, 2 * hid, 3 * hid)
    n = B.tanh(B.add(B.slice_cols(gx, 2 * hid, 3 * hid), B.mul(r, ghn)))
    return _gru_backward(B, g, x_n, h_n, wx_n, wh_n, r, z, n, ghn)


def _v_col_norm(B, g, node, ps):
    out = node if B.is_graph else node.value
    scale = B.mul(g, B.reciprocal(out))
    return (B.rowscale(ps[0], scale),)


def _v_diag_part(B, g, node, ps):
    return (B.embed_diag(g),)


def _v_embed_diag(B, g, node, ps):
    return (B.diag_part(g),)


_VJP = {
    "add": _v_add, "sub": _v_sub, "mul": _v_mul, "neg": _v_neg,
    "smul": _v_smul, "sadd": _v_sadd, "rsub": _v_rsub,
    "matmul": _v_matmul, "bmm": _v_bmm,
    "transpose": _v_transpose, "swap_last": _v_swap_last,
    "reshape": _v_reshape,
    "concat_last": _v_concat_last, "concat_rows": _v_concat_rows,
    "slice_rows": _v_slice_rows, "slice_cols": _v_slice_cols,
    "embed_rows": _v_embed_rows, "embed_cols": _v_embed_cols,
    "take_rows": _v_take_rows, "scatter_rows": _v_scatter_rows,
    "repeat_rows": _v_repeat_rows,
    "gather_last": _v_gather_last, "scatter_last": _v_scatter_last,
    "relu": _v_relu, "elu": _v_elu, "sigmoid": _v_sigmoid, "tanh": _v_tanh,
    "absolute": _v_absolute, "square": _v_square, "sqrt": _v_sqrt,
    "reciprocal": _v_reciprocal, "softmax_last": _v_softmax_last,
    "sum_all": _v_sum_all, "mean_all": _v_mean_all, "sum_axis": _v_sum_axis,
    "expand_axis": _v_expand_axis, "bcast_full": _v_bcast_full,
    "bias_add": _v_bias_add, "rowscale": _v_rowscale, "affine": _v_affine,
    "gru_cell": _v_gru_cell, "col_norm": _v_col_norm,
    "diag_part": _v_diag_part, "embed_diag": _v_embed_diag,
}


def primitive_ops():
    """Names of every differentiable primitive plus the structural ops."""
    return frozenset(_VJP) | {"leaf", "constant", "stop_grad"}


# replay kernels: recompute a node's value from parent values + ctx
_REPLAY = {
    "add": lambda n, p: p[0] + p[1],
    "sub": lambda n, p: p[0] - p[1],
    "mul": lambda n, p: p[0] * p[1],
    "neg": lambda n, p: -p[0],
    "smul": lambda n, p: p[0] * n.ctx,
    "sadd": lambda n, p: p[0] + n.ctx,
    "rsub": lambda n, p: n.ctx - p[0],
    "matmul": lambda n, p: p[0] @ p[1],
    "bmm": lambda n, p: np.matmul(p[0], p[1]),
    "transpose": lambda n, p: EAGER.transpose(p[0]),
    "swap_last": lambda n, p: EAGER.swap_last(p[0]),
    "reshape": lambda n, p: np.reshape(p[0], n.value.shape),
    "concat_last": lambda n, p: np.concatenate(p, axis=-1),
    "concat_rows": lambda n, p: np.concatenate(p, axis=0),
    "slice_rows": lambda n, p: p[0][n.ctx[0]:n.ctx[1]].copy(),
    "slice_cols": lambda n, p: EAGER.slice_cols(p[0], n.ctx[0], n.ctx[1]),
    "embed_rows": lambda n, p: EAGER.embed_rows(p[0], n.ctx[0], n.ctx[2]),
    "embed_cols": lambda n, p: EAGER.embed_cols(p[0], n.ctx[0], n.ctx[2]),
    "take_rows": lambda n, p: p[0][n.ctx[0]],
    "scatter_rows": lambda n, p: EAGER.scatter_rows(p[0], n.ctx[0], n.ctx[1]),
    "repeat_rows": lambda n, p: np.repeat(p[0], n.ctx[0], axis=0),
    "gather_last": lambda n, p: EAGER.gather_last(p[0], n.ctx[0]),
    "scatter_last": lambda n, p: EAGER.scatter_last(p[0], n.ctx[0], n.ctx[1]),
    "relu": lambda n, p: np.maximum(p[0], 0.0),
    "elu": lambda n, p: k_elu(p[0]),
    "sigmoid": lambda n, p: EAGER.sigmoid(p[0]),
    "tanh": lambda n, p: np.tanh(p[0]),
    "absolute": lambda n, p: np.abs(p[0]),
    "square": lambda n, p: np.square(p[0]),
    "sqrt": lambda n, p: np.sqrt(p[0]),
    "reciprocal": lambda n, p: 1.0 / p[0],
    "softmax_last": lambda n, p: k_softmax_last(p[0]),
    "sum_all": lambda n, p: EAGER.sum_all(p[0]),
    "mean_all": lambda n, p: EAGER.mean_all(p[0]),
    "sum_axis": lambda n, p: p[0].sum(axis=n.ctx[0], keepdims=n.ctx[1]),
    "expand_axis": lambda n, p: EAGER.expand_axis(p[0], n.ctx[0], n.ctx[1]),
    "bcast_full": lambda n, p: EAGER.bcast_full(p[0], n.ctx),
    "bias_add": lambda n, p: p[0] + p[1],
    "rowscale": lambda n, p: p[0] * p[1],
    "affine": lambda n, p: k_affine(p[0], p[1], p[2]),
    "gru_cell": lambda n, p: k_gru_gates(*p)[0],
    "col_norm": lambda n, p: EAGER.col_norm(p[0]),
    "diag_part": lambda n, p: EAGER.diag_part(p[0]),
    "embed_diag": lambda n, p: np.diag(p[0]),
    "stop_grad": lambda n, p: p[0],
}


def evaluate_at(build, params, displacement, step, differentiable_displacement=False,
                graph=None):
    """Evaluate a loss at displaced parameters theta - step * displacement.

    ``build(graph, leaves)`` must construct and return a scalar node from the
    given parameter nodes.  ``displacement`` maps a subset of parameter names
    to ndarrays (or, with ``differentiable_displacement``, to Nodes already
    recorded on ``graph``) and is combined without mutating ``params``.

    Returns ``(loss_value, graph, loss_node)``.
    """
    g = graph if graph is not None else Graph()
    unknown = set(displacement) - set(params)
    if unknown:
        raise GraphError(f"displacement names not in params: {sorted(unknown)}")
    leaves = {}
    for name, value in params.items():
        leaf = g.params[name] if name in g.params else g.leaf(name, value)
        d = displacement.get(name)
        if d is None:
            leaves[name] = leaf
            continue
        if isinstance(d, Node):
            if d.graph is not g:
                raise GraphError(f"displacement node for '{name}' lives on a "
                                 f"different graph")
            dn = d if differentiable_displacement else g.stop_grad(d)
        else:
            d = np.asarray(d, dtype=np.float64)
            if d.shape != np.shape(value):
                raise GraphError(f"displacement shape {d.shape} does not match "
                                 f"parameter '{name}' {np.shape(value)}")
            dn = g.constant(d)
        leaves[name] = g.sub(leaf, g.smul(dn, float(step)))
    loss = build(g, leaves)
    return float(loss.value), g, loss
