"""Dense float64 tensors on a recording tape, with reverse-mode autodiff.

The backward pass is itself assembled from the same primitive ops it
differentiates, so gradients of gradients (double backprop) work to any
order. This is what makes the second-order meta-gradient a plain
composition of two `grad` calls instead of a hand-derived formula.

Conventions:
  * everything is float64, C-order; scalars are 0-d arrays
  * relu/clip/maximum capture their masks as constants, i.e. their second
    derivative is taken to be zero everywhere (subgradient convention)
  * a Tape is single-owner; independent tapes may run concurrently
"""

from __future__ import annotations

import numpy as np

BCE_EPS = 1e-7


class ShapeMismatch(ValueError):
    pass


class NonFiniteValue(FloatingPointError):
    pass


def as_tensor(x) -> np.ndarray:
    """Coerce to a C-contiguous float64 array (0-d allowed)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim and not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    return arr


class Parameter:
    """Named tensor with a trainable flag. Frozen parameters are never
    touched by an optimizer step (sgd_step refuses them)."""

    def __init__(self, name: str, value, trainable: bool = True):
        self.name = name
        self.value = as_tensor(value)
        self.trainable = trainable

    def __repr__(self):
        flag = "" if self.trainable else ", frozen"
        return f"Parameter({self.name!r}, shape={self.value.shape}{flag})"


class Node:
    """One tape entry: an op, its input nodes, and the computed value."""

    __slots__ = ("tape", "nid", "op", "inputs", "value", "aux")

    def __init__(self, tape, nid, op, inputs, value, aux):
        self.tape = tape
        self.nid = nid
        self.op = op
        self.inputs = inputs
        self.value = value
        self.aux = aux

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(#{self.nid} {self.op} shape={self.value.shape})"


class Tape:
    """Ordered, replayable record of primitive ops.

    Node ids are creation-ordered, so every input id precedes its consumer
    and a reverse walk is a valid reverse-topological order.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._leaves: dict[int, Node] = {}  # id(Parameter) -> leaf node

    def _record(self, op, inputs, value, aux=None) -> Node:
        node = Node(self, len(self.nodes), op, tuple(inputs), value, aux)
        self.nodes.append(node)
        return node

    def constant(self, values) -> Node:
        v = as_tensor(values)
        return self._record("const", (), v, None)

    def leaf(self, param: Parameter) -> Node:
        """Bring a Parameter onto the tape (cached per parameter)."""
        node = self._leaves.get(id(param))
        if node is None:
            node = self._record("leaf", (), param.value.copy(), param)
            self._leaves[id(param)] = node
        return node

    def leaf_for(self, param: Parameter) -> Node | None:
        return self._leaves.get(id(param))

    def replay(self) -> float:
        """Re-execute every record from its inputs; returns the max abs
        difference versus the stored values (0.0 means bitwise identical)."""
        replayed: dict[int, np.ndarray] = {}
        worst = 0.0
        for node in self.nodes:
            if node.op == "const":
                val = node.value
            elif node.op == "leaf":
                val = node.value
            else:
                ins = [replayed[i.nid] for i in node.inputs]
                val = _FORWARD[node.op](ins, node.aux)
            replayed[node.nid] = val
            if node.op not in ("const", "leaf"):
                diff = np.abs(val - node.value)
                if diff.size:
                    worst = max(worst, float(diff.max()))
                if not np.array_equal(val, node.value):
                    worst = max(worst, np.finfo(float).tiny)
        return worst


# ---------------------------------------------------------------------------
# forward kernels


def _need_same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not match")


def _fw_add(v, aux):
    _need_same_shape("add", v[0], v[1])
    return v[0] + v[1]


def _fw_sub(v, aux):
    _need_same_shape("sub", v[0], v[1])
    return v[0] - v[1]


def _fw_mul(v, aux):
    _need_same_shape("mul", v[0], v[1])
    return v[0] * v[1]


def _fw_div(v, aux):
    _need_same_shape("div", v[0], v[1])
    return v[0] / v[1]


def _fw_matmul(v, aux):
    a, b = v
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatch(f"matmul: expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: inner dims of {a.shape} and {b.shape} differ")
    return a @ b


def _fw_transpose(v, aux):
    if v[0].ndim != 2:
        raise ShapeMismatch(f"transpose: expects 2-d operand, got {v[0].shape}")
    return np.ascontiguousarray(v[0].T)


def _fw_reshape(v, aux):
    out = v[0].reshape(aux)
    return out if not out.ndim else np.ascontiguousarray(out)


def _fw_gather_row(v, aux):
    m = v[0]
    if m.ndim != 2:
        raise ShapeMismatch(f"gather_row: expects a matrix, got {m.shape}")
    i = aux
    if not 0 <= i < m.shape[0]:
        raise IndexError(f"gather_row: row {i} out of range for {m.shape[0]} rows")
    return m[i].copy()


def _fw_gather_rows(v, aux):
    m = v[0]
    if m.ndim != 2:
        raise ShapeMismatch(f"gather_rows: expects a matrix, got {m.shape}")
    idx = aux
    if idx.size and (idx.min() < 0 or idx.max() >= m.shape[0]):
        raise IndexError(f"gather_rows: index out of range for {m.shape[0]} rows")
    return m[idx].copy()


def _fw_scatter_rows(v, aux):
    g = v[0]
    idx, n_rows = aux
    out = np.zeros((n_rows, g.shape[1]), dtype=np.float64)
    np.add.at(out, idx, g)
    return out


def _fw_concat(v, aux):
    axis = aux
    return np.ascontiguousarray(np.concatenate(v, axis=axis))


def _fw_slice_cols(v, aux):
    a, b = aux
    return v[0][:, a:b].copy()


def _fw_slice_rows(v, aux):
    a, b = aux
    return v[0][a:b].copy()


def _fw_sum(v, aux):
    return np.asarray(v[0].sum())


def _fw_mean(v, aux):
    return np.asarray(v[0].mean())


def _fw_rowsum(v, aux):
    if v[0].ndim != 2:
        raise ShapeMismatch(f"rowsum: expects a matrix, got {v[0].shape}")
    return v[0].sum(axis=1)


def _fw_colsum(v, aux):
    if v[0].ndim != 2:
        raise ShapeMismatch(f"colsum: expects a matrix, got {v[0].shape}")
    return v[0].sum(axis=0)


def _fw_broadcast_row(v, aux):
    if v[0].ndim != 1:
        raise ShapeMismatch(f"broadcast_row: expects a vector, got {v[0].shape}")
    return np.tile(v[0], (aux, 1))


def _fw_broadcast_col(v, aux):
    if v[0].ndim != 1:
        raise ShapeMismatch(f"broadcast_col: expects a vector, got {v[0].shape}")
    return np.repeat(v[0][:, None], aux, axis=1)


def _fw_broadcast_scalar(v, aux):
    if v[0].shape != ():
        raise ShapeMismatch(f"broadcast_scalar: expects a scalar, got {v[0].shape}")
    return np.full(aux, float(v[0]))


def _fw_avg_pool_rows(v, aux):
    if v[0].ndim != 2:
        raise ShapeMismatch(f"avg_pool_rows: expects a matrix, got {v[0].shape}")
    return v[0].mean(axis=0)


def _fw_sigmoid(v, aux):
    # tanh form is overflow-free for any float64 input
    return 0.5 * (1.0 + np.tanh(0.5 * v[0]))


def _fw_tanh(v, aux):
    return np.tanh(v[0])


def _fw_relu(v, aux):
    return np.maximum(v[0], 0.0)


def _fw_maximum(v, aux):
    _need_same_shape("maximum", v[0], v[1])
    return np.maximum(v[0], v[1])


def _fw_log(v, aux):
    return np.log(v[0])


def _fw_clip(v, aux):
    lo, hi = aux
    return np.clip(v[0], lo, hi)


def _fw_scale(v, aux):
    return v[0] * aux


def _fw_square(v, aux):
    return v[0] * v[0]


_FORWARD = {
    "add": _fw_add,
    "sub": _fw_sub,
    "mul": _fw_mul,
    "div": _fw_div,
    "matmul": _fw_matmul,
    "transpose": _fw_transpose,
    "reshape": _fw_reshape,
    "gather_row": _fw_gather_row,
    "gather_rows": _fw_gather_rows,
    "scatter_rows": _fw_scatter_rows,
    "concat": _fw_concat,
    "slice_cols": _fw_slice_cols,
    "slice_rows": _fw_slice_rows,
    "sum": _fw_sum,
    "mean": _fw_mean,
    "rowsum": _fw_rowsum,
    "colsum": _fw_colsum,
    "broadcast_row": _fw_broadcast_row,
    "broadcast_col": _fw_broadcast_col,
    "broadcast_scalar": _fw_broadcast_scalar,
    "avg_pool_rows": _fw_avg_pool_rows,
    "sigmoid": _fw_sigmoid,
    "tanh": _fw_tanh,
    "relu": _fw_relu,
    "maximum": _fw_maximum,
    "log": _fw_log,
    "clip": _fw_clip,
    "scale": _fw_scale,
    "elementwise_square": _fw_square,
}


def _apply(tape: Tape, op: str, inputs, aux=None) -> Node:
    vals = [n.value for n in inputs]
    out = as_tensor(_FORWARD[op](vals, aux))
    if not np.isfinite(out).all():
        raise NonFiniteValue(f"{op} produced a non-finite value")
    return tape._record(op, inputs, out, aux)


def primitive_forward(tape: Tape, op_kind: str, inputs, aux=None) -> Node:
    """Apply one primitive by name and append its tape record."""
    if op_kind not in _FORWARD:
        raise ValueError(f"unknown op kind {op_kind!r}")
    return _apply(tape, op_kind, inputs, aux)


# functional surface -- thin wrappers so model code reads naturally


def _tape_of(*nodes):
    return nodes[0].tape


def add(a, b):
    return _apply(_tape_of(a), "add", (a, b))


def sub(a, b):
    return _apply(_tape_of(a), "sub", (a, b))


def mul(a, b):
    return _apply(_tape_of(a), "mul", (a, b))


def div(a, b):
    return _apply(_tape_of(a), "div", (a, b))


def matmul(a, b):
    return _apply(_tape_of(a), "matmul", (a, b))


def transpose(a):
    return _apply(_tape_of(a), "transpose", (a,))


def reshape(a, shape):
    return _apply(_tape_of(a), "reshape", (a,), tuple(shape))


def gather_row(m, i):
    return _apply(_tape_of(m), "gather_row", (m,), int(i))


def gather_rows(m, indices):
    idx = np.ascontiguousarray(indices, dtype=np.int64)
    return _apply(_tape_of(m), "gather_rows", (m,), idx)


def scatter_rows(g, indices, n_rows):
    idx = np.ascontiguousarray(indices, dtype=np.int64)
    return _apply(_tape_of(g), "scatter_rows", (g,), (idx, int(n_rows)))


def concat(nodes, axis=0):
    return _apply(_tape_of(*nodes), "concat", tuple(nodes), int(axis))


def slice_cols(a, start, stop):
    return _apply(_tape_of(a), "slice_cols", (a,), (int(start), int(stop)))


def slice_rows(a, start, stop):
    return _apply(_tape_of(a), "slice_rows", (a,), (int(start), int(stop)))


def tsum(a):
    return _apply(_tape_of(a), "sum", (a,))


def tmean(a):
    return _apply(_tape_of(a), "mean", (a,))


def rowsum(a):
    return _apply(_tape_of(a), "rowsum", (a,))


def colsum(a):
    return _apply(_tape_of(a), "colsum", (a,))


def broadcast_row(v, n):
    return _apply(_tape_of(v), "broadcast_row", (v,), int(n))


def broadcast_col(v, k):
    return _apply(_tape_of(v), "broadcast_col", (v,), int(k))


def broadcast_scalar(s, shape):
    return _apply(_tape_of(s), "broadcast_scalar", (s,), tuple(shape))


def avg_pool_rows(m):
    return _apply(_tape_of(m), "avg_pool_rows", (m,))


def sigmoid(a):
    return _apply(_tape_of(a), "sigmoid", (a,))


def tanh(a):
    return _apply(_tape_of(a), "tanh", (a,))


def relu(a):
    return _apply(_tape_of(a), "relu", (a,))


def maximum(a, b):
    return _apply(_tape_of(a), "maximum", (a, b))


def log(a):
    return _apply(_tape_of(a), "log", (a,))


def clip(a, lo, hi):
    return _apply(_tape_of(a), "clip", (a,), (float(lo), float(hi)))


def scale(a, c):
    return _apply(_tape_of(a), "scale", (a,), float(c))


def square(a):
    return _apply(_tape_of(a), "elementwise_square", (a,))


# ---------------------------------------------------------------------------
# VJP rules. Each rule returns [(input_index, contribution_node), ...] and is
# written purely in terms of the primitives above, which is what makes the
# backward pass differentiable again.


def _vjp_add(node, g):
    return [(0, g), (1, g)]


def _vjp_sub(node, g):
    return [(0, g), (1, scale(g, -1.0))]


def _vjp_mul(node, g):
    a, b = node.inputs
    return [(0, mul(g, b)), (1, mul(g, a))]


def _vjp_div(node, g):
    a, b = node.inputs
    da = div(g, b)
    db = scale(div(mul(g, a), mul(b, b)), -1.0)
    return [(0, da), (1, db)]


def _vjp_matmul(node, g):
    a, b = node.inputs
    return [(0, matmul(g, transpose(b))), (1, matmul(transpose(a), g))]


def _vjp_transpose(node, g):
    return [(0, transpose(g))]


def _vjp_reshape(node, g):
    return [(0, reshape(g, node.inputs[0].shape))]


def _vjp_gather_row(node, g):
    m = node.inputs[0]
    g2 = reshape(g, (1, g.shape[0]))
    return [(0, scatter_rows(g2, np.array([node.aux]), m.shape[0]))]


def _vjp_gather_rows(node, g):
    m = node.inputs[0]
    return [(0, scatter_rows(g, node.aux, m.shape[0]))]


def _vjp_scatter_rows(node, g):
    idx, _ = node.aux
    return [(0, gather_rows(g, idx))]


def _vjp_concat(node, g):
    axis = node.aux
    out = []
    off = 0
    slicer = slice_rows if axis == 0 else slice_cols
    for i, inp in enumerate(node.inputs):
        extent = inp.shape[axis]
        out.append((i, slicer(g, off, off + extent)))
        off += extent
    return out


def _zeros_like_block(tape, rows, cols):
    return tape.constant(np.zeros((rows, cols)))


def _vjp_slice_cols(node, g):
    x = node.inputs[0]
    a, b = node.aux
    parts = []
    if a > 0:
        parts.append(_zeros_like_block(node.tape, x.shape[0], a))
    parts.append(g)
    if b < x.shape[1]:
        parts.append(_zeros_like_block(node.tape, x.shape[0], x.shape[1] - b))
    dx = parts[0] if len(parts) == 1 else concat(parts, axis=1)
    return [(0, dx)]


def _vjp_slice_rows(node, g):
    x = node.inputs[0]
    a, b = node.aux
    parts = []
    if a > 0:
        parts.append(_zeros_like_block(node.tape, a, x.shape[1]))
    parts.append(g)
    if b < x.shape[0]:
        parts.append(_zeros_like_block(node.tape, x.shape[0] - b, x.shape[1]))
    dx = parts[0] if len(parts) == 1 else concat(parts, axis=0)
    return [(0, dx)]


def _vjp_sum(node, g):
    return [(0, broadcast_scalar(g, node.inputs[0].shape))]


def _vjp_mean(node, g):
    x = node.inputs[0]
    n = max(x.value.size, 1)
    return [(0, broadcast_scalar(scale(g, 1.0 / n), x.shape))]


def _vjp_rowsum(node, g):
    return [(0, broadcast_col(g, node.inputs[0].shape[1]))]


def _vjp_colsum(node, g):
    return [(0, broadcast_row(g, node.inputs[0].shape[0]))]


def _vjp_broadcast_row(node, g):
    return [(0, colsum(g))]


def _vjp_broadcast_col(node, g):
    return [(0, rowsum(g))]


def _vjp_broadcast_scalar(node, g):
    return [(0, tsum(g))]


def _vjp_avg_pool_rows(node, g):
    n = node.inputs[0].shape[0]
    return [(0, broadcast_row(scale(g, 1.0 / n), n))]


def _vjp_sigmoid(node, g):
    y = node
    return [(0, mul(g, sub(y, square(y))))]


def _vjp_tanh(node, g):
    return [(0, sub(g, mul(g, square(node))))]


def _vjp_relu(node, g):
    mask = node.tape.constant((node.inputs[0].value > 0.0).astype(np.float64))
    return [(0, mul(g, mask))]


def _vjp_maximum(node, g):
    a, b = node.inputs
    mask_a = (a.value >= b.value).astype(np.float64)
    ca = node.tape.constant(mask_a)
    cb = node.tape.constant(1.0 - mask_a)
    return [(0, mul(g, ca)), (1, mul(g, cb))]


def _vjp_log(node, g):
    return [(0, div(g, node.inputs[0]))]


def _vjp_clip(node, g):
    lo, hi = node.aux
    x = node.inputs[0].value
    mask = node.tape.constant(((x > lo) & (x < hi)).astype(np.float64))
    return [(0, mul(g, mask))]


def _vjp_scale(node, g):
    return [(0, scale(g, node.aux))]


def _vjp_square(node, g):
    return [(0, scale(mul(g, node.inputs[0]), 2.0))]


_VJP = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "div": _vjp_div,
    "matmul": _vjp_matmul,
    "transpose": _vjp_transpose,
    "reshape": _vjp_reshape,
    "gather_row": _vjp_gather_row,
    "gather_rows": _vjp_gather_rows,
    "scatter_rows": _vjp_scatter_rows,
    "concat": _vjp_concat,
    "slice_cols": _vjp_slice_cols,
    "slice_rows": _vjp_slice_rows,
    "sum": _vjp_sum,
    "mean": _vjp_mean,
    "rowsum": _vjp_rowsum,
    "colsum": _vjp_colsum,
    "broadcast_row": _vjp_broadcast_row,
    "broadcast_col": _vjp_broadcast_col,
    "broadcast_scalar": _vjp_broadcast_scalar,
    "avg_pool_rows": _vjp_avg_pool_rows,
    "sigmoid": _vjp_sigmoid,
    "tanh": _vjp_tanh,
    "relu": _vjp_relu,
    "maximum": _vjp_maximum,
    "log": _vjp_log,
    "clip": _vjp_clip,
    "scale": _vjp_scale,
    "elementwise_square": _vjp_square,
}


# ---------------------------------------------------------------------------
# losses and reverse pass


def bce_loss(p, y):
    """Mean binary cross-entropy of predictions `p` (a node) against labels
    `y` (0/1 array-like). Probabilities are clipped to [1e-7, 1 - 1e-7]
    before the logs, so the loss is finite for any p in [0, 1]."""
    tape = p.tape
    y_arr = np.asarray(y, dtype=np.float64)
    if y_arr.shape != p.shape:
        y_arr = y_arr.reshape(p.shape)
    if not np.isin(y_arr, (0.0, 1.0)).all():
        raise ValueError("bce_loss: labels must be 0 or 1")
    y_c = tape.constant(y_arr)
    one_minus_y = tape.constant(1.0 - y_arr)
    ones = tape.constant(np.ones(p.shape))
    p_c = clip(p, BCE_EPS, 1.0 - BCE_EPS)
    pos = mul(y_c, log(p_c))
    neg = mul(one_minus_y, log(sub(ones, p_c)))
    return tmean(scale(add(pos, neg), -1.0))


def _resolve_target(tape: Tape, target) -> Node | None:
    if isinstance(target, Node):
        return target
    if isinstance(target, Parameter):
        return tape.leaf_for(target)
    raise TypeError(f"grad target must be a Node or Parameter, got {type(target)!r}")


def grad(loss: Node, wrt, create_graph: bool = False) -> list[Node]:
    """Reverse-mode gradient of a scalar loss node.

    `wrt` is a list of Parameters or Nodes. A target that never entered the
    tape gets a zero tensor of its shape. With create_graph=True the
    returned nodes stay connected, so they can be differentiated again;
    otherwise they are detached constants.
    """
    if loss.shape != ():
        raise ValueError(f"grad: loss must be scalar, got shape {loss.shape}")
    tape = loss.tape
    single = isinstance(wrt, (Node, Parameter))
    targets = [wrt] if single else list(wrt)
    resolved = [_resolve_target(tape, t) for t in targets]

    # restrict the reverse walk to ancestors of the loss
    ancestors = set()
    stack = [loss]
    while stack:
        node = stack.pop()
        if node.nid in ancestors:
            continue
        ancestors.add(node.nid)
        stack.extend(node.inputs)

    adjoint: dict[int, Node] = {loss.nid: tape.constant(np.ones(()))}
    for nid in sorted(ancestors, reverse=True):
        node = tape.nodes[nid]
        g = adjoint.get(nid)
        if g is None or node.op in ("const", "leaf"):
            continue
        for idx, contrib in _VJP[node.op](node, g):
            inp = node.inputs[idx]
            cur = adjoint.get(inp.nid)
            adjoint[inp.nid] = contrib if cur is None else add(cur, contrib)

    out = []
    for target, node in zip(targets, resolved):
        if node is None:
            shape = target.value.shape if isinstance(target, Parameter) else target.shape
            out.append(tape.constant(np.zeros(shape)))
            continue
        g = adjoint.get(node.nid)
        if g is None:
            g = tape.constant(np.zeros(node.shape))
        elif not create_graph:
            g = tape.constant(g.value)
        out.append(g)
    return out[0] if single else out


def hvp(loss: Node, x, v) -> Node:
    """Hessian-vector product (d2 loss / dx2) @ v by double backprop."""
    tape = loss.tape
    gx = grad(loss, x, create_graph=True)
    v_arr = as_tensor(v)
    if v_arr.shape != gx.shape:
        raise ShapeMismatch(f"hvp: v has shape {v_arr.shape}, expected {gx.shape}")
    inner = tsum(mul(gx, tape.constant(v_arr)))
    return grad(inner, x)


def sgd_step(params, grads, lr: float) -> None:
    """In-place param -= lr * grad over matching (param, grad) pairs."""
    if lr <= 0:
        raise ValueError(f"sgd_step: lr must be positive, got {lr}")
    if isinstance(params, Parameter):
        params, grads = [params], [grads]
    for p, g in zip(params, grads):
        if not p.trainable:
            raise ValueError(f"sgd_step: parameter {p.name!r} is frozen")
        g_arr = g.value if isinstance(g, Node) else as_tensor(g)
        if g_arr.shape != p.value.shape:
            raise ShapeMismatch(
                f"sgd_step: grad shape {g_arr.shape} does not match "
                f"parameter {p.name!r} shape {p.value.shape}"
            )
        p.value -= lr * g_arr
