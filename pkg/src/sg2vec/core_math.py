"""Dense reverse-mode differentiation over float64 matrices.

Every value flowing through the model is a :class:`Tensor` wrapping a 2-D
numpy array. Operations record their parents and a backward closure;
:func:`backward` orders the recorded graph and replays it in reverse.

The primitive set is deliberately small. Two of the primitives
(:func:`relational_conv` and :func:`lstm_sequence`) are fused for speed;
both are checked against finite differences in the test suite.
"""

import math

import numba
import numpy as np
import scipy.sparse as sp
from scipy.special import expit


class DimensionError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "name", "requires_grad")

    def __init__(self, value, parents=(), backward_fn=None, name=None, requires_grad=False):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.value.shape})"


def as_matrix(x):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise DimensionError(f"expected a 2-D array, got shape {arr.shape}")
    return arr


def param(value, name=None):
    """Trainable leaf. ``value`` is used in place (not copied)."""
    if not isinstance(value, np.ndarray) or value.dtype != np.float64:
        value = as_matrix(value)
    return Tensor(value, name=name, requires_grad=True)


def constant(value):
    return Tensor(as_matrix(value))


def _node(value, parents, backward_fn):
    out = Tensor(value, parents)
    if out.requires_grad:
        out.backward_fn = backward_fn
    else:
        out.parents = ()
    return out


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
        if t.grad.shape != t.value.shape:
            t.grad = _unbroadcast(t.grad, t.value.shape)
    else:
        if g.shape != t.value.shape:
            g = _unbroadcast(g, t.value.shape)
        t.grad += g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ----------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------

@numba.njit(cache=True)
def _row_matmul_kernel(a, b, out):
    n, m = a.shape
    for i in range(n):
        for k in range(m):
            aik = a[i, k]
            for j in range(b.shape[1]):
                out[i, j] += aik * b[k, j]


def row_matmul(a, b):
    """Dense product whose rows depend only on the matching row of ``a``.

    BLAS picks blocking by matrix size, so a row of ``A @ B`` can change in
    the last bit when other rows are added. Forward passes use this fixed
    order product instead so a frame's output never depends on the batch it
    was stacked into.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    out = np.zeros((a.shape[0], b.shape[1]))
    _row_matmul_kernel(a, b, out)
    return out


def matmul(a, b):
    if a.value.shape[1] != b.value.shape[0]:
        raise DimensionError(
            f"cannot multiply {a.value.shape} by {b.value.shape}")

    def back(g):
        if a.requires_grad:
            _accumulate(a, g @ b.value.T)
        if b.requires_grad:
            _accumulate(b, a.value.T @ g)

    return _node(row_matmul(a.value, b.value), (a, b), back)


def linear(x, w, b=None):
    """``x @ w (+ b)``; ``b`` is a 1 x cols row or absent."""
    if x.value.shape[1] != w.value.shape[0]:
        raise DimensionError(
            f"linear: input {x.value.shape} incompatible with weight {w.value.shape}")
    if b is None:
        return matmul(x, w)
    if b.value.size != w.value.shape[1]:
        raise DimensionError(
            f"linear: bias {b.value.shape} incompatible with weight {w.value.shape}")
    xv, wv, bv = x.value, w.value, b.value.reshape(1, -1)

    def back(g):
        if x.requires_grad:
            _accumulate(x, g @ wv.T)
        _accumulate(w, xv.T @ g)
        _accumulate(b, g.sum(axis=0).reshape(b.value.shape))

    return _node(row_matmul(xv, wv) + bv, (x, w, b), back)


def add(a, b):
    def back(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _node(a.value + b.value, (a, b), back)


def mul(a, b):
    """Elementwise product with numpy broadcasting."""
    av, bv = a.value, b.value

    def back(g):
        _accumulate(a, g * bv)
        _accumulate(b, g * av)

    return _node(av * bv, (a, b), back)


def scale(a, c):
    c = float(c)
    return _node(a.value * c, (a,), lambda g: _accumulate(a, g * c))


def concat_cols(tensors):
    tensors = list(tensors)
    rows = {t.value.shape[0] for t in tensors}
    if len(rows) != 1:
        raise DimensionError(
            f"concat_cols: row counts differ {[t.value.shape for t in tensors]}")
    widths = [t.value.shape[1] for t in tensors]
    offsets = np.cumsum([0] + widths)

    def back(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            _accumulate(t, g[:, lo:hi])

    return _node(np.concatenate([t.value for t in tensors], axis=1), tuple(tensors), back)


def concat_rows(tensors):
    tensors = list(tensors)
    cols = {t.value.shape[1] for t in tensors}
    if len(cols) != 1:
        raise DimensionError(
            f"concat_rows: column counts differ {[t.value.shape for t in tensors]}")
    offsets = np.cumsum([0] + [t.value.shape[0] for t in tensors])

    def back(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            _accumulate(t, g[lo:hi])

    return _node(np.concatenate([t.value for t in tensors], axis=0), tuple(tensors), back)


def sum_all(a):
    shape = a.value.shape
    return _node(np.array([[a.value.sum()]]), (a,),
                 lambda g: _accumulate(a, np.full(shape, g[0, 0])))


# ----------------------------------------------------------------------
# activations
# ----------------------------------------------------------------------

_TINY = np.finfo(np.float64).tiny


def _stable_sigmoid(z):
    # exp underflow would otherwise give an exact 0 and -inf logs downstream
    return np.maximum(expit(z), _TINY)


def relu(x):
    mask = x.value > 0
    return _node(x.value * mask, (x,), lambda g: _accumulate(x, g * mask))


def sigmoid(x):
    s = _stable_sigmoid(x.value)
    return _node(s, (x,), lambda g: _accumulate(x, g * s * (1.0 - s)))


def tanh(x):
    t = np.tanh(x.value)
    return _node(t, (x,), lambda g: _accumulate(x, g * (1.0 - t * t)))


def log_softmax_rows(x):
    z = x.value - x.value.max(axis=1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    p = np.exp(out)

    def back(g):
        _accumulate(x, g - p * g.sum(axis=1, keepdims=True))

    return _node(out, (x,), back)


_ACTIVATIONS = {
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "log_softmax_rows": log_softmax_rows,
}


def activation(x, kind):
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


# ----------------------------------------------------------------------
# indexing, aggregation, masks
# ----------------------------------------------------------------------

def gather_rows(x, index):
    index = np.asarray(index, dtype=np.intp)
    shape = x.value.shape
    increasing = index.size < 2 or bool(np.all(index[1:] > index[:-1]))

    def back(g):
        full = np.zeros(shape)
        if increasing:
            full[index] = g
        else:
            np.add.at(full, index, g)
        _accumulate(x, full)

    return _node(x.value[index], (x,), back)


def segment_reduce(x, segments, n_segments, kind="add"):
    """Column-wise reduction of the rows belonging to each segment.

    ``segments`` gives the segment id of every row, sorted ascending; every
    segment must be non-empty.
    """
    segments = np.asarray(segments, dtype=np.intp)
    xv = x.value
    if np.any(np.diff(segments) < 0):
        raise ContractError("segment_reduce: segment ids must be sorted")
    starts = np.searchsorted(segments, np.arange(n_segments))
    counts = np.diff(np.append(starts, len(segments)))
    if np.any(counts == 0):
        raise ContractError("segment_reduce: empty segment")
    if kind in ("add", "mean"):
        out = np.add.reduceat(xv, starts, axis=0)
        if kind == "mean":
            out /= counts[:, None]

        def back(g):
            gg = g / counts[:, None] if kind == "mean" else g
            _accumulate(x, gg[segments])

        return _node(out, (x,), back)
    if kind == "max":
        out = np.maximum.reduceat(xv, starts, axis=0)
        # route the gradient to the first row attaining each max
        n = xv.shape[0]
        rows = np.broadcast_to(np.arange(n)[:, None], xv.shape)
        first = np.minimum.reduceat(np.where(xv == out[segments], rows, n), starts, axis=0)

        def back(g):
            full = np.zeros(xv.shape)
            cols = np.broadcast_to(np.arange(xv.shape[1]), out.shape)
            full[first, cols] = g
            _accumulate(x, full)

        return _node(out, (x,), back)
    raise ValueError(f"unknown reduction {kind!r}")


def dropout(x, rate, rng):
    """Inverted dropout; caller decides whether training is active."""
    if rate <= 0.0:
        return x
    keep = 1.0 - rate
    mask = (rng.random(x.value.shape) < keep) / keep
    return _node(x.value * mask, (x,), lambda g: _accumulate(x, g * mask))


def weighted_nll(log_probs, targets, weights=None):
    """Mean over rows of ``-w[t_i] * log_probs[i, t_i]``."""
    targets = np.asarray(targets, dtype=np.intp)
    n = log_probs.value.shape[0]
    if targets.shape != (n,):
        raise DimensionError(
            f"weighted_nll: {targets.shape} targets for {n} rows")
    rows = np.arange(n)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)[targets]
    value = -(w * log_probs.value[rows, targets]).sum() / n

    def back(g):
        full = np.zeros(log_probs.value.shape)
        full[rows, targets] = -w * g[0, 0] / n
        _accumulate(log_probs, full)

    return _node(np.array([[value]]), (log_probs,), back)


# ----------------------------------------------------------------------
# fused primitives
# ----------------------------------------------------------------------

class RelationalPlan:
    """Sparse operators for per-relation mean aggregation on a fixed graph.

    Rows of ``gather`` are (relation, destination) pairs: row ``k`` averages
    the sources of every edge of that relation into that destination.
    ``scatter`` adds the transformed row ``k`` back onto its destination
    node. ``groups`` lists ``(rel, lo, hi)`` row ranges per relation.
    """

    def __init__(self, src, dst, rel, n_nodes):
        src = np.asarray(src, dtype=np.intp)
        dst = np.asarray(dst, dtype=np.intp)
        rel = np.asarray(rel, dtype=np.intp)
        self.n_nodes = n_nodes
        order = np.lexsort((src, dst, rel))
        src, dst, rel = src[order], dst[order], rel[order]
        key = rel * max(n_nodes, 1) + dst
        uniq, row_of_edge, counts = np.unique(key, return_inverse=True, return_counts=True)
        n_rows = len(uniq)
        norm = 1.0 / counts[row_of_edge]
        self.gather = sp.csr_matrix((norm, (row_of_edge, src)), shape=(n_rows, n_nodes))
        self.gather_t = self.gather.T.tocsr()
        row_dst = uniq % max(n_nodes, 1)
        row_rel = uniq // max(n_nodes, 1)
        self.scatter = sp.csr_matrix((np.ones(n_rows), (row_dst, np.arange(n_rows))),
                                     shape=(n_nodes, n_rows))
        self.scatter_t = self.scatter.T.tocsr()
        self.groups = []
        for r in np.unique(row_rel):
            lo, hi = np.searchsorted(row_rel, [r, r + 1])
            self.groups.append((int(r), int(lo), int(hi)))

    @property
    def relations(self):
        return [r for r, _, _ in self.groups]


def relational_conv(x, self_weight, relation_weights, plan):
    """``x @ W_self`` plus, per relation, the mean of in-neighbour rows
    transformed by that relation's weight.

    ``plan`` is a :class:`RelationalPlan`; ``relation_weights`` maps each
    relation id in the plan to its weight Tensor.
    """
    xv = x.value
    out = row_matmul(xv, self_weight.value)
    weights = [relation_weights[r] for r, _, _ in plan.groups]
    if plan.groups:
        agg = plan.gather @ xv
        msgs = np.empty((agg.shape[0], out.shape[1]))
        for w, (_, lo, hi) in zip(weights, plan.groups):
            msgs[lo:hi] = row_matmul(agg[lo:hi], w.value)
        out += plan.scatter @ msgs

    def back(g):
        _accumulate(self_weight, xv.T @ g)
        if plan.groups:
            gmsg = plan.scatter_t @ g
            for w, (_, lo, hi) in zip(weights, plan.groups):
                _accumulate(w, agg[lo:hi].T @ gmsg[lo:hi])
        if not x.requires_grad:
            return
        gx = g @ self_weight.value.T
        if plan.groups:
            gagg = np.empty_like(agg)
            for w, (_, lo, hi) in zip(weights, plan.groups):
                gagg[lo:hi] = gmsg[lo:hi] @ w.value.T
            gx += plan.gather_t @ gagg
        _accumulate(x, gx)

    return _node(out, (x, self_weight) + tuple(weights), back)


@numba.njit(cache=True)
def _lstm_forward_kernel(pre, wh, gates, cells, tcells, hs):
    steps, width = pre.shape
    H = width // 4
    h = np.zeros(H)
    c = np.zeros(H)
    for t in range(steps):
        hw = np.zeros((1, width))
        _row_matmul_kernel(h.reshape(1, H), wh, hw)
        a = pre[t] + hw[0]
        for j in range(width):
            if 2 * H <= j < 3 * H:
                gates[t, j] = np.tanh(a[j])
            else:
                v = 1.0 / (1.0 + np.exp(-a[j])) if a[j] >= 0 else np.exp(a[j]) / (1.0 + np.exp(a[j]))
                gates[t, j] = max(v, 2.2250738585072014e-308)
        for j in range(H):
            c[j] = gates[t, H + j] * c[j] + gates[t, j] * gates[t, 2 * H + j]
            cells[t, j] = c[j]
            tcells[t, j] = np.tanh(c[j])
            h[j] = gates[t, 3 * H + j] * tcells[t, j]
            hs[t, j] = h[j]


@numba.njit(cache=True)
def _lstm_backward_kernel(g, wh, gates, cells, tcells, da):
    steps, H = g.shape
    dh_next = np.zeros(H)
    dc_next = np.zeros(H)
    whT = np.ascontiguousarray(wh.T)
    for t in range(steps - 1, -1, -1):
        for j in range(H):
            i = gates[t, j]
            f = gates[t, H + j]
            cand = gates[t, 2 * H + j]
            o = gates[t, 3 * H + j]
            dh = g[t, j] + dh_next[j]
            dc = dc_next[j] + dh * o * (1.0 - tcells[t, j] ** 2)
            c_prev = cells[t - 1, j] if t > 0 else 0.0
            da[t, j] = dc * cand * i * (1.0 - i)
            da[t, H + j] = dc * c_prev * f * (1.0 - f)
            da[t, 2 * H + j] = dc * i * (1.0 - cand * cand)
            da[t, 3 * H + j] = dh * tcells[t, j] * o * (1.0 - o)
            dc_next[j] = dc * f
        dh_next = da[t] @ whT


def lstm_sequence(x, w_input, w_hidden, bias):
    """Run an LSTM from a zero state over the rows of ``x``.

    Gate column blocks are ordered input, forget, candidate, output.
    Returns the hidden outputs, one row per step.
    """
    xv, wx, wh = x.value, w_input.value, w_hidden.value
    steps = xv.shape[0]
    H = wh.shape[0]
    if wx.shape != (xv.shape[1], 4 * H) or wh.shape != (H, 4 * H):
        raise DimensionError(
            f"lstm: input {xv.shape}, W_input {wx.shape}, W_hidden {wh.shape}")
    pre = row_matmul(xv, wx) + bias.value.reshape(1, -1)
    gates = np.empty((steps, 4 * H))
    cells = np.empty((steps, H))
    tcells = np.empty((steps, H))
    hs = np.empty((steps, H))
    _lstm_forward_kernel(pre, np.ascontiguousarray(wh), gates, cells, tcells, hs)

    def back(g):
        da = np.empty((steps, 4 * H))
        _lstm_backward_kernel(np.ascontiguousarray(g), np.ascontiguousarray(wh),
                              gates, cells, tcells, da)
        h_prev = np.vstack([np.zeros((1, H)), hs[:-1]])
        _accumulate(w_hidden, h_prev.T @ da)
        _accumulate(w_input, xv.T @ da)
        _accumulate(bias, da.sum(axis=0).reshape(bias.value.shape))
        if x.requires_grad:
            _accumulate(x, da @ wx.T)

    return _node(hs, (x, w_input, w_hidden, bias), back)


# ----------------------------------------------------------------------
# reverse pass
# ----------------------------------------------------------------------

def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss, params=None):
    """Backpropagate from a 1x1 ``loss``.

    Returns ``{name: gradient}`` for every Tensor in ``params`` (a mapping
    of name to leaf); leaves the loss does not depend on get zeros.
    """
    if loss.value.shape != (1, 1):
        raise ContractError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    tape = _topological(loss)
    for node in tape:
        node.grad = None
    if params is not None:
        for p in params.values():
            p.grad = None
    loss.grad = np.ones((1, 1))
    for node in reversed(tape):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)
    if params is None:
        return None
    return {name: (p.grad if p.grad is not None else np.zeros_like(p.value))
            for name, p in params.items()}


def grad_check(closure, params, tolerance=1e-4, step=1e-5, max_entries=None, rng=None):
    """Compare analytic gradients with central finite differences.

    ``closure`` maps ``{name: Tensor}`` to a scalar loss Tensor and must be
    deterministic. ``params`` maps names to float64 arrays; they are
    perturbed in place and restored. Returns ``{name: worst relative
    error}`` where relative error is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``. With
    ``max_entries`` only a random subset of each parameter's entries is
    probed.
    """
    tensors = {name: param(value, name) for name, value in params.items()}
    loss = closure(tensors)
    again = closure({name: param(value, name) for name, value in params.items()})
    if loss.value[0, 0] != again.value[0, 0]:
        raise ContractError(
            "closure is not deterministic (two evaluations differ); disable dropout")
    analytic = backward(loss, tensors)

    def evaluate():
        return closure({name: param(value, name) for name, value in params.items()}).value[0, 0]

    report = {}
    for name, value in params.items():
        flat = value.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            rng = rng or np.random.default_rng(0)
            entries = rng.choice(flat.size, size=max_entries, replace=False)
        worst = 0.0
        ga = analytic[name].reshape(-1)
        for j in entries:
            orig = flat[j]
            flat[j] = orig + step
            up = evaluate()
            flat[j] = orig - step
            down = evaluate()
            flat[j] = orig
            numeric = (up - down) / (2 * step)
            err = abs(ga[j] - numeric) / max(1.0, abs(ga[j]), abs(numeric))
            worst = max(worst, err)
        report[name] = worst
    return report


def glorot(rng, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))
