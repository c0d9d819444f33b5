"""Dense float64 tensors with reverse-mode automatic differentiation.

Define-by-run: every op records a backward closure on its output while
gradients are enabled, so the graph is rebuilt on each forward pass and
torn down again by backward(). All data is float64; any NaN/Inf produced
by an op aborts immediately with a NumericError naming the op.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, ShapeError


class GraphError(Exception):
    """Backward was requested on a tensor with no recorded graph."""


_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (inference paths)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _guard(op, arr):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by op '{op}'")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "_op")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._prev = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    # convenience operators (scalar or equal-shape only; see add/mul/sub)
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def _record(op, data, inputs, backward):
    """Wrap op output; attach the backward closure when recording."""
    _guard(op, data)
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._prev = tuple(inputs)
        out._backward = backward
        out._op = op
    return out


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_shape(op, a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} must match")


# ---------------------------------------------------------------------------
# elementwise / scalar ops


def add(a, b):
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        out_data = a.data + b

        def bwd(out):
            if a.requires_grad:
                a._accum(out.grad)

        return _record_unary("add", out_data, a, bwd)
    b = _as_tensor(b)
    _check_same_shape("add", a, b)
    out_data = a.data + b.data

    def bwd(out):
        if a.requires_grad:
            a._accum(out.grad)
        if b.requires_grad:
            b._accum(out.grad)

    return _record_binary("add", out_data, a, b, bwd)


def sub(a, b):
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        return add(a, -b)
    b = _as_tensor(b)
    _check_same_shape("sub", a, b)
    out_data = a.data - b.data

    def bwd(out):
        if a.requires_grad:
            a._accum(out.grad)
        if b.requires_grad:
            b._accum(-out.grad)

    return _record_binary("sub", out_data, a, b, bwd)


def mul(a, b):
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        out_data = a.data * b

        def bwd(out):
            if a.requires_grad:
                a._accum(out.grad * b)

        return _record_unary("mul", out_data, a, bwd)
    b = _as_tensor(b)
    _check_same_shape("mul", a, b)
    out_data = a.data * b.data

    def bwd(out):
        if a.requires_grad:
            a._accum(out.grad * b.data)
        if b.requires_grad:
            b._accum(out.grad * a.data)

    return _record_binary("mul", out_data, a, b, bwd)


def _record_unary(op, data, a, bwd):
    out = _record(op, data, (a,), None)
    if out._prev:
        out._backward = lambda: bwd(out)
    return out


def _record_binary(op, data, a, b, bwd):
    out = _record(op, data, (a, b), None)
    if out._prev:
        out._backward = lambda: bwd(out)
    return out


def sigmoid(x):
    x = _as_tensor(x)
    out_data = 1.0 / (1.0 + np.exp(-x.data))

    def bwd(out):
        if x.requires_grad:
            x._accum(out.grad * out.data * (1.0 - out.data))

    return _record_unary("sigmoid", out_data, x, bwd)


def tanh(x):
    x = _as_tensor(x)
    out_data = np.tanh(x.data)

    def bwd(out):
        if x.requires_grad:
            x._accum(out.grad * (1.0 - out.data * out.data))

    return _record_unary("tanh", out_data, x, bwd)


def relu(x):
    x = _as_tensor(x)
    out_data = np.maximum(x.data, 0.0)

    def bwd(out):
        if x.requires_grad:
            x._accum(out.grad * (x.data > 0.0))

    return _record_unary("relu", out_data, x, bwd)


def tsum(x):
    """Sum of every element, as a scalar tensor."""
    x = _as_tensor(x)
    out_data = np.asarray(x.data.sum())

    def bwd(out):
        if x.requires_grad:
            x._accum(np.full_like(x.data, float(out.grad)))

    return _record_unary("sum", out_data, x, bwd)


# ---------------------------------------------------------------------------
# shape / structural ops


def matmul(a, b):
    """2D @ 2D -> 2D, or 1D @ 2D -> 1D."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.data.ndim != 2:
        raise ShapeError(f"matmul: right operand must be 2D, got {b.data.shape}")
    if a.data.ndim == 1:
        if a.data.shape[0] != b.data.shape[0]:
            raise ShapeError(f"matmul: shapes {a.data.shape} and {b.data.shape} are incompatible")
        out_data = a.data @ b.data

        def bwd(out):
            if a.requires_grad:
                a._accum(out.grad @ b.data.T)
            if b.requires_grad:
                b._accum(np.outer(a.data, out.grad))

        return _record_binary("matmul", out_data, a, b, bwd)
    if a.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: shapes {a.data.shape} and {b.data.shape} are incompatible")
    out_data = a.data @ b.data

    def bwd(out):
        if a.requires_grad:
            a._accum(out.grad @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ out.grad)

    return _record_binary("matmul", out_data, a, b, bwd)


def reshape(x, shape):
    x = _as_tensor(x)
    out_data = x.data.reshape(shape)

    def bwd(out):
        if x.requires_grad:
            x._accum(out.grad.reshape(x.data.shape))

    return _record_unary("reshape", out_data, x, bwd)


def concat0(tensors):
    """Concatenate along axis 0."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input list")
    out_data = np.concatenate([t.data for t in tensors], axis=0)
    offsets = np.cumsum([0] + [t.data.shape[0] for t in tensors])

    def bwd(out):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                t._accum(out.grad[lo:hi])

    out = _record("concat", out_data, tuple(tensors), None)
    if out._prev:
        out._backward = lambda: bwd(out)
    return out


def slice_rows(x, start, stop):
    """Contiguous slice along axis 0 (a copy, autodiff-tracked)."""
    x = _as_tensor(x)
    if not (0 <= start <= stop <= x.data.shape[0]):
        raise ShapeError(f"slice: range [{start}, {stop}) out of bounds for shape {x.data.shape}")
    out_data = x.data[start:stop].copy()

    def bwd(out):
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[start:stop] += out.grad

    return _record_unary("slice", out_data, x, bwd)


def reduce_max(x, axis=0):
    """Max along one axis. Gradient routes to the first (lowest-index)
    argmax element of each slice."""
    x = _as_tensor(x)
    if x.data.shape[axis] == 0:
        raise ShapeError(f"reduce_max: empty axis {axis} in shape {x.data.shape}")
    idx = np.argmax(x.data, axis=axis)
    out_data = np.max(x.data, axis=axis)

    def bwd(out):
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            np.put_along_axis(dx, np.expand_dims(idx, axis), np.expand_dims(out.grad, axis), axis)
            x._accum(dx)

    return _record_unary("reduce_max", out_data, x, bwd)


def embedding_rows(table, ids):
    """Select rows of a (V, E) table by integer id; scatter-add on backward."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding: table must be 2D, got {table.data.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError(f"embedding: id out of range for table with {table.data.shape[0]} rows")
    out_data = table.data[ids]

    def bwd(out):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids, out.grad)

    return _record_unary("embedding", out_data, table, bwd)


# ---------------------------------------------------------------------------
# fused affine ops (explicit bias handling; no general broadcasting)


def linear(x, w, b):
    """x @ w + b for x of shape (B, N) or (N,); w (N, M), b (M,)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if w.data.ndim != 2 or b.data.shape != (w.data.shape[1],):
        raise ShapeError(f"linear: weight {w.data.shape} and bias {b.data.shape} are inconsistent")
    if x.data.shape[-1] != w.data.shape[0] or x.data.ndim not in (1, 2):
        raise ShapeError(f"linear: input {x.data.shape} does not match weight {w.data.shape}")
    out_data = x.data @ w.data + b.data

    def bwd(out):
        g = out.grad
        if x.requires_grad:
            x._accum(g @ w.data.T)
        if w.requires_grad:
            if x.data.ndim == 1:
                w._accum(np.outer(x.data, g))
            else:
                w._accum(x.data.T @ g)
        if b.requires_grad:
            b._accum(g if g.ndim == 1 else g.sum(axis=0))

    out = _record("linear", out_data, (x, w, b), None)
    if out._prev:
        out._backward = lambda: bwd(out)
    return out


def linear2(x, wx, m, wm, b):
    """x @ wx + m @ wm + b — one LSTM gate pre-activation as a single node."""
    x, wx, m, wm, b = map(_as_tensor, (x, wx, m, wm, b))
    if x.data.shape[-1] != wx.data.shape[0] or m.data.shape[-1] != wm.data.shape[0]:
        raise ShapeError(
            f"linear2: inputs {x.data.shape}/{m.data.shape} do not match "
            f"weights {wx.data.shape}/{wm.data.shape}"
        )
    out_data = x.data @ wx.data + m.data @ wm.data + b.data

    def bwd(out):
        g = out.grad
        if x.requires_grad:
            x._accum(g @ wx.data.T)
        if wx.requires_grad:
            wx._accum(np.outer(x.data, g) if x.data.ndim == 1 else x.data.T @ g)
        if m.requires_grad:
            m._accum(g @ wm.data.T)
        if wm.requires_grad:
            wm._accum(np.outer(m.data, g) if m.data.ndim == 1 else m.data.T @ g)
        if b.requires_grad:
            b._accum(g if g.ndim == 1 else g.sum(axis=0))

    out = _record("linear2", out_data, (x, wx, m, wm, b), None)
    if out._prev:
        out._backward = lambda: bwd(out)
    return out


# ---------------------------------------------------------------------------
# convolution stack


def conv2d(x, w, b):
    """Same-padded stride-1 conv. x (B,C,H,W), w (O,C,kh,kw) odd kernel, b (O,)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"conv2d: input {x.data.shape} does not match kernel {w.data.shape}")
    kh, kw = w.data.shape[2], w.data.shape[3]
    ph, pw = kh // 2, kw // 2
    B, C, H, W = x.data.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (B,C,H,W,kh,kw)
    out_data = np.einsum("bchwij,ocij->bohw", win, w.data, optimize=True)
    out_data += b.data[None, :, None, None]

    def bwd(out):
        g = out.grad
        if w.requires_grad:
            w._accum(np.einsum("bchwij,bohw->ocij", win, g, optimize=True))
        if b.requires_grad:
            b._accum(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + H, j:j + W] += np.einsum(
                        "bohw,oc->bchw", g, w.data[:, :, i, j], optimize=True
                    )
            x._accum(dxp[:, :, ph:ph + H, pw:pw + W])

    out = _record("conv2d", out_data, (x, w, b), None)
    if out._prev:
        out._backward = lambda: bwd(out)
    return out


def maxpool2d(x):
    """2x2 max pooling with stride 2; H and W must be even."""
    x = _as_tensor(x)
    B, C, H, W = x.data.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2d: spatial dims of {x.data.shape} must be even")
    win = x.data.reshape(B, C, H // 2, 2, W // 2, 2)
    flat = win.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    idx = flat.argmax(axis=-1)
    out_data = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bwd(out):
        if x.requires_grad:
            dflat = np.zeros_like(flat)
            np.put_along_axis(dflat, idx[..., None], out.grad[..., None], axis=-1)
            dx = dflat.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
            x._accum(dx.reshape(B, C, H, W))

    return _record_unary("maxpool2d", out_data, x, bwd)


def global_avg_pool(x):
    """(B,C,H,W) -> (B,C), averaging each feature map."""
    x = _as_tensor(x)
    B, C, H, W = x.data.shape
    out_data = x.data.mean(axis=(2, 3))

    def bwd(out):
        if x.requires_grad:
            x._accum(np.broadcast_to(out.grad[:, :, None, None] / (H * W), x.data.shape).copy())

    return _record_unary("global_avg_pool", out_data, x, bwd)


# ---------------------------------------------------------------------------
# losses


def softmax(logits):
    """Plain numpy softmax (no graph); stable."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, target_id):
    """-log softmax(logits)[target_id] for a 1D logit vector."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 1:
        raise ShapeError(f"softmax_cross_entropy: logits must be 1D, got {logits.data.shape}")
    v = logits.data.shape[0]
    if not (0 <= target_id < v):
        raise ShapeError(f"softmax_cross_entropy: target id {target_id} out of range for {v} classes")
    zmax = logits.data.max()
    lse = zmax + np.log(np.exp(logits.data - zmax).sum())
    out_data = np.asarray(lse - logits.data[target_id])

    def bwd(out):
        if logits.requires_grad:
            p = softmax(logits.data)
            p[target_id] -= 1.0
            logits._accum(p * float(out.grad))

    return _record_unary("softmax_cross_entropy", out_data, logits, bwd)


def sequence_cross_entropy(logits, targets, mask):
    """Masked sum of per-row cross-entropies.

    logits (B,V), targets (B,) int, mask (B,) bool. Returns (loss_sum, n)
    where n is the number of scored rows.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    B, V = logits.data.shape
    if targets.shape != (B,) or mask.shape != (B,):
        raise ShapeError(
            f"sequence_cross_entropy: logits {logits.data.shape} vs targets "
            f"{targets.shape} / mask {mask.shape}"
        )
    scored = np.flatnonzero(mask)
    if scored.size and (targets[scored].min() < 0 or targets[scored].max() >= V):
        raise ShapeError(f"sequence_cross_entropy: target id out of range for {V} classes")
    zmax = logits.data.max(axis=1)
    lse = zmax + np.log(np.exp(logits.data - zmax[:, None]).sum(axis=1))
    per_row = lse - logits.data[np.arange(B), targets]
    out_data = np.asarray(per_row[scored].sum())

    def bwd(out):
        if logits.requires_grad:
            p = softmax(logits.data)
            p[np.arange(B), targets] -= 1.0
            p[~mask] = 0.0
            logits._accum(p * float(out.grad))

    return _record_unary("sequence_cross_entropy", out_data, logits, bwd), int(scored.size)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss):
    """Populate grads of every requires_grad tensor reachable from `loss`.

    The recorded graph is cleared afterwards (one backward per forward).
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if loss._backward is None:
        raise GraphError("backward on a tensor with no recorded graph")

    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for child in node._prev:
            if id(child) not in seen:
                stack.append((child, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            _guard(f"{node._op} (backward)", node.grad)
            node._backward()
            node._prev = ()
            node._backward = None
