"""Dense tensors with reverse-mode differentiation.

Every op returns a new :class:`Tensor`.  When any input requires a gradient the
output keeps a reference to its inputs together with a backward rule; calling
:func:`backward` on a scalar loss walks those records in reverse topological
order.  Backward rules receive a ``needs`` mask and skip work for inputs that
do not lead to a requested leaf, so an input-gradient pass never computes
weight gradients.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        desc = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {desc}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple = ()
        self._backward = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_nonscalar("item", self.shape)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _raise_nonscalar(op, shape):
    raise AutodiffError(f"{op}: expected a scalar, got shape {tuple(shape)}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], rule: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out._op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = rule
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def rule(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return _make(a.data + b.data, (a, b), rule, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def rule(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None)

    return _make(a.data - b.data, (a, b), rule, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def rule(g, needs):
        return (_unbroadcast(g * b.data, a.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.shape) if needs[1] else None)

    return _make(a.data * b.data, (a, b), rule, "mul")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def rule(g, needs):
        return (g * mask,)

    return _make(x.data * mask, (x,), rule, "relu")


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise AutodiffError("log: input must be strictly positive")

    def rule(g, needs):
        return (g / x.data,)

    return _make(np.log(x.data), (x,), rule, "log")


# ---------------------------------------------------------------- structure

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def rule(g, needs):
        A = a.data if a.ndim == 2 else a.data[None, :]
        B = b.data if b.ndim == 2 else b.data[:, None]
        G = g.reshape(A.shape[0], B.shape[1])
        ga = (G @ B.T).reshape(a.shape) if needs[0] else None
        gb = (A.T @ G).reshape(b.shape) if needs[1] else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), rule, "matmul")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None

    def rule(g, needs):
        return (g.reshape(x.shape),)

    return _make(out, (x,), rule, "reshape")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise AutodiffError("concat: no inputs")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in ts]) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def rule(g, needs):
        parts = np.split(g, bounds, axis=axis)
        return tuple(p if n else None for p, n in zip(parts, needs))

    return _make(out, ts, rule, "concat")


def tsum(x, axis=None) -> Tensor:
    x = as_tensor(x)

    def rule(g, needs):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis)), (x,), rule, "sum")


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis), 1.0 / n)


def take_pixels(x, index: np.ndarray) -> Tensor:
    """Per-example gather on flattened images.

    ``index`` has shape (N, D_out) with entries into the flattened (D_in,)
    image of each example; -1 produces a zero.  Indices within a row must be
    distinct, which holds for the permutation and masking maps used here.
    """
    x = as_tensor(x)
    n = x.shape[0]
    flat = x.data.reshape(n, -1)
    d_in = flat.shape[1]
    index = np.asarray(index)
    if index.ndim != 2 or index.shape[0] != n:
        raise ShapeError("take_pixels", x.shape, index.shape)
    valid = index >= 0
    safe = np.where(valid, index, 0)
    out = np.take_along_axis(flat, safe, axis=1) * valid

    def rule(g, needs):
        rows = np.broadcast_to(np.arange(n)[:, None] * d_in, index.shape)
        target = (rows + safe)[valid]
        gx = np.bincount(target, weights=g.reshape(n, -1)[valid], minlength=n * d_in)
        return (gx.reshape(x.shape),)

    return _make(out, (x,), rule, "take_pixels")


# ---------------------------------------------------------------- conv / pool

def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def rule(g, needs):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), rule, "transpose")


def _conv_direct(xp, w):
    # reference kernel, NCHW, no im2col
    n, c, hp, wp = xp.shape
    f, _, kh, kw = w.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    out = np.zeros((n, f, ho, wo), dtype=DTYPE)
    for o in range(f):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    out[:, o] += w[o, ch, i, j] * xp[:, ch, i:i + ho, j:j + wo]
    return out


def _weight_grad_direct(xp, g, kshape):
    kh, kw = kshape
    _, f, ho, wo = g.shape
    c = xp.shape[1]
    gw = np.zeros((f, c, kh, kw), dtype=DTYPE)
    for o in range(f):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    gw[o, ch, i, j] = np.sum(g[:, o] * xp[:, ch, i:i + ho, j:j + wo])
    return gw


def _conv_nhwc(x, w, b, padding):
    n, h, wd, c = x.shape
    f, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    ho, wo = xp.shape[1] - kh + 1, xp.shape[2] - kw + 1
    cols = sliding_window_view(xp, (kh, kw), axis=(1, 2)).reshape(n * ho * wo, c * kh * kw)
    w2 = w.reshape(f, -1)
    out = cols @ w2.T
    if b is not None:
        out += b
    return out.reshape(n, ho, wo, f), cols


def _conv_nhwc_input_grad(g, w, xshape, padding):
    n, h, wd, c = xshape
    f, _, kh, kw = w.shape
    _, ho, wo, _ = g.shape
    # columns laid out (kh, kw, c, n, ho, wo) so each shifted add is contiguous
    wk = w.transpose(2, 3, 1, 0).reshape(-1, f)
    gcol = (wk @ g.reshape(-1, f).T).reshape(kh, kw, c, n, ho, wo)
    gxp = np.zeros((c, n, h + 2 * padding, wd + 2 * padding), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + ho, j:j + wo] += gcol[i, j]
    return np.ascontiguousarray(gxp[:, :, padding:padding + h, padding:padding + wd].transpose(1, 2, 3, 0))


def conv2d(x, w, b=None, padding: int = 1, kernel: str = "blocked", channels_last: bool = False) -> Tensor:
    """Stride-1 cross-correlation with symmetric zero padding.

    ``x`` is (N, C, H, W), a single (C, H, W) image, or (N, H, W, C) when
    ``channels_last``.  ``w`` is always (F, C, kh, kw).  ``kernel="direct"``
    selects the nested-loop reference implementation.
    """
    x, w = as_tensor(x), as_tensor(w)
    if kernel not in ("blocked", "direct"):
        raise AutodiffError(f"conv2d: unknown kernel {kernel!r}")
    if x.ndim == 3 and not channels_last:
        out = conv2d(reshape(x, (1,) + x.shape), w, b, padding, kernel)
        return reshape(out, out.shape[1:])
    cdim = 3 if channels_last else 1
    if x.ndim != 4 or w.ndim != 4 or x.shape[cdim] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    kh, kw = w.shape[2:]
    if padding > min(kh, kw) - 1:
        raise AutodiffError("conv2d: padding must be smaller than the kernel")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeError("conv2d bias", b.shape, (w.shape[0],))
    if kernel == "direct":
        xin = transpose(x, (0, 3, 1, 2)) if channels_last else x
        out = _conv2d_direct(xin, w, b, padding)
        return transpose(out, (0, 2, 3, 1)) if channels_last else out
    if not channels_last:
        out = conv2d(transpose(x, (0, 2, 3, 1)), w, b, padding, channels_last=True)
        return transpose(out, (0, 3, 1, 2))

    out, cols = _conv_nhwc(x.data, w.data, None if b is None else b.data, padding)
    parents = (x, w) if b is None else (x, w, b)

    def rule(g, needs):
        f = w.shape[0]
        gx = _conv_nhwc_input_grad(g, w.data, x.shape, padding) if needs[0] else None
        gw = (g.reshape(-1, f).T @ cols).reshape(w.shape) if needs[1] else None
        if b is None:
            return gx, gw
        return gx, gw, (g.reshape(-1, f).sum(axis=0) if needs[2] else None)

    return _make(out, parents, rule, "conv2d")


def _conv2d_direct(x, w, b, padding):
    kh, kw = w.shape[2:]
    pads = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pads)
    out = _conv_direct(xp, w.data)
    if b is not None:
        out = out + b.data[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def rule(g, needs):
        gx = gw = gb = None
        if needs[0]:
            back = ((0, 0), (0, 0), (kh - 1 - padding,) * 2, (kw - 1 - padding,) * 2)
            wt = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx = _conv_direct(np.pad(g, back), wt)
        if needs[1]:
            gw = _weight_grad_direct(xp, g, (kh, kw))
        if b is None:
            return gx, gw
        if needs[2]:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    return _make(out, parents, rule, "conv2d")


def avg_pool(x, k: int = 2, channels_last: bool = False) -> Tensor:
    """Non-overlapping k x k mean pooling over the spatial axes."""
    x = as_tensor(x)
    if channels_last:
        if x.ndim != 4 or x.shape[1] % k or x.shape[2] % k:
            raise ShapeError("avg_pool", x.shape, (k, k))
        n, h, w, c = x.shape
        out = x.data.reshape(n, h // k, k, w // k, k, c).mean(axis=(2, 4))

        def rule(g, needs):
            gx = np.broadcast_to(g[:, :, None, :, None, :] / (k * k), (n, h // k, k, w // k, k, c))
            return (gx.reshape(x.shape),)

        return _make(out, (x,), rule, "avg_pool")
    if x.ndim < 2 or x.shape[-1] % k or x.shape[-2] % k:
        raise ShapeError("avg_pool", x.shape, (k, k))
    *lead, h, w = x.shape
    out = x.data.reshape(*lead, h // k, k, w // k, k).mean(axis=(-3, -1))

    def rule(g, needs):
        gx = np.broadcast_to(g[..., :, None, :, None] / (k * k), (*lead, h // k, k, w // k, k))
        return (gx.reshape(x.shape),)

    return _make(out, (x,), rule, "avg_pool")


# ---------------------------------------------------------------- losses

def _check_labels(labels, n_classes, op):
    labels = np.asarray(labels)
    if labels.dtype.kind not in "iu":
        raise AutodiffError(f"{op}: labels must be integers")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise AutodiffError(f"{op}: class index out of range [0, {n_classes})")
    return labels


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def rule(g, needs):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, (x,), rule, "softmax")


def softmax_cross_entropy(logits, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of softmax(logits) against integer class labels.

    Accepts a single logit vector with an int label, or an (N, K) batch.
    ``reduction`` is "mean" or "sum" over the batch.
    """
    logits = as_tensor(logits)
    single = logits.ndim == 1
    z = logits.data[None, :] if single else logits.data
    if z.ndim != 2:
        raise ShapeError("softmax_cross_entropy", logits.shape, np.shape(labels))
    y = _check_labels(np.atleast_1d(labels), z.shape[1], "softmax_cross_entropy")
    if y.shape != (z.shape[0],):
        raise ShapeError("softmax_cross_entropy", logits.shape, y.shape)
    if reduction not in ("mean", "sum"):
        raise AutodiffError(f"softmax_cross_entropy: unknown reduction {reduction!r}")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    per = lse - shifted[rows, y]
    scale = 1.0 / z.shape[0] if reduction == "mean" else 1.0
    loss = per.sum() * scale

    def rule(g, needs):
        p = np.exp(shifted - lse[:, None])
        p[rows, y] -= 1.0
        gz = p * (g * scale)
        return (gz[0] if single else gz,)

    return _make(np.asarray(loss), (logits,), rule, "softmax_cross_entropy")


def pick(x, labels) -> Tensor:
    """Row-wise gather ``x[i, labels[i]]`` from an (N, K) tensor."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError("pick", x.shape, np.shape(labels))
    y = _check_labels(labels, x.shape[1], "pick")
    rows = np.arange(x.shape[0])

    def rule(g, needs):
        gx = np.zeros(x.shape)
        gx[rows, y] = g
        return (gx,)

    return _make(x.data[rows, y], (x,), rule, "pick")


def l2_normalize(x, axis: int = -1) -> Tensor:
    """Scale to unit Euclidean norm along ``axis``; all-zero slices stay zero."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    safe = np.where(norm > 0, norm, 1.0)
    u = np.where(norm > 0, x.data / safe, 0.0)

    def rule(g, needs):
        return ((g - u * (g * u).sum(axis=axis, keepdims=True)) / safe,)

    return _make(u, (x,), rule, "l2_normalize")


# ---------------------------------------------------------------- backward

class Tape:
    """Recorded ops reachable from a loss, in topological order (inputs first)."""

    def __init__(self, loss: Tensor):
        order, seen = [], set()
        stack = [(loss, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.nodes = order

    def __len__(self):
        return sum(1 for n in self.nodes if not n.is_leaf)

    def leaves(self) -> list:
        return [n for n in self.nodes if n.is_leaf and n.requires_grad]


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> None:
    """Populate ``.grad`` of requires-grad leaves reachable from ``loss``.

    With ``wrt`` only those leaves receive gradients and branches that do not
    reach them are never differentiated.  Gradients accumulate into existing
    ``.grad`` buffers.  A graph can be differentiated once.
    """
    if loss.data.size != 1:
        raise AutodiffError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._consumed:
        raise AutodiffError("backward: graph already consumed; recompute the forward pass")
    if not loss.requires_grad:
        raise AutodiffError("backward: loss does not depend on any tensor requiring grad")
    tape = Tape(loss)
    targets = {id(t) for t in (tape.leaves() if wrt is None else wrt)}
    relevant = {}
    for node in tape.nodes:
        relevant[id(node)] = (id(node) in targets if node.is_leaf
                              else any(relevant[id(p)] for p in node._parents))
    grads = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None or not relevant[id(node)]:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        needs = tuple(relevant[id(p)] for p in node._parents)
        for p, gp, need in zip(node._parents, node._backward(g, needs), needs):
            if not need:
                continue
            key = id(p)
            grads[key] = gp if key not in grads else grads[key] + gp
    for node in tape.nodes:
        if not node.is_leaf:
            node._backward = None
            node._parents = ()
            node._consumed = True
    loss._consumed = True


def input_gradient(loss_fn: Callable[[Tensor], Tensor], x) -> np.ndarray:
    """Gradient of ``loss_fn`` at ``x`` with respect to ``x`` only."""
    leaf = Tensor(np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE), requires_grad=True)
    loss = loss_fn(leaf)
    if loss.data.size != 1:
        raise AutodiffError(f"input_gradient: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return np.zeros(leaf.shape)
    backward(loss, wrt=[leaf])
    return leaf.grad if leaf.grad is not None else np.zeros(leaf.shape)


def finite_diff_gradient(f: Callable, x, h: float = 1e-5, coords=None) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``f`` takes an ndarray and returns a float or a scalar Tensor.  With
    ``coords`` (flat indices) only those entries are estimated; the rest are
    left at zero.
    """
    if not h > 0:
        raise AutodiffError("finite_diff_gradient: step h must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    flat = base.reshape(-1)
    out = np.zeros_like(flat)

    def value(v):
        r = f(v.reshape(base.shape))
        return float(r.data) if isinstance(r, Tensor) else float(r)

    for i in (range(flat.size) if coords is None else coords):
        old = flat[i]
        flat[i] = old + h
        up = value(flat)
        flat[i] = old - h
        down = value(flat)
        flat[i] = old
        out[i] = (up - down) / (2 * h)
    return out.reshape(base.shape)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=DTYPE), np.asarray(b, dtype=DTYPE)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def sign(x: np.ndarray) -> np.ndarray:
    """Elementwise sign with sign(0) == 0."""
    return np.sign(x)
