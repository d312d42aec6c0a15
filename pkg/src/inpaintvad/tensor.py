"""Dense tensors with reverse-mode differentiation.

Only the operations the detector needs are provided. Every forward op records
its parents and a closure that maps the output gradient to parent gradients;
:func:`backward` replays those closures in reverse topological order.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "backward",
    "concat",
    "concat_channels",
    "conv2d",
    "lstm_cell",
    "matmul",
    "nll_terms",
    "pointwise",
    "relu",
    "sigmoid",
    "softmax_bins",
    "tanh",
    "PROB_FLOOR",
]

PROB_FLOOR = 1e-12
_LOG_FLOOR = float(np.log(PROB_FLOOR))


class Tensor:
    """A float array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = ""

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op or 'leaf'})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"only size-1 tensors convert to a scalar, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # arithmetic ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self.dtype)))

    def __rsub__(self, other):
        return add(_lift(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _lift(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = grad_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b, a.dtype if isinstance(a, Tensor) else None)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), grad_fn, "add")


def mul(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a.dtype)

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), grad_fn, "mul")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def _sigmoid(d: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * d))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    return _result(np.where(keep, x.data, 0).astype(x.dtype), (x,), lambda g: (g * keep,), "relu")


_POINTWISE = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}


def pointwise(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _POINTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown pointwise kind {kind!r}; expected one of {sorted(_POINTWISE)}") from None
    return fn(x)


# shape plumbing -------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def take(x: Tensor, index) -> Tensor:
    def grad_fn(g):
        full = np.zeros_like(x.data)
        if _is_fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _result(x.data[index], (x,), grad_fn, "take")


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def tsum(x: Tensor, axis=None) -> Tensor:
    src = x.shape

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis)), (x,), grad_fn, "sum")


def tmean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return tsum(x, axis) * (1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, grad_fn, "concat")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Stack ``[C_i, H, W]`` (or batched ``[N, C_i, H, W]``) tensors along channels."""
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ValueError("concat_channels needs at least one tensor")
    nd = tensors[0].ndim
    if nd not in (3, 4):
        raise ValueError(f"expected 3-d or 4-d tensors, got shape {tensors[0].shape}")
    axis = nd - 3
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != nd or t.shape[:axis] != ref[:axis] or t.shape[-2:] != ref[-2:]:
            raise ValueError(f"spatial/batch mismatch in concat_channels: {ref} vs {t.shape}")
    if len(tensors) == 1:
        return tensors[0]
    return concat(tensors, axis=axis)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), grad_fn, "matmul")


# convolution ----------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, h: int, w: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh * kw, h, w), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i * kw + j] = xp[:, :, i:i + h, j:j + w]
    return cols.reshape(n, c * kh * kw, h * w)


def _col2im(cols: np.ndarray, c: int, kh: int, kw: int, h: int, w: int) -> np.ndarray:
    n = cols.shape[0]
    cols = cols.reshape(n, c, kh * kw, h, w)
    ph, pw = kh // 2, kw // 2
    xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + h, j:j + w] += cols[:, :, i * kw + j]
    return xp[:, :, ph:ph + h, pw:pw + w]


def conv2d(x: Tensor, filters: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-size, zero-padded 2-d cross-correlation.

    ``x`` is ``[C_in, H, W]`` or batched ``[N, C_in, H, W]``. ``filters`` is
    ``[C_out, C_in, kH, kW]``, or ``[N, C_out, C_in, kH, kW]`` for per-sample
    filter banks (the dynamic-filter case). ``bias`` is ``[C_out]`` or
    ``[N, C_out]`` to match.
    """
    x, filters = _lift(x), _lift(filters)
    unbatched = x.ndim == 3
    if unbatched:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be [C,H,W] or [N,C,H,W], got {x.shape}")
    n, cin, h, w = x.shape
    per_sample = filters.ndim == 5
    if filters.ndim not in (4, 5):
        raise ValueError(f"conv2d filters must be 4-d or 5-d, got {filters.shape}")
    cout, cin_f, kh, kw = filters.shape[-4:]
    if cin_f != cin or (per_sample and filters.shape[0] != n):
        raise ValueError(f"conv2d shape mismatch: input {x.shape} vs filters {filters.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d kernel dims must be odd, got filters {filters.shape}")
    if bias is not None:
        bias = _lift(bias)
        want = (n, cout) if per_sample else (cout,)
        if bias.shape != want:
            raise ValueError(f"conv2d bias shape {bias.shape} does not match filters {filters.shape}")

    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = _im2col(xp, kh, kw, h, w)
    wm = filters.data.reshape((n, cout, -1) if per_sample else (cout, -1))
    out = np.matmul(wm, cols)
    if bias is not None:
        out += bias.data[..., None]
    out = out.reshape(n, cout, h, w)

    def grad_fn(g):
        gm = g.reshape(n, cout, h * w)
        if per_sample:
            gw = np.matmul(gm, cols.transpose(0, 2, 1)).reshape(filters.shape)
            gwt = wm.transpose(0, 2, 1)
        else:
            gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(filters.shape)
            gwt = wm.T
        gx = _col2im(np.matmul(gwt, gm), cin, kh, kw, h, w) if x.requires_grad else None
        grads = (gx, gw)
        if bias is not None:
            grads += (gm.sum(axis=2) if per_sample else gm.sum(axis=(0, 2)),)
        return grads

    parents = (x, filters) + ((bias,) if bias is not None else ())
    res = _result(out, parents, grad_fn, "conv2d")
    return reshape(res, res.shape[1:]) if unbatched else res


def lstm_cell(gates: Tensor, c_prev: Tensor) -> Tensor:
    """Fused LSTM state update.

    ``gates`` holds the pre-activations of the input, forget, output and
    candidate gates stacked along axis 1 (``[N, 4C, H, W]``); ``c_prev`` is
    ``[N, C, H, W]``. Returns ``[2, N, C, H, W]`` holding the new ``h`` and ``c``.
    """
    gates, c_prev = _lift(gates), _lift(c_prev)
    ch = c_prev.shape[1]
    if gates.shape[1] != 4 * ch or gates.shape[:1] + gates.shape[2:] != c_prev.shape[:1] + c_prev.shape[2:]:
        raise ValueError(f"lstm_cell shape mismatch: gates {gates.shape} vs cell {c_prev.shape}")
    z = gates.data
    i = _sigmoid(z[:, :ch])
    f = _sigmoid(z[:, ch:2 * ch])
    o = _sigmoid(z[:, 2 * ch:3 * ch])
    g = np.tanh(z[:, 3 * ch:])
    c = f * c_prev.data + i * g
    tc = np.tanh(c)
    out = np.stack([o * tc, c])

    def grad_fn(grad):
        dh, dc = grad[0], grad[1]
        dc = dc + dh * o * (1.0 - tc * tc)
        dz = np.concatenate([
            dc * g * i * (1.0 - i),
            dc * c_prev.data * f * (1.0 - f),
            dh * tc * o * (1.0 - o),
            dc * i * (1.0 - g * g),
        ], axis=1)
        return dz, dc * f

    return _result(out, (gates, c_prev), grad_fn, "lstm_cell")


# categorical heads --------------------------------------------------------------

def _stable_softmax(z: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_bins(logits: Tensor, axis: int = -1) -> Tensor:
    """Softmax over the intensity-bin axis (last by default)."""
    logits = _lift(logits)
    if logits.shape[axis] < 2:
        raise ValueError(f"softmax needs at least 2 bins, got shape {logits.shape}")
    p = _stable_softmax(logits.data, axis)

    def grad_fn(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _result(p, (logits,), grad_fn, "softmax")


def nll_terms(logits: Tensor, targets: np.ndarray, axis: int = 1) -> Tensor:
    """Per-element ``-log max(softmax(logits)[target], PROB_FLOOR)``.

    The result has the shape of ``targets`` (``logits`` with ``axis`` removed).
    Terms hitting the probability floor contribute no gradient.
    """
    logits = _lift(logits)
    targets = np.asarray(targets)
    axis = axis % logits.ndim
    k = logits.shape[axis]
    if targets.shape != logits.shape[:axis] + logits.shape[axis + 1:]:
        raise ValueError(f"targets shape {targets.shape} incompatible with logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        raise ValueError(f"target bin out of range [0, {k})")
    z = logits.data
    shifted = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    logp = shifted - lse
    idx = np.expand_dims(targets, axis)
    picked = np.take_along_axis(logp, idx, axis=axis)
    live = picked > _LOG_FLOOR
    out = -np.squeeze(np.maximum(picked, _LOG_FLOOR), axis=axis)

    def grad_fn(g):
        gl = np.exp(logp) * np.expand_dims(g, axis)
        np.put_along_axis(gl, idx, np.take_along_axis(gl, idx, axis=axis) - np.expand_dims(g, axis), axis=axis)
        return (gl * live,)

    return _result(out, (logits,), grad_fn, "nll")


# engine -------------------------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Populate ``.grad`` on every ``requires_grad`` leaf reachable from ``root``.

    Leaf gradients accumulate across calls; zero them explicitly between steps.
    The recorded graph is released afterwards.
    """
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _topological(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
