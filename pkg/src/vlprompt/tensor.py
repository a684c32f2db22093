"""Float64 tensors with tape-based reverse-mode differentiation.

Operations are only recorded while a :class:`Tape` is active::

    with Tape() as tape:
        loss = cross_entropy(logits(x), targets, mask)
    tape.backward(loss)

Outside a tape every op is a plain numpy computation, which is what the
evaluation paths use. A tape is single-use: a second ``backward`` raises
:class:`~vlprompt.exceptions.TapeError`.
"""
import threading
from contextlib import contextmanager

import numpy as np

from .exceptions import (
    DeterminismError,
    DimensionError,
    EmptyLossError,
    NumericError,
    TapeError,
)

__all__ = [
    "Tensor", "Tape", "no_grad", "add", "sub", "mul", "scale", "matmul",
    "transpose", "reshape", "softmax_rows", "log_softmax_rows",
    "cross_entropy", "layer_norm", "gelu", "embedding_lookup", "concat",
    "concat_rows", "expand", "mean_rows", "mean", "sum_all", "conv2d",
    "adaptive_avg_pool2d", "take", "grad_check",
]

_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array plus gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def backward(self):
        if self._tape is None:
            raise TapeError("tensor was not produced on an active tape")
        self._tape.backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class _Node:
    __slots__ = ("inputs", "out", "backward")

    def __init__(self, inputs, out, backward):
        self.inputs = inputs
        self.out = out
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations for one forward pass."""

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def __enter__(self):
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def record(self, inputs, out, backward):
        self.nodes.append(_Node(inputs, out, backward))
        out._tape = self

    def backward(self, loss):
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if self.consumed:
            raise TapeError("backward() already called on this tape; run a new forward")
        if loss.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.consumed = True
        produced = {id(n.out) for n in self.nodes}
        grads = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in produced:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            if leaf.grad is None:
                leaf.grad = np.array(g, dtype=np.float64).reshape(leaf.shape)
            else:
                leaf.grad = leaf.grad + g
        self.nodes = []


@contextmanager
def no_grad():
    """Suspend recording, even inside an enclosing tape."""
    stack = _tape_stack()
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


def _make(out_data, inputs, backward):
    tape = current_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.record(inputs, out, backward)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: cannot broadcast {a.shape} with {b.shape}") from None
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise DimensionError(f"sub: cannot broadcast {a.shape} with {b.shape}") from None
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None
    return _make(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                         _unbroadcast(g * a.data, b.shape)))


def scale(a, c):
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x):
    """GELU, tanh approximation."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    """Batched matrix product over the last two axes (numpy broadcasting rules)."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return _make(out, (a, b), backward)


def transpose(x, axes=None):
    """Permute axes; default swaps the last two."""
    if axes is None:
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x, shape):
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


# ---------------------------------------------------------------- reductions

def softmax_rows(x):
    """Softmax over the last axis with max subtraction."""
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax_rows: non-finite input")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (x,), backward)


def log_softmax_rows(x):
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), backward)


def cross_entropy(logits, targets, mask=None):
    """Mean negative log-likelihood of ``targets`` over masked positions.

    ``logits`` is ``[..., V]``; ``targets`` and ``mask`` are flattened to
    the product of the leading dimensions. Positions where ``mask`` is false
    contribute nothing and their target value is ignored.
    """
    V = logits.shape[-1]
    flat = logits.data.reshape(-1, V)
    n = flat.shape[0]
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    if targets.shape[0] != n or mask.shape[0] != n:
        raise DimensionError(f"cross_entropy: {n} positions but {targets.shape[0]} targets "
                             f"and {mask.shape[0]} mask entries")
    count = int(mask.sum())
    if count == 0:
        raise EmptyLossError("cross_entropy: every position is masked out")
    sel = np.flatnonzero(mask)
    tsel = targets[sel]
    if np.any(tsel < 0) or np.any(tsel >= V):
        raise IndexError(f"cross_entropy: target id out of range for vocabulary of {V}")
    rows = flat[sel]
    z = rows - rows.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    nll = lse - z[np.arange(count), tsel]
    loss = np.array(nll.sum() / count)

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(count), tsel] -= 1.0
        full = np.zeros_like(flat)
        full[sel] = p * (float(g) / count)
        return (full.reshape(logits.shape),)

    return _make(loss, (logits,), backward)


def layer_norm(x, weight=None, bias=None, eps=1e-5):
    """Normalise the last axis (biased variance), then optional affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if weight is not None:
        out = out * weight.data
    if bias is not None:
        out = out + bias.data
    inputs = (x,) + tuple(t for t in (weight, bias) if t is not None)

    def backward(g):
        gw = g * weight.data if weight is not None else g
        n = x.shape[-1]
        gx = inv / n * (n * gw - gw.sum(axis=-1, keepdims=True)
                        - xhat * (gw * xhat).sum(axis=-1, keepdims=True))
        grads = [gx]
        if weight is not None:
            grads.append(_unbroadcast(g * xhat, weight.shape))
        if bias is not None:
            grads.append(_unbroadcast(g, bias.shape))
        return tuple(grads)

    return _make(out, inputs, backward)


def mean(x, axis=None, keepdims=False):
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size // max(np.asarray(out).size, 1)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape) / count,)

    return _make(np.asarray(out), (x,), backward)


def mean_rows(x):
    """Mean over the row axis (second to last)."""
    return mean(x, axis=x.ndim - 2)


def sum_all(x):
    return _make(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


# ---------------------------------------------------------------- indexing

def embedding_lookup(table, ids):
    """Gather rows of ``table`` for integer ``ids`` of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    V = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise IndexError(f"embedding_lookup: id outside [0, {V})")
    out = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _make(out, (table,), backward)


def take(x, index):
    """Basic or advanced numpy indexing with scatter-add backward."""
    out = x.data[index]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _make(np.array(out), (x,), backward)


def expand(x, batch):
    """Repeat ``x`` along a new leading batch axis."""
    out = np.broadcast_to(x.data, (batch,) + x.shape).copy()
    return _make(out, (x,), lambda g: (g.sum(axis=0),))


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat: nothing to concatenate")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise DimensionError(f"concat: incompatible shapes {shapes} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(tensors), backward)


def concat_rows(tensors):
    """Concatenate along the row axis (second to last)."""
    first = _as_tensor(tensors[0]) if tensors else None
    if first is None:
        raise DimensionError("concat_rows: nothing to concatenate")
    return concat(tensors, axis=first.ndim - 2)


# ---------------------------------------------------------------- convolution

def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation on NCHW input with zero padding."""
    N, C, H, W = x.shape
    O, Cw, kh, kw = weight.shape
    if C != Cw:
        raise DimensionError(f"conv2d: input {x.shape} has {C} channels, weight {weight.shape} expects {Cw}")
    s, p = int(stride), int(padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    Hp, Wp = xp.shape[2], xp.shape[3]
    Ho = (Hp - kh) // s + 1
    Wo = (Wp - kw) // s + 1
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"conv2d: input {x.shape} too small for kernel {weight.shape}")
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::s, ::s][:, :, :Ho, :Wo]          # N C Ho Wo kh kw
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(N * Ho * Wo, C * kh * kw)
    wmat = weight.data.reshape(O, -1)
    out = (cols @ wmat.T).reshape(N, Ho, Wo, O)
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    inputs = (x, weight) + ((bias,) if bias is not None else ())

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gw = (gm.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gm @ wmat).reshape(N, Ho, Wo, C, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + s * Ho:s, j:j + s * Wo:s] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, p:p + H, p:p + W] if p else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(out, inputs, backward)


def _pool_matrix(n_in, n_out):
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        start = (i * n_in) // n_out
        end = -((-(i + 1) * n_in) // n_out)
        m[i, start:end] = 1.0 / (end - start)
    return m


def adaptive_avg_pool2d(x, output_size):
    """Average-pool NCHW input onto a fixed ``(gh, gw)`` grid."""
    gh, gw = output_size
    H, W = x.shape[-2:]
    if H < gh or W < gw:
        raise DimensionError(f"adaptive_avg_pool2d: input {x.shape} smaller than grid {output_size}")
    ph, pw = _pool_matrix(H, gh), _pool_matrix(W, gw)
    out = np.einsum("ih,nchw,jw->ncij", ph, x.data, pw, optimize=True)
    return _make(out, (x,), lambda g: (np.einsum("ih,ncij,jw->nchw", ph, g, pw, optimize=True),))


# ---------------------------------------------------------------- gradient oracle

def grad_check(f, params, h=1e-5):
    """Largest relative disagreement between autodiff and central differences.

    ``f`` maps a ``{name: Tensor}`` dict to a scalar tensor. The error for
    one entry is ``|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    for t in params.values():
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = f(params)
    with no_grad():
        again = f(params)
    if loss.data.tobytes() != again.data.tobytes():
        raise DeterminismError("f returned different values for identical parameters")
    if loss.requires_grad:
        tape.backward(loss)
    worst = 0.0
    with no_grad():
        for t in params.values():
            g_ad = t.grad if t.grad is not None else np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            gflat = g_ad.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = f(params).item()
                flat[i] = orig - h
                fm = f(params).item()
                flat[i] = orig
                g_fd = (fp - fm) / (2 * h)
                err = abs(gflat[i] - g_fd) / max(1.0, abs(gflat[i]), abs(g_fd))
                worst = max(worst, err)
    return worst
