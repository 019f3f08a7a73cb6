"""Dense float64 tensors with a define-by-run tape for reverse-mode autodiff.

Every differentiable primitive computes its forward value with numpy and, when
gradient recording is on and at least one input requires a gradient, appends a
node to the active :class:`Tape`. A node holds its inputs and a closure mapping
the output cotangent to input cotangents (the VJP). :func:`backward` walks the
tape in reverse append order, which is a valid reverse topological order
because a node can only consume tensors created before it.

The tape is thread-local: one tape per training thread.
"""

import threading
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

from .errors import NonFiniteValue, NoTape, NotScalar, ShapeMismatch, IdOutOfRange

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
LAYER_NORM_EPS = 1e-5


class _Node:
    __slots__ = ("op", "inputs", "vjp")

    def __init__(self, op, inputs, vjp):
        self.op = op
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Append-only list of recorded operations.

    ``generation`` increments on every :meth:`clear`, so handles issued before
    a clear are recognisably stale.
    """

    def __init__(self):
        self.nodes = []
        self.generation = 0

    def record(self, op, inputs, vjp):
        self.nodes.append(_Node(op, inputs, vjp))
        return (self.generation, len(self.nodes) - 1)

    def clear(self):
        self.nodes = []
        self.generation += 1

    def __len__(self):
        return len(self.nodes)


_local = threading.local()


def active_tape():
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def is_grad_enabled():
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    previous = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


class Tensor:
    """A float64 array, optionally tracked for gradients.

    Leaf tensors with ``requires_grad=True`` are parameters: :func:`backward`
    accumulates into their ``grad`` buffer. Intermediate tensors carry a
    ``tape_id`` pointing at the node that produced them.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64, copy=not isinstance(data, np.ndarray) or data.dtype != np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.tape_id = None
        self.name = name

    # -- basic protocol -----------------------------------------------------
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # -- operators ----------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op, data):
    if not np.all(np.isfinite(data)):
        raise NonFiniteValue(f"{op} produced a non-finite value")


def _make(op, data, inputs, vjp):
    _check_finite(op, data)
    out = Tensor(data)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape_id = active_tape().record(op, inputs, vjp)
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shapes(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- backward -----------------------------------------------------------------

def backward(loss):
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    The tape is consumed (cleared) afterwards.
    """
    if loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = active_tape()
    if loss.tape_id is None or loss.tape_id[0] != tape.generation:
        raise NoTape("loss was not produced on the active tape")
    generation = tape.generation
    start = loss.tape_id[1]
    pending = {start: np.ones_like(loss.data)}
    nodes = tape.nodes
    for index in range(start, -1, -1):
        g = pending.pop(index, None)
        if g is None:
            continue
        node = nodes[index]
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            handle = inp.tape_id
            if handle is not None and handle[0] == generation:
                j = handle[1]
                if j in pending:
                    pending[j] = pending[j] + gi
                else:
                    pending[j] = gi
            elif inp.grad is None:
                inp.grad = np.array(gi, dtype=np.float64)
            else:
                inp.grad += gi
    tape.clear()


# -- elementwise arithmetic ----------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes("add", a, b)

    def vjp(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _make("add", a.data + b.data, (a, b), vjp)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes("sub", a, b)

    def vjp(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _make("sub", a.data - b.data, (a, b), vjp)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes("mul", a, b)

    def vjp(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _make("mul", a.data * b.data, (a, b), vjp)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes("div", a, b)
    out = a.data / b.data

    def vjp(g):
        return (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None)

    return _make("div", out, (a, b), vjp)


def scale(x, c):
    """Multiply by a python scalar."""
    x = as_tensor(x)
    c = float(c)
    return _make("scale", x.data * c, (x,), lambda g: (g * c,))


def square(x):
    x = as_tensor(x)
    return _make("square", x.data * x.data, (x,), lambda g: (2.0 * x.data * g,))


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: (g * out,))


def log(x):
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _make("log", out, (x,), lambda g: (g / x.data,))


def sqrt(x):
    x = as_tensor(x)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)
    return _make("sqrt", out, (x,), lambda g: (0.5 * g / out,))


def maximum(x, floor):
    """Elementwise max with a constant; gradient is zero where clamped."""
    x = as_tensor(x)
    keep = x.data >= floor
    return _make("maximum", np.where(keep, x.data, floor), (x,), lambda g: (g * keep,))


# -- activations ---------------------------------------------------------------

def relu(x):
    x = as_tensor(x)
    on = x.data > 0
    return _make("relu", x.data * on, (x,), lambda g: (g * on,))


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x):
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def gelu(x):
    """Exact GELU, x * Phi(x)."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
    return _make("gelu", x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


# -- linear algebra and shape ----------------------------------------------------

def matmul(a, b):
    """Batched matrix product ``[..., M, K] @ [..., K, N]``.

    Leading (batch) dims broadcast; the gradient is summed back over them.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: cannot contract {a.shape} with {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeMismatch(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make("matmul", a.data @ b.data, (a, b), vjp)


def transpose(x, axes=None):
    """Permute axes; default swaps the last two."""
    x = as_tensor(x)
    if axes is None:
        if x.ndim < 2:
            raise ShapeMismatch(f"transpose needs at least 2 dims, got {x.shape}")
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(x.data, axes), (x,),
                 lambda g: (np.transpose(g, inverse),))


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return _make("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatch(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make("concat", out, tuple(tensors), vjp)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


def getitem(x, index):
    """Numpy-style indexing (basic or advanced); gradient scatters back."""
    x = as_tensor(x)
    out = x.data[index]

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _make("slice", np.array(out, dtype=np.float64), (x,), vjp)


def embedding_lookup(table, ids):
    """Rows of ``table`` [V, H] selected by integer ``ids`` (any shape)."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError(f"ids must be integers, got {ids.dtype}")
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        bad = ids.min() if ids.min() < 0 else ids.max()
        raise IdOutOfRange(int(bad), vocab)

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make("embedding_lookup", table.data[ids], (table,), vjp)


def gather_last(x, index):
    """``out[..., ] = x[..., index[...]]`` along the last axis."""
    x = as_tensor(x)
    index = np.asarray(index)
    if index.shape != x.shape[:-1]:
        raise ShapeMismatch(f"gather_last: index {index.shape} vs input {x.shape}")
    picked = np.take_along_axis(x.data, index[..., None], axis=-1)[..., 0]

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, index[..., None], g[..., None], axis=-1)
        return (gx,)

    return _make("gather_last", picked, (x,), vjp)


# -- reductions -----------------------------------------------------------------

def _expand_like(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)) if not keepdims else g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    return _make("sum", np.asarray(out, dtype=np.float64), (x,),
                 lambda g: (np.array(_expand_like(g, x.shape, axis, keepdims)),))


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    count = x.data.size / max(np.asarray(out).size, 1)
    return _make("mean", np.asarray(out, dtype=np.float64), (x,),
                 lambda g: (np.array(_expand_like(g, x.shape, axis, keepdims)) / count,))


def tmax(x, axis=-1):
    """Max along one axis; the gradient goes to the first arg-max."""
    x = as_tensor(x)
    arg = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis)

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _make("max", np.squeeze(out, axis=axis), (x,), vjp)


# -- normalisation ---------------------------------------------------------------

def softmax(x):
    """Softmax over the last axis."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make("softmax", out, (x,), vjp)


def log_softmax(x):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make("log_softmax", out, (x,), vjp)


def layer_norm(x, gain, bias, eps=LAYER_NORM_EPS):
    """Normalise over the last axis, then apply ``gain`` and ``bias`` [H]."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    h = x.shape[-1]
    if gain.shape != (h,) or bias.shape != (h,):
        raise ShapeMismatch(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs hidden {h}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, h).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, h).sum(axis=0)
        return gx, ggain, gbias

    return _make("layer_norm", out, (x, gain, bias), vjp)


# -- convolutions ---------------------------------------------------------------

def conv1d(x, weight, bias=None, stride=1, padding=0):
    """1-d convolution over time, channels last.

    x: [B, T, Cin]; weight: [K, Cin, Cout]; bias: [Cout] or None.
    Output length is ``(T + 2*padding - K) // stride + 1``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 3 or x.shape[2] != weight.shape[1]:
        raise ShapeMismatch(f"conv1d: input {x.shape} vs weight {weight.shape}")
    batch, length, cin = x.shape
    k, _, cout = weight.shape
    out_len = (length + 2 * padding - k) // stride + 1
    if out_len < 1:
        raise ShapeMismatch(f"conv1d: input length {length} too short for kernel {k}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (0, 0)))
    idx = np.arange(out_len)[:, None] * stride + np.arange(k)[None, :]  # [Tout, K]
    cols = xp[:, idx, :].reshape(batch, out_len, k * cin)
    w2 = weight.data.reshape(k * cin, cout)
    out = cols @ w2
    inputs = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        inputs = (x, weight, bias)

    def vjp(g):
        gx = gw = None
        if x.requires_grad:
            gcols = (g @ w2.T).reshape(batch, out_len, k, cin)
            gxp = np.zeros_like(xp)
            np.add.at(gxp, (slice(None), idx), gcols)
            gx = gxp[:, padding:padding + length, :]
        if weight.requires_grad:
            gw = np.einsum("btc,bto->co", cols, g).reshape(k, cin, cout)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1)) if bias.requires_grad else None)
        return tuple(grads)

    return _make("conv1d", out, inputs, vjp)


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-d convolution, channels first.

    x: [B, C, H, W]; weight: [Cout, C, kh, kw]; bias: [Cout] or None.
    Returns [B, Cout, Hout, Wout].
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"conv2d: input {x.shape} vs weight {weight.shape}")
    batch, cin, height, width = x.shape
    cout, _, kh, kw = weight.shape
    hout = (height + 2 * padding - kh) // stride + 1
    wout = (width + 2 * padding - kw) // stride + 1
    if hout < 1 or wout < 1:
        raise ShapeMismatch(f"conv2d: input {x.shape} too small for kernel {kh}x{kw}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    rows = (np.arange(hout) * stride)[:, None, None, None] + np.arange(kh)[None, None, :, None]
    colsi = (np.arange(wout) * stride)[None, :, None, None] + np.arange(kw)[None, None, None, :]
    # patches: [B, C, Hout, Wout, kh, kw]
    patches = xp[:, :, rows, colsi]
    cols = patches.transpose(0, 2, 3, 1, 4, 5).reshape(batch, hout * wout, cin * kh * kw)
    w2 = weight.data.reshape(cout, cin * kh * kw).T
    out = (cols @ w2).reshape(batch, hout, wout, cout).transpose(0, 3, 1, 2)
    inputs = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None, None]
        inputs = (x, weight, bias)

    def vjp(g):
        gx = gw = None
        g2 = g.transpose(0, 2, 3, 1).reshape(batch, hout * wout, cout)
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(batch, hout, wout, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            gxp = np.zeros_like(xp)
            np.add.at(gxp, (slice(None), slice(None), rows, colsi), gcols)
            gx = gxp[:, :, padding:padding + height, padding:padding + width]
        if weight.requires_grad:
            gw = np.einsum("bpk,bpo->ok", cols, g2).reshape(weight.shape)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if bias.requires_grad else None)
        return tuple(grads)

    return _make("conv2d", np.ascontiguousarray(out), inputs, vjp)


# -- composites ------------------------------------------------------------------

def dropout(x, p, rng, training=True):
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, keep)


def linear(x, weight, bias=None):
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def l2_normalize(x, eps=1e-12):
    """Rows scaled to unit Euclidean norm along the last axis.

    The squared norm is clamped at ``eps**2`` rather than offset, so rows
    longer than ``eps`` are normalized exactly.
    """
    norm = sqrt(maximum(tsum(square(x), axis=-1, keepdims=True), eps * eps))
    return div(x, norm)
