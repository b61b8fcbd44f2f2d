"""N-dimensional array with reverse-mode automatic differentiation.

Storage is a contiguous numpy array. Every op builds a node holding its
parents and a closure that maps the output gradient to parent gradients;
:func:`backward` walks the graph in reverse topological order. Saved
activations live in those closures (no checkpointing).

Primitive ops that carry arithmetic cost report it to :mod:`vmformer.counting`:
matmuls and convolutions report multiply-accumulates, softmax / normalization /
activation / pooling report one unit per element. Plain elementwise
arithmetic (residual adds, scaling) is free.
"""

from contextlib import contextmanager

import numpy as np

from .counting import charge

_grad_enabled = True


@contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


_branch_log = None


@contextmanager
def record_branches():
    """Collect the branch mask of every piecewise-linear op run inside the block."""
    global _branch_log
    prev, _branch_log = _branch_log, []
    try:
        yield _branch_log
    finally:
        _branch_log = prev


class Tensor:
    def __init__(self, data, requires_grad=False, name=""):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = _contig(arr)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self.op = "leaf"
        self._parents = ()
        self._backward = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __len__(self):
        return self.shape[0]

    def backward(self):
        backward(self)

    def zero_grad(self):
        self.grad = None

    # -- arithmetic --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return mul(self, reciprocal(_lift(other, self)))

    def __rtruediv__(self, other):
        return mul(_lift(other, self), reciprocal(self))

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- method forms -----------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swap_last(self):
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return transpose(self, tuple(axes))

    def expand(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return broadcast_to(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def gelu(self):
        return gelu(self)

    def softmax(self, axis=-1):
        return softmax(self, axis)

    def log_softmax(self, axis=-1):
        return log_softmax(self, axis)


def _contig(arr):
    # np.ascontiguousarray promotes 0-d arrays to shape (1,)
    arr = np.asarray(arr)
    return arr if arr.flags.c_contiguous else arr.copy()


def _lift(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _make(data, parents, op, backward_fn):
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise --------------------------------------------------------------
def add(a, b):
    b = _lift(b, a)
    a = _lift(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), "add", bw)


def mul(a, b):
    b = _lift(b, a)
    a = _lift(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), "mul", bw)


def neg(a):
    return _make(-a.data, (a,), "neg", lambda g: (-g,))


def reciprocal(a):
    out = 1.0 / a.data
    return _make(out, (a,), "reciprocal", lambda g: (-g * out * out,))


def power(a, p):
    def bw(g):
        return (g * p * a.data ** (p - 1),)

    return _make(a.data**p, (a,), "pow", bw)


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), "exp", lambda g: (g * out,))


def log(a):
    return _make(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def relu(a):
    charge(a.size)
    mask = a.data > 0
    if _branch_log is not None:
        _branch_log.append(mask)
    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,), "relu", lambda g: (g * mask,))


def sigmoid(a):
    charge(a.size)
    with np.errstate(over="ignore"):  # exp overflow -> inf -> exactly 0
        out = 1.0 / (1.0 + np.exp(-a.data))
    return _make(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a):
    """Tanh-approximated GELU."""
    charge(a.size)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out.astype(a.dtype), (a,), "gelu", bw)


def dyrelu(x, a1, b1, a2, b2):
    """Piecewise-linear max(a1*x + b1, a2*x + b2) with broadcast coefficients."""
    charge(x.size)
    y1 = a1.data * x.data + b1.data
    y2 = a2.data * x.data + b2.data
    mask = y1 >= y2
    if _branch_log is not None:
        _branch_log.append(mask)
    out = np.where(mask, y1, y2)

    def bw(g):
        gm = g * mask
        gn = g - gm
        return (
            gm * a1.data + gn * a2.data,
            _unbroadcast(gm * x.data, a1.shape),
            _unbroadcast(gm, b1.shape),
            _unbroadcast(gn * x.data, a2.shape),
            _unbroadcast(gn, b2.shape),
        )

    return _make(out, (x, a1, b1, a2, b2), "dyrelu", bw)


# -- reductions and shape ops -------------------------------------------------
def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), "sum", bw)


def mean(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes]))
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make(out, (a,), "mean", bw)


def reshape(a, shape):
    out = a.data.reshape(shape)
    return _make(out, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    out = _contig(a.data.transpose(axes))
    return _make(out, (a,), "transpose", lambda g: (g.transpose(inv),))


def broadcast_to(a, shape):
    out = _contig(np.broadcast_to(a.data, shape))
    return _make(out, (a,), "broadcast", lambda g: (_unbroadcast(g, a.shape),))


def getitem(a, idx):
    out = _contig(a.data[idx])

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (int, slice, type(Ellipsis), type(None))) for p in parts)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(out, (a,), "getitem", bw)


def concat(tensors, axis=0):
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    return _make(out, tuple(tensors), "concat", bw)


# -- linear algebra --------------------------------------------------------------
def matmul(a, b):
    """Matrix product over the last two axes, leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    charge(out.size * a.shape[-1])

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), "matmul", bw)


def softmax(a, axis=-1):
    charge(a.size)
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), "softmax", bw)


def log_softmax(a, axis=-1):
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), "log_softmax", bw)


# -- normalization -------------------------------------------------------------
def _normalize_backward(g_hat, xhat, inv_std, axes):
    m1 = g_hat.mean(axis=axes, keepdims=True)
    m2 = (g_hat * xhat).mean(axis=axes, keepdims=True)
    return inv_std * (g_hat - m1 - xhat * m2)


def layer_norm(x, weight=None, bias=None, eps=1e-5):
    """Normalize over the last axis, optional affine."""
    charge(x.size)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = xhat
    if weight is not None:
        out = out * weight.data + bias.data
    parents = (x,) if weight is None else (x, weight, bias)

    def bw(g):
        g_hat = g if weight is None else g * weight.data
        gx = _normalize_backward(g_hat, xhat, inv_std, (-1,))
        if weight is None:
            return (gx,)
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out.astype(x.dtype), parents, "layer_norm", bw)


def group_norm(x, groups, weight, bias, eps=1e-5):
    """Group normalization over (channels/groups, spatial...) of an N x C x ... input."""
    charge(x.size)
    n, c = x.shape[:2]
    if c % groups:
        raise ValueError(f"{c} channels not divisible into {groups} groups")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=-1, keepdims=True)
    var = xg.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv_std).reshape(x.shape)
    bshape = (1, c) + (1,) * (x.ndim - 2)
    w = weight.data.reshape(bshape)
    out = xhat * w + bias.data.reshape(bshape)

    def bw(g):
        g_hat = (g * w).reshape(n, groups, -1)
        gx = _normalize_backward(g_hat, xhat.reshape(n, groups, -1), inv_std, (-1,))
        red = (0,) + tuple(range(2, x.ndim))
        return gx.reshape(x.shape), (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make(out.astype(x.dtype), (x, weight, bias), "group_norm", bw)


# -- convolution and pooling ------------------------------------------------------
def conv_extent(length, k, s, p):
    return (length + 2 * p - k) // s + 1


def _conv_geometry(x_shape, kshape, stride, padding):
    out = tuple(conv_extent(L, k, s, p) for L, k, s, p in zip(x_shape[2:], kshape, stride, padding))
    if min(out) < 1:
        raise ValueError(
            f"non-positive conv output extent {out} for input {x_shape[2:]}, "
            f"kernel {kshape}, stride {stride}, padding {padding}"
        )
    return out


def _window(xp, offs, stride, out_ext):
    (i, j, k), (st, sh, sw), (to, ho, wo) = offs, stride, out_ext
    return xp[
        :,
        :,
        i : i + st * (to - 1) + 1 : st,
        j : j + sh * (ho - 1) + 1 : sh,
        k : k + sw * (wo - 1) + 1 : sw,
    ]


def _pad(x, padding):
    pt, ph, pw = padding
    if not (pt or ph or pw):
        return x
    return np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))


def _offsets(kshape):
    kt, kh, kw = kshape
    return [(i, j, k) for i in range(kt) for j in range(kh) for k in range(kw)]


def conv3d(x, w, stride=(1, 1, 1), padding=(0, 0, 0)):
    """Dense 3D convolution. x: N x Ci x T x H x W, w: Co x Ci x kt x kh x kw."""
    n, ci = x.shape[:2]
    co, ci2 = w.shape[:2]
    if ci != ci2:
        raise ValueError(f"conv3d channel mismatch: input {x.shape}, weight {w.shape}")
    kshape = w.shape[2:]
    out_ext = _conv_geometry(x.shape, kshape, stride, padding)
    p = int(np.prod(out_ext))
    charge(n * co * p * ci * int(np.prod(kshape)))
    xp = _pad(x.data, padding)
    out = np.zeros((n, co, p), dtype=np.result_type(x.dtype, w.dtype))
    offs = _offsets(kshape)
    for o in offs:
        xs = _window(xp, o, stride, out_ext).reshape(n, ci, p)
        out += np.matmul(w.data[:, :, o[0], o[1], o[2]], xs)
    out = out.reshape((n, co) + out_ext)

    def bw(g):
        g2 = g.reshape(n, co, p)
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for o in offs:
            wo = w.data[:, :, o[0], o[1], o[2]]
            xs = _window(xp, o, stride, out_ext).reshape(n, ci, p)
            gw[:, :, o[0], o[1], o[2]] = np.tensordot(g2, xs, axes=([0, 2], [0, 2]))
            if x.requires_grad:
                _window(gxp, o, stride, out_ext)[...] += np.matmul(wo.T, g2).reshape((n, ci) + out_ext)
        return (_crop(gxp, padding) if x.requires_grad else None), gw

    return _make(out, (x, w), "conv3d", bw)


def _crop(xp, padding):
    pt, ph, pw = padding
    t, h, w = xp.shape[2:]
    return xp[:, :, pt : t - pt, ph : h - ph, pw : w - pw]


def conv3d_depthwise(x, w, stride=(1, 1, 1), padding=(0, 0, 0)):
    """Per-channel 3D convolution. x: N x C x T x H x W, w: C x kt x kh x kw."""
    n, c = x.shape[:2]
    if w.shape[0] != c or w.ndim != 4:
        raise ValueError(f"depthwise kernel {w.shape} does not match input channels {c}")
    kshape = w.shape[1:]
    out_ext = _conv_geometry(x.shape, kshape, stride, padding)
    charge(n * c * int(np.prod(out_ext)) * int(np.prod(kshape)))
    xp = _pad(x.data, padding)
    out = np.zeros((n, c) + out_ext, dtype=np.result_type(x.dtype, w.dtype))
    offs = _offsets(kshape)
    for o in offs:
        out += w.data[:, o[0], o[1], o[2]].reshape(1, c, 1, 1, 1) * _window(xp, o, stride, out_ext)

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for o in offs:
            gw[:, o[0], o[1], o[2]] = np.einsum("ncthw,ncthw->c", g, _window(xp, o, stride, out_ext))
            if x.requires_grad:
                wc = w.data[:, o[0], o[1], o[2]].reshape(1, c, 1, 1, 1)
                _window(gxp, o, stride, out_ext)[...] += g * wc
        return (_crop(gxp, padding) if x.requires_grad else None), gw

    return _make(out, (x, w), "conv3d_depthwise", bw)


def conv3d_pointwise(x, w):
    """1x1x1 convolution. x: N x C x T x H x W, w: Co x C."""
    n, c = x.shape[:2]
    if w.ndim != 2 or w.shape[1] != c:
        raise ValueError(f"pointwise weight {w.shape} does not match input channels {c}")
    co = w.shape[0]
    rest = x.shape[2:]
    xf = x.data.reshape(n, c, -1)
    charge(n * co * c * xf.shape[-1])
    out = np.matmul(w.data, xf).reshape((n, co) + rest)

    def bw(g):
        g2 = g.reshape(n, co, -1)
        gx = np.matmul(w.data.T, g2).reshape(x.shape) if x.requires_grad else None
        gw = np.tensordot(g2, xf, axes=([0, 2], [0, 2]))
        return gx, gw

    return _make(out, (x, w), "conv3d_pointwise", bw)


def avg_pool_per_frame(x):
    """N x C x T x H x W -> N x T x C, mean over each frame's spatial grid."""
    charge(x.size)
    n, c, t, h, w = x.shape
    out = _contig(x.data.mean(axis=(3, 4)).transpose(0, 2, 1))

    def bw(g):
        gt = g.transpose(0, 2, 1)[:, :, :, None, None] / (h * w)
        return (np.broadcast_to(gt, x.shape).copy(),)

    return _make(out, (x,), "avg_pool_per_frame", bw)


def global_avg_pool(x):
    """N x C x ... -> N x C."""
    charge(x.size)
    axes = tuple(range(2, x.ndim))
    cnt = int(np.prod(x.shape[2:]))
    out = x.data.mean(axis=axes)

    def bw(g):
        gt = g.reshape(g.shape + (1,) * len(axes)) / cnt
        return (np.broadcast_to(gt, x.shape).copy(),)

    return _make(out, (x,), "global_avg_pool", bw)


# -- autodiff driver ---------------------------------------------------------------
def topological_order(root):
    """Nodes reachable from root, every node after all of its parents."""
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, params=None):
    """Backpropagate from a scalar loss.

    Leaf tensors that require grad get ``.grad`` accumulated. If ``params`` (a
    mapping name -> Tensor) is given, returns name -> gradient array, with zeros
    for parameters the loss does not reach.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg
    if params is None:
        return None
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
