"""Dense float64 tensors with a define-by-run reverse-mode gradient tape.

Every value in the pipeline lives in a `Tensor` (up to 4 axes, contiguous
float64).  Operations record themselves on the tape that tracks their inputs;
`backward` replays the tape in reverse insertion order, which is a valid
reverse topological order because an operation's inputs always precede its
output.  Gradient accumulation over fan-out is plain summation in that fixed
order, so results are bit-reproducible across runs.

Tensors with no tape flow through the same functions as plain numpy
computations, which doubles as the fast inference path.
"""

from __future__ import annotations

import numpy as np

from .errors import (
    ContractError,
    DomainError,
    GradientAbsent,
    ShapeMismatch,
    TapeError,
)

MAX_AXES = 4

LEAKY_SLOPE = 0.2


def _as_array(data):
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim > MAX_AXES:
        raise ShapeMismatch("tensor", arr.shape, detail=f"more than {MAX_AXES} axes")
    if arr.size == 0:
        raise ShapeMismatch("tensor", arr.shape, detail="zero-size axis")
    return np.ascontiguousarray(arr)


class Tensor:
    """A dense float64 array plus an optional handle into a gradient tape."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape=None, node=None):
        self.data = _as_array(data)
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item: tensor of shape {self.shape} is not scalar")
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f" node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar; all arithmetic goes through the module-level primitives
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return negate(self)

    def __pow__(self, exponent):
        return pow_const(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


class _Node:
    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op, inputs, backward):
        self.op = op
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Append-only record of operations for one forward pass."""

    def __init__(self):
        self._nodes = []
        self._leaf_keys = {}

    def __len__(self):
        return len(self._nodes)

    def variable(self, data):
        """Track a new leaf tensor. The array is shared, not copied."""
        node = len(self._nodes)
        self._nodes.append(_Node("leaf", (), None))
        return Tensor(data, self, node)

    def leaf(self, data, key=None):
        """Like `variable` but cached by `key`, so re-wrapping the same
        parameter during one forward pass reuses a single node."""
        if key is not None and id(key) in self._leaf_keys:
            return self._leaf_keys[id(key)]
        t = self.variable(data)
        if key is not None:
            self._leaf_keys[id(key)] = t
        return t

    def _push(self, op, out_data, inputs, backward):
        ids = tuple(t.node if t.tape is self else None for t in inputs)
        node = len(self._nodes)
        self._nodes.append(_Node(op, ids, backward))
        return Tensor(out_data, self, node)


def _record(op, out_data, inputs, backward):
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise TapeError(f"{op}: inputs recorded on two different tapes")
    if tape is None:
        return Tensor(out_data)
    return tape._push(op, out_data, inputs, backward)


class Gradients:
    """Result of `backward`: node-id -> gradient array."""

    def __init__(self, tape, grads):
        self._tape = tape
        self._grads = grads

    def wrt(self, tensor):
        if tensor.tape is None or tensor.node is None:
            raise GradientAbsent("gradient queried for a detached tensor")
        if tensor.tape is not self._tape:
            raise GradientAbsent("tensor belongs to a different tape")
        g = self._grads[tensor.node]
        if g is None:
            return np.zeros_like(tensor.data)
        return g


def backward(loss):
    """Gradient of a scalar loss with respect to every tape input."""
    if loss.tape is None:
        raise ContractError("backward: loss is not recorded on a tape")
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = loss.tape
    grads = [None] * len(tape._nodes)
    grads[loss.node] = np.ones_like(loss.data)
    for nid in range(loss.node, -1, -1):
        g = grads[nid]
        node = tape._nodes[nid]
        if g is None or node.backward is None:
            continue
        for in_id, gin in zip(node.inputs, node.backward(g)):
            if in_id is None or gin is None:
                continue
            if grads[in_id] is None:
                grads[in_id] = gin
            else:
                grads[in_id] = grads[in_id] + gin
    return Gradients(tape, grads)


# ---------------------------------------------------------------------------
# helpers


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def constant(value):
    return Tensor(value)


def _unbroadcast(g, shape):
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binop(op, x, y, fwd, bwd_x, bwd_y):
    x, y = as_tensor(x), as_tensor(y)
    try:
        np.broadcast_shapes(x.shape, y.shape)
    except ValueError:
        raise ShapeMismatch(op, x.shape, y.shape)
    out = fwd(x.data, y.data)
    xd, yd = x.data, y.data

    def bk(g):
        return (
            _unbroadcast(bwd_x(g, xd, yd), xd.shape),
            _unbroadcast(bwd_y(g, xd, yd), yd.shape),
        )

    return _record(op, out, (x, y), bk)


def _unop(op, x, fwd, bwd):
    x = as_tensor(x)
    out = fwd(x.data)
    xd = x.data

    def bk(g):
        return (bwd(g, xd, out),)

    return _record(op, out, (x,), bk)


# ---------------------------------------------------------------------------
# elementwise primitives


def add(x, y):
    return _binop("add", x, y, np.add, lambda g, x, y: g, lambda g, x, y: g)


def subtract(x, y):
    return _binop("subtract", x, y, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def multiply(x, y):
    return _binop("multiply", x, y, np.multiply,
                  lambda g, x, y: g * y, lambda g, x, y: g * x)


def divide(x, y):
    return _binop("divide", x, y, np.divide,
                  lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def negate(x):
    return _unop("negate", x, np.negative, lambda g, x, out: -g)


def absolute(x):
    # subgradient 0 at 0 (np.sign(0) == 0)
    return _unop("absolute", x, np.abs, lambda g, x, out: g * np.sign(x))


def exp(x):
    return _unop("exp", x, np.exp, lambda g, x, out: g * out)


def log(x):
    x = as_tensor(x)
    if np.any(x.data <= 0.0):
        raise DomainError("log: input must be strictly positive")
    return _unop("log", x, np.log, lambda g, x, out: g / x)


def sqrt(x):
    x = as_tensor(x)
    if np.any(x.data < 0.0):
        raise DomainError("sqrt: negative input")
    return _unop("sqrt", x, np.sqrt, lambda g, x, out: g * 0.5 / out)


def tanh(x):
    return _unop("tanh", x, np.tanh, lambda g, x, out: g * (1.0 - out * out))


def sigmoid(x):
    return _unop("sigmoid", x,
                 lambda x: 0.5 * (np.tanh(0.5 * x) + 1.0),
                 lambda g, x, out: g * out * (1.0 - out))


def softplus(x):
    return _unop("softplus", x,
                 lambda x: np.logaddexp(0.0, x),
                 lambda g, x, out: g * 0.5 * (np.tanh(0.5 * x) + 1.0))


def relu(x):
    # subgradient 0 at 0
    return _unop("relu", x,
                 lambda x: np.maximum(x, 0.0),
                 lambda g, x, out: g * (x > 0.0))


def leaky_relu(x, slope=LEAKY_SLOPE):
    return _unop("leaky_relu", x,
                 lambda x: np.where(x > 0.0, x, slope * x),
                 lambda g, x, out: g * np.where(x > 0.0, 1.0, slope))


def pow_const(x, exponent):
    x = as_tensor(x)
    p = float(exponent)
    if p != int(p) and np.any(x.data < 0.0):
        raise DomainError("pow_const: negative base with non-integer exponent")
    return _unop("pow_const", x,
                 lambda x: x ** p,
                 lambda g, x, out: g * p * x ** (p - 1.0))


def sin(x):
    return _unop("sin", x, np.sin, lambda g, x, out: g * np.cos(x))


def cos(x):
    return _unop("cos", x, np.cos, lambda g, x, out: -g * np.sin(x))


def clamp(x, lo, hi):
    lo, hi = float(lo), float(hi)
    return _unop("clamp", x,
                 lambda x: np.clip(x, lo, hi),
                 lambda g, x, out: g * ((x >= lo) & (x <= hi)))


# ---------------------------------------------------------------------------
# reductions


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def reduce_sum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)
    shape = x.data.shape

    def bk(g):
        return (_expand_reduced(g, shape, axis, keepdims).copy(),)

    return _record("sum", out, (x,), bk)


def reduce_mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    shape = x.data.shape
    count = x.data.size if axis is None else shape[axis]

    def bk(g):
        return (_expand_reduced(g, shape, axis, keepdims) / count,)

    return _record("mean", out, (x,), bk)


def reduce_max(x, axis=None, keepdims=False):
    """Max reduction; ties route the gradient to the first occurrence."""
    x = as_tensor(x)
    xd = x.data
    out = xd.max(axis=axis, keepdims=keepdims)

    def bk(g):
        gx = np.zeros_like(xd)
        if axis is None:
            idx = np.unravel_index(np.argmax(xd), xd.shape)
            gx[idx] = g.reshape(())
        else:
            idx = np.expand_dims(np.argmax(xd, axis=axis), axis)
            ge = g if keepdims else np.expand_dims(g, axis)
            np.put_along_axis(gx, idx, ge, axis)
        return (gx,)

    return _record("max", out, (x,), bk)


def ordered_sum(x, axis=0):
    """Sum along an axis in value-sorted order.

    The result depends only on the multiset of addends, not on their
    ordering along the axis — this is what makes set aggregation
    bit-exactly permutation invariant.
    """
    x = as_tensor(x)
    srt = np.sort(x.data, axis=axis)
    out = srt.sum(axis=axis)
    shape = x.data.shape

    def bk(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record("ordered_sum", out, (x,), bk)


def softmax(x, axis):
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def bk(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _record("softmax", out, (x,), bk)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x, shape):
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeMismatch("reshape", x.shape, shape, detail="element count differs")
    out = x.data.reshape(shape)
    orig = x.data.shape

    def bk(g):
        return (g.reshape(orig),)

    return _record("reshape", out, (x,), bk)


def broadcast_to(x, shape):
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeMismatch("broadcast_to", x.shape, shape)
    orig = x.data.shape

    def bk(g):
        return (_unbroadcast(g, orig),)

    return _record("broadcast_to", out, (x,), bk)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat: empty input list")
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        s = list(t.shape)
        if len(s) != len(base) or any(a != b for i, (a, b) in enumerate(zip(s, base)) if i != axis):
            raise ShapeMismatch("concat", tensors[0].shape, t.shape)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bk(g):
        sl = [slice(None)] * g.ndim
        grads = []
        for i in range(len(sizes)):
            sl[axis] = slice(bounds[i], bounds[i + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return _record("concat", out, tuple(tensors), bk)


def slice_axis(x, axis, start, stop):
    x = as_tensor(x)
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, stop)
    out = np.ascontiguousarray(x.data[tuple(sl)])
    shape = x.data.shape

    def bk(g):
        gx = np.zeros(shape)
        gx[tuple(sl)] = g
        return (gx,)

    return _record("slice_axis", out, (x,), bk)


def flip_w(x):
    """Reverse the width (last) axis."""
    x = as_tensor(x)
    out = np.ascontiguousarray(x.data[..., ::-1])

    def bk(g):
        return (np.ascontiguousarray(g[..., ::-1]),)

    return _record("flip_w", out, (x,), bk)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def bk(g):
        return (g @ bd.T, ad.T @ g)

    return _record("matmul", out, (a, b), bk)


def euler_rotation(angles_deg):
    """Rotation matrix for intrinsic yaw-pitch-roll angles in degrees.

    Axes follow the camera frame (x right, y down, z forward): yaw about y,
    pitch about x, roll about z, composed as R = Ry @ Rx @ Rz.
    """
    t = as_tensor(angles_deg)
    if t.shape != (3,):
        raise ShapeMismatch("euler_rotation", t.shape, (3,))
    rad = np.deg2rad(t.data)
    cy, sy = np.cos(rad[0]), np.sin(rad[0])
    cp, sp = np.cos(rad[1]), np.sin(rad[1])
    cr, sr = np.cos(rad[2]), np.sin(rad[2])
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    rz = np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]])
    out = ry @ rx @ rz

    dry = np.array([[-sy, 0.0, cy], [0.0, 0.0, 0.0], [-cy, 0.0, -sy]])
    drx = np.array([[0.0, 0.0, 0.0], [0.0, -sp, -cp], [0.0, cp, -sp]])
    drz = np.array([[-sr, -cr, 0.0], [cr, -sr, 0.0], [0.0, 0.0, 0.0]])
    scale = np.pi / 180.0

    def bk(g):
        gy = (g * (dry @ rx @ rz)).sum() * scale
        gp = (g * (ry @ drx @ rz)).sum() * scale
        gr = (g * (ry @ rx @ drz)).sum() * scale
        return (np.array([gy, gp, gr]),)

    return _record("euler_rotation", out, (t,), bk)


# ---------------------------------------------------------------------------
# convolution / pooling / resampling


def conv2d(x, w, stride=1, padding=0):
    """2D cross-correlation with zero padding; stride 1 or 2.

    Input [C,H,W] or [B,C,H,W]; kernel [O,C,kh,kw].
    """
    x, w = as_tensor(x), as_tensor(w)
    if stride not in (1, 2):
        raise ContractError(f"conv2d: stride must be 1 or 2, got {stride}")
    if w.data.ndim != 4:
        raise ShapeMismatch("conv2d", w.shape, detail="kernel must have 4 axes")
    batched = x.data.ndim == 4
    xb = x.data if batched else x.data[None]
    if xb.ndim != 4 or xb.shape[1] != w.shape[1]:
        raise ShapeMismatch("conv2d", x.shape, w.shape)
    B, C, H, W = xb.shape
    O, _, kh, kw = w.shape
    p, s = int(padding), int(stride)
    if H + 2 * p < kh or W + 2 * p < kw:
        raise ShapeMismatch("conv2d", x.shape, w.shape, detail="kernel larger than padded input")
    xp = np.pad(xb, ((0, 0), (0, 0), (p, p), (p, p))) if p else xb
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    out = np.einsum("bchwkl,ockl->bohw", win, w.data, optimize=True)
    if not batched:
        out = out[0]
    OH, OW = out.shape[-2], out.shape[-1]
    wd = w.data

    def bk(g):
        gb = g if batched else g[None]
        gw = np.einsum("bohw,bchwkl->ockl", gb, win, optimize=True)
        gxp = np.zeros_like(xp)
        for k in range(kh):
            for l in range(kw):
                gxp[:, :, k:k + s * OH:s, l:l + s * OW:s] += np.einsum(
                    "bohw,oc->bchw", gb, wd[:, :, k, l], optimize=True)
        gx = gxp[:, :, p:p + H, p:p + W] if p else gxp
        return (gx if batched else gx[0], gw)

    return _record("conv2d", out, (x, w), bk)


def avg_pool2d(x, window=None):
    """Average pooling over [C,H,W]: global (window=None) or non-overlapping k×k."""
    x = as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeMismatch("avg_pool2d", x.shape, detail="expects [C,H,W]")
    C, H, W = x.data.shape
    if window is None:
        out = x.data.mean(axis=(1, 2), keepdims=True)

        def bk(g):
            return (np.broadcast_to(g / (H * W), (C, H, W)).copy(),)

        return _record("avg_pool2d", out, (x,), bk)

    k = int(window)
    if H % k or W % k:
        raise ShapeMismatch("avg_pool2d", x.shape, detail=f"size not divisible by window {k}")
    out = x.data.reshape(C, H // k, k, W // k, k).mean(axis=(2, 4))

    def bk(g):
        ge = np.broadcast_to(g[:, :, None, :, None] / (k * k), (C, H // k, k, W // k, k))
        return (ge.reshape(C, H, W).copy(),)

    return _record("avg_pool2d", out, (x,), bk)


def upsample_nearest(x, factor):
    x = as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeMismatch("upsample_nearest", x.shape, detail="expects [C,H,W]")
    f = int(factor)
    C, H, W = x.data.shape
    out = np.repeat(np.repeat(x.data, f, axis=1), f, axis=2)

    def bk(g):
        return (g.reshape(C, H, f, W, f).sum(axis=(2, 4)),)

    return _record("upsample_nearest", out, (x,), bk)


_bilinear_matrix_cache = {}


def _bilinear_matrix(n_in, factor):
    key = (n_in, factor)
    m = _bilinear_matrix_cache.get(key)
    if m is None:
        n_out = n_in * factor
        src = np.clip((np.arange(n_out) + 0.5) / factor - 0.5, 0.0, n_in - 1.0)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        w = src - i0
        m = np.zeros((n_out, n_in))
        m[np.arange(n_out), i0] += 1.0 - w
        m[np.arange(n_out), i1] += w
        _bilinear_matrix_cache[key] = m
    return m


def upsample_bilinear(x, factor):
    """Bilinear upsampling with half-pixel centers; edges clamp so constants
    are preserved."""
    x = as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeMismatch("upsample_bilinear", x.shape, detail="expects [C,H,W]")
    f = int(factor)
    C, H, W = x.data.shape
    my = _bilinear_matrix(H, f)
    mx = _bilinear_matrix(W, f)
    out = np.einsum("oh,chw,pw->cop", my, x.data, mx, optimize=True)

    def bk(g):
        return (np.einsum("oh,cop,pw->chw", my, g, mx, optimize=True),)

    return _record("upsample_bilinear", out, (x,), bk)


# ---------------------------------------------------------------------------
# fractional-coordinate gather / scatter

# Both use the same 4-neighbor bilinear footprint; contributions outside the
# raster are dropped, which makes the two operators exact transposes.


def _bilinear_parts(xc, yc, H, W):
    x0 = np.floor(xc)
    y0 = np.floor(yc)
    fx = xc - x0
    fy = yc - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    cells = []
    for dy, dx, wy, wx in ((0, 0, 1.0 - fy, 1.0 - fx), (0, 1, 1.0 - fy, fx),
                           (1, 0, fy, 1.0 - fx), (1, 1, fy, fx)):
        xi = x0 + dx
        yi = y0 + dy
        ok = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
        flat = np.where(ok, yi * W + xi, 0)
        cells.append((flat, wy * wx * ok, ok))
    return cells, fx, fy


def _bilinear_dw(fx, fy, k):
    # d(weight)/dfx, d(weight)/dfy for cell k in the order used above
    if k == 0:
        return -(1.0 - fy), -(1.0 - fx)
    if k == 1:
        return (1.0 - fy), -fx
    if k == 2:
        return -fy, (1.0 - fx)
    return fy, fx


def gather_bilinear(img, x, y):
    """Read a [C,H,W] image at fractional coordinates -> [C,N].

    Out-of-raster footprint cells contribute zero.
    """
    img, x, y = as_tensor(img), as_tensor(x), as_tensor(y)
    if img.data.ndim != 3 or x.data.ndim != 1 or y.data.shape != x.data.shape:
        raise ShapeMismatch("gather_bilinear", img.shape, x.shape, y.shape)
    C, H, W = img.data.shape
    N = x.data.shape[0]
    flat_img = img.data.reshape(C, H * W)
    cells, fx, fy = _bilinear_parts(x.data, y.data, H, W)
    out = np.zeros((C, N))
    for flat, w, _ok in cells:
        out += flat_img[:, flat] * w

    def bk(g):
        gimg = np.zeros((H * W, C))
        gx = np.zeros(N)
        gy = np.zeros(N)
        for k, (flat, w, ok) in enumerate(cells):
            np.add.at(gimg, flat, (g * w).T)
            vals = (g * flat_img[:, flat]).sum(axis=0) * ok
            dwx, dwy = _bilinear_dw(fx, fy, k)
            gx += vals * dwx
            gy += vals * dwy
        return (np.ascontiguousarray(gimg.T.reshape(C, H, W)), gx, gy)

    return _record("gather_bilinear", out, (img, x, y), bk)


def scatter_bilinear(values, x, y, height, width):
    """Accumulate [C,N] values into a [C,H,W] raster with bilinear weights.

    Exact transpose of `gather_bilinear` for the same coordinates.
    """
    values, x, y = as_tensor(values), as_tensor(x), as_tensor(y)
    if values.data.ndim != 2 or x.data.ndim != 1 or y.data.shape != x.data.shape \
            or values.data.shape[1] != x.data.shape[0]:
        raise ShapeMismatch("scatter_bilinear", values.shape, x.shape, y.shape)
    H, W = int(height), int(width)
    C, N = values.data.shape
    cells, fx, fy = _bilinear_parts(x.data, y.data, H, W)
    acc = np.zeros((H * W, C))
    vd = values.data
    for flat, w, _ok in cells:
        np.add.at(acc, flat, (vd * w).T)
    out = np.ascontiguousarray(acc.T.reshape(C, H, W))

    def bk(g):
        gflat = g.reshape(C, H * W)
        gvals = np.zeros((C, N))
        gx = np.zeros(N)
        gy = np.zeros(N)
        for k, (flat, w, ok) in enumerate(cells):
            at_cell = gflat[:, flat]
            gvals += at_cell * w
            dwx, dwy = _bilinear_dw(fx, fy, k)
            vals = (at_cell * vd).sum(axis=0) * ok
            gx += vals * dwx
            gy += vals * dwy
        return (gvals, gx, gy)

    return _record("scatter_bilinear", out, (values, x, y), bk)
