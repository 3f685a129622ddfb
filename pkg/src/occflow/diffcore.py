"""Dense-tensor core with reverse-mode differentiation.

A `Tensor` wraps a numpy array plus an optional gradient accumulator. Every
operation that touches a tensor requiring gradients records a backward
closure; `Tensor.backward` replays the closures in reverse topological
order. The tape is rebuilt on every forward pass and never reused.

Layout convention for images is NCHW. Test builds run in float64 (the
default); `set_default_dtype` switches the whole package to float32 for
release-speed training.
"""

import math
import struct

import numpy as np

from . import backend as _backend
from .errors import DimensionError, FormatError, ParameterError

_default_dtype = np.float64
_grad_enabled = True


def set_default_dtype(dtype):
    """Set the dtype used for every tensor created from here on."""
    global _default_dtype
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ParameterError(f"default dtype must be float32 or float64, got {dt}")
    _default_dtype = dt.type
    return _default_dtype


def get_default_dtype():
    return np.dtype(_default_dtype)


class no_grad:
    """Context manager that suspends graph recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def is_grad_enabled():
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _default_dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def numpy(self):
        """The underlying array (a view, not a copy)."""
        return self.data

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{grad})"

    # -- gradient machinery -------------------------------------------
    def zero_grad(self):
        self.grad = None

    def detach(self):
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        return out

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's .grad.

        Repeated calls keep accumulating into leaves until they are zeroed.
        """
        if self.data.size != 1:
            raise DimensionError(
                f"backward requires a scalar, got shape {self.data.shape}")
        if not self.requires_grad:
            return
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            nid = id(node)
            if nid in visited:
                continue
            visited.add(nid)
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        # non-leaf grads are scratch space for this call only
        for node in topo:
            if node._backward is not None:
                node.grad = None
        if grad is None:
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
        self.grad = grad if self._backward is not None else (
            grad.copy() if self.grad is None else self.grad + grad)
        for node in reversed(topo):
            fn = node._backward
            if fn is not None and node.grad is not None:
                fn(node.grad)

    # -- operator sugar -------------------------------------------------
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
        return neg(self)

    def __pow__(self, exponent):
        return pow_const(self, exponent)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def abs(self):
        return abs_(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _lift(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _node(data, parents):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    req = False
    if _grad_enabled:
        for p in parents:
            if p.requires_grad:
                req = True
                break
    out.requires_grad = req
    out._parents = tuple(parents) if req else ()
    out._backward = None
    return out


def _acc(t, g, own=False):
    # own=True promises g is a fresh array this closure will not reuse
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if own else g.copy()
    else:
        t.grad += g


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


# -- arithmetic ---------------------------------------------------------

def add(a, b):
    a, b = _lift(a), _lift(b)
    out = _node(a.data + b.data, (a, b))
    if out.requires_grad:
        def _bw(g):
            _acc(a, _unbroadcast(g, a.data.shape))
            _acc(b, _unbroadcast(g, b.data.shape))
        out._backward = _bw
    return out


def sub(a, b):
    a, b = _lift(a), _lift(b)
    out = _node(a.data - b.data, (a, b))
    if out.requires_grad:
        def _bw(g):
            _acc(a, _unbroadcast(g, a.data.shape))
            _acc(b, _unbroadcast(-g, b.data.shape), own=True)
        out._backward = _bw
    return out


def mul(a, b):
    a, b = _lift(a), _lift(b)
    out = _node(a.data * b.data, (a, b))
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                _acc(a, _unbroadcast(g * b.data, a.data.shape), own=True)
            if b.requires_grad:
                _acc(b, _unbroadcast(g * a.data, b.data.shape), own=True)
        out._backward = _bw
    return out


def div(a, b):
    a, b = _lift(a), _lift(b)
    out = _node(a.data / b.data, (a, b))
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                _acc(a, _unbroadcast(g / b.data, a.data.shape), own=True)
            if b.requires_grad:
                _acc(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
                     own=True)
        out._backward = _bw
    return out


def neg(a):
    a = _lift(a)
    out = _node(-a.data, (a,))
    if out.requires_grad:
        def _bw(g):
            _acc(a, -g, own=True)
        out._backward = _bw
    return out


def pow_const(a, exponent):
    a = _lift(a)
    exponent = float(exponent)
    out = _node(a.data ** exponent, (a,))
    if out.requires_grad:
        def _bw(g):
            _acc(a, g * exponent * a.data ** (exponent - 1.0), own=True)
        out._backward = _bw
    return out


def abs_(a):
    a = _lift(a)
    out = _node(np.abs(a.data), (a,))
    if out.requires_grad:
        def _bw(g):
            # subgradient 0 at exactly 0
            _acc(a, g * np.sign(a.data), own=True)
        out._backward = _bw
    return out


def sum_(a, axis=None, keepdims=False):
    a = _lift(a)
    out = _node(a.data.sum(axis=axis, keepdims=keepdims), (a,))
    if out.requires_grad:
        shape = a.data.shape

        def _bw(g):
            gg = g
            if axis is not None and not keepdims:
                axes = (axis,) if isinstance(axis, int) else tuple(axis)
                axes = tuple(ax % len(shape) for ax in axes)
                for ax in sorted(axes):
                    gg = np.expand_dims(gg, ax)
            _acc(a, np.broadcast_to(gg, shape).copy(), own=True)
        out._backward = _bw
    return out


def mean(a, axis=None, keepdims=False):
    a = _lift(a)
    out = _node(a.data.mean(axis=axis, keepdims=keepdims), (a,))
    if out.requires_grad:
        count = a.data.size // max(out.data.size, 1)
        shape = a.data.shape

        def _bw(g):
            gg = g / count
            if axis is not None and not keepdims:
                axes = (axis,) if isinstance(axis, int) else tuple(axis)
                axes = tuple(ax % len(shape) for ax in axes)
                for ax in sorted(axes):
                    gg = np.expand_dims(gg, ax)
            _acc(a, np.broadcast_to(gg, shape).copy(), own=True)
        out._backward = _bw
    return out


def concat(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    out = _node(np.concatenate([t.data for t in tensors], axis=axis), tensors)
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]

        def _bw(g):
            start = 0
            for t, sz in zip(tensors, sizes):
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(start, start + sz)
                _acc(t, np.ascontiguousarray(g[tuple(idx)]), own=True)
                start += sz
        out._backward = _bw
    return out


def getitem(a, idx):
    a = _lift(a)
    out = _node(a.data[idx].copy(), (a,))
    if out.requires_grad:
        def _bw(g):
            buf = np.zeros_like(a.data)
            buf[idx] = g
            _acc(a, buf, own=True)
        out._backward = _bw
    return out


def leaky_relu(a, slope=0.1):
    a = _lift(a)
    slope = a.data.dtype.type(slope)
    out = _node(np.where(a.data >= 0, a.data, a.data * slope), (a,))
    if out.requires_grad:
        def _bw(g):
            _acc(a, np.where(a.data >= 0, g, g * slope), own=True)
        out._backward = _bw
    return out


# -- neural primitives ---------------------------------------------------

def conv2d(x, layer):
    """Apply a ConvLayer to an NCHW tensor."""
    x = _lift(x)
    kern, bias = layer.kernel, layer.bias
    if x.data.ndim != 4:
        raise DimensionError(f"conv2d expects NCHW input, got shape {x.data.shape}")
    if x.data.shape[1] != kern.data.shape[1]:
        raise DimensionError(
            f"conv2d: input has {x.data.shape[1]} channels, "
            f"layer expects {kern.data.shape[1]}")
    stride, padding, dilation = layer.stride, layer.padding, layer.dilation
    k = _backend.kernels
    out = _node(k.conv2d_forward(x.data, kern.data, bias.data,
                                 stride, padding, dilation),
                (x, kern, bias))
    if out.requires_grad:
        in_h, in_w = x.data.shape[2], x.data.shape[3]
        kh, kw = kern.data.shape[2], kern.data.shape[3]

        def _bw(g):
            g = np.ascontiguousarray(g)
            kk = _backend.kernels
            if x.requires_grad:
                _acc(x, kk.conv2d_backward_input(
                    g, kern.data, stride, padding, dilation, in_h, in_w), own=True)
            if kern.requires_grad:
                _acc(kern, kk.conv2d_backward_weight(
                    x.data, g, kh, kw, stride, padding, dilation), own=True)
            if bias.requires_grad:
                _acc(bias, g.sum(axis=(0, 2, 3)), own=True)
        out._backward = _bw
    return out


def resize_bilinear(x, out_h, out_w, align_corners=False):
    """Bilinear resize of an NCHW tensor.

    The whole package runs with align_corners OFF (half-pixel centers);
    the ON convention is implemented for completeness only.
    """
    x = _lift(x)
    if out_h < 1 or out_w < 1:
        raise ParameterError("resize_bilinear: output size must be >= 1")
    if align_corners:
        return _resize_align_on(x, out_h, out_w)
    in_h, in_w = x.data.shape[2], x.data.shape[3]
    out = _node(_backend.kernels.resize_bilinear_forward(x.data, out_h, out_w), (x,))
    if out.requires_grad:
        def _bw(g):
            _acc(x, _backend.kernels.resize_bilinear_backward(
                np.ascontiguousarray(g), in_h, in_w), own=True)
        out._backward = _bw
    return out


def _align_on_matrix(n_out, n_in, dt):
    m = np.zeros((n_out, n_in), dtype=dt)
    if n_out == 1:
        m[0, 0] = 1
        return m
    src = np.arange(n_out, dtype=np.float64) * ((n_in - 1) / (n_out - 1))
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    f = (src - i0).astype(dt)
    i1 = np.minimum(i0 + 1, n_in - 1)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1 - f)
    np.add.at(m, (rows, i1), f)
    return m


def _resize_align_on(x, out_h, out_w):
    in_h, in_w = x.data.shape[2], x.data.shape[3]
    my = _align_on_matrix(out_h, in_h, x.data.dtype)
    mx = _align_on_matrix(out_w, in_w, x.data.dtype)
    data = np.einsum("qw,ncpw->ncpq", mx,
                     np.einsum("ph,nchw->ncpw", my, x.data, optimize=True),
                     optimize=True)
    out = _node(np.ascontiguousarray(data), (x,))
    if out.requires_grad:
        def _bw(g):
            gx = np.einsum("qw,nchq->nchw", mx,
                           np.einsum("ph,ncpq->nchq", my, g, optimize=True),
                           optimize=True)
            _acc(x, np.ascontiguousarray(gx), own=True)
        out._backward = _bw
    return out


# -- layers and parameters ------------------------------------------------

def kaiming_kernel(rng, out_ch, in_ch, kh, kw, slope=0.1):
    """Kaiming fan-in normal init matched to leaky_relu(slope)."""
    fan_in = in_ch * kh * kw
    std = math.sqrt(2.0 / (1.0 + slope * slope) / fan_in)
    return rng.normal(0.0, std, size=(out_ch, in_ch, kh, kw))


class ConvLayer:
    """2-D convolution parameters: kernel (out,in,kh,kw), bias (out,).

    Bias starts at zero; the kernel uses Kaiming fan-in init from the given
    rng, or zeros when rng is None.
    """

    def __init__(self, in_ch, out_ch, ksize, stride=1, padding=None,
                 dilation=1, rng=None):
        if padding is None:
            padding = dilation * (ksize - 1) // 2
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.ksize = ksize
        self.stride = stride
        self.padding = padding
        self.dilation = dilation
        if rng is None:
            kern = np.zeros((out_ch, in_ch, ksize, ksize))
        else:
            kern = kaiming_kernel(rng, out_ch, in_ch, ksize, ksize)
        self.kernel = Tensor(kern, requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True)

    def __call__(self, x):
        return conv2d(x, self)

    def named_parameters(self, prefix=""):
        return [(prefix + "kernel", self.kernel), (prefix + "bias", self.bias)]

    def param_count(self):
        return self.kernel.size + self.bias.size


# -- checkpoint container --------------------------------------------------

CHECKPOINT_MAGIC = b"OIFW"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, state):
    """Write named arrays to the binary checkpoint container.

    Layout (little-endian): magic "OIFW", version u32, count u32, then per
    tensor: name length u16, UTF-8 name, rank u8, extents u32[], float64
    data. Values are stored as float64 regardless of the build dtype.
    """
    items = []
    for name, value in state.items():
        arr = value.data if isinstance(value, Tensor) else value
        items.append((name, np.ascontiguousarray(np.asarray(arr, dtype="<f8"))))
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(items)))
        for name, arr in items:
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            if arr.ndim:
                f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes(order="C"))


def load_checkpoint(path):
    """Read a checkpoint container back into {name: float64 array}."""
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {buf[:4]!r}")
    if len(buf) < 12:
        raise FormatError(f"{path}: truncated checkpoint header")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    state = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + name_len].decode("utf-8")
            if len(buf[off:off + name_len]) != name_len:
                raise FormatError(f"{path}: truncated tensor name")
            off += name_len
            (rank,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", buf, off) if rank else ()
            off += 4 * rank
            n_items = 1
            for s in shape:
                n_items *= s
            nbytes = 8 * n_items
            if off + nbytes > len(buf):
                raise FormatError(f"{path}: truncated tensor data for {name!r}")
            state[name] = np.frombuffer(
                buf, dtype="<f8", count=n_items, offset=off).reshape(shape).copy()
            off += nbytes
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint ({exc})") from exc
    if off != len(buf):
        raise FormatError(f"{path}: {len(buf) - off} trailing bytes after last tensor")
    return state
