"""Dense float64 arrays with reverse-mode automatic differentiation.

Every differentiable computation in the model and the losses is built from
the primitives in this module.  Shapes are strict: elementwise ops require
identical shapes, matmul requires compatible 2-D operands, and the only
implicit broadcast is multiplication by a python scalar.
"""

import math
import struct

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Value:
    """Node in the autodiff graph: an ndarray, a grad slot and provenance."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, _parents=(), _op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        if self.data.size == 0:
            raise ValueError(f"{_op}: zero-extent shape {self.data.shape}")
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = None
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def ensure_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Value(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- operator sugar (strict shapes; scalars only via scalar_mul) --

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Value):
            return mul_elem(self, other)
        return scalar_mul(self, float(other))

    def __rmul__(self, other):
        return scalar_mul(self, float(other))

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape):
        return reshape(self, shape)

    def backward(self):
        """Reverse sweep from a scalar root.

        Leaf grads accumulate across calls (zero_grad resets them);
        interior node grads are recomputed fresh on every sweep.
        """
        if self.data.size != 1:
            raise ValueError(f"backward: root must be scalar, got shape {self.data.shape}")
        order = _toposort(self)
        for node in order:
            if node._backward is not None:
                node.grad = np.zeros_like(node.data)
        self.ensure_grad()
        self.grad = self.grad + np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()


def const(data):
    """Wrap an ndarray as a constant (no gradient) graph input."""
    return Value(data, requires_grad=False)


def param(data):
    return Value(data, requires_grad=True)


def _toposort(root):
    """Iterative post-order over the requires_grad part of the graph."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def _out(data, parents, op):
    req = any(p.requires_grad for p in parents)
    return Value(data, requires_grad=req, _parents=tuple(parents), _op=op)


def _check_same_shape(op, a, b):
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch, expected {a.data.shape}, got {b.data.shape}")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul: expected 2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul: inner dims differ, {a.data.shape} x {b.data.shape}")
    out = _out(a.data @ b.data, (a, b), "matmul")

    def _backward():
        g = out.grad
        if a.requires_grad:
            a.ensure_grad()
            a.grad += g @ b.data.T
        if b.requires_grad:
            b.ensure_grad()
            b.grad += a.data.T @ g
    out._backward = _backward
    return out


def add(a, b):
    _check_same_shape("add", a, b)
    out = _out(a.data + b.data, (a, b), "add")

    def _backward():
        if a.requires_grad:
            a.ensure_grad()
            a.grad += out.grad
        if b.requires_grad:
            b.ensure_grad()
            b.grad += out.grad
    out._backward = _backward
    return out


def sub(a, b):
    _check_same_shape("sub", a, b)
    out = _out(a.data - b.data, (a, b), "sub")

    def _backward():
        if a.requires_grad:
            a.ensure_grad()
            a.grad += out.grad
        if b.requires_grad:
            b.ensure_grad()
            b.grad -= out.grad
    out._backward = _backward
    return out


def mul_elem(a, b):
    _check_same_shape("mul_elem", a, b)
    out = _out(a.data * b.data, (a, b), "mul_elem")

    def _backward():
        if a.requires_grad:
            a.ensure_grad()
            a.grad += out.grad * b.data
        if b.requires_grad:
            b.ensure_grad()
            b.grad += out.grad * a.data
    out._backward = _backward
    return out


def scalar_mul(a, c):
    c = float(c)
    out = _out(a.data * c, (a,), "scalar_mul")

    def _backward():
        if a.requires_grad:
            a.ensure_grad()
            a.grad += out.grad * c
    out._backward = _backward
    return out


def relu(a):
    out = _out(np.maximum(a.data, 0.0), (a,), "relu")

    def _backward():
        if a.requires_grad:
            a.ensure_grad()
            a.grad += out.grad * (a.data > 0.0)
    out._backward = _backward
    return out


def gelu(a):
    """Exact (erf) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = _out(x * cdf, (a,), "gelu")

    def _backward():
        if a.requires_grad:
            a.ensure_grad()
            pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
            a.grad += out.grad * (cdf + x * pdf)
    out._backward = _backward
    return out


def sigmoid(a):
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = _out(y, (a,), "sigmoid")

    def _backward():
        if a.requires_grad:
            a.ensure_grad()
            a.grad += out.grad * y * (1.0 - y)
    out._backward = _backward
    return out


def exp(a):
    y = np.exp(a.data)
    out = _out(y, (a,), "exp")

    def _backward():
        if a.requires_grad:
            a.ensure_grad()
            a.grad += out.grad * y
    out._backward = _backward
    return out


def log(a):
    out = _out(np.log(a.data), (a,), "log")

    def _backward():
        if a.requires_grad:
            a.ensure_grad()
            a.grad += out.grad / a.data
    out._backward = _backward
    return out


def sum_(a, axis=None):
    out = _out(np.sum(a.data, axis=axis), (a,), "sum")

    def _backward():
        if a.requires_grad:
            a.ensure_grad()
            g = out.grad
            if axis is not None:
                g = np.expand_dims(g, axis)
            a.grad += np.broadcast_to(g, a.data.shape)
    out._backward = _backward
    return out


def mean(a, axis=None):
    n = a.data.size if axis is None else a.data.shape[axis]
    out = _out(np.mean(a.data, axis=axis), (a,), "mean")

    def _backward():
        if a.requires_grad:
            a.ensure_grad()
            g = out.grad
            if axis is not None:
                g = np.expand_dims(g, axis)
            a.grad += np.broadcast_to(g, a.data.shape) / n
    out._backward = _backward
    return out


def max_over_axis(a, axis):
    out = _out(np.max(a.data, axis=axis), (a,), "max_over_axis")
    # ties route the gradient to the first (lowest-index) maximum
    idx = np.argmax(a.data, axis=axis)
    mask = np.zeros_like(a.data)
    np.put_along_axis(mask, np.expand_dims(idx, axis), 1.0, axis)

    def _backward():
        if a.requires_grad:
            a.ensure_grad()
            a.grad += mask * np.expand_dims(out.grad, axis)
    out._backward = _backward
    return out


def softmax_over_axis(a, axis):
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)
    out = _out(y, (a,), "softmax_over_axis")

    def _backward():
        if a.requires_grad:
            a.ensure_grad()
            g = out.grad
            dot = np.sum(g * y, axis=axis, keepdims=True)
            a.grad += y * (g - dot)
    out._backward = _backward
    return out


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis; gamma/beta are 1-D of matching width."""
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ValueError(f"layer_norm: gamma/beta must have shape ({d},), "
                         f"got {gamma.data.shape} and {beta.data.shape}")
    mu = np.mean(x.data, axis=-1, keepdims=True)
    var = np.mean((x.data - mu) ** 2, axis=-1, keepdims=True)
    inv_sigma = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_sigma
    out = _out(xhat * gamma.data + beta.data, (x, gamma, beta), "layer_norm")

    def _backward():
        g = out.grad
        if gamma.requires_grad:
            gamma.ensure_grad()
            gamma.grad += np.sum(g * xhat, axis=tuple(range(g.ndim - 1)))
        if beta.requires_grad:
            beta.ensure_grad()
            beta.grad += np.sum(g, axis=tuple(range(g.ndim - 1)))
        if x.requires_grad:
            x.ensure_grad()
            dxhat = g * gamma.data
            m1 = np.mean(dxhat, axis=-1, keepdims=True)
            m2 = np.mean(dxhat * xhat, axis=-1, keepdims=True)
            x.grad += inv_sigma * (dxhat - m1 - xhat * m2)
    out._backward = _backward
    return out


def concat(values, axis=0):
    if not values:
        raise ValueError("concat: empty input list")
    out = _out(np.concatenate([v.data for v in values], axis=axis), tuple(values), "concat")
    sizes = [v.data.shape[axis] for v in values]

    def _backward():
        offset = 0
        for v, size in zip(values, sizes):
            if v.requires_grad:
                v.ensure_grad()
                sl = [slice(None)] * out.grad.ndim
                sl[axis] = slice(offset, offset + size)
                v.grad += out.grad[tuple(sl)]
            offset += size
    out._backward = _backward
    return out


def reshape(a, shape):
    out = _out(a.data.reshape(shape), (a,), "reshape")

    def _backward():
        if a.requires_grad:
            a.ensure_grad()
            a.grad += out.grad.reshape(a.data.shape)
    out._backward = _backward
    return out


def transpose(a, axes=None):
    out = _out(np.transpose(a.data, axes), (a,), "transpose")
    inv = None if axes is None else np.argsort(axes)

    def _backward():
        if a.requires_grad:
            a.ensure_grad()
            a.grad += np.transpose(out.grad, inv)
    out._backward = _backward
    return out


def slice_axis(a, axis, start, stop):
    """Contiguous slice along one axis."""
    n = a.data.shape[axis]
    if not (0 <= start < stop <= n):
        raise ValueError(f"slice: [{start}:{stop}] out of range for axis {axis} of extent {n}")
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    out = _out(a.data[sl], (a,), "slice")

    def _backward():
        if a.requires_grad:
            a.ensure_grad()
            a.grad[sl] += out.grad
    out._backward = _backward
    return out


def abs_(a):
    out = _out(np.abs(a.data), (a,), "abs")

    def _backward():
        if a.requires_grad:
            a.ensure_grad()
            a.grad += out.grad * np.sign(a.data)
    out._backward = _backward
    return out


def square(a):
    out = _out(a.data * a.data, (a,), "square")

    def _backward():
        if a.requires_grad:
            a.ensure_grad()
            a.grad += out.grad * 2.0 * a.data
    out._backward = _backward
    return out


def sqrt(a):
    y = np.sqrt(a.data)
    out = _out(y, (a,), "sqrt")

    def _backward():
        if a.requires_grad:
            a.ensure_grad()
            a.grad += out.grad * 0.5 / y
    out._backward = _backward
    return out


# -- 2-D convolution over (C, H, W) maps ------------------------------------

def _conv_out_extent(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


def conv2d(x, kernel, stride=1, padding=0):
    """x: (C,H,W), kernel: (O,C,kh,kw) -> (O,H',W')."""
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ValueError(f"conv2d: expected (C,H,W) and (O,C,kh,kw), got {x.data.shape} and {kernel.data.shape}")
    cin, h, w = x.data.shape
    cout, cin_k, kh, kw = kernel.data.shape
    if cin != cin_k:
        raise ValueError(f"conv2d: channel mismatch, input {cin} vs kernel {cin_k}")
    ho = _conv_out_extent(h, kh, stride, padding)
    wo = _conv_out_extent(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: kernel {kh}x{kw} too large for input {h}x{w} (padding {padding})")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    y = np.zeros((cout, ho, wo))
    for a in range(kh):
        for b in range(kw):
            xs = xp[:, a:a + stride * ho:stride, b:b + stride * wo:stride]
            y += np.tensordot(kernel.data[:, :, a, b], xs, axes=([1], [0]))
    out = _out(y, (x, kernel), "conv2d")

    def _backward():
        g = out.grad
        if x.requires_grad:
            x.ensure_grad()
            dxp = np.zeros_like(xp)
            for a in range(kh):
                for b in range(kw):
                    dxp[:, a:a + stride * ho:stride, b:b + stride * wo:stride] += \
                        np.tensordot(kernel.data[:, :, a, b], g, axes=([0], [0]))
            x.grad += dxp[:, padding:padding + h, padding:padding + w]
        if kernel.requires_grad:
            kernel.ensure_grad()
            for a in range(kh):
                for b in range(kw):
                    xs = xp[:, a:a + stride * ho:stride, b:b + stride * wo:stride]
                    kernel.grad[:, :, a, b] += np.tensordot(g, xs, axes=([1, 2], [1, 2]))
    out._backward = _backward
    return out


def conv2d_transpose(y, kernel, out_hw, stride=1, padding=0):
    """Exact adjoint of conv2d in its first argument.

    y: (O,H',W'), kernel: (O,C,kh,kw) -> (C,H,W) with (H,W) = out_hw.
    """
    if y.data.ndim != 3 or kernel.data.ndim != 4:
        raise ValueError(f"conv2d_transpose: expected (O,H',W') and (O,C,kh,kw), "
                         f"got {y.data.shape} and {kernel.data.shape}")
    cout, ho, wo = y.data.shape
    cout_k, cin, kh, kw = kernel.data.shape
    if cout != cout_k:
        raise ValueError(f"conv2d_transpose: channel mismatch, input {cout} vs kernel {cout_k}")
    h, w = out_hw
    if _conv_out_extent(h, kh, stride, padding) != ho or _conv_out_extent(w, kw, stride, padding) != wo:
        raise ValueError(f"conv2d_transpose: out_hw {out_hw} inconsistent with input {(ho, wo)} "
                         f"for kernel {kh}x{kw}, stride {stride}, padding {padding}")
    xp = np.zeros((cin, h + 2 * padding, w + 2 * padding))
    for a in range(kh):
        for b in range(kw):
            xp[:, a:a + stride * ho:stride, b:b + stride * wo:stride] += \
                np.tensordot(kernel.data[:, :, a, b], y.data, axes=([0], [0]))
    out = _out(xp[:, padding:padding + h, padding:padding + w], (y, kernel), "conv2d_transpose")

    def _backward():
        gp = np.pad(out.grad, ((0, 0), (padding, padding), (padding, padding)))
        if y.requires_grad:
            y.ensure_grad()
            for a in range(kh):
                for b in range(kw):
                    gs = gp[:, a:a + stride * ho:stride, b:b + stride * wo:stride]
                    y.grad += np.tensordot(kernel.data[:, :, a, b], gs, axes=([1], [0]))
        if kernel.requires_grad:
            kernel.ensure_grad()
            for a in range(kh):
                for b in range(kw):
                    gs = gp[:, a:a + stride * ho:stride, b:b + stride * wo:stride]
                    kernel.grad[:, :, a, b] += np.tensordot(y.data, gs, axes=([1, 2], [1, 2]))
    out._backward = _backward
    return out


# ---------------------------------------------------------------------------
# composites built on the primitives
# ---------------------------------------------------------------------------

def reciprocal(a):
    """1/x for strictly positive x, via exp(-log x) so no new primitive is needed."""
    return exp(scalar_mul(log(a), -1.0))


def broadcast_col(v, n):
    """(m,) -> (m,n) by repeating the vector as columns."""
    m = v.data.shape[0]
    return matmul(reshape(v, (m, 1)), const(np.ones((1, n))))


def broadcast_row(v, n):
    """(m,) -> (n,m) by repeating the vector as rows."""
    m = v.data.shape[0]
    return matmul(const(np.ones((n, 1))), reshape(v, (1, m)))


def add_scalar(a, c):
    """a + c for a python constant c (materialized, not broadcast)."""
    return add(a, const(np.full(a.data.shape, float(c))))


def logsumexp(v):
    """Stable log-sum-exp of a 1-D vector Value."""
    c = float(np.max(v.data))
    shifted = add_scalar(v, -c)
    return add_scalar(log(sum_(exp(shifted))), c)


def mean_pool2(img):
    """2x2 mean pooling of an (H,W) Value; H and W must be even."""
    h, w = img.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"mean_pool2: odd extent in {img.data.shape}")
    r = reshape(img, (h // 2, 2, w // 2, 2))
    return mean(mean(r, axis=3), axis=1)


# -- 2-D DFT realized as dense matmuls so gradients flow through matmul -----

def dft2_matrices(h, w):
    """Cosine/sine bases for the 2-D DFT of an h-by-w image.

    Returns ((cos_h, cos_w), (sin_h, sin_w)); see dft2 for how they apply.
    """
    if h < 1 or w < 1:
        raise ValueError(f"dft2_matrices: sizes must be >= 1, got {h}x{w}")

    def _basis(n):
        k = np.arange(n)
        ang = 2.0 * np.pi * np.outer(k, k) / n
        return np.cos(ang), np.sin(ang)

    ch, sh = _basis(h)
    cw, sw = _basis(w)
    return (ch, cw), (sh, sw)


def dft2(img, bases):
    """2-D DFT of an (H,W) Value. Returns (real, imag) Values.

    X = F_h x F_w^T with F = C - iS, so
    Re X = C_h x C_w^T - S_h x S_w^T and Im X = -(C_h x S_w^T + S_h x C_w^T).
    """
    (ch, cw), (sh, sw) = bases
    ch, cw, sh, sw = const(ch), const(cw), const(sh), const(sw)
    cx = matmul(ch, img)
    sx = matmul(sh, img)
    re = sub(matmul(cx, transpose(cw)), matmul(sx, transpose(sw)))
    im = scalar_mul(add(matmul(cx, transpose(sw)), matmul(sx, transpose(cw))), -1.0)
    return re, im


# ---------------------------------------------------------------------------
# primitive registry (for uniform dispatch and the gradient sweep tests)
# ---------------------------------------------------------------------------

PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul_elem": mul_elem,
    "scalar_mul": scalar_mul,
    "relu": relu,
    "gelu": gelu,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "sum": sum_,
    "mean": mean,
    "max_over_axis": max_over_axis,
    "softmax_over_axis": softmax_over_axis,
    "layer_norm": layer_norm,
    "concat": concat,
    "reshape": reshape,
    "transpose": transpose,
    "slice": slice_axis,
    "conv2d": conv2d,
    "conv2d_transpose": conv2d_transpose,
    "abs": abs_,
    "square": square,
    "sqrt": sqrt,
    "dft2": dft2,
}


def apply_primitive(op_kind, inputs, **attrs):
    """Dispatch a primitive by name; inputs is a list of Values."""
    if op_kind not in PRIMITIVES:
        raise ValueError(f"unknown primitive {op_kind!r}")
    fn = PRIMITIVES[op_kind]
    if op_kind == "concat":
        return fn(inputs, **attrs)
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# parameter store and its checkpoint format
# ---------------------------------------------------------------------------

class ParamStore:
    """Named map of trainable Values; iteration order is lexicographic."""

    def __init__(self, rng_seed=0):
        self.rng_seed = int(rng_seed)
        self._params = {}

    def add(self, name, data):
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        v = Value(data, requires_grad=True)
        self._params[name] = v
        return v

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return sorted(self._params)

    def items(self):
        for name in self.names():
            yield name, self._params[name]

    def values(self):
        for name in self.names():
            yield self._params[name]

    def zero_grad(self):
        for v in self._params.values():
            v.zero_grad()

    def num_scalars(self):
        return sum(v.data.size for v in self._params.values())


_MAGIC = b"PCGK"
_VERSION = 1


def save_params(store, path):
    """Write the versioned binary parameter blob (see load_params)."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(struct.pack("<Q", len(store)))
        for name, v in store.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", v.data.ndim))
            for d in v.data.shape:
                f.write(struct.pack("<Q", d))
            f.write(v.data.astype("<f8").tobytes())


def load_params(path, rng_seed=0):
    """Read a parameter blob written by save_params; bit-exact round trip."""
    with open(path, "rb") as f:
        blob = f.read()
    store, _ = read_params_blob(blob, rng_seed)
    return store


def read_params_blob(blob, rng_seed=0):
    """Parse a parameter blob; returns (store, bytes consumed)."""
    if blob[:4] != _MAGIC:
        raise ValueError(f"bad magic {blob[:4]!r}, expected {_MAGIC!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != _VERSION:
        raise ValueError(f"unsupported version {version}")
    (count,) = struct.unpack_from("<Q", blob, 8)
    off = 16
    store = ParamStore(rng_seed)
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", blob, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}Q", blob, off)
        off += 8 * rank
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(dims)
        off += 8 * n
        store.add(name, data.copy())
    return store, off


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

def grad_check(f, store, h=1e-6, max_coords=8, seed=0):
    """Max relative error between analytic grads of f(store) and central differences.

    f rebuilds the scalar loss graph from the current parameter data on
    every call. At most max_coords coordinates per parameter are probed.
    """
    loss = f()
    if not np.isfinite(loss.data).all():
        raise ValueError("grad_check: non-finite loss")
    store.zero_grad()
    loss.backward()
    analytic = {name: (np.zeros_like(v.data) if v.grad is None else v.grad.copy())
                for name, v in store.items()}

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, v in store.items():
        flat = v.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        for i in coords:
            keep = flat[i]
            flat[i] = keep + h
            up = float(f().data)
            flat[i] = keep - h
            dn = float(f().data)
            flat[i] = keep
            numeric = (up - dn) / (2.0 * h)
            a = analytic[name].reshape(-1)[i]
            err = abs(a - numeric) / max(1.0, abs(a))
            worst = max(worst, err)
    return worst
