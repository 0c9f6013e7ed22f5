"""Minimal reverse-mode automatic differentiation over numpy arrays.

Only the operators needed by the registration network, its losses and the
spatial transformer are provided. Each operation records its parents and a
closure mapping the upstream gradient to gradients for those parents;
``backward`` replays the recorded operations in exact reverse creation order.

Arrays are laid out channels-first: ``(N, C, *spatial)`` with 2 or 3 spatial
axes. Displacement fields are ``(N, ndim, *spatial)`` where component ``a``
displaces along spatial axis ``a``, in pixel units.
"""

import contextlib
import itertools
import threading
from math import prod

import numpy as np

from .errors import DetachedTensorError, OddExtentError, ShapeError

__all__ = [
    "Tensor",
    "backward",
    "no_grad",
    "precision",
    "get_default_dtype",
    "set_default_dtype",
    "add",
    "sub",
    "mul",
    "div",
    "square",
    "sqrt",
    "reduce_sum",
    "reduce_mean",
    "leaky_relu",
    "concat_channels",
    "conv",
    "conv_transpose",
    "resize_linear",
    "grid_sample",
    "grad_check",
]

_state = threading.local()
_seq = itertools.count()
_default_dtype = np.float32


def _grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (thread-local)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def get_default_dtype():
    return _default_dtype


def set_default_dtype(dtype):
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype!r}")
    _default_dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default floating dtype ("float32" or "float64")."""
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class Tensor:
    """An n-dimensional array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._seq = next(_seq)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)


def _lift(value, like=None):
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else _default_dtype
    return Tensor(np.asarray(value, dtype=dtype))


def _make(data, parents, backward_fn):
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    Repeated calls without ``zero_grad`` accumulate.
    """
    if not isinstance(loss, Tensor) or not loss.requires_grad:
        raise DetachedTensorError("loss is not attached to a recorded graph")
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")

    nodes = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in nodes:
            continue
        nodes[id(node)] = node
        stack.extend(p for p in node._parents if p.requires_grad)
    order = sorted(nodes.values(), key=lambda t: t._seq, reverse=True)

    grads = {id(loss): np.ones_like(loss.data)}
    for node in order:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            g = np.asarray(g, dtype=node.dtype).reshape(node.shape)
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw)


def square(x):
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def sqrt(x):
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g / (2.0 * out),))


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(x, axis=None, keepdims=False):
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _make(out, (x,), bw)


def reduce_mean(x, axis=None, keepdims=False):
    axes = _norm_axes(axis, x.ndim)
    n = prod(x.shape[a] for a in axes)
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, x.shape),)

    return _make(out, (x,), bw)


def _reshape(x, shape):
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def _getitem(x, index):
    out = x.data[index]

    def bw(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _make(out, (x,), bw)


def leaky_relu(x, slope=0.2):
    """Elementwise ``max(x, slope * x)``; the subgradient at 0 is ``slope``."""
    pos = x.data > 0
    out = np.where(pos, x.data, x.data * x.dtype.type(slope))
    return _make(out, (x,), lambda g: (np.where(pos, g, g * x.dtype.type(slope)),))


def concat_channels(a, b):
    """Concatenate along axis 1; ``a`` occupies the leading channels."""
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _make(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


# ---------------------------------------------------------------------------
# convolution


def _out_extent(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


def _offsets(ksize):
    return itertools.product(*(range(k) for k in ksize))


def _window(offset, stride, out_ext):
    return (slice(None), slice(None)) + tuple(
        slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(offset, out_ext)
    )


def _im2col(xp, ksize, stride, out_ext):
    n, c = xp.shape[:2]
    cols = np.empty((n, c, prod(ksize), prod(out_ext)), dtype=xp.dtype)
    for j, off in enumerate(_offsets(ksize)):
        cols[:, :, j] = xp[_window(off, stride, out_ext)].reshape(n, c, -1)
    return cols.reshape(n, c * prod(ksize), -1)


def _col2im(cols, padded_shape, ksize, stride, out_ext):
    n, c = padded_shape[:2]
    cols = cols.reshape((n, c, prod(ksize)) + tuple(out_ext))
    xp = np.zeros(padded_shape, dtype=cols.dtype)
    for j, off in enumerate(_offsets(ksize)):
        xp[_window(off, stride, out_ext)] += cols[:, :, j]
    return xp


def _pad(x, padding):
    if padding == 0:
        return x
    return np.pad(x, [(0, 0), (0, 0)] + [(padding, padding)] * (x.ndim - 2))


def _crop(xp, padding):
    if padding == 0:
        return xp
    return xp[(slice(None), slice(None)) + (slice(padding, -padding),) * (xp.ndim - 2)]


def _check_conv(x, w, b):
    nd = x.ndim - 2
    if nd not in (2, 3):
        raise ShapeError(f"spatial rank must be 2 or 3, got input shape {x.shape}")
    if w.ndim != nd + 2:
        raise ShapeError(f"kernel rank {w.ndim} does not match input rank {x.ndim}")
    if b is not None and b.shape != (w.shape[0],) and b.shape != (w.shape[1],):
        raise ShapeError(f"bias shape {b.shape} does not match kernel {w.shape}")


def conv(x, w, b=None, stride=1, padding=0):
    """Cross-correlation of ``x (N,Cin,...)`` with ``w (Cout,Cin,k...)`` plus bias."""
    _check_conv(x, w, b)
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
    ksize = w.shape[2:]
    out_ext = tuple(_out_extent(n, k, stride, padding) for n, k in zip(x.shape[2:], ksize))
    if min(out_ext) < 1:
        raise ShapeError(f"kernel {ksize} too large for input {x.shape}")
    xp = _pad(x.data, padding)
    cols = _im2col(xp, ksize, stride, out_ext)
    w2 = w.data.reshape(w.shape[0], -1)
    out = np.matmul(w2, cols)
    if b is not None:
        out += b.data[:, None]
    out = out.reshape((x.shape[0], w.shape[0]) + out_ext)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(g.shape[0], g.shape[1], -1)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2)
            gx = _crop(_col2im(gcols, xp.shape, ksize, stride, out_ext), padding)
        if w.requires_grad:
            gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=(0, 2))
        return (gx, gw) if b is None else (gx, gw, gb)

    return _make(out, parents, bw)


def conv_transpose(x, w, b=None, stride=2, padding=1):
    """Adjoint of ``conv(., w, stride, padding)`` plus bias.

    ``w`` has the shape of the forward conv's kernel, ``(Cin, Cout, k...)`` from
    the point of view of this op. Output extents are exactly ``input * stride``.
    """
    _check_conv(x, w, b)
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {w.shape[0]}")
    ksize = w.shape[2:]
    in_ext = x.shape[2:]
    out_ext = tuple(n * stride for n in in_ext)
    for n_out, n_in, k in zip(out_ext, in_ext, ksize):
        if _out_extent(n_out, k, stride, padding) != n_in:
            raise ShapeError(
                f"kernel {k}, stride {stride}, padding {padding} cannot map {n_in} -> {n_out}"
            )
    cout = w.shape[1]
    padded_shape = (x.shape[0], cout) + tuple(n + 2 * padding for n in out_ext)
    w2 = w.data.reshape(w.shape[0], -1)
    x2 = x.data.reshape(x.shape[0], x.shape[1], -1)
    out = _crop(_col2im(np.matmul(w2.T, x2), padded_shape, ksize, stride, in_ext), padding)
    if b is not None:
        out += b.data.reshape((1, cout) + (1,) * len(out_ext))
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gcols = _im2col(_pad(g, padding), ksize, stride, in_ext)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.matmul(w2, gcols).reshape(x.shape)
        if w.requires_grad:
            gw = np.tensordot(x2, gcols, axes=([0, 2], [0, 2])).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0,) + tuple(range(2, g.ndim)))
        return (gx, gw) if b is None else (gx, gw, gb)

    return _make(out, parents, bw)


# ---------------------------------------------------------------------------
# resampling


def _interp_matrix(n_in, n_out, dtype):
    """Linear interpolation weights, align-corners-false, edge-clamped."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    if n_in == 1:
        m[:, 0] = 1.0
        return m.astype(dtype)
    src = (rows + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.minimum(np.floor(src).astype(np.intp), n_in - 2)
    t = src - i0
    np.add.at(m, (rows, i0), 1.0 - t)
    np.add.at(m, (rows, i0 + 1), t)
    return m.astype(dtype)


def _apply_along(x, mats):
    for axis, m in enumerate(mats, start=2):
        x = np.moveaxis(np.tensordot(x, m, axes=([axis], [1])), -1, axis)
    return x


def resize_linear(x, factor):
    """Bi/trilinear resize by 2 or 0.5 (align-corners-false, clamped borders)."""
    if factor not in (0.5, 2, 2.0):
        raise ValueError(f"factor must be 0.5 or 2, got {factor}")
    spatial = x.shape[2:]
    if factor == 0.5 and any(n % 2 for n in spatial):
        raise OddExtentError(f"cannot halve odd extents {spatial}")
    new = tuple(int(n * 2) if factor != 0.5 else n // 2 for n in spatial)
    mats = [_interp_matrix(n, m, x.dtype) for n, m in zip(spatial, new)]
    out = _apply_along(x.data, mats)
    return _make(out, (x,), lambda g: (_apply_along(g, [m.T for m in mats]),))


def grid_sample(x, field):
    """Backward warp: ``out(p) = x(p + field(p))``.

    Bi/trilinear interpolation with clamp-to-edge borders. ``field`` is in
    pixel units with one component per spatial axis (axis order).
    """
    spatial = x.shape[2:]
    nd = len(spatial)
    if field.ndim != x.ndim or field.shape[1] != nd or field.shape[2:] != spatial:
        raise ShapeError(f"field shape {field.shape} incompatible with input {x.shape}")
    if field.shape[0] != x.shape[0]:
        raise ShapeError(f"batch mismatch: {x.shape[0]} vs {field.shape[0]}")
    n, c = x.shape[:2]
    npix = prod(spatial)
    dtype = np.result_type(x.dtype, field.dtype)
    strides = [prod(spatial[a + 1:]) for a in range(nd)]
    grid = np.indices(spatial, dtype=dtype)

    base, frac, inside = [], [], []
    for a in range(nd):
        size = spatial[a]
        q = (grid[a] + field.data[:, a]).astype(dtype, copy=False)
        if size == 1:
            base.append(np.zeros(q.shape, dtype=np.intp))
            frac.append(np.zeros(q.shape, dtype=dtype))
            inside.append(np.zeros(q.shape, dtype=bool))
            continue
        qc = np.clip(q, 0, size - 1)
        # non-finite positions index pixel 0 but keep a NaN weight, so they
        # poison the output instead of raising
        safe = np.where(np.isfinite(qc), qc, 0)
        i0 = np.minimum(np.floor(safe).astype(np.intp), size - 2)
        base.append(i0)
        frac.append((qc - i0).astype(dtype, copy=False))
        inside.append((q >= 0) & (q <= size - 1))

    corners = []
    for bits in itertools.product((0, 1), repeat=nd):
        idx = np.zeros((n,) + spatial, dtype=np.intp)
        for a, bit in enumerate(bits):
            if spatial[a] > 1 or bit == 0:
                idx += (base[a] + bit) * strides[a]
        parts = [frac[a] if bit else 1 - frac[a] for a, bit in enumerate(bits)]
        corners.append((bits, idx.reshape(n, npix), parts))

    xf = x.data.reshape(n, c, npix).astype(dtype, copy=False)
    vals = [np.stack([xf[i][:, idx[i]] for i in range(n)]) for _, idx, _ in corners]
    out = np.zeros((n, c, npix), dtype=dtype)
    for (bits, idx, parts), v in zip(corners, vals):
        out += prod(parts).reshape(n, 1, npix) * v
    out = out.reshape(x.shape)

    def bw(g):
        g = g.reshape(n, c, npix)
        gx = gf = None
        if x.requires_grad:
            offset = (np.arange(n * c).reshape(n, c, 1) * npix)
            acc = np.zeros(n * c * npix, dtype=dtype)
            for (bits, idx, parts), _ in zip(corners, vals):
                w = prod(parts).reshape(n, 1, npix)
                flat = (offset + idx[:, None, :]).ravel()
                acc += np.bincount(flat, weights=(g * w).ravel(), minlength=acc.size)
            gx = acc.reshape(x.shape).astype(x.dtype, copy=False)
        if field.requires_grad:
            gf = np.zeros(field.shape, dtype=dtype)
            contrib = [(g * v).sum(axis=1) for v in vals]
            for a in range(nd):
                ga = np.zeros((n, npix), dtype=dtype)
                for (bits, idx, parts), cv in zip(corners, contrib):
                    dw = prod(p for b, p in enumerate(parts) if b != a) if nd > 1 else 1.0
                    sign = 1.0 if bits[a] else -1.0
                    ga += sign * np.reshape(dw, (n, npix)) * cv
                gf[:, a] = ga.reshape((n,) + spatial) * inside[a]
            gf = gf.astype(field.dtype, copy=False)
        return gx, gf

    return _make(out, (x, field), bw)


# ---------------------------------------------------------------------------
# verification


def grad_check(f, inputs, step=1e-4, max_coords=None, seed=0):
    """Largest relative gap between analytic and central-difference gradients.

    ``f`` maps tensors (one per entry of ``inputs``) to a scalar tensor. The
    error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    Evaluation is done in float64. With ``max_coords`` only that many
    randomly chosen coordinates per input are probed.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    with precision(np.float64):
        leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        loss = f(*leaves)
        backward(loss)
        analytic = [
            np.zeros_like(a) if t.grad is None else t.grad for a, t in zip(arrays, leaves)
        ]

        def evaluate():
            with no_grad():
                return float(f(*[Tensor(a) for a in arrays]).data)

        rng = np.random.default_rng(seed)
        worst = 0.0
        for arr, ana in zip(arrays, analytic):
            flat = arr.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + step
                fp = evaluate()
                flat[i] = orig - step
                fm = evaluate()
                flat[i] = orig
                num = (fp - fm) / (2 * step)
                a = ana.reshape(-1)[i]
                worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    return worst
