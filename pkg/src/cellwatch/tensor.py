"""Dense float tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array plus an optional gradient buffer. Every
differentiable op records its parents and a backward closure; calling
``backward()`` on a scalar output replays the recorded graph once in
reverse topological order, accumulating adjoints additively across
fan-out. The graph is consumed by that single call.

Float32 is the working precision. Tests that compare against central
finite differences build their graphs with ``dtype=np.float64`` so the
oracle is not drowned in single-precision noise; every op preserves the
dtype it is given.
"""

import contextlib

import numpy as np

from . import kernels
from .errors import GraphError, NumericsError, ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation forward passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _attach(out, bwd):
    if out.requires_grad:
        out._backward_fn = bwd
    return out


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_done")

    def __init__(self, data, requires_grad=False, dtype=np.float32):
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None
        self._done = False

    # -- construction of graph nodes ------------------------------------

    @staticmethod
    def _node(data, parents, backward_fn):
        rg = _grad_enabled and any(p.requires_grad for p in parents)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.requires_grad = rg
        out.grad = None
        out._parents = tuple(p for p in parents if p.requires_grad) if rg else ()
        out._backward_fn = backward_fn if rg else None
        out._done = False
        return out

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- basic introspection --------------------------------------------

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
        return self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def check_finite(self, where="tensor"):
        """Raise NumericsError if any value is NaN or Inf."""
        if not np.isfinite(self.data).all():
            raise NumericsError(f"non-finite values in {where}")
        return self

    # -- backward pass ---------------------------------------------------

    def backward(self):
        """Populate ``grad`` on every reachable tensor that requires one.

        Only valid on a finite scalar; the recorded graph is consumed, so a
        second call on the same output raises GraphError.
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar, got shape {self.data.shape}")
        if self._done:
            raise GraphError("backward already called on this graph")
        if not self.requires_grad:
            raise GraphError("output is detached from any tensor requiring gradients")
        if not np.isfinite(self.data).all():
            raise NumericsError("non-finite loss value")

        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            if node._parents and node._done:
                raise GraphError("graph already consumed by a previous backward call")
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)
            if node._parents:
                node._done = True
        self._done = True

    # -- elementwise arithmetic ------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            out = Tensor._node(self.data + other.data, (self, other), None)

            def bwd(g):
                if self.requires_grad:
                    self._accum(_unbroadcast(g, self.data.shape))
                if other.requires_grad:
                    other._accum(_unbroadcast(g, other.data.shape))

            return _attach(out, bwd)
        const = np.asarray(other, dtype=self.data.dtype)
        out = Tensor._node(self.data + const, (self,), None)
        return _attach(out, lambda g: self._accum(_unbroadcast(g, self.data.shape)))

    __radd__ = __add__

    def __neg__(self):
        out = Tensor._node(-self.data, (self,), None)
        return _attach(out, lambda g: self._accum(-g))

    def __sub__(self, other):
        return self + (-other if isinstance(other, Tensor) else -np.asarray(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Tensor):
            out = Tensor._node(self.data * other.data, (self, other), None)

            def bwd(g):
                if self.requires_grad:
                    self._accum(_unbroadcast(g * other.data, self.data.shape))
                if other.requires_grad:
                    other._accum(_unbroadcast(g * self.data, other.data.shape))

            return _attach(out, bwd)
        const = np.asarray(other, dtype=self.data.dtype)
        out = Tensor._node(self.data * const, (self,), None)
        return _attach(out, lambda g: self._accum(_unbroadcast(g * const, self.data.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            out = Tensor._node(self.data / other.data, (self, other), None)

            def bwd(g):
                if self.requires_grad:
                    self._accum(_unbroadcast(g / other.data, self.data.shape))
                if other.requires_grad:
                    other._accum(
                        _unbroadcast(-g * self.data / (other.data * other.data), other.data.shape)
                    )

            return _attach(out, bwd)
        return self * (1.0 / np.asarray(other, dtype=self.data.dtype))

    def __pow__(self, p):
        p = float(p)
        out = Tensor._node(self.data**p, (self,), None)
        return _attach(out, lambda g: self._accum(g * p * self.data ** (p - 1.0)))

    # -- shape manipulation ----------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        out = Tensor._node(self.data.reshape(shape), (self,), None)
        return _attach(out, lambda g: self._accum(g.reshape(old)))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = tuple(np.argsort(axes))
        out = Tensor._node(np.ascontiguousarray(self.data.transpose(axes)), (self,), None)
        return _attach(out, lambda g: self._accum(g.transpose(inv)))

    def broadcast_to(self, shape):
        out = Tensor._node(np.broadcast_to(self.data, shape).copy(), (self,), None)
        return _attach(out, lambda g: self._accum(_unbroadcast(g, self.data.shape)))

    def __getitem__(self, key):
        out = Tensor._node(self.data[key].copy(), (self,), None)

        def bwd(g):
            gx = np.zeros_like(self.data)
            gx[key] += g
            self._accum(gx)

        return _attach(out, bwd)

    def sum(self, axis=None, keepdims=False):
        out = Tensor._node(self.data.sum(axis=axis, keepdims=keepdims), (self,), None)

        def bwd(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, self.data.shape))

        return _attach(out, bwd)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.data.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- matmul ----------------------------------------------------------

    def __matmul__(self, other):
        if not isinstance(other, Tensor):
            other = Tensor(np.asarray(other, dtype=self.data.dtype))
        a, b = self.data, other.data
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
        out = Tensor._node(np.matmul(a, b), (self, other), None)

        def bwd(g):
            if self.requires_grad:
                ga = np.matmul(g, np.swapaxes(b, -1, -2))
                self._accum(_unbroadcast(ga, a.shape))
            if other.requires_grad:
                gb = np.matmul(np.swapaxes(a, -1, -2), g)
                other._accum(_unbroadcast(gb, b.shape))

        return _attach(out, bwd)


def _unbroadcast(g, shape):
    """Sum a gradient over the axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def concat(tensors, axis=0):
    """Concatenate along an axis; the gradient splits back to each input."""
    datas = [t.data for t in tensors]
    out_data = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)
    out = Tensor._node(out_data, tuple(tensors), None)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(int(lo), int(hi))
                t._accum(g[tuple(idx)])

    return _attach(out, bwd)


# ---------------------------------------------------------------------------
# neural-net primitives
# ---------------------------------------------------------------------------


def relu(x):
    mask = x.data > 0
    out = Tensor._node(np.where(mask, x.data, x.data.dtype.type(0)), (x,), None)
    return _attach(out, lambda g: x._accum(np.where(mask, g, g.dtype.type(0))))


def softmax(x, axis=-1):
    """Numerically stable softmax along ``axis``; outputs sum to one there."""
    nd = x.data.ndim
    if not -nd <= axis < nd:
        raise ValueError(f"softmax axis {axis} invalid for shape {x.data.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor._node(y, (x,), None)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        x._accum((g - dot) * y)

    return _attach(out, bwd)


def linear(x, weight, bias):
    """Affine map over the last axis: y[..., j] = w[j] . x[...] + b[j]."""
    d_out, d_in = weight.data.shape
    if x.data.shape[-1] != d_in:
        raise ShapeError(f"linear: input last dim {x.data.shape[-1]} != weight in dim {d_in}")
    if bias.data.shape != (d_out,):
        raise ShapeError(f"linear: bias shape {bias.data.shape}, expected ({d_out},)")
    lead = x.data.shape[:-1]
    x2 = x.data.reshape(-1, d_in)
    y2 = x2 @ weight.data.T + bias.data
    out = Tensor._node(y2.reshape(lead + (d_out,)), (x, weight, bias), None)

    def bwd(g):
        g2 = g.reshape(-1, d_out)
        if x.requires_grad:
            x._accum((g2 @ weight.data).reshape(x.data.shape))
        if weight.requires_grad:
            weight._accum(g2.T @ x2)
        if bias.requires_grad:
            bias._accum(g2.sum(axis=0))

    return _attach(out, bwd)


def conv2d(x, weight, bias, stride=1, padding=0):
    """2-D cross-correlation of (N,C,H,W) with (F,C,kH,kW) filters plus bias.

    Output spatial size is (H + 2*padding - kH) // stride + 1 (same for W).
    Backed by im2col + one BLAS GEMM; see ``kernels`` for the unfold path.
    """
    if stride <= 0:
        raise ValueError(f"stride must be positive, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be non-negative, got {padding}")
    n, c, h, w = x.data.shape
    f, ck, kh, kw = weight.data.shape
    if ck != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {ck}")
    if bias.data.shape != (f,):
        raise ShapeError(f"conv2d: bias shape {bias.data.shape}, expected ({f},)")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: padded input {hp}x{wp} smaller than kernel {kh}x{kw}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = kernels.im2col(xp, kh, kw, stride)  # (N, C*kh*kw, Ho*Wo)
    w2 = weight.data.reshape(f, c * kh * kw)
    y = np.matmul(w2, cols)
    y += bias.data[:, None]
    out = Tensor._node(y.reshape(n, f, ho, wo), (x, weight, bias), None)

    def bwd(g):
        g2 = np.ascontiguousarray(g).reshape(n, f, ho * wo)
        if bias.requires_grad:
            bias._accum(g2.sum(axis=(0, 2)))
        if weight.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
            weight._accum(gw.reshape(weight.data.shape))
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2)
            gxp = kernels.col2im(dcols, n, c, hp, wp, kh, kw, stride)
            if padding:
                gxp = gxp[:, :, padding : padding + h, padding : padding + w]
            x._accum(np.ascontiguousarray(gxp))

    return _attach(out, bwd)


def max_pool2d(x, window, stride=None):
    """Window maxima over (N,C,H,W); gradient routes to the first argmax."""
    if isinstance(window, int):
        window = (window, window)
    wh, ww = window
    if stride is None:
        stride = wh
    if stride <= 0 or wh <= 0 or ww <= 0:
        raise ValueError("pooling window and stride must be positive")
    n, c, h, w = x.data.shape
    if wh > h or ww > w:
        raise ValueError(f"pooling window {window} exceeds spatial dims {(h, w)}")
    y, absidx = kernels.maxpool_forward(np.ascontiguousarray(x.data), (wh, ww), stride)
    out = Tensor._node(y, (x,), None)
    return _attach(
        out, lambda g: x._accum(kernels.maxpool_backward(np.ascontiguousarray(g), absidx, h, w))
    )


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = xc * inv
    out = Tensor._node(xhat * gain.data + bias.data, (x, gain, bias), None)

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        if bias.requires_grad:
            bias._accum(g.sum(axis=lead))
        if gain.requires_grad:
            gain._accum((g * xhat).sum(axis=lead))
        if x.requires_grad:
            gh = g * gain.data
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = (gh * xhat).mean(axis=-1, keepdims=True)
            x._accum((gh - m1 - xhat * m2) * inv)

    return _attach(out, bwd)


def cross_entropy(logits, labels):
    """Mean negative log softmax probability of the true class.

    ``logits`` is (N, 2); ``labels`` an int array with values in {0, 1}.
    Computed through log-sum-exp so saturated logits cannot overflow.
    """
    if logits.data.ndim != 2 or logits.data.shape[1] != 2:
        raise ShapeError(f"cross_entropy expects (N, 2) logits, got {logits.data.shape}")
    labels = np.asarray(labels)
    n = logits.data.shape[0]
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch size {n}")
    if labels.min() < 0 or labels.max() > 1:
        raise ValueError("labels must be 0 or 1")
    if not np.isfinite(logits.data).all():
        raise NumericsError("non-finite logits in cross_entropy")

    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    rows = np.arange(n)
    losses = lse - z[rows, labels]
    out = Tensor._node(np.asarray(losses.mean(), dtype=z.dtype), (logits,), None)

    def bwd(g):
        p = np.exp(z - m)
        p /= p.sum(axis=1, keepdims=True)
        p[rows, labels] -= 1.0
        logits._accum(g * p / z.dtype.type(n))

    return _attach(out, bwd)
