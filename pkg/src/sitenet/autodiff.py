"""Reverse-mode automatic differentiation over float64 NumPy arrays.

A Tensor records the primitives that produced it; calling ``backward()`` on a
scalar walks the graph in reverse topological order and accumulates gradients
into every tensor on a differentiable path. Backward rules are pure functions
(output gradient in, parent gradients out), so repeated backward passes through
shared subgraphs simply add their contributions.
"""

import contextlib

import numpy as np

from . import _kernels


class ShapeError(ValueError):
    """Operands have shapes the requested primitive cannot accept."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording within the block; outputs become constants."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Node in the computation graph: float64 values plus an optional grad."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate d(self)/d(ancestor) into ``grad`` of every recorded ancestor.

        Only defined for scalar outputs (a single-element tensor).
        """
        if self.data.size != 1:
            raise ShapeError(
                f"backward() requires a scalar output, got shape {self.data.shape}"
            )
        order = self._topo_order()
        pending = {id(self): np.ones_like(self.data)}
        for t in reversed(order):
            g = pending.pop(id(t), None)
            if g is None:
                continue
            t.grad = g if t.grad is None else t.grad + g
            if t._backward is None:
                continue
            parent_grads = t._backward(g)
            for p, pg in zip(t._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in pending:
                    pending[id(p)] = pending[id(p)] + pg
                else:
                    pending[id(p)] = pg

    def _topo_order(self):
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return order

    # operator sugar; scalars and ndarrays are wrapped as constants
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(data, parents, backward_fn):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    """Sum an output gradient down to the shape a broadcast operand had."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record(a.data + b.data, (a, b), backward)


def sub(a, b):
    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record(a.data - b.data, (a, b), backward)


def mul(a, b):
    def backward(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _record(a.data * b.data, (a, b), backward)


def div(a, b):
    def backward(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _record(a.data / b.data, (a, b), backward)


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            f"matmul expects 2-D operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}"
        )

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _record(a.data @ b.data, (a, b), backward)


def transpose(a):
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {a.data.shape}")

    def backward(g):
        return (g.T.copy(),)

    return _record(a.data.T.copy(), (a,), backward)


def exp(a):
    out_data = np.exp(a.data)

    def backward(g):
        return (g * out_data,)

    return _record(out_data, (a,), backward)


def log(a):
    def backward(g):
        return (g / a.data,)

    return _record(np.log(a.data), (a,), backward)


def sqrt(a):
    out_data = np.sqrt(a.data)

    def backward(g):
        return (g / (2.0 * out_data),)

    return _record(out_data, (a,), backward)


def relu(a):
    mask = a.data > 0  # subgradient 0 at the kink

    def backward(g):
        return (g * mask,)

    return _record(a.data * mask, (a,), backward)


def maximum_const(a, c):
    """Elementwise max with a constant; subgradient 0 where data <= c."""
    mask = a.data > c

    def backward(g):
        return (g * mask,)

    return _record(np.maximum(a.data, c), (a,), backward)


def tensor_sum(a, axis=None, keepdims=False):
    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _record(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims=False):
    count = a.data.size if axis is None else a.data.shape[axis]
    return tensor_sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape):
    def backward(g):
        return (g.reshape(a.data.shape),)

    return _record(a.data.reshape(shape), (a,), backward)


def concat_rows(tensors):
    """Concatenate 2-D tensors along axis 0."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat_rows needs at least one tensor")
    width = tensors[0].data.shape[1]
    for t in tensors:
        if t.data.ndim != 2 or t.data.shape[1] != width:
            raise ShapeError("concat_rows operands must be 2-D with equal width")
    sizes = [t.data.shape[0] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return _record(
        np.concatenate([t.data for t in tensors], axis=0), tensors, backward
    )


def concat_channels(tensors):
    """Concatenate 4-D feature maps [N, C, H, W] along the channel axis."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat_channels needs at least one tensor")
    ref = tensors[0].data.shape
    for t in tensors:
        s = t.data.shape
        if len(s) != 4 or s[0] != ref[0] or s[2:] != ref[2:]:
            raise ShapeError(
                f"concat_channels operands must share N, H, W; got {ref} vs {s}"
            )
    sizes = [t.data.shape[1] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return _record(
        np.concatenate([t.data for t in tensors], axis=1), tensors, backward
    )


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D cross-correlation of [N, C, H, W] inputs with [F, C, kh, kw] filters.

    Lowered to im2col + one GEMM; the backward pass reuses the unfolded patches
    for the filter gradient and folds the input gradient back with col2im.
    """
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ShapeError(f"padding must be >= 0, got {padding}")
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(
            f"conv2d expects 4-D input and filters, got {x.data.shape} and {w.data.shape}"
        )
    n, c, h, wd = x.data.shape
    f, cw, kh, kw = w.data.shape
    if cw != c:
        raise ShapeError(f"filter channels {cw} do not match input channels {c}")
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (wd + 2 * padding - kw) // stride + 1
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ShapeError(
            f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{wd + 2 * padding}"
        )
    if b is not None and b.data.shape != (f,):
        raise ShapeError(f"bias must have shape ({f},), got {b.data.shape}")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = np.ascontiguousarray(x.data)
    cols = _kernels.im2col(xp, kh, kw, stride, out_h, out_w)
    wmat = w.data.reshape(f, c * kh * kw)
    flat = cols @ wmat.T
    if b is not None:
        flat = flat + b.data
    out_data = np.ascontiguousarray(
        flat.reshape(n, out_h, out_w, f).transpose(0, 3, 1, 2)
    )

    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gflat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, f)
        dx = dw = db = None
        if w.requires_grad:
            dw = (gflat.T @ cols).reshape(f, c, kh, kw)
        if b is not None and b.requires_grad:
            db = gflat.sum(axis=0)
        if x.requires_grad:
            dcols = gflat @ wmat
            dxp = _kernels.col2im(
                dcols, n, c, h + 2 * padding, wd + 2 * padding,
                kh, kw, stride, out_h, out_w,
            )
            if padding:
                dx = dxp[:, :, padding:padding + h, padding:padding + wd]
            else:
                dx = dxp
        return (dx, dw) if b is None else (dx, dw, db)

    return _record(out_data, parents, backward)


def avg_pool2d(x, k):
    """Non-overlapping k x k mean pooling; spatial dims must divide by k."""
    if x.data.ndim != 4:
        raise ShapeError(f"avg_pool2d expects a 4-D tensor, got {x.data.shape}")
    n, c, h, w = x.data.shape
    if h % k or w % k:
        raise ShapeError(f"spatial dims {h}x{w} not divisible by pool size {k}")
    blocks = x.data.reshape(n, c, h // k, k, w // k, k)
    out_data = blocks.mean(axis=(3, 5))

    def backward(g):
        expanded = np.broadcast_to(
            g[:, :, :, None, :, None] / (k * k), (n, c, h // k, k, w // k, k)
        )
        return (expanded.reshape(n, c, h, w).copy(),)

    return _record(out_data, (x,), backward)


def global_avg_pool(x):
    """Mean over the spatial dims: [N, C, H, W] -> [N, C]."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects a 4-D tensor, got {x.data.shape}")
    n, c, h, w = x.data.shape
    out_data = x.data.mean(axis=(2, 3))

    def backward(g):
        return (
            np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)).copy(),
        )

    return _record(out_data, (x,), backward)


def softmax(x):
    """Row-wise softmax of a 2-D tensor, computed with max subtraction."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax expects a 2-D tensor, got {x.data.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        inner = (g * s).sum(axis=1, keepdims=True)
        return (s * (g - inner),)

    return _record(s, (x,), backward)


def softmax_cross_entropy(logits, onehot):
    """Mean cross-entropy of softmax(logits) against one-hot targets.

    Fused for numerical stability: the log-sum-exp never materializes
    probabilities, so extreme logits cannot produce NaN or Inf.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be 2-D, got {logits.data.shape}")
    y = onehot.data if isinstance(onehot, Tensor) else np.asarray(onehot, dtype=np.float64)
    if y.shape != logits.data.shape:
        raise ShapeError(
            f"targets shape {y.shape} does not match logits {logits.data.shape}"
        )
    n = logits.data.shape[0]
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -(y * logp).sum() / n

    def backward(g):
        return (g * (np.exp(logp) - y) / n,)

    return _record(loss, (logits,), backward)


def dense(x, w, b):
    """Affine layer x @ w + b for 2-D activations."""
    if x.data.ndim != 2:
        raise ShapeError(f"dense expects 2-D activations, got {x.data.shape}")
    return add(matmul(x, w), b)


def grad_check(f, x, h=1e-4, rtol=None):
    """Compare analytic and central-difference gradients of scalar f at x.

    Returns the worst relative error max(|a - n| / max(1, |a|, |n|)) over all
    coordinates. ``x`` may be a Tensor or a list of Tensors.
    """
    xs = x if isinstance(x, (list, tuple)) else [x]
    for t in xs:
        t.zero_grad()
    out = f(*xs)
    out.backward()
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in xs
    ]
    worst = 0.0
    for t, a in zip(xs, analytic):
        for i in range(t.data.size):
            orig = t.data.flat[i]
            t.data.flat[i] = orig + h
            with no_grad():
                up = float(f(*xs).data)
            t.data.flat[i] = orig - h
            with no_grad():
                down = float(f(*xs).data)
            t.data.flat[i] = orig
            num = (up - down) / (2.0 * h)
            ana = a.flat[i]
            err = abs(ana - num) / max(1.0, abs(ana), abs(num))
            worst = max(worst, err)
    if rtol is not None and worst > rtol:
        raise AssertionError(f"gradient check failed: {worst:.3e} > {rtol:.3e}")
    return worst
