"""Reverse-mode automatic differentiation over numpy arrays.

A small tape-free engine: every op builds a `Tensor` node holding its value,
its parent nodes and a vector-Jacobian closure. `Tensor.backward()` walks the
graph in reverse topological order and accumulates gradients into `.grad`.

Everything is float64. Ops raise on non-finite results (toggle with
`CHECK_FINITE`) so a NaN is caught where it appears instead of poisoning the
whole step.

Most ops also accept plain numpy arrays / python scalars through the generic
wrappers at the bottom (`log`, `clip`, `mean`, ...), so formula code can be
written once and evaluated with or without gradient tracking.
"""

import contextlib

import numpy as np

CHECK_FINITE = True

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Array node of the computation graph."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_vjp")

    # make `ndarray <op> Tensor` defer to the reflected Tensor operators
    __array_ufunc__ = None

    def __init__(self, value, requires_grad=False, _parents=(), _vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        if CHECK_FINITE and not np.all(np.isfinite(self.value)):
            raise FloatingPointError("non-finite values entering the graph")
        self.grad = None
        self.requires_grad = bool(requires_grad) or (
            _grad_enabled and any(p.requires_grad for p in _parents)
        )
        # graph edges are only kept when someone upstream needs gradients
        self._parents = tuple(_parents) if (self.requires_grad and _grad_enabled) else ()
        self._vjp = _vjp if self._parents else None

    # -- basic introspection ------------------------------------------------
    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def item(self):
        return float(self.value)

    def detach(self):
        """Value-only copy, cut off from the graph."""
        return Tensor(self.value.copy())

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # -- autodiff -----------------------------------------------------------
    def backward(self, seed=None):
        """Accumulate gradients of `self` w.r.t. every upstream tensor.

        `seed` defaults to 1 and requires a scalar output.
        """
        if seed is None:
            if self.value.size != 1:
                raise ValueError("backward() without seed needs a scalar output")
            seed = np.ones_like(self.value)
        order = _toposort(self)
        self.grad = np.asarray(seed, dtype=np.float64)
        for node in reversed(order):
            if node._vjp is None or node.grad is None:
                continue
            grads = node._vjp(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g

    # -- operator sugar -----------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)


def _toposort(root):
    order, visited = [], set()
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
            if id(p) not in visited:
                stack.append((p, False))
    return order


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a, b):
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return np.add(a, b)
    a, b = _wrap(a), _wrap(b)
    return Tensor(
        a.value + b.value,
        _parents=(a, b),
        _vjp=lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)),
    )


def sub(a, b):
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return np.subtract(a, b)
    a, b = _wrap(a), _wrap(b)
    return Tensor(
        a.value - b.value,
        _parents=(a, b),
        _vjp=lambda g: (
            _unbroadcast(g, a.value.shape),
            _unbroadcast(-g, b.value.shape),
        ),
    )


def mul(a, b):
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return np.multiply(a, b)
    a, b = _wrap(a), _wrap(b)
    return Tensor(
        a.value * b.value,
        _parents=(a, b),
        _vjp=lambda g: (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        ),
    )


def div(a, b):
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return np.divide(a, b)
    a, b = _wrap(a), _wrap(b)
    return Tensor(
        a.value / b.value,
        _parents=(a, b),
        _vjp=lambda g: (
            _unbroadcast(g / b.value, a.value.shape),
            _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape),
        ),
    )


def power(a, p):
    """Elementwise a**p for a constant scalar exponent."""
    if not isinstance(a, Tensor):
        return np.power(a, p)
    p = float(p)
    val = a.value**p
    if p == 0.0:
        return Tensor(np.ones_like(a.value), _parents=(a,), _vjp=lambda g: (np.zeros_like(a.value),))
    return Tensor(val, _parents=(a,), _vjp=lambda g: (g * p * a.value ** (p - 1.0),))


def exp(a):
    if not isinstance(a, Tensor):
        return np.exp(a)
    val = np.exp(a.value)
    return Tensor(val, _parents=(a,), _vjp=lambda g: (g * val,))


def log(a):
    if not isinstance(a, Tensor):
        return np.log(a)
    return Tensor(np.log(a.value), _parents=(a,), _vjp=lambda g: (g / a.value,))


def tanh(a):
    if not isinstance(a, Tensor):
        return np.tanh(a)
    val = np.tanh(a.value)
    return Tensor(val, _parents=(a,), _vjp=lambda g: (g * (1.0 - val * val),))


def sigmoid(a):
    if not isinstance(a, Tensor):
        return 1.0 / (1.0 + np.exp(-a))
    val = 1.0 / (1.0 + np.exp(-a.value))
    return Tensor(val, _parents=(a,), _vjp=lambda g: (g * val * (1.0 - val),))


def absolute(a):
    """|a| with sign subgradient (0 at the kink)."""
    if not isinstance(a, Tensor):
        return np.abs(a)
    return Tensor(np.abs(a.value), _parents=(a,), _vjp=lambda g: (g * np.sign(a.value),))


def clip(a, lo, hi):
    """Clamp to [lo, hi]; gradient is passed only strictly inside the interval."""
    if not isinstance(a, Tensor):
        return np.clip(a, lo, hi)
    inside = (a.value > lo) & (a.value < hi)
    return Tensor(
        np.clip(a.value, lo, hi),
        _parents=(a,),
        _vjp=lambda g: (g * inside,),
    )


# ---------------------------------------------------------------------------
# reductions / shape ops
# ---------------------------------------------------------------------------

def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    if not isinstance(a, Tensor):
        return np.sum(a, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.value.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.value.shape).copy(),)

    return Tensor(np.sum(a.value, axis=axis, keepdims=keepdims), _parents=(a,), _vjp=vjp)


def mean(a, axis=None, keepdims=False):
    if not isinstance(a, Tensor):
        return np.mean(a, axis=axis, keepdims=keepdims)
    if axis is None:
        n = a.value.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.value.shape[ax]
    return div(sum(a, axis=axis, keepdims=keepdims), float(n))


def reshape(a, shape):
    if not isinstance(a, Tensor):
        return np.reshape(a, shape)
    old = a.value.shape
    return Tensor(
        a.value.reshape(shape), _parents=(a,), _vjp=lambda g: (g.reshape(old),)
    )


def transpose(a):
    """2-D transpose."""
    if not isinstance(a, Tensor):
        return np.transpose(a)
    return Tensor(a.value.T, _parents=(a,), _vjp=lambda g: (g.T,))


def concat(parts, axis=0):
    if not any(isinstance(p, Tensor) for p in parts):
        return np.concatenate(parts, axis=axis)
    parts = [_wrap(p) for p in parts]
    sizes = [p.value.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=axis))

    return Tensor(
        np.concatenate([p.value for p in parts], axis=axis),
        _parents=tuple(parts),
        _vjp=vjp,
    )


def stack(parts):
    """Stack equal-shape tensors along a new leading axis."""
    if not any(isinstance(p, Tensor) for p in parts):
        return np.stack(parts)
    parts = [_wrap(p) for p in parts]

    def vjp(g):
        return tuple(g[i] for i in range(len(parts)))

    return Tensor(np.stack([p.value for p in parts]), _parents=tuple(parts), _vjp=vjp)


def take_rows(a, idx):
    """Select rows of a 2-D tensor by integer index array."""
    idx = np.asarray(idx, dtype=np.int64)
    if not isinstance(a, Tensor):
        return a[idx]

    def vjp(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor(a.value[idx], _parents=(a,), _vjp=vjp)


def crop(a, y0, y1, x0, x1):
    """Spatial crop of a (C, H, W) tensor."""
    if not isinstance(a, Tensor):
        return a[:, y0:y1, x0:x1]

    def vjp(g):
        out = np.zeros_like(a.value)
        out[:, y0:y1, x0:x1] = g
        return (out,)

    return Tensor(a.value[:, y0:y1, x0:x1], _parents=(a,), _vjp=vjp)


def matmul(a, b):
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return a @ b
    a, b = _wrap(a), _wrap(b)
    return Tensor(
        a.value @ b.value,
        _parents=(a, b),
        _vjp=lambda g: (g @ b.value.T, a.value.T @ g),
    )


# ---------------------------------------------------------------------------
# structured ops
# ---------------------------------------------------------------------------

def _im2col(xp, kh, kw, stride, oh, ow):
    c = xp.shape[0]
    cols = np.empty((c, kh, kw, oh, ow), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols.reshape(c * kh * kw, oh * ow)


def conv2d(x, w, b, stride=1, pad=1):
    """2-D convolution of a (C,H,W) input with (O,C,kh,kw) kernels."""
    xt = isinstance(x, Tensor)
    xv = x.value if xt else np.asarray(x, dtype=np.float64)
    wv = w.value if isinstance(w, Tensor) else np.asarray(w, dtype=np.float64)
    bv = b.value if isinstance(b, Tensor) else np.asarray(b, dtype=np.float64)
    o, c, kh, kw = wv.shape
    if xv.shape[0] != c:
        raise ValueError(f"conv2d channel mismatch: input {xv.shape[0]}, kernel {c}")
    xp = np.pad(xv, ((0, 0), (pad, pad), (pad, pad)))
    oh = (xv.shape[1] + 2 * pad - kh) // stride + 1
    ow = (xv.shape[2] + 2 * pad - kw) // stride + 1
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    out = (wv.reshape(o, -1) @ cols + bv[:, None]).reshape(o, oh, ow)

    if not (xt or isinstance(w, Tensor) or isinstance(b, Tensor)):
        return out

    x, w, b = _wrap(x), _wrap(w), _wrap(b)

    def vjp(g):
        gm = g.reshape(o, -1)
        db = g.sum(axis=(1, 2))
        dw = (gm @ cols.T).reshape(o, c, kh, kw)
        dcols = (wv.reshape(o, -1).T @ gm).reshape(c, kh, kw, oh, ow)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[:, i, j]
        h, wd = xv.shape[1], xv.shape[2]
        dx = dxp[:, pad : pad + h, pad : pad + wd]
        return (dx, dw, db)

    return Tensor(out, _parents=(x, w, b), _vjp=vjp)


def upsample2x(a):
    """Nearest-neighbour 2x upsampling of a (C,H,W) tensor."""
    if not isinstance(a, Tensor):
        return a.repeat(2, axis=1).repeat(2, axis=2)
    c, h, w = a.value.shape

    def vjp(g):
        return (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),)

    return Tensor(
        a.value.repeat(2, axis=1).repeat(2, axis=2), _parents=(a,), _vjp=vjp
    )


def grl(a, lam):
    """Gradient reversal: identity forward, upstream gradient times -lam backward."""
    lam = float(lam)
    if not isinstance(a, Tensor):
        return np.asarray(a, dtype=np.float64)
    return Tensor(a.value, _parents=(a,), _vjp=lambda g: (-lam * g,))


def softmax_cross_entropy(logits, labels):
    """Mean softmax cross-entropy of (N, C) logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    lt = isinstance(logits, Tensor)
    lv = logits.value if lt else np.asarray(logits, dtype=np.float64)
    n = lv.shape[0]
    if labels.shape[0] != n:
        raise ValueError("labels length does not match logits rows")
    shifted = lv - lv.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + lv.max(axis=1)
    val = np.float64((lse - lv[np.arange(n), labels]).mean())
    if not lt:
        return val
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)

    def vjp(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return (g * d / n,)

    return Tensor(val, _parents=(logits,), _vjp=vjp)


def smooth_l1(pred, target):
    """Huber-style loss: sum over coords, mean over rows of (N, D) inputs."""
    pt = isinstance(pred, Tensor)
    pv = pred.value if pt else np.asarray(pred, dtype=np.float64)
    tv = target.value if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pv.shape != tv.shape:
        raise ValueError("smooth_l1 shape mismatch")
    n = pv.shape[0]
    d = pv - tv
    ad = np.abs(d)
    elem = np.where(ad < 1.0, 0.5 * d * d, ad - 0.5)
    val = np.float64(elem.sum() / n)
    if not pt:
        return val

    def vjp(g):
        return (g * np.where(ad < 1.0, d, np.sign(d)) / n,)

    return Tensor(val, _parents=(pred,), _vjp=vjp)


# ---------------------------------------------------------------------------
# parameters and optimisation
# ---------------------------------------------------------------------------

def parameter(value):
    return Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)


class SGD:
    """Plain SGD with classical momentum: v <- mu*v + g, p <- p - lr*v."""

    def __init__(self, params, lr, momentum=0.9):
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.velocity = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.value -= self.lr * v
