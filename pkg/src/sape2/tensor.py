"""Minimal dense-tensor engine with reverse-mode differentiation.

Kernels are numpy-backed and recorded eagerly on a tape; ``Tensor.backward``
replays the tape in reverse topological order and accumulates gradients on
leaf tensors. The kernel set is exactly what the attention/position-encoding
pipeline needs -- nothing more.

Precision policy: float64 for verification and gradient checks, float32 for
training. Dtypes propagate from the inputs; python scalars never upcast.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit, ndtr

_GRAD_ENABLED = True

_INV_SQRT_2PI = 0.3989422804014327


class no_grad:
    """Context manager that disables tape recording (eval / benchmarks)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """Dense n-d array with an optional gradient accumulator.

    ``requires_grad`` leaves collect ``dLoss/dLeaf`` into ``.grad`` when
    ``backward`` runs; repeated backward calls accumulate until the grad is
    cleared.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
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

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        # precision changes are graph boundaries, not recorded ops
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self):
        self.grad = None

    # -- autodiff ---------------------------------------------------------

    def backward(self):
        """Accumulate dLoss/dLeaf on every requires_grad leaf under this scalar."""
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.data.shape}")
        if self._backward is None:
            if self.requires_grad:
                seed = np.ones_like(self.data)
                self.grad = seed if self.grad is None else self.grad + seed
            return

        # iterative DFS postorder so deep graphs never hit the recursion limit
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
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p._backward is not None and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if p._backward is None:
                    p.grad = pg.copy() if p.grad is None else p.grad + pg
                else:
                    k = id(p)
                    grads[k] = pg if k not in grads else grads[k] + pg

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, like=self)))

    def __rsub__(self, other):
        return add(as_tensor(other, like=self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=np.float64, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def _needs_grad(*ts: Tensor) -> bool:
    return _GRAD_ENABLED and any(t.requires_grad for t in ts)


def _record(out: Tensor, parents, backward_fn):
    out._parents = parents
    out._backward = backward_fn


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    out = Tensor(a.data + b.data, requires_grad=_needs_grad(a, b))
    if out.requires_grad:
        sa, sb = a.data.shape, b.data.shape
        _record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))
    return out


def mul(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    out = Tensor(a.data * b.data, requires_grad=_needs_grad(a, b))
    if out.requires_grad:
        ad, bd = a.data, b.data
        _record(out, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))
    return out


def div(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    out = Tensor(a.data / b.data, requires_grad=_needs_grad(a, b))
    if out.requires_grad:
        ad, bd = a.data, b.data
        _record(out, (a, b), lambda g: (
            _unbroadcast(g / bd, ad.shape),
            _unbroadcast(-g * ad / (bd * bd), bd.shape),
        ))
    return out


def neg(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = Tensor(-x.data, requires_grad=_needs_grad(x))
    if out.requires_grad:
        _record(out, (x,), lambda g: (-g,))
    return out


def power(x: Tensor, p: float) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data ** p, requires_grad=_needs_grad(x))
    if out.requires_grad:
        xd = x.data
        _record(out, (x,), lambda g: (g * p * xd ** (p - 1.0),))
    return out


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    out = Tensor(y, requires_grad=_needs_grad(x))
    if out.requires_grad:
        _record(out, (x,), lambda g: (g * y,))
    return out


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.log(x.data), requires_grad=_needs_grad(x))
    if out.requires_grad:
        xd = x.data
        _record(out, (x,), lambda g: (g / xd,))
    return out


def sqrt(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = np.sqrt(x.data)
    out = Tensor(y, requires_grad=_needs_grad(x))
    if out.requires_grad:
        _record(out, (x,), lambda g: (g * 0.5 / y,))
    return out


def sigmoid(x: Tensor) -> Tensor:
    """Elementwise 1/(1+exp(-x)); saturates but never NaNs for finite input."""
    x = as_tensor(x)
    y = expit(x.data)
    out = Tensor(y, requires_grad=_needs_grad(x))
    if out.requires_grad:
        _record(out, (x,), lambda g: (g * y * (1.0 - y),))
    return out


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = as_tensor(x)
    xd = x.data
    cdf = ndtr(xd)
    out = Tensor(xd * cdf, requires_grad=_needs_grad(x))
    if out.requires_grad:
        def bw(g):
            pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
            return (g * (cdf + xd * pdf),)
        _record(out, (x,), bw)
    return out


def clamp_max(x: Tensor, bound: float) -> Tensor:
    """min(x, bound); gradient is 1 below the bound, 0 at and beyond it."""
    x = as_tensor(x)
    out = Tensor(np.minimum(x.data, bound), requires_grad=_needs_grad(x))
    if out.requires_grad:
        mask = (x.data < bound).astype(x.data.dtype)
        _record(out, (x,), lambda g: (g * mask,))
    return out


# -- shape / reduction ----------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.reshape(shape), requires_grad=_needs_grad(x))
    if out.requires_grad:
        orig = x.data.shape
        _record(out, (x,), lambda g: (g.reshape(orig),))
    return out


def transpose(x: Tensor, axes=None) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.transpose(x.data, axes), requires_grad=_needs_grad(x))
    if out.requires_grad:
        inv = None if axes is None else tuple(np.argsort(axes))
        _record(out, (x,), lambda g: (np.transpose(g, inv),))
    return out


def getitem(x: Tensor, key) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data[key], requires_grad=_needs_grad(x))
    if out.requires_grad:
        shape = x.data.shape

        def bw(g):
            full = np.zeros(shape, dtype=g.dtype)
            full[key] += g
            return (full,)
        _record(out, (x,), bw)
    return out


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 requires_grad=_needs_grad(*tensors))
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]
        _record(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))
    return out


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.sum(x.data, axis=axis, keepdims=keepdims), requires_grad=_needs_grad(x))
    if out.requires_grad:
        shape = x.data.shape

        def bw(g):
            if axis is None:
                return (np.broadcast_to(g, shape),)
            if not keepdims:
                axes = axis if isinstance(axis, tuple) else (axis,)
                for ax in sorted(a % len(shape) for a in axes):
                    g = np.expand_dims(g, ax)
            return (np.broadcast_to(g, shape),)
        _record(out, (x,), bw)
    return out


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else (
        np.prod([x.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


# -- linear algebra -------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy-style batching over leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data, requires_grad=_needs_grad(a, b))
    if out.requires_grad:
        ad, bd = a.data, b.data

        def bw(g):
            if bd.ndim == 2 and ad.shape[:-2] == g.shape[:-2]:
                # weight layer: fold batch dims into one flat GEMM
                ga = g @ bd.T
                gb = (ad.reshape(-1, ad.shape[-1]).T
                      @ g.reshape(-1, g.shape[-1]))
            else:
                ga = _unbroadcast(g @ bd.swapaxes(-1, -2), ad.shape)
                gb = _unbroadcast(ad.swapaxes(-1, -2) @ g, bd.shape)
            return (ga, gb)
        _record(out, (a, b), bw)
    return out


def pairwise_l2(rows: Tensor) -> Tensor:
    """All-pairs Euclidean distances over the last-but-one axis.

    ``rows`` is (..., N, D); the result is (..., N, N), exactly symmetric with
    an exactly-zero diagonal. The zero-distance subgradient is zero.
    """
    rows = as_tensor(rows)
    x = rows.data
    sq = np.einsum("...nd,...nd->...n", x, x)
    d2 = sq[..., :, None] + sq[..., None, :] - 2.0 * (x @ x.swapaxes(-1, -2))
    d2 = 0.5 * (d2 + d2.swapaxes(-1, -2))
    np.maximum(d2, 0.0, out=d2)
    d = np.sqrt(d2)
    n = d.shape[-1]
    idx = np.arange(n)
    d[..., idx, idx] = 0.0
    out = Tensor(d, requires_grad=_needs_grad(rows))
    if out.requires_grad:
        def bw(g):
            gs = g + g.swapaxes(-1, -2)
            c = np.where(d > 0.0, gs / np.where(d > 0.0, d, 1.0), 0.0)
            return (c.sum(-1)[..., None] * x - c @ x,)
        _record(out, (rows,), bw)
    return out


def take_last(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather along the last axis; ``index`` is an integer array, held constant."""
    x = as_tensor(x)
    index = np.asarray(index)
    out = Tensor(np.take_along_axis(x.data, index, axis=-1), requires_grad=_needs_grad(x))
    if out.requires_grad:
        shape = x.data.shape
        k = shape[-1]

        def bw(g):
            # scatter-add via bincount over flattened (row, entry) slots
            rows = int(np.prod(shape[:-1]))
            fi = index.reshape(-1, index.shape[-1])
            flat = (np.arange(rows)[:, None] * k + fi).ravel()
            acc = np.bincount(flat, weights=g.ravel().astype(np.float64),
                              minlength=rows * k)
            return (acc.reshape(shape).astype(g.dtype, copy=False),)
        _record(out, (x,), bw)
    return out


# -- softmax family -------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, requires_grad=_needs_grad(x))
    if out.requires_grad:
        def bw(g):
            gy = g * y
            return (gy - y * gy.sum(axis=axis, keepdims=True),)
        _record(out, (x,), bw)
    return out


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    out = Tensor(z - lse, requires_grad=_needs_grad(x))
    if out.requires_grad:
        sm = np.exp(z - lse)
        _record(out, (x,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),))
    return out


# -- scans ----------------------------------------------------------------


def reverse_cumsum(x: Tensor, axis: int = -1) -> Tensor:
    """Suffix sums along ``axis``: out[..., r] = sum of x[..., s] for s >= r."""
    x = as_tensor(x)
    nd = x.data.ndim
    if not (-nd <= axis < nd):
        raise ValueError(f"reverse_cumsum: invalid axis {axis} for shape {x.data.shape}")
    y = np.flip(np.cumsum(np.flip(x.data, axis), axis=axis), axis)
    out = Tensor(np.ascontiguousarray(y), requires_grad=_needs_grad(x))
    if out.requires_grad:
        _record(out, (x,), lambda g: (np.cumsum(g, axis=axis),))
    return out


# -- normalization --------------------------------------------------------


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Fused layer norm over the last axis (biased variance)."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    mu = xd.mean(-1, keepdims=True)
    xc = xd - mu
    var = np.mean(xc * xc, -1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data, requires_grad=_needs_grad(x, gamma, beta))
    if out.requires_grad:
        gd = gamma.data
        lead = tuple(range(xd.ndim - 1))

        def bw(g):
            dxhat = g * gd
            dx = inv * (dxhat - dxhat.mean(-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(-1, keepdims=True))
            return (dx, (g * xhat).sum(lead), g.sum(lead))
        _record(out, (x, gamma, beta), bw)
    return out
