"""Reverse-mode automatic differentiation over numpy arrays.

The engine is define-by-run: every operation on a ``Tensor`` stores its input
tensors and a backward closure, and ``Tensor.backward()`` replays the closures
in reverse topological order. Gradients of a backward pass overwrite whatever
a previous pass left behind, so a fresh ``backward()`` always yields fresh
gradients and no explicit zeroing step is needed between training steps.

Only the primitives the segmentation and sequence-model code actually use are
provided. Masks, integer indices and schedule constants enter the graph as
plain numpy arrays, never as differentiable tensors.

Precision policy: a tensor keeps whatever float dtype it was built with
(anything non-float is promoted to float64). Training runs in float32;
gradient verification builds the same graphs in float64, where central finite
differences (see ``finite_difference_grad``) are trustworthy.
"""

from __future__ import annotations

import contextlib
from typing import Callable

import numpy as np

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Suspend graph recording inside the context. Used on evaluation paths."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense float array plus an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    # -- bookkeeping -------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_err()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # -- autodiff ----------------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on every recorded tensor reachable from ``self``.

        ``self`` must be a scalar (size 1). Grads are reset to zero at the
        start of the pass, then accumulated, so fan-out is handled and repeat
        calls do not double-count.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.data.shape}")
        order = _toposort(self)
        for t in order:
            t.grad = np.zeros_like(t.data)
        self.grad = np.ones_like(self.data)
        for t in reversed(order):
            if t._backward is not None:
                t._backward()

    # -- operator sugar ------------------------------------------------------

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- method forms of common primitives -----------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_along(self, axis, keepdims)

    def exp(self) -> "Tensor":
        return exp(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)


def _scalar_err():
    raise ValueError("item() is only defined for size-1 tensors")


def _toposort(root: Tensor) -> list[Tensor]:
    """Tensors contributing gradient to ``root``, parents before children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    return order


def _as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _make(data: np.ndarray, parents: tuple[Tensor, ...]) -> tuple[Tensor, bool]:
    """Wrap op output; report whether a backward closure should be attached."""
    out = Tensor(data)
    track = _grad_enabled and any(p.requires_grad for p in parents)
    if track:
        out.requires_grad = True
        out._parents = parents
    return out, track


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    out, track = _make(a.data + b.data, (a, b))
    if track:
        def _bw():
            if a.requires_grad:
                a.grad += _unbroadcast(out.grad, a.data.shape)
            if b.requires_grad:
                b.grad += _unbroadcast(out.grad, b.data.shape)
        out._backward = _bw
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    out, track = _make(a.data - b.data, (a, b))
    if track:
        def _bw():
            if a.requires_grad:
                a.grad += _unbroadcast(out.grad, a.data.shape)
            if b.requires_grad:
                b.grad -= _unbroadcast(out.grad, b.data.shape)
        out._backward = _bw
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    out, track = _make(a.data * b.data, (a, b))
    if track:
        def _bw():
            if a.requires_grad:
                a.grad += _unbroadcast(out.grad * b.data, a.data.shape)
            if b.requires_grad:
                b.grad += _unbroadcast(out.grad * a.data, b.data.shape)
        out._backward = _bw
    return out


def div(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    out, track = _make(a.data / b.data, (a, b))
    if track:
        def _bw():
            if a.requires_grad:
                a.grad += _unbroadcast(out.grad / b.data, a.data.shape)
            if b.requires_grad:
                b.grad -= _unbroadcast(out.grad * a.data / (b.data * b.data), b.data.shape)
        out._backward = _bw
    return out


def exp(x: Tensor) -> Tensor:
    out, track = _make(np.exp(x.data), (x,))
    if track:
        def _bw():
            x.grad += out.grad * out.data
        out._backward = _bw
    return out


def log(x: Tensor) -> Tensor:
    out, track = _make(np.log(x.data), (x,))
    if track:
        def _bw():
            x.grad += out.grad / x.data
        out._backward = _bw
    return out


def sqrt(x: Tensor) -> Tensor:
    """Elementwise square root. Gradient is undefined at exactly zero."""
    out, track = _make(np.sqrt(x.data), (x,))
    if track:
        def _bw():
            x.grad += out.grad * 0.5 / out.data
        out._backward = _bw
    return out


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    e = np.exp(-np.abs(xd))
    data = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out, track = _make(data, (x,))
    if track:
        def _bw():
            x.grad += out.grad * out.data * (1.0 - out.data)
        out._backward = _bw
    return out


def clamp_min(x: Tensor, lo: float) -> Tensor:
    """max(x, lo) with zero gradient wherever the floor is active."""
    data = np.maximum(x.data, np.asarray(lo, dtype=x.data.dtype))
    out, track = _make(data, (x,))
    if track:
        passed = x.data > lo
        def _bw():
            x.grad += out.grad * passed
        out._backward = _bw
    return out


# -- structural ops -----------------------------------------------------------


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out, track = _make(x.data.reshape(shape), (x,))
    if track:
        def _bw():
            x.grad += out.grad.reshape(x.data.shape)
        out._backward = _bw
    return out


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    axes = tuple(axes)
    out, track = _make(np.transpose(x.data, axes), (x,))
    if track:
        inverse = tuple(np.argsort(axes))
        def _bw():
            x.grad += np.transpose(out.grad, inverse)
        out._backward = _bw
    return out


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice ``[start, start+length)`` along ``axis``."""
    axis = axis % x.data.ndim
    n = x.data.shape[axis]
    if not (0 <= start and start + length <= n and length >= 0):
        raise ValueError(f"narrow out of range: start={start} length={length} dim={n}")
    sl = tuple(slice(None) if d != axis else slice(start, start + length) for d in range(x.data.ndim))
    out, track = _make(x.data[sl], (x,))
    if track:
        def _bw():
            x.grad[sl] += out.grad
        out._backward = _bw
    return out


def _shift_np(a: np.ndarray, offset: int, axis: int) -> np.ndarray:
    """out[i] = a[i + offset] along ``axis``, zero-filled at the edges."""
    out = np.zeros_like(a)
    n = a.shape[axis]
    if abs(offset) >= n:
        return out
    src = [slice(None)] * a.ndim
    dst = [slice(None)] * a.ndim
    if offset >= 0:
        dst[axis] = slice(0, n - offset)
        src[axis] = slice(offset, n)
    else:
        dst[axis] = slice(-offset, n)
        src[axis] = slice(0, n + offset)
    out[tuple(dst)] = a[tuple(src)]
    return out


def shift(x: Tensor, offset: int, axis: int = -1) -> Tensor:
    """Zero-padded shift: out[i] = x[i + offset] along ``axis``."""
    axis = axis % x.data.ndim
    out, track = _make(_shift_np(x.data, offset, axis), (x,))
    if track:
        def _bw():
            x.grad += _shift_np(out.grad, -offset, axis)
        out._backward = _bw
    return out


def sum_along(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out, track = _make(x.data.sum(axis=axis, keepdims=keepdims), (x,))
    if track:
        def _bw():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            x.grad += np.broadcast_to(g, x.data.shape)
        out._backward = _bw
    return out


def cumsum(x: Tensor, axis: int = -1) -> Tensor:
    out, track = _make(np.cumsum(x.data, axis=axis), (x,))
    if track:
        def _bw():
            g = np.flip(np.cumsum(np.flip(out.grad, axis), axis=axis), axis)
            x.grad += g
        out._backward = _bw
    return out


def max_along(x: Tensor, axis: int) -> Tensor:
    """Max over ``axis``; gradient routes to the first (lowest-index) argmax."""
    axis = axis % x.data.ndim
    idx = np.argmax(x.data, axis=axis)
    out, track = _make(np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis), (x,))
    if track:
        def _bw():
            buf = np.zeros_like(x.data)
            np.put_along_axis(buf, np.expand_dims(idx, axis), np.expand_dims(out.grad, axis), axis=axis)
            x.grad += buf
        out._backward = _bw
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Either ``b`` is 2-D, or both sides share leading dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul expects tensors with at least 2 dimensions")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    if b.data.ndim != 2:
        if a.data.ndim != b.data.ndim or a.data.shape[:-2] != b.data.shape[:-2]:
            raise ValueError(f"matmul batch dims differ: {a.data.shape} @ {b.data.shape}")
    out, track = _make(a.data @ b.data, (a, b))
    if track:
        def _bw():
            g = out.grad
            if a.requires_grad:
                a.grad += g @ np.swapaxes(b.data, -1, -2)
            if b.requires_grad:
                if b.data.ndim == 2:
                    ga = a.data.reshape(-1, a.data.shape[-1])
                    gg = g.reshape(-1, g.shape[-1])
                    b.grad += ga.T @ gg
                else:
                    b.grad += np.swapaxes(a.data, -1, -2) @ g
        out._backward = _bw
    return out


def gather(table: Tensor, indices) -> Tensor:
    """Row lookup into a 2-D table; out shape = indices.shape + (row_dim,)."""
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError("gather indices must be integers")
    if table.data.ndim != 2:
        raise ValueError("gather table must be 2-D")
    n = table.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather index out of range [0, {n})")
    out, track = _make(table.data[idx], (table,))
    if track:
        def _bw():
            np.add.at(table.grad, idx.reshape(-1), out.grad.reshape(-1, table.data.shape[1]))
        out._backward = _bw
    return out


# -- fused neural-net ops -----------------------------------------------------


def masked_softmax(x: Tensor, mask) -> Tensor:
    """Softmax over the last axis restricted to ``mask`` (a constant bool array).

    Disallowed entries come out exactly zero; a row with no allowed entries
    comes out all zero rather than NaN.
    """
    maskb = np.broadcast_to(np.asarray(mask, dtype=bool), x.data.shape)
    xm = np.where(maskb, x.data, -np.inf)
    rowmax = xm.max(axis=-1, keepdims=True)
    rowmax = np.where(np.isfinite(rowmax), rowmax, 0.0)
    e = np.exp(xm - rowmax)
    e = np.where(maskb, e, 0.0)
    z = e.sum(axis=-1, keepdims=True)
    data = e / np.where(z == 0.0, 1.0, z)
    out, track = _make(data.astype(x.data.dtype, copy=False), (x,))
    if track:
        def _bw():
            g = out.grad
            inner = (g * out.data).sum(axis=-1, keepdims=True)
            x.grad += out.data * (g - inner)
        out._backward = _bw
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance; then scale and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=xd.dtype))
    xhat = xc * inv
    out, track = _make(xhat * gain.data + bias.data, (x, gain, bias))
    if track:
        def _bw():
            g = out.grad
            if gain.requires_grad:
                gain.grad += _unbroadcast(g * xhat, gain.data.shape)
            if bias.requires_grad:
                bias.grad += _unbroadcast(g, bias.data.shape)
            if x.requires_grad:
                dxhat = g * gain.data
                term = dxhat - dxhat.mean(axis=-1, keepdims=True)
                term -= xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
                x.grad += inv * term
        out._backward = _bw
    return out


def depthwise_conv1d(x: Tensor, kernel: Tensor) -> Tensor:
    """Per-channel 1-D convolution along axis -2 with zero padding.

    ``x`` is (..., L, H), ``kernel`` is (K, H) with odd K and centered taps:
    out[..., i, h] = sum_j kernel[j, h] * x[..., i + j - K//2, h].
    """
    k = kernel.data.shape[0]
    if kernel.data.ndim != 2:
        raise ValueError("kernel must be (K, H)")
    if k % 2 != 1:
        raise ValueError(f"kernel width must be odd, got {k}")
    if x.data.shape[-1] != kernel.data.shape[1]:
        raise ValueError(f"channel mismatch: {x.data.shape[-1]} vs {kernel.data.shape[1]}")
    c = k // 2
    acc = np.zeros_like(x.data)
    for j in range(k):
        acc += kernel.data[j] * _shift_np(x.data, j - c, axis=-2)
    out, track = _make(acc, (x, kernel))
    if track:
        def _bw():
            g = out.grad
            if x.requires_grad:
                for j in range(k):
                    x.grad += kernel.data[j] * _shift_np(g, c - j, axis=-2)
            if kernel.requires_grad:
                axes = tuple(range(g.ndim - 1))
                for j in range(k):
                    kernel.grad[j] += (g * _shift_np(x.data, j - c, axis=-2)).sum(axis=axes)
        out._backward = _bw
    return out


def cross_entropy_logits(logits: Tensor, targets, weights=None) -> Tensor:
    """Weighted mean cross-entropy from unnormalized logits.

    ``logits`` is (N, V), ``targets`` an int vector of class ids, ``weights``
    an optional nonnegative float vector (padding gets weight 0). The result
    is sum(w_i * nll_i) / sum(w_i); the weight total must be positive.
    """
    if logits.data.ndim != 2:
        raise ValueError("logits must be (N, V)")
    tgt = np.asarray(targets)
    if tgt.shape != (logits.data.shape[0],):
        raise ValueError("targets must be a vector matching the logit rows")
    v = logits.data.shape[1]
    if tgt.size and (tgt.min() < 0 or tgt.max() >= v):
        raise IndexError(f"target id out of range [0, {v})")
    if weights is None:
        w = np.ones(tgt.shape[0], dtype=logits.data.dtype)
    else:
        w = np.asarray(weights, dtype=logits.data.dtype)
        if w.shape != tgt.shape:
            raise ValueError("weights must match targets")
        if (w < 0).any():
            raise ValueError("weights must be nonnegative")
    wsum = w.sum()
    if not wsum > 0:
        raise ValueError("weight total must be positive")

    ld = logits.data
    rowmax = ld.max(axis=-1, keepdims=True)
    ex = np.exp(ld - rowmax)
    zsum = ex.sum(axis=-1, keepdims=True)
    logz = (np.log(zsum) + rowmax).squeeze(-1)
    rows = np.arange(ld.shape[0])
    nll = logz - ld[rows, tgt]
    out, track = _make(np.asarray((w * nll).sum() / wsum, dtype=ld.dtype), (logits,))
    if track:
        soft = ex / zsum
        def _bw():
            d = soft.copy()
            d[rows, tgt] -= 1.0
            logits.grad += d * (w / wsum)[:, None] * out.grad
        out._backward = _bw
    return out


# -- verification helpers -----------------------------------------------------


def forward_backward(loss: Tensor) -> tuple[float, dict[Tensor, np.ndarray]]:
    """Run a backward pass from scalar ``loss``.

    Returns the loss value and a map from each reachable leaf tensor (one with
    ``requires_grad`` and no recorded parents) to its gradient array. Leaves
    without the flag never appear.
    """
    loss.backward()
    grads: dict[Tensor, np.ndarray] = {}
    for t in _toposort(loss):
        if t.requires_grad and not t._parents:
            grads[t] = t.grad
    return float(loss.data.reshape(())), grads


def finite_difference_grad(f: Callable[[Tensor], "Tensor | float"], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, one coordinate at a time."""
    if not h > 0:
        raise ValueError("step size must be positive")

    def evaluate(arr: np.ndarray) -> float:
        with no_grad():
            r = f(Tensor(arr))
        return float(r.data.reshape(())) if isinstance(r, Tensor) else float(r)

    base = np.array(x.data, dtype=np.float64)
    grad = np.zeros_like(base)
    flat, gflat = base.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = evaluate(base)
        flat[i] = orig - h
        lo = evaluate(base)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad
