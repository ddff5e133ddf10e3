"""Minimal define-by-run reverse-mode differentiation over numpy arrays.

Every op returns a new :class:`Tensor` holding its parents and a closure that
maps the upstream gradient to parent gradients.  :func:`grad` collects the
nodes reachable from a scalar output into a :class:`Tape` (topologically
ordered by creation id) and walks it once in reverse.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager

import numpy as np

_ids = itertools.count()
_default_dtype = np.float32
_local = threading.local()


def default_dtype():
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    _default_dtype = np.dtype(dtype).type


@contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for non-float inputs."""
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextmanager
def no_grad():
    """Record nothing: ops inside return constant tensors (this thread only)."""
    prev = grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


class Tensor:
    __slots__ = ("value", "parents", "backward_fn", "requires_grad", "id")

    def __init__(self, value, requires_grad=False, dtype=None, _parents=(), _backward=None):
        arr = np.asarray(value)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_default_dtype)
        self.value = arr
        self.parents = _parents
        self.backward_fn = _backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self.id = next(_ids)

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def size(self):
        return self.value.size

    def numpy(self):
        return self.value

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Nodes reachable from an output, parents strictly before children."""

    def __init__(self, output: Tensor):
        seen = {}
        stack = [output]
        while stack:
            node = stack.pop()
            if node.id in seen or not node.requires_grad:
                continue
            seen[node.id] = node
            stack.extend(node.parents)
        # creation ids are monotone, so sorting by id is a topological order
        self.nodes = sorted(seen.values(), key=lambda n: n.id)

    def __len__(self):
        return len(self.nodes)

    def backward(self, output: Tensor, seed=None) -> dict[int, np.ndarray]:
        grads = {output.id: np.ones_like(output.value) if seed is None else seed}
        for node in reversed(self.nodes):
            g = grads.pop(node.id, None) if node.backward_fn is not None else grads.get(node.id)
            if g is None or node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.id in grads:
                    grads[parent.id] = grads[parent.id] + pg
                else:
                    grads[parent.id] = pg
        return grads


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(value, parents, backward):
    parents = tuple(parents)
    if not grad_enabled() or not any(p.requires_grad for p in parents):
        return Tensor(value)
    return Tensor(value, _parents=parents, _backward=backward)


def grad(output: Tensor, params) -> list[np.ndarray]:
    """Gradient of a scalar ``output`` with respect to each leaf in ``params``."""
    if output.value.shape != ():
        raise ValueError(f"grad needs a scalar output, got shape {output.shape}")
    for p in params:
        if p.parents:
            raise ValueError("grad targets must be leaf tensors")
    if not output.requires_grad:
        return [np.zeros_like(p.value) for p in params]
    grads = Tape(output).backward(output)
    return [grads.get(p.id, np.zeros_like(p.value)) for p in params]


# ----------------------------------------------------------------- primitives


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor(x.value)


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    av, bv = a.value, b.value
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    return _make(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    return out if b is None else add(out, b)


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0
    return _make(np.where(mask, x.value, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def sum(x: Tensor, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.value.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape
    n = x.value.size if axis is None else int(np.prod([shape[a] for a in np.atleast_1d(axis)]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _make(np.asarray(x.value.mean(axis=axis, keepdims=keepdims)), (x,), backward)


def var(x: Tensor, axis=None, keepdims=False) -> Tensor:
    """Population (biased) variance."""
    shape = x.shape
    n = x.value.size if axis is None else int(np.prod([shape[a] for a in np.atleast_1d(axis)]))
    centered = x.value - x.value.mean(axis=axis, keepdims=True)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (g * (2.0 / n) * centered,)

    return _make(np.asarray((centered ** 2).mean(axis=axis, keepdims=keepdims)), (x,), backward)


def rsqrt(x: Tensor) -> Tensor:
    out = 1.0 / np.sqrt(x.value)
    return _make(out, (x,), lambda g: (g * -0.5 * out ** 3,))


def softmax(x: Tensor, axis=-1) -> Tensor:
    shifted = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    return _make(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def _softmax_np(z, axis=-1):
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Summed H(target, softmax(logits)) over all rows; ``target`` is a constant.

    Accepts a single ``[C]`` pair or a batch ``[N, C]``.
    """
    tv = target.value if isinstance(target, Tensor) else np.asarray(target)
    if tv.shape != logits.shape:
        raise ValueError(f"target shape {tv.shape} does not match logits {logits.shape}")
    # non-finite targets come from a diverged rollout; let them reach the loss
    if np.all(np.isfinite(tv)) and (np.any(tv < -1e-6) or not np.allclose(tv.sum(axis=-1), 1.0, atol=1e-6)):
        raise ValueError("target must be a probability distribution along the last axis")
    z = logits.value
    shifted = z - z.max(axis=-1, keepdims=True)
    logsm = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(logsm)
    loss = -(tv * logsm).sum()
    tv_cast = tv.astype(z.dtype, copy=False)
    return _make(np.asarray(loss, dtype=z.dtype), (logits,), lambda g: (g * (probs - tv_cast),))


def sigmoid_binary_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Summed binary cross-entropy of sigmoid(logits) against 0/1 ``labels``."""
    y = np.asarray(labels, dtype=logits.dtype)
    z = logits.value
    # log(1 + exp(-|z|)) form is stable for both signs
    loss = (np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))).sum()
    p = 1.0 / (1.0 + np.exp(-z))
    return _make(np.asarray(loss, dtype=z.dtype), (logits,), lambda g: (g * (p - y),))


# ------------------------------------------------------------------ conv2d


def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    """Padded [N, H+k-1, W+k-1, C] -> [N*H*W, k*k*C] patch rows."""
    n, _, _, c = xp.shape
    s = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp, shape=(n, h, w, k, k, c), strides=(s[0], s[1], s[2], s[1], s[2], s[3]))
    return windows.reshape(n * h * w, k * k * c)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1 'same' convolution, channels last.

    x: [N, H, W, Cin], w: [k, k, Cin, Cout] with k odd.
    """
    k, k2, cin, cout = w.shape
    if k != k2 or k % 2 == 0:
        raise ValueError("conv2d needs a square, odd-sized kernel")
    if x.value.ndim != 4 or x.shape[3] != cin:
        raise ValueError(f"conv2d input {x.shape} incompatible with kernel {w.shape}")
    n, h, wd, _ = x.shape
    p = k // 2
    xp = np.pad(x.value, ((0, 0), (p, p), (p, p), (0, 0)))
    cols = _im2col(xp, k, h, wd)
    wmat = w.value.reshape(-1, cout)
    out = (cols @ wmat).reshape(n, h, wd, cout)

    def backward(g):
        gmat = g.reshape(-1, cout)
        gw = (cols.T @ gmat).reshape(w.shape)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, i:i + h, j:j + wd] += g @ w.value[i, j].T
        return gxp[:, p:p + h, p:p + wd], gw

    out = _make(out, (x, w), backward)
    return out if b is None else add(out, b)
