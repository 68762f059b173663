"""Reverse-mode autodiff on top of numpy.

Each op builds a new :class:`Tensor` holding its parents and a closure that
pushes the output gradient back into them. ``Tensor.backward`` walks the graph
in reverse topological order. Only the primitives needed by the segmentation
network and the consistency losses are provided.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NonFiniteError

COSINE_EPS = 1e-12

_grad_enabled = True
_check_finite = False


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def detect_anomaly():
    """Raise :class:`NonFiniteError` naming the first primitive whose output is not finite."""
    global _check_finite
    prev, _check_finite = _check_finite, True
    try:
        yield
    finally:
        _check_finite = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = "leaf"):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind in "iub":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[], None] | None = None
        self.op = op
        if _check_finite and not np.all(np.isfinite(arr)):
            raise NonFiniteError(op)

    # -- bookkeeping ---------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ContractError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=self.data.dtype).copy()
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward()

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = as_tensor(other, self.dtype)
        return _make(self.data + other.data, (self, other), "add",
                     lambda out: (
                         self._accum(_unbroadcast(out.grad, self.shape)),
                         other._accum(_unbroadcast(out.grad, other.shape)),
                     ))

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other, self.dtype)
        return _make(self.data - other.data, (self, other), "sub",
                     lambda out: (
                         self._accum(_unbroadcast(out.grad, self.shape)),
                         other._accum(_unbroadcast(-out.grad, other.shape)),
                     ))

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other, self.dtype) - self

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other, self.dtype)
        return _make(self.data * other.data, (self, other), "mul",
                     lambda out: (
                         self._accum(_unbroadcast(out.grad * other.data, self.shape)),
                         other._accum(_unbroadcast(out.grad * self.data, other.shape)),
                     ))

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other, self.dtype)
        return _make(self.data / other.data, (self, other), "div",
                     lambda out: (
                         self._accum(_unbroadcast(out.grad / other.data, self.shape)),
                         other._accum(_unbroadcast(-out.grad * self.data / other.data**2, other.shape)),
                     ))

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other, self.dtype) / self

    def __neg__(self) -> "Tensor":
        return _make(-self.data, (self,), "neg", lambda out: self._accum(-out.grad))

    def __pow__(self, p: float) -> "Tensor":
        return _make(self.data**p, (self,), "pow",
                     lambda out: self._accum(out.grad * p * self.data ** (p - 1)))

    def __getitem__(self, idx) -> "Tensor":
        def bw(out):
            g = np.zeros_like(self.data)
            np.add.at(g, idx, out.grad)
            self._accum(g)
        return _make(self.data[idx], (self,), "getitem", bw)

    # -- reductions / reshaping ----------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        def bw(out):
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, self.shape))
        return _make(self.data.sum(axis=axis, keepdims=keepdims), (self,), "sum", bw)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _make(self.data.reshape(shape), (self,), "reshape",
                     lambda out: self._accum(out.grad.reshape(self.shape)))

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        return _make(self.data.transpose(axes), (self,), "transpose",
                     lambda out: self._accum(out.grad.transpose(inv)))

    # -- elementwise ---------------------------------------------------------

    def exp(self) -> "Tensor":
        y = np.exp(self.data)
        return _make(y, (self,), "exp", lambda out: self._accum(out.grad * y))

    def log(self) -> "Tensor":
        return _make(np.log(self.data), (self,), "log", lambda out: self._accum(out.grad / self.data))

    def relu(self) -> "Tensor":
        return relu(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else None)
    return Tensor(arr)


def _make(data: np.ndarray, parents: tuple, op: str, backward) -> Tensor:
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=parents if needs else (), op=op)
    if needs:
        out._backward = lambda: backward(out)
    return out


# -- primitives ---------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0).astype(x.dtype, copy=False), (x,), "relu",
                 lambda out: x._accum(out.grad * mask))


def softmax(logits: Tensor, axis: int = 1) -> Tensor:
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(out):
        g = out.grad
        logits._accum(y * (g - (g * y).sum(axis=axis, keepdims=True)))
    return _make(y, (logits,), "softmax", bw)


def log_softmax(logits: Tensor, axis: int = 1) -> Tensor:
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def bw(out):
        g = out.grad
        logits._accum(g - np.exp(y) * g.sum(axis=axis, keepdims=True))
    return _make(y, (logits,), "log_softmax", bw)


def pick(x: Tensor, index: np.ndarray, axis: int) -> Tensor:
    """``take_along_axis`` with the picked axis removed; used for gathering log-probs at labels."""
    idx = np.expand_dims(np.asarray(index, dtype=np.intp), axis)
    y = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)

    def bw(out):
        g = np.zeros_like(x.data)
        np.put_along_axis(g, idx, np.expand_dims(out.grad, axis), axis=axis)
        x._accum(g)
    return _make(y, (x,), "pick", bw)


def channel_mean(x: Tensor) -> Tensor:
    """Mean over the channel axis of a B×C×H×W (or C×H×W) map; spatial shape is kept."""
    if x.ndim not in (3, 4):
        raise ContractError(f"channel_mean expects a 3-D or 4-D map, got shape {x.shape}")
    return x.mean(axis=x.ndim - 3)


def cosine_similarity(a, b, axis: int = -1, eps: float = COSINE_EPS) -> Tensor:
    """Cosine along ``axis``. Where either norm is below ``eps`` the result is 0 with zero gradient."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ContractError(f"cosine_similarity shape mismatch: {a.shape} vs {b.shape}")
    if a.shape[axis] < 1:
        raise ContractError("cosine_similarity needs vectors of length >= 1")
    dot = (a.data * b.data).sum(axis=axis)
    na = np.sqrt((a.data * a.data).sum(axis=axis))
    nb = np.sqrt((b.data * b.data).sum(axis=axis))
    ok = (na >= eps) & (nb >= eps)
    na_s = np.where(ok, na, 1.0)
    nb_s = np.where(ok, nb, 1.0)
    cos = np.where(ok, dot / (na_s * nb_s), 0.0)

    def bw(out):
        g = np.where(ok, out.grad, 0.0)
        ge, nae, nbe, ce = (np.expand_dims(t, axis) for t in (g, na_s, nb_s, cos))
        a._accum(ge * (b.data / (nae * nbe) - ce * a.data / nae**2))
        b._accum(ge * (a.data / (nae * nbe) - ce * b.data / nbe**2))
    return _make(cos.astype(a.dtype, copy=False), (a, b), "cosine", bw)


def cosine_matrix(a: np.ndarray, b: np.ndarray, eps: float = COSINE_EPS) -> np.ndarray:
    """Pairwise cosines between rows of ``a`` (n×C) and rows of ``b`` (m×C), no gradient."""
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    dots = a @ b.T
    denom = np.outer(na, nb)
    ok = (na[:, None] >= eps) & (nb[None, :] >= eps)
    return np.where(ok, dots / np.where(ok, denom, 1.0), 0.0)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a B×Cin×H×W batch with Cout×Cin×k×k weights (zero padding)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ContractError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    B, cin, H, W = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ContractError(f"conv2d channel mismatch: input has {cin}, weight expects {cin_w}")
    if b is not None and b.shape != (cout,):
        raise ContractError(f"conv2d bias shape {b.shape} does not match {cout} outputs")
    s, p = stride, padding
    Ho = (H + 2 * p - kh) // s + 1
    Wo = (W + 2 * p - kw) // s + 1
    if Ho < 1 or Wo < 1:
        raise ContractError("conv2d kernel larger than padded input")
    # channel-major copy of the padded input; every kernel offset is then a plain strided slice
    xp = np.zeros((cin, B, H + 2 * p, W + 2 * p), dtype=x.dtype)
    xp[:, :, p:p + H, p:p + W] = x.data.transpose(1, 0, 2, 3)
    cols = np.empty((cin, kh, kw, B, Ho, Wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + s * Ho:s, j:j + s * Wo:s]
    cols = cols.reshape(cin * kh * kw, B * Ho * Wo)
    wmat = w.data.reshape(cout, -1)
    y = wmat @ cols
    if b is not None:
        y += b.data[:, None]
    y = np.ascontiguousarray(y.reshape(cout, B, Ho, Wo).transpose(1, 0, 2, 3))
    parents = (x, w) if b is None else (x, w, b)

    def bw(out):
        g2 = np.ascontiguousarray(out.grad.transpose(1, 0, 2, 3)).reshape(cout, -1)
        if w.requires_grad:
            w._accum((g2 @ cols.T).reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accum(g2.sum(axis=1))
        if x.requires_grad:
            dcols = (wmat.T @ g2).reshape(cin, kh, kw, B, Ho, Wo)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + s * Ho:s, j:j + s * Wo:s] += dcols[:, i, j]
            x._accum(dxp[:, :, p:p + H, p:p + W].transpose(1, 0, 2, 3))
    return _make(y, parents, "conv2d", bw)


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    # half-pixel centres (align_corners=False); negative sources clamp to 0
    scale = n_in / n_out
    src = np.maximum((np.arange(n_out) + 0.5) * scale - 0.5, 0.0)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    A = np.zeros((n_out, n_in), dtype=dtype)
    np.add.at(A, (np.arange(n_out), i0), 1.0 - lam)
    np.add.at(A, (np.arange(n_out), i1), lam)
    return A


_INTERP_CACHE: dict = {}


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    key = (n_in, n_out, np.dtype(dtype).str)
    if key not in _INTERP_CACHE:
        _INTERP_CACHE[key] = _interp_matrix(n_in, n_out, dtype)
    return _INTERP_CACHE[key]


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Bilinear resize of the two trailing axes by an integer factor, align_corners=False."""
    if x.ndim < 2:
        raise ContractError("bilinear_upsample needs at least two spatial axes")
    h, w = x.shape[-2:]
    Ah = interp_matrix(h, h * factor, x.dtype)
    Aw = interp_matrix(w, w * factor, x.dtype)
    y = Ah @ x.data @ Aw.T
    return _make(y, (x,), "upsample", lambda out: x._accum(Ah.T @ out.grad @ Aw))


def stack_scalars(items: Sequence[Tensor]) -> Tensor:
    """Stack 0-d tensors into a 1-D tensor."""
    data = np.array([t.data for t in items])

    def bw(out):
        for k, t in enumerate(items):
            t._accum(out.grad[k])
    return _make(data, tuple(items), "stack", bw)


def parameters_finite(tensors: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(t.data)) for t in tensors)
