"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation the model needs is implemented here with an explicit
backward rule; nothing else is. Broadcasting is deliberately restricted to
scalar-vs-tensor and row-vector-vs-matrix (bias add) so each backward rule
stays auditable. Graphs are built dynamically: an op result remembers its
parents and a closure that routes the incoming gradient to them, and
``backward`` on a scalar loss walks the tape once in reverse topological
order. Distinct graphs share no mutable state, so independent forward and
backward passes may run concurrently on different threads.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

LOG_CLAMP = 1e-12


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


class Tensor:
    """A dense float64 array plus optional gradient tape bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._backward_done = False

    # -- basics -------------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A view of the same values cut off from the tape."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- tape ---------------------------------------------------------------

    def backward(self) -> None:
        """Populate .grad of every requires_grad leaf reachable from this scalar."""
        if self.data.ndim != 0:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() on a tensor that does not require grad")
        if self._backward_done:
            raise ContractError("backward() already called on this graph; rebuild it first")
        self._backward_done = True

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.ones((), dtype=np.float64)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- method forms used throughout the model code ------------------------

    def sum(self):
        return tensor_sum(self)

    def mean_axis(self, axis: int):
        return mean_axis(self, axis)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int] | None = None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def log(self):
        return log(self)

    def pow_scalar(self, p: float):
        return pow_scalar(self, p)

    def slice_cols(self, lo: int, hi: int):
        return slice_cols(self, lo, hi)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float64), requires_grad=requires_grad)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _accum(p: Tensor, g: np.ndarray) -> None:
    if not p.requires_grad:
        return
    if p.grad is None:
        p.grad = np.array(g, dtype=np.float64)
    else:
        p.grad += g


# -- elementwise arithmetic ---------------------------------------------------


def _coerce_scalar(x) -> float | None:
    if isinstance(x, (int, float, np.floating, np.integer)):
        return float(x)
    return None


def add(a: Tensor, b) -> Tensor:
    """a + b for same-shape tensors, tensor+scalar, or matrix+row-vector bias."""
    s = _coerce_scalar(b)
    if s is not None:
        def back_scalar(g, a=a):
            _accum(a, g)
        return _result(a.data + s, (a,), back_scalar)
    if not isinstance(b, Tensor):
        raise TypeError(f"cannot add Tensor and {type(b).__name__}")
    if a.shape == b.shape:
        def back_same(g, a=a, b=b):
            _accum(a, g)
            _accum(b, g)
        return _result(a.data + b.data, (a, b), back_same)
    # row-vector bias onto a matrix, in either argument order
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        def back_bias(g, a=a, b=b):
            _accum(a, g)
            _accum(b, g.sum(axis=0))
        return _result(a.data + b.data, (a, b), back_bias)
    if a.ndim == 1 and b.ndim == 2 and b.shape[1] == a.shape[0]:
        def back_bias_rev(g, a=a, b=b):
            _accum(a, g.sum(axis=0))
            _accum(b, g)
        return _result(a.data + b.data, (a, b), back_bias_rev)
    if a.ndim == 0 or b.ndim == 0:
        def back_mixed(g, a=a, b=b):
            _accum(a, g if a.ndim else g.sum())
            _accum(b, g if b.ndim else g.sum())
        return _result(a.data + b.data, (a, b), back_mixed)
    raise ShapeError(f"add: incompatible shapes {a.shape} vs {b.shape}")


def neg(a: Tensor) -> Tensor:
    def back(g, a=a):
        _accum(a, -g)
    return _result(-a.data, (a,), back)


def sub(a: Tensor, b) -> Tensor:
    s = _coerce_scalar(b)
    if s is not None:
        return add(a, -s)
    return add(a, neg(b))


def mul(a: Tensor, b) -> Tensor:
    """Hadamard product for same-shape tensors, or scaling by a scalar."""
    s = _coerce_scalar(b)
    if s is not None:
        def back_scalar(g, a=a, s=s):
            _accum(a, g * s)
        return _result(a.data * s, (a,), back_scalar)
    if not isinstance(b, Tensor):
        raise TypeError(f"cannot multiply Tensor and {type(b).__name__}")
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"hadamard: incompatible shapes {a.shape} vs {b.shape}")

    def back(g, a=a, b=b):
        ga = g * b.data
        gb = g * a.data
        _accum(a, ga if a.ndim == g.ndim else ga.sum())
        _accum(b, gb if b.ndim == g.ndim else gb.sum())
    return _result(a.data * b.data, (a, b), back)


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Strict 2-D matrix product; backward is dA = dC Bᵀ, dB = Aᵀ dC."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul requires 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree: {a.shape} x {b.shape}")

    def back(g, a=a, b=b):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)
    return _result(a.data @ b.data, (a, b), back)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        if a.ndim != 2:
            raise ShapeError(f"transpose() without axes requires 2-D input, got {a.shape}")
        axes = (1, 0)
    axes = tuple(axes)
    inv = tuple(int(i) for i in np.argsort(axes))

    def back(g, a=a, inv=inv):
        _accum(a, g.transpose(inv))
    return _result(a.data.transpose(axes), (a,), back)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)

    def back(g, a=a):
        _accum(a, g.reshape(a.shape))
    return _result(a.data.reshape(shape), (a,), back)


def slice_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    """Columns [lo, hi) of a 2-D tensor; backward scatters into the range."""
    if a.ndim != 2:
        raise ShapeError(f"slice_cols requires 2-D input, got {a.shape}")
    if not (0 <= lo < hi <= a.shape[1]):
        raise ContractError(f"slice_cols range [{lo}, {hi}) invalid for shape {a.shape}")

    def back(g, a=a, lo=lo, hi=hi):
        full = np.zeros(a.shape, dtype=np.float64)
        full[:, lo:hi] = g
        _accum(a, full)
    return _result(a.data[:, lo:hi].copy(), (a,), back)


def concat(parts: Iterable[Tensor]) -> Tensor:
    """Concatenate along the last axis; all other extents must agree."""
    parts = list(parts)
    if not parts:
        raise ContractError("concat of an empty sequence")
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead or p.ndim != parts[0].ndim:
            raise ShapeError(
                f"concat: leading extents disagree: {parts[0].shape} vs {p.shape}"
            )
    widths = [p.shape[-1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def back(g, parts=parts, offsets=offsets):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accum(p, g[..., lo:hi])
    return _result(np.concatenate([p.data for p in parts], axis=-1), tuple(parts), back)


# -- reductions ---------------------------------------------------------------


def tensor_sum(a: Tensor) -> Tensor:
    def back(g, a=a):
        _accum(a, np.broadcast_to(g, a.shape))
    return _result(a.data.sum(), (a,), back)


def mean_axis(a: Tensor, axis: int) -> Tensor:
    """Mean over one named axis; the axis is removed from the shape."""
    if not (-a.ndim <= axis < a.ndim):
        raise ShapeError(f"mean_axis: axis {axis} out of range for shape {a.shape}")
    axis = axis % a.ndim
    n = a.shape[axis]

    def back(g, a=a, axis=axis, n=n):
        _accum(a, np.broadcast_to(np.expand_dims(g, axis) / n, a.shape))
    return _result(a.data.mean(axis=axis), (a,), back)


# -- nonlinearities -----------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def back(g, a=a, mask=mask):
        _accum(a, g * mask)
    return _result(np.where(mask, a.data, 0.0), (a,), back)


def sigmoid(a: Tensor) -> Tensor:
    # Split by sign to avoid overflow in exp for large |x|.
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def back(g, a=a, out=out):
        _accum(a, g * out * (1.0 - out))
    return _result(out, (a,), back)


def log(a: Tensor) -> Tensor:
    """Natural log with the input clamped below at 1e-12."""
    clamped = np.maximum(a.data, LOG_CLAMP)

    def back(g, a=a, clamped=clamped):
        _accum(a, np.where(a.data > LOG_CLAMP, g / clamped, 0.0))
    return _result(np.log(clamped), (a,), back)


def pow_scalar(a: Tensor, p: float) -> Tensor:
    p = float(p)
    out = np.power(a.data, p)

    def back(g, a=a, p=p):
        _accum(a, g * p * np.power(a.data, p - 1.0))
    return _result(out, (a,), back)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values to [lo, hi]; gradient passes only through the interior."""
    inside = (a.data > lo) & (a.data < hi)

    def back(g, a=a, inside=inside):
        _accum(a, g * inside)
    return _result(np.clip(a.data, lo, hi), (a,), back)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax of a 2-D tensor, stabilised by per-row max subtraction."""
    if a.ndim != 2:
        raise ShapeError(f"softmax_rows requires 2-D input, got {a.shape}")
    if np.isnan(a.data).any():
        raise NumericError("softmax_rows: NaN in input")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def back(g, a=a, out=out):
        # per row: dx = s ⊙ (g − (g·s)), the action of diag(s) − s sᵀ
        dot = (g * out).sum(axis=1, keepdims=True)
        _accum(a, out * (g - dot))
    return _result(out, (a,), back)


# -- convolution support --------------------------------------------------------


def im2col(a: Tensor, kernel: int, stride: int) -> Tensor:
    """Unfold (B, C, H, W) into ((B·oh·ow), C·k·k) patch rows.

    Column order is (channel, kernel-row, kernel-col), so a matmul with a
    (C·k·k, F) weight matrix performs a valid cross-correlation. The
    backward pass scatter-adds patch gradients back into the image.
    """
    if a.ndim != 4:
        raise ShapeError(f"im2col requires (B, C, H, W) input, got {a.shape}")
    b_sz, c, h, w = a.shape
    k, s = int(kernel), int(stride)
    if h < k or w < k:
        raise ShapeError(f"im2col: kernel {k} larger than spatial dims of {a.shape}")
    oh = (h - k) // s + 1
    ow = (w - k) // s + 1
    cols = np.empty((b_sz, oh, ow, c, k, k), dtype=np.float64)
    for di in range(k):
        for dj in range(k):
            cols[:, :, :, :, di, dj] = a.data[:, :, di:di + s * oh:s, dj:dj + s * ow:s].transpose(0, 2, 3, 1)

    def back(g, a=a, dims=(b_sz, c, h, w, oh, ow, k, s)):
        b_sz, c, h, w, oh, ow, k, s = dims
        g6 = g.reshape(b_sz, oh, ow, c, k, k)
        gx = np.zeros((b_sz, c, h, w), dtype=np.float64)
        for di in range(k):
            for dj in range(k):
                gx[:, :, di:di + s * oh:s, dj:dj + s * ow:s] += g6[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
        _accum(a, gx)
    return _result(cols.reshape(b_sz * oh * ow, c * k * k), (a,), back)


def conv_output_side(side: int, kernel: int, stride: int) -> int:
    return (side - kernel) // stride + 1
