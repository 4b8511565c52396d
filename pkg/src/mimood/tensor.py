"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation returns a new :class:`Tensor`.  When at least one operand
tracks gradients the result remembers its parents together with a closure
that maps the upstream gradient onto gradients for each parent.  Calling
:func:`backward` on a scalar sweeps that record in reverse topological
order and accumulates into the ``grad`` field of the leaf tensors.

Broadcasting is deliberately absent: binary elementwise ops need identical
shapes, ``scale`` multiplies by a Python scalar and ``bias_add`` adds a
per-feature / per-channel vector.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, DomainError, NumericError

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """A row-major float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op})"

    # operator sugar; all of these route through the module-level ops
    def __add__(self, other):
        return add(self, _as_tensor(other, self.shape))

    def __radd__(self, other):
        return add(_as_tensor(other, self.shape), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.shape))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.shape), self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(value, shape) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(shape, float(value)))


def _result(data: np.ndarray, parents: Sequence[Tensor], fn: BackwardFn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced a non-finite value")
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of ``a`` [m x k] and ``b`` [k x n]."""
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ bd.T, ad.T @ g

    return _result(ad @ bd, (a, b), bw, "matmul")


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation.

    ``x`` is [N x C x H x W] and ``kernels`` is [F x C x kh x kw]; the output is
    [N x F x H' x W'] with ``H' = (H + 2p - kh) // stride + 1``.
    """
    if x.ndim != 4 or kernels.ndim != 4:
        raise DimensionError(f"conv2d needs rank-4 input and kernels, got {x.shape}, {kernels.shape}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: bad stride {stride} / padding {padding}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernels.shape
    if kc != c:
        raise DimensionError(f"conv2d: input has {c} channels, kernels {kernels.shape} expect {kc}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # cols: [N*H'*W', C*kh*kw]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = kernels.data.reshape(f, c * kh * kw)
    out = (cols @ wmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    kd = kernels.data

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        dk = (gmat.T @ cols).reshape(kd.shape)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                contrib = np.einsum("nfhw,fc->nchw", g, kd[:, :, i, j])
                dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += contrib
        dx = dxp[:, :, padding : padding + h, padding : padding + w]
        return dx, dk

    return _result(np.ascontiguousarray(out), (x, kernels), bw, "conv2d")


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-F vector along axis 1 of an [N x F] or [N x F x H x W] tensor."""
    if b.ndim != 1 or x.ndim not in (2, 4) or x.shape[1] != b.shape[0]:
        raise DimensionError(f"bias_add: cannot add bias {b.shape} to {x.shape}")
    view = (1, -1) + (1,) * (x.ndim - 2)
    axes = (0,) + tuple(range(2, x.ndim))

    def bw(g):
        return g, g.sum(axis=axes)

    return _result(x.data + b.data.reshape(view), (x, b), bw, "bias_add")


def mean_pool2d(x: Tensor, size: int) -> Tensor:
    """Non-overlapping ``size`` x ``size`` average pooling; trailing rows/cols are dropped."""
    if x.ndim != 4:
        raise DimensionError(f"mean_pool2d needs rank-4 input, got {x.shape}")
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho < 1 or wo < 1:
        raise DimensionError(f"mean_pool2d: window {size} larger than input {h}x{w}")
    crop = x.data[:, :, : ho * size, : wo * size]
    out = crop.reshape(n, c, ho, size, wo, size).mean(axis=(3, 5))
    in_shape = x.shape

    def bw(g):
        up = np.repeat(np.repeat(g, size, axis=2), size, axis=3) / (size * size)
        dx = np.zeros(in_shape)
        dx[:, :, : ho * size, : wo * size] = up
        return (dx,)

    return _result(out, (x,), bw, "mean_pool2d")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
    in_shape = x.shape

    def bw(g):
        return (g.reshape(in_shape),)

    return _result(x.data.reshape(shape).copy(), (x,), bw, "reshape")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _result(a.data * factor, (a,), lambda g: (g * factor,), "scale")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,), "log")


_UNARY = {"neg": neg, "relu": relu, "exp": exp, "log": log}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, *operands, factor: Optional[float] = None) -> Tensor:
    """Dispatch one of add/sub/mul/scale/relu/exp/log/neg by name."""
    if op in _BINARY:
        if len(operands) != 2:
            raise ContractError(f"{op} takes two operands")
        return _BINARY[op](*operands)
    if op in _UNARY:
        if len(operands) != 1:
            raise ContractError(f"{op} takes one operand")
        return _UNARY[op](operands[0])
    if op == "scale":
        if len(operands) != 1 or factor is None:
            raise ContractError("scale takes one operand and a factor")
        return scale(operands[0], factor)
    raise ContractError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# reductions


def _check_axis(t: Tensor, axis: Optional[int]) -> None:
    if axis is not None and not 0 <= axis < t.ndim:
        raise DimensionError(f"axis {axis} out of range for rank {t.ndim}")


def sum(t: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    _check_axis(t, axis)
    shape = t.shape

    def bw(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(np.asarray(t.data.sum(axis=axis), dtype=np.float64), (t,), bw, "sum")


def mean(t: Tensor, axis: Optional[int] = None) -> Tensor:
    _check_axis(t, axis)
    shape = t.shape
    count = t.size if axis is None else shape[axis]

    def bw(g):
        if axis is None:
            return (np.full(shape, float(g) / count),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape) / count,)

    return _result(np.asarray(t.data.mean(axis=axis), dtype=np.float64), (t,), bw, "mean")


def max(t: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    """Maximum; the gradient flows to the first maximal element only."""
    _check_axis(t, axis)
    shape = t.shape
    if axis is None:
        idx = int(np.argmax(t.data))

        def bw(g):
            d = np.zeros(t.size)
            d[idx] = float(g)
            return (d.reshape(shape),)

        return _result(np.asarray(t.data.reshape(-1)[idx]), (t,), bw, "max")

    idx = np.expand_dims(np.argmax(t.data, axis=axis), axis)
    out = np.take_along_axis(t.data, idx, axis=axis).squeeze(axis)

    def bw(g):
        d = np.zeros(shape)
        np.put_along_axis(d, idx, np.expand_dims(g, axis), axis=axis)
        return (d,)

    return _result(out, (t,), bw, "max")


_REDUCE = {"sum": sum, "mean": mean, "max": max}


def reduce(op: str, t: Tensor, axis: Optional[int] = None) -> Tensor:
    if op not in _REDUCE:
        raise ContractError(f"unknown reduction {op!r}")
    return _REDUCE[op](t, axis)


def log_softmax(z: Tensor) -> Tensor:
    """Row-wise log-softmax of an [N x C] tensor via the log-sum-exp trick."""
    if z.ndim != 2:
        raise DimensionError(f"log_softmax expects [N x C], got {z.shape}")
    shifted = z.data - z.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(out)

    def bw(g):
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return _result(out, (z,), bw, "log_softmax")


# ---------------------------------------------------------------------------
# graph traversal


@dataclass(frozen=True)
class ComputationGraph:
    """Nodes reachable from an output, inputs always before their consumers."""

    nodes: tuple[Tensor, ...]

    @classmethod
    def from_output(cls, out: Tensor) -> "ComputationGraph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(tuple(order))

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if not n._parents and n.requires_grad]


def backward(loss: Tensor, graph: Optional[ComputationGraph] = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every gradient-tracking leaf."""
    if loss.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    if graph is None:
        graph = ComputationGraph.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def zeros(shape: Iterable[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(tuple(shape)), requires_grad=requires_grad)
