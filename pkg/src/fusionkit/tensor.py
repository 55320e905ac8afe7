"""Minimal reverse-mode autodiff engine on float64 numpy arrays.

Provides exactly the operations the fusion interfaces and task heads need:
elementwise arithmetic and activations, matmul, 1-D convolution
(cross-correlation convention), softmax/log-softmax, axis reductions,
shape plumbing, Gumbel sampling, backward(), and a finite-difference
gradient checker.

Graph contract: a graph is built by one forward pass and consumed by one
backward() call. Tensors are immutable after creation except for gradient
accumulation; frozen tensors (requires_grad=False) never receive gradient.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import GraphConsumedError, NondeterminismError, ShapeError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

_node_counter = itertools.count()


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Dense N-d float64 value participating in reverse-mode differentiation.

    `data` is kept C-contiguous (row-major). `grad` is populated by
    backward() on every reachable tensor with requires_grad=True and is
    accumulated additively across uses.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_nid")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple = (), _backward: Optional[Callable] = None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward
        self._nid = next(_node_counter)

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        """Constant copy sharing data, cut loose from the graph."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph construction helpers ------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"],
              backward: Callable) -> "Tensor":
        """Create an op node; drops the closure when no parent needs grad."""
        needs = any(p.requires_grad for p in parents)
        if not needs:
            return Tensor(data)
        return Tensor(data, requires_grad=True,
                      _parents=tuple(parents), _backward=backward)

    def _accumulate(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            # copy: the incoming array may alias a sibling's gradient
            self.grad = np.array(grad, dtype=np.float64)
        else:
            self.grad += grad

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise ---------------------------------------------------------------


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    out_data = a.data + b.data

    def backward(grad):
        a._accumulate(_unbroadcast(grad, a.shape))
        b._accumulate(_unbroadcast(grad, b.shape))

    return Tensor._make(out_data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    out_data = a.data - b.data

    def backward(grad):
        a._accumulate(_unbroadcast(grad, a.shape))
        b._accumulate(-_unbroadcast(grad, b.shape))

    return Tensor._make(out_data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    out_data = a.data * b.data

    def backward(grad):
        a._accumulate(_unbroadcast(grad * b.data, a.shape))
        b._accumulate(_unbroadcast(grad * a.data, b.shape))

    return Tensor._make(out_data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out_data = a.data * s

    def backward(grad):
        a._accumulate(grad * s)

    return Tensor._make(out_data, (a,), backward)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out_data = x * cdf

    def backward(grad):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        a._accumulate(grad * (cdf + x * pdf))

    return Tensor._make(out_data, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def backward(grad):
        a._accumulate(grad * (1.0 - out_data * out_data))

    return Tensor._make(out_data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)

    def backward(grad):
        a._accumulate(grad * (a.data > 0.0))

    return Tensor._make(out_data, (a,), backward)


_ELEMENTWISE_BINARY = {"add": add, "sub": sub, "mul": mul}
_ELEMENTWISE_UNARY = {"gelu": gelu, "tanh": tanh, "relu": relu}


def elementwise(op_kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch an elementwise op by name.

    Binary kinds (`add`, `sub`, `mul`) require b; `scale` takes a float b;
    unary kinds (`gelu`, `tanh`, `relu`) forbid b.
    """
    if op_kind in _ELEMENTWISE_BINARY:
        if b is None:
            raise ValueError(f"elementwise {op_kind!r} needs a second operand")
        return _ELEMENTWISE_BINARY[op_kind](a, b)
    if op_kind == "scale":
        if not isinstance(b, (int, float)):
            raise ValueError("elementwise 'scale' needs a float factor")
        return scale(a, b)
    if op_kind in _ELEMENTWISE_UNARY:
        if b is not None:
            raise ValueError(f"elementwise {op_kind!r} is unary")
        return _ELEMENTWISE_UNARY[op_kind](a)
    raise ValueError(f"unknown elementwise kind {op_kind!r}")


# -- linear algebra -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b with b strictly 2-D (K, P); a may carry leading batch axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.ndim != 2 or a.ndim < 1:
        raise ShapeError(f"matmul: need a at least 1-D and b 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree, {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(grad):
        a._accumulate(grad @ b.data.T)
        if b.requires_grad:
            flat_a = a.data.reshape(-1, a.shape[-1])
            flat_g = grad.reshape(-1, grad.shape[-1])
            b._accumulate(flat_a.T @ flat_g)

    return Tensor._make(out_data, (a, b), backward)


def conv1d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """1-D cross-correlation along the last axis.

    x: (C_in, S) or (B, C_in, S); kernels: (C_out, C_in, K).
    Output length is floor((S + 2*padding - K) / stride) + 1.
    """
    x, kernels = _as_tensor(x), _as_tensor(kernels)
    if kernels.ndim != 3:
        raise ShapeError(f"conv1d: kernels must be (C_out, C_in, K), got {kernels.shape}")
    squeeze = x.ndim == 2
    if x.ndim not in (2, 3):
        raise ShapeError(f"conv1d: input must be (C_in, S) or (B, C_in, S), got {x.shape}")
    xb = x.data[None] if squeeze else x.data
    b_n, c_in, s = xb.shape
    c_out, kc_in, k = kernels.shape
    if kc_in != c_in:
        raise ShapeError(f"conv1d: input has {c_in} channels but kernels expect {kc_in}")
    if k > s + 2 * padding:
        raise ShapeError(f"conv1d: kernel length {k} exceeds padded signal {s + 2 * padding}")
    out_len = (s + 2 * padding - k) // stride + 1

    xp = np.pad(xb, ((0, 0), (0, 0), (padding, padding))) if padding else xb
    idx = stride * np.arange(out_len)[:, None] + np.arange(k)[None, :]
    # flatten windows to (B*out, C_in*K) so contraction runs through BLAS
    win = np.ascontiguousarray(xp[:, :, idx].transpose(0, 2, 1, 3))
    win2 = win.reshape(b_n * out_len, c_in * k)
    ker2 = kernels.data.reshape(c_out, c_in * k)
    out_data = (win2 @ ker2.T).reshape(b_n, out_len, c_out).transpose(0, 2, 1)
    if squeeze:
        out_data = out_data[0]

    def backward(grad):
        g = grad[None] if squeeze else grad
        g2 = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(b_n * out_len, c_out)
        if kernels.requires_grad:
            kernels._accumulate((g2.T @ win2).reshape(c_out, c_in, k))
        if x.requires_grad:
            dwin = (g2 @ ker2).reshape(b_n, out_len, c_in, k).transpose(0, 2, 1, 3)
            dxp = np.zeros_like(xp)
            for tap in range(k):
                dxp[:, :, tap:tap + stride * (out_len - 1) + 1:stride] += dwin[:, :, :, tap]
            dx = dxp[:, :, padding:padding + s] if padding else dxp
            x._accumulate(dx[0] if squeeze else dx)

    return Tensor._make(out_data, (x, kernels), backward)


# -- normalizations --------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along `axis`. NaN input is rejected."""
    x = _as_tensor(x)
    if np.isnan(x.data).any():
        raise ValueError("softmax: input contains NaN")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(grad):
        inner = (grad * out_data).sum(axis=axis, keepdims=True)
        x._accumulate(out_data * (grad - inner))

    return Tensor._make(out_data, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    if np.isnan(x.data).any():
        raise ValueError("log_softmax: input contains NaN")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse

    def backward(grad):
        x._accumulate(grad - np.exp(out_data) * grad.sum(axis=axis, keepdims=True))

    return Tensor._make(out_data, (x,), backward)


# -- reductions & shape plumbing ---------------------------------------------------


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(grad):
        g = np.asarray(grad)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape).copy())

    return Tensor._make(out_data, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def sqrt(x: Tensor) -> Tensor:
    out_data = np.sqrt(x.data)

    def backward(grad):
        x._accumulate(grad * 0.5 / out_data)

    return Tensor._make(out_data, (x,), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "div")
    out_data = a.data / b.data

    def backward(grad):
        a._accumulate(_unbroadcast(grad / b.data, a.shape))
        b._accumulate(_unbroadcast(-grad * a.data / (b.data * b.data), b.shape))

    return Tensor._make(out_data, (a, b), backward)


def reshape(x: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old_shape = x.shape
    out_data = x.data.reshape(shape)

    def backward(grad):
        x._accumulate(grad.reshape(old_shape))

    return Tensor._make(out_data, (x,), backward)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out_data = np.ascontiguousarray(x.data.transpose(axes))

    def backward(grad):
        x._accumulate(grad.transpose(inverse))

    return Tensor._make(out_data, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: empty tensor list")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(grad):
        moved = np.moveaxis(grad, axis, 0)
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            t._accumulate(np.moveaxis(moved[start:stop], 0, axis))

    return Tensor._make(out_data, tuple(tensors), backward)


def take(x: Tensor, key) -> Tensor:
    """Basic indexing (ints and slices only); gradient scatters back."""
    out_data = x.data[key]

    def backward(grad):
        dx = np.zeros_like(x.data)
        np.add.at(dx, key, grad)
        x._accumulate(dx)

    return Tensor._make(np.ascontiguousarray(out_data), (x,), backward)


# -- sampling -------------------------------------------------------------------


def sample_gumbel(shape, rng_seed: int) -> Tensor:
    """I.i.d. standard Gumbel draws g = -ln(-ln(u)) from a seeded generator."""
    rng = np.random.default_rng(np.random.SeedSequence(rng_seed))
    u = rng.random(size=tuple(shape))
    # rng.random() yields [0, 1); flip to (0, 1] so both logs are finite
    return Tensor(-np.log(-np.log(1.0 - u)))


# -- backward & gradient checking -------------------------------------------------


_CONSUMED = object()


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss; consumes the graph.

    Gradient accumulates additively into every reachable tensor with
    requires_grad=True. Calling backward through an already-consumed
    graph raises GraphConsumedError.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    seen: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in seen or not node.requires_grad:
            continue
        seen[id(node)] = node
        stack.extend(node._parents)

    # Creation ids give a valid topological order (parents are always
    # created before children), so descending id is reverse-topological
    # and each node's gradient is complete when its closure runs.
    order = sorted(seen.values(), key=lambda t: t._nid, reverse=True)
    loss._accumulate(np.ones_like(loss.data))
    for node in order:
        fn = node._backward
        if fn is _CONSUMED:
            raise GraphConsumedError("graph already consumed by a previous backward()")
        if fn is None:
            continue
        node._backward = _CONSUMED
        fn(node.grad)


def grad_check(forward_fn: Callable[[Tensor], Tensor], x: Tensor,
               eps: float = 1e-5, max_coords: Optional[int] = None,
               rng: Optional[np.random.Generator] = None,
               order: int = 2) -> float:
    """Worst relative error of backward() against central finite differences.

    `forward_fn` maps a Tensor to a scalar Tensor and must be deterministic
    (checked by double evaluation). Relative error uses denominator
    max(|analytic|, |numeric|, 1e-8). With `max_coords`, a random subset of
    coordinates is probed instead of all of them. order=4 uses the
    five-point central stencil, which tolerates a larger eps and thereby a
    much lower roundoff floor; use it for deep compositions whose smallest
    gradient coordinates sit near the float64 noise level.
    """
    if order not in (2, 4):
        raise ValueError(f"grad_check: order must be 2 or 4, got {order}")
    probe1 = forward_fn(x)
    probe2 = forward_fn(x)
    if probe1.data.size != 1:
        raise ShapeError("grad_check: forward_fn must return a scalar")
    if probe1.data.reshape(()) != probe2.data.reshape(()):
        raise NondeterminismError("forward_fn returned different values on re-evaluation")

    x.requires_grad = True
    x.zero_grad()
    backward(forward_fn(x))
    analytic = (x.grad if x.grad is not None else np.zeros_like(x.data)).ravel()

    flat = x.data.ravel()
    n = flat.size
    if max_coords is not None and max_coords < n:
        gen = rng if rng is not None else np.random.default_rng(0)
        coords = gen.choice(n, size=max_coords, replace=False)
    else:
        coords = range(n)

    def f_at(i, offset):
        orig = flat[i]
        flat[i] = orig + offset
        value = float(forward_fn(x).data.reshape(()))
        flat[i] = orig
        return value

    worst = 0.0
    for i in coords:
        if order == 2:
            numeric = (f_at(i, eps) - f_at(i, -eps)) / (2.0 * eps)
        else:
            numeric = (f_at(i, -2 * eps) - 8.0 * f_at(i, -eps)
                       + 8.0 * f_at(i, eps) - f_at(i, 2 * eps)) / (12.0 * eps)
        denom = max(abs(analytic[i]), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst
