"""Dense float32 tensors with reverse-mode automatic differentiation.

Everything downstream (backbones, distillation, evaluation heads) runs on
this module. A ``Tensor`` wraps a row-major ``numpy`` float32 array; every
differentiable operation records its parents and a local-gradient closure,
and ``backward`` replays the recorded graph once in reverse topological
order. Graph construction and backward are single-threaded; numpy kernels
may parallelize internally but reduction order is fixed, so repeated
backward passes over the same graph are bitwise identical.

Broadcasting follows numpy's trailing-dimension rules; gradients of
broadcast operands are summed back to the operand shape.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, DimensionError, NumericalError

ArrayLike = Union["Tensor", np.ndarray, float, int, list, tuple]

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / data paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A dense float32 array plus an optional gradient accumulator.

    ``shape`` is the logical shape, ``data`` the flat row-major storage
    viewed through it. Tensors created by operations keep references to
    their parents and a per-parent local-gradient closure; leaves have
    neither.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fns")

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float32)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._grad_fns: tuple = ()

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
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def copy(self) -> "Tensor":
        out = Tensor(self.data.copy(), requires_grad=self.requires_grad)
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- graph construction ---------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        g = np.asarray(g, dtype=np.float32)
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return pow_scalar(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    # -- method forms of common ops -------------------------------------------

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sqrt(self):
        return sqrt(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def flip(self, axis):
        return flip(self, axis)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], grad_fns: Sequence[Callable]) -> Tensor:
    """Wrap an op result, recording the graph only when gradients are live."""
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._parents = tuple(parents)
        out._grad_fns = tuple(grad_fns)
    return out


def make_node(data: np.ndarray, parents: Sequence[Tensor], grad_fns: Sequence[Callable]) -> Tensor:
    """Public hook for fused ops that supply their own backward closures."""
    return _make(data, parents, grad_fns)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every reachable leaf that requires it.

    The recorded graph is ordered topologically (inputs before outputs,
    iteratively, so scan-length graphs never hit the recursion limit) and
    each node's local-gradient closures run exactly once. Intermediate
    gradients live in a scratch table, not on the tensors, so re-running
    backward over the same graph after zeroing leaf grads reproduces the
    exact same bytes.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward() called on a tensor with no recorded graph")

    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    table: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = table.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            if node.requires_grad:
                node._accumulate(g)
            continue
        for parent, fn in zip(node._parents, node._grad_fns):
            if not parent.requires_grad:
                continue
            contribution = np.asarray(fn(g), dtype=np.float32)
            key = id(parent)
            if key in table:
                table[key] = table[key] + contribution
            else:
                table[key] = contribution


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def assert_finite(t: Tensor, what: str) -> None:
    if not np.isfinite(t.data).all():
        raise NumericalError(f"non-finite values in {what}")


# -- elementwise arithmetic ----------------------------------------------------


def _broadcast_check(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "add")
    return _make(
        a.data + b.data,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)),
    )


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "mul")
    return _make(
        a.data * b.data,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.data, a.shape),
            lambda g: _unbroadcast(g * a.data, b.shape),
        ),
    )


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "div")
    return _make(
        a.data / b.data,
        (a, b),
        (
            lambda g: _unbroadcast(g / b.data, a.shape),
            lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def pow_scalar(a: ArrayLike, exponent: float) -> Tensor:
    a = _as_tensor(a)
    e = float(exponent)
    # d(x^e)/dx = e * x^(e-1)
    return _make(a.data**e, (a,), (lambda g: g * e * a.data ** (e - 1.0),))


def exp(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    out_data = np.exp(a.data)
    return _make(out_data, (a,), (lambda g: g * out_data,))


def log(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    return _make(np.log(a.data), (a,), (lambda g: g / a.data,))


def sqrt(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    out_data = np.sqrt(a.data)
    return _make(out_data, (a,), (lambda g: g * (0.5 / out_data),))


def tanh(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    out_data = np.tanh(a.data)
    return _make(out_data, (a,), (lambda g: g * (1.0 - out_data * out_data),))


def sigmoid(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    out_data = _sigmoid_np(a.data)
    return _make(out_data, (a,), (lambda g: g * out_data * (1.0 - out_data),))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # evaluated branch-wise to stay finite for |x| up to float32 range
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(a: ArrayLike) -> Tensor:
    """x * sigmoid(x); d/dx = s(x) * (1 + x * (1 - s(x)))."""
    a = _as_tensor(a)
    s = _sigmoid_np(a.data)
    return _make(a.data * s, (a,), (lambda g: g * s * (1.0 + a.data * (1.0 - s)),))


_GELU_C = np.float32(np.sqrt(2.0 / np.pi))


def gelu(a: ArrayLike) -> Tensor:
    """Gaussian error linear unit, tanh form: 0.5x(1 + tanh(c(x + 0.044715x^3)))."""
    a = _as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + np.float32(0.044715) * x**3)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def grad_fn(g):
        sech2 = 1.0 - t * t
        d_inner = _GELU_C * (1.0 + 3.0 * np.float32(0.044715) * x * x)
        return g * (0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner)

    return _make(out_data, (a,), (grad_fn,))


def softplus(a: ArrayLike) -> Tensor:
    """log(1 + exp(x)), computed as logaddexp(0, x); derivative sigmoid(x)."""
    a = _as_tensor(a)
    return _make(np.logaddexp(0.0, a.data).astype(np.float32), (a,), (lambda g: g * _sigmoid_np(a.data),))


_PHI1_CUTOFF = 1e-4


def phi1(a: ArrayLike) -> Tensor:
    """(exp(x) - 1) / x with the series 1 + x/2 + x^2/6 below |x| = 1e-4.

    This is the scaling factor that turns a continuous input matrix into
    its zero-order-hold discretization; the series branch keeps the x -> 0
    limit exact instead of dividing by ~0.
    """
    a = _as_tensor(a)
    x = a.data
    small = np.abs(x) < _PHI1_CUTOFF
    out_data = np.where(small, 1.0 + x / 2.0 + x * x / 6.0, np.expm1(x) / np.where(small, 1.0, x))

    def grad_fn(g):
        # d/dx[(e^x - 1)/x] = ((x - 1)e^x + 1) / x^2, series 1/2 + x/3 + x^2/8
        safe = np.where(small, 1.0, x)
        d = np.where(
            small,
            0.5 + x / 3.0 + x * x / 8.0,
            ((x - 1.0) * np.exp(x) + 1.0) / (safe * safe),
        )
        return g * d

    return _make(out_data.astype(np.float32), (a,), (grad_fn,))


# -- matrix multiply -----------------------------------------------------------


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product with numpy batch semantics on leading dimensions.

    Gradients: d(a) = g . b^T and d(b) = a^T . g, each summed back over
    broadcast batch dimensions.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}")

    def grad_a(g):
        return _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)

    def grad_b(g):
        return _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)

    return _make(np.matmul(a.data, b.data), (a, b), (grad_a, grad_b))


# -- shape manipulation ----------------------------------------------------------


def reshape(a: ArrayLike, shape) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data.reshape(shape), (a,), (lambda g: g.reshape(a.shape),))


def transpose(a: ArrayLike, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make(
        np.ascontiguousarray(np.transpose(a.data, axes)),
        (a,),
        (lambda g: np.transpose(g, inverse),),
    )


def swapaxes(a: ArrayLike, ax1: int, ax2: int) -> Tensor:
    a = _as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, tuple(axes))


def concatenate(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concatenate needs at least one tensor")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_grad(i):
        lo, hi = offsets[i], offsets[i + 1]

        def grad_fn(g):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        return grad_fn

    return _make(data, tensors, tuple(make_grad(i) for i in range(len(tensors))))


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concatenate(expanded, axis=axis)


def take(a: ArrayLike, idx) -> Tensor:
    """Basic slicing (ints and slices only); gradient scatters back."""
    a = _as_tensor(a)
    data = a.data[idx]

    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return full

    return _make(np.ascontiguousarray(data), (a,), (grad_fn,))


def flip(a: ArrayLike, axis: int) -> Tensor:
    a = _as_tensor(a)
    return _make(
        np.ascontiguousarray(np.flip(a.data, axis=axis)),
        (a,),
        (lambda g: np.ascontiguousarray(np.flip(g, axis=axis)),),
    )


# -- reductions ------------------------------------------------------------------


def _keepdims_shape(shape: tuple, axis) -> tuple:
    if axis is None:
        return (1,) * len(shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(shape) for ax in axes)
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def sum_(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float32)

    def grad_fn(g):
        g = np.asarray(g, dtype=np.float32)
        if not keepdims:
            g = g.reshape(_keepdims_shape(a.shape, axis))
        return np.broadcast_to(g, a.shape).copy()

    return _make(data, (a,), (grad_fn,))


sum = sum_  # module-level alias; shadows the builtin only inside this namespace


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


# -- normalized nonlinearities ---------------------------------------------------


def softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    """Softmax along `axis`, shifted by the per-slice max for stability.

    Every output slice is nonnegative and sums to 1 even for inputs of
    magnitude 1e4 and beyond.
    """
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        # dx = y * (g - sum(g * y))
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        return out_data * (g - inner)

    return _make(out_data, (a,), (grad_fn,))


def log_softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse

    def grad_fn(g):
        return g - np.exp(out_data) * g.sum(axis=axis, keepdims=True)

    return _make(out_data, (a,), (grad_fn,))


def layer_norm(
    a: ArrayLike,
    scale: Optional[Tensor] = None,
    offset: Optional[Tensor] = None,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine.

    `scale` and `offset` are optional 1-D tensors over the last axis; when
    omitted the op is the parameter-free standardization.
    """
    a = _as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    dim = a.shape[-1]

    parents = [a]
    if scale is not None:
        parents.append(scale)
    if offset is not None:
        parents.append(offset)

    scale_data = scale.data if scale is not None else None
    out_data = xhat if scale_data is None else xhat * scale_data
    if offset is not None:
        out_data = out_data + offset.data

    def grad_x(g):
        gx = g if scale_data is None else g * scale_data
        m1 = gx.mean(axis=-1, keepdims=True)
        m2 = (gx * xhat).mean(axis=-1, keepdims=True)
        return inv * (gx - m1 - xhat * m2)

    grad_fns: list[Callable] = [grad_x]
    if scale is not None:
        grad_fns.append(lambda g: (g * xhat).reshape(-1, dim).sum(axis=0))
    if offset is not None:
        grad_fns.append(lambda g: g.reshape(-1, dim).sum(axis=0))

    return _make(out_data.astype(np.float32), parents, tuple(grad_fns))
