"""
diffcore.py

Minimal reverse-mode differentiation over dense float64 numpy arrays.

- `Tensor` wraps an array; operations on tensors that require grad record a
  `Function` node (define-by-run, rebuilt on every forward pass).
- `backward` walks the recorded graph once in reverse topological order,
  accumulates gradients into leaf tensors and frees every intermediate node.
  Calling it a second time on the same loss raises `GraphFreedError`.
- `grad_check` compares analytic gradients against central differences.

Only the op set the models need is provided: add, sub, mul, neg, pow (scalar
exponent), matmul (batched), exp, log, abs, clamp, sigmoid, relu, leaky_relu,
softmax (optionally masked), sum, mean, reshape, transpose, concat, basic
slicing and a batched row gather.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_NEGATIVE_SLOPE = 0.2
# keeps the relative error defined when both gradients are exactly zero
GRAD_CHECK_FLOOR = 1e-12

_state = threading.local()


class DiffError(RuntimeError):
    pass


class ShapeError(DiffError, ValueError):
    pass


class GraphFreedError(DiffError):
    pass


class NonFiniteError(DiffError):
    pass


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread (evaluation passes)."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    # make numpy defer to the reflected Tensor operators (ndarray * Tensor)
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(np.array(data, dtype=np.float64))
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._ctx: Function | None = None
        self._freed = False

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.shape} requires_grad={self.requires_grad}>"

    # -- operators -----------------------------------------------------------
    def __add__(self, other): return forward("add", self, other)
    def __radd__(self, other): return forward("add", other, self)
    def __sub__(self, other): return forward("sub", self, other)
    def __rsub__(self, other): return forward("sub", other, self)
    def __mul__(self, other): return forward("mul", self, other)
    def __rmul__(self, other): return forward("mul", other, self)
    def __neg__(self): return forward("neg", self)
    def __matmul__(self, other): return forward("matmul", self, other)
    def __pow__(self, exponent: float): return forward("pow", self, exponent=float(exponent))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return self * other ** -1.0
        return self * (1.0 / float(other))

    def __getitem__(self, index):
        return forward("slice", self, index=index)

    def sum(self, axis=None, keepdims: bool = False): return forward("sum", self, axis=axis, keepdims=keepdims)
    def mean(self, axis=None, keepdims: bool = False): return forward("mean", self, axis=axis, keepdims=keepdims)
    def reshape(self, *shape): return forward("reshape", self, shape=_shape_arg(shape))
    def transpose(self, *axes): return forward("transpose", self, axes=_shape_arg(axes))

    def backward(self) -> dict[int, np.ndarray]:
        return backward(self)


def _shape_arg(shape) -> tuple[int, ...]:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        return tuple(shape[0])
    return tuple(shape)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return np.asarray(grad).reshape(shape)


class Function:
    """One recorded op: forward on raw arrays, backward returns one grad per parent."""

    kind = "op"

    def __init__(self, *parents: Tensor, **options):
        self.parents = parents
        self.options = options

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        raise NotImplementedError


class Add(Function):
    kind = "add"

    def forward(self, x, y):
        self.shapes = (x.shape, y.shape)
        return x + y

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Sub(Function):
    kind = "sub"

    def forward(self, x, y):
        self.shapes = (x.shape, y.shape)
        return x - y

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    kind = "mul"

    def forward(self, x, y):
        self.x, self.y = x, y
        return x * y

    def backward(self, grad):
        return _unbroadcast(grad * self.y, self.x.shape), _unbroadcast(grad * self.x, self.y.shape)


class Neg(Function):
    kind = "neg"

    def forward(self, x):
        return -x

    def backward(self, grad):
        return (-grad,)


class Pow(Function):
    kind = "pow"

    def forward(self, x):
        self.x = x
        return x ** self.options["exponent"]

    def backward(self, grad):
        p = self.options["exponent"]
        if p == 0.0:
            return (np.zeros_like(self.x),)
        return (grad * p * self.x ** (p - 1.0),)


class MatMul(Function):
    kind = "matmul"

    def forward(self, x, y):
        if x.ndim < 2 or y.ndim < 2 or x.shape[-1] != y.shape[-2]:
            raise ShapeError(f"matmul: incompatible shapes {x.shape} @ {y.shape}")
        self.x, self.y = x, y
        return x @ y

    def backward(self, grad):
        gx = grad @ np.swapaxes(self.y, -1, -2)
        gy = np.swapaxes(self.x, -1, -2) @ grad
        return _unbroadcast(gx, self.x.shape), _unbroadcast(gy, self.y.shape)


class Exp(Function):
    kind = "exp"

    def forward(self, x):
        self.out = np.exp(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    kind = "log"

    def forward(self, x):
        if np.any(x <= 0.0):
            raise NonFiniteError(f"log: non-positive input (min {x.min():.3g})")
        self.x = x
        return np.log(x)

    def backward(self, grad):
        return (grad / self.x,)


class Abs(Function):
    kind = "abs"

    def forward(self, x):
        # sign(0) = 0 is the subgradient used at the kink
        self.sign = np.sign(x)
        return np.abs(x)

    def backward(self, grad):
        return (grad * self.sign,)


class Clamp(Function):
    kind = "clamp"

    def forward(self, x):
        lo, hi = self.options["low"], self.options["high"]
        self.inside = (x >= lo) & (x <= hi)
        return np.clip(x, lo, hi)

    def backward(self, grad):
        return (grad * self.inside,)


class Sigmoid(Function):
    kind = "sigmoid"

    def forward(self, x):
        self.out = np.exp(-np.logaddexp(0.0, -x))
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class ReLU(Function):
    kind = "relu"

    def forward(self, x):
        self.positive = x > 0.0
        return np.where(self.positive, x, 0.0)

    def backward(self, grad):
        return (grad * self.positive,)


class LeakyReLU(Function):
    kind = "leaky_relu"

    def forward(self, x):
        self.slope = np.where(x > 0.0, 1.0, self.options["negative_slope"])
        return x * self.slope

    def backward(self, grad):
        return (grad * self.slope,)


class Softmax(Function):
    kind = "softmax"

    def forward(self, x):
        axis, mask = self.options["axis"], self.options.get("mask")
        if mask is None:
            shifted = x - x.max(axis=axis, keepdims=True)
            e = np.exp(shifted)
        else:
            mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
            if not mask.any(axis=axis).all():
                raise ShapeError("softmax: a row has an empty support under the mask")
            masked = np.where(mask, x, -np.inf)
            shifted = np.where(mask, masked - masked.max(axis=axis, keepdims=True), -np.inf)
            e = np.exp(shifted)
        self.out = e / e.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        axis = self.options["axis"]
        y = self.out
        return (y * (grad - (grad * y).sum(axis=axis, keepdims=True)),)


class Sum(Function):
    kind = "sum"

    def forward(self, x):
        self.in_shape = x.shape
        return np.asarray(x.sum(axis=self.options["axis"], keepdims=self.options["keepdims"]))

    def backward(self, grad):
        axis, keepdims = self.options["axis"], self.options["keepdims"]
        if axis is not None and not keepdims:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, self.in_shape).copy(),)


class Mean(Function):
    kind = "mean"

    def forward(self, x):
        self.in_shape = x.shape
        axis = self.options["axis"]
        self.count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
        return np.asarray(x.mean(axis=axis, keepdims=self.options["keepdims"]))

    def backward(self, grad):
        axis, keepdims = self.options["axis"], self.options["keepdims"]
        if axis is not None and not keepdims:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad / self.count, self.in_shape).copy(),)


class Reshape(Function):
    kind = "reshape"

    def forward(self, x):
        self.in_shape = x.shape
        return x.reshape(self.options["shape"])

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class Transpose(Function):
    kind = "transpose"

    def forward(self, x):
        axes = self.options["axes"] or tuple(reversed(range(x.ndim)))
        self.axes = axes
        return np.transpose(x, axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class Concat(Function):
    kind = "concat"

    def forward(self, *xs):
        axis = self.options["axis"]
        self.sizes = [x.shape[axis] for x in xs]
        return np.concatenate(xs, axis=axis)

    def backward(self, grad):
        splits = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, splits, axis=self.options["axis"]))


class Slice(Function):
    kind = "slice"

    def forward(self, x):
        index = self.options["index"]
        for part in index if isinstance(index, tuple) else (index,):
            if not isinstance(part, (slice, int, np.integer)) and part is not Ellipsis and part is not None:
                raise ShapeError(f"slice: only basic indexing is supported, got {type(part).__name__}")
        self.in_shape = x.shape
        return np.array(x[index])

    def backward(self, grad):
        out = np.zeros(self.in_shape)
        out[self.options["index"]] = grad
        return (out,)


class GatherRows(Function):
    """out[b, i] = x[b, index[b, i]] along axis 1."""

    kind = "gather_rows"

    def forward(self, x):
        index = np.asarray(self.options["index"], dtype=np.int64)
        if x.ndim < 2 or index.ndim != 2 or index.shape[0] != x.shape[0]:
            raise ShapeError(f"gather_rows: bad shapes x={x.shape} index={index.shape}")
        self.in_shape = x.shape
        self.rows = np.arange(x.shape[0])[:, None]
        self.index = index
        return x[self.rows, index]

    def backward(self, grad):
        out = np.zeros(self.in_shape)
        np.add.at(out, (self.rows, self.index), grad)
        return (out,)


OPS: dict[str, type[Function]] = {
    cls.kind: cls
    for cls in (Add, Sub, Mul, Neg, Pow, MatMul, Exp, Log, Abs, Clamp, Sigmoid, ReLU,
                LeakyReLU, Softmax, Sum, Mean, Reshape, Transpose, Concat, Slice, GatherRows)
}


def forward(op: str, *inputs, **options) -> Tensor:
    """Run op-kind `op` on `inputs`; record it when any input requires grad."""
    if op not in OPS:
        raise DiffError(f"unknown op '{op}'")
    tensors = [_as_tensor(x) for x in inputs]
    fn = OPS[op](*tensors, **options)
    try:
        out_data = fn.forward(*[t.data for t in tensors])
    except ShapeError:
        raise
    except ValueError as exc:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"{op}: incompatible shapes {shapes} ({exc})") from exc
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{op}: produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(out_data, dtype=np.float64)
    out.grad = None
    out.name = None
    out._freed = False
    out.requires_grad = is_grad_enabled() and any(t.requires_grad for t in tensors)
    out._ctx = fn if out.requires_grad else None
    return out


# functional aliases used by the model code
def exp(x): return forward("exp", x)
def log(x): return forward("log", x)
def abs_(x): return forward("abs", x)
def sigmoid(x): return forward("sigmoid", x)
def relu(x): return forward("relu", x)
def softmax(x, axis: int = -1, mask=None): return forward("softmax", x, axis=axis, mask=mask)
def clamp(x, low: float, high: float): return forward("clamp", x, low=low, high=high)
def concat(xs: Sequence[Tensor], axis: int = -1): return forward("concat", *xs, axis=axis)
def gather_rows(x, index): return forward("gather_rows", x, index=index)


def leaky_relu(x, negative_slope: float = DEFAULT_NEGATIVE_SLOPE):
    return forward("leaky_relu", x, negative_slope=negative_slope)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for parent in node._ctx.parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into every requires-grad leaf; returns {id(leaf): grad}."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._freed:
        raise GraphFreedError("backward already ran on this graph; run a new forward pass first")
    if not loss.requires_grad:
        raise DiffError("loss does not depend on any tensor that requires grad")

    order = _topological_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, np.ndarray] = {}
    for node in reversed(order):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        if node._ctx is None:
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            leaves[id(node)] = node.grad
            continue
        for parent, parent_grad in zip(node._ctx.parents, node._ctx.backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + parent_grad if key in pending else parent_grad

    for node in order:
        if node._ctx is not None:
            node._ctx = None
            node._freed = True
    return leaves


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` rebuilds its graph from `params` on every call and returns a scalar.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    params = list(params)
    for p in params:
        p.grad = None
    loss = f()
    if loss.data.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {loss.shape}")
    if loss.requires_grad:
        backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    def evaluate() -> float:
        with no_grad():
            value = f().item()
        if not np.isfinite(value):
            raise NonFiniteError("grad_check: function is not finite at a perturbed point")
        return value

    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.data.reshape(-1)
        flat_grad = grad.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            f_plus = evaluate()
            flat[i] = original - eps
            f_minus = evaluate()
            flat[i] = original
            numeric = (f_plus - f_minus) / (2.0 * eps)
            exact = flat_grad[i]
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), GRAD_CHECK_FLOOR)
            worst = max(worst, error)
    for p in params:
        p.grad = None
    return worst
