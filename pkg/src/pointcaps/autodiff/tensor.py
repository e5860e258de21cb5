"""Dense tensors with reverse-mode differentiation.

Every differentiable primitive is a :class:`Function` subclass with a numpy
``forward`` and a ``backward`` that maps the output gradient to one gradient
per operand. Calling ``Function.apply`` records the node on the output tensor;
``Tensor.backward`` walks the recorded graph in reverse topological order.

Broadcasting rule for binary elementwise ops: shapes are right-aligned and the
result shape must equal the shape of one operand. The other operand may only
expand along dimensions where it has extent 1 or where it is missing on the
left. Mutual expansion such as ``(3, 1) + (1, 4)`` is rejected.
"""

import contextlib
import threading

import numpy as np

from pointcaps.errors import DimensionError, DomainError, NumericError

_state = threading.local()


def _get(name, default):
    return getattr(_state, name, default)


def default_dtype():
    return _get("dtype", np.float32)


def set_default_dtype(dtype):
    _state.dtype = np.dtype(dtype).type


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype new tensors are created with.

    Accepts numpy dtypes or the strings ``"f32"`` / ``"f64"``.
    """
    dtype = {"f32": np.float32, "f64": np.float64}.get(dtype, dtype)
    previous = default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def is_grad_enabled():
    return _get("grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def broadcast_shape(a, b):
    """Result shape of an elementwise op under the one-sided broadcasting rule."""
    a, b = tuple(a), tuple(b)
    if a == b:
        return a
    try:
        out = np.broadcast_shapes(a, b)
    except ValueError:
        out = None
    if out is None or out not in (a, b):
        raise DimensionError(f"shapes {a} and {b} are not broadcast-compatible")
    return out


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of broadcasting)."""
    shape = tuple(shape)
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Function:
    """A recorded differentiable operation."""

    def __init__(self, *parents):
        self.parents = parents

    def forward(self, *arrays, **kwargs):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    @classmethod
    def apply(cls, *operands, **kwargs):
        # plain Python numbers adopt the precision of the tensors they meet
        like = next((t.dtype for t in operands if isinstance(t, Tensor)), None)
        tensors = tuple(as_tensor(t, like) for t in operands)
        fn = cls(*tensors)
        out = fn.forward(*(t.data for t in tensors), **kwargs)
        needs_grad = is_grad_enabled() and any(t.requires_grad for t in tensors)
        result = Tensor(out, dtype=out.dtype)
        if needs_grad:
            # interior nodes carry no grad buffer; only leaves accumulate
            result.requires_grad = True
            result.creator = fn
        return result


class Tensor:
    """n-dimensional array plus optional gradient buffer.

    Leaves get a ``grad`` buffer iff ``requires_grad``; gradients from repeated
    ``backward`` calls accumulate there until :meth:`zero_grad`. Interior
    nodes of a recorded graph keep ``grad = None``.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        dtype = dtype if dtype is not None else default_dtype()
        self.data = np.require(np.asarray(data, dtype=dtype), requirements="C")
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self.creator = None

    # -- basic properties ------------------------------------------------
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
    def is_leaf(self):
        return self.creator is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- autodiff --------------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(
                    f"backward() without an explicit gradient needs a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.shape)

        order = _topological_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.creator is None:
                if node.requires_grad:
                    node.grad = node.grad + g
                continue
            parent_grads = node.creator.backward(g)
            for parent, pg in zip(node.creator.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=parent.data.dtype)
                if pg.shape != parent.shape:
                    pg = unbroadcast(pg, parent.shape)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return Add.apply(self, other)

    def __radd__(self, other):
        return Add.apply(other, self)

    def __sub__(self, other):
        return Sub.apply(self, other)

    def __rsub__(self, other):
        return Sub.apply(other, self)

    def __mul__(self, other):
        return Mul.apply(self, other)

    def __rmul__(self, other):
        return Mul.apply(other, self)

    def __truediv__(self, other):
        return Div.apply(self, other)

    def __rtruediv__(self, other):
        return Div.apply(other, self)

    def __neg__(self):
        return Mul.apply(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return Index.apply(self, index=index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes or None)

    def sum(self, axis=None, keepdims=False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return Max.apply(self, axis=axis, keepdims=keepdims)


def as_tensor(value, like=None):
    if isinstance(value, Tensor):
        return value
    if isinstance(value, np.ndarray) and np.issubdtype(value.dtype, np.floating):
        return Tensor(value, dtype=value.dtype)
    return Tensor(value, dtype=like)


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node.creator is not None:
            for parent in node.creator.parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if np.isscalar(axis) else tuple(axis)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise DimensionError(f"axis {a} out of range for rank {ndim}")
        out.append(a % ndim)
    return tuple(sorted(out))


def _expand_reduced(grad, shape, axes, keepdims):
    if not keepdims:
        for a in axes:
            grad = np.expand_dims(grad, a)
    return np.broadcast_to(grad, shape)


# ----------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------
class _Binary(Function):
    def forward(self, a, b):
        broadcast_shape(a.shape, b.shape)
        return self._compute(a, b)


class Add(_Binary):
    def _compute(self, a, b):
        return a + b

    def backward(self, grad):
        return grad, grad


class Sub(_Binary):
    def _compute(self, a, b):
        return a - b

    def backward(self, grad):
        return grad, -grad


class Mul(_Binary):
    def _compute(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


class Div(_Binary):
    def _compute(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        ga = grad / self.b
        return ga, -ga * self.a / self.b


class Square(Function):
    def forward(self, x):
        self.x = x
        return x * x

    def backward(self, grad):
        return (2.0 * self.x * grad,)


class ReLU(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0).astype(x.dtype)

    def backward(self, grad):
        return (grad * self.mask,)


class Sigmoid(Function):
    def forward(self, x):
        # split by sign so exp never overflows
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        self.out = out
        return out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class Exp(Function):
    def forward(self, x):
        self.out = np.exp(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    def forward(self, x):
        self.x = x
        return np.log(x)

    def backward(self, grad):
        return (grad / self.x,)


class Sqrt(Function):
    def forward(self, x):
        self.out = np.sqrt(x)
        return self.out

    def backward(self, grad):
        return (grad * 0.5 / self.out,)


# ----------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------
class MatMul(Function):
    """``a[..., m, k] @ b[..., k, n]``; batch dims must match or ``b`` may be 2-D."""

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
        if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
            raise DimensionError(f"matmul batch extents differ: {a.shape} @ {b.shape}")
        self.a, self.b = a, b
        if b.ndim == 2 and a.ndim > 2:
            # one big GEMM keeps row results independent of batch layout
            lead = a.shape[:-1]
            return (a.reshape(-1, a.shape[-1]) @ b).reshape(*lead, b.shape[-1])
        return a @ b

    def backward(self, grad):
        a, b = self.a, self.b
        if b.ndim == 2 and a.ndim > 2:
            g2 = grad.reshape(-1, grad.shape[-1])
            ga = (g2 @ b.T).reshape(a.shape)
            gb = a.reshape(-1, a.shape[-1]).T @ g2
            return ga, gb
        return grad @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ grad


def matmul(a, b):
    return MatMul.apply(a, b)


class Einsum(Function):
    """Two- or more-operand einsum without repeated indices inside one operand."""

    def forward(self, *arrays, subscripts):
        inputs, output = subscripts.replace(" ", "").split("->")
        self.in_subs = inputs.split(",")
        self.out_sub = output
        if len(self.in_subs) != len(arrays):
            raise DimensionError(f"einsum '{subscripts}' expects {len(self.in_subs)} operands")
        for sub, arr in zip(self.in_subs, arrays):
            if len(set(sub)) != len(sub):
                raise DimensionError(f"einsum operand '{sub}' repeats an index")
            if len(sub) != arr.ndim:
                raise DimensionError(f"einsum operand '{sub}' does not match shape {arr.shape}")
        self.arrays = arrays
        try:
            return np.einsum(subscripts, *arrays, optimize=True)
        except ValueError as exc:
            raise DimensionError(str(exc)) from None

    def backward(self, grad):
        grads = []
        for i, sub in enumerate(self.in_subs):
            others = [s for j, s in enumerate(self.in_subs) if j != i]
            arrays = [a for j, a in enumerate(self.arrays) if j != i]
            available = set(self.out_sub).union(*others) if others else set(self.out_sub)
            keep = "".join(ch for ch in sub if ch in available)
            spec = ",".join([self.out_sub] + others) + "->" + keep
            g = np.einsum(spec, grad, *arrays, optimize=True)
            for pos, ch in enumerate(sub):
                if ch not in available:
                    g = np.expand_dims(g, pos)
            grads.append(np.broadcast_to(g, self.arrays[i].shape))
        return tuple(grads)


def einsum(subscripts, *operands):
    return Einsum.apply(*operands, subscripts=subscripts)


# ----------------------------------------------------------------------
# reductions
# ----------------------------------------------------------------------
class Sum(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.shape = x.shape
        self.axes = _norm_axis(axis, x.ndim)
        self.keepdims = keepdims
        return np.asarray(x.sum(axis=self.axes, keepdims=keepdims))

    def backward(self, grad):
        return (_expand_reduced(grad, self.shape, self.axes, self.keepdims),)


class Mean(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.shape = x.shape
        self.axes = _norm_axis(axis, x.ndim)
        self.keepdims = keepdims
        self.count = int(np.prod([x.shape[a] for a in self.axes]))
        if self.count == 0:
            raise DomainError(f"mean over an empty axis of shape {x.shape}")
        return np.asarray(x.mean(axis=self.axes, keepdims=keepdims))

    def backward(self, grad):
        return (_expand_reduced(grad, self.shape, self.axes, self.keepdims) / self.count,)


class Max(Function):
    """Max along one axis; the backward sends the gradient to the first argmax."""

    def forward(self, x, axis=None, keepdims=False):
        if axis is None:
            self.flat = True
            self.shape = x.shape
            x = x.reshape(-1)
            axis = 0
        else:
            self.flat = False
        axis = _norm_axis(axis, x.ndim)
        if len(axis) != 1:
            raise DimensionError("max reduces over exactly one axis")
        (self.axis,) = axis
        if x.shape[self.axis] == 0:
            raise DomainError(f"max over empty axis {self.axis} of shape {x.shape}")
        self.keepdims = keepdims
        self.x_shape = x.shape
        self.idx = np.expand_dims(np.argmax(x, axis=self.axis), self.axis)
        out = np.take_along_axis(x, self.idx, axis=self.axis)
        return out if keepdims and not self.flat else out.squeeze(self.axis)

    def backward(self, grad):
        if not self.keepdims or self.flat:
            grad = np.expand_dims(grad, self.axis)
        out = np.zeros(self.x_shape, dtype=grad.dtype)
        np.put_along_axis(out, self.idx, grad, axis=self.axis)
        if self.flat:
            out = out.reshape(self.shape)
        return (out,)


class Softmax(Function):
    def forward(self, x, axis=-1):
        if np.isnan(x).any():
            raise NumericError("softmax received NaN input")
        self.axis = axis
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        s = self.out
        return (s * (grad - (grad * s).sum(axis=self.axis, keepdims=True)),)


class LogSoftmax(Function):
    def forward(self, x, axis=-1):
        if np.isnan(x).any():
            raise NumericError("log_softmax received NaN input")
        self.axis = axis
        shifted = x - x.max(axis=axis, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        self.soft = np.exp(out)
        return out

    def backward(self, grad):
        return (grad - self.soft * grad.sum(axis=self.axis, keepdims=True),)


class L2Norm(Function):
    """``sqrt(sum(x**2) + eps)`` along ``axis``; eps keeps the gradient finite at 0."""

    def forward(self, x, axis=-1, eps=1e-9, keepdims=False):
        if eps <= 0:
            raise DomainError("l2_norm epsilon must be positive")
        self.x = x
        self.axis = axis
        self.keepdims = keepdims
        self.norm = np.sqrt((x * x).sum(axis=axis, keepdims=True) + eps)
        return self.norm if keepdims else self.norm.squeeze(axis)

    def backward(self, grad):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (grad * self.x / self.norm,)


# ----------------------------------------------------------------------
# shape manipulation
# ----------------------------------------------------------------------
class Reshape(Function):
    def forward(self, x, shape):
        self.in_shape = x.shape
        try:
            return x.reshape(shape)
        except ValueError:
            raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}") from None

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class Transpose(Function):
    def forward(self, x, axes=None):
        self.axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
        return np.transpose(x, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class Index(Function):
    """Basic and advanced indexing; backward scatters with accumulation."""

    def forward(self, x, index):
        self.shape = x.shape
        self.index = index
        return np.asarray(x[index])

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=grad.dtype)
        np.add.at(out, self.index, grad)
        return (out,)


class Concat(Function):
    def forward(self, *arrays, axis=-1):
        self.axis = axis
        self.sizes = [a.shape[axis] for a in arrays]
        try:
            return np.concatenate(arrays, axis=axis)
        except ValueError as exc:
            raise DimensionError(str(exc)) from None

    def backward(self, grad):
        splits = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, splits, axis=self.axis))


class GatherRows(Function):
    """``x[b, idx[b, n, k], :]`` for ``x`` of shape B x N x C -> B x N x k x C."""

    def forward(self, x, idx):
        idx = np.asarray(idx, dtype=np.int64)
        b, n, c = x.shape
        self.shape = x.shape
        self.flat_idx = (idx + (np.arange(b) * n)[:, None, None]).reshape(-1)
        return x.reshape(b * n, c)[self.flat_idx].reshape(*idx.shape, c)

    def backward(self, grad):
        b, n, c = self.shape
        out = np.zeros((b * n, c), dtype=grad.dtype)
        np.add.at(out, self.flat_idx, grad.reshape(-1, c))
        return (out.reshape(self.shape),)


# ----------------------------------------------------------------------
# functional wrappers
# ----------------------------------------------------------------------
def relu(x):
    return ReLU.apply(x)


def sigmoid(x):
    return Sigmoid.apply(x)


def square(x):
    return Square.apply(x)


def exp(x):
    return Exp.apply(x)


def log(x):
    return Log.apply(x)


def sqrt(x):
    return Sqrt.apply(x)


def add(a, b):
    return Add.apply(a, b)


def sub(a, b):
    return Sub.apply(a, b)


def mul(a, b):
    return Mul.apply(a, b)


def div(a, b):
    return Div.apply(a, b)


ELEMENTWISE = {
    "relu": relu,
    "sigmoid": sigmoid,
    "square": square,
    "add": add,
    "sub": sub,
    "mul": mul,
}


def elementwise(op, *operands):
    try:
        fn = ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*operands)


def reduce(op, t, axis, keepdims=False):
    fns = {"sum": Sum, "mean": Mean, "max": Max}
    if op not in fns:
        raise ValueError(f"unknown reduction {op!r}")
    return fns[op].apply(t, axis=axis, keepdims=keepdims)


def softmax(x, axis=-1):
    return Softmax.apply(x, axis=axis)


def log_softmax(x, axis=-1):
    return LogSoftmax.apply(x, axis=axis)


def l2_norm(x, axis=-1, eps=1e-9, keepdims=False):
    return L2Norm.apply(x, axis=axis, eps=eps, keepdims=keepdims)


def concat(tensors, axis=-1):
    return Concat.apply(*tensors, axis=axis)


def gather_rows(x, idx):
    return GatherRows.apply(x, idx=idx)


def min_(x, axis, keepdims=False):
    return -Max.apply(-as_tensor(x), axis=axis, keepdims=keepdims)
