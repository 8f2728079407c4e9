"""
Dense real tensors with a dynamically built reverse-mode tape
"""
import itertools
import threading

import numpy as np

from src.errors import ContractError, DimensionError, GraphError

# creation ids double as a topological order: parents always exist before children
_ids = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


class no_grad:
    """
    Context manager disabling graph recording on the current thread.
    Sampling chains use it so forward passes allocate no tape.
    """

    def __enter__(self):
        self._previous = is_grad_enabled()
        _state.enabled = False
        return self

    def __exit__(self, *exc):
        _state.enabled = self._previous
        return False


class Tensor:
    """
    Real-valued array node of the autodiff graph.

    data np.ndarray: contiguous values (float64 in tests, float32 in training)
    requires_grad bool: whether backward populates `grad` for this leaf
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        array = np.asarray(data, dtype=dtype)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float64)
        self.data = np.ascontiguousarray(array)
        self.requires_grad = requires_grad
        self.grad = None
        self._ctx = None
        self._id = next(_ids)
        self._consumed = False

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._ctx is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self):
        self.grad = None

    def _wrap(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other):
        return Add.apply(self, self._wrap(other))

    def __radd__(self, other):
        return Add.apply(self._wrap(other), self)

    def __sub__(self, other):
        return Sub.apply(self, self._wrap(other))

    def __rsub__(self, other):
        return Sub.apply(self._wrap(other), self)

    def __mul__(self, other):
        return Mul.apply(self, self._wrap(other))

    def __rmul__(self, other):
        return Mul.apply(self._wrap(other), self)

    def __truediv__(self, other):
        return Div.apply(self, self._wrap(other))

    def __rtruediv__(self, other):
        return Div.apply(self._wrap(other), self)

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, exponent: float):
        return Pow.apply(self, exponent=float(exponent))

    def __matmul__(self, other):
        return MatMul.apply(self, self._wrap(other))

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    def sum(self, axis=None, keepdims: bool = False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        count = self.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes or None)

    def astype(self, dtype):
        """Differentiable dtype cast; gradients flow back in the source dtype."""
        return Cast.apply(self, dtype=np.dtype(dtype))

    def backward(self):
        return backward(self)


class Function:
    """
    One recorded operation. Subclasses implement forward on raw arrays and
    backward returning one gradient (or None) per parent.
    """

    def __init__(self, *parents):
        self.parents = parents

    @classmethod
    def apply(cls, *inputs, **kwargs):
        for tensor in inputs:
            if not isinstance(tensor, Tensor):
                raise ContractError(f"{cls.__name__} expects Tensor inputs, got: {type(tensor)}")
        ctx = cls(*inputs)
        out = ctx.forward(*[t.data for t in inputs], **kwargs)
        record = is_grad_enabled() and any(t.requires_grad for t in inputs)
        result = Tensor(out, requires_grad=record)
        if record:
            result._ctx = ctx
        return result

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


def backward(loss: Tensor) -> dict:
    """
    Reverse pass from a scalar loss.

    Populates `grad` on every reachable leaf with requires_grad (accumulating
    onto gradients left by earlier graphs until zero_grad) and returns a map
    leaf -> gradient. A graph can be consumed once.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward was already called on this graph; rebuild it after zero_grad")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor with requires_grad")

    nodes = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node._id in nodes:
            continue
        nodes[node._id] = node
        if node._ctx is not None:
            stack.extend(p for p in node._ctx.parents if p.requires_grad)

    grads = {loss._id: np.ones_like(loss.data)}
    leaves = {}
    for node in sorted(nodes.values(), key=lambda n: n._id, reverse=True):
        grad = grads.pop(node._id, None)
        if grad is None:
            continue
        if node._ctx is None:
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            leaves[node] = node.grad
            continue
        for parent, parent_grad in zip(node._ctx.parents, node._ctx.backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + parent_grad
            else:
                grads[parent._id] = parent_grad
    loss._consumed = True
    return leaves


def check_broadcast(a_shape: tuple, b_shape: tuple, op: str):
    """
    Shapes must match exactly, one must be a trailing suffix of the other
    (affine parameters over the last axes), or both share a rank and differ
    only where one side has an explicit singleton axis.
    """
    if a_shape == b_shape:
        return
    short, long = (a_shape, b_shape) if len(a_shape) <= len(b_shape) else (b_shape, a_shape)
    if len(short) < len(long) and tuple(long[len(long) - len(short):]) == tuple(short):
        return
    if len(a_shape) == len(b_shape) and all(x == y or x == 1 or y == 1 for x, y in zip(a_shape, b_shape)):
        return
    raise DimensionError(f"{op}: shapes {a_shape} and {b_shape} do not align")


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Add(Function):
    def forward(self, a, b):
        check_broadcast(a.shape, b.shape, "add")
        self.shapes = a.shape, b.shape
        return a + b

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        check_broadcast(a.shape, b.shape, "sub")
        self.shapes = a.shape, b.shape
        return a - b

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        check_broadcast(a.shape, b.shape, "mul")
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return unbroadcast(grad * self.b, self.a.shape), unbroadcast(grad * self.a, self.b.shape)


class Div(Function):
    def forward(self, a, b):
        check_broadcast(a.shape, b.shape, "div")
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        grad_a = grad / self.b
        grad_b = -grad * self.a / (self.b * self.b)
        return unbroadcast(grad_a, self.a.shape), unbroadcast(grad_b, self.b.shape)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Pow(Function):
    def forward(self, a, exponent: float):
        self.a, self.exponent = a, exponent
        return a ** exponent

    def backward(self, grad):
        return (grad * self.exponent * self.a ** (self.exponent - 1.0),)


class Sum(Function):
    def forward(self, a, axis=None, keepdims: bool = False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            axes = tuple(a % len(self.shape) for a in np.atleast_1d(self.axis))
            for axis in sorted(axes):
                grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Reshape(Function):
    def forward(self, a, shape):
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Transpose(Function):
    def forward(self, a, axes=None):
        self.axes = axes if axes is not None else tuple(reversed(range(a.ndim)))
        return np.ascontiguousarray(a.transpose(self.axes))

    def backward(self, grad):
        return (grad.transpose(np.argsort(self.axes)),)


class Cast(Function):
    def forward(self, a, dtype):
        self.dtype = a.dtype
        return a.astype(dtype)

    def backward(self, grad):
        return (grad.astype(self.dtype),)


class GetItem(Function):
    def forward(self, a, index):
        self.shape, self.dtype, self.index = a.shape, a.dtype, index
        return np.array(a[index])

    def backward(self, grad):
        full = np.zeros(self.shape, dtype=self.dtype)
        parts = self.index if isinstance(self.index, tuple) else (self.index,)
        if any(isinstance(p, (np.ndarray, list)) for p in parts):
            np.add.at(full, self.index, grad)
        else:
            # basic indexing never repeats an element
            full[self.index] += grad
        return (full,)


class MatMul(Function):
    """
    Matrix product: (n,k)@(k,m), a dense layer (...,n,k)@(k,m), or a
    batched product of equal-rank operands sharing leading dimensions.
    """

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
        if b.ndim > 2 and (a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]):
            raise DimensionError(f"matmul: batch dimensions of {a.shape} and {b.shape} differ")
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        a, b = self.a, self.b
        grad_a = grad @ np.swapaxes(b, -1, -2)
        if b.ndim == 2:
            grad_b = a.reshape(-1, a.shape[-1]).T @ grad.reshape(-1, grad.shape[-1])
        else:
            grad_b = np.swapaxes(a, -1, -2) @ grad
        return grad_a, grad_b


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Standard matrix product with reverse-mode gradients.

    a Tensor: left operand
    b Tensor: right operand, inner dimension must agree with `a`
    """
    return MatMul.apply(a, b)
