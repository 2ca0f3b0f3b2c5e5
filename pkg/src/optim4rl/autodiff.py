"""Tape-based reverse-mode differentiation over dense float64 tensors.

Small define-by-run engine in the micrograd tradition: every operation
builds a node holding its forward value, its parents, and a closure that
scatters the upstream gradient onto the parents.  backward() walks the
tape once in reverse topological order.  All storage is 64-bit; this is
what makes finite-difference checks meaningful at step sizes near 1e-4.

The primitive set is deliberately small: add, sub, mul, div, matmul,
sum, mean, exp, log, sqrt, tanh, sigmoid, relu, clip, concat, slice,
reshape, log-softmax, element select, plus stop_gradient and the
straight-through binary sign.  Everything else is composed.
"""

import numpy as np

__all__ = [
    "Tensor",
    "ShapeMismatch",
    "as_tensor",
    "evaluate",
    "backward",
    "stop_gradient",
    "straight_through_binary_sign",
    "concat",
    "log_softmax",
    "select",
    "softmax_cross_entropy",
    "absval",
]


class ShapeMismatch(Exception):
    """Raised when an operation receives incompatible shapes.

    Carries the operation name and the offending shapes so callers can
    report exactly which step of a larger expression failed.
    """

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {' vs '.join(map(str, self.shapes))}")


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node on the tape: forward value plus backward bookkeeping.

    data is always a float64 ndarray and is treated as immutable once
    wrapped.  grad is populated by backward() and holds ∂root/∂self.
    """

    __slots__ = ("data", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, _parents=(), _op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = _parents
        self._backward = None
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor({self._op}, shape={self.data.shape})"

    # -- arithmetic -----------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        try:
            out = Tensor(self.data + other.data, (self, other), "add")
        except ValueError:
            raise ShapeMismatch("add", self.shape, other.shape) from None

        def _bw():
            self.grad += _unbroadcast(out.grad, self.data.shape)
            other.grad += _unbroadcast(out.grad, other.data.shape)

        out._backward = _bw
        return out

    def __sub__(self, other):
        other = as_tensor(other)
        try:
            out = Tensor(self.data - other.data, (self, other), "sub")
        except ValueError:
            raise ShapeMismatch("sub", self.shape, other.shape) from None

        def _bw():
            self.grad += _unbroadcast(out.grad, self.data.shape)
            other.grad -= _unbroadcast(out.grad, other.data.shape)

        out._backward = _bw
        return out

    def __mul__(self, other):
        other = as_tensor(other)
        try:
            out = Tensor(self.data * other.data, (self, other), "mul")
        except ValueError:
            raise ShapeMismatch("mul", self.shape, other.shape) from None

        def _bw():
            self.grad += _unbroadcast(out.grad * other.data, self.data.shape)
            other.grad += _unbroadcast(out.grad * self.data, other.data.shape)

        out._backward = _bw
        return out

    def __truediv__(self, other):
        other = as_tensor(other)
        try:
            out = Tensor(self.data / other.data, (self, other), "div")
        except ValueError:
            raise ShapeMismatch("div", self.shape, other.shape) from None

        def _bw():
            self.grad += _unbroadcast(out.grad / other.data, self.data.shape)
            other.grad += _unbroadcast(
                -out.grad * self.data / (other.data * other.data), other.data.shape
            )

        out._backward = _bw
        return out

    def __neg__(self):
        out = Tensor(-self.data, (self,), "neg")

        def _bw():
            self.grad -= out.grad

        out._backward = _bw
        return out

    __radd__ = __add__
    __rmul__ = __mul__

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def matmul(self, other):
        """2-d matrix product.

        Forward uses einsum, whose fixed inner summation order makes the
        result bit-stable across batch sizes (BLAS matmul is not); the
        per-coordinate optimizer batching relies on this.  Backward sums
        over a whole axis anyway, so plain matmul is fine there.
        """
        other = as_tensor(other)
        if self.data.ndim != 2 or other.data.ndim != 2 or self.shape[1] != other.shape[0]:
            raise ShapeMismatch("matmul", self.shape, other.shape)
        out = Tensor(np.einsum("ij,jk->ik", self.data, other.data), (self, other), "matmul")

        def _bw():
            self.grad += out.grad @ other.data.T
            other.grad += self.data.T @ out.grad

        out._backward = _bw
        return out

    __matmul__ = matmul

    # -- reductions -----------------------------------------------------

    def sum(self, axis=None):
        out = Tensor(self.data.sum(axis=axis), (self,), "sum")

        def _bw():
            g = out.grad
            if axis is not None:
                g = np.expand_dims(g, axis)
            self.grad += np.broadcast_to(g, self.data.shape)

        out._backward = _bw
        return out

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        out = Tensor(self.data.mean(axis=axis), (self,), "mean")

        def _bw():
            g = out.grad / n
            if axis is not None:
                g = np.expand_dims(g, axis)
            self.grad += np.broadcast_to(g, self.data.shape)

        out._backward = _bw
        return out

    # -- elementwise ----------------------------------------------------

    def exp(self):
        out = Tensor(np.exp(self.data), (self,), "exp")

        def _bw():
            self.grad += out.grad * out.data

        out._backward = _bw
        return out

    def log(self):
        out = Tensor(np.log(self.data), (self,), "log")

        def _bw():
            self.grad += out.grad / self.data

        out._backward = _bw
        return out

    def sqrt(self):
        out = Tensor(np.sqrt(self.data), (self,), "sqrt")

        def _bw():
            self.grad += out.grad * 0.5 / out.data

        out._backward = _bw
        return out

    def tanh(self):
        out = Tensor(np.tanh(self.data), (self,), "tanh")

        def _bw():
            self.grad += out.grad * (1.0 - out.data * out.data)

        out._backward = _bw
        return out

    def sigmoid(self):
        x = self.data
        # piecewise form avoids overflow in exp for large |x|
        val = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        out = Tensor(val, (self,), "sigmoid")

        def _bw():
            self.grad += out.grad * out.data * (1.0 - out.data)

        out._backward = _bw
        return out

    def relu(self):
        out = Tensor(np.maximum(self.data, 0.0), (self,), "relu")

        def _bw():
            self.grad += out.grad * (self.data > 0)

        out._backward = _bw
        return out

    def clip(self, lo, hi):
        """Clamp to [lo, hi].  Gradient passes through inside the range
        and at the exact boundary, and is zero where the value was cut."""
        out = Tensor(np.clip(self.data, lo, hi), (self,), "clip")
        mask = (self.data >= lo) & (self.data <= hi)

        def _bw():
            self.grad += out.grad * mask

        out._backward = _bw
        return out

    # -- structural -----------------------------------------------------

    def __getitem__(self, key):
        out = Tensor(self.data[key], (self,), "slice")

        def _bw():
            np.add.at(self.grad, key, out.grad)

        out._backward = _bw
        return out

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor(self.data.reshape(shape), (self,), "reshape")

        def _bw():
            self.grad += out.grad.reshape(self.data.shape)

        out._backward = _bw
        return out

    # -- backward pass ----------------------------------------------------

    def topo_order(self):
        """Parents-first topological order of the reachable tape."""
        order, visited = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        return order

    def backward(self):
        """Populate .grad = ∂self/∂node over the whole reachable tape.

        self must be scalar (the gradient seed is 1.0).  Grads are zeroed
        first, so repeated calls on the same tape are bit-identical.
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar root, got shape {self.data.shape}")
        order = self.topo_order()
        for node in order:
            node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def stop_gradient(x):
    """Forward identity that contributes zero gradient upstream."""
    x = as_tensor(x)
    return Tensor(x.data, (), "stop_gradient")


def straight_through_binary_sign(x):
    """Binarize to {-1, +1} in the forward pass (ties at 0 go to +1)
    while passing the gradient through unchanged.

    Equivalent to stop_gradient(sign(x) - x) + x, but the forward value
    is produced directly so it is exactly ±1 with no float cancellation.
    """
    x = as_tensor(x)
    out = Tensor(2.0 * (x.data >= 0) - 1.0, (x,), "st_sign")

    def _bw():
        x.grad += out.grad

    out._backward = _bw
    return out


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatch("concat", *[t.shape for t in tensors]) from None
    out = Tensor(data, tuple(tensors), "concat")
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def _bw():
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * out.grad.ndim
            idx[axis] = slice(lo, hi)
            t.grad += out.grad[tuple(idx)]

    out._backward = _bw
    return out


def log_softmax(x):
    """Row-wise log-softmax over the last axis of a 2-d tensor."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeMismatch("log_softmax", x.shape)
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    ls = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = Tensor(ls, (x,), "log_softmax")

    def _bw():
        x.grad += out.grad - np.exp(out.data) * out.grad.sum(axis=1, keepdims=True)

    out._backward = _bw
    return out


def select(x, index):
    """Pick one entry per row: (B, A) gathered at integer index (B,) -> (B,)."""
    x = as_tensor(x)
    index = np.asarray(index)
    if x.data.ndim != 2 or index.ndim != 1 or index.shape[0] != x.data.shape[0]:
        raise ShapeMismatch("select", x.shape, index.shape)
    rows = np.arange(x.data.shape[0])
    out = Tensor(x.data[rows, index], (x,), "select")

    def _bw():
        np.add.at(x.grad, (rows, index), out.grad)

    out._backward = _bw
    return out


def softmax_cross_entropy(logits, labels):
    """Per-row cross entropy of integer labels under softmax(logits)."""
    return -select(log_softmax(logits), labels)


def absval(x):
    """|x| composed from relu so it stays inside the primitive set.

    Subgradient at 0 is 0, which is fine everywhere this is used: the
    magnitude always gets an epsilon floor added before any log.
    """
    x = as_tensor(x)
    return x.relu() + (-x).relu()


def evaluate(fn, bindings=None):
    """Build and run a tensor expression.

    fn receives a dict mapping the names in `bindings` to leaf tensors
    and returns the root.  Returns (root, leaves) so the caller can run
    backward and read leaf gradients.
    """
    leaves = {k: as_tensor(v) for k, v in (bindings or {}).items()}
    return fn(leaves), leaves


def backward(root, params=None):
    """Run the backward pass from a scalar root.

    When `params` (a dict of name -> Tensor) is given, returns the
    matching dict of gradient arrays.
    """
    root.backward()
    if params is None:
        return None
    return {k: np.array(t.grad) for k, t in params.items()}
