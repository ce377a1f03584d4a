"""Dense float64 tensors with reverse-mode automatic differentiation.

Only what the adaptation pipeline needs: 1-D/2-D tensors, broadcasting
elementwise arithmetic, matmul, ReLU, row means, column concatenation,
softmax and a numerically stable softmax cross-entropy. Every op records a
closure mapping the output gradient to the gradients of its inputs;
:func:`backward` replays them in reverse topological order.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import (
    ContractError,
    DimensionError,
    EmptyBatchError,
    GradientCheckError,
    LabelError,
)

__all__ = [
    "Tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "relu",
    "sum_all",
    "batch_mean_rows",
    "concat_cols",
    "softmax",
    "softmax_cross_entropy",
    "backward",
    "topological_order",
    "grad_check",
    "zero_grad",
]


class Tensor:
    """A float64 array plus an optional gradient accumulator.

    Leaf tensors are created directly; non-leaf tensors are produced by the
    ops in this module and remember their parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > 2:
            raise DimensionError(f"only 0-D, 1-D and 2-D tensors are supported, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None = None

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple["Tensor", ...], op: str, backward_fn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out.op = op
        # constants need no graph; dropping them keeps backward cheap
        out._parents = parents if out.requires_grad else ()
        out._backward = backward_fn if out.requires_grad else None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{flag})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: neg(self)

    def __getitem__(self, index) -> "Tensor":
        data = np.array(self.data[index], dtype=np.float64)
        shape = self.data.shape

        def _backward(g):
            full = np.zeros(shape)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._result(data, (self,), "getitem", _backward)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    return Tensor._result(
        a.data + b.data,
        (a, b),
        "add",
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    return Tensor._result(
        a.data - b.data,
        (a, b),
        "sub",
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    """Hadamard product with broadcasting (row vectors over [B x C], scalars)."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    return Tensor._result(
        a.data * b.data,
        (a, b),
        "mul",
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return Tensor._result(-a.data, (a,), "neg", lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return Tensor._result(
        a.data @ b.data,
        (a, b),
        "matmul",
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0.0  # subgradient at exactly 0 is 0
    # np.maximum keeps NaN visible instead of silently zeroing it
    return Tensor._result(np.maximum(x.data, 0.0), (x,), "relu", lambda g: (g * mask,))


def sum_all(x) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    return Tensor._result(np.array(x.data.sum()), (x,), "sum", lambda g: (np.broadcast_to(g, shape).copy(),))


def batch_mean_rows(x) -> Tensor:
    """Column-wise mean of a [B x C] tensor, giving a length-C vector."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"batch_mean_rows expects a 2-D tensor, got shape {x.shape}")
    rows = x.shape[0]
    if rows == 0:
        raise EmptyBatchError("batch_mean_rows: empty batch")
    return Tensor._result(
        x.data.mean(axis=0),
        (x,),
        "batch_mean_rows",
        lambda g: (np.broadcast_to(g / rows, x.shape).copy(),),
    )


def concat_cols(a, b) -> Tensor:
    """Concatenate two 2-D tensors along the feature axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat_cols: incompatible shapes {a.shape} and {b.shape}")
    split = a.shape[1]
    return Tensor._result(
        np.concatenate([a.data, b.data], axis=1),
        (a, b),
        "concat_cols",
        lambda g: (g[:, :split], g[:, split:]),
    )


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits) -> Tensor:
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax expects [B x K] logits, got shape {logits.shape}")
    probs = np.exp(_log_softmax(logits.data))

    def _backward(g):
        return (probs * (g - (g * probs).sum(axis=1, keepdims=True)),)

    return Tensor._result(probs, (logits,), "softmax", _backward)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], log-sum-exp stabilised."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects [B x K] logits, got shape {logits.shape}")
    rows, classes = logits.shape
    if rows == 0:
        raise EmptyBatchError("softmax_cross_entropy: empty batch")
    labels = np.asarray(labels)
    if labels.shape != (rows,):
        raise DimensionError(f"expected {rows} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(np.equal(np.mod(labels, 1), 0)):
            raise LabelError("labels must be integral class indices")
        labels = labels.astype(np.int64)
    bad = np.flatnonzero((labels < 0) | (labels >= classes))
    if bad.size:
        raise LabelError(f"label {labels[bad[0]]} at index {bad[0]} outside [0, {classes})")
    logp = _log_softmax(logits.data)
    picked = np.arange(rows)
    loss = -logp[picked, labels].mean()

    def _backward(g):
        grad = np.exp(logp)
        grad[picked, labels] -= 1.0
        return (grad * (g / rows),)

    return Tensor._result(np.array(loss), (logits,), "softmax_cross_entropy", _backward)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, every parent before its children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable trainable leaf.

    Gradients add onto whatever is already stored; call :func:`zero_grad`
    between independent evaluations.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor with requires_grad=True")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_check(fn: Callable[[], Tensor], params, eps: float = 1e-5, tol: float | None = None) -> float:
    """Compare analytic gradients with central finite differences.

    ``fn`` takes no arguments and rebuilds the scalar loss from the current
    values of ``params`` (a tensor or a sequence of tensors), which are
    perturbed in place and restored. Returns the largest relative error,
    using max(|analytic|, |numeric|, 1e-8) as the denominator. When ``tol``
    is given, exceeding it raises :class:`GradientCheckError`.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    params = [params] if isinstance(params, Tensor) else list(params)
    saved = [p.grad for p in params]
    zero_grad(params)
    backward(fn())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p, g in zip(params, saved):
        p.grad = g

    worst = 0.0
    for p, a_grad in zip(params, analytic):
        flat = p.data.reshape(-1)
        a_flat = a_grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = fn().item()
            flat[i] = orig - eps
            f_minus = fn().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            denom = max(abs(a_flat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(a_flat[i] - numeric) / denom)
    if tol is not None and worst > tol:
        raise GradientCheckError(f"max relative gradient error {worst:.3e} exceeds {tol:.1e}")
    return worst
