"""Dense tensors with reverse-mode automatic differentiation.

Every op builds a node that remembers its parents and a closure mapping the
output gradient to parent gradients. ``backward`` orders the reachable graph
topologically (the tape) and walks it in reverse. Arrays are numpy; the
default dtype is float32, but float64 inputs stay float64 so gradient checks
can run at higher precision.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class ContractError(RuntimeError):
    pass


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    if dtype is None:
        if isinstance(data, np.ndarray) and data.dtype.kind == "f":
            dtype = data.dtype
        else:
            dtype = DEFAULT_DTYPE
    return np.asarray(data, dtype=dtype)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 _parents: tuple = (), _backward: Callable | None = None, op: str = ""):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_lift(other, self), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def backward(self) -> None:
        backward(self)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype), dtype=like.dtype)


def _node(data: np.ndarray, parents: tuple, backward_fn: Callable, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, dtype=data.dtype,
                  _parents=parents if needs else (),
                  _backward=backward_fn if needs else None, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, name: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch shapes {a.shape} and {b.shape} do not broadcast") from None
    out = _mm(a.data, b.data)

    def bw(g):
        if a.ndim == 2 and b.ndim > 2:
            # shared left factor: its gradient is one GEMM over all batch columns
            axes = [0] + list(range(1, b.ndim - 2)) + [b.ndim - 1]
            ga = np.tensordot(g, b.data, axes=(axes, axes))
        else:
            ga = _unbroadcast(_mm(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(_mm(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _node(out, (a, b), bw, "matmul")


def _mm(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.matmul(x, y)


def add(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    _check_broadcast(a, b, "add")
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), bw, "add")


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    b = _lift(b, a)
    _check_broadcast(a, b, "mul")
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    out = a.data * c
    return _node(out, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = np.where(mask, a.data, a.dtype.type(0))
    return _node(out, (a,), lambda g: (g * mask,), "relu")


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise DimensionError(f"transpose: need at least 2 axes, got shape {a.shape}")
    out = np.ascontiguousarray(np.swapaxes(a.data, -1, -2))
    return _node(out, (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(shape)
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def row_select(a: Tensor, index, axis: int = 0) -> Tensor:
    """Gather entries of ``a`` along ``axis``; ``index`` may be an int or an int array."""
    axis = axis % a.ndim
    idx = np.asarray(index)
    if idx.size and (idx.min() < -a.shape[axis] or idx.max() >= a.shape[axis]):
        raise IndexError(f"row_select: index out of range for axis {axis} of size {a.shape[axis]}")
    out = np.take(a.data, idx, axis=axis)

    def bw(g):
        full = np.zeros_like(a.data)
        if idx.ndim == 0:
            sl = [slice(None)] * a.ndim
            sl[axis] = int(idx)
            full[tuple(sl)] += g
        else:
            moved = np.moveaxis(full, axis, 0)
            gm = np.moveaxis(g, list(range(axis, axis + idx.ndim)), list(range(idx.ndim)))
            np.add.at(moved, idx, gm)
        return (full,)

    return _node(out, (a,), bw, "row_select")


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    out = np.asarray(a.data.sum(axis=axis), dtype=a.dtype)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _node(out, (a,), bw, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def softmax_columns(m: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax down each column (axis -2), so every column sums to one.

    ``mask`` is a boolean array broadcastable to ``m``; False entries get
    zero weight. Every column needs at least one True entry.
    """
    if np.isnan(m.data).any():
        raise NumericError("softmax_columns: NaN in input")
    x = m.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    shifted = x - x.max(axis=-2, keepdims=True)
    e = np.exp(shifted)
    out = (e / e.sum(axis=-2, keepdims=True)).astype(m.dtype)

    def bw(g):
        dot = (g * out).sum(axis=-2, keepdims=True)
        return (out * (g - dot),)

    return _node(out, (m,), bw, "softmax_columns")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, axis: int = -2, eps: float = 1e-5) -> Tensor:
    """Normalise along ``axis`` then apply per-feature gain and bias.

    ``gain``/``bias`` must broadcast against ``x`` (e.g. shape (d, 1) for
    column tokens).
    """
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).astype(x.dtype)
    out = xhat * gain.data + bias.data
    n = x.shape[axis]

    def bw(g):
        gx_hat = g * gain.data
        gx = inv / n * (n * gx_hat - gx_hat.sum(axis=axis, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(axis=axis, keepdims=True))
        return (gx.astype(x.dtype), _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape))

    return _node(out.astype(x.dtype), (x, gain, bias), bw, "layer_norm")


def cross_entropy_logits(logits: Tensor, target) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over rows.

    ``logits`` is (ℓ,) with an int target, or (n, ℓ) with n targets.
    """
    single = logits.ndim == 1
    z = logits.data[None, :] if single else logits.data
    t = np.atleast_1d(np.asarray(target, dtype=np.int64))
    n, ell = z.shape
    if t.shape != (n,):
        raise DimensionError(f"cross_entropy_logits: {t.shape[0]} targets for {n} rows")
    if (t < 0).any() or (t >= ell).any():
        raise IndexError(f"cross_entropy_logits: target out of range [0, {ell})")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    loss = np.asarray(-logp[np.arange(n), t].mean(), dtype=logits.dtype)

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), t] -= 1.0
        gz = (p * (g / n)).astype(logits.dtype)
        return (gz[0] if single else gz,)

    return _node(loss, (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------------------
# tape traversal and optimisation


def tape(root: Tensor) -> list[Tensor]:
    """Reachable grad-requiring nodes in topological order (inputs first)."""
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf that requires grad; leaf grads accumulate."""
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def sgd_step(params: Iterable[Tensor], lr: float) -> None:
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ContractError(f"sgd_step: parameter of shape {p.shape} has no gradient")
    for p in params:
        p.data -= p.dtype.type(lr) * p.grad
        p.grad = np.zeros_like(p.data)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)
