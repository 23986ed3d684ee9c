"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor` that remembers its parents and a
local backward rule. ``loss.backward()`` walks the reachable graph in
reverse creation order (creation order is always a valid topological
order, because an op's inputs exist before its output) and accumulates
gradients into leaf tensors.

Broadcasting follows numpy's trailing-dimension rule for every binary op.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_node_ids = itertools.count()
_grad_enabled = True

DTYPE = np.float64


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph (inference, finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self.node_id = next(_node_ids)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- basic attributes -------------------------------------------------
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
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- autodiff ---------------------------------------------------------
    def backward(self) -> None:
        """Populate ``.grad`` on every requires_grad ancestor.

        Leaf gradients accumulate across calls; call ``zero_grad`` between
        optimizer steps.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        tape = Tape(self)
        grads = {self.node_id: np.ones_like(self.data)}
        for node in tape.nodes:
            g = grads.pop(node.node_id, None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = node.grad + g if node.grad is not None else g.copy()
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.node_id in grads:
                    grads[parent.node_id] = grads[parent.node_id] + pg
                else:
                    grads[parent.node_id] = pg

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class Tape:
    """Reverse-topological list of the nodes reachable from ``root``.

    Only nodes that participate in differentiation are recorded. Each entry
    exposes its input ids via ``ops``.
    """

    def __init__(self, root: Tensor):
        seen: dict[int, Tensor] = {}
        stack = [root]
        while stack:
            node = stack.pop()
            if node.node_id in seen:
                continue
            seen[node.node_id] = node
            stack.extend(p for p in node._parents if p.requires_grad)
        self.nodes = [seen[k] for k in sorted(seen, reverse=True)]

    @property
    def ops(self) -> list[tuple[int, tuple[int, ...]]]:
        return [(n.node_id, tuple(p.node_id for p in n._parents)) for n in reversed(self.nodes) if n._parents]

    def __len__(self) -> int:
        return len(self.nodes)


# ---------------------------------------------------------------------------
# helpers


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


def _norm_axis(axis, ndim: int, op: str):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"{op}: axis {ax} out of range for a {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(out)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def sin(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),))


def cos(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if (x.data <= 0).any():
        raise NumericError("log: non-positive input")
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x) -> Tensor:
    """tanh-approximated GELU."""
    x = as_tensor(x)
    x2 = x.data * x.data
    t = np.tanh(_GELU_C * x.data * (1.0 + 0.044715 * x2))
    out = 0.5 * x.data * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    return _make(out, (x,), backward)


def identity(x) -> Tensor:
    return as_tensor(x)


ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "sin": sin,
    "cos": cos,
    "square": square,
    "exp": exp,
    "scale": scale,
}


def elementwise(op: str, *args) -> Tensor:
    try:
        fn = ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} are not broadcastable") from None

    if b.ndim == 2 and a.ndim > 2:
        # shared weight: one 2-D GEMM over the folded batch dims
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[1],))

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make(out, (a, b), backward)

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward)


def einsum(subscripts: str, a, b) -> Tensor:
    """Two-operand einsum with explicit output, e.g. ``"bkj,klj->bkl"``.

    Every index of an operand must appear in the other operand or in the
    output, so that each gradient is itself a plain einsum.
    """
    a, b = as_tensor(a), as_tensor(b)
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    for s, other in ((sa, sb + out_sub), (sb, sa + out_sub)):
        if any(ch not in other for ch in s):
            raise ContractError(f"einsum {subscripts!r}: index summed within a single operand")
    try:
        out = np.einsum(subscripts, a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"einsum {subscripts!r}: shapes {a.shape} and {b.shape}: {exc}") from None

    def backward(g):
        ga = np.einsum(f"{out_sub},{sb}->{sa}", g, b.data) if a.requires_grad else None
        gb = np.einsum(f"{out_sub},{sa}->{sb}", g, a.data) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward)


# ---------------------------------------------------------------------------
# reductions


def reduce_sum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim, "sum")
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), backward)


def reduce_mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim, "mean")
    n = x.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    return scale(reduce_sum(x, axes, keepdims), 1.0 / n)


def reduce_max(x, axis=None, keepdims=False) -> Tensor:
    """Max reduction; the gradient goes to the first maximal entry."""
    x = as_tensor(x)
    if axis is None:
        flat = x.data.reshape(-1)
        idx = int(np.argmax(flat))
        out = flat[idx].reshape((1,) * x.ndim) if keepdims else flat[idx]

        def backward(g):
            gx = np.zeros(x.size)
            gx[idx] = np.asarray(g).reshape(-1)[0]
            return (gx.reshape(x.shape),)

        return _make(out, (x,), backward)
    if not isinstance(axis, int):
        raise DimensionError("max: reduce over a single axis or all axes")
    (ax,) = _norm_axis(axis, x.ndim, "max")
    idx = np.expand_dims(np.argmax(x.data, axis=ax), ax)
    out = np.take_along_axis(x.data, idx, axis=ax)
    if not keepdims:
        out = np.squeeze(out, ax)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g, axis=ax)
        return (gx,)

    return _make(out, (x,), backward)


REDUCTIONS = {"sum": reduce_sum, "mean": reduce_mean, "max": reduce_max}


def reduce(op: str, x, axis=None, keepdims=False) -> Tensor:
    try:
        fn = REDUCTIONS[op]
    except KeyError:
        raise ContractError(f"unknown reduction {op!r}") from None
    return fn(x, axis, keepdims)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    (ax,) = _norm_axis(axis, x.ndim, "softmax")
    if np.isnan(x.data).any():
        raise NumericError("softmax: NaN in input")
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=ax, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x, a1: int, a2: int) -> Tensor:
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, tuple(axes))


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    out = x.data[idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(out, (x,), backward)


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise DimensionError(f"broadcast_to: {x.shape} cannot broadcast to {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (_unbroadcast(g, x.shape),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in tensors]}: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(tensors), backward)


def zeros(shape, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# finite-difference checking


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5, eps: float = 1e-8) -> float:
    """Max over coordinates of ``|analytic - central| / (|analytic| + eps)``."""
    x = Tensor(np.array(x.data), requires_grad=True)
    f(x).backward()
    analytic = x.grad.reshape(-1)
    numeric = _central_differences(lambda: f(x).item(), x.data.reshape(-1), range(x.size), h)
    return float(np.max(np.abs(analytic - numeric) / (np.abs(analytic) + eps)))


def _central_differences(evaluate: Callable[[], float], flat: np.ndarray, coords, h: float) -> np.ndarray:
    out = np.empty(len(coords))
    with no_grad():
        for n, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + h
            fp = evaluate()
            flat[i] = orig - h
            fm = evaluate()
            flat[i] = orig
            out[n] = (fp - fm) / (2.0 * h)
    return out


def grad_check_params(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
    eps: float = 1e-8,
    max_coords: int = 2000,
    rng: np.random.Generator | None = None,
) -> dict[str, float]:
    """Per-parameter max relative error of backprop vs central differences.

    When the model has more than ``max_coords`` scalars, coordinates are
    sampled uniformly (without replacement) across all parameters.
    """
    rng = rng or np.random.default_rng(0)
    zero_grad(params.values())
    loss_fn().backward()
    sizes = {name: p.size for name, p in params.items()}
    total = sum(sizes.values())
    chosen = np.arange(total) if total <= max_coords else np.sort(rng.choice(total, max_coords, replace=False))
    errors = {}
    offset = 0
    for name, p in params.items():
        local = chosen[(chosen >= offset) & (chosen < offset + sizes[name])] - offset
        offset += sizes[name]
        if local.size == 0:
            continue
        analytic = p.grad.reshape(-1)[local]
        numeric = _central_differences(lambda: loss_fn().item(), p.data.reshape(-1), list(local), h)
        errors[name] = float(np.max(np.abs(analytic - numeric) / (np.abs(analytic) + eps)))
    return errors
