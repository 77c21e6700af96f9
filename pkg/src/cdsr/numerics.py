"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation records its inputs and a backward closure when gradients are
enabled and at least one input requires them.  ``Tensor.backward`` replays the
recorded tape in reverse topological order.  Results are checked for NaN/Inf
after every operation; a non-finite value raises :class:`NumericError`.
"""

from __future__ import annotations

import contextlib
import threading
from collections.abc import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "NumericError",
    "Tensor",
    "as_tensor",
    "concat",
    "grad_check",
    "grad_errors",
    "is_grad_enabled",
    "layer_norm",
    "log_softmax",
    "matmul",
    "no_grad",
    "silu",
    "softmax_rows",
    "take",
]


class NumericError(FloatingPointError):
    """A NaN or infinity appeared in a tensor."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording on the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite value produced by {op}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tensor:
    """Row-major float64 array with optional gradient tracking.

    Tensors are treated as immutable once built; only ``grad`` changes, by
    accumulation during :meth:`backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "Tensor()")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @classmethod
    def _result(cls, data, parents, backward, op):
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- backward -------------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every tracked leaf.

        Without ``grad`` the tensor is treated as sum-reduced, i.e. the seed
        gradient is all ones.
        """
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        seed = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=np.float64)
        if seed.shape != self.shape:
            raise DimensionError(f"seed gradient shape {seed.shape} != tensor shape {self.shape}")
        order = _toposort(self)
        grads = {id(self): seed}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators ------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _toposort(root: Tensor) -> list[Tensor]:
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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return Tensor._result(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from exc
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(out, (a, b), backward, "mul")


def neg(a: Tensor) -> Tensor:
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return Tensor._result(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    out = ad**p
    return Tensor._result(out, (a,), lambda g: (g * p * ad ** (p - 1),), "power")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return Tensor._result(out, (a,), lambda g: (g / ad,), "log")


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    x = a.data
    s = 0.5 * (1.0 + np.tanh(0.5 * x))
    out = x * s
    return Tensor._result(out, (a,), lambda g: (g * s * (1.0 + x * (1.0 - s)),), "silu")


# -- shape ------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {src} to {tuple(shape)}") from exc
    return Tensor._result(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)
    return Tensor._result(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a: Tensor, key) -> Tensor:
    """Basic (slice/integer) indexing.  Use :func:`take` for gathers."""
    src = a.shape
    out = a.data[key]

    def backward(g):
        full = np.zeros(src)
        full[key] = g
        return (full,)

    return Tensor._result(np.array(out, dtype=np.float64), (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"cannot concatenate shapes {shapes} on axis {axis}") from exc
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return Tensor._result(out, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def take(table: Tensor, index, axis: int = 0) -> Tensor:
    """Gather slices of ``table`` along ``axis``; gradients scatter-add back."""
    idx = np.asarray(index)
    if idx.dtype.kind not in "iu":
        raise TypeError(f"index must be integral, got {idx.dtype}")
    size = table.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise IndexError(f"lookup index out of range [0, {size}): min={idx.min()} max={idx.max()}")
    out = np.take(table.data, idx, axis=axis)
    src = table.shape

    def backward(g):
        full = np.zeros(src)
        if axis == 0:
            np.add.at(full, idx, g)
        else:
            moved = np.moveaxis(full, axis, 0)
            gm = np.moveaxis(g, tuple(range(axis, axis + idx.ndim)), tuple(range(idx.ndim)))
            np.add.at(moved, idx, gm)
        return (full,)

    return Tensor._result(out, (table,), backward, "take")


# -- reductions -------------------------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return Tensor._result(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis, keepdims) * (1.0 / count)


# -- linear algebra -----------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes with broadcast batches."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise DimensionError(f"matmul batch mismatch: {a.shape} x {b.shape}") from exc
    ad, bd = a.data, b.data
    out = ad @ bd

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(out, (a, b), backward, "matmul")


# -- normalisers ----------------------------------------------------------------------


def _masked_exp(x: np.ndarray, mask: np.ndarray | None):
    if mask is None:
        m = x.max(axis=-1, keepdims=True)
        e = np.exp(x - m)
        return m, e
    z = np.where(mask, x, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(mask, np.exp(np.where(mask, x - m, 0.0)), 0.0)
    return m, e


def softmax_rows(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis, restricted to entries where ``mask`` is true.

    Masked entries are exactly zero.  A row with no unmasked entry is all
    zeros rather than NaN.
    """
    x = as_tensor(x)
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    _, e = _masked_exp(x.data, mask)
    s = e.sum(axis=-1, keepdims=True)
    y = np.divide(e, s, out=np.zeros_like(e), where=s > 0)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._result(y, (x,), backward, "softmax")


def log_softmax(x: Tensor, mask=None) -> Tensor:
    """Log-softmax over the last axis; masked entries are returned as 0."""
    x = as_tensor(x)
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    m, e = _masked_exp(x.data, mask)
    s = e.sum(axis=-1, keepdims=True)
    if (s <= 0).any():
        raise NumericError("log_softmax over a fully masked row")
    out = x.data - m - np.log(s)
    p = e / s
    if mask is not None:
        out = np.where(mask, out, 0.0)

    def backward(g):
        if mask is not None:
            g = np.where(mask, g, 0.0)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return Tensor._result(out, (x,), backward, "log_softmax")


def layer_norm(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Parameter-free normalisation to zero mean and unit variance on the last axis.

    ``eps`` floors the variance; an all-constant row maps to zeros.
    """
    x = as_tensor(x)
    xc = x.data - x.data.mean(axis=-1, keepdims=True)
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return Tensor._result(y, (x,), backward, "layer_norm")


# -- finite-difference checking ----------------------------------------------------------


def _named(params) -> dict[str, Tensor]:
    if isinstance(params, Mapping):
        return dict(params)
    if isinstance(params, Tensor):
        return {"0": params}
    return {str(i): p for i, p in enumerate(params)}


def grad_errors(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Iterable[Tensor],
    eps: float = 1e-3,
    tape_transform: Callable[[str, np.ndarray], np.ndarray] | None = None,
    stencil: int = 5,
) -> dict[str, float]:
    """Per-parameter maximum relative error between tape and central differences.

    ``stencil=5`` uses the fourth-order central difference
    (8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h; ``stencil=3`` the plain
    (f(x+h) - f(x-h)) / 2h.  ``tape_transform`` lets callers tamper with the
    tape gradient before comparison (negative-control checks).
    """
    if stencil not in (3, 5):
        raise ValueError("stencil must be 3 or 5")
    named = _named(params)
    for p in named.values():
        p.zero_grad()
    loss = f()
    if loss.data.size != 1:
        raise DimensionError(f"grad_check needs a scalar function, got shape {loss.shape}")
    loss.backward()
    errors = {}
    for name, p in named.items():
        tape = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        if tape_transform is not None:
            tape = tape_transform(name, tape)
        fd = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        fd_flat = fd.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]

                def at(step):
                    flat[i] = orig + step * eps
                    return f().item()

                d1 = at(1) - at(-1)
                if stencil == 3:
                    fd_flat[i] = d1 / (2.0 * eps)
                else:
                    fd_flat[i] = (8.0 * d1 - (at(2) - at(-2))) / (12.0 * eps)
                flat[i] = orig
        rel = np.abs(tape - fd) / np.maximum(1e-8, np.abs(tape) + np.abs(fd))
        errors[name] = float(rel.max()) if rel.size else 0.0
    return errors


def grad_check(f: Callable[[], Tensor], params, eps: float = 1e-3, stencil: int = 5) -> float:
    """Max relative error |g_tape - g_fd| / max(1e-8, |g_tape| + |g_fd|) over all params."""
    errs = grad_errors(f, params, eps, stencil=stencil)
    return max(errs.values(), default=0.0)
