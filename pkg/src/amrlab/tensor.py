"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

Every backward rule is written in terms of the same primitives it
differentiates, so a backward pass run while recording (``create_graph=True``)
yields gradients that are themselves graph nodes and can be differentiated
again.  That second-order path is what the attribution regularizer trains
through.

Subgradient conventions, chosen so every backward pass is total and
deterministic: relu'(0) = 0, d|x|/dx = 0 at 0, and the gradient of an L2
norm at the origin is 0.  Any operation that produces NaN or an infinity
raises :class:`NumericError` instead of propagating the value.
"""

from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

__all__ = [
    "Tensor",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "relu",
    "abs_",
    "exp",
    "log",
    "sqrt",
    "matmul",
    "transpose",
    "reshape",
    "sum_",
    "mean",
    "l2_norm",
    "max_with_argmax",
    "concat",
    "narrow",
    "pad_axis",
    "expand_axis",
    "expand_scalar",
    "softmax",
    "softmax_cross_entropy",
    "backward",
    "finite_difference_gradient",
    "no_grad",
    "set_grad_enabled",
    "is_grad_enabled",
]

# context-local so independent runs can train in parallel threads
_grad_enabled = contextvars.ContextVar("amrlab_grad_enabled", default=True)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


@contextlib.contextmanager
def set_grad_enabled(flag: bool):
    """Temporarily switch graph recording on or off."""
    token = _grad_enabled.set(flag)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def no_grad():
    """Context manager that disables graph recording."""
    return set_grad_enabled(False)


class Tensor:
    """A dense float64 array, optionally attached to the computation graph.

    Leaf tensors (parameters, inputs, constants) have no parents.  Tensors
    produced by the operations below carry parent references and a
    vector-Jacobian closure; together these form the per-step tape.
    """

    __slots__ = ("data", "_parents", "_vjp")

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NumericError("tensor created from non-finite data")
        self.data = arr
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.ravel()[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    # arithmetic ----------------------------------------------------------
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        return self.__mul__(other)

    def __truediv__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    # common ops as methods ------------------------------------------------
    def relu(self) -> "Tensor":
        return relu(self)

    def abs(self) -> "Tensor":
        return abs_(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)

    def sum(self, axis: int | None = None) -> "Tensor":
        return sum_(self, axis)

    def mean(self, axis: int | None = None) -> "Tensor":
        return mean(self, axis)

    def l2_norm(self, axis: int | None = None) -> "Tensor":
        return l2_norm(self, axis)

    def max_with_argmax(self, axis: int = 0):
        return max_with_argmax(self, axis)

    def transpose(self) -> "Tensor":
        return transpose(self)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)


def _result(data: np.ndarray, parents: tuple, vjp, op: str) -> Tensor:
    # A non-finite term always makes the sum non-finite, so one reduction
    # screens the whole array; the exact elementwise check runs only on the
    # rare screen hit (a finite array can still overflow the screening sum).
    with np.errstate(all="ignore"):
        screen = data.sum()
    if not np.isfinite(screen) and not np.isfinite(data).all():
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    if _grad_enabled.get():
        out._parents = parents
        out._vjp = vjp
    else:
        out._parents = ()
        out._vjp = None
    return out


def _attach_vjp(out: Tensor, vjp) -> Tensor:
    # For rules that need to reference the output tensor itself.
    if out._parents:
        out._vjp = vjp
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} differ")


def _check_axis(t: Tensor, axis: int, op: str) -> None:
    if not -t.ndim <= axis < t.ndim:
        raise ShapeError(f"{op}: axis {axis} invalid for shape {t.shape}")


# elementwise ---------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, scale(g, -1.0)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return _result(a.data * b.data, (a, b), lambda g: (mul(g, b), mul(g, a)), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "div")
    with np.errstate(all="ignore"):
        data = a.data / b.data
    return _result(
        data,
        (a, b),
        lambda g: (div(g, b), scale(div(mul(g, a), mul(b, b)), -1.0)),
        "div",
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (scale(g, c),), "scale")


def relu(a: Tensor) -> Tensor:
    mask = Tensor(np.greater(a.data, 0.0).astype(np.float64))
    return _result(np.maximum(a.data, 0.0), (a,), lambda g: (mul(g, mask),), "relu")


def abs_(a: Tensor) -> Tensor:
    sgn = Tensor(np.sign(a.data))
    return _result(np.abs(a.data), (a,), lambda g: (mul(g, sgn),), "abs")


def exp(a: Tensor) -> Tensor:
    with np.errstate(all="ignore"):
        data = np.exp(a.data)
    out = _result(data, (a,), None, "exp")
    return _attach_vjp(out, lambda g: (mul(g, out),))


def log(a: Tensor) -> Tensor:
    with np.errstate(all="ignore"):
        data = np.log(a.data)
    return _result(data, (a,), lambda g: (div(g, a),), "log")


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(all="ignore"):
        data = np.sqrt(a.data)
    out = _result(data, (a,), None, "sqrt")
    return _attach_vjp(out, lambda g: (scale(mul(g, _recip_or_zero(out)), 0.5),))


def _recip_or_zero(a: Tensor) -> Tensor:
    # 1/x with the convention 1/0 = 0; the matching derivative -1/x**2 is
    # expressed through the output so it is likewise 0 at x = 0.
    data = np.zeros_like(a.data)
    np.divide(1.0, a.data, out=data, where=(a.data != 0))
    out = _result(data, (a,), None, "recip_or_zero")
    return _attach_vjp(out, lambda g: (scale(mul(g, mul(out, out)), -1.0),))


# linear algebra -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expected 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions {a.shape} x {b.shape} do not agree")
    return _result(
        a.data @ b.data,
        (a, b),
        lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)),
        "matmul",
    )


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected 2-d operand, got {a.shape}")
    return _result(
        np.ascontiguousarray(a.data.T), (a,), lambda g: (transpose(g),), "transpose"
    )


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.data.shape
    return _result(
        a.data.reshape(shape).copy(), (a,), lambda g: (reshape(g, old),), "reshape"
    )


# reductions and expansions ---------------------------------------------------


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        shape = a.data.shape
        return _result(
            np.asarray(a.data.sum()), (a,), lambda g: (expand_scalar(g, shape),), "sum"
        )
    _check_axis(a, axis, "sum")
    n = a.data.shape[axis]
    return _result(
        a.data.sum(axis=axis), (a,), lambda g: (expand_axis(g, axis, n),), "sum"
    )


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is not None:
        _check_axis(a, axis, "mean")
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(sum_(a, axis), 1.0 / n)


def expand_scalar(a: Tensor, shape) -> Tensor:
    if a.data.size != 1:
        raise ShapeError("expand_scalar: input must be a scalar")
    value = float(a.data.ravel()[0])
    return _result(np.full(shape, value), (a,), lambda g: (sum_(g),), "expand_scalar")


def expand_axis(a: Tensor, axis: int, n: int) -> Tensor:
    data = np.repeat(np.expand_dims(a.data, axis), n, axis=axis)
    return _result(data, (a,), lambda g: (sum_(g, axis),), "expand_axis")


def l2_norm(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is not None:
        _check_axis(a, axis, "l2_norm")
    return sqrt(sum_(mul(a, a), axis))


def max_with_argmax(a: Tensor, axis: int = 0):
    """Maximum along ``axis`` plus the winning indices.

    The indices are constants of the differentiation: gradient flows only to
    the winning elements, which is the exact derivative wherever the maximum
    is unique.
    """
    _check_axis(a, axis, "max_with_argmax")
    idx = np.argmax(a.data, axis=axis)
    values = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    mask_data = np.zeros_like(a.data)
    np.put_along_axis(mask_data, np.expand_dims(idx, axis), 1.0, axis=axis)
    mask = Tensor(mask_data)
    n = a.data.shape[axis]
    out = _result(
        np.asarray(values),
        (a,),
        lambda g: (mul(expand_axis(g, axis, n), mask),),
        "max_with_argmax",
    )
    return out, idx


# shape surgery ---------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat: empty input")
    _check_axis(tensors[0], axis, "concat")
    sizes = tuple(t.data.shape[axis] for t in tensors)
    offsets = tuple(int(o) for o in np.cumsum((0,) + sizes[:-1]))

    def vjp(g, offsets=offsets, sizes=sizes, axis=axis):
        return tuple(narrow(g, axis, o, s) for o, s in zip(offsets, sizes))

    return _result(
        np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp, "concat"
    )


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    _check_axis(a, axis, "narrow")
    if start < 0 or start + length > a.data.shape[axis]:
        raise ShapeError(f"narrow: window [{start}, {start + length}) outside axis of size {a.data.shape[axis]}")
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    before, after = start, a.data.shape[axis] - start - length
    return _result(
        a.data[tuple(sl)].copy(),
        (a,),
        lambda g: (pad_axis(g, axis, before, after),),
        "narrow",
    )


def pad_axis(a: Tensor, axis: int, before: int, after: int) -> Tensor:
    _check_axis(a, axis, "pad_axis")
    widths = [(0, 0)] * a.ndim
    widths[axis] = (before, after)
    n = a.data.shape[axis]
    return _result(
        np.pad(a.data, widths), (a,), lambda g: (narrow(g, axis, before, n),), "pad_axis"
    )


# classification losses --------------------------------------------------------


def _shifted_logits(logits: Tensor) -> Tensor:
    # Subtracting the per-row maximum (a constant of the differentiation)
    # leaves softmax unchanged and keeps exp() in range.
    row_max = Tensor(logits.data.max(axis=1))
    return sub(logits, expand_axis(row_max, 1, logits.shape[1]))


def softmax(logits: Tensor) -> Tensor:
    if logits.ndim != 2:
        raise ShapeError(f"softmax: expected batch x classes, got {logits.shape}")
    e = exp(_shifted_logits(logits))
    return div(e, expand_axis(sum_(e, 1), 1, logits.shape[1]))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: expected batch x classes, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"softmax_cross_entropy: expected {n} labels, got shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"softmax_cross_entropy: labels outside [0, {c})")
    shifted = _shifted_logits(logits)
    lse = log(sum_(exp(shifted), 1))
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    picked = sum_(mul(shifted, Tensor(onehot)), 1)
    return mean(sub(lse, picked))


# reverse pass ------------------------------------------------------------------


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            stack.append((parent, False))
    return order


def backward(root: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of a scalar ``root`` with respect to each tensor in ``wrt``.

    Tensors not in the ancestry of ``root`` get a zero gradient.  With
    ``create_graph=True`` the returned gradients are recorded on the graph
    and can be differentiated again.
    """
    if root.data.size != 1:
        raise ValueError(f"backward requires a scalar root, got shape {root.shape}")
    topo = _toposort(root)
    grads: dict[int, Tensor] = {id(root): Tensor(np.ones_like(root.data))}
    with set_grad_enabled(create_graph):
        for node in reversed(topo):
            g = grads.get(id(node))
            if g is None or node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else add(acc, pg)
    return [
        grads[id(w)] if id(w) in grads else Tensor(np.zeros_like(w.data)) for w in wrt
    ]


def finite_difference_gradient(fn, x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function; the test oracle.

    Evaluates ``fn`` at x +/- h along every coordinate, so it never touches
    the reverse-mode machinery it is used to check.
    """
    if h <= 0:
        raise ValueError("finite_difference_gradient: h must be positive")
    base = np.array(x.data, dtype=np.float64, copy=True)
    grad = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        hi = base.copy()
        hi[i] += h
        lo = base.copy()
        lo[i] -= h
        fp = fn(Tensor(hi))
        fm = fn(Tensor(lo))
        fp = fp.item() if isinstance(fp, Tensor) else float(fp)
        fm = fm.item() if isinstance(fm, Tensor) else float(fm)
        grad[i] = (fp - fm) / (2.0 * h)
    return Tensor(grad)
