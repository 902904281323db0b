"""Float64 tensors with a tape-based reverse-mode gradient engine.

Every primitive checks shapes strictly (there is no broadcasting) and, when
any of its inputs lives on a :class:`Tape`, appends one node holding the
backward rule.  A fresh tape is built for every forward pass::

    tape = Tape()
    leaves = tape.watch(params)
    loss = reduce("sum", matmul(leaves["w"], x))
    grads = backward(tape, loss, leaves)

Inputs without a tape are constants: they are computed eagerly and never
receive gradients.
"""
from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

ParamSet = dict[str, np.ndarray]
GradSet = dict[str, np.ndarray]

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """Immutable float64 array, optionally bound to a node of a tape."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.flags.writeable:
            arr = arr.view()
            arr.flags.writeable = False
        self.data = arr
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}{tag})"


class Tape:
    """Ordered record of primitive applications (the computation record).

    Node ``i`` stores the ids of its inputs and the closure computing input
    gradients from the output gradient.  Inputs always have smaller ids than
    their consumers, so a reversed sweep is a valid topological order.
    """

    def __init__(self):
        self.parents: list[tuple[int | None, ...]] = []
        self.rules: list[BackwardFn | None] = []
        self.ops: list[str] = []
        self.visits = 0

    def __len__(self) -> int:
        return len(self.rules)

    def leaf(self, value) -> Tensor:
        node = len(self.rules)
        self.parents.append(())
        self.rules.append(None)
        self.ops.append("leaf")
        return Tensor(value, self, node)

    def watch(self, params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
        return {name: self.leaf(value) for name, value in params.items()}

    def _push(self, op: str, out: np.ndarray, inputs: Sequence[Tensor], rule: BackwardFn) -> Tensor:
        node = len(self.rules)
        self.parents.append(tuple(t.node if t.tape is self else None for t in inputs))
        self.rules.append(rule)
        self.ops.append(op)
        return Tensor(out, self, node)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _emit(op: str, out: np.ndarray, inputs: Sequence[Tensor], rule: BackwardFn) -> Tensor:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ContractError("inputs recorded on different tapes")
            tape = t.tape
    if tape is None:
        return Tensor(out)
    return tape._push(op, out, inputs, rule)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# linear algebra


def _gemm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # BLAS picks kernels by matrix extent, so a row's rounding can change with
    # the number of rows in the batch. The plain einsum loop accumulates every
    # output element in the same order whatever the batch size, which keeps
    # forward passes row-invariant (cached teacher signals match per-batch ones).
    return np.einsum("ik,kj->ij", a, b, optimize=False)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return _emit("matmul", _gemm(ad, bd), (a, b), lambda g: (g @ bd.T, ad.T @ g))


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def hadamard(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("hadamard", a, b)
    ad, bd = a.data, b.data
    return _emit("hadamard", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _emit("div", out, (a, b), lambda g: (g / bd, -g * out / bd))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _emit("add_scalar", a.data + float(c), (a,), lambda g: (g,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _emit("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _emit("square", ad * ad, (a,), lambda g: (2.0 * g * ad,))


def smooth_l1(a, delta: float = 1.0) -> Tensor:
    """Pointwise 0.5*x**2/delta for |x| < delta, |x| - 0.5*delta beyond."""
    if delta <= 0:
        raise ContractError("smooth_l1 threshold must be positive")
    a = as_tensor(a)
    x = a.data
    inner = np.abs(x) < delta
    out = np.where(inner, 0.5 * x * x / delta, np.abs(x) - 0.5 * delta)
    slope = np.where(inner, x / delta, np.sign(x))
    return _emit("smooth_l1", out, (a,), lambda g: (g * slope,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "hadamard": hadamard,
    "div": div,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "scale": scale,
    "square": square,
}


def elementwise(op: str, *args) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# row softmax


def softmax_rows(logits) -> Tensor:
    x = as_tensor(logits)
    if x.data.ndim != 2:
        raise DimensionError(f"softmax_rows expects [b x C], got {x.shape}")
    e = np.exp(x.data - x.data.max(axis=1, keepdims=True))
    out = e / e.sum(axis=1, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _emit("softmax_rows", out, (x,), rule)


def log_softmax_rows(logits) -> Tensor:
    x = as_tensor(logits)
    if x.data.ndim != 2:
        raise DimensionError(f"log_softmax_rows expects [b x C], got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(out)
    return _emit("log_softmax_rows", out, (x,), lambda g: (g - probs * g.sum(axis=1, keepdims=True),))


# ---------------------------------------------------------------------------
# reductions


def _expand(g: np.ndarray, shape: tuple[int, ...], axis: int | None) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


def reduce(op: str, t, axis: int | None = None) -> Tensor:
    """``sum``, ``mean`` or ``l2_norm`` over one axis or over everything."""
    t = as_tensor(t)
    x = t.data
    shape = x.shape
    if axis is not None:
        axis = axis % x.ndim
    if op == "sum":
        out = x.sum(axis=axis)
        return _emit("sum", out, (t,), lambda g: (_expand(g, shape, axis),))
    if op == "mean":
        count = x.size if axis is None else shape[axis]
        out = x.sum(axis=axis) / count
        return _emit("mean", out, (t,), lambda g: (_expand(g / count, shape, axis),))
    if op == "l2_norm":
        out = np.sqrt((x * x).sum(axis=axis))

        def rule(g):
            # zero vector: use the zero subgradient
            safe = np.where(out > 0, out, 1.0)
            return (x * _expand(np.where(out > 0, g / safe, 0.0), shape, axis),)

        return _emit("l2_norm", out, (t,), rule)
    raise ContractError(f"unknown reduction {op!r}")


# ---------------------------------------------------------------------------
# explicit shape utilities


def reshape(t, shape: Sequence[int]) -> Tensor:
    t = as_tensor(t)
    old = t.shape
    out = t.data.reshape(tuple(shape))
    return _emit("reshape", out, (t,), lambda g: (g.reshape(old),))


def transpose(t) -> Tensor:
    t = as_tensor(t)
    if t.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got {t.shape}")
    return _emit("transpose", np.ascontiguousarray(t.data.T), (t,), lambda g: (g.T,))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _emit("concat", out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    first = ts[0].shape
    for t in ts[1:]:
        if t.shape != first:
            raise DimensionError(f"stack: shape mismatch {first} vs {t.shape}")
    out = np.stack([t.data for t in ts], axis=axis)
    n = len(ts)
    return _emit("stack", out, ts, lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


class _ScatterGrad:
    """Gradient that is zero outside ``index``; accumulated without a dense copy."""

    __slots__ = ("shape", "index", "value")

    def __init__(self, shape, index, value):
        self.shape, self.index, self.value = shape, index, value

    def dense(self) -> np.ndarray:
        full = np.zeros(self.shape)
        self.add_into(full)
        return full

    def add_into(self, buf: np.ndarray) -> None:
        # fancy indices may repeat, and plain += would drop the repeats
        if any(isinstance(i, np.ndarray) for i in self.index):
            np.add.at(buf, self.index, self.value)
        else:
            buf[self.index] += self.value


def slice_axis(t, start: int, stop: int, axis: int = -1) -> Tensor:
    t = as_tensor(t)
    shape = t.shape
    axis = axis % len(shape)
    index = [slice(None)] * len(shape)
    index[axis] = slice(start, stop)
    index = tuple(index)
    return _emit("slice", t.data[index], (t,), lambda g: (_ScatterGrad(shape, index, g),))


def take(t, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis`` (an int drops that axis, a 1-D array keeps it)."""
    t = as_tensor(t)
    shape = t.shape
    axis = axis % len(shape)
    idx = np.asarray(indices)
    if idx.ndim > 1:
        raise DimensionError("take supports scalar or 1-D indices")
    if idx.ndim == 0:
        index = (slice(None),) * axis + (int(idx),)
    else:
        index = (slice(None),) * axis + (idx,)
    out = np.take(t.data, idx, axis=axis)
    return _emit("take", out, (t,), lambda g: (_ScatterGrad(shape, index, g),))


def tile_rows(v, rows: int) -> Tensor:
    """Repeat a vector ``[k]`` into a matrix ``[rows x k]``."""
    v = as_tensor(v)
    if v.data.ndim != 1:
        raise DimensionError(f"tile_rows expects a vector, got {v.shape}")
    out = np.tile(v.data, (rows, 1))
    return _emit("tile_rows", out, (v,), lambda g: (g.sum(axis=0),))


# ---------------------------------------------------------------------------
# gradients


def backward(tape: Tape, root: Tensor, params: Mapping[str, Tensor]) -> GradSet:
    """Sweep the tape once in reverse and return d(root)/d(param) per name.

    Gradients from multiple uses of a node are summed; parameters that do not
    influence ``root`` get zero gradients.
    """
    if root.tape is not tape:
        raise ContractError("root was not produced by this tape")
    if root.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    grads: list = [None] * len(tape)
    owned = [False] * len(tape)  # buffer is private to this sweep and may be updated in place
    grads[root.node] = np.ones(root.shape)
    tape.visits = 0
    for node in range(root.node, -1, -1):
        tape.visits += 1
        g = grads[node]
        rule = tape.rules[node]
        if g is None or rule is None:
            continue
        if isinstance(g, _ScatterGrad):
            g = g.dense()
        for parent, pg in zip(tape.parents[node], rule(g)):
            if parent is None or pg is None:
                continue
            prev = grads[parent]
            if prev is None:
                grads[parent] = pg
                continue
            if isinstance(prev, _ScatterGrad):
                prev = prev.dense()
            elif not owned[parent]:
                prev = np.array(prev, dtype=np.float64)
            if isinstance(pg, _ScatterGrad):
                pg.add_into(prev)
            else:
                prev += pg
            grads[parent] = prev
            owned[parent] = True
    out: GradSet = {}
    for name, leaf in params.items():
        if leaf.tape is not tape:
            raise ContractError(f"parameter {name!r} is not a leaf of this tape")
        g = grads[leaf.node]
        if isinstance(g, _ScatterGrad):
            g = g.dense()
        out[name] = np.zeros(leaf.shape) if g is None else np.array(g, dtype=np.float64).reshape(leaf.shape)
    return out


def value_and_grad(loss_fn: Callable[[dict[str, Tensor]], Tensor], params: Mapping[str, np.ndarray]) -> tuple[float, GradSet]:
    tape = Tape()
    leaves = tape.watch(params)
    root = loss_fn(leaves)
    return root.item(), backward(tape, root, leaves)


def finite_difference_gradient(loss_fn: Callable[[ParamSet], float], params: Mapping[str, np.ndarray],
                               step: float = 1e-5) -> GradSet:
    """Central differences, one coordinate at a time."""
    if step <= 0:
        raise ContractError("finite-difference step must be positive")
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    grads: GradSet = {}
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(loss_fn(work))
            flat[i] = orig - step
            down = float(loss_fn(work))
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"non-finite loss probing {name}[{i}]")
            gflat[i] = (up - down) / (2.0 * step)
        grads[name] = g
    return grads


def max_relative_error(analytic: Mapping[str, np.ndarray], numeric: Mapping[str, np.ndarray],
                       floor: float = 1e-8) -> float:
    worst = 0.0
    for name in numeric:
        a, n = np.asarray(analytic[name]), np.asarray(numeric[name])
        if a.shape != n.shape:
            raise DimensionError(f"gradient {name!r}: {a.shape} vs {n.shape}")
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        if a.size:
            worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def all_finite(tensors: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(t.data)) for t in tensors)
