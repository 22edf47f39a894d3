"""Dense tensors with reverse-mode differentiation.

A ``Tensor`` wraps a numpy array. Every primitive below builds a new node that
remembers its parents and a closure computing the vector-Jacobian product, so
calling :func:`backward` on a scalar output walks the recorded graph in reverse
topological order and fills ``.grad`` on every leaf with ``requires_grad``.

Only the primitives needed by the fixed layer set are provided; there is no
general broadcasting beyond the bias add and scalar constants.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes are incompatible with the primitive being applied."""


class GraphError(RuntimeError):
    """Backward was requested on something that has no recorded forward pass."""


class Tensor:
    """N-d array plus optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor has {self.data.size} elements, expected 1")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # arithmetic sugar, delegating to the primitives below
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data: np.ndarray, parents: Sequence[Tensor], vjp, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


# ---------------------------------------------------------------------------
# graph traversal


def record(output: Tensor) -> list[Tensor]:
    """Topologically ordered list of the nodes that produced ``output``.

    Every node appears after all of its parents; leaves are included.
    """
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(output: Tensor, output_grad=None) -> None:
    """Accumulate d(output)/d(leaf) into ``leaf.grad`` for every tracked leaf.

    ``output_grad`` defaults to ones for scalar outputs and is required otherwise.
    """
    if not output.requires_grad:
        raise GraphError(
            f"backward: output of op '{output.op}' does not depend on any tracked tensor"
        )
    if output_grad is None:
        if output.data.size != 1:
            raise ShapeError(
                f"backward: output of op '{output.op}' has shape {output.shape}; "
                "pass output_grad for non-scalar outputs"
            )
        output_grad = np.ones_like(output.data)
    g = np.asarray(output_grad, dtype=output.dtype)
    if g.shape != output.shape:
        raise ShapeError(f"backward: output_grad shape {g.shape} != output shape {output.shape}")

    grads: dict[int, np.ndarray] = {id(output): g}
    for node in reversed(record(output)):
        gn = grads.pop(id(node), None)
        if gn is None:
            continue
        if node._vjp is None:
            if node.requires_grad:
                node.grad = gn.copy() if node.grad is None else node.grad + gn
            continue
        for parent, pg in zip(node._parents, node._vjp(gn)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def grad(fn: Callable[..., Tensor], *arrays) -> list[np.ndarray]:
    """Gradients of the scalar ``fn(*tensors)`` wrt each array argument."""
    leaves = [Tensor(np.array(a, copy=True), requires_grad=True) for a in arrays]
    out = fn(*leaves)
    backward(out)
    return [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]


# ---------------------------------------------------------------------------
# elementwise and reduction primitives


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    return np.asarray(g.sum()) if t.data.ndim == 0 and g.ndim else g


def add(a, b) -> Tensor:
    """Elementwise sum; either side may be a scalar constant."""
    if not isinstance(a, Tensor):
        a, b = b, a
    a = as_tensor(a)
    b = _const(b, a)
    if a.shape != b.shape and b.data.ndim != 0 and a.data.ndim != 0:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")

    def vjp(g):
        return _reduce_to(g, a), _reduce_to(g, b)

    return _node(a.data + b.data, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = _const(b, a)
    return add(a, mul(b, -1.0))


def mul(a, b) -> Tensor:
    """Elementwise product; either side may be a scalar constant."""
    if not isinstance(a, Tensor):
        a, b = b, a
    a = as_tensor(a)
    b = _const(b, a)
    if a.shape != b.shape and b.data.ndim != 0 and a.data.ndim != 0:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")

    def vjp(g):
        return _reduce_to(g * b.data, a), _reduce_to(g * a.data, b)

    return _node(a.data * b.data, (a, b), vjp, "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # subgradient 0 at 0

    def vjp(g):
        return (g * mask,)

    return _node(np.maximum(x.data, 0).astype(x.dtype), (x,), vjp, "relu")  # NaN propagates


def maximum(a: Tensor, b) -> Tensor:
    """Elementwise max; on ties the gradient goes to ``b``.

    With ``b`` a zero constant this is the hinge ``max(0, a)`` with subgradient
    0 at the kink.
    """
    a = as_tensor(a)
    b = _const(b, a)
    take_a = a.data > b.data

    def vjp(g):
        return g * take_a, _reduce_to(g * ~take_a, b)

    return _node(np.where(take_a, a.data, b.data).astype(a.dtype), (a, b), vjp, "maximum")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)

    def vjp(g):
        return (g * (1 - t * t),)

    return _node(t, (x,), vjp, "tanh")


def square(x: Tensor) -> Tensor:
    def vjp(g):
        return (2 * g * x.data,)

    return _node(x.data * x.data, (x,), vjp, "square")


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return _node(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), vjp, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis), 1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from exc

    def vjp(g):
        return (g.reshape(x.shape),)

    return _node(out, (x,), vjp, "reshape")


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def pick(x: Tensor, index) -> Tensor:
    """Select ``x[i, index[i]]`` for each row, returning shape (N,)."""
    idx = np.asarray(index, dtype=np.int64)
    if x.data.ndim != 2 or idx.shape != (x.shape[0],):
        raise ShapeError(f"pick: need (N,K) data and (N,) index, got {x.shape} and {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise ShapeError(f"pick: index out of range [0, {x.shape[1]})")
    rows = np.arange(x.shape[0])

    def vjp(g):
        out = np.zeros_like(x.data)
        out[rows, idx] = g
        return (out,)

    return _node(x.data[rows, idx], (x,), vjp, "pick")


def sub_column(x: Tensor, col: Tensor) -> Tensor:
    """``x[i, k] - col[i]`` for (N,K) ``x`` and (N,) ``col``."""
    if x.data.ndim != 2 or col.shape != (x.shape[0],):
        raise ShapeError(f"sub_column: shapes {x.shape} and {col.shape} incompatible")

    def vjp(g):
        return g, -g.sum(axis=1)

    return _node(x.data - col.data[:, None], (x, col), vjp, "sub_column")


# ---------------------------------------------------------------------------
# softmax family


def _log_softmax(a: np.ndarray) -> np.ndarray:
    shifted = a - a.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax via max-subtracted log-sum-exp."""
    out = _log_softmax(x.data)
    p = np.exp(out)

    def vjp(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _node(out, (x,), vjp, "log_softmax")


def softmax(x: Tensor) -> Tensor:
    p = np.exp(_log_softmax(x.data))

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _node(p, (x,), vjp, "softmax")


# ---------------------------------------------------------------------------
# dense and convolutional layers


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _node(a.data @ b.data, (a, b), vjp, "matmul")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-feature (dense) or per-channel (conv) bias vector."""
    if b.data.ndim != 1 or x.data.ndim < 2 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match input {x.shape}")
    shape = (1, -1) + (1,) * (x.data.ndim - 2)
    axes = (0,) + tuple(range(2, x.data.ndim))

    def vjp(g):
        return g, g.sum(axis=axes)

    return _node(x.data + b.data.reshape(shape), (x, b), vjp, "add_bias")


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (N,C,H,W) input with (F,C,kh,kw) filters."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {xp.shape[2:]}")
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    # (N, Ho, Wo, C*kh*kw) patch matrix
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(f, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def vjp(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        gw = (gmat.T @ cols).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            hs = stride * (ho - 1) + 1
            ws = stride * (wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + hs : stride, j : j + ws : stride] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        return gx, gw

    return _node(np.ascontiguousarray(out), (x, w), vjp, "conv2d")


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping ``size``x``size`` max pooling; trailing rows/cols are dropped.

    Gradient goes to the first maximal element of each window (row-major).
    """
    if x.data.ndim != 4:
        raise ShapeError(f"max_pool2d: expected (N,C,H,W), got {x.shape}")
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise ShapeError(f"max_pool2d: window {size} larger than input {h}x{w}")
    xc = x.data[:, :, : ho * size, : wo * size]
    blocks = xc.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, ho, wo, size * size)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5)
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, : ho * size, : wo * size] = gb.reshape(n, c, ho * size, wo * size)
        return (gx,)

    return _node(out, (x,), vjp, "max_pool2d")


# ---------------------------------------------------------------------------
# finite-difference checking


def numerical_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (float64)."""
    x = np.array(x, dtype=np.float64, copy=True)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """max|a-b| / max(max|a|, max|b|, tiny), a scale-aware comparison."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def input_gradient(net: Callable[[Tensor], Tensor], loss, x, y, chunk: int = 1000) -> np.ndarray:
    """Gradient of ``loss(net(x), y)`` wrt the input batch ``x``.

    ``loss`` must return a scalar that is a sum of per-sample terms, so the
    batch can be processed in chunks without changing the result. Parameter
    gradients are not accumulated. Counts one call on ``net.grad_calls``.
    """
    if isinstance(x, Tensor):
        x = x.data
    x = np.asarray(x)
    y = np.asarray(y)
    dtype = getattr(net, "dtype", x.dtype)
    x = x.astype(dtype, copy=False)
    out = np.zeros_like(x)
    params = net.params() if hasattr(net, "params") else []
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        for i in range(0, max(len(x), 1), chunk):
            xt = Tensor(x[i : i + chunk], requires_grad=True)
            value = loss(net(xt), y[i : i + chunk])
            if not isinstance(value, Tensor) or value.data.size != 1:
                raise ShapeError("input_gradient: loss must be a scalar Tensor")
            if value.requires_grad:
                backward(value)
            if xt.grad is not None:
                out[i : i + chunk] = xt.grad
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad = flag
    if hasattr(net, "grad_calls"):
        net.grad_calls += 1
    return out


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
