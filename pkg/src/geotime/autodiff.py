"""A small reverse-mode autodiff engine over float64 numpy arrays.

Operations are recorded on the active :class:`Tape` only when one of their
inputs requires a gradient; outside a tape everything runs as plain numpy,
which keeps inference cheap.

    >>> w = Tensor(np.ones(3), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_(mul(w, w))
    >>> tape.backward(loss, [w])[0].tolist()
    [2.0, 2.0, 2.0]

Tensors may carry any number of leading (batch) axes; "rows" in the
primitive names means the last axis.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

LN_EPS = 1e-5
NORM_EPS = 1e-12


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar for the common cases
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


_local = threading.local()


def _active() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; ``backward`` walks the record in reverse, so
    each node is visited exactly once and gradients accumulate at fan-out.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def backward(self, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar `loss` with respect to each tensor in `wrt`.

        Tensors not on the path from `loss` get zero gradients.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if not t.requires_grad:
                    continue
                k = id(t)
                grads[k] = grads[k] + gi if k in grads else gi
        return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]


def _record(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    tape = _active()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.nodes.append(_Node(out, inputs, backward))
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return _record(
        ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (numpy broadcasting rules)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _record(ad @ bd, (a, b), back)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _record(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    ax = axis % tensors[0].ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat along axis {axis}: shapes {ref} and {t.shape} differ")
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _record(
        np.concatenate([t.data for t in tensors], axis=ax),
        tensors,
        lambda g: tuple(np.split(g, sizes, axis=ax)),
    )


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the token (second to last) axis."""
    return concat(tensors, axis=-2)


def slice_axis(a: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    ax = axis % a.ndim
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _record(a.data[idx], (a,), back)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Rows [start, stop) along the token (second to last) axis."""
    return slice_axis(a, start, stop, axis=-2)


def take_rows(a: Tensor, indices) -> Tensor:
    """Gather entries of the leading axis (fancy indexing; repeats allowed)."""
    idx = np.asarray(indices, dtype=np.int64)
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _record(a.data[idx], (a,), back)


def sum_(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(a.data.sum(axis=axis, keepdims=keepdims), (a,), back)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def mean_rows(a: Tensor) -> Tensor:
    """Mean over the token axis: (..., N, d) -> (..., d)."""
    return mean(a, axis=-2)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record(a.data * mask, (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _record(y, (a,), lambda g: (g * y,))


def log(a: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log; with ``floor > 0`` the input is clamped from below first."""
    x = np.maximum(a.data, floor) if floor > 0 else a.data
    live = a.data >= floor if floor > 0 else True
    return _record(np.log(x), (a,), lambda g: (g / x * live,))


def softmax_rows(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _record(y, (a,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def log_softmax_rows(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _record(out, (a,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def logsumexp_rows(a: Tensor) -> Tensor:
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=-1, keepdims=True)
    p = e / s
    return _record((m + np.log(s))[..., 0], (a,), lambda g: (g[..., None] * p,))


def layer_norm_rows(a: Tensor, eps: float = LN_EPS) -> Tensor:
    """Zero-mean, unit-variance normalization of the last axis (no affine)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _record(xhat, (a,), back)


def l2_normalize(a: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Scale the last axis to unit Euclidean norm."""
    x = a.data
    n = np.maximum(np.sqrt((x * x).sum(axis=-1, keepdims=True)), eps)
    y = x / n
    return _record(y, (a,), lambda g: ((g - y * (g * y).sum(axis=-1, keepdims=True)) / n,))


# ---------------------------------------------------------------------------
# composite layers


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return add(y, b) if b is not None else y


def layer_norm_affine(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    return add(mul(layer_norm_rows(x), gain), bias)


def multi_head_self_attention(x: Tensor, p: dict[str, Tensor], heads: int, prefix: str = "") -> Tensor:
    """Scaled dot-product self-attention over tokens, x: (B, N, d) -> (B, N, d).

    Expects ``{prefix}wq, wk, wv, wo`` (d x d) and matching biases
    ``bq, bk, bv, bo`` in `p`. No positional encoding.
    """
    B, N, d = x.shape
    if d % heads:
        raise ContractError(f"width {d} is not divisible by {heads} heads")
    dh = d // heads

    def split(t):
        return permute(reshape(t, (B, N, heads, dh)), (0, 2, 1, 3))

    q = split(linear(x, p[prefix + "wq"], p[prefix + "bq"]))
    k = split(linear(x, p[prefix + "wk"], p[prefix + "bk"]))
    v = split(linear(x, p[prefix + "wv"], p[prefix + "bv"]))
    att = softmax_rows(scale(matmul(q, transpose(k)), 1.0 / np.sqrt(dh)))
    ctx = reshape(permute(matmul(att, v), (0, 2, 1, 3)), (B, N, d))
    return linear(ctx, p[prefix + "wo"], p[prefix + "bo"])


def transformer_block(x: Tensor, p: dict[str, Tensor], heads: int, prefix: str = "") -> Tensor:
    """Pre-norm block: x + MHSA(LN(x)), then + MLP(LN(.)) with a 4d relu hidden layer."""
    h = layer_norm_affine(x, p[prefix + "ln1_g"], p[prefix + "ln1_b"])
    x = add(x, multi_head_self_attention(h, p, heads, prefix))
    h = layer_norm_affine(x, p[prefix + "ln2_g"], p[prefix + "ln2_b"])
    h = relu(linear(h, p[prefix + "mlp_w1"], p[prefix + "mlp_b1"]))
    return add(x, linear(h, p[prefix + "mlp_w2"], p[prefix + "mlp_b2"]))


def numerical_gradient(
    f: Callable[[], float], arr: np.ndarray, indices=None, h: float = 1e-5
) -> np.ndarray:
    """Central differences of ``f()`` with respect to entries of `arr` (mutated in place).

    With `indices` (a sequence of flat positions) only those entries are
    perturbed; the result then has one value per index.
    """
    flat = arr.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = []
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out.append((fp - fm) / (2 * h))
    out = np.array(out)
    return out.reshape(arr.shape) if indices is None else out
