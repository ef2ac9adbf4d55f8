"""Dense float64 tensors with reverse-mode automatic differentiation.

Small tape-based engine: every operation that touches a gradient-requiring
tensor records its parents and a backward closure.  numpy supplies the dense
kernels; all arrays are float64 and row-major, so results are deterministic
for identical inputs on the same platform.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise ValueError("tensor values must be finite")
    return arr


class Tensor:
    """A float64 array plus an optional place on the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Optional[Callable[[np.ndarray], tuple]] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; constants fold to plain arrays.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(other) -> Tensor:
    return other if isinstance(other, Tensor) else Tensor(other)


def _record(out_data: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    if not np.isfinite(out_data).all():
        raise FloatingPointError("non-finite value produced by a tensor op")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._vjp = None
    if _GRAD_ENABLED and any(p.requires_grad or p._vjp is not None for p in parents):
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), vjp)


def scale(a, s: float) -> Tensor:
    a = _wrap(a)
    s = float(s)
    out = a.data * s

    def vjp(g):
        return (g * s,)

    return _record(out, (a,), vjp)


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch semantics (both operands ndim >= 2)."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have ndim >= 2")
    out = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), vjp)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: out[..., :] = table[ids[...], :]."""
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        return (gt,)

    return _record(out, (table,), vjp)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = _wrap(a)
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    return _record(out, (a,), vjp)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    a = _wrap(a)
    out = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def vjp(g):
        return (np.transpose(g, inv),)

    return _record(out, (a,), vjp)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [_wrap(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(parts), vjp)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    a = _wrap(a)
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = a.data[index]

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[index] = g
        return (ga,)

    return _record(out, (a,), vjp)


def silu(a: Tensor) -> Tensor:
    a = _wrap(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * sig

    def vjp(g):
        return (g * sig * (1.0 + a.data * (1.0 - sig)),)

    return _record(out, (a,), vjp)


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    """Root-mean-square normalization over the last axis with a learned scale."""
    x, weight = _wrap(x), _wrap(weight)
    n = x.data.shape[-1]
    inv = 1.0 / np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    out = x.data * inv * weight.data

    def vjp(g):
        gw_full = g * x.data * inv
        gw = _unbroadcast(gw_full, weight.shape)
        s = np.sum(g * weight.data * x.data, axis=-1, keepdims=True)
        gx = g * weight.data * inv - x.data * (inv ** 3) * s / n
        return gx, gw

    return _record(out, (x, weight), vjp)


def masked_softmax(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Row softmax over the last axis restricted to positions where mask is True.

    Masked positions get probability exactly 0.  Rows with no unmasked entry
    are a contract violation.
    """
    scores = _wrap(scores)
    mask_b = np.broadcast_to(np.asarray(mask, dtype=bool), scores.shape)
    if not mask_b.any(axis=-1).all():
        raise ValueError("masked_softmax: a row has no attendable position")
    neg = np.where(mask_b, scores.data, -np.inf)
    m = np.max(neg, axis=-1, keepdims=True)
    e = np.exp(neg - m)
    # exp(-inf - m) is 0, so masked positions contribute nothing.
    z = np.sum(e, axis=-1, keepdims=True)
    out = e / z

    def vjp(g):
        inner = np.sum(g * out, axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _record(out, (scores,), vjp)


def softmax(v: Tensor, temperature: float = 1.0) -> Tensor:
    """Temperature softmax over the last axis, computed with max subtraction."""
    v = _wrap(v)
    if not temperature > 0.0:
        raise ValueError("softmax temperature must be > 0")
    z = v.data / float(temperature)
    m = np.max(z, axis=-1, keepdims=True)
    e = np.exp(z - m)
    out = e / np.sum(e, axis=-1, keepdims=True)

    def vjp(g):
        inner = np.sum(g * out, axis=-1, keepdims=True)
        return (out * (g - inner) / float(temperature),)

    return _record(out, (v,), vjp)


def cross_entropy(logits: Tensor, target_probs: np.ndarray) -> Tensor:
    """Mean cross-entropy between softmax(logits) rows and given target rows.

    `target_probs` is a constant distribution per row (soft or one-hot).
    Equals -sum(t * log_softmax(z)) averaged over rows.
    """
    logits = _wrap(logits)
    t = np.asarray(target_probs, dtype=np.float64)
    if t.shape != logits.shape:
        raise ValueError("cross_entropy shape mismatch")
    z = logits.data
    m = np.max(z, axis=-1, keepdims=True)
    lse = m + np.log(np.sum(np.exp(z - m), axis=-1, keepdims=True))
    rows = int(np.prod(z.shape[:-1])) if z.ndim > 1 else 1
    loss = np.sum(lse.squeeze(-1) - np.sum(t * z, axis=-1)) / rows

    def vjp(g):
        p = np.exp(z - lse)
        return (g * (p - t) / rows,)

    return _record(np.asarray(loss), (logits,), vjp)


def smooth_l1(pred: Tensor, target: np.ndarray, beta: float = 1.0) -> Tensor:
    """Mean smooth-L1 distance: quadratic inside +-beta, linear outside."""
    pred = _wrap(pred)
    t = np.asarray(target, dtype=np.float64)
    d = pred.data - t
    ad = np.abs(d)
    elem = np.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta)
    n = d.size
    out = np.asarray(elem.sum() / n)

    def vjp(g):
        return (g * np.clip(d / beta, -1.0, 1.0) / n,)

    return _record(out, (pred,), vjp)


def sum_all(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = np.asarray(a.data.sum())

    def vjp(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), vjp)


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


# ---------------------------------------------------------------------------
# backward pass


def topo_nodes(root: Tensor) -> list[Tensor]:
    """Tensors reachable from `root`, parents before children (iterative DFS)."""
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> None:
    """Accumulate d(loss)/d(leaf) into .grad for every reachable leaf.

    Leaves in `params` that the loss does not touch get zero gradients, so a
    caller can always read .grad after this returns.
    """
    if loss.data.size != 1:
        raise ValueError("backward expects a scalar loss")
    order = topo_nodes(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        if node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if params is not None:
        for p in params:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# serialization: u32 rank, u32 dims, then row-major little-endian f64 payload


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    header = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.astype("<f8").tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    (rank,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    dims = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    count = int(np.prod(dims)) if rank else 1
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=offset)
    offset += 8 * count
    return arr.reshape(dims).astype(np.float64), offset
