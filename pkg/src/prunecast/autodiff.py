"""Dense f64 tensors with a reverse-mode gradient tape.

The tape records every operation applied to watched tensors and, on
``backward``, produces gradients for all reachable nodes, parameters and
channel-mask vectors alike. Broadcasting is deliberately restricted to a
leading batch dimension: two operands are compatible iff their shapes are
equal or one shape is a trailing suffix of the other.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError, TapeError

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class Tensor:
    """A dense float64 array, optionally attached to one gradient tape."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape: "Tape | None" = None, node_id: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def requires_grad(self) -> bool:
        return self.node_id is not None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f", node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={self.shape}{tag})"


class _Node:
    __slots__ = ("inputs", "backward")

    def __init__(self, inputs: tuple[int, ...], backward: Callable):
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Append-only record of operations; inputs always precede their node.

    A tape supports exactly one ``backward`` call. Gradients are retained
    for every node reached by the sweep (interior activations included),
    which is what per-sample mask-gradient extraction relies on.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.grads: dict[int, np.ndarray] = {}
        self._backward_done = False

    def watch(self, value) -> Tensor:
        """Register a leaf tensor whose gradient should be tracked."""
        data = value.data if isinstance(value, Tensor) else value
        t = Tensor(data)
        t.tape = self
        t.node_id = self._add_node((), None)
        return t

    def _add_node(self, inputs: tuple[int, ...], backward: Callable | None) -> int:
        self.nodes.append(_Node(inputs, backward))
        return len(self.nodes) - 1

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss)=1 and sweep the tape in reverse."""
        if loss.tape is not self or loss.node_id is None:
            raise TapeError("loss tensor is not attached to this tape")
        if loss.data.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.data.shape}")
        if self._backward_done:
            raise TapeError("backward was already called on this tape")
        self._backward_done = True

        self.grads[loss.node_id] = np.ones_like(loss.data)
        for nid in range(loss.node_id, -1, -1):
            g = self.grads.get(nid)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.backward is None:
                continue
            for in_id, in_grad in zip(node.inputs, node.backward(g)):
                if in_grad is None:
                    continue
                acc = self.grads.get(in_id)
                self.grads[in_id] = in_grad if acc is None else acc + in_grad

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient of the last backward's loss w.r.t. ``t`` (zeros if unreached)."""
        if t.tape is not self or t.node_id is None:
            raise TapeError("tensor is not watched by this tape")
        g = self.grads.get(t.node_id)
        return np.zeros_like(t.data) if g is None else g


def constant(value) -> Tensor:
    """A tensor that never receives gradients."""
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(inputs: Sequence[Tensor], out_data: np.ndarray, backward: Callable) -> Tensor:
    """Attach ``out_data`` to the tape shared by any tracked input.

    ``backward(g)`` must return one gradient per input, positionally;
    gradients of untracked inputs are computed and discarded (cheap at
    desk scale, keeps op implementations uniform).
    """
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise TapeError("operands belong to different tapes")
            tape = t.tape
    out = Tensor(out_data)
    if tape is not None:
        positions = tuple(i for i, t in enumerate(inputs) if t.tape is tape)
        node_ids = tuple(inputs[i].node_id for i in positions)

        def node_backward(g, _bw=backward, _pos=positions):
            grads = _bw(g)
            return [grads[i] for i in _pos]

        out.tape = tape
        out.node_id = tape._add_node(node_ids, node_backward)
    return out


def _broadcast_check(a_shape, b_shape, op: str):
    """Allow equal shapes or a trailing-suffix match (leading batch dims)."""
    if a_shape == b_shape:
        return
    small, big = sorted((a_shape, b_shape), key=len)
    if len(small) == len(big) or big[len(big) - len(small):] != small:
        raise ShapeError(f"{op}: shapes {a_shape} and {b_shape} only broadcast "
                         "over leading batch dimensions")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(range(g.ndim - len(shape)))
    return g.sum(axis=axes)


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_check(a.shape, b.shape, "add")

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _record([a, b], a.data + b.data, bw)


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_check(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return _reduce_to(g * bd, a.shape), _reduce_to(g * ad, b.shape)

    return _record([a, b], ad * bd, bw)


def scale(a, c: float) -> Tensor:
    a = constant(a)
    c = float(c)
    return _record([a], a.data * c, lambda g: (g * c,))


def sub(a, b) -> Tensor:
    return add(a, scale(b, -1.0))


def matmul(a, b) -> Tensor:
    """Matrix product; supports (m,k)@(k,n), (...,m,k)@(k,n) and batched
    (...,m,k)@(...,k,n) with identical leading dimensions."""
    a, b = constant(a), constant(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs 2-D+ operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {ad.shape} vs {bd.shape}")
    if bd.ndim == 2:
        def bw(g):
            da = g @ bd.swapaxes(-1, -2)
            db = np.tensordot(ad, g, axes=(tuple(range(ad.ndim - 1)),
                                           tuple(range(g.ndim - 1))))
            return da, db
    else:
        if ad.shape[:-2] != bd.shape[:-2]:
            raise ShapeError(f"matmul batch dimensions disagree: {ad.shape} vs {bd.shape}")

        def bw(g):
            return g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g

    return _record([a, b], ad @ bd, bw)


def transpose_last2(a) -> Tensor:
    a = constant(a)
    return _record([a], a.data.swapaxes(-1, -2).copy(),
                   lambda g: (g.swapaxes(-1, -2),))


def reshape(a, shape) -> Tensor:
    a = constant(a)
    old = a.shape
    return _record([a], a.data.reshape(shape), lambda g: (g.reshape(old),))


def relu(a) -> Tensor:
    a = constant(a)
    pos = a.data > 0.0
    return _record([a], np.where(pos, a.data, 0.0), lambda g: (g * pos,))


def gelu(a) -> Tensor:
    """GELU, tanh form: x * 0.5 * (1 + tanh(sqrt(2/pi)(x + 0.044715 x^3)))."""
    a = constant(a)
    x = a.data
    t = np.tanh(_GELU_C * (x + _GELU_A * x ** 3))

    def bw(g):
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * _GELU_C * (1.0 + 3.0 * _GELU_A * x ** 2)
        return (g * d,)

    return _record([a], 0.5 * x * (1.0 + t), bw)


def softmax_rows(a) -> Tensor:
    """Softmax along the last axis, stabilized by row-max subtraction."""
    a = constant(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record([a], y, bw)


def layer_norm(a, gain, offset, eps: float) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    a, gain, offset = constant(a), constant(gain), constant(offset)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    gd = gain.data

    def bw(g):
        gy = g * gd
        dx = inv * (gy - gy.mean(axis=-1, keepdims=True)
                    - y * (gy * y).mean(axis=-1, keepdims=True))
        dgain = _reduce_to(g * y, gain.shape)
        doffset = _reduce_to(g, offset.shape)
        return dx, dgain, doffset

    return _record([a, gain, offset], y * gd + offset.data, bw)


def rms_norm(a, gain, eps: float) -> Tensor:
    """Scale the last axis by its root-mean-square, then gain."""
    if eps <= 0:
        raise ValueError("rms_norm eps must be positive")
    a, gain = constant(a), constant(gain)
    x = a.data
    r = np.sqrt((x ** 2).mean(axis=-1, keepdims=True) + eps)
    y = x / r
    gd = gain.data

    def bw(g):
        gy = g * gd
        dx = gy / r - x * (gy * x).mean(axis=-1, keepdims=True) / r ** 3
        return dx, _reduce_to(g * y, gain.shape)

    return _record([a, gain], y * gd, bw)


def mse_loss(pred, target) -> Tensor:
    """Mean of squared differences over every element; scalar output."""
    pred, target = constant(pred), constant(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def bw(g):
        d = g * (2.0 / n) * diff
        return d, -d

    return _record([pred, target], np.asarray((diff * diff).mean()), bw)


def slice_last(a, start: int, stop: int) -> Tensor:
    a = constant(a)
    width = a.shape[-1]

    def bw(g):
        z = np.zeros(a.shape)
        z[..., start:stop] = g
        return (z,)

    return _record([a], a.data[..., start:stop].copy(), bw)


def concat_last(parts: Sequence) -> Tensor:
    parts = [constant(p) for p in parts]
    widths = [p.shape[-1] for p in parts]
    offs = np.cumsum([0] + widths)

    def bw(g):
        return tuple(g[..., offs[i]:offs[i + 1]] for i in range(len(parts)))

    return _record(parts, np.concatenate([p.data for p in parts], axis=-1), bw)


def gather_last(a, idx: np.ndarray) -> Tensor:
    """Select columns of the last axis; indices must be unique."""
    a = constant(a)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size != np.unique(idx).size:
        raise ValueError("gather_last indices must be unique")

    def bw(g):
        z = np.zeros(a.shape)
        z[..., idx] = g
        return (z,)

    return _record([a], a.data[..., idx], bw)


def scatter_last(a, idx: np.ndarray, width: int) -> Tensor:
    """Place columns into a zero tensor of the given trailing width."""
    a = constant(a)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size != np.unique(idx).size:
        raise ValueError("scatter_last indices must be unique")
    out = np.zeros(a.shape[:-1] + (width,))
    out[..., idx] = a.data
    return _record([a], out, lambda g: (g[..., idx],))


def take_token(a, index: int) -> Tensor:
    """Select one position along the token axis (axis -2)."""
    a = constant(a)

    def bw(g):
        z = np.zeros(a.shape)
        z[..., index, :] = g
        return (z,)

    return _record([a], a.data[..., index, :].copy(), bw)
