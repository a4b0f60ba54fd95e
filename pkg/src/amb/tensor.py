"""Dense tensors with a single-use reverse-mode gradient tape.

Every differentiable operation takes :class:`Tensor` inputs, computes its
result with numpy, and, when a :class:`Tape` is active and some input needs a
gradient, appends a node holding a backward closure.  ``Tape.backward`` then
walks the nodes once in reverse order.

    >>> w = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = reduce_sum(matmul(w, Tensor([[3.0], [4.0]])))
    >>> tape.backward(loss)[w].tolist()
    [[3.0, 4.0]]
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
LOG_CLAMP = 1e-12
MASK_FILL = -1e9


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Misuse of the gradient tape (non-scalar loss, reuse, ...)."""


class Tensor:
    """An n-dimensional real array that can take part in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        arr = np.array(data, dtype=dtype)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None
        self._node: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def tape_node(self) -> int | None:
        return self._node

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, index): return slice_(self, index)


@dataclass
class _Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_ACTIVE: list["Tape"] = []


class Tape:
    """Records operations in execution order; usable for exactly one backward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.used = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def record(self, inputs: tuple[Tensor, ...], output: Tensor, backward) -> None:
        if self.used:
            raise TapeError("tape already consumed by backward(); record on a fresh tape")
        output._tape = self
        output._node = len(self.nodes)
        output.requires_grad = True
        self.nodes.append(_Node(inputs, output, backward))

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        """Propagate d(loss)/d(.) to every requires_grad leaf.

        Returns a map from leaf tensor to its gradient.  Leaves listed in
        ``params`` that the loss does not depend on get zero gradients.  The
        gradients are also stored on ``leaf.grad``.
        """
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self.used:
            raise TapeError("backward() already called on this tape")
        if loss._tape is not self:
            raise TapeError("loss was not recorded on this tape")
        self.used = True

        node_grads: dict[int, np.ndarray] = {loss._node: np.ones(loss.shape, dtype=loss.dtype)}
        leaf_grads: dict[Tensor, np.ndarray] = {}
        for idx in range(loss._node, -1, -1):
            g = node_grads.pop(idx, None)
            if g is None:
                continue
            node = self.nodes[idx]
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._tape is self:
                    prev = node_grads.get(inp._node)
                    node_grads[inp._node] = gi if prev is None else prev + gi
                elif inp._tape is None:
                    prev = leaf_grads.get(inp)
                    leaf_grads[inp] = gi if prev is None else prev + gi
        if params is not None:
            for p in params:
                if p not in leaf_grads:
                    leaf_grads[p] = np.zeros_like(p.data)
        for leaf, g in leaf_grads.items():
            leaf.grad = g.astype(leaf.dtype, copy=False)
        return leaf_grads


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Run the backward pass of the tape that recorded ``loss``."""
    if loss._tape is None:
        raise TapeError("loss is not attached to a tape")
    return loss._tape.backward(loss, params)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out.name = None
    out._tape = None
    out._node = None
    if _ACTIVE and any(t.requires_grad for t in inputs):
        _ACTIVE[-1].record(inputs, out, backward)
    return out


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    elif not isinstance(a, Tensor):
        a, b = Tensor(a), Tensor(b)
    return a, b


def _broadcast_shape(sa: tuple[int, ...], sb: tuple[int, ...]) -> tuple[int, ...]:
    # scalar operands, or shapes aligned from the trailing end where each dim matches or is 1
    n = max(len(sa), len(sb))
    pa = (1,) * (n - len(sa)) + sa
    pb = (1,) * (n - len(sb)) + sb
    out = []
    for x, y in zip(pa, pb):
        if x != y and x != 1 and y != 1:
            raise DimensionError(f"cannot broadcast shapes {sa} and {sb}")
        out.append(max(x, y))
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    keep = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape(a.shape, b.shape)
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape(a.shape, b.shape)
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape(a.shape, b.shape)
    return _emit(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _emit(y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _emit(y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _emit(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    """Natural log of ``max(a, 1e-12)``; clamped entries get zero gradient."""
    x = np.maximum(a.data, LOG_CLAMP)
    live = a.data >= LOG_CLAMP
    return _emit(np.log(x), (a,), lambda g: (np.where(live, g / x, 0.0).astype(a.dtype),))


def square(a: Tensor) -> Tensor:
    return _emit(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def mask_fill(a: Tensor, mask, value: float = MASK_FILL) -> Tensor:
    """Replace entries where ``mask`` is 0/False with ``value``."""
    keep = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    return _emit(np.where(keep, a.data, np.asarray(value, dtype=a.dtype)), (a,),
                 lambda g: (np.where(keep, g, 0.0).astype(g.dtype),))


# ---------------------------------------------------------------------------
# reductions and normalisation


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(ax % ndim for ax in axes)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    y = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims and axes is not None:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit(np.asarray(y, dtype=a.dtype), (a,), bw)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = a.data.size if axes is None else int(np.prod([a.shape[ax] for ax in axes]))
    s = reduce_sum(a, axis=axis, keepdims=keepdims)
    return mul(s, np.asarray(1.0 / count, dtype=a.dtype))


def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    y = _softmax_np(a.data, axis)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit(y, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra and structure


def matmul(a, b) -> Tensor:
    """``a @ b`` for ``a: [..., m, k]`` and ``b: [k, n]`` or ``b: [..., k, n]``.

    Leading batch dims must match exactly when both operands carry them;
    a 2-D ``b`` is shared across the batch of ``a``.
    """
    a, b = _coerce(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        if not (a.ndim == 2 or a.shape[:-2] == b.shape[:-2]):
            raise DimensionError(f"matmul batch dimensions differ: {a.shape} x {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit(a.data @ b.data, (a, b), bw)


def reshape(a: Tensor, shape) -> Tensor:
    y = a.data.reshape(shape)
    return _emit(y, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = np.argsort(axes)
    return _emit(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def expand_dims(a: Tensor, axis: int) -> Tensor:
    return reshape(a, np.expand_dims(a.data, axis).shape)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise DimensionError(f"concat shapes differ off axis {axis}: {[t.shape for t in tensors]}")
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    y = np.concatenate([t.data for t in tensors], axis=ax)
    return _emit(y, tuple(tensors), lambda g: tuple(np.split(g, sizes, axis=ax)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shape = tensors[0].shape
    if any(t.shape != shape for t in tensors):
        raise DimensionError(f"stack needs equal shapes, got {[t.shape for t in tensors]}")
    y = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % y.ndim
    return _emit(y, tuple(tensors),
                 lambda g: tuple(np.take(g, i, axis=ax) for i in range(len(tensors))))


def slice_(a: Tensor, index) -> Tensor:
    y = a.data[index]

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _emit(np.array(y, dtype=a.dtype), (a,), bw)


def scatter(a: Tensor, index, size: int, axis: int = 0) -> Tensor:
    """Place the slices of ``a`` along ``axis`` at positions ``index`` of a
    zero tensor whose ``axis`` has length ``size``."""
    index = np.asarray(index, dtype=np.int64)
    ax = axis % a.ndim
    if a.shape[ax] != len(index):
        raise DimensionError(f"scatter: {len(index)} indices for axis of length {a.shape[ax]}")
    sel = (slice(None),) * ax + (index,)
    out = np.zeros(a.shape[:ax] + (size,) + a.shape[ax + 1:], dtype=a.dtype)
    out[sel] = a.data
    return _emit(out, (a,), lambda g: (g[sel],))


def embedding(table: Tensor, ids, pad_id: int | None = 0) -> Tensor:
    """Row lookup ``table[ids]``; the pad row never receives gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"ids out of range for table of {table.shape[0]} rows")

    def bw(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        if pad_id is not None:
            out[pad_id] = 0.0
        return (out,)

    return _emit(table.data[ids], (table,), bw)


def gradient_reversal(a: Tensor, scale: float = 1.0) -> Tensor:
    """Identity forward; backward multiplies the incoming gradient by ``-scale``."""
    if scale < 0:
        raise ValueError(f"reversal scale must be >= 0, got {scale}")
    return _emit(a.data.copy(), (a,), lambda g: (-scale * g,))


def stop_gradient(a: Tensor) -> Tensor:
    """Same values, detached from the tape."""
    return Tensor(a.data, dtype=a.dtype)


# ---------------------------------------------------------------------------
# fused recurrent layer


def lstm(x: Tensor, mask, w_x: Tensor, w_h: Tensor, bias: Tensor, reverse: bool = False) -> Tensor:
    """Masked single-direction LSTM.

    Unbranched: ``x: [N, T, D]``, ``w_x: [D, 4H]``, ``w_h: [H, 4H]``,
    ``bias: [4H]`` gives ``[N, T, H]``.  Branched parameters carry a leading
    axis K (``w_x: [K, D, 4H]`` ...); ``x`` is then shared ``[N, T, D]`` or
    per-branch ``[K, N, T, D]`` and the output is ``[K, N, T, H]``.

    Gate order along 4H is input, forget, cell, output.  ``mask: [N, T]``
    must be a prefix mask (real steps first).  Past a row's length the
    forward direction carries its last state and the reverse direction
    stays at the zero initial state, so padding never reaches real steps.
    """
    branched = w_x.ndim == 3
    wx = w_x.data if branched else w_x.data[None]
    wh = w_h.data if branched else w_h.data[None]
    bb = bias.data if branched else bias.data[None]
    k, d_in, four_h = wx.shape
    hid = four_h // 4
    shared_x = x.ndim == 3
    if (x.shape[-1] != d_in or wh.shape != (k, hid, four_h) or bb.shape != (k, four_h)
            or (not shared_x and (not branched or x.shape[0] != k))):
        raise DimensionError(
            f"lstm shapes disagree: x {x.shape}, w_x {w_x.shape}, w_h {w_h.shape}, bias {bias.shape}")
    xd = np.broadcast_to(x.data, (k,) + x.shape) if shared_x else x.data
    _, n, steps, _ = xd.shape
    m = np.asarray(mask)
    if m.shape != (n, steps):
        raise DimensionError(f"lstm mask shape {m.shape} does not match input {x.shape}")
    lengths = (m != 0).sum(axis=1)
    if not np.array_equal(m != 0, np.arange(steps)[None, :] < lengths[:, None]):
        raise ValueError("lstm mask must be a prefix mask (real steps before padding)")

    # rows sorted by length, longest first: at step t the live rows are a prefix
    perm = np.argsort(-lengths, kind="stable")
    inv = np.argsort(perm, kind="stable")
    live = (lengths[perm][None, :] > np.arange(steps)[:, None]).sum(axis=1)
    # time-major buffers keep every per-step slice contiguous
    xs = np.ascontiguousarray(np.moveaxis(xd[:, perm], 2, 0))          # [T, K, N, D]
    xp = xs @ wx + bb[:, None, :]                                      # [T, K, N, 4H]
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    h = np.zeros((k, n, hid), dtype=xd.dtype)
    c = np.zeros_like(h)
    hs = np.zeros((steps, k, n, hid), dtype=xd.dtype)
    h_prev = np.zeros_like(hs)
    c_prev = np.zeros_like(hs)
    gates = np.zeros_like(xp)   # sigmoid(i), sigmoid(f), tanh(g), sigmoid(o)
    tanh_c = np.zeros_like(hs)
    for t in order:
        r = live[t]
        h_prev[t, :, :r] = h[:, :r]
        c_prev[t, :, :r] = c[:, :r]
        z = xp[t, :, :r] + h[:, :r] @ wh
        gt = _sigmoid(z)
        gt[..., 2 * hid:3 * hid] = np.tanh(z[..., 2 * hid:3 * hid])
        gates[t, :, :r] = gt
        c_new = gt[..., hid:2 * hid] * c[:, :r] + gt[..., :hid] * gt[..., 2 * hid:3 * hid]
        tc = np.tanh(c_new)
        tanh_c[t, :, :r] = tc
        c[:, :r] = c_new
        h[:, :r] = gt[..., 3 * hid:] * tc
        hs[t] = h
    out = np.moveaxis(hs, 0, 2)[:, inv]

    def bw(g_out):
        if not branched:
            g_out = g_out[None]
        # forward carries h past a row's end, so those output gradients flow back into the last real step
        g_hs = np.moveaxis(g_out[:, perm], 2, 0)
        g_xp = np.zeros_like(xp)
        dh = np.zeros((k, n, hid), dtype=xd.dtype)
        dc = np.zeros_like(dh)
        wh_t = np.swapaxes(wh, -1, -2)
        for t in reversed(order):
            r = live[t]
            dh += g_hs[t]
            gt = gates[t, :, :r]
            i, f, gg, o = gt[..., :hid], gt[..., hid:2 * hid], gt[..., 2 * hid:3 * hid], gt[..., 3 * hid:]
            tc = tanh_c[t, :, :r]
            dh_r = dh[:, :r]
            dc_r = dc[:, :r] + dh_r * o * (1.0 - tc * tc)
            dz = g_xp[t, :, :r]
            dz[..., :hid] = dc_r * gg * i * (1.0 - i)
            dz[..., hid:2 * hid] = dc_r * c_prev[t, :, :r] * f * (1.0 - f)
            dz[..., 2 * hid:3 * hid] = dc_r * i * (1.0 - gg * gg)
            dz[..., 3 * hid:] = dh_r * tc * o * (1.0 - o)
            dh[:, :r] = dz @ wh_t
            dc[:, :r] = dc_r * f
        g_flat = np.moveaxis(g_xp, 0, 1).reshape(k, -1, four_h)
        g_wh = np.swapaxes(np.moveaxis(h_prev, 0, 1).reshape(k, -1, hid), -1, -2) @ g_flat
        g_wx = np.swapaxes(np.moveaxis(xs, 0, 1).reshape(k, -1, d_in), -1, -2) @ g_flat
        g_b = g_xp.sum(axis=(0, 2))
        g_x = np.moveaxis(g_xp @ np.swapaxes(wx, -1, -2), 0, 2)[:, inv]
        if shared_x:
            g_x = g_x.sum(axis=0)
        if not branched:
            g_wx, g_wh, g_b = g_wx[0], g_wh[0], g_b[0]
        return g_x, g_wx, g_wh, g_b

    return _emit(out if branched else out[0], (x, w_x, w_h, bias), bw)
