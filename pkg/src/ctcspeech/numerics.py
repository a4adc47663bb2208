"""Dense float64 tensors with reverse-mode autodiff on a replayable tape.

Everything is double precision and single-threaded per example; batch
parallelism is the only concurrency this library is designed for. Ops record
onto the innermost active ``GradTape`` and are replayed in reverse by
``backward``.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

MASK_FILL = -1e30  # additive mask value; finite so gradients stay NaN-free

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """A dense float64 array plus autodiff bookkeeping.

    Tensors are immutable by convention once produced by an op; training code
    mutates ``.data`` of leaf parameters only, between forward passes.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # keeps 0-d scalars 0-d
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

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
        if isinstance(other, Tensor):
            raise TypeError("division only by python scalars")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class GradTape:
    """Ordered record of primitive ops, replayed in reverse by ``backward``."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "GradTape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPES.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._nodes)


_TAPES: list[GradTape] = []


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record_op(out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    """Attach ``out`` to the active tape if any input participates in autodiff.

    ``vjp(grad_out)`` must return one gradient array (or None) per input.
    Exposed so other modules can register fused primitives (e.g. CTC loss).
    """
    if _TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPES[-1]._nodes.append(_Node(out, inputs, vjp))
    return out


def backward(loss: Tensor, tape: GradTape, params: Iterable[Tensor] | None = None):
    """Replay ``tape`` in reverse from scalar ``loss``.

    Returns a dict keyed by tensor identity mapping each participating leaf to
    its gradient array. Tensors listed in ``params`` but absent from the graph
    get zero gradients.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape._nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        leaves.pop(id(node.out), None)
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            k = id(inp)
            if k in grads:
                grads[k] = grads[k] + gi
            else:
                grads[k] = gi
                leaves[k] = inp
    result = {leaves[k]: g for k, g in grads.items() if k in leaves}
    if params is not None:
        for p in params:
            if p not in result:
                result[p] = np.zeros_like(p.data)
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / linear algebra primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return record_op(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return record_op(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return record_op(out, (a, b), vjp)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    out = Tensor(a.data * c)
    return record_op(out, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects operands with ndim >= 2")
    out = Tensor(np.matmul(a.data, b.data))

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return record_op(out, (a, b), vjp)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = Tensor(np.transpose(a.data, axes))
    inv = tuple(np.argsort(axes))
    return record_op(out, (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = a.data.shape
    out = Tensor(a.data.reshape(shape))
    return record_op(out, (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return record_op(out, tuple(tensors), vjp)


def embed(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: out[..., :] = table[ids[...], :]."""
    ids = np.asarray(ids, dtype=np.int64)
    out = Tensor(table.data[ids])

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return record_op(out, (table,), vjp)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())
    return record_op(out, (a,), lambda g: (np.broadcast_to(g, a.data.shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(a.data.mean())
    return record_op(
        out, (a,), lambda g: (np.broadcast_to(g / n, a.data.shape).copy(),)
    )


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = Tensor(x * cdf)

    def vjp(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return record_op(out, (a,), vjp)


def masked_fill(a: Tensor, mask: np.ndarray, value: float = MASK_FILL) -> Tensor:
    """Replace entries where ``mask`` is True; gradient flows only elsewhere."""
    mask = np.asarray(mask, dtype=bool)
    out = Tensor(np.where(mask, value, a.data))
    keep = ~mask

    def vjp(g):
        return (_unbroadcast(g * keep, a.data.shape),)

    return record_op(out, (a,), vjp)


# ---------------------------------------------------------------------------
# reductions over the last dimension
# ---------------------------------------------------------------------------


def logsumexp_lastdim(a) -> Tensor:
    """log sum exp over the last axis via max-shift; reduces that axis."""
    a = as_tensor(a)
    if a.data.shape[-1] < 1:
        raise ValueError("logsumexp over an empty last dimension")
    m = a.data.max(axis=-1, keepdims=True)
    ex = np.exp(a.data - m)
    s = ex.sum(axis=-1, keepdims=True)
    out = Tensor((m + np.log(s))[..., 0])
    soft = ex / s

    def vjp(g):
        return (g[..., None] * soft,)

    return record_op(out, (a,), vjp)


def softmax_lastdim(a) -> Tensor:
    a = as_tensor(a)
    if a.data.shape[-1] < 1:
        raise ValueError("softmax over an empty last dimension")
    m = a.data.max(axis=-1, keepdims=True)
    ex = np.exp(a.data - m)
    y = ex / ex.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def vjp(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return record_op(out, (a,), vjp)


def log_softmax_lastdim(a) -> Tensor:
    a = as_tensor(a)
    if a.data.shape[-1] < 1:
        raise ValueError("log_softmax over an empty last dimension")
    m = a.data.max(axis=-1, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = Tensor(shifted - lse)
    soft = np.exp(shifted - lse)

    def vjp(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return record_op(out, (a,), vjp)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = Tensor(xhat * gain.data + bias.data)
    n = x.shape[-1]

    def vjp(g):
        gg = g * gain.data
        dmean = gg.mean(axis=-1, keepdims=True)
        dproj = (gg * xhat).mean(axis=-1, keepdims=True)
        ga = inv * (gg - dmean - xhat * dproj)
        axes = tuple(range(g.ndim - 1))
        return ga, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return record_op(out, (a, gain, bias), vjp)


# ---------------------------------------------------------------------------
# time-axis convolutions (inputs are (B, T, C))
# ---------------------------------------------------------------------------


def conv1d_strided(a: Tensor, w: Tensor, b: Tensor, stride: int = 2) -> Tensor:
    """Full 1-D convolution over time with output length ceil(T/stride).

    ``w`` is (K, C_in, C_out); the input is zero-padded so the output length
    is exactly ceil(T / stride) for kernel K = stride + 1.
    """
    x = a.data
    K, cin, cout = w.data.shape
    B, T, _ = x.shape
    t_out = -(-T // stride)
    pad_l = (K - 1) // 2
    pad_r = max(0, stride * (t_out - 1) + K - pad_l - T)
    xp = np.pad(x, ((0, 0), (pad_l, pad_r), (0, 0)))
    y = np.zeros((B, t_out, cout))
    for k in range(K):
        y += xp[:, k : k + stride * (t_out - 1) + 1 : stride, :] @ w.data[k]
    out = Tensor(y + b.data)

    def vjp(g):
        gx = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for k in range(K):
            sl = slice(k, k + stride * (t_out - 1) + 1, stride)
            gx[:, sl, :] += g @ w.data[k].T
            gw[k] = np.einsum("btc,bto->co", xp[:, sl, :], g)
        gb = g.sum(axis=(0, 1))
        return gx[:, pad_l : pad_l + T, :], gw, gb

    return record_op(out, (a, w, b), vjp)


def depthwise_conv1d(a: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Per-channel 1-D convolution over time, same-length zero padding.

    ``w`` is (K, C) with K odd.
    """
    x = a.data
    K, C = w.data.shape
    if K % 2 != 1:
        raise ValueError("depthwise kernel length must be odd")
    B, T, _ = x.shape
    pad = K // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
    y = np.zeros_like(x)
    for k in range(K):
        y += xp[:, k : k + T, :] * w.data[k]
    out = Tensor(y + b.data)

    def vjp(g):
        gx = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for k in range(K):
            gx[:, k : k + T, :] += g * w.data[k]
            gw[k] = (xp[:, k : k + T, :] * g).sum(axis=(0, 1))
        gb = g.sum(axis=(0, 1))
        return gx[:, pad : pad + T, :], gw, gb

    return record_op(out, (a, w, b), vjp)


# ---------------------------------------------------------------------------
# verification harness
# ---------------------------------------------------------------------------


def finite_difference_check(
    f: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    samples_per_param: int = 5,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f(params)`` must be deterministic and return a scalar Tensor. Up to
    ``samples_per_param`` coordinates of each parameter are probed.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    rng = rng or np.random.default_rng(0)
    with GradTape() as tape:
        loss = f(params)
    grads = backward(loss, tape, params=params)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        gflat = grads[p].reshape(-1)
        n = flat.size
        if n <= samples_per_param:
            idxs = range(n)
        else:
            idxs = rng.choice(n, size=samples_per_param, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(params).data)
            flat[i] = orig - eps
            fm = float(f(params).data)
            flat[i] = orig
            fd = (fp - fm) / (2.0 * eps)
            err = abs(gflat[i] - fd) / max(1e-8, abs(fd))
            worst = max(worst, err)
    return worst


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    """Parameter-free sinusoidal position table of shape (length, dim)."""
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angles = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(angles[:, 0::2])
    table[:, 1::2] = np.cos(angles[:, 1::2])
    return table
