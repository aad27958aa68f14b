"""Dense float64 tensors with a reverse-mode gradient tape.

Layout is channel-last (H x W x C) everywhere. Every op that touches a
tensor with ``requires_grad`` appends a node to the active tape;
:func:`backward` replays those nodes once, newest first, then clears the tape.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

LAYERNORM_EPS = 1e-5


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class TapeError(RuntimeError):
    """Raised on invalid backward usage."""


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple["Tensor", ...]
    output: "Tensor"
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    generation: int


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)
    generation: int = 0
    enabled: bool = True

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def reset(self) -> None:
        self.nodes.clear()
        self.generation += 1


_TAPE = Tape()


def get_tape() -> Tape:
    return _TAPE


def reset_tape() -> None:
    _TAPE.reset()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _TAPE.enabled
    _TAPE.enabled = False
    try:
        yield
    finally:
        _TAPE.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if any(s <= 0 for s in arr.shape):
            raise ValueError(f"non-positive extent in shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor created with non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(
    op: str,
    out: np.ndarray,
    inputs: Sequence[Tensor],
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap ``out`` as the result of ``op`` and record it if any input needs grad."""
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op} produced non-finite values")
    res = Tensor.__new__(Tensor)
    res.data = np.asarray(out, dtype=np.float64)
    res.grad = None
    res._node = None
    res.requires_grad = False
    if _TAPE.enabled and any(t.requires_grad for t in inputs):
        res.requires_grad = True
        node = Node(op, tuple(inputs), res, backward, _TAPE.generation)
        res._node = node
        _TAPE.record(node)
    return res


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires grad, then reset the tape."""
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss._node
    if not _TAPE.nodes or node is None or node.generation != _TAPE.generation:
        raise TapeError("loss is not on the active tape (backward twice or no forward?)")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for n in reversed(_TAPE.nodes):
        g = grads.pop(id(n.output), None)
        if g is None:
            continue
        for inp, gi in zip(n.inputs, n.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi
    _TAPE.reset()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    """Hadamard product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    return make_op(
        "mul", a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


hadamard = mul


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return make_op(
        "div", out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return make_op("neg", -a.data, (a,), lambda g: (-g,))


def tabs(a: Tensor) -> Tensor:
    # subgradient 0 at exact zero
    return make_op("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def texp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow is reported by make_op
        out = np.exp(a.data)
    return make_op("exp", out, (a,), lambda g: (g * out,))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)
    return make_op("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def silu(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)
    x = a.data
    return make_op("silu", x * s, (a,), lambda g: (g * (s + x * s * (1.0 - s)),))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0.0, x)
    return make_op("softplus", out, (a,), lambda g: (g * _sigmoid_np(x),))


# ---------------------------------------------------------------- reductions


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for ndim {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(out))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_op("sum", out, (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes]))
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return make_op("mean", out, (a,), bw)


def _extreme(a: Tensor, axis, keepdims: bool, kind: str) -> Tensor:
    """max/min over ``axis``; gradient goes to the first extreme index only."""
    axes = _norm_axes(axis, a.ndim)
    if any(a.shape[i] < 1 for i in axes):
        raise ValueError("cannot reduce an empty axis")
    keep = [i for i in range(a.ndim) if i not in axes]
    moved = np.transpose(a.data, keep + list(axes))
    flat = moved.reshape(moved.shape[: len(keep)] + (-1,))
    idx = np.argmax(flat, axis=-1) if kind == "max" else np.argmin(flat, axis=-1)
    val = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    out_shape = tuple(1 if i in axes else a.shape[i] for i in range(a.ndim))
    out = val.reshape(out_shape) if keepdims else val

    def bw(g):
        g = np.asarray(g).reshape(val.shape)
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        gmoved = gflat.reshape(moved.shape)
        return (np.transpose(gmoved, np.argsort(keep + list(axes))),)

    return make_op(kind, out, (a,), bw)


def tmax(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _extreme(a, axis, keepdims, "max")


def tmin(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _extreme(a, axis, keepdims, "min")


def reduce_pool(a: Tensor, axis: str, kind: str) -> Tensor:
    """Global pooling of an H x W x C map.

    ``axis="channel"`` reduces C and yields H x W x 1; ``axis="spatial"``
    reduces H and W and yields 1 x 1 x C.
    """
    if a.ndim != 3:
        raise ValueError(f"reduce_pool expects H x W x C, got {a.shape}")
    axes = {"channel": (2,), "spatial": (0, 1)}[axis]
    if kind == "max":
        return tmax(a, axes, keepdims=True)
    if kind == "avg":
        return mean(a, axes, keepdims=True)
    raise ValueError(f"unknown pool kind {kind!r}")


# ---------------------------------------------------------------- structural


def reshape(a: Tensor, shape) -> Tensor:
    return make_op("reshape", a.data.reshape(shape).copy(), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_op(
        "transpose", np.transpose(a.data, axes).copy(), (a,),
        lambda g: (np.transpose(g, inv),),
    )


def flip(a: Tensor, axis) -> Tensor:
    return make_op("flip", np.flip(a.data, axis).copy(), (a,), lambda g: (np.flip(g, axis).copy(),))


def index(a: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing; advanced indexing is not supported."""
    out = a.data[key]

    def bw(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return make_op("index", np.array(out, dtype=np.float64), (a,), bw)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise ValueError(f"axis {axis} out of range")
    axis %= a.ndim
    key = [slice(None)] * a.ndim
    key[axis] = slice(start, stop)
    return index(a, tuple(key))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of nothing")
    ndim = tensors[0].ndim
    if not -ndim <= axis < ndim:
        raise ValueError(f"axis {axis} out of range for ndim {ndim}")
    axis %= ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            t.shape[i] != ref[i] for i in range(ndim) if i != axis
        ):
            raise ValueError(f"concat shape conflict: {ref} vs {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        return [
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
            for i in range(len(tensors))
        ]

    return make_op("concat", out, tensors, bw)


def pad_trailing(a: Tensor, axis: int, amount: int = 1) -> Tensor:
    """Append ``amount`` zero slices at the end of ``axis``."""
    shape = list(a.shape)
    shape[axis] = amount
    return concat([a, Tensor(np.zeros(shape))], axis=axis)


# ---------------------------------------------------------------- layers


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x[..., Cin] @ weight[Cin, Cout] (+ bias[Cout])."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear shape mismatch: x {x.shape}, W {weight.shape}")
    out = x.data @ weight.data
    inputs: list[Tensor] = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ValueError(f"bias shape {bias.shape} != ({weight.shape[1]},)")
        out = out + bias.data
        inputs.append(bias)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        grads = [g @ weight.data.T, x2.T @ g2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return make_op("linear", out, inputs, bw)


def _conv_offsets(k: int):
    return [(i, j) for i in range(k) for j in range(k)]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, mode: str = "pointwise") -> Tensor:
    """2D convolution on an H x W x Cin map, zero padded to keep H x W.

    Weight layouts:
      pointwise: (Cin, Cout)
      depthwise: (k, k, C), one filter per channel, Cout = Cin
      dense:     (k, k, Cin, Cout)
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3:
        raise ValueError(f"conv2d expects H x W x C input, got {x.shape}")
    if mode == "pointwise":
        if weight.ndim != 2:
            raise ValueError(f"pointwise weight must be (Cin, Cout), got {weight.shape}")
        return linear(x, weight, bias)
    H, W, cin = x.shape
    if mode == "depthwise":
        if weight.ndim != 3 or weight.shape[2] != cin or weight.shape[0] != weight.shape[1]:
            raise ValueError(f"depthwise weight must be (k, k, {cin}), got {weight.shape}")
        cout = cin
    elif mode == "dense":
        if weight.ndim != 4 or weight.shape[2] != cin or weight.shape[0] != weight.shape[1]:
            raise ValueError(f"dense weight must be (k, k, {cin}, Cout), got {weight.shape}")
        cout = weight.shape[3]
    else:
        raise ValueError(f"unknown conv mode {mode!r}")
    k = weight.shape[0]
    if k % 2 != 1:
        raise ValueError("kernel size must be odd")
    p = k // 2
    xp = np.pad(x.data, ((p, p), (p, p), (0, 0)))
    w = weight.data
    out = np.zeros((H, W, cout))
    for i, j in _conv_offsets(k):
        win = xp[i : i + H, j : j + W, :]
        out += win * w[i, j] if mode == "depthwise" else win @ w[i, j]
    inputs: list[Tensor] = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ValueError(f"bias shape {bias.shape} != ({cout},)")
        out = out + bias.data
        inputs.append(bias)

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w)
        for i, j in _conv_offsets(k):
            win = xp[i : i + H, j : j + W, :]
            if mode == "depthwise":
                gxp[i : i + H, j : j + W, :] += g * w[i, j]
                gw[i, j] = (win * g).sum(axis=(0, 1))
            else:
                gxp[i : i + H, j : j + W, :] += g @ w[i, j].T
                gw[i, j] = win.reshape(-1, cin).T @ g.reshape(-1, cout)
        grads = [gxp[p : p + H, p : p + W, :], gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1)))
        return grads

    return make_op(f"conv2d_{mode}", out, inputs, bw)


def layernorm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
              eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize over the last axis, then apply the per-channel affine."""
    x = as_tensor(x)
    c = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    g_arr = np.ones(c) if gamma is None else as_tensor(gamma).data
    b_arr = np.zeros(c) if beta is None else as_tensor(beta).data
    if g_arr.shape != (c,) or b_arr.shape != (c,):
        raise ValueError("layernorm affine must have one entry per channel")
    out = xhat * g_arr + b_arr
    inputs = [x]
    if gamma is not None:
        inputs.append(gamma)
    if beta is not None:
        inputs.append(beta)

    def bw(g):
        gxhat = g * g_arr
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        lead = tuple(range(g.ndim - 1))
        if gamma is not None:
            grads.append((g * xhat).sum(axis=lead))
        if beta is not None:
            grads.append(g.sum(axis=lead))
        return grads

    return make_op("layernorm", out, inputs, bw)


# ---------------------------------------------------------------- checking


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, step: float = 1e-5,
                   indices: Sequence[int] | None = None,
                   weights: np.ndarray | None = None) -> np.ndarray:
    """Central differences of ``sum(weights * fn())`` w.r.t. entries of ``t``.

    Output vectors are differenced before the weighted reduction (with
    ``math.fsum``) so cancellation in the reduction adds no round-off.
    """
    flat = t.data.reshape(-1)
    out = np.zeros(flat.size)
    todo = range(flat.size) if indices is None else indices
    with no_grad():
        for i in todo:
            orig = flat[i]
            flat[i] = orig + step
            fp = fn().data
            flat[i] = orig - step
            fm = fn().data
            flat[i] = orig
            diff = fp - fm if weights is None else (fp - fm) * weights
            out[i] = math.fsum(np.ravel(diff)) / (2 * step)
    return out.reshape(t.shape)


def probe_weights(shape: tuple[int, ...], seed: int = 99) -> np.ndarray:
    """Seeded weights in [0.5, 1.5], divided by the element count (a weighted mean)."""
    w = np.random.default_rng(seed).uniform(0.5, 1.5, size=shape)
    return w / w.size


def gradcheck(fn: Callable[[], Tensor], wrt: Sequence[Tensor], step: float = 1e-5,
              max_per_tensor: int | None = None, seed: int = 0) -> float:
    """Max relative error |auto - fd| / (|fd| + 1e-8) over checked entries.

    The checked scalar is a seeded weighted mean of ``fn()``'s output.
    ``fn`` must rebuild its graph from the current ``wrt`` data on every call.
    With ``max_per_tensor`` only a seeded random subset of entries is probed.
    """
    rng = np.random.default_rng(seed)
    for t in wrt:
        t.requires_grad = True
        t.grad = None
    reset_tape()
    out = fn()
    w = probe_weights(out.shape)
    backward(tsum(out * w))
    worst = 0.0
    for t in wrt:
        auto = np.zeros(t.shape) if t.grad is None else t.grad
        idx = None
        if max_per_tensor is not None and t.size > max_per_tensor:
            idx = rng.choice(t.size, size=max_per_tensor, replace=False)
        fd = numerical_grad(fn, t, step, idx, w)
        a, f = auto.reshape(-1), fd.reshape(-1)
        sel = np.arange(t.size) if idx is None else idx
        err = np.abs(a[sel] - f[sel]) / (np.abs(f[sel]) + 1e-8)
        worst = max(worst, float(err.max()))
    return worst
