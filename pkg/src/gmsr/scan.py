"""Selective (input-dependent) diagonal state-space scan.

Per channel d and state index n::

    h_t = exp(delta_t[d] * A[d, n]) * h_{t-1} + delta_t[d] * B_t[n] * x_t[d]
    y_t[d] = sum_n C_t[n] * h_t[d, n] + D[d] * x_t[d]

with h_0 = 0. ``delta``, ``B`` and ``C`` are produced from the tokens
themselves. The recurrence is a first-order linear one, so it can be run
either as a plain loop or as a work-efficient (Blelloch) prefix scan over
pairs ``(a, b)`` composed with :func:`combine`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .params import ParamSpec, init_params
from .tensor import Tensor

DEFAULT_STATE_SIZE = 16


@dataclass
class ScanParams:
    """Learnable parameters of one scan route.

    ``A = -exp(a_log)`` is kept strictly negative by construction.
    """

    a_log: Tensor      # (D, N)
    d_skip: Tensor     # (D,)
    w_delta: Tensor    # (D, D)
    b_delta: Tensor    # (D,)
    w_b: Tensor        # (D, N)
    w_c: Tensor        # (D, N)

    @property
    def channels(self) -> int:
        return self.a_log.shape[0]

    @property
    def state_size(self) -> int:
        return self.a_log.shape[1]

    def tensors(self) -> list[Tensor]:
        return [self.a_log, self.d_skip, self.w_delta, self.b_delta, self.w_b, self.w_c]

    @staticmethod
    def specs(channels: int, state_size: int) -> list[ParamSpec]:
        d, n = channels, state_size
        return [
            ParamSpec("a_log", (d, n), "a_log"),
            ParamSpec("d_skip", (d,), "ones"),
            ParamSpec("w_delta", (d, d), "uniform", d),
            ParamSpec("b_delta", (d,), "dt_bias"),
            ParamSpec("w_b", (d, n), "uniform", d),
            ParamSpec("w_c", (d, n), "uniform", d),
        ]

    @classmethod
    def init(cls, channels: int, state_size: int, rng: np.random.Generator) -> "ScanParams":
        return cls(**init_params(cls.specs(channels, state_size), rng))

    @classmethod
    def from_params(cls, params: Mapping[str, Tensor]) -> "ScanParams":
        return cls(**{s: params[s] for s in SCAN_PARAM_NAMES})


SCAN_PARAM_NAMES = ("a_log", "d_skip", "w_delta", "b_delta", "w_b", "w_c")


# ---------------------------------------------------------------- primitives


def combine(e1: tuple, e2: tuple) -> tuple:
    """Compose two recurrence steps: apply ``e1`` first, then ``e2``.

    ``(a1, b1) o (a2, b2) = (a1 * a2, a2 * b1 + b2)``; identity is ``(1, 0)``.
    """
    a1, b1 = e1
    a2, b2 = e2
    return a1 * a2, a2 * b1 + b2


def discretize(A: np.ndarray, delta: np.ndarray, B: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order hold for A, Euler for B.

    Shapes: ``A`` (D, N), ``delta`` (L, D), ``B`` (L, N) -> both outputs (L, D, N).
    """
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta <= 0):
        raise ValueError("discretize requires delta > 0")
    a_bar = np.exp(delta[:, :, None] * A[None, :, :])
    b_bar = delta[:, :, None] * B[:, None, :]
    return a_bar, b_bar


def recurrence_sequential(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """h_t = a_t * h_{t-1} + b_t along axis 0, h_{-1} = 0."""
    h = np.empty_like(b)
    prev = np.zeros(b.shape[1:])
    for t in range(b.shape[0]):
        prev = a[t] * prev + b[t]
        h[t] = prev
    return h


def recurrence_parallel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Same result as :func:`recurrence_sequential` via a Blelloch scan.

    Up-sweep builds subtree aggregates in place, down-sweep turns them into
    exclusive prefixes; the inclusive prefix is one more :func:`combine`.
    The sequence is padded to a power of two with identity elements, so the
    combination tree depends only on the length.
    """
    L = b.shape[0]
    size = 1 << max(0, (L - 1).bit_length())
    sa = np.ones((size,) + a.shape[1:])
    sb = np.zeros((size,) + b.shape[1:])
    sa[:L] = a
    sb[:L] = b
    levels = size.bit_length() - 1

    for d in range(levels):
        step = 2 << d
        left = slice((1 << d) - 1, size, step)
        right = slice(step - 1, size, step)
        sb[right] += sa[right] * sb[left]
        sa[right] *= sa[left]

    # Down-sweep: only the drive half of the prefix is needed downstream, and
    # the left-subtree decay aggregates from the up-sweep are never overwritten.
    sb[size - 1] = 0.0
    for d in reversed(range(levels)):
        step = 2 << d
        left = slice((1 << d) - 1, size, step)
        right = slice(step - 1, size, step)
        tb = sb[left].copy()
        sb[left] = sb[right]
        # combine(prefix, left aggregate), drive component only
        sb[right] *= sa[left]
        sb[right] += tb

    # exclusive prefix followed by the element itself; h_{-1} = 0
    return a * sb[:L] + b


_RECURRENCES = {"sequential": recurrence_sequential, "parallel": recurrence_parallel}


def _scan_forward(x, delta, A, B, C, D, impl):
    a_bar, b_unit = discretize(A, delta, B)
    drive = b_unit * x[:, :, None]
    h = _RECURRENCES[impl](a_bar, drive)
    y = np.einsum("ldn,ln->ld", h, C) + D * x
    return y, a_bar, h


def selective_scan_core(x: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor,
                        D: Tensor, impl: str = "parallel") -> Tensor:
    """Differentiable scan with explicit coefficients.

    Shapes: x, delta (L, D); A (D, N); B, C (L, N); D (D,). Returns (L, D).
    The adjoint is itself a reverse linear recurrence and reuses the
    same recurrence kernel as the forward pass.
    """
    if impl not in _RECURRENCES:
        raise ValueError(f"unknown scan impl {impl!r}")
    xs, ds = x.data, delta.data
    if xs.ndim != 2 or ds.shape != xs.shape:
        raise ValueError(f"x and delta must both be (L, D): {xs.shape}, {ds.shape}")
    L, Dc = xs.shape
    N = A.shape[1]
    if A.shape != (Dc, N) or B.shape != (L, N) or C.shape != (L, N) or D.shape != (Dc,):
        raise ValueError("selective scan coefficient shapes do not conform")
    y, a_bar, h = _scan_forward(xs, ds, A.data, B.data, C.data, D.data, impl)

    def bw(gy):
        Cd, Bd, Ad = C.data, B.data, A.data
        direct = gy[:, :, None] * Cd[:, None, :]
        # g_t = direct_t + a_{t+1} * g_{t+1}, run on the reversed sequence
        a_next = np.ones_like(a_bar)
        a_next[:-1] = a_bar[1:]
        g = _RECURRENCES[impl](a_next[::-1], direct[::-1])[::-1]
        h_prev = np.zeros_like(h)
        h_prev[1:] = h[:-1]
        gexp = g * h_prev * a_bar            # d/d(delta*A) of the decay
        gdrive = g                           # d/d(drive)
        gdelta = (gexp * Ad[None]).sum(-1) + (gdrive * Bd[:, None, :]).sum(-1) * xs
        gA = (gexp * ds[:, :, None]).sum(0)
        gB = (gdrive * (ds * xs)[:, :, None]).sum(1)
        gx = (gdrive * Bd[:, None, :]).sum(-1) * ds + D.data * gy
        gC = np.einsum("ld,ldn->ln", gy, h)
        gD = (gy * xs).sum(0)
        return gx, gdelta, gA, gB, gC, gD

    return T.make_op("selective_scan", y, (x, delta, A, B, C, D), bw)


def project(x: Tensor, params: ScanParams) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Per-token coefficients: (delta, A, B, C)."""
    delta = T.softplus(T.linear(x, params.w_delta, params.b_delta))
    A = T.neg(T.texp(params.a_log))
    B = T.linear(x, params.w_b)
    C = T.linear(x, params.w_c)
    return delta, A, B, C


def selective_scan(x: Tensor, params: ScanParams, impl: str = "parallel") -> Tensor:
    """Run the selective scan over an (L, D) token sequence."""
    if x.ndim != 2 or x.shape[1] != params.channels:
        raise ValueError(f"expected (L, {params.channels}) tokens, got {x.shape}")
    delta, A, B, C = project(x, params)
    return selective_scan_core(x, delta, A, B, C, params.d_skip, impl)


def scan_sequential(x: Tensor, params: ScanParams) -> Tensor:
    return selective_scan(x, params, "sequential")


def scan_parallel(x: Tensor, params: ScanParams) -> Tensor:
    return selective_scan(x, params, "parallel")
