"""Visual state-space block and its four-route 2D selective scan."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

from . import tensor as T
from .params import ParamSpec, prefixed, sub
from .scan import DEFAULT_STATE_SIZE, ScanParams, selective_scan
from .tensor import Tensor

# Fixed evaluation and summation order of the scan routes.
ROUTES = ("row_forward", "row_backward", "col_forward", "col_backward")


@dataclass(frozen=True)
class VssConfig:
    channels: int
    expansion: float = 2.0
    state_size: int = DEFAULT_STATE_SIZE
    dw_kernel: int = 3

    def __post_init__(self):
        if self.channels < 1 or self.state_size < 1:
            raise ValueError("channels and state_size must be positive")
        if self.expanded < 1:
            raise ValueError(f"expansion {self.expansion} gives no channels")
        if self.dw_kernel % 2 != 1:
            raise ValueError("dw_kernel must be odd")

    @property
    def expanded(self) -> int:
        return int(round(self.expansion * self.channels))


@dataclass
class DirectionalScanSet:
    """One independent :class:`ScanParams` per route, in :data:`ROUTES` order."""

    routes: tuple[ScanParams, ScanParams, ScanParams, ScanParams]

    def __post_init__(self):
        if len(self.routes) != len(ROUTES):
            raise ValueError("exactly four scan routes are required")

    @classmethod
    def from_params(cls, params: Mapping[str, Tensor]) -> "DirectionalScanSet":
        return cls(tuple(ScanParams.from_params(sub(params, r)) for r in ROUTES))


def flatten_route(u: Tensor, route: str) -> Tensor:
    """H x W x E map -> (H*W) x E token sequence in ``route`` order."""
    H, W, E = u.shape
    if route.startswith("col"):
        u = T.transpose(u, (1, 0, 2))
    seq = T.reshape(u, (H * W, E))
    if route.endswith("backward"):
        seq = T.flip(seq, 0)
    return seq


def unflatten_route(seq: Tensor, route: str, H: int, W: int) -> Tensor:
    """Inverse of :func:`flatten_route`."""
    E = seq.shape[1]
    if route.endswith("backward"):
        seq = T.flip(seq, 0)
    if route.startswith("col"):
        return T.transpose(T.reshape(seq, (W, H, E)), (1, 0, 2))
    return T.reshape(seq, (H, W, E))


def scan_route(u: Tensor, params: ScanParams, route: str, impl: str = "parallel") -> Tensor:
    H, W, _ = u.shape
    return unflatten_route(selective_scan(flatten_route(u, route), params, impl), route, H, W)


def ss2d(feature: Tensor, scans: DirectionalScanSet, impl: str = "parallel") -> Tensor:
    if feature.ndim != 3:
        raise ValueError(f"ss2d expects H x W x C, got {feature.shape}")
    out = None
    for route, params in zip(ROUTES, scans.routes):
        y = scan_route(feature, params, route, impl)
        out = y if out is None else out + y
    return out


def vss_specs(cfg: VssConfig) -> list[ParamSpec]:
    c, e, k = cfg.channels, cfg.expanded, cfg.dw_kernel
    specs = [
        ParamSpec("in_proj1.weight", (c, e), "uniform", c),
        ParamSpec("in_proj1.bias", (e,), "uniform", c),
        ParamSpec("in_proj2.weight", (c, e), "uniform", c),
        ParamSpec("in_proj2.bias", (e,), "uniform", c),
        ParamSpec("dwconv.weight", (k, k, e), "uniform", k * k),
        ParamSpec("dwconv.bias", (e,), "uniform", k * k),
    ]
    for route in ROUTES:
        specs += prefixed(route, ScanParams.specs(e, cfg.state_size))
    specs += [
        ParamSpec("norm.gamma", (e,), "ones"),
        ParamSpec("norm.beta", (e,), "zeros"),
        ParamSpec("out_proj.weight", (e, c), "uniform", e),
        ParamSpec("out_proj.bias", (c,), "uniform", e),
    ]
    return specs


def vss_block(x: Tensor, params: Mapping[str, Tensor], cfg: VssConfig,
              impl: str = "parallel") -> Tensor:
    """Gated two-branch block; output has the input's shape.

    scan branch:  LN(SS2D(SiLU(DWConv(Lin(x)))))
    gate branch:  SiLU(Lin(x))
    output:       Lin(scan * gate)
    """
    if x.ndim != 3 or x.shape[-1] != cfg.channels:
        raise ValueError(f"vss_block expects H x W x {cfg.channels}, got {x.shape}")
    p = params
    u = T.linear(x, p["in_proj1.weight"], p["in_proj1.bias"])
    u = T.silu(T.conv2d(u, p["dwconv.weight"], p["dwconv.bias"], mode="depthwise"))
    s = ss2d(u, DirectionalScanSet.from_params(p), impl)
    s = T.layernorm(s, p["norm.gamma"], p["norm.beta"])
    gate = T.silu(T.linear(x, p["in_proj2.weight"], p["in_proj2.bias"]))
    return T.linear(s * gate, p["out_proj.weight"], p["out_proj.bias"])
