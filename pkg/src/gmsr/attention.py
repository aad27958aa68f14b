"""Spatial and spectral gradient attention.

Both blocks gate their input with a sigmoid map built from first-order
finite differences: across H/W for the spatial block (one weight per pixel,
shared by all channels) and across C for the spectral block (one weight per
channel, shared by all pixels).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

from . import tensor as T
from .params import ParamSpec
from .tensor import Tensor

NORM_GUARD = 1e-8
SPATIAL_KERNEL = 7


def minmax_normalize(x: Tensor, guard: float = NORM_GUARD) -> Tensor:
    """Whole-map min-max scaling to [0, 1]; a flat map (range < guard) maps to zeros."""
    lo = T.tmin(x)
    hi = T.tmax(x)
    if hi.data - lo.data < guard:
        return T.Tensor(0.0 * x.data)
    return T.div(x - lo, hi - lo)


@dataclass
class SpatialGradientMaps:
    g_x: Tensor     # H x W x C, last column zero
    g_y: Tensor     # H x W x C, last row zero
    g_norm: Tensor  # H x W x 2C, in [0, 1]


@dataclass
class SpectralGradientMap:
    g_raw: Tensor      # H x W x (C-1), before normalization
    g_partial: Tensor  # H x W x (C-1)
    g_comp: Tensor     # H x W x C, last channel duplicated


def spatial_gradient_maps(f: Tensor) -> SpatialGradientMaps:
    if f.ndim != 3:
        raise ValueError(f"expected H x W x C, got {f.shape}")
    H, W, _ = f.shape
    if H < 2 or W < 2:
        raise ValueError(f"spatial gradients need H, W >= 2, got {H}x{W}")
    g_x = T.pad_trailing(f[:, 1:, :] - f[:, :-1, :], axis=1)
    g_y = T.pad_trailing(f[1:, :, :] - f[:-1, :, :], axis=0)
    g_norm = minmax_normalize(T.concat([g_x, g_y], axis=2))
    return SpatialGradientMaps(g_x, g_y, g_norm)


def spectral_gradient_map(f: Tensor, normalize: bool = True) -> SpectralGradientMap:
    if f.ndim != 3:
        raise ValueError(f"expected H x W x C, got {f.shape}")
    C = f.shape[2]
    if C < 2:
        raise ValueError(f"spectral gradients need C >= 2, got {C}")
    g_raw = f[:, :, 1:] - f[:, :, :-1]
    g_partial = minmax_normalize(g_raw) if normalize else g_raw
    g_comp = T.concat([g_partial, g_partial[:, :, C - 2 : C - 1]], axis=2)
    return SpectralGradientMap(g_raw, g_partial, g_comp)


def spatial_attention_specs(kernel: int = SPATIAL_KERNEL) -> list[ParamSpec]:
    fan_in = kernel * kernel * 2
    return [
        ParamSpec("conv.weight", (kernel, kernel, 2, 1), "uniform", fan_in),
        ParamSpec("conv.bias", (1,), "zeros"),
    ]


def spatial_attention_map(f: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """Sigmoid gate of shape H x W x 1."""
    g = spatial_gradient_maps(f).g_norm
    pooled = T.concat(
        [T.reduce_pool(g, "channel", "max"), T.reduce_pool(g, "channel", "avg")], axis=2
    )
    return T.sigmoid(T.conv2d(pooled, params["conv.weight"], params["conv.bias"], mode="dense"))


def spatial_gradient_attention(f: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    return f * spatial_attention_map(f, params)


def spectral_attention_map(f: Tensor) -> Tensor:
    """Sigmoid gate of shape 1 x 1 x C. Parameter free."""
    g = spectral_gradient_map(f).g_comp
    return T.sigmoid(T.reduce_pool(g, "spatial", "max") + T.reduce_pool(g, "spatial", "avg"))


def spectral_gradient_attention(f: Tensor, params: Mapping[str, Tensor] | None = None) -> Tensor:
    return f * spectral_attention_map(f)
