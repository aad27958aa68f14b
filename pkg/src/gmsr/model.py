"""GMSR network: stem, stacked gradient-mamba blocks, head.

Checkpoint layout (all little-endian)::

    b"GMSR"            magic
    u32                format version (1)
    u32                byte length of the config JSON
    bytes              config JSON, UTF-8, sorted keys
    u64                number of float64 parameters that follow
    f64[...]           parameters in ``param_specs(config)`` order, each
                       tensor flattened row-major
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensor as T
from .attention import (
    spatial_attention_specs,
    spatial_gradient_attention,
    spectral_gradient_attention,
)
from .params import ParamSpec, count, init_params, prefixed, sub
from .tensor import Tensor
from .vss import VssConfig, vss_block, vss_specs

MAGIC = b"GMSR"
FORMAT_VERSION = 1
BRANCHES = ("vss", "g_spa", "g_spe")


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


class CheckpointMismatchError(CheckpointError):
    def __init__(self, expected: int, actual: int, what: str = "parameter count"):
        super().__init__(f"checkpoint {what} mismatch: expected {expected}, got {actual}")
        self.expected = expected
        self.actual = actual


@dataclass(frozen=True)
class GmsrConfig:
    in_channels: int = 3
    out_channels: int = 31
    feature_width: int = 16
    num_blocks: int = 3
    expansion: float = 2.0
    state_size: int = 16
    use_vss: bool = True
    use_g_spa: bool = True
    use_g_spe: bool = True
    spatial_kernel: int = 7
    scan_impl: str = "parallel"
    seed: int = 0

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        if self.feature_width < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel widths must be positive")
        if not any(self.branch_toggles.values()):
            raise ValueError("at least one branch must be enabled")
        if self.scan_impl not in ("parallel", "sequential"):
            raise ValueError(f"unknown scan_impl {self.scan_impl!r}")
        self.vss  # validates expansion/state size

    @property
    def vss(self) -> VssConfig:
        return VssConfig(self.feature_width, self.expansion, self.state_size)

    @property
    def branch_toggles(self) -> dict[str, bool]:
        return {"vss": self.use_vss, "g_spa": self.use_g_spa, "g_spe": self.use_g_spe}

    @property
    def enabled_branches(self) -> int:
        return sum(self.branch_toggles.values())

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "GmsrConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "GmsrConfig":
        return GmsrConfig.from_dict({**asdict(self), **kw})


def gm_block_specs(cfg: GmsrConfig) -> list[ParamSpec]:
    cf = cfg.feature_width
    specs: list[ParamSpec] = []
    if cfg.use_vss:
        specs += prefixed("vss", vss_specs(cfg.vss))
    if cfg.use_g_spa:
        specs += prefixed("g_spa", spatial_attention_specs(cfg.spatial_kernel))
    fan = cfg.enabled_branches * cf
    specs += [
        ParamSpec("fuse.weight", (fan, cf), "uniform", fan),
        ParamSpec("fuse.bias", (cf,), "uniform", fan),
    ]
    return specs


def param_specs(cfg: GmsrConfig) -> list[ParamSpec]:
    cin, cf, cout = cfg.in_channels, cfg.feature_width, cfg.out_channels
    specs = [
        ParamSpec("stem.weight", (cin, cf), "uniform", cin),
        ParamSpec("stem.bias", (cf,), "uniform", cin),
    ]
    for i in range(cfg.num_blocks):
        specs += prefixed(f"blocks.{i}", gm_block_specs(cfg))
    specs += [
        ParamSpec("head.weight", (cf, cout), "uniform", cf),
        ParamSpec("head.bias", (cout,), "uniform", cf),
    ]
    return specs


def param_count(cfg: GmsrConfig) -> int:
    return count(param_specs(cfg))


def param_breakdown(cfg: GmsrConfig) -> dict[str, int]:
    """Learnable scalars per top-level module and per block branch."""
    out: dict[str, int] = {}
    for s in param_specs(cfg):
        parts = s.name.split(".")
        key = ".".join(parts[:3]) if parts[0] == "blocks" else parts[0]
        out[key] = out.get(key, 0) + s.size
    return out


def gm_block_forward(f: Tensor, params: Mapping[str, Tensor], cfg: GmsrConfig) -> Tensor:
    """Parallel branches on the same input, channel concat, 1x1 fuse, residual add."""
    if f.ndim != 3 or f.shape[-1] != cfg.feature_width:
        raise ValueError(f"GM block expects H x W x {cfg.feature_width}, got {f.shape}")
    branches = []
    if cfg.use_vss:
        branches.append(vss_block(f, sub(params, "vss"), cfg.vss, cfg.scan_impl))
    if cfg.use_g_spa:
        branches.append(spatial_gradient_attention(f, sub(params, "g_spa")))
    if cfg.use_g_spe:
        branches.append(spectral_gradient_attention(f))
    y = branches[0] if len(branches) == 1 else T.concat(branches, axis=2)
    return T.conv2d(y, params["fuse.weight"], params["fuse.bias"]) + f


def gmsr_forward(rgb: Tensor, params: Mapping[str, Tensor], cfg: GmsrConfig) -> Tensor:
    if rgb.ndim != 3 or rgb.shape[-1] != cfg.in_channels:
        raise ValueError(f"expected H x W x {cfg.in_channels} input, got {rgb.shape}")
    f = T.conv2d(rgb, params["stem.weight"], params["stem.bias"])
    for i in range(cfg.num_blocks):
        f = gm_block_forward(f, sub(params, f"blocks.{i}"), cfg)
    return T.conv2d(f, params["head.weight"], params["head.bias"])


class GmsrNet:
    def __init__(self, config: GmsrConfig, params: dict[str, Tensor] | None = None):
        self.config = config
        specs = param_specs(config)
        if params is None:
            params = init_params(specs, np.random.default_rng(config.seed))
        for s in specs:
            if s.name not in params or params[s.name].shape != s.shape:
                raise CheckpointError(f"parameter {s.name} missing or misshapen")
        self.params = {s.name: params[s.name] for s in specs}

    def __call__(self, rgb) -> Tensor:
        return gmsr_forward(T.as_tensor(rgb), self.params, self.config)

    def predict(self, rgb: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return self(rgb).data

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.data.reshape(-1) for p in self.params.values()])


def save_checkpoint(model: GmsrNet, path) -> None:
    cfg = model.config.to_json().encode("utf-8")
    flat = model.flat_params()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<Q", flat.size))
        fh.write(flat.astype("<f8").tobytes())


def load_checkpoint(path, expected: GmsrConfig | None = None) -> GmsrNet:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    try:
        version, clen = struct.unpack_from("<II", raw, 4)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        cfg = GmsrConfig.from_dict(json.loads(raw[12 : 12 + clen].decode("utf-8")))
        (n,) = struct.unpack_from("<Q", raw, 12 + clen)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, TypeError) as exc:
        raise CheckpointError(f"{path}: malformed header ({exc})") from exc
    specs = param_specs(cfg)
    want = count(specs)
    if n != want:
        raise CheckpointMismatchError(want, n)
    if expected is not None and param_count(expected) != n:
        raise CheckpointMismatchError(param_count(expected), n)
    body = raw[20 + clen :]
    if len(body) != 8 * n:
        raise CheckpointError(f"{path}: truncated payload ({len(body)} of {8 * n} bytes)")
    flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
    params, off = {}, 0
    for s in specs:
        params[s.name] = Tensor(flat[off : off + s.size].reshape(s.shape), requires_grad=True)
        off += s.size
    return GmsrNet(cfg, params)
