"""Named parameter shapes and their initializers.

Every block declares an ordered list of :class:`ParamSpec`. The same list
drives initialization, parameter counting and checkpoint layout, so the
three can never disagree.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .tensor import Tensor


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    init: str = "uniform"   # uniform | zeros | ones | a_log | dt_bias
    fan_in: int = 1

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def prefixed(prefix: str, specs: Iterable[ParamSpec]) -> list[ParamSpec]:
    return [ParamSpec(f"{prefix}.{s.name}", s.shape, s.init, s.fan_in) for s in specs]


def sub(params: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    """View of ``params`` under ``prefix.`` with the prefix stripped."""
    p = prefix + "."
    return {k[len(p):]: v for k, v in params.items() if k.startswith(p)}


def init_array(spec: ParamSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.init == "uniform":
        bound = 1.0 / np.sqrt(spec.fan_in)
        return rng.uniform(-bound, bound, size=spec.shape)
    if spec.init == "zeros":
        return np.zeros(spec.shape)
    if spec.init == "ones":
        return np.ones(spec.shape)
    if spec.init == "a_log":
        d, n = spec.shape
        return np.log(np.tile(np.arange(1, n + 1, dtype=np.float64), (d, 1)))
    if spec.init == "dt_bias":
        # softplus(bias) lands log-uniformly in [1e-3, 1e-1]
        dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=spec.shape))
        return dt + np.log(-np.expm1(-dt))
    raise ValueError(f"unknown init {spec.init!r}")


def init_params(specs: Iterable[ParamSpec], rng: np.random.Generator) -> dict[str, Tensor]:
    return {s.name: Tensor(init_array(s, rng), requires_grad=True) for s in specs}


def count(specs: Iterable[ParamSpec]) -> int:
    return sum(s.size for s in specs)
