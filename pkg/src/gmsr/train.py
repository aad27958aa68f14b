"""L1 training with Adam and polynomial learning-rate decay."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .data import patch_coords
from .model import GmsrNet
from .tensor import Tensor

log = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.99
ADAM_EPS = 1e-8
LR0 = 1e-4
POWER = 1.5


def l1_loss(z: Tensor, z_ref) -> Tensor:
    """Mean absolute difference over every element."""
    z_ref = T.as_tensor(z_ref)
    if z.shape != z_ref.shape:
        raise ValueError(f"shape mismatch: {z.shape} vs {z_ref.shape}")
    return T.mean(T.tabs(z - z_ref))


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = ADAM_EPS


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray | None],
              state: OptimState, lr: float) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name} at step {state.t + 1}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name, np.zeros_like(p.data))
        v = state.v.get(name, np.zeros_like(p.data))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass(frozen=True)
class LrSchedule:
    total_steps: int
    lr0: float = LR0
    power: float = POWER

    def __call__(self, t: int) -> float:
        return lr_at(t, self)


def lr_at(t: int, schedule: LrSchedule) -> float:
    """Polynomial decay ``lr0 * (1 - t/T) ** power``."""
    T_ = schedule.total_steps
    if t < 0 or t > T_:
        raise ValueError(f"step {t} outside [0, {T_}]")
    if T_ == 0:
        return schedule.lr0
    return schedule.lr0 * (1.0 - t / T_) ** schedule.power


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200
    batch: int = 4
    patch: int = 32
    lr0: float = LR0
    power: float = POWER
    seed: int = 0


@dataclass
class TrainResult:
    trace: list[tuple[int, float, float]]   # (step, lr, loss)

    @property
    def losses(self) -> list[float]:
        return [r[2] for r in self.trace]

    def to_csv(self) -> str:
        lines = ["step,lr,loss"]
        lines += [f"{s},{lr!r},{loss!r}" for s, lr, loss in self.trace]
        return "\n".join(lines) + "\n"


def train(model: GmsrNet, pairs: Sequence[tuple[np.ndarray, np.ndarray]], cfg: TrainConfig,
          log_every: int = 0) -> TrainResult:
    """Train on random co-located patches of ``(rgb, cube)`` pairs.

    Each step draws ``cfg.batch`` (pair, patch) samples from a generator
    seeded by ``cfg.seed``; sample losses are averaged before one backward.
    """
    if not pairs:
        raise ValueError("empty dataset")
    for rgb, cube in pairs:
        if rgb.shape[:2] != cube.shape[:2] or rgb.shape[2] != model.config.in_channels:
            raise ValueError(f"inconsistent pair shapes {rgb.shape} / {cube.shape}")
        if cube.shape[2] != model.config.out_channels:
            raise ValueError(f"cube has {cube.shape[2]} bands, model emits {model.config.out_channels}")
    rng = np.random.default_rng(cfg.seed)
    sched = LrSchedule(cfg.steps, cfg.lr0, cfg.power)
    state = OptimState()
    trace = []
    for step in range(cfg.steps):
        T.reset_tape()
        model.zero_grad()
        losses = []
        for _ in range(cfg.batch):
            rgb, cube = pairs[int(rng.integers(len(pairs)))]
            H, W = rgb.shape[:2]
            p = min(cfg.patch, H, W)
            (i, j), = patch_coords(H, W, p, mode="random", count=1, seed=int(rng.integers(2**31)))
            out = model(rgb[i : i + p, j : j + p])
            losses.append(l1_loss(out, cube[i : i + p, j : j + p]))
        loss = losses[0]
        for extra in losses[1:]:
            loss = loss + extra
        loss = loss * (1.0 / len(losses))
        value = loss.item()
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite loss at step {step}")
        T.backward(loss)
        lr = sched(step)
        adam_step(model.params, {k: p.grad for k, p in model.params.items()}, state, lr)
        trace.append((step, lr, value))
        if log_every and step % log_every == 0:
            log.info("step %d lr %.3g loss %.6f", step, lr, value)
    return TrainResult(trace)


def fit_linear_baseline(pairs: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """Per-pixel affine least squares RGB -> bands; returns a (4, C) matrix."""
    X = np.concatenate([rgb.reshape(-1, rgb.shape[-1]) for rgb, _ in pairs])
    Y = np.concatenate([cube.reshape(-1, cube.shape[-1]) for _, cube in pairs])
    X1 = np.hstack([X, np.ones((X.shape[0], 1))])
    coef, *_ = np.linalg.lstsq(X1, Y, rcond=None)
    return coef


def apply_linear_baseline(coef: np.ndarray, rgb: np.ndarray) -> np.ndarray:
    flat = rgb.reshape(-1, rgb.shape[-1])
    out = np.hstack([flat, np.ones((flat.shape[0], 1))]) @ coef
    return out.reshape(rgb.shape[:2] + (coef.shape[1],))
