"""Branch-removal matrix and block-count sweep at toy scale."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .evaluate import evaluate_model, mean_report
from .model import GmsrConfig, GmsrNet, param_count
from .train import TrainConfig, train

# name -> (vss, g_spa, g_spe)
TOGGLE_MATRIX = {
    "full": (True, True, True),
    "vss_only": (True, False, False),
    "no_g_spa": (True, False, True),
    "no_g_spe": (True, True, False),
    "g_spa_g_spe": (False, True, True),
}
BLOCK_SWEEP = (1, 2, 3, 4, 5)
CSV_HEADER = "run,vss,g_spa,g_spe,n,param_count,rmse,psnr,assim,sam"


def parse_toggles(spec: str) -> dict[str, tuple[bool, bool, bool]]:
    """``all``, a comma list of matrix names, or 3-digit bit strings like ``101``."""
    if spec == "all":
        return dict(TOGGLE_MATRIX)
    out = {}
    for item in filter(None, (s.strip() for s in spec.split(","))):
        if item in TOGGLE_MATRIX:
            out[item] = TOGGLE_MATRIX[item]
        elif len(item) == 3 and set(item) <= {"0", "1"}:
            bits = tuple(c == "1" for c in item)
            if not any(bits):
                raise ValueError("toggle combination 000 disables every branch")
            out[f"custom_{item}"] = bits
        else:
            raise ValueError(f"unknown toggle {item!r}")
    if not out:
        raise ValueError("no toggles selected")
    return out


@dataclass(frozen=True)
class Cell:
    name: str
    toggles: tuple[bool, bool, bool]
    num_blocks: int


def _run_cell(cell: Cell, base: GmsrConfig, tcfg: TrainConfig, train_pairs, eval_pairs) -> str:
    vss, spa, spe = cell.toggles
    cfg = base.replace(use_vss=vss, use_g_spa=spa, use_g_spe=spe, num_blocks=cell.num_blocks)
    model = GmsrNet(cfg)
    train(model, train_pairs, tcfg)
    m = mean_report([rep for _, _, rep in evaluate_model(model, eval_pairs)])
    return ",".join([cell.name, str(int(vss)), str(int(spa)), str(int(spe)), str(cell.num_blocks),
                     str(param_count(cfg))] + [repr(m[k]) for k in ("rmse", "psnr", "assim", "sam")])


def cells(toggles: dict[str, tuple[bool, bool, bool]], base: GmsrConfig,
          blocks: Sequence[int] = BLOCK_SWEEP) -> list[Cell]:
    out = [Cell(name, t, base.num_blocks) for name, t in toggles.items()]
    out += [Cell(f"n={n}", TOGGLE_MATRIX["full"], n) for n in blocks]
    return out


def run_ablation(base: GmsrConfig, tcfg: TrainConfig, train_pairs, eval_pairs,
                 toggles: dict[str, tuple[bool, bool, bool]] | None = None,
                 blocks: Sequence[int] = BLOCK_SWEEP, workers: int | None = None) -> list[str]:
    """CSV lines (header first). Cells are independent and may run in parallel;
    row order is fixed by the cell list regardless of ``workers``."""
    todo = cells(TOGGLE_MATRIX if toggles is None else toggles, base, blocks)
    if workers is None:
        workers = max(1, int(os.environ.get("GMSR_THREADS", "1")))
    args = [(c, base, tcfg, train_pairs, eval_pairs) for c in todo]
    if workers == 1:
        rows = [_run_cell(*a) for a in args]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_cell, *zip(*args)))
    return [CSV_HEADER] + rows


def split_pairs(pairs: list, holdout: float = 0.25):
    """Leading pairs train, trailing pairs are held out (at least one of each when possible)."""
    if len(pairs) < 2:
        return pairs, pairs
    k = max(1, int(round(len(pairs) * holdout)))
    return pairs[:-k], pairs[-k:]


def as_arrays(pairs) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(rgb, cube.array() if hasattr(cube, "array") else cube) for _, rgb, cube in pairs]
