"""Dataset-level evaluation and report files."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .data import write_pgm
from .metrics import MetricsReport, evaluate
from .model import GmsrNet
from .train import apply_linear_baseline, fit_linear_baseline

CURVE_PIXELS = 4


def evaluate_model(model: GmsrNet, pairs: Sequence[tuple[str, np.ndarray, np.ndarray]]
                   ) -> list[tuple[str, np.ndarray, MetricsReport]]:
    """(name, prediction, report) for each (name, rgb, cube) pair."""
    out = []
    for name, rgb, cube in pairs:
        if cube.shape[2] != model.config.out_channels:
            raise ValueError(
                f"{name}: cube has {cube.shape[2]} bands, model emits {model.config.out_channels}")
        pred = model.predict(rgb)
        out.append((name, pred, evaluate(pred, cube)))
    return out


def evaluate_baseline(train_pairs: Sequence[tuple[np.ndarray, np.ndarray]],
                      pairs: Sequence[tuple[str, np.ndarray, np.ndarray]]
                      ) -> list[tuple[str, np.ndarray, MetricsReport]]:
    """Same as :func:`evaluate_model` for the per-pixel affine least-squares fit."""
    coef = fit_linear_baseline(train_pairs)
    out = []
    for name, rgb, cube in pairs:
        pred = apply_linear_baseline(coef, rgb)
        out.append((name, pred, evaluate(pred, cube)))
    return out


def mean_report(reports: Sequence[MetricsReport]) -> dict[str, float]:
    keys = ("rmse", "psnr", "assim", "sam")
    return {k: float(np.mean([getattr(r, k) for r in reports])) for k in keys}


def write_metrics_csv(path, rows: Sequence[tuple[str, MetricsReport]]) -> None:
    lines = [MetricsReport.CSV_HEADER] + [rep.csv_row(name) for name, rep in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_heatmaps(directory, name: str, report: MetricsReport) -> list[dict]:
    """One PGM per band of the per-pixel error map; returns the scale records."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    scales = []
    for c in range(report.per_band_rmse.shape[2]):
        path = directory / f"{name}_band{c:02d}.pgm"
        lo, hi = write_pgm(path, report.per_band_rmse[:, :, c])
        scales.append({"file": path.name, "min": lo, "max": hi})
    return scales


def write_spectral_curves(directory, name: str, pred: np.ndarray, ref: np.ndarray,
                          wavelengths: np.ndarray, seed: int) -> list[str]:
    """Predicted vs reference spectra at ``CURVE_PIXELS`` seeded random pixels."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    H, W, _ = ref.shape
    files = []
    for k in range(CURVE_PIXELS):
        i, j = int(rng.integers(H)), int(rng.integers(W))
        path = directory / f"{name}_px{k}.csv"
        lines = [f"# pixel row={i} col={j}", "band,wavelength_nm,predicted,reference"]
        lines += [f"{c},{float(wavelengths[c])!r},{float(pred[i, j, c])!r},{float(ref[i, j, c])!r}"
                  for c in range(ref.shape[2])]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        files.append(path.name)
    return files
