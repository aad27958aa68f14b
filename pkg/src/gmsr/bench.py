"""Wall-time scaling of the selective scan."""

from __future__ import annotations

import gc
import statistics
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .scan import ScanParams, selective_scan

DEFAULT_SIZES = (4096, 8192, 16384)
RATIO_BOUNDS = (1.6, 2.6)
# The default model's scan shape: expanded width 2 * 16 channels, state size 16.
# Narrower scans fit in L2 at L=4096 but not at 8192, so their first doubling
# measures the cache rather than the algorithm.
DEFAULT_CHANNELS, DEFAULT_STATE = 32, 16


@dataclass
class BenchRow:
    length: int
    impl: str
    median_ns: int
    ratio: float | None   # median_ns / median_ns at the previous (half) length

    def csv(self) -> str:
        ratio = "" if self.ratio is None else f"{self.ratio:.4f}"
        return f"{self.length},{self.impl},{self.median_ns},{ratio}"


CSV_HEADER = "L,impl,median_ns,ratio"


def time_scan(length: int, impl: str, runs: int, channels: int, state_size: int,
              seed: int = 0) -> int:
    rng = np.random.default_rng(seed)
    params = ScanParams.init(channels, state_size, rng)
    x = T.Tensor(rng.uniform(-1, 1, size=(length, channels)))
    samples = []
    gc_was_on = gc.isenabled()
    gc.disable()  # as timeit does: collector pauses are not part of the scan
    try:
        with T.no_grad():
            selective_scan(x, params, impl)  # warm-up
            for _ in range(runs):
                t0 = time.perf_counter_ns()
                selective_scan(x, params, impl)
                samples.append(time.perf_counter_ns() - t0)
    finally:
        if gc_was_on:
            gc.enable()
    return int(statistics.median(samples))


def benchmark(sizes=DEFAULT_SIZES, impls=("sequential", "parallel"), runs: int = 20,
              channels: int = DEFAULT_CHANNELS, state_size: int = DEFAULT_STATE,
              seed: int = 0) -> list[BenchRow]:
    rows = []
    for impl in impls:
        prev = None
        for L in sizes:
            med = time_scan(L, impl, runs, channels, state_size, seed)
            rows.append(BenchRow(L, impl, med, None if prev is None else med / prev))
            prev = med
    return rows


def ratios_within(rows: list[BenchRow], bounds=RATIO_BOUNDS) -> bool:
    lo, hi = bounds
    return all(lo <= r.ratio <= hi for r in rows if r.ratio is not None)
