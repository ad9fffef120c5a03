"""Counter-based random streams and mergeable Monte Carlo accumulators."""
from __future__ import annotations

import math
import multiprocessing
from dataclasses import dataclass, field

import numpy as np

STREAM_SHIFT = 2 ** 32


def stream_id(experiment_id: int, path_index: int) -> int:
    return experiment_id * STREAM_SHIFT + path_index


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Philox generator keyed by (seed, stream); identical on every platform."""
    ss = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, stream >> 32, stream & 0xFFFFFFFF])
    return np.random.Generator(np.random.Philox(ss))


def batches(n_samples: int, batch_size: int):
    """Yield (start, size) covering range(n_samples) in fixed-size batches."""
    for start in range(0, n_samples, batch_size):
        yield start, min(batch_size, n_samples - start)


_TASK = None


def _call_task(item):
    return _TASK(item)


def parallel_map(fn, items, workers: int = 1) -> list:
    """Ordered map over ``items``, optionally on a fork-based process pool.

    Output order is the input order, so downstream reductions see the same
    sequence whatever the worker count.
    """
    global _TASK
    items = list(items)
    if workers <= 1 or len(items) < 2:
        return [fn(it) for it in items]
    _TASK = fn
    try:
        with multiprocessing.get_context("fork").Pool(workers) as pool:
            return pool.map(_call_task, items, chunksize=1)
    finally:
        _TASK = None


@dataclass
class Accumulator:
    """Count, sum and sum of squares held as exact partials.

    Totals are evaluated with math.fsum, so the result is correctly rounded and
    independent of the order in which batches were added or merged.
    """

    count: int = 0
    sums: list = field(default_factory=list)
    sumsq: list = field(default_factory=list)

    def add(self, values) -> None:
        v = np.asarray(values, dtype=float).ravel()
        self.count += v.size
        self.sums.append(math.fsum(v))
        self.sumsq.append(math.fsum(v * v))

    def merge(self, other: "Accumulator") -> "Accumulator":
        return Accumulator(self.count + other.count, self.sums + other.sums,
                           self.sumsq + other.sumsq)

    @property
    def total(self) -> float:
        return math.fsum(self.sums)

    @property
    def mean(self) -> float:
        return self.total / self.count if self.count else float("nan")

    @property
    def std_error(self) -> float:
        n = self.count
        if n < 2:
            return float("nan")
        m = self.mean
        var = (math.fsum(self.sumsq) - n * m * m) / (n - 1)
        return math.sqrt(max(var, 0.0) / n)
