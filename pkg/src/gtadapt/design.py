"""Non-adaptive Bernoulli designs and individual retest plans."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class DesignSpec:
    n: int
    population: tuple[int, ...]
    q_one: float

    def __post_init__(self):
        if self.n < 0:
            raise ValueError("n must be non-negative")
        if not self.population:
            raise ValueError("population must be non-empty")
        if not 0.0 < self.q_one < 1.0:
            raise ValueError(f"q_one must lie in (0, 1), got {self.q_one}")


def bernoulli_matrix(spec: DesignSpec, p: int, rng: np.random.Generator) -> np.ndarray:
    """(n, p) pool matrix; population entries i.i.d. Bernoulli(q_one), others 0.

    Rows are drawn one after another from the stream, so the first ``m`` rows
    of a taller matrix built from the same seed are identical.
    """
    pools = np.zeros((spec.n, p), dtype=bool)
    if spec.n == 0:
        return pools
    cols = np.asarray(spec.population, dtype=np.intp)
    pools[:, cols] = rng.random((spec.n, cols.size)) < spec.q_one
    return pools


def individual_plan(items: Sequence[int], reps: int, p: int) -> tuple[np.ndarray, np.ndarray]:
    """Singleton pools testing each item ``reps`` times.

    Returns the (len(items) * reps, p) pool matrix and the tested item of
    each row; ordered by ascending item, then repetition.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    order = np.repeat(np.sort(np.asarray(list(items), dtype=np.intp)), reps)
    pools = np.zeros((order.size, p), dtype=bool)
    pools[np.arange(order.size), order] = True
    return pools, order
