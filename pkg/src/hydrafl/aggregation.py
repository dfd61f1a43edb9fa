"""Server aggregation rules over flat update vectors.

Both rules sort each coordinate across clients before summing and then add
the kept rows strictly left to right. That makes the result independent of
the order updates arrive in, and makes trimming with ``m = 0`` identical,
bit for bit, to the plain mean.
"""

from __future__ import annotations

from enum import Enum
from functools import partial
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, InputError


class Defense(str, Enum):
    MEAN = "MEAN"
    TRMEAN = "TRMEAN"


def _stack(updates: Sequence) -> np.ndarray:
    if len(updates) == 0:
        raise InputError("cannot aggregate an empty set of updates")
    rows = [np.asarray(getattr(u, "values", u), dtype=np.float64) for u in updates]
    if len({r.shape for r in rows}) != 1 or rows[0].ndim != 1:
        raise ConfigError("updates must be flat vectors of one length")
    return np.stack(rows)


def _sequential_mean(rows: np.ndarray) -> np.ndarray:
    acc = rows[0].copy()
    for row in rows[1:]:
        acc += row
    return acc / rows.shape[0]


def aggregate_trimmed_mean(updates: Sequence, m: int, clamp: bool = False) -> np.ndarray:
    """Per coordinate: sort the n values, drop m from each end, average the rest.

    With ``clamp`` the trim shrinks to ``(n - 1) // 2`` when ``n <= 2m`` instead
    of raising, so the rule stays defined on small subsets (the adversary's
    benign-only reference set).
    """
    stacked = _stack(updates)
    n = stacked.shape[0]
    if clamp:
        m = min(m, (n - 1) // 2)
    if m < 0 or n <= 2 * m:
        raise ConfigError(f"trimmed mean needs n > 2m (n={n}, m={m})")
    ordered = np.sort(stacked, axis=0)
    return _sequential_mean(ordered[m:n - m])


def aggregate_mean(updates: Sequence) -> np.ndarray:
    """Unweighted coordinate-wise mean."""
    return aggregate_trimmed_mean(updates, 0)


def make_agr(defense: Defense | str, trim: int = 0, clamp: bool = False) -> Callable[[Sequence], np.ndarray]:
    """The aggregation rule as a callable, shared by the server and the adversary."""
    defense = Defense(defense)
    if defense is Defense.MEAN:
        return aggregate_mean
    return partial(aggregate_trimmed_mean, m=trim, clamp=clamp)
