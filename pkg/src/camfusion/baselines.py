"""Naive multiview fusion: average pooling and the two medoids."""

from __future__ import annotations

import enum

import numpy as np

from . import _kernels


class FusionStrategy(str, enum.Enum):
    AVG_POOL = "avg"
    L1_MEDOID = "l1med"
    COS_SIM_MEDOID = "cosmed"
    LEARNED = "learned"


def _check(descriptors) -> np.ndarray:
    x = np.asarray(descriptors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError(f"need a non-empty n×D descriptor matrix, got shape {x.shape}")
    return x


def avg_pool(descriptors) -> np.ndarray:
    x = _check(descriptors)
    if (x == x[0]).all():
        return x[0].copy()
    m = x.mean(axis=0)
    return m / np.linalg.norm(m)


# Costs that agree to this relative precision are treated as tied. Exactly
# tied sets (n = 2 always is) otherwise split on summation-order rounding.
TIE_RTOL = 1e-11


def _first_minimizer(cost) -> int:
    best = cost.min()
    band = TIE_RTOL * max(1.0, abs(float(best)))
    return int(np.flatnonzero(cost <= best + band)[0])


def l1_medoid_index(descriptors) -> int:
    x = np.ascontiguousarray(_check(descriptors))
    return _first_minimizer(_kernels.l1_cost(x))


def cos_sim_medoid_index(descriptors) -> int:
    x = _check(descriptors)
    return _first_minimizer(-(x * x.sum(axis=0)).sum(axis=1))


def l1_medoid(descriptors) -> np.ndarray:
    x = _check(descriptors)
    return x[l1_medoid_index(x)].copy()


def cos_sim_medoid(descriptors) -> np.ndarray:
    x = _check(descriptors)
    return x[cos_sim_medoid_index(x)].copy()


NAIVE = {
    FusionStrategy.AVG_POOL: avg_pool,
    FusionStrategy.L1_MEDOID: l1_medoid,
    FusionStrategy.COS_SIM_MEDOID: cos_sim_medoid,
}
