"""Signed covariate layouts for regression adjustment.

The stacked outcome convention (control block negated) carries over to the
covariate side: every layout is a 2r x l matrix whose top block is the control
half.  Two unit-level layouts are provided -- common slopes and separate
slopes -- plus cluster-total variants that operate on one row per cluster
while still targeting the individual-level average effect.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .design import Design, _cluster_index


@dataclass(frozen=True)
class CovariateSpec:
    """A signed covariate layout plus the metadata estimators need.

    ``matrix`` has 2r rows where r is the number of rows per arm (n units, or
    m clusters for cluster-total layouts).  ``divisor`` is always the number
    of individuals, so cluster-level systems feed the same estimator code and
    still estimate the individual-level average effect.
    """

    matrix: np.ndarray
    kind: str  # "I" | "II" | "custom"
    labels: tuple[str, ...]
    level: str = "unit"  # "unit" | "cluster"
    divisor: int | None = None
    cluster_ids: np.ndarray | None = None
    intercept_cols: tuple[int, int] | None = None  # (control, treatment)
    x: np.ndarray | None = None  # raw covariates the layout was built from

    def __post_init__(self):
        matrix = np.ascontiguousarray(np.asarray(self.matrix, dtype=float))
        if matrix.ndim != 2 or matrix.shape[0] % 2:
            raise ValueError("covariate layout must be a 2r x l matrix")
        matrix.flags.writeable = False
        object.__setattr__(self, "matrix", matrix)
        if len(self.labels) != matrix.shape[1]:
            raise ValueError("one label per column required")

    @property
    def rows_per_arm(self) -> int:
        return self.matrix.shape[0] // 2

    @property
    def n_columns(self) -> int:
        return self.matrix.shape[1]


def zero_center(x: np.ndarray) -> np.ndarray:
    """Subtract column means; ordering untouched."""
    x = np.asarray(x, dtype=float)
    return x - x.mean(axis=0)


def _as_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValueError("covariates must form an n x k matrix")
    return x


def _warn_if_uncentered(x: np.ndarray) -> None:
    if x.size == 0:
        return
    scale = max(1.0, float(np.abs(x).max()))
    if np.abs(x.sum(axis=0)).max() > 1e-8 * scale * x.shape[0]:
        warnings.warn(
            "covariates are not zero-centered; intercept contrasts lose their "
            "direct interpretation (estimates remain well-defined)",
            stacklevel=3,
        )


def spec_common_slopes(x) -> CovariateSpec:
    """Common-slopes layout: per-arm intercepts plus one slope per covariate."""
    x = _as_matrix(x)
    _warn_if_uncentered(x)
    n, k = x.shape
    one = np.ones((n, 1))
    zero = np.zeros((n, 1))
    matrix = np.vstack(
        [np.hstack([-one, zero, -x]), np.hstack([zero, one, x])]
    )
    labels = ("intercept_control", "intercept_treated") + tuple(f"x{j}" for j in range(k))
    return CovariateSpec(matrix, "I", labels, intercept_cols=(0, 1), x=x)


def spec_separate_slopes(x) -> CovariateSpec:
    """Separate-slopes layout: each arm gets its own intercept and slopes."""
    x = _as_matrix(x)
    _warn_if_uncentered(x)
    n, k = x.shape
    one = np.ones((n, 1))
    zn = np.zeros((n, 1))
    zk = np.zeros((n, k))
    matrix = np.vstack(
        [np.hstack([-one, -x, zn, zk]), np.hstack([zn, zk, one, x])]
    )
    labels = (
        ("intercept_control",)
        + tuple(f"x{j}_control" for j in range(k))
        + ("intercept_treated",)
        + tuple(f"x{j}_treated" for j in range(k))
    )
    return CovariateSpec(matrix, "II", labels, intercept_cols=(0, k + 1), x=x)


# The two-arm layouts are known as specifications I and II in the design-based
# literature; keep the short aliases callers will reach for.
spec_I = spec_common_slopes
spec_II = spec_separate_slopes


def cluster_totals(x, cluster_ids: Sequence[int]) -> np.ndarray:
    """Per-cluster column totals, clusters ordered by ascending id."""
    x = _as_matrix(x)
    ids = np.asarray(cluster_ids)
    if ids.shape[0] != x.shape[0]:
        raise ValueError("one cluster id per row required")
    if np.issubdtype(ids.dtype, np.floating) and np.isnan(ids).any():
        raise ValueError("cluster ids contain missing values")
    unique, index = _cluster_index(ids)
    out = np.zeros((unique.shape[0], x.shape[1]))
    np.add.at(out, index, x)
    return out


def spec_cluster(x, cluster_ids: Sequence[int], spec_kind: str = "II") -> CovariateSpec:
    """Cluster-total layout over [cluster size | covariate totals].

    The totaled intercept column turns into cluster sizes, which is what lets
    these layouts absorb size-driven variation.  Row count is 2m; the stored
    divisor stays at n so conjugate estimates target the individual-level
    average effect.
    """
    x = _as_matrix(x)
    n = x.shape[0]
    ids = np.asarray(cluster_ids)
    xt = np.hstack([np.ones((n, 1)), x])
    totals = cluster_totals(xt, ids)  # m x (k+1), first column = cluster sizes
    m, kp1 = totals.shape
    one = np.ones((m, 1))
    zm = np.zeros((m, 1))
    zk = np.zeros((m, kp1))
    if spec_kind == "II":
        matrix = np.vstack(
            [np.hstack([-one, zm, -totals, zk]), np.hstack([zm, one, zk, totals])]
        )
        labels = (
            ("intercept_control", "intercept_treated")
            + ("cluster_size_control",)
            + tuple(f"x{j}_control_total" for j in range(kp1 - 1))
            + ("cluster_size_treated",)
            + tuple(f"x{j}_treated_total" for j in range(kp1 - 1))
        )
        kind = "II"
    elif spec_kind == "I":
        matrix = np.vstack(
            [np.hstack([-one, zm, -totals]), np.hstack([zm, one, totals])]
        )
        labels = (
            ("intercept_control", "intercept_treated", "cluster_size")
            + tuple(f"x{j}_total" for j in range(kp1 - 1))
        )
        kind = "I"
    else:
        raise ValueError("spec_kind must be 'I' or 'II'")
    return CovariateSpec(
        matrix,
        kind,
        labels,
        level="cluster",
        divisor=n,
        cluster_ids=ids.astype(np.int64),
        intercept_cols=(0, 1),
        x=totals,
    )


def add_invprop_column(spec: CovariateSpec, design: Design) -> CovariateSpec:
    """Append the zero-centered reciprocal-assignment-probability column.

    With this column in the layout, ordinary least squares satisfies the
    intercept-contrast identity on any identified design: the reciprocal
    probabilities land in the fitted column space, so the weighted residual
    term of the estimator vanishes.  Each arm's block is centered separately
    (the raw values are arm-specific), which keeps the appended column summing
    to zero and makes it identically zero under equal-probability designs.
    """
    if spec.level != "unit":
        raise ValueError("the reciprocal-probability column applies to unit-level layouts")
    n = spec.rows_per_arm
    if design.n != n:
        raise ValueError("design and layout sizes disagree")
    raw = 1.0 / design.marginals
    col = np.concatenate([raw[:n] - raw[:n].mean(), raw[n:] - raw[n:].mean()])
    matrix = np.hstack([spec.matrix, col[:, None]])
    return CovariateSpec(
        matrix,
        spec.kind,
        spec.labels + ("inv_propensity",),
        level=spec.level,
        divisor=spec.divisor,
        cluster_ids=spec.cluster_ids,
        intercept_cols=spec.intercept_cols,
        x=spec.x,
    )
