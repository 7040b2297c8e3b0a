"""Population-level optimal coefficients.

These need the full potential-outcome schedule, so they serve as oracles for
optimality tests and as inputs to bound tightening, not as estimators.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._linalg import pinv, pinv_solve
from .covariates import CovariateSpec
from .design import Design, DesignMatrix, StackedOutcomes, _cluster_index

FOC_RTOL = 1e-8


@dataclass(frozen=True)
class OptimalCoefficient:
    values: np.ndarray
    objective: str  # "true_variance" or "bound:<method>"
    note: str = ""

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))


def _check_foc(normal, rhs, b, what: str, floor: float = 0.0) -> None:
    # a numerically-zero right-hand side (the structure annihilates the
    # layout) satisfies the condition within float residue
    resid = float(np.linalg.norm(normal @ b - rhs))
    if resid > max(FOC_RTOL * float(np.linalg.norm(rhs)), PINV_FLOOR * floor):
        raise RuntimeError(f"{what}: first-order condition violated (residual {resid:g})")


PINV_FLOOR = 1e-12


def _solve_normal(core, matrix, target, what: str):
    """Solve (X' core X) b = X' core target with a cutoff anchored to the
    factors entering the product (cancellation can zero the product exactly)."""
    xd = matrix.T @ core
    normal = xd @ matrix
    rhs = xd @ target
    mnorm = float(np.linalg.norm(matrix))
    cnorm = float(np.linalg.norm(core))
    b, deficient = pinv_solve(normal, rhs, scale=mnorm * cnorm * mnorm)
    floor = mnorm * cnorm * max(float(np.linalg.norm(target)), 1.0)
    _check_foc(normal, rhs, b, what, floor=floor)
    return b, deficient


def b_opt(spec: CovariateSpec, dmat: DesignMatrix, outcomes: StackedOutcomes) -> OptimalCoefficient:
    """Variance-minimizing fixed coefficient for this design and layout."""
    outcomes = _match_level(spec, outcomes)
    b, deficient = _solve_normal(dmat.values, spec.matrix, outcomes.values, "optimal coefficient")
    note = "normal matrix rank deficient; minimum-norm member returned" if deficient else ""
    return OptimalCoefficient(b, "true_variance", note)


def b_opt_family(
    spec: CovariateSpec,
    dmat: DesignMatrix,
    outcomes: StackedOutcomes,
    z,
) -> OptimalCoefficient:
    """The solution family member indexed by ``z``.

    Every member solves the same first-order condition, so all conjugate
    variances coincide; ``z`` picks the representative.
    """
    outcomes = _match_level(spec, outcomes)
    z = np.asarray(z, dtype=float)
    if z.shape != (spec.n_columns,):
        raise ValueError("family parameter must have one entry per layout column")
    xd = spec.matrix.T @ dmat.values
    normal = xd @ spec.matrix
    rhs = xd @ outcomes.values
    mnorm = float(np.linalg.norm(spec.matrix))
    cnorm = float(np.linalg.norm(dmat.values))
    ginv = pinv(normal, scale=mnorm * cnorm * mnorm)
    b = ginv @ rhs + (np.eye(spec.n_columns) - ginv @ normal) @ z
    floor = mnorm * cnorm * max(float(np.linalg.norm(outcomes.values)), 1.0)
    _check_foc(normal, rhs, b, "optimal-family coefficient", floor=floor)
    return OptimalCoefficient(b, "true_variance", "family member")


def b_tilde_opt(spec: CovariateSpec, bound, outcomes: StackedOutcomes) -> OptimalCoefficient:
    """Coefficient minimizing the *bound* quadratic rather than the variance."""
    outcomes = _match_level(spec, outcomes)
    b, _ = _solve_normal(bound.values, spec.matrix, outcomes.values, "bound-minimizing coefficient")
    return OptimalCoefficient(b, f"bound:{bound.method}")


def b_sep(
    spec: CovariateSpec,
    dmat: DesignMatrix,
    outcomes: StackedOutcomes,
    design: Design,
) -> OptimalCoefficient:
    """Arm-separated optimal coefficient for equal-probability designs.

    Each arm's block is fit against its own diagonal block of the covariance
    structure; valid only when every unit shares the same treatment
    probability (separability fails otherwise).
    """
    if spec.kind != "II":
        raise ValueError("the separated solution is defined for separate-slopes layouts")
    pi1 = design.marginals[design.n :]
    if not np.allclose(pi1, pi1[0], atol=1e-12):
        raise ValueError("separated solution requires equal treatment probabilities")
    outcomes = _match_level(spec, outcomes)
    if spec.x is None:
        raise ValueError("layout does not carry its raw covariates")
    r = spec.rows_per_arm
    if spec.level == "cluster":
        xt = spec.x  # already [sizes | totals]
    else:
        xt = np.hstack([np.ones((r, 1)), spec.x])
    d00 = dmat.block(0, 0)
    d11 = dmat.block(1, 1)
    xtd0 = xt.T @ d00
    xtd1 = xt.T @ d11
    anchor0 = float(np.linalg.norm(xt)) ** 2 * float(np.linalg.norm(d00))
    anchor1 = float(np.linalg.norm(xt)) ** 2 * float(np.linalg.norm(d11))
    b0, _ = pinv_solve(xtd0 @ xt, xtd0 @ outcomes.control, scale=anchor0)
    b1, _ = pinv_solve(xtd1 @ xt, xtd1 @ outcomes.treated, scale=anchor1)
    b = np.concatenate([b0, b1])
    xd = spec.matrix.T @ dmat.values
    floor = (
        float(np.linalg.norm(spec.matrix))
        * float(np.linalg.norm(dmat.values))
        * max(float(np.linalg.norm(outcomes.values)), 1.0)
    )
    _check_foc(xd @ spec.matrix, xd @ outcomes.values, b, "separated coefficient", floor=floor)
    return OptimalCoefficient(b, "true_variance", "arm-separated solution")


def _match_level(spec: CovariateSpec, outcomes: StackedOutcomes) -> StackedOutcomes:
    if outcomes.n == spec.rows_per_arm:
        return outcomes
    if spec.level == "cluster":
        from .estimators import stack_clusters

        return stack_clusters(outcomes, spec.cluster_ids)
    raise ValueError("outcome schedule does not match the layout's row count")


# -- finite-population moment formulas ----------------------------------------

POPULATION_METHODS = ("ols_II", "tyranny_I", "tyranny_II", "ols_cluster_II", "tyranny_cluster")


def _pop_var(x: np.ndarray) -> np.ndarray:
    xc = x - x.mean(axis=0)
    return xc.T @ xc / x.shape[0]


def _pop_cov(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    xc = x - x.mean(axis=0)
    return xc.T @ (y - y.mean()) / x.shape[0]


def _slopes(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    s, _ = pinv_solve(_pop_var(x), _pop_cov(x, y))
    return s


def b_population(
    method: str,
    x,
    outcomes: StackedOutcomes,
    design: Design,
) -> OptimalCoefficient:
    """Closed-form finite-population coefficients for the named methods.

    Unit-level methods require complete randomization; cluster methods require
    complete randomization of clusters.  The returned vector is laid out for
    the matching standard unit-level layout (common or separate slopes over
    the raw covariates; cluster methods use the covariates-with-intercept
    totals and also slot into the separate-slopes layout).
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    y0 = outcomes.control
    y1 = outcomes.treated
    n = outcomes.n
    kind = design.kind

    if method in ("ols_II", "tyranny_I", "tyranny_II"):
        if kind != "complete":
            raise ValueError(f"{method} is defined for complete randomization")
        n1 = design.provenance.params["n1"]
        n0 = n - n1
        if method == "ols_II":
            b = np.concatenate(
                [[y0.mean()], _slopes(x, y0), [y1.mean()], _slopes(x, y1)]
            )
        else:
            shared = (n1 / n) * _slopes(x, y0) + (n0 / n) * _slopes(x, y1)
            if method == "tyranny_I":
                b = np.concatenate([[y0.mean()], [y1.mean()], shared])
            else:
                b = np.concatenate([[y0.mean()], shared, [y1.mean()], shared])
        return OptimalCoefficient(b, "true_variance", method)

    if method in ("ols_cluster_II", "tyranny_cluster"):
        if kind != "cluster":
            raise ValueError(f"{method} is defined for cluster randomization")
        params = design.provenance.params
        _, index = _cluster_index(params["cluster_ids"])
        m, m1 = params["m"], params["m1"]
        m0 = m - m1
        xt = np.hstack([np.ones((n, 1)), x])
        totals = np.zeros((m, xt.shape[1]))
        np.add.at(totals, index, xt)
        y0c = np.bincount(index, weights=y0, minlength=m)
        y1c = np.bincount(index, weights=y1, minlength=m)
        if method == "ols_cluster_II":
            b = np.concatenate([_slopes(totals, y0c), _slopes(totals, y1c)])
        else:
            shared = (m1 / m) * _slopes(totals, y0c) + (m0 / m) * _slopes(totals, y1c)
            b = np.concatenate([shared, shared])
        return OptimalCoefficient(b, "true_variance", method)

    raise ValueError(f"unknown method {method!r}; choose from {POPULATION_METHODS}")
