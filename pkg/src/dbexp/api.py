"""Estimator-style front end: configure once, fit on realized data.

Follows the scikit-learn conventions (constructor stores parameters verbatim,
``fit`` returns self, fitted attributes carry a trailing underscore,
``get_params``/``set_params`` round-trip) without depending on scikit-learn.
"""

from __future__ import annotations

import inspect
import warnings

import numpy as np

from . import bounds as _bounds
from . import covariates as _cov
from . import estimators as _est
from .design import Design, design_matrix, enumerate_assignments, support_size
from .estimators import AssignmentRealization, ObservedOutcomes

POINT_ESTIMATORS = ("ht", "ols", "wls_pi", "three_ht", "two_r", "tyranny", "ols_cluster_totals")
BOUND_CHOICES = (
    "none",
    "as",
    "iterative",
    "cluster",
    "borrowed-as",
    "borrowed-iterative",
    "borrowed-cluster",
)


def check_treatment(treated) -> np.ndarray:
    z = np.asarray(treated)
    if z.ndim != 1 or not np.isin(z, (0, 1)).all():
        raise ValueError("treatment must be a one-dimensional 0/1 vector")
    return z.astype(np.int8)


def check_lengths(n: int, **named) -> None:
    for name, arr in named.items():
        if arr is not None and np.asarray(arr).shape[0] != n:
            raise ValueError(f"{name} has {np.asarray(arr).shape[0]} rows, expected {n}")


class AteEstimator:
    """Average-treatment-effect estimator for a known randomization design.

    Parameters
    ----------
    design : Design
        The randomization design the data came from.
    estimator : str
        Point estimator: one of ``ht``, ``ols``, ``wls_pi``, ``three_ht``,
        ``two_r``, ``tyranny``, ``ols_cluster_totals``.
    spec : str
        Covariate layout, "I" (common slopes) or "II" (separate slopes);
        ignored by ``ht``, forced to common slopes by ``tyranny`` and to the
        cluster-total layout by ``ols_cluster_totals``.
    bound : str
        Variance bound used for the interval: ``as``, ``iterative``,
        ``cluster``, one of the ``borrowed-*`` variants (two-stage estimator
        only), or ``none``.
    z : float
        Normal quantile for the interval half-width.
    center : bool
        Zero-center covariates before building the layout.
    """

    def __init__(self, design: Design, estimator: str = "two_r", spec: str = "II",
                 bound: str = "as", z: float = 1.96, center: bool = True):
        self.design = design
        self.estimator = estimator
        self.spec = spec
        self.bound = bound
        self.z = z
        self.center = center

    # -- sklearn-style parameter plumbing --------------------------------
    @classmethod
    def _param_names(cls):
        signature = inspect.signature(cls.__init__)
        return [p for p in signature.parameters if p != "self"]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params) -> "AteEstimator":
        valid = set(self._param_names())
        for key, value in params.items():
            if key not in valid:
                raise ValueError(f"unknown parameter {key!r}")
            setattr(self, key, value)
        return self

    # -- estimation -------------------------------------------------------
    def fit(self, outcome, treated, covariates=None, cluster_ids=None) -> "AteEstimator":
        if not isinstance(self.design, Design):
            raise TypeError("design must be a Design instance")
        if self.estimator not in POINT_ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.bound not in BOUND_CHOICES:
            raise ValueError(f"unknown bound {self.bound!r}")
        if self.bound.startswith("borrowed") and self.estimator != "two_r":
            raise ValueError("borrowed bounds pair with the two-stage estimator only")

        z = check_treatment(treated)
        outcome = np.asarray(outcome, dtype=float)
        check_lengths(z.shape[0], outcome=outcome, covariates=covariates, cluster_ids=cluster_ids)
        if z.shape[0] != self.design.n:
            raise ValueError("data size does not match the design")
        self._warn_if_impossible(z)
        observed = ObservedOutcomes(outcome, AssignmentRealization(z))

        spec = self._build_spec(covariates, cluster_ids)
        coefficient = self._coefficient(spec, observed)
        estimate = _est.greg(observed, self.design, spec, coefficient)
        self.ate_ = estimate.point
        self.coefficient_ = coefficient
        self.spec_ = spec
        self.n_ = self.design.n

        bound_est = self._bound_estimate(spec, observed, coefficient)
        self.variance_bound_ = bound_est
        if bound_est is None:
            self.ci_low_ = self.ci_high_ = None
            self.truncated_ = False
        else:
            lo, hi, truncated = _bounds.interval_from_bound(self.ate_, bound_est, self.z)
            self.ci_low_, self.ci_high_, self.truncated_ = lo, hi, truncated
        return self

    def _warn_if_impossible(self, z) -> None:
        size = support_size(self.design)
        if size is None or size > 100_000:
            return
        target = tuple(int(v) for v in z)
        for realization, prob in enumerate_assignments(self.design):
            if realization.as_tuple() == target and prob > 0:
                return
        warnings.warn(
            "the realized assignment has probability ~0 under the declared design",
            stacklevel=2,
        )

    def _build_spec(self, covariates, cluster_ids):
        if self.estimator == "ht":
            return None
        x = np.empty((self.design.n, 0)) if covariates is None else np.asarray(covariates, float)
        if x.ndim == 1:
            x = x[:, None]
        if self.center and x.size:
            x = _cov.zero_center(x)
        if self.estimator == "ols_cluster_totals":
            if cluster_ids is None:
                raise ValueError("ols_cluster_totals needs cluster ids")
            return _cov.spec_cluster(x, cluster_ids, "II" if self.spec == "II" else "I")
        if self.estimator == "tyranny" or self.spec == "I":
            return _cov.spec_common_slopes(x)
        if self.spec == "II":
            return _cov.spec_separate_slopes(x)
        raise ValueError(f"unknown spec {self.spec!r}")

    def _coefficient(self, spec, observed):
        name = self.estimator
        if name == "ht":
            return None
        if name == "ols":
            return _est.coef_ols(spec, observed)
        if name == "wls_pi":
            return _est.coef_wls_pi(spec, observed, self.design)
        if name == "three_ht":
            return _est.coef_3ht(spec, observed, self.design)
        if name == "two_r":
            return _est.coef_2r(spec, observed, self.design)
        if name == "tyranny":
            return _est.coef_tyranny(spec, observed, self.design)
        if name == "ols_cluster_totals":
            return _est.coef_ols_cluster_totals(spec, observed)
        raise ValueError(name)  # pragma: no cover

    def _bound_matrix(self, method: str):
        if self.spec_ is not None and self.spec_.level == "cluster":
            from .design import cluster_level_design

            sys_design, _ = cluster_level_design(self.design)
            dmat = design_matrix(sys_design)
            cluster_ids = np.arange(sys_design.n)
        else:
            dmat = design_matrix(self.design)
            cluster_ids = None
        if method == "as":
            return _bounds.as_bound(dmat)
        if method == "iterative":
            return _bounds.iterative_bound(dmat)
        if method == "cluster":
            if cluster_ids is None:
                prov = self.design.provenance
                if getattr(prov, "kind", None) != "cluster":
                    raise ValueError("the cluster bound needs a cluster-randomized design")
                cluster_ids = prov.params["cluster_ids"]
            return _bounds.cluster_bound(dmat, cluster_ids)
        raise ValueError(method)  # pragma: no cover

    def _bound_estimate(self, spec, observed, coefficient):
        if self.bound == "none":
            return None
        if self.bound.startswith("borrowed-"):
            matrix = self._bound_matrix(self.bound.split("-", 1)[1])
            return _bounds.bound_estimate_2r_borrowed(matrix, self.design, observed, spec)
        matrix = self._bound_matrix(self.bound)
        if coefficient is None:
            return _bounds.bound_estimate_ht(matrix, self.design, observed)
        return _bounds.bound_estimate_greg(matrix, self.design, observed, spec, coefficient)
