"""Shared oracle helpers: exhaustive enumeration is the ground truth."""

import numpy as np
import pytest

from dbexp import enumerate_assignments


def enumeration_moments(design, statistic):
    """Exact mean and variance of a per-realization statistic over the design."""
    values = []
    probs = []
    for realization, prob in enumerate_assignments(design):
        values.append(statistic(realization))
        probs.append(prob)
    values = np.asarray(values, dtype=float)
    probs = np.asarray(probs, dtype=float)
    mean = float(probs @ values)
    var = float(probs @ (values - mean) ** 2)
    return mean, var


def enumeration_vector_mean(design, statistic):
    total = None
    for realization, prob in enumerate_assignments(design):
        value = np.asarray(statistic(realization), dtype=float)
        total = prob * value if total is None else total + prob * value
    return total


def weighted_indicator_covariance(design):
    """Covariance of the inverse-probability indicator vector, by enumeration."""
    mean = np.zeros(2 * design.n)
    second = np.zeros((2 * design.n, 2 * design.n))
    for realization, prob in enumerate_assignments(design):
        w = realization.indicator_diagonal() / design.marginals
        mean += prob * w
        second += prob * np.outer(w, w)
    return second - np.outer(mean, mean)


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
