import warnings

import numpy as np
import pytest

from dbexp import (
    AssignmentRealization,
    BoundConvergenceError,
    BoundMatrix,
    DesignMatrix,
    ObservedOutcomes,
    StackedOutcomes,
    as_bound,
    b_opt,
    bound_estimate_2r_borrowed,
    bound_estimate_greg,
    bound_estimate_ht,
    cluster_bound,
    coef_2r,
    coef_fixed,
    compare_bounds,
    design_matrix,
    draw,
    enumerate_assignments,
    interval_from_bound,
    iterative_bound,
    make_bernoulli,
    make_cluster,
    make_complete,
    precision_test,
    spec_II,
    zero_center,
)
from conftest import enumeration_moments
from dbexp._linalg import sym_eigvals

CLUSTER_IDS = np.array([1, 1, 2, 3, 4])  # 4 clusters, n = 5


def _cluster_design():
    return make_cluster(CLUSTER_IDS, 2)


def test_as_bound_complete_2_1_structure():
    dmat = design_matrix(make_complete(2, 1))
    bound = as_bound(dmat)
    # every row has two jointly unobservable partners, so the diagonal grows by 2
    np.testing.assert_allclose(np.diag(bound.values - dmat.values), 2.0)
    assert bound.identified
    np.testing.assert_allclose(bound.values[dmat.mask], 0.0)
    assert sym_eigvals(bound.values - dmat.values).min() >= -1e-12


def test_mask_never_empty():
    for design in (make_complete(4, 2), make_bernoulli([0.3, 0.6, 0.5]), _cluster_design()):
        assert design_matrix(design).mask.sum() > 0


def test_as_bound_sharp_null_exact_for_complete_randomization():
    rng = np.random.default_rng(0)
    for n, n1 in ((4, 2), (6, 3), (7, 3)):
        dmat = design_matrix(make_complete(n, n1))
        bound = as_bound(dmat)
        w = rng.standard_normal(n)
        y = np.concatenate([-w, w])
        assert y @ bound.values @ y == pytest.approx(y @ dmat.values @ y, abs=1e-10)


def test_as_bound_gershgorin_diagonal_identity():
    for design in (make_complete(5, 2), make_bernoulli([0.2, 0.5, 0.7, 0.6])):
        dmat = design_matrix(design)
        diff = as_bound(dmat).values - dmat.values
        offdiag_sums = np.abs(diff - np.diag(np.diag(diff))).sum(axis=1)
        np.testing.assert_allclose(np.diag(diff), offdiag_sums, atol=1e-12)


def test_iterative_bound_converges_and_certifies():
    for design in (make_complete(2, 1), make_complete(4, 2)):
        dmat = design_matrix(design)
        bound = iterative_bound(dmat)
        assert bound.identified
        np.testing.assert_allclose(bound.values[dmat.mask], 0.0)
        assert sym_eigvals(bound.values - dmat.values).min() >= -1e-8
        assert len(bound.min_eig_trace) == bound.iterations + 1


def test_iterative_bound_on_two_cluster_design():
    with pytest.warns(UserWarning):
        design = make_cluster([1, 1, 2, 2], 1)
    dmat = design_matrix(design)
    bound = iterative_bound(dmat)
    assert bound.identified  # unlike the analytic cluster bound for this design
    comparison = compare_bounds(bound, as_bound(dmat))
    assert comparison.verdict in ("a_tighter", "tie", "incomparable")
    assert comparison.sharp_null_verdict in ("a_tighter", "tie")


def test_iterative_bound_trivial_fixed_point():
    dmat = design_matrix(make_complete(4, 2))
    clean = DesignMatrix(values=dmat.values, mask=np.zeros_like(dmat.mask), n=dmat.n)
    bound = iterative_bound(clean)
    assert bound.iterations == 0
    np.testing.assert_allclose(bound.values, dmat.values)


def test_iterative_bound_nonconvergence_raises_with_trace():
    dmat = design_matrix(_cluster_design())
    with pytest.raises(BoundConvergenceError) as err:
        iterative_bound(dmat, max_iters=1)
    assert len(err.value.trace) >= 1


def test_cluster_bound_certified_and_sharp_null_exact():
    design = _cluster_design()
    dmat = design_matrix(design)
    bound = cluster_bound(dmat, CLUSTER_IDS)
    assert bound.identified
    np.testing.assert_allclose(bound.values[dmat.mask], 0.0)
    rng = np.random.default_rng(1)
    w = rng.standard_normal(5)
    y = np.concatenate([-w, w])
    assert y @ bound.values @ y == pytest.approx(y @ dmat.values @ y, abs=1e-12)
    # PSD-tighter than the universal bound on cluster designs
    diff = as_bound(dmat).values - bound.values
    assert sym_eigvals(diff).min() >= -1e-8


def test_cluster_bound_two_clusters_not_identified():
    with pytest.warns(UserWarning):
        design = make_cluster([1, 1, 2, 2], 1)
    dmat = design_matrix(design)
    with pytest.warns(UserWarning, match="not identified"):
        bound = cluster_bound(dmat, [1, 1, 2, 2])
    assert not bound.identified
    w = np.array([1.0, 2.0, 3.0, 4.0])
    y = np.concatenate([-w, w])
    assert y @ bound.values @ y == pytest.approx(y @ dmat.values @ y, abs=1e-12)
    assert sym_eigvals(as_bound(dmat).values - bound.values).min() >= -1e-8
    with pytest.raises(ValueError, match="identified"):
        obs = ObservedOutcomes(w, AssignmentRealization([1, 1, 0, 0]))
        bound_estimate_ht(bound, design, obs)


def test_cluster_bound_singletons_match_universal_bound():
    design = make_cluster([1, 2, 3, 4], 2)
    dmat = design_matrix(design)
    c = cluster_bound(dmat, [1, 2, 3, 4])
    np.testing.assert_allclose(c.values, as_bound(dmat).values)


def test_cluster_bound_rejects_non_cluster_designs():
    dmat = design_matrix(make_bernoulli([0.3, 0.5, 0.6, 0.4]))
    with pytest.raises(ValueError):
        cluster_bound(dmat, [1, 1, 2, 2])


def test_compare_bounds_verdicts():
    design = _cluster_design()
    dmat = design_matrix(design)
    universal = as_bound(dmat)
    clustered = cluster_bound(dmat, CLUSTER_IDS)
    comparison = compare_bounds(clustered, universal)
    assert comparison.verdict == "a_tighter"
    assert comparison.sharp_null_verdict in ("a_tighter", "tie")
    flipped = compare_bounds(universal, clustered)
    assert flipped.verdict == "b_tighter"
    assert compare_bounds(universal, universal).verdict == "tie"
    assert comparison.min_eig <= comparison.max_eig


def test_compare_bounds_incomparable_with_heuristics():
    dmat = design_matrix(make_complete(4, 2))
    base = as_bound(dmat)
    u = np.array([1.0, 2.0, 0, 0, 0, 0, 0, 0])
    v = np.array([0, 0, 3.0, 1.0, 0, 0, 0, 0])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        bound_u = BoundMatrix(base.values + np.outer(u, u), "custom", dmat.mask, True)
        bound_v = BoundMatrix(base.values + np.outer(v, v), "custom", dmat.mask, True)
    comparison = compare_bounds(bound_u, bound_v)
    assert comparison.verdict == "incomparable"
    assert comparison.min_eig < 0 < comparison.max_eig
    swapped = compare_bounds(bound_v, bound_u)
    assert swapped.min_eig == pytest.approx(-comparison.max_eig)
    assert swapped.eig_sum == pytest.approx(-comparison.eig_sum)


def test_quadratic_ordering_for_all_bounds():
    design = _cluster_design()
    dmat = design_matrix(design)
    rng = np.random.default_rng(3)
    bounds = [as_bound(dmat), iterative_bound(dmat), cluster_bound(dmat, CLUSTER_IDS)]
    for _ in range(100):
        y = rng.standard_normal(10)
        base = y @ dmat.values @ y
        for bound in bounds:
            assert base <= y @ bound.values @ y + 1e-8 * (y @ y)


def test_bound_estimate_ht_unbiased_all_bound_types():
    rng = np.random.default_rng(4)
    design = _cluster_design()
    dmat = design_matrix(design)
    outcomes = StackedOutcomes.from_arms(rng.standard_normal(5), rng.standard_normal(5))
    for bound in (as_bound(dmat), iterative_bound(dmat), cluster_bound(dmat, CLUSTER_IDS)):
        target = outcomes.values @ bound.values @ outcomes.values / 25.0
        mean, _ = enumeration_moments(
            design,
            lambda r: bound_estimate_ht(
                bound, design, ObservedOutcomes.from_schedule(outcomes, r)
            ),
        )
        assert mean == pytest.approx(target, abs=1e-12)

    complete = make_complete(4, 2)
    dmat_c = design_matrix(complete)
    outcomes_c = StackedOutcomes.from_arms(rng.standard_normal(4), rng.standard_normal(4))
    for bound in (as_bound(dmat_c), iterative_bound(dmat_c)):
        target = outcomes_c.values @ bound.values @ outcomes_c.values / 16.0
        mean, _ = enumeration_moments(
            complete,
            lambda r: bound_estimate_ht(
                bound, complete, ObservedOutcomes.from_schedule(outcomes_c, r)
            ),
        )
        assert mean == pytest.approx(target, abs=1e-12)


def test_bound_estimate_ht_zero_outcomes_and_draw_dispersion():
    design = make_complete(4, 2)
    bound = as_bound(design_matrix(design))
    zeros = ObservedOutcomes(np.zeros(4), AssignmentRealization([1, 1, 0, 0]))
    assert bound_estimate_ht(bound, design, zeros) == 0.0
    # only the mean is pinned: individual draws may overshoot the bound
    # (and carry no sign guarantee in general)
    outcomes = StackedOutcomes.from_arms([1.0, -1.0, 2.0, -2.0], [0.5, 1.5, -0.5, 2.5])
    values = [
        bound_estimate_ht(bound, design, ObservedOutcomes.from_schedule(outcomes, r))
        for r, _ in enumerate_assignments(design)
    ]
    target = outcomes.values @ bound.values @ outcomes.values / 16.0
    assert max(values) > target
    assert min(values) < target


def test_bound_estimate_greg_matches_ht_at_zero_and_is_unbiased_fixed_b():
    rng = np.random.default_rng(5)
    design = make_complete(4, 2)
    dmat = design_matrix(design)
    bound = as_bound(dmat)
    x = zero_center(rng.standard_normal((4, 1)))
    spec = spec_II(x)
    outcomes = StackedOutcomes.from_arms(rng.standard_normal(4), rng.standard_normal(4))
    obs = ObservedOutcomes.from_schedule(outcomes, draw(design, 1))
    zero = coef_fixed(np.zeros(spec.n_columns), spec)
    assert bound_estimate_greg(bound, design, obs, spec, zero) == pytest.approx(
        bound_estimate_ht(bound, design, obs), abs=1e-12
    )
    fixed = coef_fixed(rng.standard_normal(spec.n_columns), spec)
    u = outcomes.values - spec.matrix @ fixed.values
    target = u @ bound.values @ u / 16.0
    mean, _ = enumeration_moments(
        design,
        lambda r: bound_estimate_greg(
            bound, design, ObservedOutcomes.from_schedule(outcomes, r), spec, fixed
        ),
    )
    assert mean == pytest.approx(target, abs=1e-12)


def test_borrowed_estimate_reduces_to_plugin_when_bound_is_the_structure():
    rng = np.random.default_rng(6)
    design = make_complete(6, 3)
    dmat = design_matrix(design)
    x = zero_center(rng.standard_normal((6, 1)))
    spec = spec_II(x)
    outcomes = StackedOutcomes.from_arms(rng.standard_normal(6), rng.standard_normal(6))
    obs = ObservedOutcomes.from_schedule(outcomes, draw(design, 2))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        degenerate = BoundMatrix(dmat.values, "custom", np.zeros_like(dmat.mask), True)
    borrowed = bound_estimate_2r_borrowed(degenerate, design, obs, spec)
    direct = bound_estimate_greg(
        degenerate, design, obs, spec, coef_2r(spec, obs, design)
    )
    assert borrowed == pytest.approx(direct, abs=1e-10)


def test_bound_cache_matches_direct_evaluation():
    from dbexp import BoundCache

    design = _cluster_design()
    dmat = design_matrix(design)
    bound = cluster_bound(dmat, CLUSTER_IDS)
    rng = np.random.default_rng(7)
    x = zero_center(rng.standard_normal((5, 1)))
    spec = spec_II(x)
    outcomes = StackedOutcomes.from_arms(rng.standard_normal(5), rng.standard_normal(5))
    obs = ObservedOutcomes.from_schedule(outcomes, draw(design, 3))
    cache = BoundCache.build(bound, design, spec)
    assert bound_estimate_2r_borrowed(bound, design, obs, spec) == pytest.approx(
        bound_estimate_2r_borrowed(bound, design, obs, spec, cache=cache), abs=1e-12
    )
    assert bound_estimate_ht(bound, design, obs) == pytest.approx(
        bound_estimate_ht(bound, design, obs, cache=BoundCache.build(bound, design)), abs=1e-12
    )


def test_precision_test_degenerate_zero_coefficient():
    design = make_complete(4, 2)
    dmat = design_matrix(design)
    bound = as_bound(dmat)
    x = zero_center(np.array([0.5, -0.5, 1.0, -1.0]))
    spec = spec_II(x)
    outcomes = StackedOutcomes.from_arms(np.ones(4), 2 * np.ones(4))
    obs = ObservedOutcomes.from_schedule(outcomes, draw(design, 0))
    result = precision_test(design, dmat, obs, spec, np.zeros(spec.n_columns), bound)
    assert result.degenerate
    assert result.statistic == 0.0
    assert result.threshold == 0.0
    assert result.p_value == 1.0


def test_precision_test_enumeration_mean_and_directions():
    rng = np.random.default_rng(8)
    design = make_complete(4, 2)
    dmat = design_matrix(design)
    bound = as_bound(dmat)
    x = zero_center(rng.standard_normal((4, 1)))
    spec = spec_II(x)
    y0 = 1.3 * x[:, 0] + 0.2 * rng.standard_normal(4)
    y1 = 1.1 * x[:, 0] + 0.2 * rng.standard_normal(4) + 1.0
    outcomes = StackedOutcomes.from_arms(y0, y1)

    helpful = 0.9 * b_opt(spec, dmat, outcomes).values

    def statistic(b):
        def run(realization):
            obs = ObservedOutcomes.from_schedule(outcomes, realization)
            return precision_test(design, dmat, obs, spec, b, bound).statistic

        return run

    fitted = spec.matrix @ helpful
    u = outcomes.values - fitted
    expected_mean = 2.0 * (fitted @ dmat.values @ u) / design.n
    mean, _ = enumeration_moments(design, statistic(helpful))
    assert mean == pytest.approx(expected_mean, abs=1e-10)
    threshold = -(fitted @ dmat.values @ fitted) / design.n
    assert mean > threshold  # adjustment genuinely helps at this coefficient

    harmful = 60.0 * b_opt(spec, dmat, outcomes).values
    mean_h, _ = enumeration_moments(design, statistic(harmful))
    fitted_h = spec.matrix @ harmful
    threshold_h = -(fitted_h @ dmat.values @ fitted_h) / design.n
    assert mean_h < threshold_h  # oversized adjustment hurts


def test_interval_truncation():
    lo, hi, truncated = interval_from_bound(1.0, -0.5)
    assert truncated and lo == hi == 1.0
    lo, hi, truncated = interval_from_bound(0.0, 4.0, z=2.0)
    assert not truncated
    assert (lo, hi) == (-4.0, 4.0)
