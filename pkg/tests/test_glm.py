import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import chi2_sf_by_quadrature
from pooledlogit import glm
from pooledlogit.errors import (
    DimensionMismatch,
    NoPrevalence,
    NotNested,
    RankDeficient,
    RowMismatch,
    Separation,
    ValidationError,
)
from pooledlogit.glm import Design, DesignRow
from pooledlogit.model import ModelSpec, StudyMeta, term
from pooledlogit.pooling import aggregate_centralized, build_plan

# brute-force grid maximiser (tests/oracles.py) on tests/fixtures/glm12.csv
GLM12_ORACLE = (-0.4982870998047119, 1.4012702838959064)
GLM12_ORACLE_LOGLIK = -6.410553770710349


def random_design(seed, n=None, k=None, offsets=True):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(15, 60))
    k = k or int(rng.integers(1, 4))
    X = np.column_stack([np.ones(n), rng.normal(size=(n, k))])
    beta = rng.normal(scale=0.7, size=k + 1)
    off = rng.normal(scale=0.5, size=n) if offsets else np.zeros(n)
    y = (rng.random(n) < 1 / (1 + np.exp(-(X @ beta + off)))).astype(int)
    if y.all() or not y.any():
        y[0] = 1 - y[0]
    return Design(X, y, off, tuple(f"b{i}" for i in range(k + 1)))


def glm12_design(rows):
    return Design(np.array([[1.0, x] for _, x in rows]), np.array([y for y, _ in rows]), np.zeros(len(rows)), ("intercept", "x"))


def test_fixture_matches_grid_oracle(glm12_rows):
    res = glm.fit(glm12_design(glm12_rows))
    assert res.converged
    np.testing.assert_allclose(res.coefficients, GLM12_ORACLE, atol=1e-4)
    assert res.log_likelihood == pytest.approx(GLM12_ORACLE_LOGLIK, abs=1e-8)


def test_loglik_at_fit_matches_result(glm12_rows):
    d = glm12_design(glm12_rows)
    res = glm.fit(d)
    assert glm.log_likelihood_at(d, res.coefficients) == pytest.approx(res.log_likelihood, abs=1e-10)


def test_loglik_closed_forms():
    rows = [DesignRow(1, (1.0,)), DesignRow(0, (2.0,)), DesignRow(1, (-1.0,))]
    assert glm.log_likelihood_at(rows, [0.0]) == pytest.approx(3 * math.log(0.5))
    assert glm.log_likelihood_at([DesignRow(1, (1.0,), math.log(3))], [0.0]) == pytest.approx(math.log(0.75))
    # stable for huge linear predictors
    assert glm.log_likelihood_at([DesignRow(1, (1.0,)), DesignRow(0, (1.0,))], [800.0]) == pytest.approx(-800.0)
    with pytest.raises(DimensionMismatch):
        glm.log_likelihood_at(rows, [0.0, 1.0])


def test_intercept_only_is_logit_of_proportion():
    rows = [DesignRow(int(i < 3), (1.0,)) for i in range(10)]
    res = glm.fit(rows)
    assert res.coefficients[0] == pytest.approx(math.log(0.3 / 0.7), abs=1e-10)
    assert round(res.coefficients[0], 4) == -0.8473


@pytest.mark.parametrize("seed", range(10))
def test_score_matches_finite_differences(seed):
    d = random_design(seed)
    rng = np.random.default_rng(1000 + seed)
    for _ in range(10):
        beta = rng.normal(size=d.X.shape[1])
        h = 1e-5
        fd = np.array(
            [
                (glm.log_likelihood_at(d, beta + h * e) - glm.log_likelihood_at(d, beta - h * e)) / (2 * h)
                for e in np.eye(len(beta))
            ]
        )
        analytic = glm.score_at(d, beta)
        np.testing.assert_allclose(analytic, fd, rtol=1e-6, atol=1e-6 * np.max(np.abs(analytic)))


def nonincreasing(history):
    # steps that leave the deviance unchanged up to rounding are allowed
    return all(b <= a + glm.DEV_RESOLUTION * (abs(a) + 1.0) for a, b in zip(history, history[1:]))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6))
def test_converged_fits_have_small_score_and_monotone_deviance(seed):
    d = random_design(seed)
    try:
        res = glm.fit(d)
    except Separation:
        return
    assert nonincreasing(res.deviance_history)
    if res.converged:
        assert res.score_norm < glm.TOL
        cov = res.covariance
        assert np.array_equal(cov, cov.T)
        assert np.all(np.linalg.eigvalsh(cov) > 0)


def test_offset_shift_moves_intercept_only():
    d = random_design(7, n=80, k=2)
    c = 1.7
    a = glm.fit(d)
    b = glm.fit(Design(d.X, d.y, d.offset + c, d.names))
    assert b.coefficients[0] == pytest.approx(a.coefficients[0] - c, abs=1e-8)
    np.testing.assert_allclose(b.coefficients[1:], a.coefficients[1:], atol=1e-8)


def test_unit_pools_equal_standard_fit(cohort):
    spec = ModelSpec((term("x"), term("z2"), term("x", times="z2")))
    cases = [r.subject_id for r in cohort if r.outcome]
    controls = [r.subject_id for r in cohort if not r.outcome]
    plan = build_plan(StudyMeta(len(cases), len(controls)), cases, controls, 1, seed=4, privacy=False)
    rows = aggregate_centralized(plan, cohort, spec, mode="real")
    ratio = math.log(len(cases) / len(controls))
    assert all(r.offset == ratio for r in rows)
    pooled = glm.fit(glm.pooled_design(rows, spec))
    standard = glm.fit(glm.individual_design(cohort, spec))
    np.testing.assert_allclose(pooled.coefficients[1:], standard.coefficients[1:], atol=1e-8)
    assert pooled.coefficients[0] == pytest.approx(standard.coefficients[0] - ratio, abs=1e-8)


def test_separation_is_detected():
    rows = [DesignRow(int(x > 0), (1.0, x)) for x in (-3, -2, -1, 1, 2, 3)]
    with pytest.raises(Separation):
        glm.fit(rows)


def test_rank_deficiency_is_detected():
    rows = [DesignRow(i % 2, (1.0, float(i), 2.0 * i)) for i in range(8)]
    with pytest.raises(RankDeficient):
        glm.fit(rows)


def test_one_class_is_rejected():
    with pytest.raises(ValidationError):
        glm.fit([DesignRow(1, (1.0,)), DesignRow(1, (1.0,))])


def test_non_convergence_is_flagged_not_raised(glm12_rows):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = glm.fit(glm12_design(glm12_rows), max_iter=1)
    assert not res.converged
    assert any(issubclass(w.category, glm.ConvergenceWarning) for w in caught)


def test_ridge_shrinks(glm12_rows):
    plain = glm.fit(glm12_design(glm12_rows))
    ridged = glm.fit(glm12_design(glm12_rows), ridge=5.0)
    assert np.linalg.norm(ridged.coefficients) < np.linalg.norm(plain.coefficients)


def test_lrt(glm12_rows):
    d = glm12_design(glm12_rows)
    full = glm.fit(d)
    reduced = glm.fit(Design(d.X[:, :1], d.y, d.offset, ("intercept",)))
    res = glm.likelihood_ratio_test(full, reduced)
    expected = 2 * (glm.log_likelihood_at(d, full.coefficients) - glm.log_likelihood_at(Design(d.X[:, :1], d.y, d.offset, ("intercept",)), reduced.coefficients))
    assert res.statistic == pytest.approx(expected, abs=1e-8)
    assert res.df == 1
    assert res.p_value == pytest.approx(chi2_sf_by_quadrature(res.statistic, 1), abs=1e-8)
    same = glm.likelihood_ratio_test(full, full)
    assert same.statistic == 0.0 and same.p_value == 1.0
    with pytest.raises(NotNested):
        glm.likelihood_ratio_test(reduced, full)
    other = glm.fit(Design(d.X[:-1], d.y[:-1], d.offset[:-1], d.names))
    with pytest.raises(RowMismatch):
        glm.likelihood_ratio_test(full, other)


def test_chi2_tail_at_five_percent_quantile():
    p = chi2_sf_by_quadrature(3.841, 1)
    assert p == pytest.approx(0.05, abs=1e-3)


def test_recover_baseline():
    res = glm.FitResult(np.array([-0.382]), np.array([0.1]), np.eye(1), 0.0, 0.0, 1, True, 1)
    assert glm.recover_baseline(res, StudyMeta(1, 1, 0.068)) == pytest.approx(-3.0, abs=1e-3)
    assert glm.recover_baseline(res, StudyMeta(1, 1, 0.5)) == -0.382
    with pytest.raises(NoPrevalence):
        glm.recover_baseline(res, StudyMeta(1, 1))


def test_wald_ci():
    res = glm.FitResult(np.array([0.25, 1.0]), np.array([0.0293, 0.0]), np.eye(2), 0.0, 0.0, 1, True, 1)
    ci = glm.wald_ci(res, 0.95)
    np.testing.assert_allclose(ci[0], (0.1926, 0.3074), atol=1e-4)
    assert tuple(ci[1]) == (1.0, 1.0)
    np.testing.assert_array_equal(glm.wald_ci(res, 0.0)[:, 0], res.coefficients)


def test_report_and_record(glm12_rows):
    res = glm.fit(glm12_design(glm12_rows))
    text = res.report()
    assert "intercept" in text and "95% CI" in text and text.endswith("\n")
    d = res.to_dict()
    assert d["names"] == ["intercept", "x"] and d["converged"] is True
