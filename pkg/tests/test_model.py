import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pooledlogit.errors import DomainError, MissingCovariate, StrictModePrivacyViolation, ValidationError
from pooledlogit.model import (
    IDENTITY,
    LOG,
    Factor,
    MicroRecord,
    ModelSpec,
    StudyMeta,
    Term,
    Transform,
    custom,
    evaluate_term,
    power,
    register_transform,
    term,
    term_column,
    unregister_transform,
    validate_model_spec,
)

covariates = st.sampled_from(["x", "z1", "z2"])
transforms = st.one_of(st.just(IDENTITY), st.just(LOG), st.integers(2, 4).map(power))
factors = st.builds(Factor, covariates, transforms)
terms = st.builds(Term, covariates, transforms, st.one_of(st.none(), factors))


def test_transform_tags_round_trip():
    for t in (IDENTITY, LOG, power(3), custom("sqrt")):
        assert Transform.from_tag(t.tag) == t
    assert power(3).tag == "pow:3"
    assert custom("sqrt").tag == "custom:sqrt"


def test_transform_rejects_bad_input():
    with pytest.raises(ValidationError):
        Transform("power", power=0)
    with pytest.raises(ValidationError):
        Transform("square")
    with pytest.raises(ValidationError):
        Transform.from_tag("pow:x")
    with pytest.raises(DomainError):
        LOG.apply(0.0)
    with pytest.raises(DomainError):
        LOG.apply_array(np.array([1.0, -2.0]))


def test_custom_transform_must_be_registered():
    t = custom("cuberoot")
    with pytest.raises(DomainError):
        t.apply(8.0)
    register_transform("cuberoot", np.cbrt)
    try:
        assert t.apply(8.0) == pytest.approx(2.0)
        assert t.label_for("x") == "cuberoot(x)"
    finally:
        unregister_transform("cuberoot")


def test_term_names_and_keys():
    assert term("x").name == "x"
    assert term("z1", LOG).name == "log(z1)"
    assert term("x", power(2)).name == "x^2"
    assert term("x", times="z2").name == "x*z2"
    # a product commutes, so both orders are the same column
    assert term("x", times="z2").key == term("z2", times="x").key
    with pytest.raises(ValidationError):
        ModelSpec((term("x", times="z2"), term("z2", times="x")))
    with pytest.raises(ValidationError):
        ModelSpec((term("x"), term("x")))


def test_evaluate_term_handles_missing_and_domain():
    rec = MicroRecord("a", 1, {"x": -1.0})
    assert evaluate_term(term("x", power(3)), rec) == -1.0
    with pytest.raises(MissingCovariate, match="z2"):
        evaluate_term(term("z2"), rec)
    with pytest.raises(DomainError, match="a"):
        evaluate_term(term("x", LOG), rec)


def test_record_and_meta_validation():
    with pytest.raises(ValidationError):
        MicroRecord("a", 2, {})
    with pytest.raises(ValidationError):
        StudyMeta(0, 10)
    with pytest.raises(ValidationError):
        StudyMeta(5, 10, prevalence=1.0)


@given(st.lists(terms, min_size=1, max_size=4, unique_by=lambda t: t.key), st.booleans())
def test_spec_dict_round_trip(ts, baseline):
    spec = ModelSpec(tuple(ts), baseline)
    assert ModelSpec.from_dict(spec.to_dict()) == spec


@given(terms, st.lists(st.tuples(st.floats(0.01, 50), st.floats(0.01, 50), st.floats(0.01, 5)), min_size=1, max_size=20))
def test_term_column_matches_evaluate_term(t, rows):
    records = [MicroRecord(f"r{i}", 0, {"x": a, "z1": b, "z2": c}) for i, (a, b, c) in enumerate(rows)]
    cols = {k: np.array([r.covariates[k] for r in records]) for k in ("x", "z1", "z2")}
    expected = [evaluate_term(t, r) for r in records]
    np.testing.assert_allclose(term_column(t, cols), expected, rtol=1e-15, atol=0)


def test_polynomial_guard():
    spec = ModelSpec((term("x"), term("x", power(2)), term("x", power(3))))
    warnings = validate_model_spec(spec, g_min=3)
    assert [w.covariate for w in warnings] == ["x"]
    assert "x^3" in str(warnings[0])
    with pytest.raises(StrictModePrivacyViolation):
        validate_model_spec(spec, g_min=3, strict=True)
    # more pool members than transforms: the sums do not pin down the values
    assert validate_model_spec(spec, g_min=4, strict=True) == []


def test_interactions_between_covariates_do_not_count():
    spec = ModelSpec((term("x"), term("x", times="z2"), term("z2")))
    assert validate_model_spec(spec, g_min=2) == []
    # x*x is one more transform of x
    spec = ModelSpec((term("x"), term("x", times="x")))
    assert [w.covariate for w in validate_model_spec(spec, g_min=2)] == ["x"]


def test_log_of_product_is_not_product_of_logs():
    recs = [MicroRecord("a", 1, {"z1": 2.0}), MicroRecord("b", 1, {"z1": 3.0})]
    pooled = sum(evaluate_term(term("z1", LOG), r) for r in recs)
    assert pooled == pytest.approx(math.log(6.0))
    assert pooled != pytest.approx(math.log(5.0))
