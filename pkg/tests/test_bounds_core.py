import dataclasses
import math

import numpy as np
import pytest

from invarlab.bounds_core import (CLASS_K, CLASS_NEITHER, CLASS_P, BoundSet,
                                  MonotonicityError, RangeError, ScalarFn,
                                  StableBoundSet, UnstableBoundSet,
                                  classify_comparison, monotone_inverse,
                                  monotone_inverse_array, validate_bounds)
from invarlab.domain_estimator import prototype_bounds


def sfn(text, var="s", **params):
    return ScalarFn.from_string(text, var=var, params=params)


class TestMonotoneInverse:
    def test_square(self):
        assert monotone_inverse(sfn("s^2"), 4.0, 10.0) == pytest.approx(2.0,
                                                                        abs=1e-9)

    def test_zero_target(self):
        assert monotone_inverse(sfn("s^2"), 0.0, 10.0) == 0.0

    def test_scaled_square_closed_form(self):
        p_lower = 2.0
        f = sfn("p*s^2", p=p_lower)
        assert monotone_inverse(f, 8.0, 10.0) == pytest.approx(
            math.sqrt(8.0 / p_lower), abs=1e-9)

    def test_range_error(self):
        with pytest.raises(RangeError):
            monotone_inverse(sfn("s^2"), 200.0, 10.0)

    def test_monotonicity_error(self):
        with pytest.raises(MonotonicityError):
            monotone_inverse(sfn("s + sin(4*s)"), 1.2, 3.0)

    def test_identity_property_over_catalog(self):
        catalog = [sfn("s"), sfn("s^2"), sfn("2*s + s^3"),
                   sfn("exp(s) - 1"), sfn("s^(3/2)")]
        rng = np.random.default_rng(7)
        for f in catalog:
            hi = 10.0
            ys = rng.uniform(0.0, f(hi), size=100)
            xs = monotone_inverse_array(f, ys, hi, tol=1e-12)
            assert np.all(np.abs(f(xs) - ys) <= 1e-8 * (1.0 + ys))

    def test_array_matches_scalar(self):
        f = sfn("s^2 + s")
        ys = np.array([0.0, 0.5, 3.0, 50.0])
        arr = monotone_inverse_array(f, ys, 10.0)
        for y, x in zip(ys, arr):
            assert x == pytest.approx(monotone_inverse(f, float(y), 10.0),
                                      abs=1e-10)


class TestClassify:
    def test_identity_is_class_k(self):
        assert classify_comparison(sfn("s"), 1024, 1.0) == CLASS_K

    def test_oscillatory_positive_not_monotone(self):
        f = sfn("s*(2+sin(1/max(s,1e-9)))")
        # oracle: positive everywhere off zero but not monotone on the grid
        s = np.linspace(0.0, 1.0, 1024)
        vals = f(s)
        assert vals[0] == 0.0 and np.all(vals[1:] > 0)
        assert np.any(np.diff(vals) <= 0)
        assert classify_comparison(f, 1024, 1.0) == CLASS_P

    def test_nonzero_at_origin_is_neither(self):
        assert classify_comparison(sfn("s-1"), 1024, 1.0) == CLASS_NEITHER

    def test_square_is_class_k(self):
        assert classify_comparison(sfn("s^2"), 1024, 1.0) == CLASS_K


class TestValidateBounds:
    def test_prototype_bound_set_admissible(self):
        assert validate_bounds(prototype_bounds(1.0, 0.1)) == []

    def _with(self, **overrides):
        base = prototype_bounds(1.0, 0.1)
        stable = dataclasses.replace(
            base.stable, **{k: v for k, v in overrides.items()
                            if k in ("alpha_lower", "alpha_upper", "alpha",
                                     "beta", "phi")})
        unstable = dataclasses.replace(
            base.unstable, **{k: v for k, v in overrides.items()
                              if k in ("delta", "xi")})
        return BoundSet(stable=stable, unstable=unstable, v_max=base.v_max)

    def test_decreasing_xi_flagged(self):
        out = validate_bounds(self._with(xi=sfn("-s")))
        assert any("xi" in v and "nondecreasing" in v for v in out)

    def test_envelope_order_flagged(self):
        out = validate_bounds(self._with(alpha_lower=sfn("s^2"),
                                         alpha_upper=sfn("s^2/2")))
        assert any("alpha_lower exceeds alpha_upper" in v for v in out)

    @pytest.mark.parametrize("field,bad,needle", [
        ("alpha_lower", "s^2+1", "alpha_lower(0)"),
        ("alpha_upper", "1-exp(-s)+1e-6", "alpha_upper(0)"),
        ("phi", "cos(s)", "phi"),
        ("delta", "-s^2", "delta"),
        ("alpha_lower", "sin(s)", "alpha_lower not strictly increasing"),
    ])
    def test_single_field_corruptions_rejected(self, field, bad, needle):
        out = validate_bounds(self._with(**{field: sfn(bad)}))
        assert any(needle in v for v in out), out

    def test_vmax_positive_enforced(self):
        base = prototype_bounds(1.0, 0.1)
        with pytest.raises(ValueError):
            BoundSet(stable=base.stable, unstable=base.unstable, v_max=0.0)
