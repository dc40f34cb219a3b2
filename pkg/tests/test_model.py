import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import enumerate_loglik, enumerate_posteriors, random_instance, unscaled_forward_loglik
from penhmm.model import (
    HmmParams,
    PanelDataset,
    forward_backward,
    observed_loglik,
    penalized_loglik,
    penalty_value,
    response_prob,
)


def _make(y, x, alpha, beta, pi, Pi):
    return PanelDataset(y=y, x=x), HmmParams(alpha=alpha, beta=beta, pi=pi, Pi=Pi)


class TestResponseProb:
    def test_zero_predictor(self):
        assert response_prob(0.0, [1.0], [0.0]) == 0.5

    def test_extreme_values_stay_in_unit_interval(self):
        assert response_prob(-800.0, [], []) == 0.0
        assert response_prob(800.0, [], []) == 1.0
        assert 0.0 < response_prob(-40.0, [1.0], [0.5]) < 1e-16

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            response_prob(0.0, [1.0, 2.0], [1.0])

    def test_non_finite(self):
        with pytest.raises(ValueError):
            response_prob(np.nan, [1.0], [1.0])

    @given(
        a=st.floats(-20, 20),
        d=st.floats(0.01, 5),
        b=st.floats(0.1, 3),
        xv=st.floats(-3, 3),
    )
    def test_strictly_increasing(self, a, d, b, xv):
        assert response_prob(a + d, [b], [xv]) > response_prob(a, [b], [xv])
        assert response_prob(a, [b, -1.0], [xv + d, 0.5]) > response_prob(a, [b, -1.0], [xv, 0.5])


class TestPenalty:
    def test_equal_points_have_zero_penalty(self):
        assert penalty_value([2.5, 2.5, 2.5]) == 0.0

    def test_hand_value(self):
        # mean 0: 9 + 0 + 9
        assert penalty_value([-3.0, 0.0, 3.0]) == pytest.approx(18.0)

    @given(
        st.lists(st.floats(-50, 50), min_size=1, max_size=6),
        st.floats(-100, 100),
    )
    def test_translation_invariance(self, alpha, c):
        a = np.array(alpha)
        assert penalty_value(a + c) == pytest.approx(penalty_value(a), rel=1e-9, abs=1e-7)

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=6), st.floats(-3, 3))
    def test_quadratic_scaling(self, alpha, c):
        a = np.array(alpha)
        assert penalty_value(c * a) == pytest.approx(c * c * penalty_value(a), rel=1e-9, abs=1e-7)


class TestParams:
    def test_rejects_bad_simplex(self):
        with pytest.raises(ValueError):
            HmmParams(alpha=[0.0, 1.0], beta=[], pi=[0.7, 0.7], Pi=np.eye(2))

    def test_rejects_bad_transition_rows(self):
        with pytest.raises(ValueError):
            HmmParams(alpha=[0.0, 1.0], beta=[], pi=[0.5, 0.5], Pi=[[0.5, 0.6], [0.5, 0.5]])

    def test_rejects_inconsistent_k(self):
        with pytest.raises(ValueError):
            HmmParams(alpha=[0.0, 1.0, 2.0], beta=[], pi=[0.5, 0.5], Pi=np.eye(2))

    def test_canonical_order_and_roundtrip(self):
        p = HmmParams(
            alpha=[2.0, -1.0, 0.5],
            beta=[0.3],
            pi=[0.2, 0.3, 0.5],
            Pi=[[0.8, 0.1, 0.1], [0.2, 0.7, 0.1], [0.3, 0.3, 0.4]],
        )
        c, order = p.canonical()
        assert list(order) == [1, 2, 0]
        assert np.all(np.diff(c.alpha) > 0)
        assert c.Pi[0, 0] == 0.7 and c.Pi[0, 2] == 0.2
        back = HmmParams.from_dict(c.to_dict())
        assert np.array_equal(back.flat(), c.flat())


class TestDataset:
    def test_rejects_non_binary(self):
        with pytest.raises(ValueError, match="binary"):
            PanelDataset(y=np.array([[0, 2], [1, 0]]), x=np.zeros((2, 2, 1)))

    def test_rejects_short_panels(self):
        with pytest.raises(ValueError):
            PanelDataset(y=np.zeros((2, 1)), x=np.zeros((2, 1, 1)))

    def test_rejects_nan_covariates(self):
        x = np.zeros((2, 3, 1))
        x[0, 1, 0] = np.nan
        with pytest.raises(ValueError):
            PanelDataset(y=np.zeros((2, 3)), x=x)

    def test_lag_column_must_match(self):
        y = np.array([[0, 1, 1]])
        x = np.zeros((1, 3, 1))
        with pytest.raises(ValueError, match="lag"):
            PanelDataset(y=y, x=x, lag_column=0)
        x[0, 1:, 0] = y[0, :-1]
        assert PanelDataset(y=y, x=x, lag_column=0).lag_column == 0

    def test_subset_keeps_ids(self):
        d = PanelDataset(y=np.zeros((3, 2)), x=np.zeros((3, 2, 0)), ids=("a", "b", "c"))
        assert d.subset([2, 0]).ids == ("c", "a")


class TestForwardBackward:
    def test_matches_enumeration(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            k, T, n, p = rng.integers(1, 4), rng.integers(2, 6), rng.integers(1, 4), rng.integers(0, 3)
            inst = random_instance(rng, n, T, k, p)
            d, par = _make(*inst)
            post, ll = forward_backward(d, par)
            assert abs(ll - enumerate_loglik(*inst)) < 1e-10
            z, zz = enumerate_posteriors(*inst)
            np.testing.assert_allclose(post.z, z, atol=1e-12)
            np.testing.assert_allclose(post.zz, zz, atol=1e-12)

    def test_matches_unscaled_forward_on_long_panel(self):
        rng = np.random.default_rng(2)
        inst = random_instance(rng, 4, 30, 3, 2)
        d, par = _make(*inst)
        assert observed_loglik(d, par) == pytest.approx(unscaled_forward_loglik(*inst), abs=1e-9)

    def test_extreme_intercepts_stay_finite(self):
        # emissions as small as exp(-1000) underflow any unscaled recursion
        rng = np.random.default_rng(3)
        y, x, _, beta, pi, Pi = random_instance(rng, 5, 20, 3, 2)
        d, par = _make(y, x, np.array([-1000.0, 0.0, 1000.0]), beta, pi, Pi)
        post, ll = forward_backward(d, par)
        assert math.isfinite(ll)
        assert np.all(np.isfinite(post.z))
        np.testing.assert_allclose(post.z.sum(axis=2), 1.0, atol=1e-12)

    def test_impossible_data_gives_very_negative_but_finite_loglik(self):
        y = np.ones((1, 3), dtype=np.int8)
        d, par = _make(y, np.zeros((1, 3, 0)), np.array([-800.0]), np.zeros(0), np.ones(1), np.ones((1, 1)))
        ll = observed_loglik(d, par)
        assert ll == pytest.approx(-2400.0, rel=1e-12)

    def test_single_state_is_independent_logit(self):
        rng = np.random.default_rng(4)
        y, x, _, beta, _, _ = random_instance(rng, 6, 4, 1, 2)
        d, par = _make(y, x, np.array([0.4]), beta, np.ones(1), np.ones((1, 1)))
        eta = 0.4 + x @ beta
        direct = np.sum(np.where(y == 1, -np.logaddexp(0, -eta), -np.logaddexp(0, eta)))
        assert observed_loglik(d, par) == pytest.approx(direct, abs=1e-11)

    def test_subject_order_does_not_change_total(self):
        rng = np.random.default_rng(5)
        inst = random_instance(rng, 40, 6, 3, 2)
        d, par = _make(*inst)
        perm = rng.permutation(40)
        assert observed_loglik(d, par) == observed_loglik(d.subset(perm), par)

    def test_penalized_loglik(self):
        rng = np.random.default_rng(6)
        inst = random_instance(rng, 3, 4, 3, 1)
        d, par = _make(*inst)
        ll = observed_loglik(d, par)
        assert penalized_loglik(d, par, 0.0) == ll
        assert penalized_loglik(d, par, 0.5) == pytest.approx(ll - 0.5 * penalty_value(par.alpha))


@settings(max_examples=60, deadline=None)
@given(
    seed=st.integers(0, 2**31 - 1),
    k=st.integers(1, 4),
    T=st.integers(2, 8),
    n=st.integers(1, 5),
    p=st.integers(0, 3),
    scale=st.floats(0.1, 30.0),
)
def test_posteriors_are_normalized(seed, k, T, n, p, scale):
    rng = np.random.default_rng(seed)
    inst = random_instance(rng, n, T, k, p, alpha_scale=scale, beta_scale=scale / 3)
    post, ll = forward_backward(*_make(*inst))
    assert math.isfinite(ll) and ll <= 0.0
    np.testing.assert_allclose(post.z.sum(axis=2), 1.0, atol=1e-10)
    np.testing.assert_allclose(post.zz.sum(axis=(1, 2)), T - 1, atol=1e-9)
    # pair marginals agree with the single-state posteriors
    np.testing.assert_allclose(post.zz.sum(axis=2), post.z[:, :-1].sum(axis=1), atol=1e-9)
    np.testing.assert_allclose(post.zz.sum(axis=1), post.z[:, 1:].sum(axis=1), atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), k=st.integers(2, 4))
def test_loglik_invariant_to_state_relabelling(seed, k):
    rng = np.random.default_rng(seed)
    inst = random_instance(rng, 3, 5, k, 2)
    d, par = _make(*inst)
    order = rng.permutation(k)
    assert observed_loglik(d, par.permuted(order)) == pytest.approx(observed_loglik(d, par), abs=1e-10)
