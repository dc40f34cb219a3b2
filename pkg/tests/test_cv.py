import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

from penhmm.cv import CvGrid, CvResult, cell_seed, cross_validate, make_folds, select_best
from penhmm.em import EmConfig
from penhmm.sim import Scenario, simulate


@settings(max_examples=100, deadline=None)
@given(n=st.integers(2, 300), M=st.integers(2, 12), seed=st.integers(0, 2**32 - 1))
def test_folds_are_a_balanced_partition(n, M, seed):
    if M > n:
        with pytest.raises(ValueError):
            make_folds(n, M, seed)
        return
    folds = make_folds(n, M, seed)
    sizes = np.bincount(folds, minlength=M)
    assert folds.shape == (n,)
    assert sizes.sum() == n and sizes.min() >= 1
    assert sizes.max() - sizes.min() <= 1
    np.testing.assert_array_equal(folds, make_folds(n, M, seed))


def test_fold_errors():
    with pytest.raises(ValueError):
        make_folds(10, 1)
    with pytest.raises(ValueError):
        CvGrid(ks=[2], lambdas=[0.0], M=3, fold_assignment=[0, 0, 0, 1])


def test_grid_cells():
    grid = CvGrid(ks=[3, 1, 2, 2], lambdas=[0.05, 0.0])
    assert grid.ks == [1, 2, 3]
    assert grid.cells() == [(1, 0.0), (2, 0.0), (2, 0.05), (3, 0.0), (3, 0.05)]


def test_cell_seeds_are_distinct():
    seeds = {cell_seed(0, a, b, m) for a in range(3) for b in range(3) for m in range(10)}
    assert len(seeds) == 90


def test_select_best_ties():
    table = {(2, 0.0): -10.0, (2, 0.05): -10.0, (3, 0.0): -10.0, (3, 0.01): -9.0}
    usable = {c: True for c in table}
    assert select_best(table, usable) == (3, 0.01)
    usable[(3, 0.01)] = False
    assert select_best(table, usable) == (2, 0.0)
    with pytest.raises(ValueError):
        select_best(table, {c: False for c in table})


def _logistic_fit(y, X):
    def nll(b):
        eta = X @ b
        return np.sum(np.logaddexp(0, eta) - y * eta)

    return minimize(nll, np.zeros(X.shape[1]), method="BFGS", options={"gtol": 1e-10}).x


def test_single_state_cv_matches_logistic_oracle():
    data, _ = simulate(Scenario(n=15, T=4, alpha_spec=(0.2,), beta=(0.7,), pi=(1.0,), Pi=((1.0,),)), 0)
    grid = CvGrid(ks=[1], lambdas=[0.0], M=3, seed=5)
    res = cross_validate(data, grid, EmConfig(n_starts_random=0))
    folds = make_folds(15, 3, 5)
    values = []
    for m in range(3):
        tr, te = folds != m, folds == m
        b = _logistic_fit(
            data.y[tr].reshape(-1),
            np.column_stack([np.ones(tr.sum() * 4), data.x[tr].reshape(-1, 1)]),
        )
        eta = b[0] + data.x[te].reshape(-1) * b[1]
        yt = data.y[te].reshape(-1)
        values.append(np.sum(yt * eta - np.logaddexp(0, eta)))
    assert res.table[(1, 0.0)] == pytest.approx(np.mean(values), abs=1e-6)
    for m in range(3):
        assert res.per_fold[(1, 0.0, m)] == pytest.approx(values[m], abs=1e-6)


@pytest.fixture(scope="module")
def small_cv():
    data, _ = simulate(Scenario(n=30, T=5, alpha_spec="a2"), 0)
    grid = CvGrid(ks=[1, 2], lambdas=[0.0, 0.5], M=3, seed=1)
    cfg = EmConfig(n_starts_random=2, max_em_iters=200)
    return data, grid, cfg, cross_validate(data, grid, cfg)


def test_cv_result_structure(small_cv):
    data, grid, _, res = small_cv
    assert set(res.table) == set(grid.cells())
    assert len(res.per_fold) == 3 * len(grid.cells())
    for (k, lam), v in res.table.items():
        assert v == pytest.approx(math.fsum(res.per_fold[(k, lam, m)] for m in range(3)) / 3)
    assert (res.best_k, res.best_lambda) in res.table
    ks, lams, mat = res.matrix()
    assert ks == [1, 2] and lams == [0.0, 0.5]
    assert math.isnan(mat[0, 1])


def test_cv_is_reproducible_and_roundtrips(small_cv):
    data, grid, cfg, res = small_cv
    again = cross_validate(data, grid, cfg)
    assert again.table == res.table
    back = CvResult.from_dict(json.loads(json.dumps(res.to_dict())))
    assert back.table == res.table and back.best_k == res.best_k
    np.testing.assert_array_equal(back.folds, res.folds)


def test_explicit_fold_assignment_is_used():
    data, _ = simulate(Scenario(n=12, T=4, alpha_spec="a1"), 0)
    fa = np.arange(12) % 2
    grid = CvGrid(ks=[1], lambdas=[0.0], M=2, fold_assignment=fa)
    res = cross_validate(data, grid, EmConfig(n_starts_random=0))
    np.testing.assert_array_equal(res.folds, fa)


def test_index_audit_train_and_test_are_disjoint(monkeypatch):
    import penhmm.cv as cvmod

    data, _ = simulate(Scenario(n=23, T=4, alpha_spec="a1"), 0)
    seen = {"train": [], "test": []}
    real_fit, real_ll = cvmod.fit, cvmod.observed_loglik

    def spy_fit(ds, k, cfg):
        seen["train"].append(set(ds.ids))
        return real_fit(ds, k, cfg)

    def spy_ll(ds, params):
        seen["test"].append(set(ds.ids))
        return real_ll(ds, params)

    monkeypatch.setattr(cvmod, "fit", spy_fit)
    monkeypatch.setattr(cvmod, "observed_loglik", spy_ll)
    grid = CvGrid(ks=[1, 2], lambdas=[0.0, 0.1], M=4, seed=2)
    cross_validate(data, grid, EmConfig(n_starts_random=0, max_em_iters=20))
    everyone = set(data.ids)
    n_cells = len(grid.cells())
    assert len(seen["test"]) == n_cells * 4
    for c in range(n_cells):
        tests = seen["test"][4 * c : 4 * c + 4]
        trains = seen["train"][4 * c : 4 * c + 4]
        # each subject is held out exactly once per cell
        assert sorted(i for t in tests for i in t) == sorted(everyone)
        for tr, te in zip(trains, tests):
            assert not tr & te and tr | te == everyone


def test_leave_one_out_single_state_matches_direct_loop():
    data, _ = simulate(Scenario(n=12, T=3, alpha_spec=(-0.3,), beta=(0.8,), pi=(1.0,), Pi=((1.0,),)), 1)
    res = cross_validate(data, CvGrid(ks=[1], lambdas=[0.0], M=12, seed=0), EmConfig(n_starts_random=0))
    values = []
    for i in range(12):
        keep = np.arange(12) != i
        b = _logistic_fit(
            data.y[keep].reshape(-1), np.column_stack([np.ones(keep.sum() * 3), data.x[keep].reshape(-1, 1)])
        )
        eta = b[0] + data.x[i].reshape(-1) * b[1]
        values.append(np.sum(data.y[i] * eta - np.logaddexp(0, eta)))
    assert res.table[(1, 0.0)] == pytest.approx(np.mean(values), abs=1e-6)
