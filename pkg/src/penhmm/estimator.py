"""scikit-learn style wrapper around the functional API.

Samples are subjects: ``X`` has shape ``(n, T, p)`` and ``y`` shape
``(n, T)``. Because the hidden states are inferred from the responses,
``predict``, ``predict_proba``, ``transform`` and ``score`` take ``y`` as
well as ``X``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_nonnegative, check_panel_arrays, check_positive_int
from .em import EmConfig, fit
from .inference import decode, standard_errors
from .model import PanelDataset, forward_backward, observed_loglik


class PenalizedHMM(BaseEstimator):
    """Hidden Markov logit model for binary panels with a support-point penalty.

    Parameters
    ----------
    n_states : int
        Number of hidden states ``k``.
    lam : float
        Weight of the penalty on the spread of the state intercepts; 0 gives
        plain maximum likelihood.
    n_starts : int
        Total EM starts: one deterministic, the rest random.
    max_iter : int
        EM iteration cap per start.
    tol_loglik, tol_params : float
        Relative log-likelihood and absolute parameter tolerances; both must
        hold for convergence.
    random_state : int
        Seed for the random starts.
    compute_se : bool
        Compute standard errors for ``(alpha, beta)`` after fitting.

    Attributes
    ----------
    alpha_, beta_, pi_, Pi_ : ndarray
        Estimates, with states ordered by increasing ``alpha_``.
    se_ : ndarray or None
        Standard errors of ``(alpha_, beta_)`` when ``compute_se``.
    loglik_, penalized_loglik_ : float
    converged_ : bool
    n_iter_ : int
    fit_result_ : FitResult
    """

    def __init__(
        self,
        n_states=3,
        lam=0.0,
        n_starts=25,
        max_iter=1000,
        tol_loglik=1e-8,
        tol_params=1e-5,
        random_state=0,
        compute_se=False,
    ):
        self.n_states = n_states
        self.lam = lam
        self.n_starts = n_starts
        self.max_iter = max_iter
        self.tol_loglik = tol_loglik
        self.tol_params = tol_params
        self.random_state = random_state
        self.compute_se = compute_se

    def _config(self) -> EmConfig:
        n_starts = check_positive_int("n_starts", self.n_starts)
        return EmConfig(
            lam=check_nonnegative("lam", self.lam),
            max_em_iters=check_positive_int("max_iter", self.max_iter),
            eps_loglik=self.tol_loglik,
            eps_params=self.tol_params,
            n_starts_deterministic=1,
            n_starts_random=n_starts - 1,
            seed=int(self.random_state or 0),
        )

    def _dataset(self, X, y) -> PanelDataset:
        X, y = check_panel_arrays(X, y)
        if hasattr(self, "n_features_in_") and X.shape[2] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[2]} covariates; the model was fitted with {self.n_features_in_}")
        return PanelDataset(y=y, x=X)

    def fit(self, X, y):
        self.__dict__.pop("n_features_in_", None)
        data = self._dataset(X, y)
        cfg = self._config()
        res = fit(data, check_positive_int("n_states", self.n_states), cfg)
        self.se_ = None
        if self.compute_se:
            report = standard_errors(data, res, cfg.lam)
            res.se_theta1 = report.se
            res.info_rank_ok = report.full_rank
            self.se_ = report.se
        self.fit_result_ = res
        self.alpha_ = res.params.alpha
        self.beta_ = res.params.beta
        self.pi_ = res.params.pi
        self.Pi_ = res.params.Pi
        self.loglik_ = res.loglik
        self.penalized_loglik_ = res.penalized_loglik
        self.converged_ = res.converged
        self.n_iter_ = res.n_iters
        self.n_features_in_ = data.p
        return self

    def _posteriors(self, X, y):
        check_is_fitted(self, "fit_result_")
        data = self._dataset(X, y)
        post, _ = forward_backward(data, self.fit_result_.params)
        return data, post

    def predict_proba(self, X, y) -> np.ndarray:
        """Smoothed state probabilities, shape ``(n, T, k)``."""
        return self._posteriors(X, y)[1].z

    def predict(self, X, y) -> np.ndarray:
        """Most probable state (1-based) per subject and occasion."""
        _, post = self._posteriors(X, y)
        return decode(self.fit_result_, post).states

    def transform(self, X, y) -> np.ndarray:
        """Posterior mean intercept per subject and occasion, shape ``(n, T)``."""
        _, post = self._posteriors(X, y)
        return decode(self.fit_result_, post).alpha_bar

    def score(self, X, y) -> float:
        """Observed-data log-likelihood of the panel (unpenalized)."""
        check_is_fitted(self, "fit_result_")
        return observed_loglik(self._dataset(X, y), self.fit_result_.params)
