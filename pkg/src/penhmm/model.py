"""Core model: parameter containers, response probabilities, forward-backward.

The measurement model is a logit with a state-specific intercept

    logit P(y_it = 1 | u_it = u, x_it) = alpha_u + x_it' beta

and the latent process is a first-order Markov chain with initial
probabilities ``pi`` and transition matrix ``Pi``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from . import _kernels
from ._validation import (
    check_finite,
    check_nonnegative,
    check_panel_arrays,
    check_probability_vector,
    check_stochastic_matrix,
)

PROB_FLOOR = _kernels.PROB_FLOOR


@dataclass(frozen=True)
class PanelDataset:
    """Balanced panel of binary responses with covariates.

    Attributes
    ----------
    y : ndarray of shape (n, T)
        Binary responses.
    x : ndarray of shape (n, T, p)
        Covariates.
    covariate_names : tuple of str
        One label per covariate column.
    lag_column : int or None
        Index of the covariate holding the lagged response, if any.
    ids : tuple or None
        Optional subject identifiers, kept for round-tripping to files.
    times : tuple or None
        Optional occasion labels shared by all subjects.
    """

    y: np.ndarray
    x: np.ndarray
    covariate_names: tuple = ()
    lag_column: Optional[int] = None
    ids: Optional[tuple] = None
    times: Optional[tuple] = None

    def __post_init__(self):
        x, y = check_panel_arrays(self.x, self.y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        p = x.shape[2]
        names = tuple(self.covariate_names) or tuple(f"x{j + 1}" for j in range(p))
        if len(names) != p:
            raise ValueError(f"{len(names)} covariate names for {p} covariates")
        object.__setattr__(self, "covariate_names", names)
        if self.lag_column is not None:
            j = int(self.lag_column)
            if not 0 <= j < p:
                raise ValueError(f"lag_column {j} out of range for p={p}")
            if not np.array_equal(x[:, 1:, j], y[:, :-1]):
                raise ValueError("lag column does not equal the previous response")
            object.__setattr__(self, "lag_column", j)
        if self.ids is not None:
            ids = tuple(self.ids)
            if len(ids) != y.shape[0]:
                raise ValueError("ids length does not match the number of subjects")
            object.__setattr__(self, "ids", ids)
        if self.times is not None:
            times = tuple(self.times)
            if len(times) != y.shape[1]:
                raise ValueError("times length does not match the number of occasions")
            object.__setattr__(self, "times", times)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def T(self) -> int:
        return self.y.shape[1]

    @property
    def p(self) -> int:
        return self.x.shape[2]

    def subset(self, idx) -> "PanelDataset":
        """Return the panel restricted to the subjects in ``idx``."""
        idx = np.asarray(idx)
        ids = None if self.ids is None else tuple(np.asarray(self.ids, dtype=object)[idx])
        return replace(self, y=self.y[idx], x=self.x[idx], ids=ids)


@dataclass
class HmmParams:
    """Model parameters ``theta = (alpha, beta, pi, Pi)``.

    States estimated by :func:`penhmm.em.fit` are ordered so that ``alpha``
    is increasing; arbitrary orderings are accepted here so that callers can
    build degenerate or permuted parameter sets.
    """

    alpha: np.ndarray
    beta: np.ndarray
    pi: np.ndarray
    Pi: np.ndarray

    def __post_init__(self):
        self.alpha = check_finite("alpha", self.alpha).reshape(-1)
        self.beta = check_finite("beta", self.beta).reshape(-1)
        self.pi = check_finite("pi", self.pi).reshape(-1)
        self.Pi = check_finite("Pi", self.Pi)
        k = self.alpha.size
        if k < 1:
            raise ValueError("need at least one hidden state")
        if self.pi.size != k or self.Pi.shape != (k, k):
            raise ValueError(
                f"inconsistent state counts: alpha={k}, pi={self.pi.size}, Pi={self.Pi.shape}"
            )
        check_probability_vector("pi", self.pi)
        check_stochastic_matrix("Pi", self.Pi)

    @property
    def k(self) -> int:
        return self.alpha.size

    @property
    def p(self) -> int:
        return self.beta.size

    @property
    def theta1(self) -> np.ndarray:
        return np.concatenate([self.alpha, self.beta])

    def flat(self) -> np.ndarray:
        """All parameters as one vector, used for the parameter-change rule."""
        return np.concatenate([self.alpha, self.beta, self.pi, self.Pi.ravel()])

    def permuted(self, order: Sequence[int]) -> "HmmParams":
        order = np.asarray(order)
        return HmmParams(
            alpha=self.alpha[order],
            beta=self.beta.copy(),
            pi=self.pi[order],
            Pi=self.Pi[np.ix_(order, order)],
        )

    def canonical(self) -> tuple["HmmParams", np.ndarray]:
        """Sort states by increasing ``alpha``; returns the params and the order used."""
        order = np.argsort(self.alpha, kind="stable")
        return self.permuted(order), order

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha.tolist(),
            "beta": self.beta.tolist(),
            "pi": self.pi.tolist(),
            "Pi": self.Pi.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HmmParams":
        return cls(
            alpha=np.asarray(d["alpha"], dtype=float),
            beta=np.asarray(d["beta"], dtype=float),
            pi=np.asarray(d["pi"], dtype=float),
            Pi=np.asarray(d["Pi"], dtype=float),
        )


@dataclass
class Posteriors:
    """Smoothed state probabilities.

    Attributes
    ----------
    z : ndarray of shape (n, T, k)
        ``P(u_it = u | y_i, x_i)``.
    zz : ndarray of shape (n, k, k)
        Expected transition counts ``sum_{t>1} P(u_i,t-1 = a, u_it = b | y_i, x_i)``.
    per_subject_loglik : ndarray of shape (n,)
        ``log p(y_i | x_i)``.
    """

    z: np.ndarray
    zz: np.ndarray
    per_subject_loglik: np.ndarray = field(repr=False)

    def permuted(self, order) -> "Posteriors":
        order = np.asarray(order)
        return Posteriors(
            z=self.z[:, :, order],
            zz=self.zz[:, order][:, :, order],
            per_subject_loglik=self.per_subject_loglik,
        )


def response_prob(alpha_u: float, beta, x) -> float:
    """Conditional success probability ``expit(alpha_u + x' beta)`` for one state."""
    a = check_finite("alpha_u", alpha_u)
    b = check_finite("beta", beta).reshape(-1)
    xv = check_finite("x", x).reshape(-1)
    if b.shape != xv.shape:
        raise ValueError(f"beta has {b.size} entries but x has {xv.size}")
    return float(expit(float(a) + xv @ b))


def penalty_value(alpha) -> float:
    """Sum of squared deviations of the support points from their mean."""
    a = check_finite("alpha", alpha).reshape(-1)
    if a.size < 1:
        raise ValueError("alpha must have at least one entry")
    d = a - a.mean()
    return float(d @ d)


def centering_matrix(k: int) -> np.ndarray:
    return np.eye(k) - np.full((k, k), 1.0 / k)


def linear_predictor(x: np.ndarray, alpha: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """``eta[i, t, u] = alpha_u + x_it' beta``, shape (n, T, k)."""
    return (x @ beta)[:, :, None] + alpha[None, None, :]


def emission_logprob(y: np.ndarray, x: np.ndarray, alpha, beta) -> np.ndarray:
    """``log p(y_it | u, x_it)`` for every state, shape (n, T, k).

    Evaluated as ``-log1p(exp(-s * eta))`` with ``s = 2y - 1``, switching
    branches by sign so that large ``|eta|`` neither overflows nor cancels.
    """
    alpha = np.ascontiguousarray(alpha, dtype=float)
    xb = np.ascontiguousarray(x @ np.asarray(beta, dtype=float))
    return _kernels.emission_logprob(y, xb, alpha)


def _check_compatible(dataset: PanelDataset, params: HmmParams) -> None:
    if dataset.p != params.p:
        raise ValueError(f"dataset has p={dataset.p} covariates but beta has {params.p}")


def forward_backward(dataset: PanelDataset, params: HmmParams) -> tuple[Posteriors, float]:
    """Scaled forward-backward recursions.

    Emission probabilities are rescaled per (subject, occasion) by their
    largest value and the forward variables are normalized at every step;
    the logs of both scalings are accumulated into the log-likelihood.
    Backward variables reuse the forward normalizers.

    Returns
    -------
    posteriors : Posteriors
    total_loglik : float
        Observed-data log-likelihood.
    """
    _check_compatible(dataset, params)
    logB = emission_logprob(dataset.y, dataset.x, params.alpha, params.beta)
    z, zz, per_subject = _kernels.forward_backward(
        logB, np.ascontiguousarray(params.pi), np.ascontiguousarray(params.Pi)
    )
    # fsum makes the reduction exact, hence independent of subject order
    total = math.fsum(per_subject.tolist())
    return Posteriors(z=z, zz=zz, per_subject_loglik=per_subject), total


def observed_loglik(dataset: PanelDataset, params: HmmParams) -> float:
    return forward_backward(dataset, params)[1]


def penalized_loglik(dataset: PanelDataset, params: HmmParams, lam: float) -> float:
    """Observed log-likelihood minus ``lam * penalty_value(alpha)``."""
    lam = check_nonnegative("lambda", lam)
    ll = observed_loglik(dataset, params)
    if lam == 0.0:
        return ll
    return ll - lam * penalty_value(params.alpha)
