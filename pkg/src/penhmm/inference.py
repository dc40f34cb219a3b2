"""Post-fit inference: observed information, standard errors, decoding.

The score is taken from the EM machinery: at ``theta`` it is the gradient
of the expected (penalized) complete-data log-likelihood, evaluated with
the posteriors computed at ``theta`` itself. The observed information for
``(alpha, beta)`` is minus the central-difference Jacobian of that score.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import norm

from .em import FitResult, q_grad_hess
from .model import HmmParams, PanelDataset, Posteriors, forward_backward

logger = logging.getLogger(__name__)

RANK_TOL = 1e-10
FD_REL_STEP = 1e-6
# a coefficient is unidentified when its unit vector projects this far onto the null space
NULL_PROJECTION_TOL = 1e-3


@dataclass
class SeReport:
    """Standard errors and information diagnostics for ``theta1 = (alpha, beta)``.

    ``info_matrix`` is the observed information for ``theta1`` with the
    latent-model parameters held at their estimates. ``se`` holds NaN where
    a standard error is not reported (the alpha block when the information is
    singular), inf for a beta coefficient lying along a direction the
    likelihood cannot identify, and is None when nothing could be computed.
    """

    se: Optional[np.ndarray]
    pvalues: Optional[np.ndarray]
    info_matrix: np.ndarray
    min_eigenvalue: float
    max_eigenvalue: float
    full_rank: bool
    param_names: list

    def to_dict(self) -> dict:
        def clean(a):
            if a is None:
                return None
            return [None if not np.isfinite(v) else float(v) for v in np.asarray(a)]

        return {
            "se": clean(self.se),
            "pvalues": clean(self.pvalues),
            "info_matrix": np.asarray(self.info_matrix).tolist(),
            "min_eigenvalue": self.min_eigenvalue,
            "max_eigenvalue": self.max_eigenvalue,
            "full_rank": self.full_rank,
            "param_names": list(self.param_names),
        }


@dataclass
class Decoding:
    """Local decoding: 1-based most probable state and posterior mean intercept."""

    states: np.ndarray
    alpha_bar: np.ndarray


def em_score(dataset: PanelDataset, params: HmmParams, lam: float) -> np.ndarray:
    """Score of the penalized observed log-likelihood with respect to ``(alpha, beta)``.

    Uses the EM identity: the gradient of the expected complete-data
    log-likelihood, with the expectation taken under the posteriors at
    ``params`` itself.
    """
    post, _ = forward_backward(dataset, params)
    s, _ = q_grad_hess(dataset, post, params.theta1, lam)
    return s


def observed_information(dataset: PanelDataset, params: HmmParams, lam: float) -> np.ndarray:
    """Minus the symmetrized central-difference Jacobian of :func:`em_score`.

    ``pi`` and ``Pi`` are held at their values in ``params``. The step for
    coordinate ``s`` is ``1e-6 * max(1, |theta_s|)``.
    """
    theta = params.theta1
    d = theta.size
    h = FD_REL_STEP * np.maximum(1.0, np.abs(theta))
    jac = np.empty((d, d))
    for s in range(d):
        e = np.zeros(d)
        e[s] = h[s]
        up = em_score(dataset, _with_theta1(params, theta + e), lam)
        down = em_score(dataset, _with_theta1(params, theta - e), lam)
        jac[:, s] = (up - down) / (2.0 * h[s])
    return -0.5 * (jac + jac.T)


def _with_theta1(params: HmmParams, theta1: np.ndarray) -> HmmParams:
    k = params.k
    return HmmParams(alpha=theta1[:k], beta=theta1[k:], pi=params.pi, Pi=params.Pi)


def standard_errors(
    dataset: PanelDataset, fit: FitResult, lam: Optional[float] = None
) -> SeReport:
    """Standard errors for ``(alpha, beta)`` and Wald p-values for ``beta``.

    With ``lam > 0`` the curvature of the penalized objective is used.
    When the information is rank deficient the alpha standard errors
    are left undefined. A beta coefficient with a component along the null
    space of the information is unidentified and gets an infinite standard
    error (p-value 1); the others come from the pseudo-inverse.
    """
    if lam is None:
        lam = fit.lam
    if not fit.converged:
        logger.warning("standard errors requested for a non-converged fit")
    params = fit.params
    k, p = params.k, params.p
    info = observed_information(dataset, params, lam)
    evals, evecs = np.linalg.eigh(info)
    top = float(evals[-1])
    low = float(evals[0])
    full_rank = _rank_ok(low, top)

    se = None
    if full_rank:
        se = np.sqrt(np.diag(np.linalg.inv(info)))
    elif top > 0:
        # singular: no alpha block; beta from the pseudo-inverse where it is positive
        cov = np.linalg.pinv(info, rtol=RANK_TOL, hermitian=True)
        var = np.diag(cov).copy()
        se = np.full(k + p, np.nan)
        ok = var[k:] > 0
        se[k:][ok] = np.sqrt(var[k:][ok])
        null = evecs[:, evals <= RANK_TOL * top]
        se[k:][np.linalg.norm(null[k:], axis=1) > NULL_PROJECTION_TOL] = np.inf
        logger.warning("observed information is not of full rank; alpha standard errors omitted")

    pvalues = None
    if se is not None:
        pvalues = 2.0 * norm.sf(np.abs(params.beta) / se[k:])
    names = [f"alpha{u + 1}" for u in range(k)] + list(dataset.covariate_names)
    return SeReport(
        se=se,
        pvalues=pvalues,
        info_matrix=info,
        min_eigenvalue=low,
        max_eigenvalue=top,
        full_rank=full_rank,
        param_names=names,
    )


def _rank_ok(min_eig: float, max_eig: float, rank_tol: float = RANK_TOL) -> bool:
    return bool(max_eig > 0 and min_eig > rank_tol * max_eig)


def identifiability_check(report: SeReport, rank_tol: float = RANK_TOL) -> bool:
    """True when the observed information is numerically of full rank.

    That is, its smallest eigenvalue exceeds ``rank_tol`` times the largest.
    """
    return _rank_ok(report.min_eigenvalue, report.max_eigenvalue, rank_tol)


def decode(fit: FitResult, posteriors: Posteriors) -> Decoding:
    """Most probable state per (subject, occasion); ties go to the lowest state."""
    z = posteriors.z
    if z.shape[2] != fit.params.k:
        raise ValueError("posteriors and fit disagree on the number of states")
    states = np.argmax(z, axis=2) + 1
    alpha_bar = z @ fit.params.alpha
    return Decoding(states=states, alpha_bar=alpha_bar)


def decode_dataset(dataset: PanelDataset, fit: FitResult) -> Decoding:
    """Run the E-step at the fitted parameters and decode."""
    post, _ = forward_backward(dataset, fit.params)
    return decode(fit, post)
