"""EM estimation with an optional ridge-type penalty on the support points.

The E-step is the forward-backward pass. In the M-step the initial and
transition probabilities have closed forms; ``theta1 = (alpha, beta)`` is
updated by Newton-Raphson on the expected complete-data log-likelihood,
minus ``lam * sum_u (alpha_u - mean(alpha))**2``.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logit

from . import _kernels
from ._validation import check_nonnegative, check_positive_int
from .model import (
    HmmParams,
    PanelDataset,
    Posteriors,
    forward_backward,
    observed_loglik,
    penalty_value,
)

logger = logging.getLogger(__name__)

THREADS_ENV = "PENHMM_NUM_THREADS"
MAX_HALVINGS = 20
DECREMENT_RTOL = 1e-13
SINGULAR_RTOL = 1e-12


@dataclass(frozen=True)
class EmConfig:
    """Settings for one (multi-start) EM fit.

    ``eps_loglik`` bounds the relative change of the penalized
    log-likelihood and ``eps_params`` the largest absolute change of any
    parameter; both must hold to declare convergence.
    """

    lam: float = 0.0
    max_em_iters: int = 1000
    eps_loglik: float = 1e-8
    eps_params: float = 1e-5
    max_nr_iters: int = 50
    nr_tol: float = 1e-8
    n_starts_deterministic: int = 1
    n_starts_random: int = 24
    seed: int = 0

    def __post_init__(self):
        check_nonnegative("lam", self.lam)
        check_positive_int("max_em_iters", self.max_em_iters)
        check_positive_int("max_nr_iters", self.max_nr_iters)
        for name in ("eps_loglik", "eps_params", "nr_tol"):
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0:
                raise ValueError(f"{name} must be > 0, got {v!r}")
        if self.n_starts_deterministic < 0 or self.n_starts_random < 0:
            raise ValueError("start counts must be >= 0")
        if self.n_starts_deterministic + self.n_starts_random < 1:
            raise ValueError("need at least one start")
        if self.seed < 0:
            raise ValueError("seed must be a non-negative integer")

    @property
    def n_starts(self) -> int:
        return self.n_starts_deterministic + self.n_starts_random


@dataclass
class FitResult:
    params: HmmParams
    loglik: float
    penalized_loglik: float
    n_iters: int
    converged: bool
    start_id: int
    loglik_trace: list = field(default_factory=list)
    lam: float = 0.0
    se_theta1: Optional[np.ndarray] = None
    info_rank_ok: Optional[bool] = None
    flags: list = field(default_factory=list)
    start_summary: list = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.params.k

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "loglik": self.loglik,
            "penalized_loglik": self.penalized_loglik,
            "lambda": self.lam,
            "n_iters": self.n_iters,
            "converged": self.converged,
            "start_id": self.start_id,
            "loglik_trace": list(self.loglik_trace),
            "se_theta1": None if self.se_theta1 is None else _nan_to_none(self.se_theta1),
            "info_rank_ok": self.info_rank_ok,
            "flags": list(self.flags),
            "start_summary": list(self.start_summary),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        se = d.get("se_theta1")
        return cls(
            params=HmmParams.from_dict(d["params"]),
            loglik=float(d["loglik"]),
            penalized_loglik=float(d["penalized_loglik"]),
            n_iters=int(d["n_iters"]),
            converged=bool(d["converged"]),
            start_id=int(d["start_id"]),
            loglik_trace=[float(v) for v in d.get("loglik_trace", [])],
            lam=float(d.get("lambda", 0.0)),
            se_theta1=None if se is None else np.array([np.nan if v is None else v for v in se]),
            info_rank_ok=d.get("info_rank_ok"),
            flags=list(d.get("flags", [])),
            start_summary=list(d.get("start_summary", [])),
        )


def _nan_to_none(a) -> list:
    return [None if not np.isfinite(v) else float(v) for v in np.asarray(a, dtype=float)]


# ---------------------------------------------------------------- E-step


def e_step(dataset: PanelDataset, params: HmmParams) -> Posteriors:
    return forward_backward(dataset, params)[0]


# ---------------------------------------------------------------- M-step


def _m_step_latent(post: Posteriors) -> tuple[np.ndarray, np.ndarray, int]:
    return _kernels.latent_update(post.z[:, 0].sum(axis=0), post.zz.sum(axis=0))


def m_step_latent(post: Posteriors) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form update of the initial and transition probabilities.

    A transition row whose origin state carries no posterior mass is set to
    uniform.
    """
    pi, Pi, _ = _m_step_latent(post)
    return pi, Pi


def _split(theta1: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    return theta1[:k], theta1[k:]


def _objective(dataset, post, theta1, lam, want_derivs):
    k = post.z.shape[2]
    alpha, beta = _split(np.ascontiguousarray(theta1, dtype=float), k)
    return _kernels.weighted_logit(
        dataset.y, dataset.x, post.z, alpha.copy(), beta.copy(), float(lam), want_derivs
    )


def q_value(dataset: PanelDataset, post: Posteriors, theta1, lam: float) -> float:
    """Measurement part of the expected complete-data log-likelihood, penalized."""
    return _objective(dataset, post, theta1, lam, False)[0]


def q_grad_hess(
    dataset: PanelDataset, post: Posteriors, theta1, lam: float
) -> tuple[np.ndarray, np.ndarray]:
    """Gradient and Hessian of :func:`q_value` with respect to ``theta1``.

    This is the score and Hessian of a weighted logistic regression with
    design ``[state indicators | x]`` and weights ``z``. The penalty adds
    ``-2 lam J alpha`` to the alpha score and ``-2 lam J`` to the alpha block
    of the Hessian, with ``J`` the centering matrix.
    """
    _, s, F = _objective(dataset, post, theta1, lam, True)
    return s, F


def newton_direction(s: np.ndarray, F: np.ndarray) -> tuple[np.ndarray, bool]:
    """Ascent direction for one Newton-Raphson iteration.

    ``-F`` is positive semi-definite. Along its eigen-directions with
    curvature above ``SINGULAR_RTOL`` times the largest, the step is the
    Newton step ``-F^{-1} s``; along numerically null directions (a state
    whose weights have underflowed, duplicated states) it falls back to a
    gradient step scaled by the largest curvature. The flag reports whether
    the fallback was used.
    """
    return _kernels.newton_direction(
        np.ascontiguousarray(s, dtype=float), np.ascontiguousarray(F, dtype=float), SINGULAR_RTOL
    )


def m_step_theta1(
    dataset: PanelDataset,
    post: Posteriors,
    theta1_init,
    lam: float,
    cfg: EmConfig,
) -> np.ndarray:
    """Newton-Raphson ascent on the penalized expected complete-data log-likelihood.

    Each Newton step is halved (up to 20 times) until the objective strictly
    increases, otherwise the iteration stops; the returned point therefore
    never scores below ``theta1_init``. Iteration also stops once the
    predicted gain falls below rounding level. Numerically singular
    directions of the Hessian get a scaled gradient step instead of a
    Newton step.
    """
    theta, _ = _kernels.newton_raphson(
        dataset.y,
        dataset.x,
        post.z,
        np.ascontiguousarray(theta1_init, dtype=float),
        float(lam),
        int(cfg.max_nr_iters),
        float(cfg.nr_tol),
        MAX_HALVINGS,
        DECREMENT_RTOL,
        SINGULAR_RTOL,
    )
    return theta


# ---------------------------------------------------------- initialization


def initial_params(dataset: PanelDataset, k: int, start_id: int, cfg: EmConfig) -> HmmParams:
    """Starting values for start ``start_id``.

    Deterministic starts spread ``alpha`` evenly around the marginal log-odds
    (start ``d`` uses a half-width of ``2 (d + 1)``), set ``beta = 0``, uniform
    ``pi`` and a diagonal-heavy ``Pi``. Random starts perturb alpha and beta
    with standard normal noise and draw ``pi`` and the rows of ``Pi`` from a
    flat Dirichlet, using a stream derived from ``(seed, start_id)``.
    """
    ybar = float(np.clip(dataset.y.mean(), 1e-3, 1 - 1e-3))
    center = float(logit(ybar))
    p = dataset.p
    if start_id < cfg.n_starts_deterministic:
        half = 2.0 * (start_id + 1)
        alpha = np.linspace(center - half, center + half, k) if k > 1 else np.array([center])
        return HmmParams(
            alpha=alpha,
            beta=np.zeros(p),
            pi=np.full(k, 1.0 / k),
            Pi=0.8 * np.eye(k) + 0.2 / k,
        )
    rng = np.random.default_rng([cfg.seed, start_id])
    base = np.linspace(center - 2.0, center + 2.0, k) if k > 1 else np.array([center])
    alpha = base + rng.standard_normal(k)
    beta = rng.standard_normal(p)
    pi = rng.dirichlet(np.ones(k))
    Pi = rng.dirichlet(np.ones(k), size=k)
    return HmmParams(alpha=alpha, beta=beta, pi=pi, Pi=Pi)


# -------------------------------------------------------------------- EM


def run_em(
    dataset: PanelDataset,
    params: HmmParams,
    cfg: EmConfig,
    start_id: int = 0,
) -> FitResult:
    """Single EM run from ``params``.

    Each iteration is a forward-backward pass, the closed-form update of
    ``pi`` and ``Pi``, Newton-Raphson for ``(alpha, beta)`` (see
    :func:`m_step_theta1`) and a reordering of the states by ``alpha``.
    The loop runs compiled; the step functions in this module compute the
    same quantities one at a time.
    """
    params, _ = params.canonical()
    _check_dims(dataset, params)
    alpha, beta, pi, Pi, trace, h, converged, n_empty, n_fallback = _kernels.em_loop(
        dataset.y,
        dataset.x,
        params.alpha,
        params.beta,
        params.pi,
        params.Pi,
        float(cfg.lam),
        int(cfg.max_em_iters),
        float(cfg.eps_loglik),
        float(cfg.eps_params),
        int(cfg.max_nr_iters),
        float(cfg.nr_tol),
        MAX_HALVINGS,
        DECREMENT_RTOL,
        SINGULAR_RTOL,
    )
    final = HmmParams(alpha=alpha, beta=beta, pi=pi, Pi=Pi)
    ll = observed_loglik(dataset, final)
    pll = ll - cfg.lam * penalty_value(final.alpha) if cfg.lam else ll
    flags = []
    if n_empty:
        flags.append(f"{n_empty} transition row update(s) without mass; set to uniform")
    if n_fallback:
        flags.append(f"{n_fallback} Newton-Raphson step(s) used the gradient fallback")
    return FitResult(
        params=final,
        loglik=ll,
        penalized_loglik=pll,
        n_iters=int(h),
        converged=bool(converged),
        start_id=start_id,
        loglik_trace=trace.tolist(),
        lam=cfg.lam,
        flags=flags,
    )


def _check_dims(dataset: PanelDataset, params: HmmParams) -> None:
    if dataset.p != params.p:
        raise ValueError(f"dataset has p={dataset.p} covariates but beta has {params.p}")


def _n_jobs() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None


def _one_start(dataset, k, cfg, start_id):
    init = initial_params(dataset, k, start_id, cfg)
    return run_em(dataset, init, cfg, start_id=start_id)


def fit(dataset: PanelDataset, k: int, cfg: EmConfig = EmConfig()) -> FitResult:
    """Multi-start (penalized) maximum likelihood fit with ``k`` hidden states.

    Every start runs to convergence or ``max_em_iters``. The converged run
    with the highest penalized log-likelihood is returned; if none converged
    the best run overall is returned with ``converged=False``.
    """
    k = check_positive_int("k", k)
    n_jobs = _n_jobs()
    starts = range(cfg.n_starts)
    if n_jobs > 1:
        from joblib import Parallel, delayed

        runs = Parallel(n_jobs=n_jobs)(delayed(_one_start)(dataset, k, cfg, s) for s in starts)
    else:
        runs = [_one_start(dataset, k, cfg, s) for s in starts]

    pool = [r for r in runs if r.converged] or runs
    # ties go to the lowest start id
    best = max(pool, key=lambda r: (r.penalized_loglik, -r.start_id))
    best.start_summary = [
        {
            "start_id": r.start_id,
            "penalized_loglik": r.penalized_loglik,
            "converged": r.converged,
            "n_iters": r.n_iters,
        }
        for r in runs
    ]
    if not best.converged:
        logger.warning("no EM start converged for k=%d, lambda=%g", k, cfg.lam)
    return best
