"""Subject-level M-fold cross-validated likelihood over a (k, lambda) grid."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from ._validation import check_nonnegative, check_positive_int
from .em import EmConfig, fit
from .model import PanelDataset, observed_loglik

logger = logging.getLogger(__name__)


def make_folds(n: int, M: int, seed: int = 0) -> np.ndarray:
    """Random balanced assignment of ``n`` subjects to folds ``0..M-1``.

    Fold sizes differ by at most one; the assignment depends only on
    ``(n, M, seed)``.
    """
    n = check_positive_int("n", n)
    M = check_positive_int("M", M)
    if M < 2:
        raise ValueError("need at least 2 folds")
    if M > n:
        raise ValueError(f"cannot split {n} subjects into {M} folds")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.empty(n, dtype=np.intp)
    folds[perm] = np.arange(n) % M
    return folds


@dataclass
class CvGrid:
    ks: Sequence[int]
    lambdas: Sequence[float]
    M: int = 10
    seed: int = 0
    fold_assignment: Optional[np.ndarray] = None

    def __post_init__(self):
        self.ks = sorted({check_positive_int("k", k) for k in self.ks})
        self.lambdas = sorted({check_nonnegative("lambda", float(l)) for l in self.lambdas})
        if not self.ks or not self.lambdas:
            raise ValueError("grid needs at least one k and one lambda")
        self.M = check_positive_int("M", self.M)
        if self.M < 2:
            raise ValueError("need at least 2 folds")
        if self.fold_assignment is not None:
            fa = np.asarray(self.fold_assignment, dtype=np.intp)
            sizes = np.bincount(fa, minlength=self.M)
            if fa.min() < 0 or fa.max() >= self.M or sizes.max() - sizes.min() > 1:
                raise ValueError("fold_assignment must be a balanced partition into M folds")
            self.fold_assignment = fa

    def cells(self) -> list[tuple[int, float]]:
        """Grid cells; one state is fitted only at lambda = 0, where the penalty is void."""
        out = []
        for k in self.ks:
            lams = [0.0] if k == 1 else self.lambdas
            out.extend((k, lam) for lam in lams)
        return out

    def folds_for(self, n: int) -> np.ndarray:
        if self.fold_assignment is not None:
            if self.fold_assignment.size != n:
                raise ValueError("fold_assignment length does not match the number of subjects")
            return self.fold_assignment
        return make_folds(n, self.M, self.seed)


@dataclass
class CvResult:
    """Cross-validated log-likelihood per cell.

    ``table[(k, lam)]`` is the mean over folds of the held-out observed
    log-likelihood; ``per_fold[(k, lam, m)]`` holds the fold values.
    """

    table: dict
    per_fold: dict
    converged: dict
    fold_converged: dict
    best_k: int
    best_lambda: float
    folds: np.ndarray = field(repr=False)

    def matrix(self, ks=None, lambdas=None) -> tuple[list, list, np.ndarray]:
        """``table`` laid out with one row per k and one column per lambda (NaN if absent)."""
        ks = sorted({k for k, _ in self.table}) if ks is None else list(ks)
        lams = sorted({l for _, l in self.table}) if lambdas is None else list(lambdas)
        mat = np.full((len(ks), len(lams)), np.nan)
        for a, k in enumerate(ks):
            for b, lam in enumerate(lams):
                mat[a, b] = self.table.get((k, lam), np.nan)
        return ks, lams, mat

    def to_dict(self) -> dict:
        return {
            "table": [
                {"k": k, "lambda": lam, "cv_loglik": v, "converged": self.converged[(k, lam)]}
                for (k, lam), v in sorted(self.table.items())
            ],
            "per_fold": [
                {"k": k, "lambda": lam, "fold": m, "test_loglik": v,
                 "converged": self.fold_converged[(k, lam, m)]}
                for (k, lam, m), v in sorted(self.per_fold.items())
            ],
            "best_k": self.best_k,
            "best_lambda": self.best_lambda,
            "folds": self.folds.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CvResult":
        table = {(int(r["k"]), float(r["lambda"])): float(r["cv_loglik"]) for r in d["table"]}
        conv = {(int(r["k"]), float(r["lambda"])): bool(r["converged"]) for r in d["table"]}
        per_fold = {
            (int(r["k"]), float(r["lambda"]), int(r["fold"])): float(r["test_loglik"])
            for r in d["per_fold"]
        }
        fconv = {
            (int(r["k"]), float(r["lambda"]), int(r["fold"])): bool(r["converged"])
            for r in d["per_fold"]
        }
        return cls(
            table=table,
            per_fold=per_fold,
            converged=conv,
            fold_converged=fconv,
            best_k=int(d["best_k"]),
            best_lambda=float(d["best_lambda"]),
            folds=np.asarray(d["folds"], dtype=np.intp),
        )


def cell_seed(seed: int, k_index: int, lam_index: int, fold: int) -> int:
    """Seed for the multi-start fit of one (k, lambda, fold) job."""
    ss = np.random.SeedSequence([seed, k_index, lam_index, fold])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def select_best(table: dict, usable: dict) -> tuple[int, float]:
    """Argmax of ``table`` among usable cells; ties go to smaller k, then smaller lambda."""
    cand = [(k, lam) for (k, lam) in table if usable[(k, lam)] and math.isfinite(table[(k, lam)])]
    if not cand:
        raise ValueError("no usable cross-validation cell")
    return max(cand, key=lambda c: (table[c], -c[0], -c[1]))


def cross_validate(dataset: PanelDataset, grid: CvGrid, cfg: EmConfig = EmConfig()) -> CvResult:
    """Cross-validated log-likelihood for every cell of ``grid``.

    For each cell and fold the model is fitted to the training subjects with
    that cell's penalty and the held-out subjects are scored by their
    unpenalized observed log-likelihood. A cell counts as converged when all
    of its fold fits converged; it is left out of the selection only when
    none of them did.
    """
    folds = grid.folds_for(dataset.n)
    if grid.M > dataset.n:
        raise ValueError(f"cannot split {dataset.n} subjects into {grid.M} folds")
    per_fold: dict = {}
    fold_conv: dict = {}
    table: dict = {}
    converged: dict = {}
    usable: dict = {}
    for k, lam in grid.cells():
        ki = grid.ks.index(k)
        li = grid.lambdas.index(lam) if lam in grid.lambdas else 0
        values = []
        flags = []
        for m in range(grid.M):
            test = np.flatnonzero(folds == m)
            train = np.flatnonzero(folds != m)
            run_cfg = replace(cfg, lam=lam, seed=cell_seed(cfg.seed, ki, li, m))
            res = fit(dataset.subset(train), k, run_cfg)
            value = observed_loglik(dataset.subset(test), res.params)
            per_fold[(k, lam, m)] = value
            fold_conv[(k, lam, m)] = res.converged
            values.append(value)
            flags.append(res.converged)
            logger.info("cv k=%d lam=%g fold %d: test loglik %.4f (converged=%s)", k, lam, m, value, res.converged)
        table[(k, lam)] = math.fsum(values) / grid.M
        converged[(k, lam)] = all(flags)
        usable[(k, lam)] = any(flags)
    best_k, best_lam = select_best(table, usable)
    return CvResult(
        table=table,
        per_fold=per_fold,
        converged=converged,
        fold_converged=fold_conv,
        best_k=best_k,
        best_lambda=best_lam,
        folds=folds,
    )
