"""Scenario-driven data generation and the penalized-vs-standard study runner."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import expit

from .em import EmConfig, FitResult, fit
from .model import PanelDataset

logger = logging.getLogger(__name__)

ALPHA_SPECS = {
    "a1": (-3.0, 0.0, 3.0),
    "a2": (-6.0, 0.0, 6.0),
    "a3": (-6.0, -3.0, 0.0),
    "a4": (-20.0, -5.0, 5.0),
    "a5": (-40.0, -15.0, 0.0),
}

PERSISTENCE = {"high": (0.900, 0.050), "low": (0.750, 0.125)}


def transition_matrix(persistence: str, k: int = 3) -> np.ndarray:
    """Equicorrelated transition matrix for a named persistence level.

    For ``k = 3`` this gives diagonal 0.9 / off-diagonal 0.05 ("high") or
    0.75 / 0.125 ("low"). For other ``k`` the diagonal is kept and the
    remaining mass is spread evenly.
    """
    if persistence not in PERSISTENCE:
        raise ValueError(f"persistence must be one of {sorted(PERSISTENCE)}, got {persistence!r}")
    diag = PERSISTENCE[persistence][0]
    if k == 1:
        return np.ones((1, 1))
    off = (1.0 - diag) / (k - 1)
    return np.full((k, k), off) + (diag - off) * np.eye(k)


@dataclass(frozen=True)
class Scenario:
    """One simulation design.

    ``alpha_spec`` is either a key of :data:`ALPHA_SPECS` or an explicit
    vector of support points. With ``include_lag`` the last covariate is the
    previous response (0 at the first occasion); the others are iid standard
    normal.
    """

    n: int = 250
    T: int = 10
    persistence: str = "low"
    alpha_spec: Union[str, tuple] = "a5"
    beta: tuple = (1.0, -1.0, 1.0, 1.0)
    pi: Optional[tuple] = None
    Pi: Optional[tuple] = None
    include_lag: bool = False
    n_replicates: int = 10
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.alpha_spec, str) and self.alpha_spec not in ALPHA_SPECS:
            raise ValueError(f"unknown alpha_spec {self.alpha_spec!r}")
        if self.n < 1 or self.T < 2:
            raise ValueError("need n >= 1 and T >= 2")
        if self.include_lag and len(self.beta) < 1:
            raise ValueError("include_lag needs at least one coefficient")
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        if not isinstance(self.alpha_spec, str):
            object.__setattr__(self, "alpha_spec", tuple(float(a) for a in self.alpha_spec))

    @property
    def alpha(self) -> np.ndarray:
        if isinstance(self.alpha_spec, str):
            return np.array(ALPHA_SPECS[self.alpha_spec])
        return np.array(self.alpha_spec, dtype=float)

    @property
    def k(self) -> int:
        return self.alpha.size

    @property
    def initial(self) -> np.ndarray:
        if self.pi is None:
            return np.full(self.k, 1.0 / self.k)
        return np.array(self.pi, dtype=float)

    @property
    def transitions(self) -> np.ndarray:
        if self.Pi is None:
            return transition_matrix(self.persistence, self.k)
        return np.array(self.Pi, dtype=float)

    @property
    def label(self) -> str:
        a = self.alpha_spec if isinstance(self.alpha_spec, str) else "custom"
        return f"n{self.n}_T{self.T}_{self.persistence}_{a}"

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("pi", "Pi"):
            if d[key] is not None:
                d[key] = np.asarray(d[key]).tolist()
        if not isinstance(d["alpha_spec"], str):
            d["alpha_spec"] = list(d["alpha_spec"])
        d["beta"] = list(d["beta"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        d = dict(d)
        if not isinstance(d.get("alpha_spec", "a5"), str):
            d["alpha_spec"] = tuple(d["alpha_spec"])
        for key in ("pi", "Pi"):
            if d.get(key) is not None:
                d[key] = tuple(map(tuple, d[key])) if key == "Pi" else tuple(d[key])
        if "beta" in d:
            d["beta"] = tuple(d["beta"])
        return cls(**d)


def motivating_example(seed: int = 0, n_replicates: int = 10) -> Scenario:
    """Three well-separated states with the lagged response as fourth covariate."""
    return Scenario(
        n=250,
        T=10,
        persistence="low",
        alpha_spec="a4",
        beta=(1.0, -1.0, 1.0, 1.0),
        include_lag=True,
        n_replicates=n_replicates,
        seed=seed,
    )


def study_scenarios(seed: int = 0, n_replicates: int = 50) -> list[Scenario]:
    """The 40-cell design: n x T x persistence x separation."""
    return [
        Scenario(n=n, T=T, persistence=pers, alpha_spec=a, seed=seed, n_replicates=n_replicates)
        for n in (250, 500)
        for T in (10, 20)
        for pers in ("high", "low")
        for a in ALPHA_SPECS
    ]


def _sample_chain(rng, n, T, pi, Pi) -> np.ndarray:
    k = pi.size
    states = np.empty((n, T), dtype=np.intp)
    cum_pi = np.cumsum(pi)
    cum_Pi = np.cumsum(Pi, axis=1)
    states[:, 0] = np.minimum(np.searchsorted(cum_pi, rng.random(n), side="right"), k - 1)
    for t in range(1, T):
        u = rng.random(n)
        rows = cum_Pi[states[:, t - 1]]
        states[:, t] = np.minimum((u[:, None] >= rows).sum(axis=1), k - 1)
    return states


def simulate(scenario: Scenario, replicate_id: int = 0) -> tuple[PanelDataset, np.ndarray]:
    """Draw one dataset; deterministic in ``(scenario.seed, replicate_id)``.

    Returns
    -------
    dataset : PanelDataset
    true_states : ndarray of shape (n, T)
        Generating hidden states, 0-based.
    """
    rng = np.random.default_rng([scenario.seed, replicate_id])
    n, T = scenario.n, scenario.T
    alpha = scenario.alpha
    beta = np.asarray(scenario.beta)
    p = beta.size
    states = _sample_chain(rng, n, T, scenario.initial, scenario.transitions)

    n_normal = p - 1 if scenario.include_lag else p
    x = np.zeros((n, T, p))
    x[:, :, :n_normal] = rng.standard_normal((n, T, n_normal))
    y = np.zeros((n, T), dtype=np.int8)
    draws = rng.random((n, T))
    for t in range(T):
        if scenario.include_lag and t > 0:
            x[:, t, p - 1] = y[:, t - 1]
        prob = expit(alpha[states[:, t]] + x[:, t] @ beta)
        y[:, t] = draws[:, t] < prob

    names = [f"x{j + 1}" for j in range(n_normal)]
    lag_column = None
    if scenario.include_lag:
        names.append("y_lag")
        lag_column = p - 1
    data = PanelDataset(
        y=y, x=x, covariate_names=tuple(names), lag_column=lag_column, ids=tuple(range(1, n + 1))
    )
    return data, states


def mse(theta_true: float, theta_hats) -> float:
    """Mean squared error of a set of estimates around the true value."""
    est = np.asarray(theta_hats, dtype=float).reshape(-1)
    if est.size < 1:
        raise ValueError("need at least one estimate")
    d = est - float(theta_true)
    return float(np.mean(d * d))


def pct_variation(value: float, reference: float) -> float:
    """``100 (value - reference) / reference``; 0 when equal, NaN against a zero reference."""
    if value == reference:
        return 0.0
    if reference == 0:
        return float("nan")
    return 100.0 * (value - reference) / reference


def _finite_mean(values) -> float:
    """Mean over the finite entries; NaN when there are none."""
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    return float(v.mean()) if v.size else float("nan")


@dataclass
class ReplicateRecord:
    scenario: str
    replicate: int
    lam: float
    alpha: list
    beta: list
    se_beta: Optional[list]
    full_rank: Optional[bool]
    converged: bool
    seconds: float


@dataclass
class MetricTable:
    """Per-scenario, per-lambda summaries of a study run.

    ``mse`` maps ``(scenario_label, lam)`` to ``{parameter: MSE}``; the
    ``pct_*`` tables hold percentage variations of the penalized rows with
    respect to ``lam = 0``.
    """

    mse: dict = field(default_factory=dict)
    pct_variation: dict = field(default_factory=dict)
    mean_se: dict = field(default_factory=dict)
    se_pct_variation: dict = field(default_factory=dict)
    mean_time: dict = field(default_factory=dict)
    time_pct_variation: dict = field(default_factory=dict)
    n_used: dict = field(default_factory=dict)
    n_excluded: dict = field(default_factory=dict)
    records: list = field(default_factory=list)

    def rows(self) -> list[dict]:
        """Flat rows for CSV output, one per (scenario, lambda, parameter)."""
        out = []
        for (label, lam), table in sorted(self.mse.items()):
            for name, value in table.items():
                out.append(
                    {
                        "scenario": label,
                        "lambda": lam,
                        "parameter": name,
                        "mse": value,
                        "pct_variation": self.pct_variation.get((label, lam), {}).get(name),
                        "mean_se": self.mean_se.get((label, lam), {}).get(name),
                        "se_pct_variation": self.se_pct_variation.get((label, lam), {}).get(name),
                        "mean_time": self.mean_time.get((label, lam)),
                        "time_pct_variation": self.time_pct_variation.get((label, lam)),
                        "n_used": self.n_used.get(label),
                    }
                )
        return out

    def to_dict(self) -> dict:
        def keyed(d):
            return {f"{label}|{lam}": v for (label, lam), v in d.items()}

        return {
            "mse": keyed(self.mse),
            "pct_variation": keyed(self.pct_variation),
            "mean_se": keyed(self.mean_se),
            "se_pct_variation": keyed(self.se_pct_variation),
            "mean_time": keyed(self.mean_time),
            "time_pct_variation": keyed(self.time_pct_variation),
            "n_used": dict(self.n_used),
            "n_excluded": dict(self.n_excluded),
            "records": [asdict(r) for r in self.records],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricTable":
        def unkeyed(src):
            out = {}
            for key, v in src.items():
                label, lam = key.rsplit("|", 1)
                out[(label, float(lam))] = v
            return out

        return cls(
            mse=unkeyed(d["mse"]),
            pct_variation=unkeyed(d["pct_variation"]),
            mean_se=unkeyed(d["mean_se"]),
            se_pct_variation=unkeyed(d["se_pct_variation"]),
            mean_time=unkeyed(d["mean_time"]),
            time_pct_variation=unkeyed(d["time_pct_variation"]),
            n_used=dict(d["n_used"]),
            n_excluded=dict(d["n_excluded"]),
            records=[ReplicateRecord(**r) for r in d.get("records", [])],
        )


def fit_replicate(
    data: PanelDataset, k: int, lam: float, cfg: EmConfig, with_se: bool = True
) -> tuple[FitResult, Optional[object], float]:
    """Fit one replicate and time it; optionally attach standard errors."""
    from .inference import identifiability_check, standard_errors

    cfg = replace(cfg, lam=lam)
    t0 = time.perf_counter()
    res = fit(data, k, cfg)
    seconds = time.perf_counter() - t0
    report = None
    if with_se:
        report = standard_errors(data, res, lam)
        res.se_theta1 = report.se
        res.info_rank_ok = identifiability_check(report)
    return res, report, seconds


def run_study(
    scenarios: Sequence[Scenario],
    lambdas: Sequence[float],
    cfg: EmConfig = EmConfig(),
    exclude_rank_deficient: bool = True,
    with_se: bool = True,
) -> MetricTable:
    """Fit every replicate of every scenario at ``lam = 0`` and each penalized value.

    Replicates whose unpenalized fit fails the identifiability check are
    dropped from all comparisons for that scenario when
    ``exclude_rank_deficient`` is set.
    """
    lams = [0.0] + sorted({float(l) for l in lambdas} - {0.0})
    table = MetricTable()
    for sc in scenarios:
        label = sc.label
        per_lam: dict[float, list[ReplicateRecord]] = {lam: [] for lam in lams}
        keep: list[int] = []
        for r in range(sc.n_replicates):
            data, _ = simulate(sc, r)
            recs = {}
            for lam in lams:
                res, report, seconds = fit_replicate(
                    data, sc.k, lam, replace(cfg, seed=cfg.seed + r), with_se=with_se
                )
                se_beta = None
                if report is not None and report.se is not None:
                    se_beta = report.se[sc.k :].tolist()
                recs[lam] = ReplicateRecord(
                    scenario=label,
                    replicate=r,
                    lam=lam,
                    alpha=res.params.alpha.tolist(),
                    beta=res.params.beta.tolist(),
                    se_beta=se_beta,
                    full_rank=res.info_rank_ok,
                    converged=res.converged,
                    seconds=seconds,
                )
                logger.info(
                    "%s rep %d lam=%g: alpha=%s beta=%s (%.1fs)",
                    label, r, lam, np.round(res.params.alpha, 3), np.round(res.params.beta, 3), seconds,
                )
            table.records.extend(recs.values())
            if exclude_rank_deficient and recs[0.0].full_rank is False:
                continue
            keep.append(r)
            for lam in lams:
                per_lam[lam].append(recs[lam])

        table.n_used[label] = len(keep)
        table.n_excluded[label] = sc.n_replicates - len(keep)
        if not keep:
            logger.warning("%s: every replicate excluded", label)
            continue
        true_alpha = sc.alpha
        for lam in lams:
            recs = per_lam[lam]
            entry = {}
            for j, b in enumerate(sc.beta):
                entry[f"beta{j + 1}"] = mse(b, [rec.beta[j] for rec in recs])
            for u, a in enumerate(true_alpha):
                entry[f"alpha{u + 1}"] = mse(a, [rec.alpha[u] for rec in recs])
            table.mse[(label, lam)] = entry
            ses = [rec.se_beta for rec in recs if rec.se_beta is not None]
            if ses:
                arr = np.array(ses, dtype=float)
                table.mean_se[(label, lam)] = {
                    f"beta{j + 1}": _finite_mean(arr[:, j]) for j in range(arr.shape[1])
                }
            table.mean_time[(label, lam)] = float(np.mean([rec.seconds for rec in recs]))
        for lam in lams:
            base, cur = table.mse[(label, 0.0)], table.mse[(label, lam)]
            table.pct_variation[(label, lam)] = {
                name: pct_variation(cur[name], base[name]) for name in base
            }
            if (label, lam) in table.mean_se and (label, 0.0) in table.mean_se:
                b_se, c_se = table.mean_se[(label, 0.0)], table.mean_se[(label, lam)]
                table.se_pct_variation[(label, lam)] = {
                    name: pct_variation(c_se[name], b_se[name]) for name in b_se
                }
            table.time_pct_variation[(label, lam)] = pct_variation(
                table.mean_time[(label, lam)], table.mean_time[(label, 0.0)]
            )
    return table
