"""File formats: long-format panel CSV, lag construction and run configuration.

Panels are read from CSV files with one row per (subject, occasion)::

    id,time,y,x1,x2,...

Rows are grouped by ``id`` and ordered by ``time``; every subject must have
the same number of distinct occasions. Categorical covariates are expanded
into indicator columns for every level except the declared reference.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from .em import EmConfig
from .model import PanelDataset

LAG_POLICIES = ("drop", "zero")


class PanelFormatError(ValueError):
    """Input file does not describe a valid balanced binary panel."""


@dataclass
class PanelSchema:
    """Column roles in a long-format panel file.

    ``covariates`` defaults to every column other than id, time and response.
    ``categorical`` maps a covariate to its reference level.
    """

    id: str = "id"
    time: str = "time"
    response: str = "y"
    covariates: Optional[list] = None
    categorical: dict = field(default_factory=dict)


def _indicator_name(column: str, level) -> str:
    return f"{column}[{level}]"


def _match_level(values: pd.Series, ref):
    """Find ``ref`` among the levels, comparing as text when needed (configs hold strings)."""
    levels = list(pd.unique(values))
    if ref in levels:
        return ref
    for lev in levels:
        if str(lev) == str(ref):
            return lev
    return None


def frame_to_panel(df: pd.DataFrame, schema: PanelSchema = PanelSchema()) -> PanelDataset:
    """Validate a long-format frame and reshape it into a :class:`PanelDataset`."""
    base = [schema.id, schema.time, schema.response]
    missing = [c for c in base if c not in df.columns]
    if missing:
        raise PanelFormatError(f"missing required column(s): {', '.join(missing)}")
    if schema.covariates is None:
        covs = [c for c in df.columns if c not in base]
    else:
        covs = list(schema.covariates)
        unknown = [c for c in covs if c not in df.columns]
        if unknown:
            raise PanelFormatError(f"unknown column(s): {', '.join(map(str, unknown))}")
    unknown_cat = [c for c in schema.categorical if c not in covs]
    if unknown_cat:
        raise PanelFormatError(f"categorical column(s) not among the covariates: {', '.join(unknown_cat)}")

    used = df[base + covs]
    if used.isna().any().any():
        bad = [c for c in used.columns if used[c].isna().any()]
        raise PanelFormatError(f"missing values in column(s): {', '.join(map(str, bad))}")

    dup = df.duplicated([schema.id, schema.time])
    if dup.any():
        first = df.loc[dup, schema.id].iloc[0]
        raise PanelFormatError(f"subject {first!r} has repeated occasions")

    resp = df[schema.response]
    ok = pd.to_numeric(resp, errors="coerce")
    if ok.isna().any() or not ok.isin([0, 1]).all():
        raise PanelFormatError(f"response column {schema.response!r} must be binary 0/1")

    counts = df.groupby(schema.id, sort=True)[schema.time].count()
    T = int(counts.max())
    short = counts[counts != T]
    if len(short):
        detail = ", ".join(f"{sid!r} has {c} of {T}" for sid, c in short.items())
        raise PanelFormatError(f"ragged panel: subject {detail} occasions")
    df = df.sort_values([schema.id, schema.time], kind="mergesort")
    times = df.groupby(schema.id, sort=True)[schema.time].apply(tuple)
    if times.nunique() != 1:
        odd = times[times != times.iloc[0]].index[0]
        raise PanelFormatError(f"ragged panel: subject {odd!r} is observed at different times")
    if T < 2:
        raise PanelFormatError("panel needs at least 2 occasions per subject")

    blocks, names = [], []
    for c in covs:
        if c in schema.categorical:
            ref = _match_level(df[c], schema.categorical[c])
            if ref is None:
                raise PanelFormatError(f"reference level {schema.categorical[c]!r} not found in {c!r}")
            for lev in sorted((l for l in pd.unique(df[c]) if l != ref), key=str):
                blocks.append((df[c] == lev).to_numpy(dtype=float))
                names.append(_indicator_name(c, lev))
        else:
            col = pd.to_numeric(df[c], errors="coerce")
            if col.isna().any():
                raise PanelFormatError(
                    f"covariate {c!r} is not numeric; declare it categorical with a reference level"
                )
            blocks.append(col.to_numpy(dtype=float))
            names.append(str(c))

    ids = tuple(counts.index.tolist())
    n = len(ids)
    y = ok.loc[df.index].to_numpy().astype(np.int8).reshape(n, T)
    if blocks:
        x = np.stack(blocks, axis=1).reshape(n, T, len(blocks))
    else:
        x = np.zeros((n, T, 0))
    return PanelDataset(
        y=y, x=x, covariate_names=tuple(names), ids=ids, times=tuple(times.iloc[0])
    )


def load_panel(path, schema: PanelSchema = PanelSchema()) -> PanelDataset:
    """Read a long-format panel CSV."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    return frame_to_panel(pd.read_csv(path, float_precision="round_trip"), schema)


def panel_to_frame(dataset: PanelDataset, response: str = "y") -> pd.DataFrame:
    n, T = dataset.n, dataset.T
    ids = dataset.ids if dataset.ids is not None else tuple(range(1, n + 1))
    times = dataset.times if dataset.times is not None else tuple(range(1, T + 1))
    data = {
        "id": np.repeat(np.asarray(ids, dtype=object), T),
        "time": np.tile(np.asarray(times, dtype=object), n),
        response: dataset.y.reshape(-1).astype(int),
    }
    for j, name in enumerate(dataset.covariate_names):
        data[name] = dataset.x[:, :, j].reshape(-1)
    return pd.DataFrame(data)


def save_panel(dataset: PanelDataset, path, response: str = "y") -> None:
    """Write ``dataset`` as a long-format CSV readable by :func:`load_panel`."""
    panel_to_frame(dataset, response).to_csv(path, index=False, float_format="%.17g")


def add_lag_column(dataset: PanelDataset, policy: str = "drop", name: str = "y_lag") -> PanelDataset:
    """Append the previous response as a covariate.

    With ``policy="drop"`` the first occasion, which has no previous
    response, is removed; with ``"zero"`` its lag is set to 0.
    """
    if dataset.lag_column is not None:
        raise ValueError("dataset already has a lagged-response column")
    if policy not in LAG_POLICIES:
        raise ValueError(f"lag policy must be one of {LAG_POLICIES}, got {policy!r}")
    if name in dataset.covariate_names:
        raise ValueError(f"covariate {name!r} already exists")
    n, T, p = dataset.x.shape
    lag = np.zeros((n, T))
    lag[:, 1:] = dataset.y[:, :-1]
    x = np.concatenate([dataset.x, lag[:, :, None]], axis=2)
    y = dataset.y
    times = dataset.times
    if policy == "drop":
        if T < 3:
            raise ValueError("dropping the first occasion needs T >= 3")
        x, y = x[:, 1:], y[:, 1:]
        times = None if times is None else times[1:]
    return replace(
        dataset,
        y=y,
        x=x,
        covariate_names=tuple(dataset.covariate_names) + (name,),
        lag_column=p,
        times=times,
    )


@dataclass
class RunConfig:
    """Settings shared by the command-line subcommands.

    Stored as a flat JSON object; :meth:`from_dict` rejects unknown keys.
    ``starts`` is the total number of EM starts (one deterministic, the
    rest random).
    """

    data: Optional[str] = None
    id_column: str = "id"
    time_column: str = "time"
    response: str = "y"
    covariates: Optional[list] = None
    categorical: dict = field(default_factory=dict)
    lag: str = "drop"
    k: list = field(default_factory=lambda: [3])
    lambdas: list = field(default_factory=lambda: [0.0])
    folds: int = 10
    starts: int = 25
    seed: int = 0
    eps_loglik: float = 1e-8
    eps_params: float = 1e-5
    max_em_iters: int = 1000
    # simulation
    scenario: str = "a5"
    n: int = 250
    T: int = 10
    persistence: str = "low"
    include_lag: bool = False
    replicates: int = 10
    replicate: int = 0
    with_se: bool = True
    exclude_rank_deficient: bool = True
    fit_path: Optional[str] = None
    out: Optional[str] = None

    def __post_init__(self):
        if self.lag not in ("none",) + LAG_POLICIES:
            raise ValueError(f"lag must be one of none, drop, zero; got {self.lag!r}")
        self.k = [int(v) for v in self.k]
        self.lambdas = [float(v) for v in self.lambdas]
        if any(v < 1 for v in self.k):
            raise ValueError("k values must be >= 1")
        if any(not np.isfinite(v) or v < 0 for v in self.lambdas):
            raise ValueError("lambda values must be finite and >= 0")
        if self.starts < 1:
            raise ValueError("starts must be >= 1")

    def schema(self) -> PanelSchema:
        return PanelSchema(
            id=self.id_column,
            time=self.time_column,
            response=self.response,
            covariates=None if self.covariates is None else list(self.covariates),
            categorical=dict(self.categorical),
        )

    def em_config(self, lam: float = 0.0) -> EmConfig:
        return EmConfig(
            lam=float(lam),
            max_em_iters=self.max_em_iters,
            eps_loglik=self.eps_loglik,
            eps_params=self.eps_params,
            n_starts_deterministic=1,
            n_starts_random=self.starts - 1,
            seed=self.seed,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**d)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValueError(f"config is not valid JSON: {exc}") from None
        if not isinstance(d, dict):
            raise ValueError("config must be a JSON object")
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.loads(Path(path).read_text())


def to_jsonable(obj):
    """Recursively convert numpy values and non-finite floats (to None) for JSON."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if np.isfinite(obj) else None
    return obj


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(to_jsonable(obj), indent=2, allow_nan=False) + "\n")
