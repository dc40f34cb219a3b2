"""Command-line interface: ``penhmm {fit,cv,simulate,bench,decode}``.

Every command writes one JSON document (to ``--out`` or standard output)
and, with ``--out``, CSV tables alongside it. Failures are reported as a
JSON object on standard error with exit code 2 for invalid usage or input
and 3 for numerical failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from . import __version__
from .cv import CvGrid, cross_validate
from .em import FitResult, fit
from .inference import decode_dataset, standard_errors
from .io import (
    PanelFormatError,
    RunConfig,
    add_lag_column,
    load_panel,
    save_panel,
    to_jsonable,
    write_json,
)
from .sim import ALPHA_SPECS, Scenario, run_study, simulate

EXIT_USAGE = 2
EXIT_NUMERIC = 3

logger = logging.getLogger("penhmm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def parse_k(text: str) -> list[int]:
    """``"3"``, ``"1,2,3"`` or ``"1..4"``."""
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            lo, hi = int(lo), int(hi)
            if lo > hi:
                raise ValueError
            return list(range(lo, hi + 1))
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid state count(s): {text!r}") from None


def parse_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid number list: {text!r}") from None


# flag name -> RunConfig field
_OVERRIDES = {
    "data": "data",
    "k": "k",
    "lambdas": "lambdas",
    "folds": "folds",
    "starts": "starts",
    "seed": "seed",
    "eps_loglik": "eps_loglik",
    "eps_params": "eps_params",
    "max_iter": "max_em_iters",
    "lag": "lag",
    "out": "out",
    "scenario": "scenario",
    "n": "n",
    "T": "T",
    "persistence": "persistence",
    "include_lag": "include_lag",
    "replicates": "replicates",
    "replicate": "replicate",
    "no_se": "with_se",
    "keep_rank_deficient": "exclude_rank_deficient",
    "fit_path": "fit_path",
    "covariates": "covariates",
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="penhmm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"penhmm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, data=True):
        p.add_argument("--config", help="JSON file with RunConfig keys; flags override it")
        if data:
            p.add_argument("--data", help="long-format panel CSV (id,time,y,covariates...)")
            p.add_argument("--covariates", type=lambda s: [c for c in s.split(",") if c],
                           help="comma-separated covariate columns (default: all others)")
            p.add_argument("--lag", choices=["drop", "zero", "none"],
                           help="append the lagged response; drop or zero-fill the first occasion")
        p.add_argument("--starts", type=int, help="total EM starts (1 deterministic + random)")
        p.add_argument("--seed", type=int)
        p.add_argument("--eps-loglik", type=float, dest="eps_loglik")
        p.add_argument("--eps-params", type=float, dest="eps_params")
        p.add_argument("--max-iter", type=int, dest="max_iter")
        p.add_argument("--out", help="output directory (default: JSON to stdout)")
        p.add_argument("-v", "--verbose", action="store_true")

    def scenario_flags(p):
        p.add_argument("--scenario", choices=sorted(ALPHA_SPECS))
        p.add_argument("--n", type=int)
        p.add_argument("--T", type=int)
        p.add_argument("--persistence", choices=["high", "low"])
        p.add_argument("--include-lag", action="store_const", const=True, dest="include_lag")

    p = sub.add_parser("fit", help="fit one model and report estimates, SEs and decoding")
    common(p)
    p.add_argument("--k", type=parse_k)
    p.add_argument("--lambda", type=parse_floats, dest="lambdas")
    p.add_argument("--no-se", action="store_const", const=False, dest="no_se")

    p = sub.add_parser("cv", help="cross-validated likelihood over a (k, lambda) grid")
    common(p)
    p.add_argument("--k", type=parse_k)
    p.add_argument("--lambda", type=parse_floats, dest="lambdas")
    p.add_argument("--folds", type=int)

    p = sub.add_parser("simulate", help="draw a dataset from a simulation scenario")
    common(p, data=False)
    scenario_flags(p)
    p.add_argument("--replicate", type=int)

    p = sub.add_parser("bench", help="penalized vs unpenalized study on one scenario")
    common(p, data=False)
    scenario_flags(p)
    p.add_argument("--lambda", type=parse_floats, dest="lambdas")
    p.add_argument("--replicates", type=int)
    p.add_argument("--no-se", action="store_const", const=False, dest="no_se")
    p.add_argument(
        "--keep-rank-deficient", action="store_const", const=False, dest="keep_rank_deficient",
        help="keep replicates whose unpenalized fit fails the identifiability check",
    )

    p = sub.add_parser("decode", help="state and mean-intercept trajectories from a saved fit")
    common(p)
    p.add_argument("--fit", dest="fit_path", required=True, help="fit.json written by 'fit'")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        try:
            cfg = RunConfig.load(args.config)
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}") from None
        except (ValueError, TypeError) as exc:
            raise UsageError(f"bad config: {exc}") from None
    updates = {}
    for flag, name in _OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            updates[name] = value
    try:
        return replace(cfg, **updates)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None


def _load_data(cfg: RunConfig):
    if not cfg.data:
        raise UsageError("--data is required")
    try:
        data = load_panel(cfg.data, cfg.schema())
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    if cfg.lag != "none":
        data = add_lag_column(data, cfg.lag)
    return data


def _emit(doc: dict, cfg: RunConfig, name: str, tables: Optional[dict] = None) -> None:
    if cfg.out:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        write_json(doc, out / f"{name}.json")
        for fname, frame in (tables or {}).items():
            frame.to_csv(out / fname, index=False)
    else:
        json.dump(to_jsonable(doc), sys.stdout, indent=2, allow_nan=False)
        sys.stdout.write("\n")


def _single(values, what):
    if len(values) != 1:
        raise UsageError(f"'fit' takes a single {what}, got {values}")
    return values[0]


def _coefficient_table(data, res: FitResult, report) -> pd.DataFrame:
    k = res.params.k
    names = [f"alpha{u + 1}" for u in range(k)] + list(data.covariate_names)
    est = res.params.theta1
    se = report.se if report is not None and report.se is not None else np.full(est.size, np.nan)
    pv = np.full(est.size, np.nan)
    if report is not None and report.pvalues is not None:
        pv[k:] = report.pvalues
    return pd.DataFrame({"parameter": names, "estimate": est, "se": se, "p_value": pv})


def _decoding_table(data, dec) -> pd.DataFrame:
    n, T = dec.states.shape
    ids = data.ids if data.ids is not None else tuple(range(1, n + 1))
    times = data.times if data.times is not None else tuple(range(1, T + 1))
    return pd.DataFrame(
        {
            "id": np.repeat(np.asarray(ids, dtype=object), T),
            "time": np.tile(np.asarray(times, dtype=object), n),
            "state": dec.states.reshape(-1),
            "alpha_bar": dec.alpha_bar.reshape(-1),
        }
    )


def cmd_fit(cfg: RunConfig) -> dict:
    data = _load_data(cfg)
    k = _single(cfg.k, "k")
    lam = _single(cfg.lambdas, "lambda")
    res = fit(data, k, cfg.em_config(lam))
    if not np.isfinite(res.loglik):
        raise FloatingPointError(f"fit ended with a non-finite log-likelihood ({res.loglik})")
    report = None
    if cfg.with_se:
        report = standard_errors(data, res, lam)
        res.se_theta1 = report.se
        res.info_rank_ok = report.full_rank
    dec = decode_dataset(data, res)
    coef = _coefficient_table(data, res, report)
    doc = {
        "command": "fit",
        "k": k,
        "lambda": lam,
        "covariate_names": list(data.covariate_names),
        "fit": res.to_dict(),
        "standard_errors": None if report is None else report.to_dict(),
        "coefficients": coef.to_dict(orient="records"),
        "decoding": {"states": dec.states.tolist(), "alpha_bar": dec.alpha_bar.tolist()},
        "config": cfg.to_dict(),
    }
    _emit(doc, cfg, "fit", {"coefficients.csv": coef, "decoding.csv": _decoding_table(data, dec)})
    return doc


def cmd_cv(cfg: RunConfig) -> dict:
    data = _load_data(cfg)
    if cfg.folds > data.n:
        raise UsageError(f"--folds {cfg.folds} exceeds the number of subjects ({data.n})")
    try:
        grid = CvGrid(ks=cfg.k, lambdas=cfg.lambdas, M=cfg.folds, seed=cfg.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    result = cross_validate(data, grid, cfg.em_config())
    ks, lams, mat = result.matrix(grid.ks, grid.lambdas)
    table = pd.DataFrame(mat, index=pd.Index(ks, name="k"), columns=[f"lambda={l:g}" for l in lams])
    doc = {"command": "cv", "result": result.to_dict(), "config": cfg.to_dict()}
    _emit(doc, cfg, "cv", {"cv_table.csv": table.reset_index()})
    return doc


def _scenario(cfg: RunConfig) -> Scenario:
    try:
        return Scenario(
            n=cfg.n,
            T=cfg.T,
            persistence=cfg.persistence,
            alpha_spec=cfg.scenario,
            include_lag=cfg.include_lag,
            n_replicates=cfg.replicates,
            seed=cfg.seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_simulate(cfg: RunConfig) -> dict:
    sc = _scenario(cfg)
    data, states = simulate(sc, cfg.replicate)
    doc = {
        "command": "simulate",
        "scenario": sc.to_dict(),
        "replicate": cfg.replicate,
        "n": data.n,
        "T": data.T,
        "covariate_names": list(data.covariate_names),
    }
    if cfg.out:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        save_panel(data, out / "data.csv")
        frame = pd.DataFrame(
            {
                "id": np.repeat(np.asarray(data.ids), data.T),
                "time": np.tile(np.arange(1, data.T + 1), data.n),
                "state": states.reshape(-1) + 1,
            }
        )
        frame.to_csv(out / "states.csv", index=False)
        doc["files"] = {"data": str(out / "data.csv"), "states": str(out / "states.csv")}
        write_json(doc, out / "simulate.json")
    else:
        doc["data"] = {"y": data.y.tolist(), "x": data.x.tolist(), "states": (states + 1).tolist()}
        _emit(doc, cfg, "simulate")
    return doc


METRIC_COLUMNS = [
    "scenario", "lambda", "parameter", "mse", "pct_variation", "mean_se",
    "se_pct_variation", "mean_time", "time_pct_variation", "n_used",
]


def cmd_bench(cfg: RunConfig) -> dict:
    sc = _scenario(cfg)
    lams = [l for l in cfg.lambdas if l > 0] or [0.05]
    table = run_study(
        [sc],
        lams,
        cfg.em_config(),
        exclude_rank_deficient=cfg.exclude_rank_deficient,
        with_se=cfg.with_se,
    )
    rows = pd.DataFrame(table.rows(), columns=METRIC_COLUMNS)
    doc = {"command": "bench", "metrics": table.to_dict(), "config": cfg.to_dict()}
    _emit(doc, cfg, "bench", {"metrics.csv": rows})
    return doc


def cmd_decode(cfg: RunConfig) -> dict:
    data = _load_data(cfg)
    try:
        saved = json.loads(Path(cfg.fit_path).read_text())
    except FileNotFoundError:
        raise UsageError(f"fit file not found: {cfg.fit_path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"fit file is not valid JSON: {exc}") from None
    res = FitResult.from_dict(saved["fit"] if "fit" in saved else saved)
    if res.params.p != data.p:
        raise UsageError(f"fit has {res.params.p} coefficients but the data has {data.p} covariates")
    dec = decode_dataset(data, res)
    frame = _decoding_table(data, dec)
    doc = {"command": "decode", "k": res.k, "trajectories": frame.to_dict(orient="records")}
    _emit(doc, cfg, "decode", {"decoding.csv": frame})
    return doc


COMMANDS = {
    "fit": cmd_fit,
    "cv": cmd_cv,
    "simulate": cmd_simulate,
    "bench": cmd_bench,
    "decode": cmd_decode,
}


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
        )
        cfg = resolve_config(args)
        COMMANDS[args.command](cfg)
    except UsageError as exc:
        return _fail("usage", str(exc), EXIT_USAGE)
    # LinAlgError derives from ValueError, so it is caught first
    except (np.linalg.LinAlgError, ArithmeticError) as exc:
        return _fail("numerical", str(exc), EXIT_NUMERIC)
    except (PanelFormatError, ValueError, KeyError) as exc:
        # validation errors from data, configs and saved artifacts
        return _fail("invalid-input", str(exc), EXIT_USAGE)
    return 0


if __name__ == "__main__":
    sys.exit(main())
