"""In-sample and rolling one-week-ahead predictions, MAE reports, ablation
tables, coefficient export and Wald significance."""

from __future__ import annotations

import datetime as dt
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.stats import norm

from .geo_graph import CountyGraph, SpatialCovariance
from .ingest import ObservationPanel, _as_date
from .model import FitConfig, ModelParams, all_weeks, predict, residuals
from .solver import FitReport, fit, max_workers

logger = logging.getLogger(__name__)

TARGETS = ("cases", "deaths")

# Window and state subsets used for the standard MAE breakdowns.
FIRST_PEAK = (dt.date(2020, 4, 5), dt.date(2020, 5, 3))
SECOND_PEAK = (dt.date(2020, 12, 13), dt.date(2021, 1, 3))
MOST_AFFECTED_STATES = ("NY", "NJ", "CA", "TX", "FL", "MA", "IL", "PA")


@dataclass
class PredictionSet:
    """Predictions on the panel's (week, county) grid; NaN where not predicted.

    ``trained_through[t]`` is the number of leading weeks the model used for
    week t was fitted on (``None`` for in-sample, where it is every week).
    """

    mode: str
    fips: list[str]
    states: list[str]
    week_starts: list[dt.date]
    raw: dict[str, np.ndarray]
    truth: dict[str, np.ndarray]
    clamp: bool = True
    trained_through: list[int | None] = field(default_factory=list)
    reports: dict[int, FitReport] = field(default_factory=dict)
    failures: dict[int, str] = field(default_factory=dict)

    def values(self, target: str, clamp: bool | None = None) -> np.ndarray:
        v = self.raw[target]
        clamp = self.clamp if clamp is None else clamp
        return np.where(np.isnan(v), np.nan, np.maximum(v, 0.0)) if clamp else v

    @property
    def predicted_weeks(self) -> np.ndarray:
        return np.flatnonzero(~np.isnan(self.raw["deaths"]).all(axis=1))

    def state_totals(self, target: str, clamp: bool | None = None) -> pd.DataFrame:
        """Sum of county predictions per state and week."""
        v = self.values(target, clamp)
        df = pd.DataFrame(v.T, index=self.states, columns=self.week_starts)
        return df.groupby(level=0).sum(min_count=1)

    def to_frame(self) -> pd.DataFrame:
        weeks = self.predicted_weeks
        frames = []
        for target in TARGETS:
            v = self.values(target)[weeks]
            frames.append(
                pd.DataFrame(
                    {
                        "fips": np.tile(self.fips, weeks.size),
                        "week_start": np.repeat([self.week_starts[t].isoformat() for t in weeks], len(self.fips)),
                        "target": target,
                        "predicted": v.ravel(),
                        "observed": self.truth[target][weeks].ravel(),
                        "mode": self.mode,
                    }
                )
            )
        return pd.concat(frames, ignore_index=True)

    def write_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, lineterminator="\n", float_format="%.10g")


def merge_benchmarks(pred: PredictionSet, sources: dict, target: str = "deaths") -> pd.DataFrame:
    """State-week totals next to external forecasts.

    Each source is a CSV with columns ``state,week,predicted_deaths``; weeks
    are matched on the panel's week start and unmatched rows are dropped.
    """
    totals = pred.state_totals(target)
    totals = totals[[pred.week_starts[t] for t in pred.predicted_weeks]]
    out = totals.stack().rename("stva").reset_index()
    out.columns = ["state", "week_start", "stva"]
    out["week_start"] = [w.isoformat() for w in out["week_start"]]
    for name, path in sources.items():
        ext = pd.read_csv(path, dtype={"state": str, "week": str})
        missing = {"state", "week", "predicted_deaths"} - set(ext.columns)
        if missing:
            raise ValueError(f"benchmark {name}: missing columns {sorted(missing)}")
        ext = ext.rename(columns={"week": "week_start", "predicted_deaths": name})
        ext["week_start"] = [_as_date(w).isoformat() for w in ext["week_start"]]
        out = out.merge(ext[["state", "week_start", name]], on=["state", "week_start"], how="left")
    return out


def _empty_like(panel):
    return {t: np.full((panel.T, panel.N), np.nan) for t in TARGETS}


def in_sample(params: ModelParams, panel: ObservationPanel, cfg: FitConfig) -> PredictionSet:
    """Refeed the panel through fitted parameters; the first p weeks stay NaN."""
    weeks = all_weeks(params, panel)
    raw = _empty_like(panel)
    raw["cases"][weeks], raw["deaths"][weeks] = predict(params, panel, weeks)
    return PredictionSet(
        mode="in_sample",
        fips=list(panel.fips),
        states=list(panel.states),
        week_starts=panel.weeks.starts,
        raw=raw,
        truth={"cases": panel.cases.astype(float), "deaths": panel.deaths.astype(float)},
        clamp=cfg.clamp_output,
        trained_through=[None] * panel.T,
    )


def resolve_week(panel: ObservationPanel, week) -> int:
    """0-based index from an int index or a date falling inside a panel week."""
    if isinstance(week, (int, np.integer)):
        return int(week)
    return panel.weeks.locate(_as_date(week))


def rolling_predict(
    panel: ObservationPanel,
    graph: CountyGraph,
    cov: SpatialCovariance,
    cfg: FitConfig,
    start_week,
    ablation: str = "full",
    min_train: int = 10,
    end_week=None,
) -> PredictionSet:
    """One-week-ahead predictions with a from-scratch refit per target week.

    For target week t the model only ever sees ``panel.head(t)``; its
    forecast uses the last p observed weeks of that truncated panel. Weeks
    whose fit diverges are recorded in ``failures`` and left as NaN.
    """
    start = resolve_week(panel, start_week)
    stop = panel.T if end_week is None else resolve_week(panel, end_week) + 1
    if start < cfg.p + min_train:
        raise ValueError(
            f"start week {start} leaves fewer than {min_train} training weeks after the first p={cfg.p}"
        )
    if start >= panel.T:
        raise ValueError("start week beyond panel end")

    def one(t):
        history = panel.head(t)
        params, report = fit(history, graph, cov, cfg, ablation)
        if report.diagnostic:
            return t, None, report
        return t, predict(params, history, [t]), report

    raw = _empty_like(panel)
    trained = [None] * panel.T
    out = PredictionSet(
        mode="one_week_ahead",
        fips=list(panel.fips),
        states=list(panel.states),
        week_starts=panel.weeks.starts,
        raw=raw,
        truth={"cases": panel.cases.astype(float), "deaths": panel.deaths.astype(float)},
        clamp=cfg.clamp_output,
        trained_through=trained,
    )
    with ThreadPoolExecutor(max_workers()) as pool:
        results = list(pool.map(one, range(start, stop)))
    for t, pred, report in results:
        out.reports[t] = report
        if pred is None:
            out.failures[t] = report.diagnostic
            logger.warning("week %d skipped: %s", t, report.diagnostic)
            continue
        raw["cases"][t], raw["deaths"][t] = pred[0][0], pred[1][0]
        trained[t] = t
    return out


@dataclass
class MaeReport:
    target: str
    clamped: bool
    per_state_week: dict[tuple[str, dt.date], float]
    per_state: dict[str, float]
    per_week: dict[dt.date, float]
    overall: float

    def to_frame(self) -> pd.DataFrame:
        rows = [(s, w.isoformat(), v) for (s, w), v in sorted(self.per_state_week.items())]
        return pd.DataFrame(rows, columns=["state", "week_start", "mae"])

    def write_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, lineterminator="\n", float_format="%.10g")


def mae(
    pred: PredictionSet,
    target: str = "deaths",
    weeks: tuple | None = None,
    states=None,
    clamp: bool | None = None,
) -> MaeReport:
    """Mean absolute county-level error over the predicted cells in scope.

    ``weeks`` is an inclusive (first, last) pair of dates or week indices
    selecting week starts; ``states`` an iterable of state codes.
    """
    if target not in TARGETS:
        raise ValueError(f"target must be one of {TARGETS}")
    clamp = pred.clamp if clamp is None else clamp
    err = np.abs(pred.truth[target] - pred.values(target, clamp))
    week_ok = ~np.isnan(err).all(axis=1)
    if weeks is not None:
        lo, hi = weeks
        idx = np.arange(len(pred.week_starts))
        starts = np.array(pred.week_starts)
        lo_ok = idx >= lo if isinstance(lo, (int, np.integer)) else starts >= _as_date(lo)
        hi_ok = idx <= hi if isinstance(hi, (int, np.integer)) else starts <= _as_date(hi)
        week_ok &= lo_ok & hi_ok
    county_ok = np.ones(len(pred.fips), dtype=bool)
    if states is not None:
        county_ok = np.isin(pred.states, list(states))
    scoped = err[np.ix_(week_ok, county_ok)]
    if scoped.size == 0 or np.isnan(scoped).all():
        raise ValueError("empty MAE scope")
    scope_states = np.array(pred.states)[county_ok]
    scope_weeks = [pred.week_starts[t] for t in np.flatnonzero(week_ok)]
    per_state_week = {}
    for s in sorted(set(scope_states)):
        cols = scope_states == s
        for w, row in zip(scope_weeks, scoped[:, cols]):
            per_state_week[(s, w)] = float(np.nanmean(row))
    per_state = {
        s: float(np.nanmean(scoped[:, scope_states == s])) for s in sorted(set(scope_states))
    }
    per_week = {
        w: float(np.mean([per_state_week[(s, w)] for s in per_state])) for w in scope_weeks
    }
    return MaeReport(target, bool(clamp), per_state_week, per_state, per_week, float(np.nanmean(scoped)))


@dataclass
class AblationRow:
    kind: str
    mae: float
    pct_increase: float | None


def pct_increase(mae_full: float, mae_ablated: float) -> float | None:
    """Relative MAE increase, normalized by the ablated model's MAE."""
    if mae_ablated == 0:
        return None
    return (mae_ablated - mae_full) / mae_ablated * 100.0


def ablation_table(reports: dict) -> list[AblationRow]:
    """Rows in the order given, each ablation compared against ``full``.

    ``reports`` maps ablation kind to a MaeReport or a bare MAE value.
    """
    if "full" not in reports:
        raise ValueError("ablation table needs the full-model report")

    def value(r):
        return r.overall if isinstance(r, MaeReport) else float(r)

    full = value(reports["full"])
    rows = []
    for kind, r in reports.items():
        v = value(r)
        rows.append(AblationRow(kind, v, None if kind == "full" else pct_increase(full, v)))
    return rows


def write_ablation_csv(rows: list[AblationRow], path) -> None:
    with open(path, "w") as fh:
        fh.write("kind,mae,pct_increase\n")
        for r in rows:
            pct = "" if r.pct_increase is None else f"{r.pct_increase:.2f}"
            fh.write(f"{r.kind},{r.mae:.10g},{pct}\n")


def coefficient_export(
    params: ModelParams, graph: CountyGraph, focus: int, matrix: str = "A", lag: int = 1
) -> pd.DataFrame:
    """Column ``focus`` of a lag matrix: one row per county i with (i, focus)
    in the pattern, giving the coefficient linking the focus county's past
    value to county i's current value."""
    if matrix not in ("A", "B", "H"):
        raise ValueError("matrix must be one of A, B, H")
    if not 1 <= lag <= params.p:
        raise ValueError(f"lag must be in 1..{params.p}")
    if not 0 <= focus < params.n:
        raise ValueError("focus county index out of range")
    pat = params.pattern
    sel = np.flatnonzero(pat.cols == focus)
    vals = getattr(params, matrix)[lag - 1, sel]
    return pd.DataFrame(
        {
            "fips": [graph.fips[i] for i in pat.rows[sel]],
            "state": [graph.states[i] for i in pat.rows[sel]],
            "focus_fips": graph.fips[focus],
            "matrix": matrix,
            "lag": lag,
            "value": vals,
        }
    )


def export_geojson(table: pd.DataFrame, graph: CountyGraph, path) -> None:
    """Point features at county centroids carrying the coefficient as a property."""
    coords = {c.fips: (c.lon, c.lat) for c in graph.counties}
    features = [
        {
            "type": "Feature",
            "id": r.fips,
            "geometry": {"type": "Point", "coordinates": list(coords[r.fips])},
            "properties": {
                "fips": r.fips,
                "focus_fips": r.focus_fips,
                "matrix": r.matrix,
                "lag": int(r.lag),
                "value": float(r.value),
            },
        }
        for r in table.itertuples(index=False)
    ]
    Path(path).write_text(json.dumps({"type": "FeatureCollection", "features": features}, indent=1) + "\n")


@dataclass
class CoefficientStat:
    matrix: str
    lag: int | None
    row: str
    col: str
    estimate: float
    std_error: float
    t_value: float
    p_value: float
    flag: str = ""


def _wald(est, se):
    if est == 0 and se > 0:
        return 0.0, 1.0
    if not (np.isfinite(se) and se > 0):
        return math.nan, math.nan
    t = est / se
    return t, float(min(1.0, 2.0 * norm.sf(abs(t))))


def _block_se(info: np.ndarray) -> np.ndarray | None:
    """Square roots of the diagonal of info^-1, or None when singular."""
    if info.size == 0:
        return np.zeros(0)
    if np.linalg.matrix_rank(info) < info.shape[0]:
        return None
    cov = np.linalg.inv(info)
    d = np.diag(cov)
    if np.any(d <= 0):
        return None
    return np.sqrt(d)


def significance(
    params: ModelParams,
    panel: ObservationPanel,
    cov: SpatialCovariance,
    cfg: FitConfig,
    weeks=None,
    graph: CountyGraph | None = None,
) -> list[CoefficientStat]:
    """Wald statistics from a block-diagonal Gauss-Markov approximation.

    Residuals of each equation family (cases, deaths) are modelled as
    s_f^2 * sigma with s_f^2 estimated from the whitened residual sum of
    squares. The information matrix of the unpenalized whitened least
    squares problem is split into per-(family, county) blocks for the
    spatial coefficients (exact for each block: the row's regressors only
    affect that county) and one dense block per family for the shared
    covariate coefficients; cross-block terms are ignored. Two-sided
    p-values use the normal distribution.
    """
    weeks = all_weeks(params, panel) if weeks is None else np.asarray(weeks, dtype=np.int64)
    pat = params.pattern
    p, K, L, N = params.p, params.K, params.L, params.n
    fips = list(panel.fips) if graph is None else graph.fips
    e_c, e_d = residuals(params, panel, weeks)
    n_obs = weeks.size * N
    n_par = {"c": p * pat.nnz + K * p + L, "d": 2 * p * pat.nnz + K * p + L}
    dof = {f: max(n_obs - n_par[f], 1) for f in n_par}
    scale = {"c": cov.quad(e_c) / dof["c"], "d": cov.quad(e_d) / dof["d"]}
    diag_inv = np.diag(cov.solve(np.eye(N)))

    out: list[CoefficientStat] = []
    order = np.argsort(pat.rows, kind="stable")
    bounds = np.searchsorted(pat.rows[order], np.arange(N + 1))
    cases = panel.cases.astype(float)
    deaths = panel.deaths.astype(float)

    for i in range(N):
        ents = order[bounds[i] : bounds[i + 1]]
        cols = pat.cols[ents]
        lagged_c = [cases[weeks - tau][:, cols] for tau in range(1, p + 1)]
        lagged_d = [deaths[weeks - tau][:, cols] for tau in range(1, p + 1)]
        for fam, blocks in (("c", [("B", lagged_c)]), ("d", [("H", lagged_c), ("A", lagged_d)])):
            design = np.hstack([x for _, xs in blocks for x in xs])
            if scale[fam] > 0 and design.shape[1] <= design.shape[0]:
                info = diag_inv[i] * design.T @ design / scale[fam]
            else:
                info = None
            se = None if info is None else _block_se(info)
            pos = 0
            for name, xs in blocks:
                for tau in range(1, p + 1):
                    for k, j in zip(ents, cols):
                        est = float(getattr(params, name)[tau - 1, k])
                        s = math.nan if se is None else float(se[pos])
                        t, pv = _wald(est, s)
                        flag = "" if se is not None else "singular block"
                        out.append(CoefficientStat(name, tau, fips[i], fips[j], est, s, t, pv, flag))
                        pos += 1

    # shared covariate coefficients
    for fam, (mob_name, dem_name) in (("c", ("mu", "upsilon")), ("d", ("nu", "zeta"))):
        regs, labels = [], []
        for tau in range(1, p + 1):
            for k in range(K):
                regs.append(panel.mobility[k, weeks - tau].astype(float))
                labels.append((mob_name, tau, panel.mobility_names[k], float(getattr(params, mob_name)[k, tau - 1])))
        for l in range(L):
            regs.append(np.broadcast_to(panel.demographics[l], (weeks.size, N)).astype(float))
            labels.append((dem_name, None, panel.demographic_names[l], float(getattr(params, dem_name)[l])))
        if not regs:
            continue
        # info[a, b] = sum_t x_a,t' sigma^-1 x_b,t / s^2
        stacked = np.stack(regs)  # (q, W, N)
        whitened = cov.solve(stacked.reshape(-1, N).T).T.reshape(stacked.shape)
        info = np.einsum("awn,bwn->ab", stacked, whitened) / scale[fam] if scale[fam] > 0 else None
        se = None if info is None else _block_se(info)
        for a, (name, lag, label, est) in enumerate(labels):
            s = math.nan if se is None else float(se[a])
            t, pv = _wald(est, s)
            out.append(CoefficientStat(name, lag, "", label, est, s, t, pv, "" if se is not None else "singular block"))
    return out


def write_coefficients_csv(stats: list[CoefficientStat], path) -> None:
    def fmt(x):
        return "" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.10g}"

    with open(path, "w") as fh:
        fh.write("matrix,lag,row_fips,col_fips,estimate,t_value,p_value\n")
        for s in stats:
            lag = "" if s.lag is None else str(s.lag)
            fh.write(f"{s.matrix},{lag},{s.row},{s.col},{fmt(s.estimate)},{fmt(s.t_value)},{fmt(s.p_value)}\n")
