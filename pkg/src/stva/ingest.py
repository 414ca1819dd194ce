"""Raw CSV ingestion, weekly aggregation and the aligned observation panel."""

from __future__ import annotations

import datetime as dt
import io
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .geo_graph import CountyGraph, read_graph

logger = logging.getLogger(__name__)

MOBILITY_CATEGORIES = (
    "retail_and_recreation",
    "grocery_and_pharmacy",
    "parks",
    "transit_stations",
    "workplaces",
    "residential",
)
DEMOGRAPHIC_FACTORS = ("total_population", "pct_65_over")

DEFAULT_START = dt.date(2020, 3, 15)
DEFAULT_T = 49

PANEL_FORMAT = "stva-panel/1"


class IngestError(ValueError):
    """Schema mismatch or invalid values in a raw data file."""


@dataclass(frozen=True)
class WeekIndex:
    """Contiguous Sunday-to-Saturday weeks."""

    start: dt.date = DEFAULT_START
    T: int = DEFAULT_T

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("WeekIndex needs at least one week")

    @classmethod
    def between(cls, start, end) -> WeekIndex:
        """Weeks whose start dates run from ``start`` through ``end`` inclusive."""
        start, end = _as_date(start), _as_date(end)
        return cls(start, (end - start).days // 7 + 1)

    @property
    def starts(self) -> list[dt.date]:
        return [self.start + dt.timedelta(weeks=t) for t in range(self.T)]

    @property
    def end(self) -> dt.date:
        """Last day (Saturday) covered by the window."""
        return self.start + dt.timedelta(days=7 * self.T - 1)

    def locate(self, day) -> int:
        """Index of the week containing ``day``."""
        off = (_as_date(day) - self.start).days
        if not 0 <= off < 7 * self.T:
            raise KeyError(f"{day} outside week window {self.start}..{self.end}")
        return off // 7


def _as_date(value) -> dt.date:
    if isinstance(value, dt.datetime):
        return value.date()
    if isinstance(value, dt.date):
        return value
    return dt.date.fromisoformat(str(value))


@dataclass
class IngestReport:
    unknown_fips_rows: int = 0
    unknown_fips: list[str] = field(default_factory=list)
    missing_counties: list[str] = field(default_factory=list)
    clamped_days: int = 0
    imputed_mobility_cells: int = 0
    flags: list[str] = field(default_factory=list)

    def summary(self) -> str:
        parts = []
        if self.unknown_fips_rows:
            parts.append(f"{self.unknown_fips_rows} rows with unknown FIPS skipped")
        if self.missing_counties:
            parts.append(f"{len(self.missing_counties)} counties absent and zero-filled")
        if self.clamped_days:
            parts.append(f"{self.clamped_days} negative daily increments clamped")
        if self.imputed_mobility_cells:
            parts.append(f"{self.imputed_mobility_cells} mobility cells imputed")
        parts.extend(self.flags)
        return "; ".join(parts) or "clean"


@dataclass
class ObservationPanel:
    """Weekly counts and covariates on a common county/week index.

    Arrays: ``cases``/``deaths`` (T, N); ``mobility`` (K, T, N);
    ``demographics`` (L, N). ``stats`` maps covariate name to the
    (mean, std) needed to undo standardization.
    """

    fips: list[str]
    states: list[str]
    weeks: WeekIndex
    cases: np.ndarray
    deaths: np.ndarray
    mobility: np.ndarray
    demographics: np.ndarray
    mobility_names: tuple[str, ...] = MOBILITY_CATEGORIES
    demographic_names: tuple[str, ...] = DEMOGRAPHIC_FACTORS
    stats: dict[str, tuple[float, float]] = field(default_factory=dict)
    imputed: np.ndarray | None = None
    flags: list[str] = field(default_factory=list)

    def __post_init__(self):
        T, N = self.cases.shape
        if self.deaths.shape != (T, N):
            raise ValueError("cases and deaths must share shape (T, N)")
        if self.mobility.ndim != 3 or self.mobility.shape[1:] != (T, N):
            raise ValueError(f"mobility must be (K, {T}, {N}), got {self.mobility.shape}")
        if self.demographics.ndim != 2 or self.demographics.shape[1] != N:
            raise ValueError(f"demographics must be (L, {N}), got {self.demographics.shape}")
        if len(self.fips) != N or len(self.states) != N:
            raise ValueError("county labels do not match N")
        if self.weeks.T != T:
            raise ValueError("week index does not match T")
        if len(self.mobility_names) != self.K or len(self.demographic_names) != self.L:
            raise ValueError("covariate names do not match array shapes")

    @property
    def T(self) -> int:
        return self.cases.shape[0]

    @property
    def N(self) -> int:
        return self.cases.shape[1]

    @property
    def K(self) -> int:
        return self.mobility.shape[0]

    @property
    def L(self) -> int:
        return self.demographics.shape[0]

    def head(self, t: int) -> ObservationPanel:
        """Panel restricted to weeks ``0 .. t-1``."""
        if not 1 <= t <= self.T:
            raise ValueError(f"cannot keep {t} of {self.T} weeks")
        return replace(
            self,
            weeks=WeekIndex(self.weeks.start, t),
            cases=self.cases[:t].copy(),
            deaths=self.deaths[:t].copy(),
            mobility=self.mobility[:, :t].copy(),
            imputed=None if self.imputed is None else self.imputed[:, :t].copy(),
            flags=list(self.flags),
        )

    def save(self, path) -> None:
        """Write ``manifest.json`` and ``arrays.npz`` into directory ``path``."""
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        manifest = {
            "format": PANEL_FORMAT,
            "N": self.N,
            "T": self.T,
            "K": self.K,
            "L": self.L,
            "week_starts": [d.isoformat() for d in self.weeks.starts],
            "fips": self.fips,
            "states": self.states,
            "mobility_names": list(self.mobility_names),
            "demographic_names": list(self.demographic_names),
            "standardization": {k: list(v) for k, v in self.stats.items()},
            "flags": self.flags,
        }
        (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        arrays = {
            "cases": self.cases,
            "deaths": self.deaths,
            "mobility": self.mobility,
            "demographics": self.demographics,
        }
        if self.imputed is not None:
            arrays["imputed"] = self.imputed
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        (path / "arrays.npz").write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path) -> ObservationPanel:
        path = Path(path)
        manifest = json.loads((path / "manifest.json").read_text())
        if manifest.get("format") != PANEL_FORMAT:
            raise IngestError(f"{path}: not a panel bundle")
        with np.load(path / "arrays.npz") as z:
            arrays = {k: z[k] for k in z.files}
        starts = manifest["week_starts"]
        return cls(
            fips=manifest["fips"],
            states=manifest["states"],
            weeks=WeekIndex(dt.date.fromisoformat(starts[0]), len(starts)),
            cases=arrays["cases"],
            deaths=arrays["deaths"],
            mobility=arrays["mobility"],
            demographics=arrays["demographics"],
            mobility_names=tuple(manifest["mobility_names"]),
            demographic_names=tuple(manifest["demographic_names"]),
            stats={k: tuple(v) for k, v in manifest["standardization"].items()},
            imputed=arrays.get("imputed"),
            flags=list(manifest["flags"]),
        )


def _normalize_fips(col: pd.Series) -> pd.Series:
    """Zero-padded 5-character FIPS; blanks become NaN."""
    s = col.astype("string").str.strip()
    s = s.str.replace(r"\.0$", "", regex=True)
    s = s.where(s.str.len() > 0)
    return s.str.zfill(5)


def _split_known(df: pd.DataFrame, graph: CountyGraph, report: IngestReport) -> pd.DataFrame:
    known = df["fips"].isin(graph.index)
    if (~known).any():
        report.unknown_fips_rows += int((~known).sum())
        report.unknown_fips = sorted(set(df.loc[~known, "fips"].dropna()) | set(report.unknown_fips))
        logger.warning(
            "skipped %d rows with %d unknown FIPS values",
            int((~known).sum()),
            df.loc[~known, "fips"].nunique(),
        )
    return df[known]


def load_epi(csv, graph: CountyGraph, weeks: WeekIndex = WeekIndex(), report: IngestReport | None = None):
    """Weekly incident cases and deaths from cumulative daily counts.

    Per county the cumulative series is forward-filled over missing days,
    preceded by zero before its first record, differenced, clamped at zero
    and summed within each week of ``weeks``.

    Returns:
        (cases, deaths, report) with integer (T, N) arrays.
    """
    report = report if report is not None else IngestReport()
    df = pd.read_csv(csv, dtype={"fips": str}, float_precision="round_trip")
    missing = {"date", "fips", "cases", "deaths"} - set(df.columns)
    if missing:
        raise IngestError(f"epi file missing columns {sorted(missing)}")
    df["fips"] = _normalize_fips(df["fips"])
    df["date"] = pd.to_datetime(df["date"]).dt.normalize()
    df = _split_known(df, graph, report)

    T, N = weeks.T, graph.n
    first = pd.Timestamp(weeks.start)
    last = pd.Timestamp(weeks.end)
    if not df.empty and df["date"].min() > first:
        logger.info("epi file starts after the window; earlier days taken as zero")
    out = {}
    present = set(df["fips"])
    report.missing_counties = sorted(set(graph.fips) - present)
    if report.missing_counties:
        logger.warning("%d counties absent from epi file, zero-filled", len(report.missing_counties))
    day_lo = min(first, df["date"].min()) if not df.empty else first
    days = pd.date_range(day_lo - pd.Timedelta(days=1), last, freq="D")
    in_window = (days >= first) & (days <= last)
    week_of_day = ((days[in_window] - first).days // 7).to_numpy()

    for target in ("cases", "deaths"):
        wide = (
            df.pivot_table(index="date", columns="fips", values=target, aggfunc="last")
            .reindex(index=days)
            .reindex(columns=graph.fips)
        )
        cum = wide.ffill().fillna(0.0).to_numpy(dtype=float)
        daily = np.diff(cum, axis=0, prepend=0.0)
        daily[0] = 0.0
        neg = daily < 0
        report.clamped_days += int(neg[in_window].sum())
        daily[neg] = 0.0
        weekly = np.zeros((T, N))
        np.add.at(weekly, week_of_day, daily[in_window])
        out[target] = np.rint(weekly).astype(np.int64)
    return out["cases"], out["deaths"], report


_GOOGLE_SUFFIX = "_percent_change_from_baseline"


def load_mobility(
    csv,
    graph: CountyGraph,
    weeks: WeekIndex = WeekIndex(),
    categories=MOBILITY_CATEGORIES,
    report: IngestReport | None = None,
):
    """Weekly mean percent change per county and category.

    Weeks with no daily value are imputed as 0 (the baseline level) and
    marked in the returned (K, T, N) boolean mask.

    Returns:
        (mobility, imputed_mask, report)
    """
    report = report if report is not None else IngestReport()
    df = pd.read_csv(csv, dtype={"fips": str, "census_fips_code": str}, float_precision="round_trip")
    df = df.rename(columns={c: c[: -len(_GOOGLE_SUFFIX)] for c in df.columns if c.endswith(_GOOGLE_SUFFIX)})
    if "fips" not in df.columns and "census_fips_code" in df.columns:
        df = df.rename(columns={"census_fips_code": "fips"})
    absent = [c for c in ("date", "fips", *categories) if c not in df.columns]
    if absent:
        raise IngestError(f"mobility file missing columns {absent}")
    df["fips"] = _normalize_fips(df["fips"])
    df = df.dropna(subset=["fips"])
    df = _split_known(df, graph, report)
    day = pd.to_datetime(df["date"]).dt.date
    off = np.array([(d - weeks.start).days for d in day], dtype=np.int64)
    keep = (off >= 0) & (off < 7 * weeks.T)
    df = df.loc[keep]
    week = off[keep] // 7
    col = df["fips"].map(graph.index).to_numpy()

    K, T, N = len(categories), weeks.T, graph.n
    total = np.zeros((K, T, N))
    count = np.zeros((K, T, N))
    for k, name in enumerate(categories):
        vals = pd.to_numeric(df[name], errors="coerce").to_numpy(dtype=float)
        ok = np.isfinite(vals)
        np.add.at(total[k], (week[ok], col[ok]), vals[ok])
        np.add.at(count[k], (week[ok], col[ok]), 1.0)
    imputed = count == 0
    mobility = np.divide(total, count, out=np.zeros_like(total), where=~imputed)
    report.imputed_mobility_cells += int(imputed.sum())
    return mobility, imputed, report


def load_census(csv, graph: CountyGraph) -> np.ndarray:
    """(2, N) array of total population and fraction aged 65+.

    Raises:
        IngestError: invalid rows (negative population, fraction outside
            [0, 1]) or graph counties missing from the file.
    """
    df = pd.read_csv(csv, dtype={"fips": str}, float_precision="round_trip")
    missing_cols = {"fips", *DEMOGRAPHIC_FACTORS} - set(df.columns)
    if missing_cols:
        raise IngestError(f"census file missing columns {sorted(missing_cols)}")
    df["fips"] = _normalize_fips(df["fips"])
    pop = pd.to_numeric(df["total_population"], errors="coerce")
    frac = pd.to_numeric(df["pct_65_over"], errors="coerce")
    bad = ~((pop >= 0) & (frac >= 0) & (frac <= 1))
    if bad.any():
        rows = [
            f"{r.fips}: total_population={r.total_population}, pct_65_over={r.pct_65_over}"
            for r in df[bad].itertuples()
        ]
        raise IngestError("rejected census rows (population >= 0 and 0 <= pct_65_over <= 1 required):\n  " + "\n  ".join(rows))
    df = df[df["fips"].isin(graph.index)].drop_duplicates("fips", keep="last").set_index("fips")
    absent = [f for f in graph.fips if f not in df.index]
    if absent:
        raise IngestError(f"census file lacks {len(absent)} counties: {', '.join(absent[:20])}")
    df = df.loc[graph.fips]
    return np.vstack([df["total_population"].to_numpy(float), df["pct_65_over"].to_numpy(float)])


def _zscore(x: np.ndarray) -> tuple[np.ndarray, float, float]:
    mean = float(x.mean())
    std = float(x.std())
    if not std > 0:
        return np.zeros_like(x), mean, 0.0
    return (x - mean) / std, mean, std


def standardize(panel: ObservationPanel) -> ObservationPanel:
    """Z-score each mobility category over all (week, county) cells and each
    demographic factor over counties. Counts are untouched.

    Constant covariates become all-zero and are flagged. Repeated calls
    compose the recorded (mean, std) so the stats always map back to the
    raw scale.
    """
    mobility = np.empty_like(panel.mobility, dtype=float)
    demographics = np.empty_like(panel.demographics, dtype=float)
    stats = dict(panel.stats)
    flags = list(panel.flags)

    def record(name, mean, std):
        m0, s0 = stats.get(name, (0.0, 1.0))
        stats[name] = (m0 + s0 * mean, s0 * std)
        if std == 0:
            msg = f"constant covariate {name} set to 0"
            if msg not in flags:
                flags.append(msg)
                logger.warning(msg)

    for k, name in enumerate(panel.mobility_names):
        mobility[k], mean, std = _zscore(panel.mobility[k].astype(float))
        record(name, mean, std)
    for l, name in enumerate(panel.demographic_names):
        demographics[l], mean, std = _zscore(panel.demographics[l].astype(float))
        record(name, mean, std)
    return replace(panel, mobility=mobility, demographics=demographics, stats=stats, flags=flags)


def assemble(
    graph: CountyGraph,
    epi_csv,
    mobility_csv=None,
    census_csv=None,
    weeks: WeekIndex = WeekIndex(),
    standardized: bool = True,
) -> tuple[ObservationPanel, IngestReport]:
    """Load all sources onto the graph's county order and build the panel.

    Without a mobility or census file the corresponding covariate block is
    empty (K = 0 or L = 0).
    """
    report = IngestReport()
    cases, deaths, _ = load_epi(epi_csv, graph, weeks, report)
    if mobility_csv is not None:
        mobility, imputed, _ = load_mobility(mobility_csv, graph, weeks, report=report)
        mob_names = MOBILITY_CATEGORIES
    else:
        mobility = np.zeros((0, weeks.T, graph.n))
        imputed, mob_names = None, ()
    if census_csv is not None:
        demographics, demo_names = load_census(census_csv, graph), DEMOGRAPHIC_FACTORS
    else:
        demographics, demo_names = np.zeros((0, graph.n)), ()
    panel = ObservationPanel(
        fips=list(graph.fips),
        states=list(graph.states),
        weeks=weeks,
        cases=cases,
        deaths=deaths,
        mobility=mobility,
        demographics=demographics,
        mobility_names=tuple(mob_names),
        demographic_names=tuple(demo_names),
        imputed=imputed,
    )
    if standardized:
        panel = standardize(panel)
    report.flags.extend(panel.flags)
    return panel, report


def save_bundle(path, panel: ObservationPanel, graph: CountyGraph) -> None:
    """Panel bundle plus the county graph it is indexed by."""
    panel.save(path)
    graph.write_csv(Path(path) / "counties.csv", Path(path) / "adjacency.csv")


def load_bundle(path) -> tuple[ObservationPanel, CountyGraph]:
    path = Path(path)
    panel = ObservationPanel.load(path)
    graph = read_graph(path / "counties.csv", path / "adjacency.csv", mainland_only=False)
    if graph.fips != panel.fips:
        raise IngestError(f"{path}: county table does not match panel order")
    return panel, graph
