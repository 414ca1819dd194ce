"""County graph, shared sparsity pattern and exponential spatial covariance."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
import pandas as pd
import scipy.linalg
import scipy.sparse as sp

logger = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0088

# State codes dropped when reading a county table with ``mainland_only``.
NON_MAINLAND = frozenset({"AK", "HI", "PR", "VI", "GU", "MP", "AS", "UM"})

# Default hub counties (FIPS of the county containing each metro core):
# New York, Los Angeles, Chicago, San Francisco, Seattle, Atlanta, Miami,
# Washington D.C., Boston, Houston.
DEFAULT_HUB_FIPS = (
    "36061", "06037", "17031", "06075", "53033",
    "13121", "12086", "11001", "25025", "48201",
)

DISTANCE_MODES = ("great-circle-normalized", "euclidean-degrees")


class GraphError(ValueError):
    """Invalid county table, adjacency list or graph construction."""


@dataclass(frozen=True)
class County:
    fips: str
    name: str
    state: str
    lat: float
    lon: float
    is_hub: bool = False

    def __post_init__(self):
        if len(self.fips) != 5 or not self.fips.isdigit():
            raise GraphError(f"FIPS must be 5 digits, got {self.fips!r}")
        if not (np.isfinite(self.lat) and np.isfinite(self.lon)):
            raise GraphError(f"non-finite coordinates for county {self.fips}")
        if not -90.0 <= self.lat <= 90.0:
            raise GraphError(f"latitude out of range for county {self.fips}: {self.lat}")
        if not -180.0 <= self.lon <= 180.0:
            raise GraphError(f"longitude out of range for county {self.fips}: {self.lon}")


@dataclass(frozen=True)
class CountyGraph:
    """Counties in index order, undirected adjacency edges and hub indices.

    Counties are kept sorted by FIPS; every matrix in the package uses this
    order. Edges are stored as ``(i, j)`` with ``i < j``.
    """

    counties: tuple[County, ...]
    edges: frozenset[tuple[int, int]] = frozenset()
    hubs: frozenset[int] = frozenset()

    def __post_init__(self):
        n = len(self.counties)
        fips = [c.fips for c in self.counties]
        if len(set(fips)) != n:
            raise GraphError("duplicate FIPS in county list")
        if fips != sorted(fips):
            raise GraphError("counties must be sorted by FIPS")
        for i, j in self.edges:
            if not (0 <= i < j < n):
                raise GraphError(f"invalid edge ({i}, {j}) for {n} counties")
        for h in self.hubs:
            if not 0 <= h < n:
                raise GraphError(f"hub index {h} out of range")

    @classmethod
    def build(cls, counties, edges=(), hubs=None) -> CountyGraph:
        """Build a graph from counties in any order.

        ``edges`` are pairs of FIPS strings or of positions in the sorted
        county list. ``hubs`` defaults to the counties flagged ``is_hub``.
        """
        counties = tuple(sorted(counties, key=lambda c: c.fips))
        index = {c.fips: i for i, c in enumerate(counties)}
        norm = set()
        for a, b in edges:
            i = index[a] if isinstance(a, str) else int(a)
            j = index[b] if isinstance(b, str) else int(b)
            if i == j:
                raise GraphError(f"self-loop edge on county {counties[i].fips}")
            e = (min(i, j), max(i, j))
            if e in norm:
                raise GraphError(f"duplicate edge {counties[e[0]].fips}-{counties[e[1]].fips}")
            norm.add(e)
        if hubs is None:
            hub_idx = {i for i, c in enumerate(counties) if c.is_hub}
        else:
            hub_idx = {index[h] if isinstance(h, str) else int(h) for h in hubs}
        counties = tuple(
            c if c.is_hub == (i in hub_idx) else replace(c, is_hub=i in hub_idx)
            for i, c in enumerate(counties)
        )
        return cls(counties, frozenset(norm), frozenset(hub_idx))

    @property
    def n(self) -> int:
        return len(self.counties)

    @cached_property
    def fips(self) -> list[str]:
        return [c.fips for c in self.counties]

    @cached_property
    def states(self) -> list[str]:
        return [c.state for c in self.counties]

    @cached_property
    def index(self) -> dict[str, int]:
        return {f: i for i, f in enumerate(self.fips)}

    @property
    def coords(self) -> np.ndarray:
        """(N, 2) array of (lat, lon) in degrees."""
        return np.array([[c.lat, c.lon] for c in self.counties], dtype=float).reshape(-1, 2)

    def with_hubs(self, hubs) -> CountyGraph:
        return CountyGraph.build(self.counties, sorted(self.edges), hubs)

    def with_edge(self, i: int, j: int) -> CountyGraph:
        return CountyGraph(self.counties, self.edges | {(min(i, j), max(i, j))}, self.hubs)

    def to_frames(self) -> tuple[pd.DataFrame, pd.DataFrame]:
        counties = pd.DataFrame(
            {
                "fips": self.fips,
                "name": [c.name for c in self.counties],
                "state": self.states,
                "lat": [c.lat for c in self.counties],
                "lon": [c.lon for c in self.counties],
                "is_hub": [int(i in self.hubs) for i in range(self.n)],
            }
        )
        edges = sorted(self.edges)
        adjacency = pd.DataFrame(
            {
                "fips_a": [self.fips[i] for i, _ in edges],
                "fips_b": [self.fips[j] for _, j in edges],
            }
        )
        return counties, adjacency

    def write_csv(self, counties_csv, adjacency_csv) -> None:
        counties, adjacency = self.to_frames()
        counties.to_csv(counties_csv, index=False, lineterminator="\n")
        adjacency.to_csv(adjacency_csv, index=False, lineterminator="\n")


def _zfill_fips(series: pd.Series) -> pd.Series:
    return series.astype(str).str.strip().str.zfill(5)


def read_graph(counties_csv, adjacency_csv=None, mainland_only: bool = True) -> CountyGraph:
    """Read ``counties.csv`` (``fips,name,state,lat,lon,is_hub``) and an
    optional ``adjacency.csv`` (``fips_a,fips_b``).

    Edges touching a county dropped by the mainland filter are ignored;
    edges naming an unknown county, self-loops and duplicates are errors.
    """
    df = pd.read_csv(counties_csv, dtype={"fips": str, "name": str, "state": str}, float_precision="round_trip")
    missing = {"fips", "name", "state", "lat", "lon", "is_hub"} - set(df.columns)
    if missing:
        raise GraphError(f"{counties_csv}: missing columns {sorted(missing)}")
    df["fips"] = _zfill_fips(df["fips"])
    excluded = set()
    if mainland_only:
        dropped = df["state"].isin(NON_MAINLAND)
        if dropped.any():
            logger.info("dropping %d non-mainland counties", int(dropped.sum()))
        excluded = set(df.loc[dropped, "fips"])
        df = df[~dropped]
    counties = [
        County(r.fips, str(r.name), str(r.state), float(r.lat), float(r.lon), bool(int(r.is_hub)))
        for r in df.itertuples(index=False)
    ]
    edges = []
    if adjacency_csv is not None:
        adj = pd.read_csv(adjacency_csv, dtype=str)
        if {"fips_a", "fips_b"} - set(adj.columns):
            raise GraphError(f"{adjacency_csv}: expected columns fips_a,fips_b")
        adj["fips_a"] = _zfill_fips(adj["fips_a"])
        adj["fips_b"] = _zfill_fips(adj["fips_b"])
        keep = set(df["fips"])
        adj = adj[~(adj["fips_a"].isin(excluded) | adj["fips_b"].isin(excluded))]
        unknown = sorted((set(adj["fips_a"]) | set(adj["fips_b"])) - keep)
        if unknown:
            raise GraphError(f"adjacency references unknown FIPS: {unknown[:10]}")
        edges = list(zip(adj["fips_a"], adj["fips_b"]))
    return CountyGraph.build(counties, edges)


@dataclass(frozen=True)
class SparsityPattern:
    """Allowed (row, col) coefficient positions, in row-major order."""

    n: int
    rows: np.ndarray
    cols: np.ndarray

    @property
    def nnz(self) -> int:
        return int(self.rows.size)

    @property
    def entries(self) -> list[tuple[int, int]]:
        return list(zip(self.rows.tolist(), self.cols.tolist()))

    @classmethod
    def from_entries(cls, n: int, entries) -> SparsityPattern:
        arr = np.array(sorted(set(entries)), dtype=np.int64).reshape(-1, 2)
        return cls(n, arr[:, 0].copy(), arr[:, 1].copy())

    @classmethod
    def diagonal(cls, n: int) -> SparsityPattern:
        idx = np.arange(n, dtype=np.int64)
        return cls(n, idx, idx.copy())

    @cached_property
    def position(self) -> dict[tuple[int, int], int]:
        return {e: k for k, e in enumerate(self.entries)}

    @cached_property
    def scatter(self) -> sp.csr_matrix:
        """(nnz, N) 0/1 matrix summing per-entry terms into their rows."""
        return sp.csr_matrix(
            (np.ones(self.nnz), (np.arange(self.nnz), self.rows)), shape=(self.nnz, self.n)
        )

    def to_dense_mask(self) -> np.ndarray:
        mask = np.zeros((self.n, self.n), dtype=bool)
        mask[self.rows, self.cols] = True
        return mask

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.int64(self.n).tobytes())
        h.update(self.rows.astype("<i8").tobytes())
        h.update(self.cols.astype("<i8").tobytes())
        return h.hexdigest()


def build_pattern(graph: CountyGraph) -> SparsityPattern:
    """Self-pairs, adjacent pairs (both orientations) and every pair touching a hub."""
    n = graph.n
    mask = np.eye(n, dtype=bool)
    if graph.edges:
        e = np.array(sorted(graph.edges), dtype=np.int64)
        mask[e[:, 0], e[:, 1]] = True
        mask[e[:, 1], e[:, 0]] = True
    if graph.hubs:
        h = np.array(sorted(graph.hubs), dtype=np.int64)
        mask[h, :] = True
        mask[:, h] = True
    rows, cols = np.nonzero(mask)
    return SparsityPattern(n, rows.astype(np.int64), cols.astype(np.int64))


@dataclass(frozen=True)
class ParameterCounts:
    sparse: int
    dense: int


def count_parameters(pattern: SparsityPattern, p: int, K: int, L: int) -> ParameterCounts:
    """Learnable parameters with the shared pattern vs unrestricted 2N x 2N lag matrices."""
    if p < 1:
        raise ValueError("p must be >= 1")
    if pattern.nnz == 0:
        raise ValueError("empty sparsity pattern")
    covariates = 2 * K * p + 2 * L
    return ParameterCounts(
        sparse=3 * p * pattern.nnz + covariates,
        dense=p * (2 * pattern.n) ** 2 + covariates,
    )


def pairwise_distances(coords: np.ndarray, mode: str = "great-circle-normalized") -> np.ndarray:
    """Distance matrix between (lat, lon) rows.

    ``great-circle-normalized`` is haversine distance divided by the largest
    pairwise distance, so values lie in [0, 1]; ``euclidean-degrees`` treats
    (lat, lon) as planar coordinates.
    """
    coords = np.asarray(coords, dtype=float)
    if not np.all(np.isfinite(coords)):
        raise GraphError("non-finite centroid coordinates")
    if mode == "euclidean-degrees":
        diff = coords[:, None, :] - coords[None, :, :]
        return np.sqrt((diff**2).sum(-1))
    if mode != "great-circle-normalized":
        raise ValueError(f"unknown distance mode {mode!r}; expected one of {DISTANCE_MODES}")
    lat = np.radians(coords[:, 0])
    lon = np.radians(coords[:, 1])
    dlat = lat[:, None] - lat[None, :]
    dlon = lon[:, None] - lon[None, :]
    a = np.sin(dlat / 2) ** 2 + np.cos(lat)[:, None] * np.cos(lat)[None, :] * np.sin(dlon / 2) ** 2
    d = 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))
    np.fill_diagonal(d, 0.0)
    dmax = d.max()
    return d / dmax if dmax > 0 else d


@dataclass
class SpatialCovariance:
    """sigma[i, j] = eta * exp(-eta * s_ij) with a Cholesky factor for solves."""

    eta: float
    distances: np.ndarray
    sigma: np.ndarray
    distance_mode: str = "great-circle-normalized"
    jitter: float = 0.0
    _factor: tuple = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.sigma.shape[0]

    @classmethod
    def from_distances(cls, distances, eta: float, distance_mode: str = "custom") -> SpatialCovariance:
        if not eta > 0:
            raise ValueError("eta must be positive")
        distances = np.asarray(distances, dtype=float)
        sigma = eta * np.exp(-eta * distances)
        cov = cls(eta, distances, sigma, distance_mode)
        cov._factorize()
        return cov

    def _factorize(self) -> None:
        try:
            self._factor = scipy.linalg.cho_factor(self.sigma, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            self.jitter = 1e-8 * self.eta
            logger.warning("covariance not positive definite; adding diagonal jitter %g", self.jitter)
            self._factor = scipy.linalg.cho_factor(
                self.sigma + self.jitter * np.eye(self.n), lower=True, check_finite=False
            )

    @property
    def cholesky(self) -> np.ndarray:
        c, lower = self._factor
        return np.tril(c) if lower else np.triu(c).T

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Solve sigma @ x = b; ``b`` may be (N,) or (N, m)."""
        return scipy.linalg.cho_solve(self._factor, b, check_finite=False)

    def quad(self, resid: np.ndarray) -> float:
        """Sum over rows r of ``resid`` (W, N) of r^T sigma^{-1} r."""
        resid = np.atleast_2d(resid)
        return float(np.sum(resid.T * self.solve(resid.T)))


def build_covariance(
    graph: CountyGraph, eta: float = 1e3, distance_mode: str = "great-circle-normalized"
) -> SpatialCovariance:
    if graph.n < 1:
        raise GraphError("graph has no counties")
    distances = pairwise_distances(graph.coords, distance_mode)
    return SpatialCovariance.from_distances(distances, eta, distance_mode)
