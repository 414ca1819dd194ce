"""Synthetic panels from known parameters, plus dense reference computations.

Nothing in here calls into ``stva.model``'s loss or prediction code except
``recovery_experiment``, which exercises the fitting pipeline end to end.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .geo_graph import County, CountyGraph, SpatialCovariance, build_covariance, build_pattern
from .ingest import (
    DEFAULT_START,
    DEMOGRAPHIC_FACTORS,
    MOBILITY_CATEGORIES,
    ObservationPanel,
    WeekIndex,
)
from .model import FitConfig, ModelParams, loss, predict


class SynthError(RuntimeError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    n_counties: int = 10
    edge_probability: float = 0.3
    n_hubs: int = 1
    T: int = 60
    p: int = 2
    K: int = 2
    L: int = 1
    coefficient_scale: float = 0.3
    noise_scale: float = 0.0
    seed: int = 0
    covariate_scale: float = 1.0
    coefficient_density: float = 1.0  # share of off-diagonal pattern entries that are nonzero
    spectral_radius: float = 0.8  # target for the companion matrix
    initial_scale: float = 10.0
    eta: float = 1e3
    distance_mode: str = "great-circle-normalized"
    start: dt.date = DEFAULT_START

    def __post_init__(self):
        if self.n_counties < 1 or self.T <= self.p or self.p < 1:
            raise ValueError("need n_counties >= 1 and T > p >= 1")
        if not 0 <= self.edge_probability <= 1 or not 0 <= self.coefficient_density <= 1:
            raise ValueError("probabilities must lie in [0, 1]")
        if not 0 <= self.n_hubs <= self.n_counties:
            raise ValueError("n_hubs out of range")
        if self.coefficient_scale < 0 or self.noise_scale < 0 or self.covariate_scale < 0:
            raise ValueError("scales must be nonnegative")
        if not 0 < self.spectral_radius < 1:
            raise ValueError("spectral_radius must lie in (0, 1)")


def random_graph(n: int, edge_probability: float, n_hubs: int, rng) -> CountyGraph:
    """Counties scattered over a box in the central US, Bernoulli edges."""
    lat = rng.uniform(30.0, 45.0, n)
    lon = rng.uniform(-105.0, -80.0, n)
    counties = [
        County(f"{90001 + i:05d}", f"Synthetic {i}", "ZZ" if i % 2 else "YY", float(lat[i]), float(lon[i]))
        for i in range(n)
    ]
    iu, ju = np.triu_indices(n, 1)
    keep = rng.random(iu.size) < edge_probability
    hubs = sorted(rng.choice(n, size=n_hubs, replace=False).tolist()) if n_hubs else []
    return CountyGraph.build(counties, list(zip(iu[keep].tolist(), ju[keep].tolist())), hubs)


def companion_radius(params: ModelParams) -> float:
    """Spectral radius of the VAR(p) companion matrix."""
    n2 = 2 * params.n
    p = params.p
    comp = np.zeros((n2 * p, n2 * p))
    for tau in range(1, p + 1):
        comp[:n2, (tau - 1) * n2 : tau * n2] = params.transition(tau)
    if p > 1:
        comp[n2:, : n2 * (p - 1)] = np.eye(n2 * (p - 1))
    return float(np.max(np.abs(np.linalg.eigvals(comp))))


def _stabilize(params: ModelParams, target: float) -> ModelParams:
    """Scale lag tau by s**tau, which scales every companion eigenvalue by s."""
    for _ in range(10):
        rho = companion_radius(params)
        if rho < target:
            return params
        s = 0.99 * target / rho
        params = replace(
            params,
            B=params.B * s ** np.arange(1, params.p + 1)[:, None],
            H=params.H * s ** np.arange(1, params.p + 1)[:, None],
            A=params.A * s ** np.arange(1, params.p + 1)[:, None],
        )
    raise SynthError(f"could not bring spectral radius below {target} in 10 attempts")


def random_params(spec: SynthSpec, graph: CountyGraph, rng) -> ModelParams:
    pattern = build_pattern(graph)
    params = ModelParams.zeros(pattern, spec.p, spec.K, spec.L)
    offdiag = pattern.rows != pattern.cols
    for name in ("B", "H", "A"):
        vals = rng.normal(0.0, spec.coefficient_scale, (spec.p, pattern.nnz))
        drop = offdiag & (rng.random((spec.p, pattern.nnz)) >= spec.coefficient_density)
        vals[drop] = 0.0
        setattr(params, name, vals)
    params.mu[:] = rng.normal(0.0, spec.covariate_scale, params.mu.shape)
    params.nu[:] = rng.normal(0.0, spec.covariate_scale, params.nu.shape)
    params.upsilon[:] = rng.normal(0.0, spec.covariate_scale, params.upsilon.shape)
    params.zeta[:] = rng.normal(0.0, spec.covariate_scale, params.zeta.shape)
    return _stabilize(params, spec.spectral_radius)


def simulate(params: ModelParams, cov: SpatialCovariance, spec: SynthSpec, rng, mobility, demographics):
    """Run the recursion forward with dense matrices.

    Noise per week is N(0, noise_scale^2 * R) independently for cases and
    deaths, where R = sigma / eta is the spatial correlation matrix.
    """
    n, T, p = params.n, spec.T, params.p
    lam = [params.transition(tau) for tau in range(1, p + 1)]
    x = np.zeros((T, 2 * n))
    x[:p] = rng.uniform(0.0, spec.initial_scale, (p, 2 * n))
    chol = np.linalg.cholesky(cov.sigma / cov.eta + 1e-12 * np.eye(n))
    static = np.zeros(2 * n)
    for l in range(params.L):
        static += np.kron([params.upsilon[l], params.zeta[l]], demographics[l])
    for t in range(p, T):
        xt = static.copy()
        for tau in range(1, p + 1):
            xt += lam[tau - 1] @ x[t - tau]
            for k in range(params.K):
                xt += np.kron([params.mu[k, tau - 1], params.nu[k, tau - 1]], mobility[k, t - tau])
        if spec.noise_scale > 0:
            xt += spec.noise_scale * np.concatenate(
                [chol @ rng.standard_normal(n), chol @ rng.standard_normal(n)]
            )
        x[t] = xt
    return x[:, :n], x[:, n:]


def generate(spec: SynthSpec) -> tuple[CountyGraph, ModelParams, ObservationPanel]:
    """Random graph, stable pattern-respecting parameters and a simulated panel.

    Counts are kept real-valued; covariates are standard normal.
    """
    rng = np.random.default_rng(spec.seed)
    graph = random_graph(spec.n_counties, spec.edge_probability, spec.n_hubs, rng)
    params = random_params(spec, graph, rng)
    mobility = rng.standard_normal((spec.K, spec.T, spec.n_counties))
    demographics = rng.standard_normal((spec.L, spec.n_counties))
    cov = build_covariance(graph, spec.eta, spec.distance_mode)
    cases, deaths = simulate(params, cov, spec, rng, mobility, demographics)
    panel = ObservationPanel(
        fips=list(graph.fips),
        states=list(graph.states),
        weeks=WeekIndex(spec.start, spec.T),
        cases=cases,
        deaths=deaths,
        mobility=mobility,
        demographics=demographics,
        mobility_names=tuple(MOBILITY_CATEGORIES[k] if k < 6 else f"mobility_{k}" for k in range(spec.K)),
        demographic_names=tuple(DEMOGRAPHIC_FACTORS[l] if l < 2 else f"factor_{l}" for l in range(spec.L)),
    )
    return graph, params, panel


def dense_oracle_loss(params: ModelParams, panel: ObservationPanel, cov: SpatialCovariance, cfg: FitConfig, weeks=None) -> float:
    """The weighted whitened loss from dense 2N x 2N matrices, Kronecker
    covariate terms and an explicit inverse, one week at a time."""
    n = panel.N
    if n > 50:
        raise SynthError("dense oracle is limited to N <= 50")
    p = params.p
    weeks = range(p, panel.T) if weeks is None else weeks
    sigma_inv = np.linalg.inv(cov.sigma)
    big = [np.zeros((2 * n, 2 * n)) for _ in range(p)]
    for tau in range(p):
        for k, (i, j) in enumerate(zip(params.pattern.rows, params.pattern.cols)):
            big[tau][i, j] = params.B[tau, k]
            big[tau][n + i, j] = params.H[tau, k]
            big[tau][n + i, n + j] = params.A[tau, k]
    total = 0.0
    for t in weeks:
        x = np.concatenate([panel.cases[t], panel.deaths[t]]).astype(float)
        xhat = np.zeros(2 * n)
        for tau in range(1, p + 1):
            xprev = np.concatenate([panel.cases[t - tau], panel.deaths[t - tau]]).astype(float)
            xhat += big[tau - 1] @ xprev
            for k in range(params.K):
                gamma = np.array([params.mu[k, tau - 1], params.nu[k, tau - 1]])
                xhat += np.kron(gamma, panel.mobility[k, t - tau])
        for l in range(params.L):
            xhat += np.kron(np.array([params.upsilon[l], params.zeta[l]]), panel.demographics[l])
        eps = x - xhat
        ec, ed = eps[:n], eps[n:]
        total += cfg.delta * ed @ sigma_inv @ ed + (1 - cfg.delta) * ec @ sigma_inv @ ec
    return float(total)


@dataclass
class RecoveryReport:
    coefficient_rmse: float
    in_sample_mae: float
    forecast_mae: float
    heldout_loss: float
    n_train_weeks: int
    n_holdout_weeks: int
    fit_report: object
    params: ModelParams
    truth: ModelParams


def recovery_experiment(
    spec: SynthSpec, cfg: FitConfig, ablation: str = "full", holdout: int = 5
) -> RecoveryReport:
    """Fit on all but the last ``holdout`` weeks of a synthetic panel.

    Reports the RMSE over spatial pattern values (against the generator;
    entries outside an ablated pattern count as fitted zeros), the in-sample
    MAE over training weeks against observed counts, and one-week-ahead MAE
    and loss on the held-out weeks, the MAE measured against the
    generator's conditional mean.
    """
    from .solver import fit

    graph, truth, panel = generate(spec)
    cov = build_covariance(graph, cfg.eta, cfg.distance_mode)
    T = panel.T
    train_weeks = np.arange(cfg.p, T - holdout)
    held = np.arange(T - holdout, T)
    params, report = fit(panel, graph, cov, cfg, ablation, weeks=train_weeks)

    fitted = np.zeros_like(truth.to_vector())
    fv = params.to_vector()
    sl_t, sl_f = truth.block_slices(), params.block_slices()
    pos = {e: k for k, e in enumerate(params.pattern.entries)}
    for b in ModelParams.BLOCKS:
        if b in ("B", "H", "A"):
            src = getattr(params, b)
            dst = np.zeros_like(getattr(truth, b))
            for k, e in enumerate(truth.pattern.entries):
                if e in pos:
                    dst[:, k] = src[:, pos[e]]
            fitted[sl_t[b]] = dst.ravel()
        else:
            fitted[sl_t[b]] = fv[sl_f[b]]
    spatial = truth.spatial_mask()
    rmse = float(np.sqrt(np.mean((fitted[spatial] - truth.to_vector()[spatial]) ** 2)))

    c_hat, d_hat = predict(params, panel, train_weeks)
    in_mae = float(np.mean(np.abs(np.concatenate([panel.cases[train_weeks] - c_hat, panel.deaths[train_weeks] - d_hat]))))
    heldout_loss = 0.0
    fc_mae = float("nan")
    if holdout:
        c_f, d_f = predict(params, panel, held)
        c_t, d_t = predict(truth, panel, held)
        fc_mae = float(np.mean(np.abs(np.concatenate([c_f - c_t, d_f - d_t]))))
        heldout_loss = loss(params, panel, cov, cfg, held)
    return RecoveryReport(rmse, in_mae, fc_mae, heldout_loss, train_weeks.size, held.size, report, params, truth)


def write_csvs(graph: CountyGraph, panel: ObservationPanel, outdir) -> None:
    """Raw-format files (epi, mobility, census) for an ingest round trip.

    Weekly counts are rounded and clamped at zero, then written as
    cumulative totals on each week's Saturday. Mobility values repeat daily
    so weekly means reproduce them. Demographics are mapped to a plausible
    population and elderly fraction.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    graph.write_csv(outdir / "counties.csv", outdir / "adjacency.csv")
    starts = panel.weeks.starts
    cum_c = np.cumsum(np.clip(np.rint(panel.cases), 0, None).astype(np.int64), axis=0)
    cum_d = np.cumsum(np.clip(np.rint(panel.deaths), 0, None).astype(np.int64), axis=0)
    rows = []
    for t, s in enumerate(starts):
        day = (s + dt.timedelta(days=6)).isoformat()
        for i, f in enumerate(panel.fips):
            rows.append((day, f"County {f}", panel.states[i], f, int(cum_c[t, i]), int(cum_d[t, i])))
    pd.DataFrame(rows, columns=["date", "county", "state", "fips", "cases", "deaths"]).to_csv(
        outdir / "epi.csv", index=False, lineterminator="\n"
    )
    if panel.K:
        mob_rows = []
        for t, s in enumerate(starts):
            for d in range(7):
                day = (s + dt.timedelta(days=d)).isoformat()
                for i, f in enumerate(panel.fips):
                    mob_rows.append((day, f, *[repr(float(panel.mobility[k, t, i])) for k in range(panel.K)]))
        names = list(MOBILITY_CATEGORIES)
        frame = pd.DataFrame(mob_rows, columns=["date", "fips", *names[: panel.K]])
        for name in names[panel.K :]:
            frame[name] = ""
        frame.to_csv(outdir / "mobility.csv", index=False, lineterminator="\n")
    z = panel.demographics
    pop = np.rint(np.exp(10.0 + (z[0] if panel.L > 0 else 0.0))).astype(np.int64)
    frac = 0.16 + 0.05 * np.tanh(z[1] if panel.L > 1 else np.zeros(panel.N))
    pd.DataFrame({"fips": panel.fips, "total_population": pop, "pct_65_over": np.round(frac, 6)}).to_csv(
        outdir / "census.csv", index=False, lineterminator="\n"
    )
