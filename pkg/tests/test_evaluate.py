import datetime as dt
import json

import numpy as np
import pandas as pd
import pytest

from stva.evaluate import (
    ablation_table,
    coefficient_export,
    export_geojson,
    in_sample,
    mae,
    merge_benchmarks,
    pct_increase,
    rolling_predict,
    significance,
    write_ablation_csv,
    write_coefficients_csv,
)
from stva.geo_graph import SpatialCovariance, build_covariance, build_pattern
from stva.model import FitConfig, ModelParams
from stva.solver import fit
from stva.synth import SynthSpec, generate

from conftest import make_graph, make_panel


@pytest.fixture(scope="module")
def noisy():
    graph, truth, panel = generate(SynthSpec(n_counties=6, T=30, noise_scale=0.5, seed=5))
    return graph, truth, panel, build_covariance(graph)


def test_zero_model_mae_is_mean_abs_truth(noisy):
    graph, truth, panel, _ = noisy
    pred = in_sample(ModelParams.zeros(truth.pattern, 2, panel.K, panel.L), panel, FitConfig())
    r = mae(pred, "deaths")
    assert r.overall == pytest.approx(np.abs(panel.deaths[2:]).mean())
    assert np.isnan(pred.raw["deaths"][:2]).all()


def test_generating_params_reproduce_noise_free_panel():
    graph, truth, panel = generate(SynthSpec(n_counties=6, T=20, seed=8))
    pred = in_sample(truth, panel, FitConfig(clamp_output=False))
    assert mae(pred, "deaths").overall < 1e-6
    assert mae(pred, "cases").overall < 1e-6


def test_mae_examples():
    panel = make_panel([[0.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [1.0, -3.0]])
    prm = ModelParams.zeros(build_pattern(make_graph(2)), 1, 0, 0)
    pred = in_sample(prm, panel, FitConfig(p=1, clamp_output=False))
    assert mae(pred, "deaths").overall == 2.0
    assert mae(pred, "cases").overall == 0.0
    with pytest.raises(ValueError):
        mae(pred, "deaths", weeks=(dt.date(2021, 1, 1), dt.date(2021, 2, 1)))
    with pytest.raises(ValueError):
        mae(pred, "deaths", states=["QQ"])


def test_mae_scopes_and_bounds(noisy):
    graph, truth, panel, _ = noisy
    pred = in_sample(truth, panel, FitConfig())
    r = mae(pred)
    assert min(r.per_state.values()) <= r.overall <= max(r.per_state.values())
    sub = mae(pred, weeks=(3, 5), states=["YY"])
    assert set(sub.per_state) == {"YY"}
    assert sorted(sub.per_week) == [panel.weeks.starts[t] for t in (3, 4, 5)]
    dates = mae(pred, weeks=(panel.weeks.starts[3], panel.weeks.starts[5]), states=["YY"])
    assert dates.overall == sub.overall
    assert mae(pred, clamp=False).clamped is False


def test_pct_increase_examples(tmp_path):
    assert round(pct_increase(1.63, 1.99), 2) == 18.09
    assert round(pct_increase(1.63, 2.45), 2) == 33.47
    assert round(pct_increase(1.63, 5.73), 2) == 71.55
    assert pct_increase(1.63, 1.63) == 0.0
    assert pct_increase(0.0, 0.0) is None
    rows = ablation_table({"full": 1.63, "no_spatial": 1.99, "no_census": 0.0})
    write_ablation_csv(rows, tmp_path / "a.csv")
    assert (tmp_path / "a.csv").read_text() == "kind,mae,pct_increase\nfull,1.63,\nno_spatial,1.99,18.09\nno_census,0,\n"
    with pytest.raises(ValueError):
        ablation_table({"no_spatial": 1.0})


def test_rolling_single_target_week(noisy):
    graph, _, panel, cov = noisy
    cfg = FitConfig(max_iters=100)
    pred = rolling_predict(panel, graph, cov, cfg, start_week=panel.T - 1)
    assert pred.predicted_weeks.tolist() == [panel.T - 1]
    frame = pred.to_frame()
    assert set(frame["week_start"]) == {panel.weeks.starts[-1].isoformat()}
    assert list(frame.columns) == ["fips", "week_start", "target", "predicted", "observed", "mode"]
    with pytest.raises(ValueError):
        rolling_predict(panel, graph, cov, cfg, start_week=5)


def test_rolling_close_to_in_sample_on_stationary_panel():
    graph, _, panel = generate(SynthSpec(n_counties=6, T=40, noise_scale=1.0, seed=9))
    cov = build_covariance(graph)
    cfg = FitConfig(lambda1=1.0, max_iters=400)
    rolled = rolling_predict(panel, graph, cov, cfg, start_week=20)
    params, _ = fit(panel, graph, cov, cfg)
    insample = in_sample(params, panel, cfg)
    window = (20, panel.T - 1)
    out_mae = mae(rolled, weeks=window).overall
    in_mae = mae(insample, weeks=window).overall
    assert out_mae < 2 * in_mae
    for t in rolled.predicted_weeks:
        assert rolled.trained_through[t] <= t


def test_failed_week_is_recorded(noisy):
    graph, _, panel, cov = noisy
    pred = rolling_predict(panel, graph, cov, FitConfig(step_size=50.0, max_iters=300), start_week=panel.T - 2)
    assert sorted(pred.failures) == [panel.T - 2, panel.T - 1]
    assert np.isnan(pred.raw["deaths"][panel.T - 2 :]).all()


def test_coefficient_export_columns(noisy):
    graph, truth, panel, _ = noisy
    seen = []
    for focus in range(graph.n):
        table = coefficient_export(truth, graph, focus, "A", 1)
        seen += [(graph.index[f], focus) for f in table["fips"]]
        pos = truth.pattern.position
        for f, v in zip(table["fips"], table["value"]):
            assert v == truth.A[0, pos[(graph.index[f], focus)]]
    assert sorted(seen) == sorted(truth.pattern.entries)
    hub = min(graph.hubs)
    assert len(coefficient_export(truth, graph, hub)) == graph.n


def test_no_spatial_export_is_self_only(noisy):
    graph, _, panel, cov = noisy
    params, _ = fit(panel, graph, cov, FitConfig(max_iters=30), "no_spatial")
    hub = min(graph.hubs)
    table = coefficient_export(params, graph, hub, "B", 2)
    assert table["fips"].tolist() == [graph.fips[hub]]


def test_geojson_export(tmp_path, noisy):
    graph, truth, _, _ = noisy
    table = coefficient_export(truth, graph, 0, "H", 2)
    export_geojson(table, graph, tmp_path / "x.geojson")
    doc = json.loads((tmp_path / "x.geojson").read_text())
    assert doc["type"] == "FeatureCollection"
    assert [f["properties"]["fips"] for f in doc["features"]] == table["fips"].tolist()


def test_significance_matches_ols_for_one_county_ar(rng):
    T = 200
    c = np.zeros(T)
    d = np.zeros(T)
    for t in range(1, T):
        c[t] = 0.6 * c[t - 1] + rng.standard_normal()
        d[t] = 0.3 * c[t - 1] + 0.5 * d[t - 1] + 0.5 * rng.standard_normal()
    panel = make_panel(c[:, None], d[:, None])
    cov = SpatialCovariance.from_distances(np.zeros((1, 1)), 1000.0)
    prm = ModelParams.zeros(build_pattern(make_graph(1)), 1, 0, 0)

    def ols(X, y):
        beta = np.linalg.lstsq(X, y, rcond=None)[0]
        resid = y - X @ beta
        s2 = resid @ resid / (len(y) - X.shape[1])
        return beta, beta / np.sqrt(s2 * np.diag(np.linalg.inv(X.T @ X)))

    (b,), (t_b,) = ols(c[:-1, None], c[1:])
    (h, a), (t_h, t_a) = ols(np.column_stack([c[:-1], d[:-1]]), d[1:])
    prm.B[0, 0], prm.H[0, 0], prm.A[0, 0] = b, h, a
    stats = {s.matrix: s for s in significance(prm, panel, cov, FitConfig(p=1))}
    assert stats["B"].t_value == pytest.approx(t_b, rel=0.05)
    assert stats["H"].t_value == pytest.approx(t_h, rel=0.05)
    assert stats["A"].t_value == pytest.approx(t_a, rel=0.05)
    assert all(0 < s.p_value <= 1 for s in stats.values())


def test_significance_zero_estimates_and_csv(tmp_path, noisy):
    graph, truth, panel, cov = noisy
    params, _ = fit(panel, graph, cov, FitConfig(max_iters=100), "no_mobility")
    stats = significance(params, panel, cov, FitConfig(), graph=graph)
    mob = [s for s in stats if s.matrix in ("mu", "nu")]
    assert mob and all(s.t_value == 0 and s.p_value == 1 for s in mob)
    pv = [s.p_value for s in stats if not np.isnan(s.p_value)]
    assert pv and all(0 < p <= 1 for p in pv)
    n_spatial = 3 * params.p * params.pattern.nnz
    assert sum(s.matrix in "BHA" for s in stats) == n_spatial
    write_coefficients_csv(stats, tmp_path / "c.csv")
    df = pd.read_csv(tmp_path / "c.csv", dtype={"row_fips": str, "col_fips": str})
    assert list(df.columns) == ["matrix", "lag", "row_fips", "col_fips", "estimate", "t_value", "p_value"]
    assert len(df) == len(stats)


def test_singular_block_is_blank():
    # two weeks, one lag, a 2x2 full pattern: each row block has 2 columns, 1 row
    panel = make_panel(np.ones((2, 2)), np.ones((2, 2)))
    prm = ModelParams.zeros(build_pattern(make_graph(2, edges=[(0, 1)])), 1, 0, 0)
    prm.B[:] = 0.1
    stats = significance(prm, panel, SpatialCovariance.from_distances(np.eye(2)[::-1], 1.0), FitConfig(p=1))
    assert all(np.isnan(s.t_value) and s.flag for s in stats)


def test_merge_benchmarks(tmp_path, noisy):
    graph, truth, panel, _ = noisy
    pred = in_sample(truth, panel, FitConfig())
    w = panel.weeks.starts[4].isoformat()
    (tmp_path / "ut.csv").write_text(f"state,week,predicted_deaths\nYY,{w},12.5\nQQ,{w},1\n")
    merged = merge_benchmarks(pred, {"ut": tmp_path / "ut.csv"})
    assert list(merged.columns) == ["state", "week_start", "stva", "ut"]
    row = merged[(merged.state == "YY") & (merged.week_start == w)]
    assert row["ut"].item() == 12.5
    assert row["stva"].item() == pytest.approx(pred.state_totals("deaths").loc["YY", panel.weeks.starts[4]])
    assert merged["ut"].notna().sum() == 1
