import numpy as np
import pandas as pd
import pytest

from stva.evaluate import coefficient_export
from stva.geo_graph import build_covariance
from stva.ingest import WeekIndex, assemble
from stva.model import FitConfig, forward, loss
from stva.synth import (
    SynthError,
    SynthSpec,
    companion_radius,
    dense_oracle_loss,
    generate,
    recovery_experiment,
    write_csvs,
)


def test_zero_coefficients_give_zero_panel():
    spec = SynthSpec(n_counties=5, T=12, coefficient_scale=0.0, covariate_scale=0.0, seed=2)
    _, _, panel = generate(spec)
    assert panel.cases[:2].any()
    assert not panel.cases[2:].any() and not panel.deaths[2:].any()


def test_noise_free_panel_reproduced_by_forward():
    graph, truth, panel = generate(SynthSpec(n_counties=7, T=25, seed=3))
    for t in range(truth.p, panel.T):
        x = forward(truth, panel, t)
        np.testing.assert_allclose(x, np.concatenate([panel.cases[t], panel.deaths[t]]), rtol=1e-12, atol=1e-12)


def test_seed_determinism(tmp_path):
    spec = SynthSpec(n_counties=6, T=15, noise_scale=0.7, seed=11)
    a = generate(spec)
    b = generate(spec)
    a[2].save(tmp_path / "a")
    b[2].save(tmp_path / "b")
    for name in ("manifest.json", "arrays.npz"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert np.array_equal(a[1].to_vector(), b[1].to_vector())
    c = generate(SynthSpec(n_counties=6, T=15, noise_scale=0.7, seed=12))
    assert not np.array_equal(a[2].cases, c[2].cases)


def test_generated_parameters_are_stable():
    for seed in range(5):
        spec = SynthSpec(n_counties=8, T=10, coefficient_scale=2.0, seed=seed)
        _, truth, _ = generate(spec)
        assert companion_radius(truth) < spec.spectral_radius


def test_stable_trajectory_decays_without_covariates():
    _, _, panel = generate(SynthSpec(n_counties=6, T=80, covariate_scale=0.0, seed=4))
    early = np.abs(panel.deaths[:5]).mean() + np.abs(panel.cases[:5]).mean()
    late = np.abs(panel.deaths[-5:]).mean() + np.abs(panel.cases[-5:]).mean()
    assert late < 1e-2 * early


def test_dense_oracle_basics():
    graph, truth, panel = generate(SynthSpec(n_counties=5, T=12, noise_scale=1.0, seed=6))
    cov = build_covariance(graph, eta=3.0)
    noise_free = generate(SynthSpec(n_counties=5, T=12, seed=6))
    assert dense_oracle_loss(noise_free[1], noise_free[2], cov, FitConfig()) < 1e-20
    both = [dense_oracle_loss(truth, panel, cov, FitConfig(delta=d)) for d in (0.0, 1.0)]
    for delta in (0.25, 0.9):
        mixed = dense_oracle_loss(truth, panel, cov, FitConfig(delta=delta))
        assert mixed == pytest.approx(delta * both[1] + (1 - delta) * both[0], rel=1e-12)
        assert mixed == pytest.approx(loss(truth, panel, cov, FitConfig(delta=delta)), rel=1e-8)


def test_dense_oracle_refuses_large_n():
    graph, truth, panel = generate(SynthSpec(n_counties=51, T=4, edge_probability=0.0, n_hubs=0, seed=0))
    with pytest.raises(SynthError):
        dense_oracle_loss(truth, panel, build_covariance(graph), FitConfig())


def test_rmse_degrades_with_noise():
    cfg = FitConfig(lambda1=0.0, max_iters=1500)
    rmse = [
        recovery_experiment(SynthSpec(n_counties=6, T=50, noise_scale=s, seed=7), cfg).coefficient_rmse
        for s in (0.1, 1.0, 10.0)
    ]
    assert rmse[0] < rmse[1] < rmse[2]


def test_no_mobility_ablation_loses_on_heldout():
    spec = SynthSpec(n_counties=6, T=50, noise_scale=0.5, covariate_scale=2.0, seed=7)
    cfg = FitConfig(lambda1=0.0, max_iters=1000)
    full = recovery_experiment(spec, cfg, "full", holdout=10)
    ablated = recovery_experiment(spec, cfg, "no_mobility", holdout=10)
    assert full.heldout_loss < ablated.heldout_loss


def test_export_matches_generator_after_unpenalized_fit():
    spec = SynthSpec(n_counties=4, T=40, seed=1)
    report = recovery_experiment(spec, FitConfig(lambda1=0.0, tol=0.0, max_iters=8000), holdout=0)
    graph, _, _ = generate(spec)
    for focus in range(graph.n):
        got = coefficient_export(report.params, graph, focus, "A", 1)
        want = coefficient_export(report.truth, graph, focus, "A", 1)
        assert got["fips"].tolist() == want["fips"].tolist()
        np.testing.assert_allclose(got["value"], want["value"], atol=1e-3)


def test_csv_round_trip_through_ingest(tmp_path):
    spec = SynthSpec(n_counties=5, T=10, noise_scale=0.5, initial_scale=50, K=6, L=2, seed=9)
    graph, _, panel = generate(spec)
    write_csvs(graph, panel, tmp_path)
    for name in ("epi.csv", "mobility.csv", "census.csv", "counties.csv", "adjacency.csv"):
        assert (tmp_path / name).exists()
    epi = pd.read_csv(tmp_path / "epi.csv")
    assert list(epi.columns) == ["date", "county", "state", "fips", "cases", "deaths"]
    back, report = assemble(
        graph, tmp_path / "epi.csv", tmp_path / "mobility.csv", tmp_path / "census.csv",
        WeekIndex(panel.weeks.start, panel.T), standardized=False,
    )
    np.testing.assert_array_equal(back.cases, np.clip(np.rint(panel.cases), 0, None))
    np.testing.assert_array_equal(back.deaths, np.clip(np.rint(panel.deaths), 0, None))
    np.testing.assert_allclose(back.mobility, panel.mobility, rtol=0, atol=1e-12)
    assert back.demographics.shape == (2, 5)
    assert not report.missing_counties
