import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stva.geo_graph import SparsityPattern, SpatialCovariance, build_covariance, build_pattern
from stva.model import (
    FitConfig,
    InsufficientHistory,
    ModelParams,
    forward,
    gradient,
    loss,
    objective,
    predict,
    regularizer,
)
from stva.synth import SynthSpec, generate

from conftest import full_pattern, make_graph, make_panel


def random_params(pattern, p, K, L, rng, scale=0.3):
    prm = ModelParams.zeros(pattern, p, K, L)
    return prm.with_vector(rng.standard_normal(prm.size) * scale)


def test_zero_params_predict_zero(rng):
    panel = make_panel(rng.random((5, 3)), rng.random((5, 3)), rng.random((2, 5, 3)), rng.random((1, 3)))
    prm = ModelParams.zeros(full_pattern(3), 2, 2, 1)
    assert not forward(prm, panel, 3).any()


def test_one_county_block_arithmetic():
    panel = make_panel([[4.0], [0.0]], [[5.0], [0.0]])
    prm = ModelParams.zeros(SparsityPattern.diagonal(1), 1, 0, 0)
    prm.B[0, 0], prm.H[0, 0], prm.A[0, 0] = 2.0, 1.0, 3.0
    assert forward(prm, panel, 1).tolist() == [8.0, 19.0]


def test_mobility_kronecker_term():
    panel = make_panel(np.zeros((2, 2)), np.zeros((2, 2)), mobility=[[[1.0, -1.0], [0.0, 0.0]]])
    prm = ModelParams.zeros(SparsityPattern.diagonal(2), 1, 1, 0)
    prm.mu[0, 0], prm.nu[0, 0] = 2.0, 3.0
    assert forward(prm, panel, 1).tolist() == [2.0, -2.0, 3.0, -3.0]


def test_forward_matches_dense_lag_matrices(rng):
    g = make_graph(5, edges=[(0, 1), (1, 2), (3, 4)], hubs=[2])
    pat = build_pattern(g)
    panel = make_panel(rng.random((6, 5)), rng.random((6, 5)), rng.random((2, 6, 5)), rng.random((2, 5)))
    prm = random_params(pat, 2, 2, 2, rng)
    x = lambda t: np.concatenate([panel.cases[t], panel.deaths[t]])
    want = sum(prm.transition(tau) @ x(5 - tau) for tau in (1, 2))
    for tau in (1, 2):
        for k in range(2):
            want += np.kron([prm.mu[k, tau - 1], prm.nu[k, tau - 1]], panel.mobility[k, 5 - tau])
    for l in range(2):
        want += np.kron([prm.upsilon[l], prm.zeta[l]], panel.demographics[l])
    np.testing.assert_allclose(forward(prm, panel, 5), want, rtol=1e-12)
    # upper-right block never carries a value
    assert not prm.transition(1)[:5, 5:].any()


def test_insufficient_history():
    panel = make_panel(np.ones((4, 1)), np.ones((4, 1)))
    prm = ModelParams.zeros(SparsityPattern.diagonal(1), 2, 0, 0)
    with pytest.raises(InsufficientHistory):
        forward(prm, panel, 1)
    with pytest.raises(ValueError):
        forward(prm, panel, 5)
    assert forward(prm, panel, 4).shape == (2,)


def test_scalar_whitening_loss():
    cov = SpatialCovariance.from_distances(np.zeros((1, 1)), 1000.0)
    panel = make_panel([[0.0], [0.0]], [[0.0], [2.0]])
    prm = ModelParams.zeros(SparsityPattern.diagonal(1), 1, 0, 0)
    assert loss(prm, panel, cov, FitConfig(p=1)) == pytest.approx(0.0036, rel=1e-12)


def test_perfect_fit_has_zero_loss_and_gradient():
    graph, truth, panel = generate(SynthSpec(n_counties=5, T=12, seed=4))
    cov = build_covariance(graph)
    cfg = FitConfig(lambda1=0.0)
    assert loss(truth, panel, cov, cfg) < 1e-20
    g = gradient(truth, panel, cov, cfg).to_vector()
    assert np.abs(g).max() < 1e-9


def test_identity_covariance_is_scaled_sse(rng):
    eta = 7.0
    cov = SpatialCovariance.from_distances(1e3 * (1 - np.eye(3)), eta)
    assert np.array_equal(cov.sigma, eta * np.eye(3))
    panel = make_panel(rng.random((6, 3)), rng.random((6, 3)))
    prm = random_params(full_pattern(3), 2, 0, 0, rng)
    c_hat, d_hat = predict(prm, panel, range(2, 6))
    sse_c = ((panel.cases[2:] - c_hat) ** 2).sum()
    sse_d = ((panel.deaths[2:] - d_hat) ** 2).sum()
    for delta in (0.0, 0.3, 1.0):
        want = (delta * sse_d + (1 - delta) * sse_c) / eta
        assert loss(prm, panel, cov, FitConfig(delta=delta)) == pytest.approx(want, rel=1e-12)


def test_regularizer_examples():
    prm = ModelParams.zeros(SparsityPattern.diagonal(1), 1, 0, 0)
    assert regularizer(prm, 0.5) == 0.0
    prm.A[0, 0] = 2.0
    assert regularizer(prm, 0.5) == 3.0


def test_covariates_are_not_penalized(rng):
    prm = ModelParams.zeros(SparsityPattern.diagonal(2), 1, 2, 2)
    prm.mu[:] = 5.0
    prm.zeta[:] = -3.0
    assert regularizer(prm, 0.3) == 0.0


def central_difference(params, panel, cov, cfg, h=1e-6):
    vec = params.to_vector()
    out = np.empty_like(vec)
    for k in range(vec.size):
        up, dn = vec.copy(), vec.copy()
        up[k] += h
        dn[k] -= h
        out[k] = (objective(params.with_vector(up), panel, cov, cfg) - objective(params.with_vector(dn), panel, cov, cfg)) / (2 * h)
    return out


def rel_err(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)


@given(seed=st.integers(0, 2**31), n=st.integers(1, 3), lam=st.sampled_from([0.0, 0.5]))
@settings(max_examples=15, deadline=None)
def test_gradient_matches_finite_differences(seed, n, lam):
    rng = np.random.default_rng(seed)
    g = make_graph(n, edges=[(0, 1)] if n > 1 else [], seed=seed)
    cov = build_covariance(g, eta=2.0)
    panel = make_panel(rng.random((6, n)), rng.random((6, n)), rng.standard_normal((2, 6, n)), rng.standard_normal((1, n)))
    prm = random_params(build_pattern(g), 2, 2, 1, rng)
    cfg = FitConfig(eta=2.0, lambda1=lam, lambda2=0.3)
    analytic = gradient(prm, panel, cov, cfg).to_vector()
    numeric = central_difference(prm, panel, cov, cfg)
    assert rel_err(analytic, numeric).max() < 1e-5


def test_death_perturbation_leaves_case_gradients_alone(rng):
    g = make_graph(3, edges=[(0, 1), (1, 2)])
    cov = build_covariance(g, eta=2.0)
    panel = make_panel(rng.random((6, 3)), rng.random((6, 3)), rng.standard_normal((1, 6, 3)), rng.standard_normal((1, 3)))
    prm = random_params(build_pattern(g), 2, 1, 1, rng)
    cfg = FitConfig(eta=2.0, lambda1=0.0)
    base = gradient(prm, panel, cov, cfg)
    panel.deaths[2, 1] += 10.0
    moved = gradient(prm, panel, cov, cfg)
    for b in ("B", "mu", "upsilon"):
        assert np.array_equal(getattr(base, b), getattr(moved, b))
    assert not np.array_equal(base.A, moved.A)


def test_params_round_trip(tmp_path, rng):
    g = make_graph(4, edges=[(0, 3)], hubs=[1])
    prm = random_params(build_pattern(g), 2, 3, 2, rng)
    prm.save(tmp_path / "p", FitConfig(lambda1=5.0), {"ablation": "full"})
    back, manifest = ModelParams.load(tmp_path / "p")
    assert np.array_equal(back.to_vector(), prm.to_vector())
    assert back.pattern.digest() == prm.pattern.digest()
    assert manifest["config"]["lambda1"] == 5.0
    assert (manifest["N"], manifest["p"], manifest["K"], manifest["L"]) == (4, 2, 3, 2)


def test_config_validation():
    for bad in ({"p": 0}, {"delta": 1.5}, {"eta": 0}, {"lambda1": -1}, {"lambda2": 2}, {"step_size": 0}, {"max_iters": 0}):
        with pytest.raises(ValueError):
            FitConfig(**bad)
    assert FitConfig.from_dict(FitConfig(p=3).to_dict()) == FitConfig(p=3)
