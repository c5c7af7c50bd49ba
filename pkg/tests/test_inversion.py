import math

import numpy as np
import pytest
import scipy.linalg as sla

from tumorcal.errors import ValidationError
from tumorcal.forward import ParameterFields, solve_forward
from tumorcal.grid import Region, build_grid
from tumorcal.inversion import (
    LinearGaussianMisfit,
    LowRankPosterior,
    MisfitContext,
    NewtonConfig,
    TumorMisfit,
    compute_map,
    gn_hessian_apply,
    laplace_posterior,
    misfit_cost_grad,
    pcg,
    pointwise_posterior_variance,
    posterior_sample,
    predict,
    randomized_ghep,
)
from tumorcal.phantom import ObservationSeries, draw_truth_fields, synthesize_observations
from tumorcal.prior import FieldHyper, RegionHyper, build_prior

from conftest import half_split_labels, uniform_labels


@pytest.fixture(scope="module")
def twin(small_phantom):
    """Noise-free data on the small phantom from a prior draw."""
    ph = small_phantom
    prior = build_prior(ph.grid, ph.labels, RegionHyper.defaults())
    truth = draw_truth_fields(prior, 1)
    obs = synthesize_observations(ph.grid, truth, ph.u0, (0, 1, 2, 3), 0.0, 0)
    ctx = MisfitContext(ph.grid, obs.subset([1, 2, 3]), ph.u0, 3.9e-3)
    return ph, prior, truth, ctx


@pytest.fixture(scope="module")
def linear_problem():
    g = build_grid(14, 14, 0.5, 0.5)
    prior = build_prior(g, half_split_labels(g, 0.6), RegionHyper.defaults())
    rng = np.random.default_rng(3)
    F = rng.standard_normal((20, prior.dim)) / math.sqrt(prior.dim)
    truth = prior.mean + prior.fluctuations(rng)
    data = F @ truth + 0.05 * rng.standard_normal(20)
    mis = LinearGaussianMisfit(F, data, 0.05**2, g.cell_area)
    Hd = mis.dense_hessian(prior.dim)
    Pd = prior.dense_precision()
    post_cov = np.linalg.inv(Hd + Pd)
    post_mean = post_cov @ (Pd @ prior.mean + mis.weight * mis.area * F.T @ data)
    return prior, mis, post_mean, post_cov


def test_perfect_fit_has_zero_cost(twin):
    ph, prior, truth, ctx = twin
    c, g = misfit_cost_grad(ctx, truth)
    assert c == 0 and np.all(g.vector == 0)


def test_noise_scaling(twin):
    ph, prior, truth, ctx = twin
    th = ParameterFields.from_vector(ph.grid, prior.mean)
    ctx2 = MisfitContext(ctx.grid, ctx.observations, ctx.u0, 2 * ctx.noise_var)
    c1, g1 = misfit_cost_grad(ctx, th)
    c2, g2 = misfit_cost_grad(ctx2, th)
    assert c2 == pytest.approx(c1 / 2, rel=1e-14)
    np.testing.assert_allclose(g2.vector, g1.vector / 2, rtol=1e-12)
    printed = MisfitContext(ctx.grid, ctx.observations, ctx.u0, ctx.noise_var, half=False)
    assert TumorMisfit(printed).cost(prior.mean) == pytest.approx(2 * c1, rel=1e-14)


def test_misfit_gradient_finite_differences(twin, rng):
    ph, prior, truth, ctx = twin
    mis = TumorMisfit(ctx)
    th = prior.mean + 0.3 * prior.fluctuations(rng)
    _, g = mis.cost_grad(th)
    for _ in range(4):
        v = rng.standard_normal(prior.dim)
        e = 1e-5
        fd = (mis.cost(th + e * v) - mis.cost(th - e * v)) / (2 * e)
        assert abs(fd - g @ v) / abs(fd) < 1e-5


def test_gauss_newton_symmetric_psd(twin, rng):
    ph, prior, truth, ctx = twin
    mis = TumorMisfit(ctx)
    th = prior.mean
    V = rng.standard_normal((prior.dim, 30))
    HV = mis.hessian_apply(th, V)
    for i in range(0, 30, 2):
        a, b = HV[:, i] @ V[:, i + 1], V[:, i] @ HV[:, i + 1]
        assert abs(a - b) <= 1e-10 * max(abs(a), abs(b))
    assert np.all(np.einsum("ij,ij->j", V, HV) >= 0)
    single = gn_hessian_apply(ctx, ParameterFields.from_vector(ph.grid, th), ParameterFields.from_vector(ph.grid, V[:, 0]))
    np.testing.assert_allclose(single.vector, HV[:, 0], rtol=1e-12, atol=1e-14)


def test_identity_surrogate_hessian(rng):
    area, sigma2 = 0.25, 0.1
    mis = LinearGaussianMisfit(None, np.zeros(50), sigma2, area)
    v = rng.standard_normal(50)
    np.testing.assert_allclose(mis.hessian_apply(None, v), area / sigma2 * v)


def test_pcg_solves_spd(rng):
    A = rng.standard_normal((30, 30))
    A = A @ A.T + 30 * np.eye(30)
    b = rng.standard_normal(30)
    x, it = pcg(lambda v: A @ v, b, lambda v: v, 1e-12, 200)
    np.testing.assert_allclose(A @ x, b, atol=1e-9)


def test_linear_gaussian_map_exact(linear_problem):
    prior, mis, post_mean, _ = linear_problem
    theta, rep = compute_map(mis, prior, NewtonConfig(rel_tol=1e-12))
    assert np.linalg.norm(theta.vector - post_mean) / np.linalg.norm(post_mean) < 1e-8
    assert rep.iterations >= 1


def test_zero_observations_give_prior_mean(small_phantom):
    ph = small_phantom
    prior = build_prior(ph.grid, ph.labels, RegionHyper.defaults())
    ctx = MisfitContext(ph.grid, ObservationSeries((), ()), ph.u0, 1e-2)
    theta, rep = compute_map(ctx, prior)
    np.testing.assert_array_equal(theta.vector, prior.mean)


def test_newton_on_noiseless_twin(twin):
    # a small likelihood variance lets noise-free data dominate the prior
    ph, prior, truth, ctx = twin
    mis = TumorMisfit(MisfitContext(ctx.grid, ctx.observations, ctx.u0, 1e-5))
    theta, rep = compute_map(mis, prior, NewtonConfig(rel_tol=1e-7))
    assert mis.cost(prior.mean) / rep.misfit[-1] >= 1e3
    assert rep.grad_norm[-1] / rep.grad_norm[0] <= 1e-6
    assert all(b <= a for a, b in zip(rep.cost, rep.cost[1:]))
    d = rep.to_dict()
    assert len(d["cost"]) == len(d["grad_norm"])


def test_map_determinism(twin):
    ph, prior, truth, ctx = twin
    cfg = NewtonConfig(max_iter=4)
    a, _ = compute_map(ctx, prior, cfg)
    b, _ = compute_map(ctx, prior, cfg)
    assert a.vector.tobytes() == b.vector.tobytes()


def test_ghep_against_dense(linear_problem):
    prior, mis, _, _ = linear_problem
    lam, V = randomized_ghep(lambda X: mis.hessian_apply(None, X), prior, 10, 10, 1, 0)
    Pd = prior.dense_precision()
    ref = sla.eigh(mis.dense_hessian(prior.dim), Pd, eigvals_only=True)[::-1][:10]
    np.testing.assert_allclose(lam, ref, rtol=1e-6)
    np.testing.assert_allclose(V.T @ Pd @ V, np.eye(10), atol=1e-8)
    assert np.all(np.diff(lam) <= 0)


def test_ghep_proportional_pencil(small_grid):
    prior = build_prior(small_grid, uniform_labels(small_grid, Region.GM), RegionHyper.defaults())
    lam, _ = randomized_ghep(lambda X: 3.5 * prior.precision(X), prior, 5, 5, 1, 0)
    np.testing.assert_allclose(lam, 3.5, rtol=1e-8)
    lam, V = randomized_ghep(lambda X: X, prior, 0)
    assert lam.shape == (0,) and V.shape == (prior.dim, 0)


def test_laplace_posterior_exact_on_linear(linear_problem):
    prior, mis, post_mean, post_cov = linear_problem
    theta, _ = compute_map(mis, prior, NewtonConfig(rel_tol=1e-12))
    lrp = laplace_posterior(mis, prior, theta, rank=20, oversample=10)
    C = lrp.dense_covariance()
    assert np.linalg.norm(C - post_cov) / np.linalg.norm(post_cov) < 1e-6
    v = np.random.default_rng(0).standard_normal(prior.dim)
    np.testing.assert_allclose(lrp.covariance_apply(v), post_cov @ v, rtol=1e-6, atol=1e-9)
    assert lrp.orthonormality_residual() < 1e-8


def test_rank_rule_stops_below_threshold(linear_problem):
    prior, mis, _, _ = linear_problem
    theta = ParameterFields.from_vector(prior.grid, prior.mean)
    lrp = laplace_posterior(mis, prior, theta, initial_rank=4)
    assert lrp.eigenvalues[-1] < 0.1
    assert np.all(lrp.eigenvalues[:-1] >= 0.1)


def test_uninformative_posterior_sample_is_prior(small_grid):
    prior = build_prior(small_grid, uniform_labels(small_grid, Region.GM), RegionHyper.defaults())
    theta = ParameterFields.from_vector(small_grid, prior.mean + 0.1)
    V = np.linalg.qr(np.random.default_rng(0).standard_normal((prior.dim, 3)))[0]
    lrp = LowRankPosterior(theta, np.zeros(3), V, prior)
    s = posterior_sample(lrp, 9).vector
    want = theta.vector + prior.fluctuations(np.random.default_rng(9))
    np.testing.assert_allclose(s, want, rtol=1e-12, atol=1e-12)
    assert posterior_sample(lrp, 9).vector.tobytes() == s.tobytes()


def test_fully_informed_mode_collapses(linear_problem):
    prior, mis, _, _ = linear_problem
    theta = ParameterFields.from_vector(prior.grid, prior.mean)
    lam, V = randomized_ghep(lambda X: mis.hessian_apply(None, X), prior, 3, 10, 1, 0)
    lam = np.array([1e12, lam[1], lam[2]])
    lrp = LowRankPosterior(theta, lam, V, prior)
    S = lrp.sample_vectors(500, 1) - theta.vector[:, None]
    coord = V[:, 0] @ prior.precision(S)
    assert np.std(coord) < 1e-5


def test_damping_monotone_in_rank(linear_problem):
    prior, mis, _, _ = linear_problem
    theta = ParameterFields.from_vector(prior.grid, prior.mean)
    lam, V = randomized_ghep(lambda X: mis.hessian_apply(None, X), prior, 10, 10, 1, 0)
    prev = prior.exact_variance()
    for r in range(1, 11):
        var = LowRankPosterior(theta, lam[:r], V[:, :r], prior).exact_variance()
        assert np.all(var <= prev + 1e-14)
        prev = var


def test_posterior_sampling_covariance(linear_problem):
    prior, mis, _, post_cov = linear_problem
    theta = ParameterFields.from_vector(prior.grid, prior.mean)
    lrp = laplace_posterior(mis, prior, theta, rank=20)
    S = lrp.sample_vectors(20000, 5) - theta.vector[:, None]
    emp = S @ S.T / S.shape[1]
    assert np.linalg.norm(emp - lrp.dense_covariance()) / np.linalg.norm(lrp.dense_covariance()) < 0.05


def test_pointwise_variance_matches_dense():
    g = build_grid(20, 20, 0.5, 0.5)
    prior = build_prior(g, uniform_labels(g, Region.GM), RegionHyper.defaults())
    rng = np.random.default_rng(2)
    F = rng.standard_normal((15, prior.dim)) / 10
    mis = LinearGaussianMisfit(F, np.zeros(15), 1e-3, g.cell_area)
    lrp = laplace_posterior(mis, prior, ParameterFields.from_vector(g, prior.mean), rank=15)
    vD, vG = pointwise_posterior_variance(lrp, 5000, 0)
    ex = lrp.exact_variance()
    mc = np.concatenate([vD.vector, vG.vector])
    assert np.max(np.abs(mc - ex) / ex) < 0.10


def test_predict(twin):
    ph, prior, truth, ctx = twin
    theta, _ = compute_map(ctx, prior, NewtonConfig(rel_tol=1e-6))
    lrp = laplace_posterior(ctx, prior, theta, rank=10)
    ens = predict(lrp, ctx, [5], 0)
    assert ens.n_samples == 0
    true5 = solve_forward(ph.grid, truth, ph.u0, (0, 5)).obs_states[-1]
    m, d = ens.map_field(5).vector >= 0.5, true5 >= 0.5
    assert 2 * np.sum(m & d) / (m.sum() + d.sum()) >= 0.95
    np.testing.assert_array_equal(ens.exceedance_probability(5).vector, m.astype(float))
    ens = predict(lrp, ctx, [4, 5], 250, seed=2)
    assert ens.sample_states.shape == (250, 2, ph.grid.n_cells)
    p = ens.exceedance_probability(4).vector
    assert p.min() >= 0 and p.max() <= 1
    with pytest.raises(ValidationError):
        predict(lrp, ctx, [3], 1)


def test_context_validation(small_phantom):
    ph = small_phantom
    obs = ObservationSeries((0.0, 1.0), (ph.u0, ph.u0))
    with pytest.raises(ValidationError):
        MisfitContext(ph.grid, obs, ph.u0, 1e-2)
    with pytest.raises(ValidationError):
        MisfitContext(ph.grid, obs.subset([1]), ph.u0, 0.0)


def test_prior_precision_block_shape(small_grid):
    h = RegionHyper(FieldHyper(0, 0, 1, 1, 2, 2), FieldHyper(0, 0, 1, 1, 2, 2))
    prior = build_prior(small_grid, uniform_labels(small_grid, Region.WM), h)
    X = np.ones((prior.dim, 2))
    assert prior.precision(X).shape == (prior.dim, 2)
