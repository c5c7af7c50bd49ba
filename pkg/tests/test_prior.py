import math

import mpmath
import numpy as np
import pytest

from tumorcal.errors import MissingRegionHyper, NonpositiveHyper, ValidationError
from tumorcal.grid import Region, ScalarField, build_grid
from tumorcal.prior import (
    FieldHyper,
    RegionHyper,
    assemble_spde_operator,
    build_prior,
    exact_marginal_variance,
    hyper_to_coeffs,
    matern_correlation,
    pointwise_marginal_variance,
    prior_cost,
    prior_grad,
    prior_sample,
    region_fields,
)

from conftest import half_split_labels, uniform_labels

mpmath.mp.dps = 30


def mp_coeffs(var, rho):
    s = mpmath.sqrt(mpmath.mpf(var))
    rho = mpmath.mpf(rho)
    d = mpmath.sqrt(2) / (s * rho * mpmath.sqrt(mpmath.pi))
    g = rho / (4 * s * mpmath.sqrt(2 * mpmath.pi))
    b = mpmath.sqrt(d * g) / mpmath.mpf("1.42")
    return d, g, b


@pytest.mark.parametrize("var, rho, printed", [(0.2336, 6, (0.27515, 1.23823, 0.41090)), (0.0682, 12, (0.25466, 4.58332, 0.76065))])
def test_coefficients_against_high_precision(var, rho, printed):
    got = hyper_to_coeffs(math.sqrt(var), rho)
    for g, want in zip(got, mp_coeffs(var, rho)):
        assert abs(g - float(want)) <= 1e-12 * float(want)
    # the rounded reference values agree to about four digits
    for g, p in zip(got, printed):
        assert abs(g - p) / p < 1e-3


def test_coefficients_homogeneous_in_rho():
    d1, g1, _ = hyper_to_coeffs(0.4, 3.0)
    d2, g2, _ = hyper_to_coeffs(0.4, 6.0)
    assert d2 == pytest.approx(d1 / 2, rel=1e-15)
    assert g2 == pytest.approx(2 * g1, rel=1e-15)


@pytest.mark.parametrize("s, r", [(0.0, 1.0), (1.0, -2.0), (math.nan, 1.0)])
def test_nonpositive_hyper(s, r):
    with pytest.raises(NonpositiveHyper):
        hyper_to_coeffs(s, r)


def test_field_hyper_validation():
    with pytest.raises(NonpositiveHyper):
        FieldHyper(0, 0, -1, 1, 1, 1)
    with pytest.raises(ValidationError):
        FieldHyper(0, 0, 1, 1, 1, 2, 1.5)
    with pytest.raises(MissingRegionHyper):
        FieldHyper.from_dict({"mean_gm": 0})
    h = RegionHyper.defaults()
    assert RegionHyper.from_dict(h.to_dict()) == h


def test_matern_correlation_shape():
    r = np.array([0.0, 1e-9, 6.0, 12.0])
    c = matern_correlation(r, 6.0)
    assert c[0] == 1 and c[1] == pytest.approx(1, abs=1e-6)
    # at r = rho the nu = 1 correlation is sqrt(8) K1(sqrt(8))
    assert c[2] == pytest.approx(float(mpmath.sqrt(8) * mpmath.besselk(1, mpmath.sqrt(8))), rel=1e-12)
    assert c[3] < 0.02


def _uniform_op(n=4, h=1.0, robin=True, var=0.2336, rho=6.0):
    g = build_grid(n, n, h, h)
    lab = uniform_labels(g, Region.GM)
    return assemble_spde_operator(g, lab, FieldHyper(0, 0, var, var, rho, rho, None), robin=robin)


def test_constant_field_hand_stencil():
    op = _uniform_op()
    d, g, b = hyper_to_coeffs(math.sqrt(0.2336), 6.0)
    Ac = op.apply(np.full(16, 2.0)).reshape(4, 4)
    # inner cells have no boundary faces; edges have one, corners two
    assert Ac[1, 1] == pytest.approx(d * 2, rel=1e-14)
    assert Ac[0, 1] == pytest.approx(2 * (d + b), rel=1e-14)
    assert Ac[0, 0] == pytest.approx(2 * (d + 2 * b), rel=1e-14)
    op0 = _uniform_op(robin=False)
    np.testing.assert_allclose(op0.apply(np.full(16, 2.0)), 2 * d, rtol=1e-14)


def test_operator_symmetric_and_positive(small_grid, rng):
    lab = half_split_labels(small_grid, 0.6)
    op = assemble_spde_operator(small_grid, lab, RegionHyper.defaults(), "logD")
    for _ in range(5):
        v, w = rng.standard_normal((2, small_grid.n_cells))
        assert abs(op.apply(v) @ w - v @ op.apply(w)) <= 1e-12 * np.linalg.norm(v) * np.linalg.norm(w) * np.abs(op.K).max() / op.area
        assert v @ op.apply(v) > 0
    with pytest.raises(MissingRegionHyper):
        assemble_spde_operator(small_grid, lab, RegionHyper.defaults(), "logX")


def test_region_fields_piecewise(small_grid):
    lab = half_split_labels(small_grid, 0.6)
    fh = RegionHyper.defaults().logD
    mean, sigma, rho = region_fields(small_grid, lab, fh)
    v = lab.vector
    assert np.all(mean[v == Region.GM] == fh.mean_gm) and np.all(mean[v == Region.WM] == fh.mean_wm)
    assert np.all(rho[v == Region.INTERFACE] == fh.rho_int)
    assert np.all(rho[v == Region.WM] == fh.rho_wm)
    inter = mean[v == Region.INTERFACE]
    assert np.all((inter >= min(fh.mean_gm, fh.mean_wm)) & (inter <= max(fh.mean_gm, fh.mean_wm)))
    np.testing.assert_allclose(sigma, math.sqrt(0.2336))


def test_sample_determinism(small_grid):
    op = _uniform_op(8, 0.5)
    mean = ScalarField.constant(op.grid, 1.0)
    a, b = prior_sample(op, mean, 5), prior_sample(op, mean, 5)
    assert a.vector.tobytes() == b.vector.tobytes()
    assert not np.array_equal(a.vector, prior_sample(op, mean, 6).vector)


def test_cost_and_gradient(small_grid, rng):
    lab = half_split_labels(small_grid, 0.6)
    op = assemble_spde_operator(small_grid, lab, RegionHyper.defaults(), "logG")
    mean = ScalarField.from_vector(small_grid, rng.standard_normal(small_grid.n_cells))
    assert prior_cost(op, mean, mean) == 0
    assert np.all(prior_grad(op, mean, mean).vector == 0)
    th = ScalarField.from_vector(small_grid, mean.vector + rng.standard_normal(small_grid.n_cells))
    g = prior_grad(op, mean, th).vector
    v = rng.standard_normal(small_grid.n_cells)
    e = 1e-3
    f = lambda t: prior_cost(op, mean, ScalarField.from_vector(small_grid, th.vector + t * v))  # noqa: E731
    fd = (f(e) - f(-e)) / (2 * e)
    assert abs(fd - g @ v) / abs(fd) < 1e-8


def test_precision_inverts_covariance(small_grid, rng):
    prior = build_prior(small_grid, half_split_labels(small_grid, 0.6), RegionHyper.defaults())
    v = rng.standard_normal((prior.dim, 3))
    np.testing.assert_allclose(prior.precision(prior.covariance(v)), v, rtol=1e-9, atol=1e-9)
    assert prior.cost(prior.mean) == 0


def test_chi_square_consistency(small_grid):
    """Mean of the precision-weighted squared sample deviation is N."""
    for band in (0.0, 0.6):
        lab = half_split_labels(small_grid, band)
        op = assemble_spde_operator(small_grid, lab, RegionHyper.defaults(), "logD")
        s = op.fluctuations(np.random.default_rng(0), 2000)
        q = np.einsum("ij,ij->j", s, op.precision(s))
        assert abs(q.mean() / small_grid.n_cells - 1) < 0.05


def test_monte_carlo_variance_matches_dense():
    op = _uniform_op(20, 0.5, rho=3.0)
    mc = pointwise_marginal_variance(op, 5000, 0).vector
    ex = exact_marginal_variance(op).vector
    assert np.max(np.abs(mc - ex) / ex) < 0.10
    with pytest.raises(ValidationError):
        pointwise_marginal_variance(op, 50, 0)


def test_interior_variance_near_target():
    op = _uniform_op(48, 0.25, rho=6.0)
    var = op.exact_variance()
    x, y = op.grid.cell_centers.T
    inner = (x > 4) & (x < 8) & (y > 4) & (y < 8)
    assert abs(var[inner].mean() / 0.2336 - 1) < 0.1
    assert np.ptp(var[inner]) / var[inner].mean() < 0.2


def test_robin_limits_boundary_inflation():
    ratios = {}
    for robin in (True, False):
        op = _uniform_op(40, 0.25, robin=robin, rho=2.0)
        var = op.exact_variance()
        x, y = op.grid.cell_centers.T
        inner = (np.minimum.reduce([x, y, 10 - x, 10 - y]) > 3.0)
        ratios[robin] = var.max() / var[inner].mean()
    assert ratios[True] < 1.5
    assert ratios[False] > 2.0


def test_interface_decorrelation():
    g = build_grid(48, 40, 0.25, 0.25)
    lab = half_split_labels(g, 0.6)
    fh = FieldHyper(0.0, 0.0, 0.2336, 0.2336, 6.0, 6.0, 0.6)
    C = assemble_spde_operator(g, lab, fh).dense_covariance()
    sd = np.sqrt(np.diag(C))
    idx = g.index_map
    seam = 24  # first WM column
    across, same = [], []
    for j in range(12, 28):
        a, b = idx[j, seam - 3], idx[j, seam + 2]  # centres 0.625 mm either side
        across.append(C[a, b] / (sd[a] * sd[b]))
        a, b = idx[j, 6], idx[j, 11]
        same.append(C[a, b] / (sd[a] * sd[b]))
    assert max(across) < 0.2
    assert min(same) > 0.7
