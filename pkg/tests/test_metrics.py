import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.integrate import trapezoid

from tumorcal.errors import DegenerateData, EmptyReference, ValidationError
from tumorcal.grid import BinaryMask, ScalarField, build_grid
from tumorcal.metrics import (
    Boundary,
    boundary_margin,
    compare,
    dice,
    extract_boundary,
    kde,
    nta,
    nta_indicator_error,
    relative_nta_gap,
    silverman_bandwidth,
    tumor_indicator,
)

G16 = build_grid(16, 16, 1.0, 1.0)
masks16 = arrays(bool, (16, 16))


def cone(grid, c, R):
    """Field equal to 0.5 exactly on the circle of radius R around c."""
    x, y = grid.cell_centers.T
    r = np.hypot(x - c[0], y - c[1])
    return ScalarField.from_vector(grid, np.clip(1.0 - 0.5 * r / R, 0.0, 1.0))


def inside(poly, p):
    """Even-odd ray casting."""
    x, y = p
    n = len(poly)
    c = False
    for k in range(n):
        (x1, y1), (x2, y2) = poly[k], poly[(k + 1) % n]
        if (y1 > y) != (y2 > y) and x < x1 + (y - y1) * (x2 - x1) / (y2 - y1):
            c = not c
    return c


def test_indicator_trivial_cases(small_grid):
    assert tumor_indicator(ScalarField.constant(small_grid, 0.0)).count == 0
    full = tumor_indicator(ScalarField.constant(small_grid, 1.0))
    np.testing.assert_array_equal(full.mask, small_grid.brain_mask)
    v = np.zeros(small_grid.n_cells)
    v[5] = 0.5
    assert tumor_indicator(ScalarField.from_vector(small_grid, v)).count == 1
    with pytest.raises(ValidationError):
        tumor_indicator(ScalarField.constant(small_grid, 0.0), 1.0)


def test_dice_small_cases():
    a = np.zeros((16, 16), bool)
    b = a.copy()
    a[0, :4] = True
    b[0, 2:6] = True
    assert dice(BinaryMask(G16, a), BinaryMask(G16, b)) == 0.5
    assert dice(BinaryMask(G16, a), BinaryMask(G16, a)) == 1
    assert dice(BinaryMask(G16, a), BinaryMask(G16, ~a & (np.arange(16) > 8))) == 0
    e = BinaryMask(G16, np.zeros((16, 16), bool))
    assert dice(e, e) == 1


def test_counting_example():
    g = build_grid(10, 10, 1, 1)
    m = np.zeros((10, 10), bool)
    d = m.copy()
    m[0] = True
    d[0, :8] = True
    M, D = BinaryMask(g, m), BinaryMask(g, d)
    assert nta(M, g) == pytest.approx(0.10)
    assert nta_indicator_error(M, D, g) == pytest.approx(0.02)
    assert relative_nta_gap(M, D, g) == pytest.approx(0.25)
    assert nta_indicator_error(M, M, g) == 0 and relative_nta_gap(M, M, g) == 0
    empty = BinaryMask(g, np.zeros((10, 10), bool))
    assert relative_nta_gap(M, empty, g) == math.inf
    assert relative_nta_gap(empty, empty, g) == 0


@settings(max_examples=200, deadline=None)
@given(masks16, masks16, masks16)
def test_mask_identities_against_sets(a, b, c):
    sa = {tuple(p) for p in np.argwhere(a)}
    sb = {tuple(p) for p in np.argwhere(b)}
    A, B, C = BinaryMask(G16, a), BinaryMask(G16, b), BinaryMask(G16, c)
    want = 1.0 if not sa and not sb else 2 * len(sa & sb) / (len(sa) + len(sb))
    assert dice(A, B) == want == dice(B, A)
    assert nta(A, G16) == len(sa) / 256
    assert nta_indicator_error(A, B, G16) == len(sa ^ sb) / 256
    # symmetric-difference area is a metric
    assert nta_indicator_error(A, C, G16) <= nta_indicator_error(A, B, G16) + nta_indicator_error(B, C, G16)


@settings(max_examples=100, deadline=None)
@given(masks16, st.integers(0, 255))
def test_dice_grows_with_overlap(a, k):
    """Moving one cell of b from outside a to inside a never lowers Dice."""
    if a.all() or not a.any():
        return
    b = np.zeros_like(a)
    out_cells = np.argwhere(~a)
    in_cells = np.argwhere(a & ~b)
    p = out_cells[k % len(out_cells)]
    b[tuple(p)] = True
    before = dice(BinaryMask(G16, a), BinaryMask(G16, b))
    b[tuple(p)] = False
    b[tuple(in_cells[k % len(in_cells)])] = True
    assert dice(BinaryMask(G16, a), BinaryMask(G16, b)) >= before


def test_circle_contour_length():
    g = build_grid(96, 96, 0.125, 0.125)
    b = extract_boundary(cone(g, (6.0, 6.0), 4.0))
    assert len(b) == 1
    assert abs(b.length / (2 * math.pi * 4.0) - 1) < 0.05


def test_empty_contour(small_grid):
    assert extract_boundary(ScalarField.constant(small_grid, 0.2)).is_empty


def test_contour_shift_invariant():
    g = build_grid(40, 40, 0.25, 0.25)
    a = extract_boundary(cone(g, (4.0, 5.0), 2.0))
    b = extract_boundary(cone(g, (4.0 + 3 * 0.25, 5.0 - 2 * 0.25), 2.0))
    assert a.length == pytest.approx(b.length, rel=1e-12)


def test_contour_encloses_high_cells(rng):
    g = build_grid(30, 30, 0.5, 0.5)
    x, y = g.cell_centers.T
    u = 0.6 * np.exp(-((x - 6) ** 2 + (y - 8) ** 2) / 8) + 0.5 * np.exp(-((x - 10) ** 2 + (y - 6) ** 2) / 4)
    u += 0.02 * rng.standard_normal(len(u))
    f = ScalarField.from_vector(g, u)
    b = extract_boundary(f, 0.4)
    polys = b.polylines
    for p in g.cell_centers[u >= 0.4 + 1e-9]:
        assert sum(inside(poly, p) for poly in polys) % 2 == 1


def test_margin_identity_and_circles():
    g = build_grid(120, 120, 0.125, 0.125)
    c = (7.5, 7.5)
    ref = extract_boundary(cone(g, c, 5.0))
    assert boundary_margin([ref], ref) == 0
    m = boundary_margin([extract_boundary(cone(g, c, 6.0))], ref)
    assert abs(m - 1.0) < 0.1
    m2 = boundary_margin([extract_boundary(cone(g, c, 4.0)), extract_boundary(cone(g, c, 6.0))], ref)
    assert abs(m2 - 1.0) < 0.1
    with pytest.raises(EmptyReference):
        boundary_margin([ref], Boundary())
    assert boundary_margin([Boundary()], ref) == math.inf


def test_kde_normal_density():
    x = np.random.default_rng(0).standard_normal(10000)
    grid, dens = kde(x)
    assert abs(np.interp(0.0, grid, dens) / 0.3989 - 1) < 0.1
    assert abs(trapezoid(dens, grid) - 1) < 1e-3
    assert silverman_bandwidth(x) == pytest.approx(1.06 * np.std(x, ddof=1) * 10000 ** -0.2)
    with pytest.raises(DegenerateData):
        kde(np.full(10, 0.3))


def test_compare_report():
    g = build_grid(40, 40, 0.25, 0.25)
    data = cone(g, (5, 5), 2.0)
    model = cone(g, (5.25, 5), 2.0)
    rep = compare(model, data, samples=[model, cone(g, (5, 5), 2.25)])
    assert 0.8 < rep.dice < 1
    assert rep.ensemble["n_samples"] == 2
    assert 0 < rep.boundary_margin_mm < 0.5
    d = compare(model, ScalarField.constant(g, 0.0)).to_dict()
    assert d["nta_relative_gap"] == "inf"
