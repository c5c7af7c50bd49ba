import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tumorcal.errors import NoValidPoints, NumericalError, ValidationError
from tumorcal.forward import ParameterFields, solve_forward
from tumorcal.grid import ScalarField
from tumorcal.hypersearch import (
    CellResult,
    SearchSpace,
    SubjectBundle,
    evaluate_prediction,
    grid_search,
    hyper_for,
    pareto_front,
    select_hyper,
)
from tumorcal.phantom import synthesize_observations
from tumorcal.prior import RegionHyper


def brute_front(pts):
    out = []
    for i, p in enumerate(pts):
        if not any(q[0] >= p[0] and q[1] <= p[1] and q != p for q in pts):
            out.append(i)
    return out


values = st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0])


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(values, values), min_size=1, max_size=12))
def test_pareto_matches_brute_force(pts):
    assert pareto_front(pts) == brute_front(pts)


def test_pareto_edge_cases():
    with pytest.raises(NoValidPoints):
        pareto_front([])
    with pytest.raises(ValidationError):
        pareto_front([(float("nan"), 0.1)])
    assert pareto_front([(0.9, 0.1), (0.9, 0.1)]) == [0, 1]
    assert pareto_front([(0.9, 0.2), (0.8, 0.1), (0.7, 0.3)]) == [0, 1]


def test_select_hyper_tie_breaks():
    cells = [
        CellResult(6.0, 0.5, 0.1, dice=0.9, nta_error=0.02),
        CellResult(4.0, 0.5, 0.1, dice=0.9, nta_error=0.02),
        CellResult(2.0, 0.5, 0.1, dice=0.9, nta_error=0.03),
        CellResult(8.0, 0.5, 0.1, dice=0.8, nta_error=0.01),
    ]
    assert select_hyper(cells) == (4.0, 0.5, 0.1)
    with pytest.raises(NoValidPoints):
        select_hyper([])


def test_search_space():
    s = SearchSpace.default()
    assert s.shape == (5, 3, 4)
    assert s.rho_gm == (2.0, 4.0, 6.0, 8.0, 10.0)
    assert s.k == (0.5, 0.75, 1.0)
    assert s.sigma_noise[0] == pytest.approx(0.015) and s.sigma_noise[-1] == pytest.approx(0.5)
    assert len(list(s.cells())) == 60
    assert s.index_of((6.1, 0.74, 0.05)) == (2, 1, 1)
    assert SearchSpace.from_dict(s.to_dict()) == s
    with pytest.raises(ValidationError):
        SearchSpace((1.0, 1.0), (0.5,), (0.1,))
    with pytest.raises(ValidationError):
        SearchSpace((), (0.5,), (0.1,))
    with pytest.raises(ValidationError):
        SearchSpace.from_dict({"rho": [1]})


def test_hyper_for_sets_both_lengths():
    h = hyper_for(RegionHyper.defaults(), 4.0, 0.5)
    assert h.logD.rho_gm == 4.0 and h.logD.rho_wm == 8.0 and h.logG.rho_wm == 8.0


@pytest.fixture(scope="module")
def subject(small_phantom):
    ph = small_phantom
    th = ParameterFields.constant(ph.grid, np.log(0.08), np.log(0.5))
    obs = synthesize_observations(ph.grid, th, ph.u0, (0, 1, 2, 4), 0.0, 0)
    return SubjectBundle(ph.grid, ph.labels, ph.u0, obs, (1, 2), 4)


def test_subject_validation(subject):
    with pytest.raises(ValidationError):
        SubjectBundle(subject.grid, subject.labels, subject.u0, subject.observations, (1, 4), 4)
    with pytest.raises(ValidationError):
        SubjectBundle(subject.grid, subject.labels, subject.u0, subject.observations, (), 4)
    assert subject.context(0.01).observations.days == (1.0, 2.0)


def _fake_calibrator(subject, hyper, noise_var):
    """Prediction degrades smoothly away from rho_gm = 6, k = 0.75."""
    rho, k = hyper.logD.rho_gm, hyper.logD.rho_gm / hyper.logD.rho_wm
    d = np.exp(np.log(0.08) + 0.3 * abs(rho - 6) + 3 * abs(k - 0.75) + 10 * np.sqrt(noise_var))
    th = ParameterFields.constant(subject.grid, np.log(d), np.log(0.5))
    return ScalarField.from_vector(subject.grid, solve_forward(subject.grid, th, subject.u0, (0, subject.test_day)).obs_states[-1])


def test_grid_search_with_injected_failure(subject):
    space = SearchSpace((2.0, 6.0, 10.0), (0.5, 0.75), (0.015, 0.1))

    def flaky(s, hyper, nv):
        if hyper.logD.rho_gm == 10.0 and nv > 0.005:
            raise NumericalError("injected")
        return _fake_calibrator(s, hyper, nv)

    res = grid_search(space, [subject], flaky)
    bad = [c for c in res.cells if not c.valid]
    assert len(bad) == 2 and all("injected" in c.error for c in bad)
    assert not any(c.on_front for c in bad)
    assert res.chosen == (6.0, 0.75, 0.015)
    rows = list(csv.DictReader(io.StringIO(res.to_csv())))
    assert len(rows) == 12 and sum(int(r["on_front"]) for r in rows) == len(res.front())
    json.dumps(res.to_dict())


def test_grid_search_threads_match_serial(subject):
    space = SearchSpace((4.0, 6.0), (0.75,), (0.015, 0.05))
    a = grid_search(space, [subject], _fake_calibrator)
    b = grid_search(space, [subject, subject], _fake_calibrator, workers=3)
    assert [(c.dice, c.nta_error) for c in a.cells] == [(c.dice, c.nta_error) for c in b.cells]
    assert a.chosen == b.chosen


def test_all_cells_failing(subject):
    def broken(*_):
        raise NumericalError("nope")

    with pytest.raises(NoValidPoints):
        grid_search(SearchSpace((2.0,), (0.5,), (0.1,)), [subject], broken)


def test_evaluate_prediction_identity(subject):
    d = subject.observations.at(4)
    assert evaluate_prediction(d, d) == (1.0, 0.0)
