"""Grid search over prior correlation lengths and noise level, scored by
held-out Dice and NTA error and collapsed through a Pareto front."""
from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import NoValidPoints, TumorCalError, ValidationError
from .forward import SolverConfig, solve_forward
from .grid import Grid, RegionLabels, ScalarField, check_same_grid
from .inversion import MisfitContext, NewtonConfig, compute_map
from .metrics import dice, nta_indicator_error, tumor_indicator
from .phantom import ObservationSeries
from .prior import RegionHyper, build_prior

log = logging.getLogger(__name__)

RHO_GM_RANGE = (2.0, 10.0)
K_RANGE = (0.5, 1.0)
SIGMA_NOISE_RANGE = (0.015, 0.5)


@dataclass(frozen=True)
class SearchSpace:
    """Grid points for rho_gm (mm), k = rho_gm / rho_wm and the noise std."""

    rho_gm: tuple
    k: tuple
    sigma_noise: tuple

    def __post_init__(self):
        for name in ("rho_gm", "k", "sigma_noise"):
            pts = tuple(float(v) for v in getattr(self, name))
            if not pts:
                raise ValidationError(f"search axis {name} is empty")
            if any(not v > 0 for v in pts):
                raise ValidationError(f"search axis {name} must be positive")
            if any(b <= a for a, b in zip(pts, pts[1:])):
                raise ValidationError(f"search axis {name} must be strictly increasing")
            object.__setattr__(self, name, pts)

    @classmethod
    def default(cls, n_rho: int = 5, n_k: int = 3, n_sigma: int = 4) -> "SearchSpace":
        """Even spacing in rho_gm and k, geometric in the noise std."""
        return cls(
            tuple(np.linspace(*RHO_GM_RANGE, n_rho)),
            tuple(np.linspace(*K_RANGE, n_k)),
            tuple(np.geomspace(*SIGMA_NOISE_RANGE, n_sigma)),
        )

    @property
    def shape(self) -> tuple:
        return (len(self.rho_gm), len(self.k), len(self.sigma_noise))

    def cells(self):
        for r in self.rho_gm:
            for k in self.k:
                for s in self.sigma_noise:
                    yield (r, k, s)

    def index_of(self, triple) -> tuple:
        return tuple(int(np.argmin(np.abs(np.asarray(ax) - v))) for ax, v in zip((self.rho_gm, self.k, self.sigma_noise), triple))

    def to_dict(self) -> dict:
        return {"rho_gm": list(self.rho_gm), "k": list(self.k), "sigma_noise": list(self.sigma_noise)}

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        unknown = set(d) - {"rho_gm", "k", "sigma_noise"}
        if unknown:
            raise ValidationError(f"unknown search-space keys {sorted(unknown)}")
        return cls(tuple(d["rho_gm"]), tuple(d["k"]), tuple(d["sigma_noise"]))


def hyper_for(base: RegionHyper, rho_gm: float, k: float) -> RegionHyper:
    return base.with_rho(rho_gm, rho_gm / k)


@dataclass(eq=False)
class SubjectBundle:
    """One subject: geometry, data, and the day split."""

    grid: Grid
    labels: RegionLabels
    u0: ScalarField
    observations: ObservationSeries
    train_days: tuple
    test_day: float
    base_hyper: RegionHyper = field(default_factory=RegionHyper.defaults)
    cfg: SolverConfig = field(default_factory=SolverConfig)
    t0: float = 0.0
    name: str = "subject"

    def __post_init__(self):
        check_same_grid(self.grid, self.labels, self.u0)
        self.train_days = tuple(float(d) for d in self.train_days)
        self.test_day = float(self.test_day)
        if not self.train_days:
            raise ValidationError("at least one training day is required")
        if self.test_day in self.train_days:
            raise ValidationError("the testing day must not be a training day")
        self.observations.at(self.test_day)

    def context(self, noise_var: float) -> MisfitContext:
        return MisfitContext(
            self.grid, self.observations.subset(self.train_days), self.u0, noise_var, self.cfg, self.t0
        )


def map_calibrator(newton: NewtonConfig = NewtonConfig()):
    """Calibrate by MAP estimation and forward-predict the testing day."""

    def calibrate(subject: SubjectBundle, hyper: RegionHyper, noise_var: float) -> ScalarField:
        ctx = subject.context(noise_var)
        prior = build_prior(subject.grid, subject.labels, hyper)
        theta, _ = compute_map(ctx, prior, newton)
        traj = solve_forward(subject.grid, theta, subject.u0, (subject.t0, subject.test_day), subject.cfg)
        return traj.at_days()[-1]

    return calibrate


@dataclass
class CellResult:
    rho_gm: float
    k: float
    sigma_noise: float
    valid: bool = True
    per_subject: list = field(default_factory=list)  # [(dice, nta_error)]
    dice: float = math.nan
    nta_error: float = math.nan
    error: str = ""
    on_front: bool = False

    @property
    def triple(self) -> tuple:
        return (self.rho_gm, self.k, self.sigma_noise)


@dataclass
class SearchResult:
    space: SearchSpace
    cells: list
    chosen: tuple

    def front(self) -> list:
        return [c for c in self.cells if c.on_front]

    def to_dict(self) -> dict:
        return {
            "space": self.space.to_dict(),
            "chosen": {"rho_gm": self.chosen[0], "k": self.chosen[1], "sigma_noise": self.chosen[2]},
            "cells": [
                {**asdict(c), "per_subject": [list(p) for p in c.per_subject]}
                for c in self.cells
            ],
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rho_gm", "k", "sigma_noise", "valid", "dice", "nta_error", "on_front", "error"])
        for c in self.cells:
            w.writerow([repr(c.rho_gm), repr(c.k), repr(c.sigma_noise), int(c.valid), repr(c.dice), repr(c.nta_error), int(c.on_front), c.error])
        return buf.getvalue()


def evaluate_prediction(pred: ScalarField, data: ScalarField, cutoff: float = 0.5, data_cutoff: float = 0.5):
    """(Dice, NTA indicator error) of a predicted field against data."""
    m = tumor_indicator(pred, cutoff)
    d = tumor_indicator(data, data_cutoff)
    return dice(m, d), nta_indicator_error(m, d, pred.grid)


def _evaluate_cell(triple, subjects, calibrator, cutoff, data_cutoff) -> CellResult:
    rho, k, sigma = triple
    cell = CellResult(rho, k, sigma)
    try:
        for s in subjects:
            hyper = hyper_for(s.base_hyper, rho, k)
            pred = calibrator(s, hyper, sigma * sigma)
            cell.per_subject.append(evaluate_prediction(pred, s.observations.at(s.test_day), cutoff, data_cutoff))
    except (TumorCalError, ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        cell.valid = False
        cell.error = f"{type(exc).__name__}: {exc}"
        log.warning("grid cell %s failed: %s", triple, cell.error)
        return cell
    cell.dice = float(np.mean([p[0] for p in cell.per_subject]))
    cell.nta_error = float(np.mean([p[1] for p in cell.per_subject]))
    return cell


def grid_search(
    space: SearchSpace,
    subjects: list,
    calibrator=None,
    workers: int = 1,
    cutoff: float = 0.5,
    data_cutoff: float = 0.5,
) -> SearchResult:
    """Evaluate every grid cell on every subject; objectives are averaged over
    subjects.  Failing cells are kept, marked invalid and left off the front."""
    if not subjects:
        raise ValidationError("no subjects given")
    calibrator = calibrator or map_calibrator()
    triples = list(space.cells())

    def run(t):
        return _evaluate_cell(t, subjects, calibrator, cutoff, data_cutoff)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(run, triples))
    else:
        cells = [run(t) for t in triples]

    valid = [c for c in cells if c.valid]
    front_idx = pareto_front([(c.dice, c.nta_error) for c in valid])
    for i in front_idx:
        valid[i].on_front = True
    chosen = select_hyper([valid[i] for i in front_idx])
    return SearchResult(space, cells, chosen)


def _dominates(q, p) -> bool:
    return q[0] >= p[0] and q[1] <= p[1] and (q[0] > p[0] or q[1] < p[1])


def pareto_front(points) -> list:
    """Indices of the points not dominated under (maximize dice, minimize
    error).  Equal points do not dominate each other."""
    pts = [(float(d), float(e)) for d, e in points]
    if not pts:
        raise NoValidPoints("no valid points for the Pareto front")
    if any(not (math.isfinite(d) and math.isfinite(e)) for d, e in pts):
        raise ValidationError("Pareto objectives must be finite")
    order = sorted(range(len(pts)), key=lambda i: (-pts[i][0], pts[i][1]))
    front, best_err = [], math.inf
    prev = None
    for i in order:
        d, e = pts[i]
        if e < best_err or (prev is not None and (d, e) == prev):
            front.append(i)
            best_err = min(best_err, e)
            prev = (d, e)
    return sorted(front)


def select_hyper(front) -> tuple:
    """Maximum Dice, then minimal NTA error, then smallest rho_gm."""
    if not front:
        raise NoValidPoints("empty Pareto front")
    best = min(front, key=lambda c: (-c.dice, c.nta_error, c.rho_gm))
    return best.triple
