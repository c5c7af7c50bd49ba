"""Synthetic brains, ground-truth parameter fields and noisy observation
series for twin experiments."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .errors import GeometryOutOfBounds, ValidationError
from .forward import ParameterFields, SolverConfig, solve_forward
from .grid import (
    BinaryMask,
    Grid,
    Region,
    RegionLabels,
    ScalarField,
    build_grid,
    check_same_grid,
    region_labels_from_masks,
)
from .prior import FieldHyper, PriorPair, RegionHyper, region_fields
from .registration import warp_image


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry, tumour seed and acquisition settings of a synthetic subject.

    Lengths are in mm, with the origin at the corner of cell (0, 0).  The
    white-matter structure is an annular sector (corpus-callosum-like arc).
    """

    nx: int = 41
    ny: int = 61
    hx: float = 0.25
    hy: float = 0.25
    brain_center: tuple = (5.125, 7.625)
    brain_semi_axes: tuple = (4.6, 7.2)
    wm_center: tuple = (5.125, 10.25)
    wm_radius: float = 3.2
    wm_thickness: float = 2.4
    wm_angles: tuple = (200.0, 340.0)
    band_halfwidth: float = 0.6
    tumor_center: tuple = (4.375, 5.375)
    tumor_radius: float = 2.75
    tumor_peak: float = 0.9
    days: tuple = (0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 7.0)
    noise_var: float = 3.9e-3
    seed: int = 0
    deformation_amplitude: float = 1.5
    gm_intensity: float = 0.75
    wm_intensity: float = 0.35
    background_intensity: float = 0.05

    def __post_init__(self):
        d = np.asarray(self.days, dtype=float)
        if len(d) < 1 or np.any(np.diff(d) <= 0):
            raise ValidationError(f"observation days must be strictly increasing, got {list(self.days)}")
        if not 0 < self.tumor_peak <= 1:
            raise ValidationError(f"tumor peak fraction must lie in (0, 1], got {self.tumor_peak}")
        if self.tumor_radius < 0 or self.noise_var < 0:
            raise ValidationError("tumor radius and noise variance must be non-negative")

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown phantom keys {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(eq=False)
class Phantom:
    spec: PhantomSpec
    grid: Grid
    labels: RegionLabels
    gm: BinaryMask
    wm: BinaryMask
    subject_image: np.ndarray
    atlas_image: np.ndarray
    atlas_labels: np.ndarray
    # atlas(x) = subject(x + true_displacement(x)), pixels
    true_displacement: np.ndarray
    u0: ScalarField


@dataclass(eq=False)
class ObservationSeries:
    days: tuple
    fields: list = field(default_factory=list)

    def __post_init__(self):
        self.days = tuple(float(d) for d in self.days)
        if len(self.days) != len(self.fields):
            raise ValidationError("one field per observation day required")
        if np.any(np.diff(self.days) <= 0):
            raise ValidationError("observation days must be strictly increasing")
        if self.fields:
            check_same_grid(self.fields[0].grid, *self.fields)

    def at(self, day: float) -> ScalarField:
        try:
            return self.fields[self.days.index(float(day))]
        except ValueError:
            raise ValidationError(f"no observation on day {day}") from None

    def subset(self, days) -> "ObservationSeries":
        days = sorted(float(d) for d in days)
        return ObservationSeries(tuple(days), [self.at(d) for d in days])


def _cell_coords(grid: Grid):
    jj, ii = np.mgrid[0 : grid.ny, 0 : grid.nx]
    return (ii + 0.5) * grid.hx, (jj + 0.5) * grid.hy


def _wm_arc(spec: PhantomSpec, x, y):
    dx, dy = x - spec.wm_center[0], y - spec.wm_center[1]
    r = np.hypot(dx, dy)
    ang = np.degrees(np.arctan2(dy, dx)) % 360.0
    a0, a1 = spec.wm_angles
    in_angle = (ang >= a0) & (ang <= a1) if a0 <= a1 else (ang >= a0) | (ang <= a1)
    return in_angle & (np.abs(r - spec.wm_radius) <= spec.wm_thickness / 2)


def _ellipse(spec: PhantomSpec, x, y, shrink=0.0):
    ax, ay = spec.brain_semi_axes
    return ((x - spec.brain_center[0]) / (ax - shrink)) ** 2 + (
        (y - spec.brain_center[1]) / (ay - shrink)
    ) ** 2 <= 1.0


def analytic_deformation(grid: Grid, amplitude: float) -> np.ndarray:
    """Smooth displacement field (pixels) vanishing on the image border."""
    jj, ii = np.mgrid[0 : grid.ny, 0 : grid.nx].astype(float)
    sx = np.sin(np.pi * (ii + 0.5) / grid.nx)
    sy = np.sin(np.pi * (jj + 0.5) / grid.ny)
    dx = amplitude * sx * sy * np.cos(np.pi * (jj + 0.5) / grid.ny)
    dy = amplitude * sx * sy * np.cos(np.pi * (ii + 0.5) / grid.nx)
    return np.stack([dx, dy], axis=-1)


def tumor_bump(grid: Grid, center, radius: float, peak: float) -> ScalarField:
    """Compact radial bump ``peak * (1 - (r/R)^2)^2`` for ``r < R``."""
    if radius <= 0:
        return ScalarField.constant(grid, 0.0)
    x, y = _cell_coords(grid)
    q = ((x - center[0]) ** 2 + (y - center[1]) ** 2) / radius**2
    return ScalarField(grid, np.where(q < 1.0, peak * (1.0 - q) ** 2, 0.0))


def make_brain_phantom(spec: PhantomSpec = PhantomSpec()) -> Phantom:
    """Build the synthetic subject and a deformed atlas copy of it."""
    x, y = np.meshgrid(
        (np.arange(spec.nx) + 0.5) * spec.hx, (np.arange(spec.ny) + 0.5) * spec.hy
    )
    ax, ay = spec.brain_semi_axes
    cx, cy = spec.brain_center
    if cx - ax < 0 or cx + ax > spec.nx * spec.hx or cy - ay < 0 or cy + ay > spec.ny * spec.hy:
        raise GeometryOutOfBounds("brain ellipse exceeds the image")
    brain = _ellipse(spec, x, y)
    grid = build_grid(spec.nx, spec.ny, spec.hx, spec.hy, brain)

    # every arc cell, and a margin of one cell, must sit inside the brain
    wm_raw = _wm_arc(spec, x, y)
    if not wm_raw.any():
        raise GeometryOutOfBounds("white-matter structure covers no cells")
    if np.any(wm_raw & ~_ellipse(spec, x, y, shrink=max(spec.hx, spec.hy))):
        raise GeometryOutOfBounds("white-matter structure leaves the brain")
    wm = wm_raw & brain
    gm = brain & ~wm
    labels = region_labels_from_masks(grid, BinaryMask(grid, gm), BinaryMask(grid, wm), spec.band_halfwidth)

    if spec.tumor_radius > 0:
        tx, ty = spec.tumor_center
        theta = np.linspace(0, 2 * np.pi, 64)
        px = tx + spec.tumor_radius * np.cos(theta)
        py = ty + spec.tumor_radius * np.sin(theta)
        if np.any(((px - cx) / ax) ** 2 + ((py - cy) / ay) ** 2 > 1.0):
            raise GeometryOutOfBounds("initial tumour leaves the brain")
    u0 = tumor_bump(grid, spec.tumor_center, spec.tumor_radius, spec.tumor_peak)

    label_img = np.zeros(grid.shape, dtype=np.int64)
    label_img[gm] = Region.GM
    label_img[wm] = Region.WM
    intensity = np.full(grid.shape, spec.background_intensity)
    intensity[gm] = spec.gm_intensity
    intensity[wm] = spec.wm_intensity
    subject = np.clip(ndimage.gaussian_filter(intensity, 0.75, mode="nearest"), 0.0, 1.0)

    disp = analytic_deformation(grid, spec.deformation_amplitude)
    if spec.deformation_amplitude == 0:
        atlas, atlas_labels = subject.copy(), label_img.copy()
    else:
        atlas = warp_image(subject, disp, "bilinear")
        atlas_labels = warp_image(label_img, disp, "nearest")
    return Phantom(
        spec, grid, labels, BinaryMask(grid, gm), BinaryMask(grid, wm), subject, atlas,
        atlas_labels, disp, u0,
    )


def draw_truth_fields(prior: PriorPair, seed) -> ParameterFields:
    """One prior draw of (log D, log G)."""
    rng = np.random.default_rng(seed)
    vec = prior.mean + prior.fluctuations(rng)
    return ParameterFields.from_vector(prior.grid, vec)


def offprior_truth_fields(
    grid: Grid,
    labels: RegionLabels,
    hyper: RegionHyper,
    bump_center,
    bump_radius: float = 2.0,
    bump_amplitude=(0.4, 0.2),
) -> ParameterFields:
    """Piecewise-constant region means plus one smooth Gaussian bump; a truth
    that does not come from the prior."""
    x, y = grid.cell_centers.T
    bump = np.exp(-((x - bump_center[0]) ** 2 + (y - bump_center[1]) ** 2) / (2 * bump_radius**2))
    vecs = []
    for fh, amp in zip((hyper.logD, hyper.logG), bump_amplitude):
        lab = labels.vector
        mean, _, _ = region_fields(grid, labels, FieldHyper(fh.mean_gm, fh.mean_wm, 1, 1, 1, 1))
        mean = np.where(lab == Region.WM, fh.mean_wm, np.where(lab == Region.GM, fh.mean_gm, mean))
        vecs.append(mean + amp * bump)
    return ParameterFields.from_vector(grid, np.concatenate(vecs))


def synthesize_observations(
    grid: Grid,
    theta: ParameterFields,
    u0: ScalarField,
    days,
    noise_var: float,
    seed,
    cfg: SolverConfig = SolverConfig(),
    clamp: bool = True,
) -> ObservationSeries:
    """Forward-solve and add i.i.d. Gaussian noise on brain cells, day by day;
    optionally clamp to [0, 1]."""
    if days[0] < 0:
        raise ValidationError("observation days must be non-negative")
    if noise_var < 0:
        raise ValidationError("noise variance must be non-negative")
    traj = solve_forward(grid, theta, u0, days, cfg)
    rng = np.random.default_rng(seed)
    std = math.sqrt(noise_var)
    fields = []
    for state in traj.obs_states:
        d = state + std * rng.standard_normal(grid.n_cells) if noise_var > 0 else state.copy()
        if clamp:
            d = np.clip(d, 0.0, 1.0)
        fields.append(ScalarField.from_vector(grid, d))
    return ObservationSeries(tuple(days), fields)
