"""Shape and volume metrics for tumour fields and masks."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import gaussian_kde

from .errors import DegenerateData, EmptyBrain, EmptyReference, ValidationError
from .grid import BinaryMask, Grid, ScalarField, check_same_grid

DEFAULT_CUTOFF = 0.5


def tumor_indicator(u: ScalarField, cutoff: float = DEFAULT_CUTOFF) -> BinaryMask:
    """Brain cells with ``u >= cutoff``."""
    if not 0 < cutoff < 1:
        raise ValidationError(f"cutoff must lie in (0, 1), got {cutoff}")
    return BinaryMask(u.grid, u.values >= cutoff)


def dice(a: BinaryMask, b: BinaryMask) -> float:
    check_same_grid(a.grid, b)
    na, nb = a.count, b.count
    if na + nb == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a.mask & b.mask)) / (na + nb)


def _brain_count(brain) -> int:
    n = brain.count if isinstance(brain, BinaryMask) else int(brain.brain_mask.sum())
    if n == 0:
        raise EmptyBrain("brain mask is empty")
    return n


def nta(mask: BinaryMask, brain) -> float:
    """Tumour area over brain area; ``brain`` is a mask or a grid."""
    if isinstance(brain, BinaryMask):
        check_same_grid(mask.grid, brain)
    return mask.count / _brain_count(brain)


def nta_indicator_error(model: BinaryMask, data: BinaryMask, brain) -> float:
    """Area of the symmetric difference over brain area."""
    check_same_grid(model.grid, data)
    return int(np.count_nonzero(model.mask ^ data.mask)) / _brain_count(brain)


def relative_nta_gap(model: BinaryMask, data: BinaryMask, brain) -> float:
    """``|nta_model - nta_data| / nta_data``; infinite when the data mask is
    empty and the model mask is not, zero when both are empty."""
    nm, nd = nta(model, brain), nta(data, brain)
    if nd == 0:
        return 0.0 if nm == 0 else math.inf
    return abs(nm - nd) / nd


# ---------------------------------------------------------------------------
# contours


@dataclass(frozen=True)
class Boundary:
    """Closed polylines in mm; the last vertex connects back to the first."""

    polylines: tuple = ()

    def __post_init__(self):
        lines = []
        for p in self.polylines:
            p = np.asarray(p, float).reshape(-1, 2)
            if len(p) < 3:
                raise ValidationError("a closed polyline needs at least 3 vertices")
            lines.append(p)
        object.__setattr__(self, "polylines", tuple(lines))

    def __len__(self):
        return len(self.polylines)

    @property
    def is_empty(self) -> bool:
        return not self.polylines

    @property
    def vertices(self) -> np.ndarray:
        if self.is_empty:
            return np.zeros((0, 2))
        return np.vstack(self.polylines)

    def segments(self):
        """(start, end) arrays of every edge, closing edges included."""
        if self.is_empty:
            return np.zeros((0, 2)), np.zeros((0, 2))
        a = np.vstack(self.polylines)
        b = np.vstack([np.roll(p, -1, axis=0) for p in self.polylines])
        return a, b

    def lengths(self) -> list:
        return [float(np.sum(np.hypot(*(np.roll(p, -1, axis=0) - p).T))) for p in self.polylines]

    @property
    def length(self) -> float:
        return float(sum(self.lengths()))


# edges of a square with corners 0:(j,i) 1:(j,i+1) 2:(j+1,i+1) 3:(j+1,i):
# 0 bottom (0-1), 1 right (1-2), 2 top (3-2), 3 left (0-3)
_SEGMENTS = {
    1: ((3, 0),),
    2: ((0, 1),),
    3: ((3, 1),),
    4: ((1, 2),),
    6: ((0, 2),),
    7: ((3, 2),),
    8: ((2, 3),),
    9: ((2, 0),),
    11: ((2, 1),),
    12: ((1, 3),),
    13: ((1, 0),),
    14: ((0, 3),),
}
# saddles: corners 0 and 2 inside (5) or 1 and 3 inside (10).  When the
# centre is inside, the two inside corners are joined through the middle.
_SADDLE = {
    (5, False): ((3, 0), (1, 2)),
    (5, True): ((3, 2), (1, 0)),
    (10, False): ((0, 1), (2, 3)),
    (10, True): ((0, 3), (2, 1)),
}


def extract_boundary(u: ScalarField, level: float = DEFAULT_CUTOFF) -> Boundary:
    """Marching-squares iso-contour of ``u`` at ``level`` on cell centres.

    Cells outside the brain count as 0 and the image is zero-padded, so every
    contour closes.  Ties ``u == level`` count as inside, and saddle squares
    are resolved by comparing the mean of the four corners with ``level``.
    """
    if not 0 < level < 1:
        raise ValidationError(f"level must lie in (0, 1), got {level}")
    grid = u.grid
    v = np.pad(np.where(grid.brain_mask, u.values, 0.0), 1)
    inside = v >= level
    if not inside.any():
        return Boundary()
    ny, nx = v.shape
    c0, c1 = inside[:-1, :-1], inside[:-1, 1:]
    c2, c3 = inside[1:, 1:], inside[1:, :-1]
    case = c0 * 1 + c1 * 2 + c2 * 4 + c3 * 8

    def edge_key(j, i, e):
        # horizontal edges (j, i)-(j, i+1) are 2*(j*nx+i); vertical (j, i)-(j+1, i) are odd
        if e == 0:
            return 2 * (j * nx + i)
        if e == 2:
            return 2 * ((j + 1) * nx + i)
        if e == 3:
            return 2 * (j * nx + i) + 1
        return 2 * (j * nx + i + 1) + 1

    links: dict[int, list] = {}
    for j, i in zip(*np.nonzero((case > 0) & (case < 15))):
        k = int(case[j, i])
        if k in (5, 10):
            centre = 0.25 * (v[j, i] + v[j, i + 1] + v[j + 1, i + 1] + v[j + 1, i])
            segs = _SADDLE[(k, bool(centre >= level))]
        else:
            segs = _SEGMENTS[k]
        for ea, eb in segs:
            a, b = edge_key(j, i, ea), edge_key(j, i, eb)
            links.setdefault(a, []).append(b)
            links.setdefault(b, []).append(a)

    def point(key):
        vert = key & 1
        j, i = divmod(key >> 1, nx)
        j2, i2 = (j + 1, i) if vert else (j, i + 1)
        a, b = v[j, i], v[j2, i2]
        t = (level - a) / (b - a)
        # padded node p is the centre of cell p - 1, at (p - 0.5) h
        return ((i + t * (i2 - i) - 0.5) * grid.hx, (j + t * (j2 - j) - 0.5) * grid.hy)

    lines = []
    seen = set()
    for start in sorted(links):
        if start in seen:
            continue
        loop = [start]
        seen.add(start)
        prev, cur = None, start
        while True:
            nbrs = links[cur]
            nxt = nbrs[0] if nbrs[0] != prev or len(nbrs) == 1 else nbrs[1]
            if nxt == start or nxt in seen:
                break
            loop.append(nxt)
            seen.add(nxt)
            prev, cur = cur, nxt
        pts = np.array([point(k) for k in loop])
        keep = np.ones(len(pts), bool)
        keep[1:] = np.any(np.abs(np.diff(pts, axis=0)) > 1e-12, axis=1)
        pts = pts[keep]
        if len(pts) > 1 and np.allclose(pts[0], pts[-1], atol=1e-12, rtol=0):
            pts = pts[:-1]
        if len(pts) >= 3:
            lines.append(pts)
    return Boundary(tuple(lines))


def _point_segment_distance(p, a, b, chunk: int = 2048):
    """Distance from each point in ``p`` to the nearest segment ``a[k]-b[k]``."""
    d = b - a
    L2 = np.einsum("ij,ij->i", d, d)
    L2 = np.where(L2 > 0, L2, 1.0)
    out = np.empty(len(p))
    for s in range(0, len(p), chunk):
        q = p[s : s + chunk, None, :]
        t = np.clip(np.einsum("pkj,kj->pk", q - a, d) / L2, 0.0, 1.0)
        proj = a + t[..., None] * d
        out[s : s + chunk] = np.sqrt(np.min(np.sum((q - proj) ** 2, axis=-1), axis=1))
    return out


def boundary_margin(samples, reference: Boundary) -> float:
    """Mean vertex-to-reference distance (mm), averaged over the samples.

    Samples with an empty boundary are skipped; if every sample is empty the
    margin is infinite."""
    if reference.is_empty:
        raise EmptyReference("reference boundary is empty")
    a, b = reference.segments()
    per_sample = [
        float(np.mean(_point_segment_distance(s.vertices, a, b))) for s in samples if not s.is_empty
    ]
    return float(np.mean(per_sample)) if per_sample else math.inf


# ---------------------------------------------------------------------------
# summaries


def silverman_bandwidth(values) -> float:
    x = np.asarray(values, float)
    return 1.06 * float(np.std(x, ddof=1)) * len(x) ** -0.2


def kde(values, bandwidth: float | None = None, n_points: int = 1024):
    """Gaussian kernel density estimate on an even grid covering the data
    plus five bandwidths on each side.  Returns ``(x, density)``."""
    x = np.asarray(values, float).ravel()
    if len(x) < 2:
        raise ValidationError("kde needs at least two values")
    if not np.all(np.isfinite(x)):
        raise ValidationError("kde values must be finite")
    if np.ptp(x) == 0:
        raise DegenerateData(f"all {len(x)} values equal {x[0]!r}: the density is a point mass")
    h = silverman_bandwidth(x) if bandwidth is None else float(bandwidth)
    if not h > 0:
        raise ValidationError("bandwidth must be positive")
    est = gaussian_kde(x, bw_method=h / float(np.std(x, ddof=1)))
    grid = np.linspace(x.min() - 5 * h, x.max() + 5 * h, n_points)
    return grid, est(grid)


@dataclass
class MetricsReport:
    dice: float
    nta_model: float
    nta_data: float
    nta_error: float
    nta_relative_gap: float
    boundary_margin_mm: float | None = None
    ensemble: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.dice <= 1:
            raise ValidationError(f"dice out of range: {self.dice}")

    def to_dict(self) -> dict:
        d = asdict(self)
        # JSON has no infinity
        for k, v in list(d.items()):
            if isinstance(v, float) and not math.isfinite(v):
                d[k] = None if math.isnan(v) else "inf"
        return d


def _mean_std(x):
    x = np.asarray(x, float)
    return {"mean": float(np.mean(x)), "std": float(np.std(x, ddof=1)) if len(x) > 1 else 0.0}


def compare(
    model: ScalarField,
    data: ScalarField,
    cutoff: float = DEFAULT_CUTOFF,
    data_cutoff: float = DEFAULT_CUTOFF,
    samples=None,
) -> MetricsReport:
    """Metrics of a model field against a data field, optionally summarizing
    an ensemble of sample fields (Dice and NTA mean/std, boundary margin)."""
    check_same_grid(model.grid, data)
    grid: Grid = model.grid
    m = tumor_indicator(model, cutoff)
    d = tumor_indicator(data, data_cutoff)
    rep = MetricsReport(
        dice=dice(m, d),
        nta_model=nta(m, grid),
        nta_data=nta(d, grid),
        nta_error=nta_indicator_error(m, d, grid),
        nta_relative_gap=relative_nta_gap(m, d, grid),
    )
    if samples:
        masks = [tumor_indicator(s, cutoff) for s in samples]
        rep.ensemble = {
            "n_samples": len(masks),
            "dice": _mean_std([dice(s, d) for s in masks]),
            "nta": _mean_std([nta(s, grid) for s in masks]),
            "nta_error": _mean_std([nta_indicator_error(s, d, grid) for s in masks]),
        }
        ref = extract_boundary(data, data_cutoff)
        if not ref.is_empty:
            rep.boundary_margin_mm = boundary_margin([extract_boundary(s, cutoff) for s in samples], ref)
    return rep
