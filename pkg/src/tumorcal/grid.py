"""Masked 2D structured grid, cell-centred fields, region labels and the
plain-text file formats used for every spatial array.

Arrays are stored ``(ny, nx)`` so that ``values[j, i]`` is cell ``(i, j)`` and
the flat row-major index is ``j * nx + i``.  Numerical code works on the
*compressed* vector of brain cells (``grid.compress`` / ``grid.expand``).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import (
    DimensionMismatch,
    DisconnectedMask,
    EmptyMask,
    FormatError,
    GridMismatch,
    NotAPartition,
    UnknownLabelValue,
)


class Region(enum.IntEnum):
    OUTSIDE = 0
    GM = 1
    WM = 2
    INTERFACE = 3


class FaceSet(NamedTuple):
    """Interior faces between two brain cells ``a`` and ``b`` (compressed
    indices).  ``inv_h2`` is 1/hx**2 for x-faces and 1/hy**2 for y-faces."""

    a: np.ndarray
    b: np.ndarray
    inv_h2: np.ndarray


class BoundaryFaceSet(NamedTuple):
    """Faces of brain cells that touch the mask edge or the array border.
    ``inv_h`` is 1/hx for x-faces, 1/hy for y-faces, so that the face length
    equals ``cell_area * inv_h``."""

    cell: np.ndarray
    inv_h: np.ndarray


@dataclass(frozen=True, eq=False)
class Grid:
    nx: int
    ny: int
    hx: float
    hy: float
    brain_mask: np.ndarray

    def __eq__(self, other):
        if self is other:
            return True
        if not isinstance(other, Grid):
            return NotImplemented
        return (
            self.nx == other.nx
            and self.ny == other.ny
            and self.hx == other.hx
            and self.hy == other.hy
            and np.array_equal(self.brain_mask, other.brain_mask)
        )

    def __hash__(self):
        return hash((self.nx, self.ny, self.hx, self.hy, self.brain_mask.tobytes()))

    def __repr__(self):
        return (
            f"Grid(nx={self.nx}, ny={self.ny}, hx={self.hx}, hy={self.hy}, "
            f"n_cells={self.n_cells})"
        )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def cell_area(self) -> float:
        return self.hx * self.hy

    @cached_property
    def n_cells(self) -> int:
        return int(self.brain_mask.sum())

    @cached_property
    def index_map(self) -> np.ndarray:
        """(ny, nx) int array: compressed index of each brain cell, -1 outside."""
        idx = np.full(self.shape, -1, dtype=np.int64)
        idx[self.brain_mask] = np.arange(self.n_cells)
        return idx

    @cached_property
    def cell_centers(self) -> np.ndarray:
        """(n_cells, 2) array of (x, y) centre coordinates in mm."""
        jj, ii = np.nonzero(self.brain_mask)
        return np.column_stack([(ii + 0.5) * self.hx, (jj + 0.5) * self.hy])

    def compress(self, arr: np.ndarray) -> np.ndarray:
        arr = np.asarray(arr)
        if arr.shape != self.shape:
            raise DimensionMismatch(f"array shape {arr.shape} != grid shape {self.shape}")
        return arr[self.brain_mask]

    def expand(self, vec: np.ndarray, fill=0.0) -> np.ndarray:
        vec = np.asarray(vec)
        if vec.shape != (self.n_cells,):
            raise DimensionMismatch(f"vector length {vec.shape} != n_cells {self.n_cells}")
        out = np.full(self.shape, fill, dtype=vec.dtype)
        out[self.brain_mask] = vec
        return out

    @cached_property
    def faces(self) -> FaceSet:
        idx = self.index_map
        ax = idx[:, :-1].ravel(), idx[:, 1:].ravel()
        ay = idx[:-1, :].ravel(), idx[1:, :].ravel()
        keep_x = (ax[0] >= 0) & (ax[1] >= 0)
        keep_y = (ay[0] >= 0) & (ay[1] >= 0)
        a = np.concatenate([ax[0][keep_x], ay[0][keep_y]])
        b = np.concatenate([ax[1][keep_x], ay[1][keep_y]])
        inv_h2 = np.concatenate(
            [np.full(keep_x.sum(), 1.0 / self.hx**2), np.full(keep_y.sum(), 1.0 / self.hy**2)]
        )
        return FaceSet(a, b, inv_h2)

    @cached_property
    def boundary_faces(self) -> BoundaryFaceSet:
        padded = np.pad(self.brain_mask, 1, constant_values=False)
        inner = padded[1:-1, 1:-1]
        cells, inv_h = [], []
        for shift, ih in (
            ((0, -1), 1.0 / self.hx),
            ((0, 1), 1.0 / self.hx),
            ((-1, 0), 1.0 / self.hy),
            ((1, 0), 1.0 / self.hy),
        ):
            dj, di = shift
            nb = padded[1 + dj : 1 + dj + self.ny, 1 + di : 1 + di + self.nx]
            hit = inner & ~nb
            cells.append(self.index_map[hit])
            inv_h.append(np.full(hit.sum(), ih))
        cell = np.concatenate(cells)
        order = np.argsort(cell, kind="stable")
        return BoundaryFaceSet(cell[order], np.concatenate(inv_h)[order])


def build_grid(nx: int, ny: int, hx: float, hy: float, brain_mask=None) -> Grid:
    """Validate inputs and return a :class:`Grid`.

    ``brain_mask`` is a boolean ``(ny, nx)`` array (``None`` means all cells).
    The brain must be a single 4-connected component.
    """
    nx, ny = int(nx), int(ny)
    if nx < 4 or ny < 4:
        raise DimensionMismatch(f"grid must be at least 4x4, got nx={nx}, ny={ny}")
    if not (hx > 0 and hy > 0 and np.isfinite(hx) and np.isfinite(hy)):
        raise DimensionMismatch(f"cell sizes must be positive, got hx={hx}, hy={hy}")
    if brain_mask is None:
        brain_mask = np.ones((ny, nx), dtype=bool)
    mask = np.array(brain_mask, dtype=bool)
    if mask.shape != (ny, nx):
        raise DimensionMismatch(f"mask shape {mask.shape} != (ny, nx) = {(ny, nx)}")
    if not mask.any():
        raise EmptyMask("brain mask has no cells")
    _, n_comp = ndimage.label(mask)
    if n_comp != 1:
        raise DisconnectedMask(f"brain mask has {n_comp} 4-connected components")
    mask.setflags(write=False)
    return Grid(nx, ny, float(hx), float(hy), mask)


def check_same_grid(expected: Grid, *items) -> None:
    for item in items:
        g = getattr(item, "grid", item)
        if g != expected:
            raise GridMismatch(f"object on {g!r} used in context of {expected!r}")


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Cell-centred real field; values outside the brain are stored as 0."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.shape != self.grid.shape:
            raise DimensionMismatch(f"field shape {vals.shape} != grid shape {self.grid.shape}")
        vals[~self.grid.brain_mask] = 0.0
        if not np.all(np.isfinite(vals[self.grid.brain_mask])):
            raise ValueError("field has non-finite values on brain cells")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_vector(cls, grid: Grid, vec) -> "ScalarField":
        return cls(grid, grid.expand(np.asarray(vec, dtype=float)))

    @classmethod
    def constant(cls, grid: Grid, value: float) -> "ScalarField":
        return cls(grid, np.full(grid.shape, float(value)))

    @property
    def vector(self) -> np.ndarray:
        return self.values[self.grid.brain_mask]


@dataclass(frozen=True, eq=False)
class BinaryMask:
    grid: Grid
    mask: np.ndarray

    def __post_init__(self):
        m = np.array(self.mask, dtype=bool)
        if m.shape != self.grid.shape:
            raise DimensionMismatch(f"mask shape {m.shape} != grid shape {self.grid.shape}")
        m &= self.grid.brain_mask
        m.setflags(write=False)
        object.__setattr__(self, "mask", m)

    @property
    def count(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True, eq=False)
class RegionLabels:
    grid: Grid
    labels: np.ndarray

    def __post_init__(self):
        lab = np.array(self.labels, dtype=np.int8)
        if lab.shape != self.grid.shape:
            raise DimensionMismatch(f"labels shape {lab.shape} != grid shape {self.grid.shape}")
        bad = set(np.unique(lab).tolist()) - {int(r) for r in Region}
        if bad:
            raise UnknownLabelValue(f"unknown label values {sorted(bad)}")
        brain = self.grid.brain_mask
        if np.any(lab[~brain] != Region.OUTSIDE) or np.any(lab[brain] == Region.OUTSIDE):
            raise NotAPartition("OUTSIDE label must coincide with the complement of the brain mask")
        lab.setflags(write=False)
        object.__setattr__(self, "labels", lab)

    def __eq__(self, other):
        if not isinstance(other, RegionLabels):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.labels, other.labels)

    __hash__ = None

    @property
    def vector(self) -> np.ndarray:
        return self.labels[self.grid.brain_mask]

    def mask_of(self, region: Region) -> BinaryMask:
        return BinaryMask(self.grid, self.labels == region)


def region_labels_from_masks(
    grid: Grid, gm: BinaryMask, wm: BinaryMask, band_halfwidth: float = 0.6
) -> RegionLabels:
    """Label GM/WM cells and carve an INTERFACE band around every GM/WM seam.

    A brain cell is INTERFACE when its centre lies within ``band_halfwidth``
    (mm, inclusive) of the midpoint of some 4-adjacent GM/WM cell pair.
    """
    check_same_grid(grid, gm, wm)
    g, w = gm.mask, wm.mask
    if np.any(g & w) or not np.array_equal(g | w, grid.brain_mask):
        raise NotAPartition("gm and wm must be disjoint and cover the brain mask")
    labels = np.zeros(grid.shape, dtype=np.int8)
    labels[g] = Region.GM
    labels[w] = Region.WM
    if band_halfwidth > 0:
        mids = seam_midpoints(grid, labels)
        if len(mids):
            tree = cKDTree(mids)
            dist, _ = tree.query(grid.cell_centers, k=1)
            band = dist <= band_halfwidth * (1 + 1e-12)
            flat = grid.expand(band.astype(np.int8)).astype(bool)
            labels[flat] = Region.INTERFACE
    return RegionLabels(grid, labels)


def seam_midpoints(grid: Grid, labels: np.ndarray) -> np.ndarray:
    """Midpoints (mm) between centres of 4-adjacent GM/WM cell pairs."""
    pts = []
    lx0, lx1 = labels[:, :-1], labels[:, 1:]
    hit = ((lx0 == Region.GM) & (lx1 == Region.WM)) | ((lx0 == Region.WM) & (lx1 == Region.GM))
    jj, ii = np.nonzero(hit)
    pts.append(np.column_stack([(ii + 1.0) * grid.hx, (jj + 0.5) * grid.hy]))
    ly0, ly1 = labels[:-1, :], labels[1:, :]
    hit = ((ly0 == Region.GM) & (ly1 == Region.WM)) | ((ly0 == Region.WM) & (ly1 == Region.GM))
    jj, ii = np.nonzero(hit)
    pts.append(np.column_stack([(ii + 0.5) * grid.hx, (jj + 1.0) * grid.hy]))
    return np.concatenate(pts)


# ---------------------------------------------------------------------------
# file formats

_KINDS = {"SFIELD", "MASK", "LABELS"}


def _fmt_float(x: float) -> str:
    return format(float(x), ".17g")


def write_array(path, kind: str, arr: np.ndarray, hx: float, hy: float) -> None:
    """Write a ``(ny, nx)`` array in the SFIELD/MASK/LABELS text layout."""
    if kind not in _KINDS:
        raise ValueError(f"unknown file kind {kind}")
    arr = np.asarray(arr)
    ny, nx = arr.shape
    lines = [f"{kind} 1", f"nx {nx} ny {ny}", f"hx {_fmt_float(hx)} hy {_fmt_float(hy)}"]
    if kind == "SFIELD":
        for row in arr:
            lines.append(" ".join(_fmt_float(v) for v in row))
    else:
        for row in arr.astype(np.int64):
            lines.append(" ".join(str(int(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_array(path, kind: str | None = None):
    """Parse a SFIELD/MASK/LABELS file.

    Returns ``(kind, array, hx, hy)``; raises :class:`FormatError` with the
    offending line number on malformed content.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FormatError(f"cannot read file: {exc}", path) from exc
    lines = text.splitlines()
    if len(lines) < 3:
        raise FormatError("file shorter than the 3-line header", path, len(lines) + 1)
    head = lines[0].split()
    if len(head) != 2 or head[0] not in _KINDS or head[1] != "1":
        raise FormatError(f"bad magic line {lines[0]!r}", path, 1)
    file_kind = head[0]
    if kind is not None and file_kind != kind:
        raise FormatError(f"expected {kind} file, found {file_kind}", path, 1)
    tok = lines[1].split()
    try:
        if len(tok) != 4 or tok[0] != "nx" or tok[2] != "ny":
            raise ValueError
        nx, ny = int(tok[1]), int(tok[3])
        if nx < 1 or ny < 1:
            raise ValueError
    except ValueError:
        raise FormatError(f"bad dimension line {lines[1]!r}", path, 2) from None
    tok = lines[2].split()
    try:
        if len(tok) != 4 or tok[0] != "hx" or tok[2] != "hy":
            raise ValueError
        hx, hy = float(tok[1]), float(tok[3])
    except ValueError:
        raise FormatError(f"bad spacing line {lines[2]!r}", path, 3) from None
    body = lines[3:]
    while body and not body[-1].strip():
        body.pop()
    if len(body) != ny:
        raise FormatError(f"expected {ny} data rows, found {len(body)}", path, 3 + len(body))
    dtype = float if file_kind == "SFIELD" else np.int64
    arr = np.empty((ny, nx), dtype=dtype)
    for j, line in enumerate(body):
        tok = line.split()
        if len(tok) != nx:
            raise FormatError(f"expected {nx} values, found {len(tok)}", path, 4 + j)
        try:
            arr[j] = [dtype(t) for t in tok]
        except ValueError:
            raise FormatError("non-numeric value", path, 4 + j) from None
    if file_kind == "MASK" and not np.isin(arr, (0, 1)).all():
        raise FormatError("MASK values must be 0 or 1", path)
    return file_kind, arr, hx, hy


def _check_header(grid: Grid, arr, hx, hy, path):
    if arr.shape != grid.shape or hx != grid.hx or hy != grid.hy:
        raise GridMismatch(
            f"{path}: file grid nx={arr.shape[1]} ny={arr.shape[0]} hx={hx} hy={hy} "
            f"does not match {grid!r}"
        )


def write_scalar_field(field: ScalarField, path) -> None:
    g = field.grid
    write_array(path, "SFIELD", field.values, g.hx, g.hy)


def read_scalar_field(path, grid: Grid) -> ScalarField:
    _, arr, hx, hy = read_array(path, "SFIELD")
    _check_header(grid, arr, hx, hy, path)
    if not np.all(np.isfinite(arr[grid.brain_mask])):
        raise FormatError("non-finite values on brain cells", path)
    return ScalarField(grid, arr)


def write_mask(grid: Grid, path) -> None:
    write_array(path, "MASK", grid.brain_mask.astype(np.int64), grid.hx, grid.hy)


def read_grid(path) -> Grid:
    """Build a grid from a MASK file."""
    _, arr, hx, hy = read_array(path, "MASK")
    return build_grid(arr.shape[1], arr.shape[0], hx, hy, arr.astype(bool))


def write_binary_mask(mask: BinaryMask, path) -> None:
    g = mask.grid
    write_array(path, "MASK", mask.mask.astype(np.int64), g.hx, g.hy)


def read_binary_mask(path, grid: Grid) -> BinaryMask:
    _, arr, hx, hy = read_array(path, "MASK")
    _check_header(grid, arr, hx, hy, path)
    return BinaryMask(grid, arr.astype(bool))


def write_labels(labels: RegionLabels, path) -> None:
    g = labels.grid
    write_array(path, "LABELS", labels.labels, g.hx, g.hy)


def read_labels(path, grid: Grid) -> RegionLabels:
    _, arr, hx, hy = read_array(path, "LABELS")
    _check_header(grid, arr, hx, hy, path)
    return RegionLabels(grid, arr)
