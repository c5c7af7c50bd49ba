"""Region-wise Matérn (nu = 1) Gaussian prior through the SPDE

    A theta = -div(gamma grad theta) + delta theta   in the brain,
    gamma d theta/dn + beta theta = 0                on the brain edge,

with covariance A^-2.  Cell-centred finite volumes give the symmetric
"stiffness" ``K`` (so ``A = K / area``, lumped mass ``M = area * I``):

    sample      theta = mean + A^-1 w,  w_i ~ N(0, 1/area)
    covariance  Gamma = K^-1 M K^-1
    precision   Gamma^-1 = K M^-1 K
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu
from scipy.spatial import cKDTree

from .errors import MissingRegionHyper, NonpositiveHyper, SolveFailure, ValidationError
from .grid import Grid, Region, RegionLabels, ScalarField, check_same_grid

ROBIN_DIVISOR = 1.42


@dataclass(frozen=True)
class FieldHyper:
    """Prior hyperparameters of one log-parameter field.

    ``rho_int`` is the correlation length on INTERFACE cells; ``None`` means
    interface cells are treated like their surroundings (no decorrelation
    band), which is what the homogeneous-prior baseline uses.
    """

    mean_gm: float
    mean_wm: float
    var_gm: float
    var_wm: float
    rho_gm: float
    rho_wm: float
    rho_int: float | None = None

    def __post_init__(self):
        for name in ("var_gm", "var_wm", "rho_gm", "rho_wm"):
            v = getattr(self, name)
            if v is None:
                raise MissingRegionHyper(f"hyperparameter {name} missing")
            if not v > 0:
                raise NonpositiveHyper(f"{name} must be positive, got {v}")
        if self.rho_int is not None:
            if not self.rho_int > 0:
                raise NonpositiveHyper(f"rho_int must be positive, got {self.rho_int}")
            if self.rho_int > min(self.rho_gm, self.rho_wm):
                raise ValidationError("rho_int must not exceed min(rho_gm, rho_wm)")

    @classmethod
    def from_dict(cls, d: dict) -> "FieldHyper":
        missing = [k for k in ("mean_gm", "mean_wm", "var_gm", "var_wm", "rho_gm", "rho_wm") if k not in d]
        if missing:
            raise MissingRegionHyper(f"missing hyperparameters {missing}")
        return cls(**{k: d.get(k) for k in cls.__dataclass_fields__ if k in d})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class RegionHyper:
    logD: FieldHyper
    logG: FieldHyper

    @classmethod
    def defaults(cls) -> "RegionHyper":
        """Estimated hyperparameters for Wistar rats (rho in mm)."""
        return cls(
            logD=FieldHyper(-0.9937, -0.3006, 0.2336, 0.2336, 6.0, 12.0, 0.6),
            logG=FieldHyper(-0.7800, -0.8419, 0.0682, 0.0682, 6.0, 12.0, 0.6),
        )

    def with_rho(self, rho_gm: float, rho_wm: float) -> "RegionHyper":
        return RegionHyper(
            replace(self.logD, rho_gm=rho_gm, rho_wm=rho_wm),
            replace(self.logG, rho_gm=rho_gm, rho_wm=rho_wm),
        )

    @classmethod
    def from_dict(cls, d: dict) -> "RegionHyper":
        return cls(FieldHyper.from_dict(d["logD"]), FieldHyper.from_dict(d["logG"]))

    def to_dict(self) -> dict:
        return {"logD": self.logD.to_dict(), "logG": self.logG.to_dict()}


def hyper_to_coeffs(sigma, rho):
    """SPDE coefficients (delta, gamma, beta) for marginal std ``sigma`` and
    correlation length ``rho``; works elementwise on arrays."""
    sigma = np.asarray(sigma, dtype=float)
    rho = np.asarray(rho, dtype=float)
    if np.any(~(sigma > 0)) or np.any(~(rho > 0)):
        raise NonpositiveHyper("sigma and rho must be positive")
    delta = math.sqrt(2.0) / (sigma * rho * math.sqrt(math.pi))
    gamma = rho / (4.0 * sigma * math.sqrt(2.0 * math.pi))
    beta = np.sqrt(delta * gamma) / ROBIN_DIVISOR
    if delta.ndim == 0:
        return float(delta), float(gamma), float(beta)
    return delta, gamma, beta


def matern_correlation(r, rho):
    """Matérn nu = 1 correlation ``kr K1(kr)`` with ``k = sqrt(8)/rho``."""
    from scipy.special import k1

    r = np.asarray(r, dtype=float)
    kr = math.sqrt(8.0) / rho * r
    out = np.ones_like(kr)
    nz = kr > 0
    out[nz] = kr[nz] * k1(kr[nz])
    return out


def _interface_weights(grid: Grid, labels: RegionLabels) -> np.ndarray:
    """Weight of GM (vs WM) for each cell; 1 on GM, 0 on WM, inverse-distance
    blend on INTERFACE cells."""
    lab = labels.vector
    w = np.where(lab == Region.GM, 1.0, 0.0)
    inter = lab == Region.INTERFACE
    if not inter.any():
        return w
    pts = grid.cell_centers
    gm_pts, wm_pts = pts[lab == Region.GM], pts[lab == Region.WM]
    if len(gm_pts) == 0 and len(wm_pts) == 0:
        w[inter] = 0.5
    elif len(wm_pts) == 0:
        w[inter] = 1.0
    elif len(gm_pts) == 0:
        w[inter] = 0.0
    else:
        d_gm, _ = cKDTree(gm_pts).query(pts[inter])
        d_wm, _ = cKDTree(wm_pts).query(pts[inter])
        w[inter] = d_wm / (d_gm + d_wm)
    return w


def region_fields(grid: Grid, labels: RegionLabels, fh: FieldHyper):
    """Per-cell (mean, sigma, rho) compressed vectors."""
    check_same_grid(grid, labels)
    w = _interface_weights(grid, labels)
    mean = w * fh.mean_gm + (1 - w) * fh.mean_wm
    var = w * fh.var_gm + (1 - w) * fh.var_wm
    rho = w * fh.rho_gm + (1 - w) * fh.rho_wm
    if fh.rho_int is not None:
        rho = np.where(labels.vector == Region.INTERFACE, fh.rho_int, rho)
    return mean, np.sqrt(var), rho


class SpdeOperator:
    """Assembled SPDE operator with a cached sparse factorization of K."""

    def __init__(self, grid: Grid, delta, gamma, beta, robin: bool = True):
        self.grid = grid
        self.delta = np.asarray(delta, float)
        self.gamma = np.asarray(gamma, float)
        self.beta = np.asarray(beta, float) if robin else np.zeros(grid.n_cells)
        self.area = grid.cell_area
        n = grid.n_cells
        f = grid.faces
        ga, gb = self.gamma[f.a], self.gamma[f.b]
        w = self.area * (2.0 * ga * gb / (ga + gb)) * f.inv_h2
        bf = grid.boundary_faces
        robin_diag = np.bincount(bf.cell, self.area * self.beta[bf.cell] * bf.inv_h, minlength=n)
        diag = (
            self.area * self.delta
            + np.bincount(f.a, w, minlength=n)
            + np.bincount(f.b, w, minlength=n)
            + robin_diag
        )
        self.K = sp.csc_matrix(
            (
                np.concatenate([-w, -w, diag]),
                (np.concatenate([f.a, f.b, np.arange(n)]), np.concatenate([f.b, f.a, np.arange(n)])),
            ),
            shape=(n, n),
        )
        try:
            self._lu = splu(self.K)
        except RuntimeError as exc:
            raise SolveFailure(f"SPDE operator factorization failed: {exc}") from exc

    @property
    def n(self) -> int:
        return self.grid.n_cells

    def apply(self, v):
        """Strong-form action A v = K v / area."""
        return (self.K @ v) / self.area

    def solve(self, w):
        """A^-1 w."""
        return self._solve_K(self.area * np.asarray(w, float))

    def _solve_K(self, rhs):
        x = self._lu.solve(np.ascontiguousarray(rhs))
        if not np.all(np.isfinite(x)):
            raise SolveFailure("non-finite SPDE solve")
        return x

    def precision(self, v):
        """Gamma_pr^-1 v = K M^-1 K v."""
        return (self.K @ (self.K @ v)) / self.area

    def covariance(self, v):
        """Gamma_pr v = K^-1 M K^-1 v."""
        return self.area * self._solve_K(self._solve_K(v))

    def sqrt_covariance(self, xi):
        """Map standard normal vectors to prior fluctuations: K^-1 M^1/2 xi."""
        return self._solve_K(math.sqrt(self.area) * np.asarray(xi, float))

    def fluctuations(self, rng: np.random.Generator, k: int | None = None):
        shape = (self.n,) if k is None else (self.n, k)
        return self.sqrt_covariance(rng.standard_normal(shape))

    def dense_covariance(self) -> np.ndarray:
        Kinv = self._lu.solve(np.eye(self.n))
        return self.area * Kinv @ Kinv.T

    def exact_variance(self) -> np.ndarray:
        Kinv = self._lu.solve(np.eye(self.n))
        return self.area * np.einsum("ij,ij->i", Kinv, Kinv)


def assemble_spde_operator(
    grid: Grid, labels: RegionLabels, hyper, param: str | None = None, robin: bool = True
) -> SpdeOperator:
    """Assemble the operator for one field.  ``hyper`` is a
    :class:`FieldHyper`, or a :class:`RegionHyper` together with ``param``
    in {"logD", "logG"}."""
    if isinstance(hyper, RegionHyper):
        if param not in ("logD", "logG"):
            raise MissingRegionHyper(f"param must be 'logD' or 'logG', got {param!r}")
        hyper = getattr(hyper, param)
    _, sigma, rho = region_fields(grid, labels, hyper)
    delta, gamma, beta = hyper_to_coeffs(sigma, rho)
    return SpdeOperator(grid, delta, gamma, beta, robin=robin)


def _vec(op: SpdeOperator, f):
    if isinstance(f, ScalarField):
        check_same_grid(op.grid, f)
        return f.vector
    return np.asarray(f, float)


def prior_sample(op: SpdeOperator, mean: ScalarField, seed) -> ScalarField:
    rng = np.random.default_rng(seed)
    return ScalarField.from_vector(op.grid, _vec(op, mean) + op.fluctuations(rng))


def apply_precision(op: SpdeOperator, mean: ScalarField, theta: ScalarField) -> ScalarField:
    """Gamma_pr^-1 (theta - mean)."""
    return ScalarField.from_vector(op.grid, op.precision(_vec(op, theta) - _vec(op, mean)))


def prior_cost(op: SpdeOperator, mean: ScalarField, theta: ScalarField) -> float:
    r = _vec(op, theta) - _vec(op, mean)
    return 0.5 * float(r @ op.precision(r))


def prior_grad(op: SpdeOperator, mean: ScalarField, theta: ScalarField) -> ScalarField:
    return apply_precision(op, mean, theta)


def pointwise_marginal_variance(op: SpdeOperator, n_samples: int, seed, batch: int = 500) -> ScalarField:
    """Monte Carlo estimate of the per-cell prior variance."""
    if n_samples < 100:
        raise ValidationError("n_samples must be at least 100")
    rng = np.random.default_rng(seed)
    acc = np.zeros(op.n)
    done = 0
    while done < n_samples:
        k = min(batch, n_samples - done)
        s = op.fluctuations(rng, k)
        acc += np.einsum("ij,ij->i", s, s)
        done += k
    return ScalarField.from_vector(op.grid, acc / n_samples)


def exact_marginal_variance(op: SpdeOperator) -> ScalarField:
    """Dense diagonal of Gamma_pr; intended for grids up to a few thousand cells."""
    return ScalarField.from_vector(op.grid, op.exact_variance())


class PriorPair:
    """Independent priors on log D and log G acting on stacked vectors
    ``theta = [logD; logG]`` (length 2N, or 2N x k blocks)."""

    def __init__(self, opD: SpdeOperator, meanD: ScalarField, opG: SpdeOperator, meanG: ScalarField):
        check_same_grid(opD.grid, opG, meanD, meanG)
        self.grid = opD.grid
        self.opD, self.opG = opD, opG
        self.meanD, self.meanG = meanD, meanG
        self.mean = np.concatenate([meanD.vector, meanG.vector])
        self.n = self.grid.n_cells

    @property
    def dim(self) -> int:
        return 2 * self.n

    def _blockwise(self, fD, fG, v):
        v = np.asarray(v, float)
        return np.concatenate([fD(v[: self.n]), fG(v[self.n :])], axis=0)

    def precision(self, v):
        return self._blockwise(self.opD.precision, self.opG.precision, v)

    def covariance(self, v):
        return self._blockwise(self.opD.covariance, self.opG.covariance, v)

    def fluctuations(self, rng: np.random.Generator, k: int | None = None):
        return np.concatenate([self.opD.fluctuations(rng, k), self.opG.fluctuations(rng, k)], axis=0)

    def cost(self, theta: np.ndarray) -> float:
        r = theta - self.mean
        return 0.5 * float(r @ self.precision(r))

    def grad(self, theta: np.ndarray) -> np.ndarray:
        return self.precision(theta - self.mean)

    def dense_covariance(self) -> np.ndarray:
        n = self.n
        C = np.zeros((2 * n, 2 * n))
        C[:n, :n] = self.opD.dense_covariance()
        C[n:, n:] = self.opG.dense_covariance()
        return C

    def dense_precision(self) -> np.ndarray:
        return self.precision(np.eye(self.dim))

    def exact_variance(self) -> np.ndarray:
        return np.concatenate([self.opD.exact_variance(), self.opG.exact_variance()])


def build_prior(grid: Grid, labels: RegionLabels, hyper: RegionHyper, robin: bool = True) -> PriorPair:
    ops, means = [], []
    for name in ("logD", "logG"):
        fh = getattr(hyper, name)
        mean, _, _ = region_fields(grid, labels, fh)
        ops.append(assemble_spde_operator(grid, labels, fh, robin=robin))
        means.append(ScalarField.from_vector(grid, mean))
    return PriorPair(ops[0], means[0], ops[1], means[1])
