"""MAP estimation and Laplace posterior for the tumour-model parameters.

The negative log-posterior is

    J(theta) = 0.5 w sum_i ||u(t_i; theta) - d_i||_M^2 + 0.5 ||theta - mean||_{Gamma_pr^-1}^2

with ``w = 1/sigma^2`` (``2/sigma^2`` when the likelihood is taken without the
conventional 1/2).  The MAP point is found by inexact Newton-CG with
Gauss-Newton Hessian actions and Armijo backtracking; the posterior
covariance is the low-rank update

    Gamma_post ~= Gamma_pr - V diag(lam / (1 + lam)) V^T

from the dominant generalized eigenpairs of ``H v = lam Gamma_pr^-1 v``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import (
    LineSearchFailure,
    NonFiniteCost,
    NumericalError,
    RankDeficiency,
    ValidationError,
)
from .forward import (
    ParameterFields,
    SolverConfig,
    adjoint_vec,
    solve_forward,
    tangent_vec,
)
from .grid import Grid, ScalarField, check_same_grid
from .phantom import ObservationSeries
from .prior import PriorPair

log = logging.getLogger(__name__)


@dataclass(eq=False)
class MisfitContext:
    """Data term of the posterior: observations after the day of ``u0``."""

    grid: Grid
    observations: ObservationSeries
    u0: ScalarField
    noise_var: float
    cfg: SolverConfig = field(default_factory=SolverConfig)
    t0: float = 0.0
    # False reproduces the likelihood exponent without the 1/2 factor
    half: bool = True

    def __post_init__(self):
        if not self.noise_var > 0:
            raise ValidationError(f"noise variance must be positive, got {self.noise_var}")
        check_same_grid(self.grid, self.u0, *self.observations.fields)
        if any(d <= self.t0 for d in self.observations.days):
            raise ValidationError("observation days must come after the initial-condition day")

    @property
    def weight(self) -> float:
        return (1.0 if self.half else 2.0) / self.noise_var


class TumorMisfit:
    """Cost, adjoint gradient and Gauss-Newton Hessian action of the data
    misfit on stacked parameter vectors.  The last trajectory is cached."""

    def __init__(self, ctx: MisfitContext):
        self.ctx = ctx
        self.grid = ctx.grid
        self.days = (ctx.t0,) + tuple(ctx.observations.days)
        self.data = np.array([f.vector for f in ctx.observations.fields]).reshape(
            len(ctx.observations.days), ctx.grid.n_cells
        )
        self.weight = ctx.weight
        self._key = None
        self._traj = None

    @property
    def n_obs(self) -> int:
        return len(self.days) - 1

    def trajectory(self, theta: np.ndarray):
        key = theta.tobytes()
        if key != self._key:
            self._traj = solve_forward(self.grid, theta, self.ctx.u0, self.days, self.ctx.cfg)
            self._key = key
        return self._traj

    def residual(self, theta):
        return self.trajectory(theta).obs_states[1:] - self.data

    def cost(self, theta) -> float:
        if self.n_obs == 0:
            return 0.0
        r = self.residual(theta)
        return 0.5 * self.weight * self.grid.cell_area * float(np.sum(r * r))

    def cost_grad(self, theta):
        if self.n_obs == 0:
            return 0.0, np.zeros_like(theta)
        r = self.residual(theta)
        c = 0.5 * self.weight * self.grid.cell_area * float(np.sum(r * r))
        src = np.vstack([np.zeros((1, self.grid.n_cells)), self.weight * r])
        return c, adjoint_vec(self.trajectory(theta), src)

    def hessian_apply(self, theta, v):
        """Gauss-Newton Hessian action; ``v`` may be a vector or a column block."""
        v = np.asarray(v, float)
        if v.ndim == 2:
            return np.column_stack([self.hessian_apply(theta, c) for c in v.T]).reshape(v.shape)
        if self.n_obs == 0:
            return np.zeros_like(v)
        traj = self.trajectory(theta)
        return adjoint_vec(traj, self.weight * tangent_vec(traj, v))


class LinearGaussianMisfit:
    """Linear observation model ``d = F theta + noise`` with the same cell-area
    weighting as the tumour misfit; ``F=None`` observes theta itself."""

    def __init__(self, F, data, noise_var: float, area: float = 1.0):
        self.F = None if F is None else np.asarray(F, float)
        self.data = np.asarray(data, float)
        self.weight = 1.0 / noise_var
        self.area = area

    def _F(self, x):
        return x if self.F is None else self.F @ x

    def _FT(self, y):
        return y if self.F is None else self.F.T @ y

    def cost(self, theta) -> float:
        r = self._F(theta) - self.data
        return 0.5 * self.weight * self.area * float(r @ r)

    def cost_grad(self, theta):
        r = self._F(theta) - self.data
        return 0.5 * self.weight * self.area * float(r @ r), self.weight * self.area * self._FT(r)

    def hessian_apply(self, theta, v):
        return self.weight * self.area * self._FT(self._F(np.asarray(v, float)))

    def dense_hessian(self, dim: int) -> np.ndarray:
        F = np.eye(dim) if self.F is None else self.F
        return self.weight * self.area * F.T @ F


def _as_misfit(misfit):
    return TumorMisfit(misfit) if isinstance(misfit, MisfitContext) else misfit


def misfit_cost_grad(ctx: MisfitContext, theta: ParameterFields):
    check_same_grid(ctx.grid, theta)
    c, g = TumorMisfit(ctx).cost_grad(theta.vector)
    return c, ParameterFields.from_vector(ctx.grid, g)


def gn_hessian_apply(ctx: MisfitContext, theta: ParameterFields, v: ParameterFields) -> ParameterFields:
    check_same_grid(ctx.grid, theta, v)
    hv = TumorMisfit(ctx).hessian_apply(theta.vector, v.vector)
    return ParameterFields.from_vector(ctx.grid, hv)


# ---------------------------------------------------------------------------
# Newton-CG


@dataclass(frozen=True)
class NewtonConfig:
    max_iter: int = 40
    # relative reduction of the prior-weighted gradient norm sqrt(g' Gamma_pr g)
    rel_tol: float = 1e-6
    abs_tol: float = 1e-12
    cg_max_iter: int = 300
    # Eisenstat-Walker style forcing: eta = min(eta_max, (|g|/|g0|)^eta_power)
    eta_max: float = 0.5
    eta_power: float = 0.5
    c_armijo: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 15
    # stop when the Newton decrement -g'p falls below this
    gdp_tol: float = 1e-18

    def __post_init__(self):
        for name in ("rel_tol", "eta_max", "c_armijo", "backtrack"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValidationError(f"{name} must lie in (0, 1), got {v}")
        if self.max_iter < 0 or self.cg_max_iter < 1:
            raise ValidationError("iteration caps must be positive")


@dataclass
class ConvergenceReport:
    converged: bool = False
    reason: str = ""
    cost: list = field(default_factory=list)
    misfit: list = field(default_factory=list)
    regularization: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    cg_iterations: list = field(default_factory=list)
    step_length: list = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.cg_iterations)

    def to_dict(self) -> dict:
        return {
            "converged": self.converged,
            "reason": self.reason,
            "iterations": self.iterations,
            "cost": self.cost,
            "misfit": self.misfit,
            "regularization": self.regularization,
            "grad_norm": self.grad_norm,
            "cg_iterations": self.cg_iterations,
            "step_length": self.step_length,
        }


def pcg(apply_A, b, apply_P, rel_tol: float, max_iter: int):
    """Preconditioned CG from x = 0, stopped on ||r||_P <= rel_tol ||b||_P.
    Returns (x, iterations).  Stops at the first direction of non-positive
    curvature (returning the preconditioned residual if nothing was done)."""
    x = np.zeros_like(b)
    r = b.copy()
    z = apply_P(r)
    rz = float(r @ z)
    if rz <= 0:
        return x, 0
    tol2 = rel_tol * rel_tol * rz
    p = z.copy()
    for it in range(1, max_iter + 1):
        Ap = apply_A(p)
        pAp = float(p @ Ap)
        if pAp <= 0:
            return (z if it == 1 else x), it
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        z = apply_P(r)
        rz_new = float(r @ z)
        if rz_new <= tol2:
            return x, it
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, max_iter


def _safe_cost(misfit, prior, theta):
    try:
        c = misfit.cost(theta) + prior.cost(theta)
    except NumericalError as exc:
        log.debug("trial point rejected: %s", exc)
        return math.inf
    return c if np.isfinite(c) else math.inf


def compute_map(misfit, prior: PriorPair, cfg: NewtonConfig = NewtonConfig(), theta0=None):
    """Inexact Newton-CG for the MAP point.

    ``misfit`` is a :class:`MisfitContext` or any object with ``cost``,
    ``cost_grad`` and ``hessian_apply`` on stacked vectors.  Returns
    ``(ParameterFields, ConvergenceReport)``.
    """
    misfit = _as_misfit(misfit)
    if theta0 is None:
        theta = prior.mean.copy()
    elif isinstance(theta0, ParameterFields):
        check_same_grid(prior.grid, theta0)
        theta = theta0.vector.copy()
    else:
        theta = np.asarray(theta0, float).copy()

    rep = ConvergenceReport()
    mc, mg = misfit.cost_grad(theta)
    rc = prior.cost(theta)
    cost = mc + rc
    if not np.isfinite(cost):
        raise NonFiniteCost(f"non-finite cost {cost} at the initial point")
    g = mg + prior.grad(theta)
    gn = math.sqrt(max(float(g @ prior.covariance(g)), 0.0))
    gn0 = gn
    rep.cost.append(cost)
    rep.misfit.append(mc)
    rep.regularization.append(rc)
    rep.grad_norm.append(gn)
    log.info("newton it=0 cost=%.6e misfit=%.6e |g|=%.3e", cost, mc, gn)

    for it in range(1, cfg.max_iter + 1):
        if gn <= max(cfg.abs_tol, cfg.rel_tol * gn0):
            rep.converged, rep.reason = True, "gradient tolerance"
            break
        eta = min(cfg.eta_max, (gn / gn0) ** cfg.eta_power)
        th = theta

        def apply_H(v):
            return misfit.hessian_apply(th, v) + prior.precision(v)

        p, n_cg = pcg(apply_H, -g, prior.covariance, eta, cfg.cg_max_iter)
        gdp = float(g @ p)
        if gdp >= 0:
            p = -prior.covariance(g)
            gdp = float(g @ p)
        if -gdp <= cfg.gdp_tol:
            rep.converged, rep.reason = True, "Newton decrement below tolerance"
            rep.cg_iterations.append(n_cg)
            rep.step_length.append(0.0)
            break
        alpha = 1.0
        for _ in range(cfg.max_backtracks + 1):
            trial = theta + alpha * p
            c_trial = _safe_cost(misfit, prior, trial)
            if c_trial <= cost + cfg.c_armijo * alpha * gdp:
                break
            alpha *= cfg.backtrack
        else:
            raise LineSearchFailure(
                f"no sufficient decrease after {cfg.max_backtracks} backtracks at iteration {it}"
            )
        theta = trial
        mc, mg = misfit.cost_grad(theta)
        rc = prior.cost(theta)
        cost = mc + rc
        if not np.isfinite(cost):
            raise NonFiniteCost(f"non-finite cost at iteration {it}")
        g = mg + prior.grad(theta)
        gn = math.sqrt(max(float(g @ prior.covariance(g)), 0.0))
        rep.cost.append(cost)
        rep.misfit.append(mc)
        rep.regularization.append(rc)
        rep.grad_norm.append(gn)
        rep.cg_iterations.append(n_cg)
        rep.step_length.append(alpha)
        log.info(
            "newton it=%d cost=%.6e misfit=%.6e |g|=%.3e cg=%d alpha=%.3g",
            it, cost, mc, gn, n_cg, alpha,
        )
    else:
        if gn <= max(cfg.abs_tol, cfg.rel_tol * gn0):
            rep.converged, rep.reason = True, "gradient tolerance"
        else:
            rep.reason = "iteration cap"
    return ParameterFields.from_vector(prior.grid, theta), rep


# ---------------------------------------------------------------------------
# low-rank Laplace posterior


def _prior_orthonormalize(Y, prior: PriorPair):
    """Columns spanning range(Y), orthonormal in the Gamma_pr^-1 inner product."""
    Q, _ = np.linalg.qr(Y)
    for _ in range(2):
        Gm = Q.T @ prior.precision(Q)
        Gm = 0.5 * (Gm + Gm.T)
        try:
            L = np.linalg.cholesky(Gm)
        except np.linalg.LinAlgError:
            raise RankDeficiency("prior-orthonormalization collapsed (rank-deficient sample block)") from None
        Q = sla.solve_triangular(L, Q.T, lower=True).T
    return Q


def randomized_ghep(Happly, prior: PriorPair, r: int, oversample: int = 10, power_iters: int = 1, seed=0):
    """Dominant eigenpairs of ``H v = lam Gamma_pr^-1 v`` by a double-pass
    randomized method.

    Returns ``(lam, V)`` with ``lam`` descending and ``V^T Gamma_pr^-1 V = I``.
    ``Happly`` must accept a ``(dim, k)`` block.
    """
    dim = prior.dim
    if r < 0 or oversample < 0:
        raise ValidationError("rank and oversampling must be non-negative")
    if r == 0:
        return np.zeros(0), np.zeros((dim, 0))
    k = r + oversample
    if k > dim:
        raise ValidationError(f"r + oversample = {k} exceeds the number of unknowns {dim}")
    rng = np.random.default_rng(seed)
    Omega = rng.standard_normal((dim, k))
    Y = prior.covariance(Happly(Omega))
    for _ in range(power_iters):
        Q = _prior_orthonormalize(Y, prior)
        Y = prior.covariance(Happly(Q))
    Q = _prior_orthonormalize(Y, prior)
    T = Q.T @ Happly(Q)
    T = 0.5 * (T + T.T)
    lam, U = np.linalg.eigh(T)
    order = np.argsort(lam)[::-1][:r]
    return lam[order], Q @ U[:, order]


@dataclass(eq=False)
class LowRankPosterior:
    theta_map: ParameterFields
    eigenvalues: np.ndarray
    V: np.ndarray
    prior: PriorPair

    def __post_init__(self):
        lam = np.asarray(self.eigenvalues, float)
        if len(lam) > 1 and np.any(np.diff(lam) > 0):
            raise ValidationError("eigenvalues must be sorted in descending order")
        self.eigenvalues = lam
        self.V = np.asarray(self.V, float).reshape(self.prior.dim, len(lam))

    @property
    def rank(self) -> int:
        return len(self.eigenvalues)

    @property
    def grid(self) -> Grid:
        return self.prior.grid

    def orthonormality_residual(self) -> float:
        if self.rank == 0:
            return 0.0
        G = self.V.T @ self.prior.precision(self.V)
        return float(np.max(np.abs(G - np.eye(self.rank))))

    @property
    def damping(self) -> np.ndarray:
        lam = self.eigenvalues
        return lam / (1.0 + lam)

    def fluctuations(self, rng: np.random.Generator, k: int | None = None):
        """Zero-mean posterior draws: prior draws with their component along
        each v_i shrunk by (1 + lam_i)^-1/2."""
        s = self.prior.fluctuations(rng, k)
        if self.rank == 0:
            return s
        coef = 1.0 - 1.0 / np.sqrt(1.0 + self.eigenvalues)
        proj = self.V.T @ self.prior.precision(s)
        if s.ndim == 1:
            return s - self.V @ (coef * proj)
        return s - self.V @ (coef[:, None] * proj)

    def sample_vectors(self, n: int, seed) -> np.ndarray:
        """``(dim, n)`` block of posterior samples."""
        rng = np.random.default_rng(seed)
        return self.theta_map.vector[:, None] + self.fluctuations(rng, n)

    def covariance_apply(self, v):
        v = np.asarray(v, float)
        out = self.prior.covariance(v)
        if self.rank:
            d = self.damping if v.ndim == 1 else self.damping[:, None]
            out = out - self.V @ (d * (self.V.T @ v))
        return out

    def dense_covariance(self) -> np.ndarray:
        C = self.prior.dense_covariance()
        return C - (self.V * self.damping) @ self.V.T

    def exact_variance(self) -> np.ndarray:
        return self.prior.exact_variance() - (self.V**2) @ self.damping


def posterior_sample(lrp: LowRankPosterior, seed) -> ParameterFields:
    rng = np.random.default_rng(seed)
    vec = lrp.theta_map.vector + lrp.fluctuations(rng)
    return ParameterFields.from_vector(lrp.grid, vec)


def pointwise_posterior_variance(lrp: LowRankPosterior, n_samples: int, seed, batch: int = 500):
    """Monte Carlo per-cell variance of log D and log G posterior samples."""
    if n_samples < 2:
        raise ValidationError("need at least two samples")
    rng = np.random.default_rng(seed)
    acc = np.zeros(lrp.prior.dim)
    done = 0
    while done < n_samples:
        k = min(batch, n_samples - done)
        s = lrp.fluctuations(rng, k)
        acc += np.einsum("ij,ij->i", s, s)
        done += k
    var = acc / n_samples
    n = lrp.grid.n_cells
    return ScalarField.from_vector(lrp.grid, var[:n]), ScalarField.from_vector(lrp.grid, var[n:])


def default_rank_cap(dim: int) -> int:
    return max(1, min(200, dim // 4))


def laplace_posterior(
    misfit,
    prior: PriorPair,
    theta_map: ParameterFields,
    rank: int | None = None,
    oversample: int = 10,
    power_iters: int = 1,
    seed=0,
    threshold: float = 0.1,
    rank_cap: int | None = None,
    initial_rank: int = 20,
) -> LowRankPosterior:
    """Low-rank Laplace approximation at ``theta_map``.

    With ``rank=None`` the rank is the smallest ``r`` with ``lam_r <
    threshold``, found by doubling a trial rank up to ``rank_cap``.
    """
    misfit = _as_misfit(misfit)
    tv = theta_map.vector

    def Happly(X):
        return misfit.hessian_apply(tv, X)

    cap = default_rank_cap(prior.dim) if rank_cap is None else rank_cap
    cap = min(cap, prior.dim - oversample)
    if rank is not None:
        lam, V = randomized_ghep(Happly, prior, rank, oversample, power_iters, seed)
        return LowRankPosterior(theta_map, lam, V, prior)
    r = min(initial_rank, cap)
    while True:
        lam, V = randomized_ghep(Happly, prior, r, oversample, power_iters, seed)
        below = np.nonzero(lam < threshold)[0]
        if len(below) or r >= cap:
            keep = below[0] + 1 if len(below) else r
            return LowRankPosterior(theta_map, lam[:keep], V[:, :keep], prior)
        r = min(2 * r, cap)


@dataclass(eq=False)
class PredictionEnsemble:
    days: tuple
    map_states: np.ndarray  # (n_days, n_cells)
    sample_states: np.ndarray  # (n_samples, n_days, n_cells)
    grid: Grid
    cutoff: float = 0.5

    @property
    def n_samples(self) -> int:
        return self.sample_states.shape[0]

    def map_field(self, day) -> ScalarField:
        return ScalarField.from_vector(self.grid, self.map_states[self.days.index(float(day))])

    def sample_field(self, i: int, day) -> ScalarField:
        return ScalarField.from_vector(self.grid, self.sample_states[i, self.days.index(float(day))])

    def exceedance_probability(self, day) -> ScalarField:
        k = self.days.index(float(day))
        if self.n_samples == 0:
            return ScalarField.from_vector(self.grid, (self.map_states[k] >= self.cutoff).astype(float))
        return ScalarField.from_vector(self.grid, np.mean(self.sample_states[:, k] >= self.cutoff, axis=0))


def predict(
    lrp: LowRankPosterior,
    ctx: MisfitContext,
    horizon_days,
    n_samples: int,
    cutoff: float = 0.5,
    seed=0,
) -> PredictionEnsemble:
    """Push the MAP point and ``n_samples`` posterior draws to the horizon days."""
    horizon = tuple(float(d) for d in np.atleast_1d(horizon_days))
    last = max(ctx.observations.days, default=ctx.t0)
    if not horizon or min(horizon) <= last:
        raise ValidationError(f"horizon {horizon} must lie beyond the last training day {last}")
    if not 0 < cutoff < 1:
        raise ValidationError("cutoff must lie in (0, 1)")
    days = (ctx.t0,) + horizon
    grid = ctx.grid

    def run(theta_vec):
        return solve_forward(grid, theta_vec, ctx.u0, days, ctx.cfg).obs_states[1:]

    map_states = run(lrp.theta_map.vector)
    samples = np.empty((n_samples, len(horizon), grid.n_cells))
    if n_samples:
        thetas = lrp.sample_vectors(n_samples, seed)
        for i in range(n_samples):
            samples[i] = run(thetas[:, i])
    return PredictionEnsemble(horizon, map_states, samples, grid, cutoff)
