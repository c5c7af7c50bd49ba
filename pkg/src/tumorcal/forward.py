"""Reaction-diffusion tumour model on the masked grid.

    du/dt = div(D grad u) + G (1 - u) u,   D grad u . n = 0 on the brain edge

Time stepping is IMEX: backward Euler for diffusion, explicit logistic
reaction, so each step is one SPD solve

    (I - dt L_D) u+ = u + dt G (1 - u) u.

``L_D`` is the 5-point divergence-form operator with harmonic-mean face
diffusivities; faces towards masked-out cells carry no flux.  The tangent and
adjoint below differentiate this recursion exactly (discretize, then
optimize), with respect to ``theta = (log D, log G)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, cg, splu

from .errors import (
    DimensionMismatch,
    LinearSolveFailure,
    StepSizeError,
    TrajectoryMismatch,
    ValidationError,
)
from .grid import Grid, ScalarField, check_same_grid


@dataclass(frozen=True)
class SolverConfig:
    dt: float = 0.05
    tol: float = 1e-12
    max_cg_iter: int = 2000
    # "direct" factorizes (I - dt L_D) once per (theta, dt); "cg" uses
    # Jacobi-preconditioned conjugate gradients to ``tol``.
    linear_solver: str = "direct"
    # guard: dt * max(G) <= stability_limit
    stability_limit: float = 0.5

    def __post_init__(self):
        if not self.dt > 0:
            raise ValidationError(f"dt must be positive, got {self.dt}")
        if not 0 < self.tol < 1:
            raise ValidationError(f"tol must lie in (0, 1), got {self.tol}")
        if self.linear_solver not in ("direct", "cg"):
            raise ValidationError(f"unknown linear_solver {self.linear_solver!r}")


@dataclass(frozen=True, eq=False)
class ParameterFields:
    """The inversion unknown: log D (log mm^2/day) and log G (log 1/day)."""

    logD: ScalarField
    logG: ScalarField

    def __post_init__(self):
        check_same_grid(self.logD.grid, self.logG)

    @property
    def grid(self) -> Grid:
        return self.logD.grid

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.logD.vector, self.logG.vector])

    @classmethod
    def from_vector(cls, grid: Grid, vec) -> "ParameterFields":
        vec = np.asarray(vec, dtype=float)
        n = grid.n_cells
        if vec.shape != (2 * n,):
            raise DimensionMismatch(f"parameter vector length {vec.shape} != 2*{n}")
        return cls(ScalarField.from_vector(grid, vec[:n]), ScalarField.from_vector(grid, vec[n:]))

    @classmethod
    def constant(cls, grid: Grid, logD: float, logG: float) -> "ParameterFields":
        return cls(ScalarField.constant(grid, logD), ScalarField.constant(grid, logG))

    @property
    def D(self) -> np.ndarray:
        return np.exp(self.logD.vector)

    @property
    def G(self) -> np.ndarray:
        return np.exp(self.logG.vector)


def _as_theta_vector(grid: Grid, theta) -> np.ndarray:
    if isinstance(theta, ParameterFields):
        check_same_grid(grid, theta)
        return theta.vector
    vec = np.asarray(theta, dtype=float)
    if vec.shape != (2 * grid.n_cells,):
        raise DimensionMismatch(f"parameter vector length {vec.shape} != 2*{grid.n_cells}")
    return vec


class DiffusionSystem:
    """Per-theta operators: D, G, face transmissibilities, L_D and cached
    solvers for (I - dt L_D)."""

    def __init__(self, grid: Grid, theta_vec: np.ndarray, cfg: SolverConfig):
        n = grid.n_cells
        self.grid = grid
        self.cfg = cfg
        self.n = n
        self.D = np.exp(theta_vec[:n])
        self.G = np.exp(theta_vec[n:])
        f = grid.faces
        Da, Db = self.D[f.a], self.D[f.b]
        s = Da + Db
        self.T = 2.0 * Da * Db / s
        # d T / d log D_a and d T / d log D_b
        self.dT_a = 2.0 * Da * Db * Db / (s * s)
        self.dT_b = 2.0 * Db * Da * Da / (s * s)
        w = self.T * f.inv_h2
        diag = -(np.bincount(f.a, w, minlength=n) + np.bincount(f.b, w, minlength=n))
        self.L = sp.csr_matrix(
            (
                np.concatenate([w, w, diag]),
                (
                    np.concatenate([f.a, f.b, np.arange(n)]),
                    np.concatenate([f.b, f.a, np.arange(n)]),
                ),
            ),
            shape=(n, n),
        )
        self._solvers = {}

    def apply_L(self, u: np.ndarray) -> np.ndarray:
        return self.L @ u

    def solver(self, dt: float):
        solve = self._solvers.get(dt)
        if solve is None:
            B = (sp.identity(self.n, format="csr") - dt * self.L).tocsc()
            if self.cfg.linear_solver == "direct":
                lu = splu(B)
                solve = lu.solve
            else:
                solve = _cg_solver(B, self.cfg)
            self._solvers[dt] = solve
        return solve

    def jac_D(self, u_next: np.ndarray, dlogD: np.ndarray) -> np.ndarray:
        """(d/d logD)(L_D u_next) applied to ``dlogD``."""
        f = self.grid.faces
        g = (u_next[f.b] - u_next[f.a]) * f.inv_h2
        dF = (self.dT_a * dlogD[f.a] + self.dT_b * dlogD[f.b]) * g
        return np.bincount(f.a, dF, minlength=self.n) - np.bincount(f.b, dF, minlength=self.n)

    def jac_D_T(self, u_next: np.ndarray, w: np.ndarray) -> np.ndarray:
        f = self.grid.faces
        c = (w[f.a] - w[f.b]) * (u_next[f.b] - u_next[f.a]) * f.inv_h2
        return np.bincount(f.a, self.dT_a * c, minlength=self.n) + np.bincount(
            f.b, self.dT_b * c, minlength=self.n
        )


def _cg_solver(B, cfg: SolverConfig):
    dinv = 1.0 / B.diagonal()
    precond = LinearOperator(B.shape, matvec=lambda x: dinv * x, dtype=float)

    def solve(rhs):
        if rhs.ndim == 2:
            return np.column_stack([solve(c) for c in rhs.T])
        x, info = cg(B, rhs, rtol=cfg.tol, atol=0.0, maxiter=cfg.max_cg_iter, M=precond)
        if info != 0:
            raise LinearSolveFailure(f"CG did not converge (info={info})")
        return x

    return solve


def time_schedule(days, dt: float):
    """Sub-steps of size ``dt`` between consecutive observation days, the
    last sub-step of each gap shrunk so that every day is hit exactly.

    Returns ``(times, dts, obs_steps)`` with times relative to ``days[0]``.
    """
    days = np.asarray(days, dtype=float)
    if days.ndim != 1 or len(days) < 1:
        raise ValidationError("need at least one observation day")
    if np.any(np.diff(days) <= 0):
        raise ValidationError(f"observation days must be strictly increasing, got {days.tolist()}")
    dts, obs_steps, times = [], [0], [0.0]
    for k in range(1, len(days)):
        gap = days[k] - days[k - 1]
        n = max(1, math.ceil(gap / dt - 1e-9))
        last = gap - (n - 1) * dt
        if abs(last - dt) <= 1e-9 * dt:
            last = dt
        if not last > 0:
            raise StepSizeError(f"cannot fit dt={dt} into gap {gap}")
        sub = [dt] * (n - 1) + [last]
        for j, s in enumerate(sub):
            dts.append(s)
            times.append(times[-1] + s if j < n - 1 else float(days[k] - days[0]))
        obs_steps.append(len(dts))
    return np.array(times), np.array(dts), obs_steps


def check_stability(G: np.ndarray, dt: float, cfg: SolverConfig) -> None:
    gmax = float(np.max(G))
    if not np.isfinite(gmax) or dt * gmax > cfg.stability_limit:
        raise StepSizeError(
            f"dt={dt} violates the stability guard dt*max(G) <= {cfg.stability_limit} "
            f"(max G = {gmax:.6g})"
        )


def imex_step(u: ScalarField, theta: ParameterFields, dt: float, cfg: SolverConfig = SolverConfig()) -> ScalarField:
    """One IMEX step of the tumour model."""
    grid = u.grid
    tv = _as_theta_vector(grid, theta)
    system = DiffusionSystem(grid, tv, cfg)
    uv = u.vector
    rhs = uv + dt * system.G * (1.0 - uv) * uv
    return ScalarField.from_vector(grid, system.solver(dt)(rhs))


@dataclass(eq=False)
class Trajectory:
    grid: Grid
    theta: np.ndarray
    cfg: SolverConfig
    days: np.ndarray
    times: np.ndarray
    dts: np.ndarray
    states: np.ndarray  # (n_steps + 1, n_cells)
    obs_steps: list
    system: DiffusionSystem = field(repr=False)

    @property
    def obs_states(self) -> np.ndarray:
        """(n_days, n_cells) states at the observation days."""
        return self.states[self.obs_steps]

    def at_days(self) -> list:
        return [ScalarField.from_vector(self.grid, s) for s in self.obs_states]


def solve_forward(
    grid: Grid, theta, u0: ScalarField, obs_days, cfg: SolverConfig = SolverConfig()
) -> Trajectory:
    """Integrate from ``obs_days[0]`` (the day of ``u0``) through the last
    day, storing every step for the adjoint."""
    check_same_grid(grid, u0)
    tv = _as_theta_vector(grid, theta).copy()
    times, dts, obs_steps = time_schedule(obs_days, cfg.dt)
    system = DiffusionSystem(grid, tv, cfg)
    if len(dts):
        check_stability(system.G, cfg.dt, cfg)
    states = np.empty((len(dts) + 1, grid.n_cells))
    states[0] = u0.vector
    G = system.G
    for k, dt in enumerate(dts):
        u = states[k]
        states[k + 1] = system.solver(dt)(u + dt * G * (1.0 - u) * u)
    return Trajectory(grid, tv, cfg, np.asarray(obs_days, float), times, dts, states, obs_steps, system)


def _check_traj(traj: Trajectory, theta, cfg: SolverConfig) -> None:
    if cfg != traj.cfg:
        raise TrajectoryMismatch("solver config differs from the one used for the trajectory")
    tv = _as_theta_vector(traj.grid, theta)
    if not np.array_equal(tv, traj.theta):
        raise TrajectoryMismatch("parameters differ from the ones used for the trajectory")


def tangent_vec(traj: Trajectory, dtheta: np.ndarray) -> np.ndarray:
    """Directional derivative of the observed states: (n_days, n_cells)."""
    sysm = traj.system
    n = sysm.n
    dlogD, dlogG = dtheta[:n], dtheta[n:]
    G = sysm.G
    du = np.zeros(n)
    out = np.zeros((len(traj.obs_steps), n))
    step_to_obs = {s: i for i, s in enumerate(traj.obs_steps)}
    for k, dt in enumerate(traj.dts):
        u, u_next = traj.states[k], traj.states[k + 1]
        rhs = (1.0 + dt * G * (1.0 - 2.0 * u)) * du
        rhs += dt * G * (1.0 - u) * u * dlogG
        rhs += dt * sysm.jac_D(u_next, dlogD)
        du = sysm.solver(dt)(rhs)
        i = step_to_obs.get(k + 1)
        if i is not None:
            out[i] = du
    return out


def adjoint_vec(traj: Trajectory, sources: np.ndarray) -> np.ndarray:
    """Transpose of :func:`tangent_vec` with respect to the cell-area weighted
    inner product on states and the Euclidean one on theta.

    ``sources`` is (n_days, n_cells); the day-0 row is ignored since ``u0``
    does not depend on theta.
    """
    sysm = traj.system
    n = sysm.n
    G = sysm.G
    area = traj.grid.cell_area
    src = np.zeros((len(traj.states), n))
    for i, s in enumerate(traj.obs_steps):
        if s > 0:
            src[s] += area * sources[i]
    gD = np.zeros(n)
    gG = np.zeros(n)
    lam = np.zeros(n)
    for k in range(len(traj.dts) - 1, -1, -1):
        dt = traj.dts[k]
        u, u_next = traj.states[k], traj.states[k + 1]
        lam = lam + src[k + 1]
        w = sysm.solver(dt)(lam)
        gG += dt * G * (1.0 - u) * u * w
        gD += dt * sysm.jac_D_T(u_next, w)
        lam = (1.0 + dt * G * (1.0 - 2.0 * u)) * w
    return np.concatenate([gD, gG])


def tangent_solve(traj: Trajectory, theta, dtheta, cfg: SolverConfig) -> list:
    """Linearized states at every observation day (day 0 included, always 0)."""
    _check_traj(traj, theta, cfg)
    dv = _as_theta_vector(traj.grid, dtheta)
    return [ScalarField.from_vector(traj.grid, r) for r in tangent_vec(traj, dv)]


def adjoint_solve(traj: Trajectory, theta, terminal_sources, cfg: SolverConfig) -> ParameterFields:
    """Gradient with respect to theta of sum_i <u(t_i), s_i> (cell-area
    weighted).  With ``s_i = (u - d_i) / sigma^2`` this is the gradient of
    ``0.5/sigma^2 * sum_i int (u - d_i)^2``."""
    _check_traj(traj, theta, cfg)
    if len(terminal_sources) != len(traj.obs_steps):
        raise TrajectoryMismatch(
            f"{len(terminal_sources)} sources for {len(traj.obs_steps)} observation days"
        )
    check_same_grid(traj.grid, *terminal_sources)
    src = np.array([s.vector for s in terminal_sources])
    return ParameterFields.from_vector(traj.grid, adjoint_vec(traj, src))
