"""Comparison calibrators: a spatially homogeneous prior (SHP) run through the
regular inversion, and piecewise-constant parameters (PCP) sampled with
delayed-rejection adaptive Metropolis."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import NumericalError, ValidationError
from .forward import ParameterFields
from .grid import Region, RegionLabels, check_same_grid
from .inversion import MisfitContext, TumorMisfit
from .prior import FieldHyper, RegionHyper

log = logging.getLogger(__name__)

PCP_NAMES = ("logD_gm", "logD_wm", "logG_gm", "logG_wm")


def shp_hyper(hyper: RegionHyper) -> RegionHyper:
    """Average the GM and WM means, variances and correlation lengths and drop
    the interface band, giving one homogeneous prior per field."""

    def flat(fh: FieldHyper) -> FieldHyper:
        avg = lambda a, b: 0.5 * (a + b)  # noqa: E731
        m = avg(fh.mean_gm, fh.mean_wm)
        v = avg(fh.var_gm, fh.var_wm)
        r = avg(fh.rho_gm, fh.rho_wm)
        return FieldHyper(m, m, v, v, r, r, None)

    return RegionHyper(flat(hyper.logD), flat(hyper.logG))


@dataclass(frozen=True)
class PcpParams:
    logD_gm: float
    logD_wm: float
    logG_gm: float
    logG_wm: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.as_array()):
            raise ValidationError("PCP parameters must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.logD_gm, self.logD_wm, self.logG_gm, self.logG_wm], float)

    @classmethod
    def from_array(cls, a) -> "PcpParams":
        a = np.asarray(a, float)
        if a.shape != (4,):
            raise ValidationError(f"need 4 PCP values, got shape {a.shape}")
        return cls(*map(float, a))


@dataclass(frozen=True)
class ScalarPriors:
    """Independent Gaussian priors on the four PCP scalars."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def from_hyper(cls, hyper: RegionHyper) -> "ScalarPriors":
        D, G = hyper.logD, hyper.logG
        return cls(
            np.array([D.mean_gm, D.mean_wm, G.mean_gm, G.mean_wm]),
            np.array([D.var_gm, D.var_wm, G.var_gm, G.var_wm]),
        )

    def log_density(self, x) -> float:
        r = np.asarray(x, float) - self.mean
        return -0.5 * float(np.sum(r * r / self.var))


def tissue_sides(labels: RegionLabels) -> np.ndarray:
    """GM/WM image with each INTERFACE cell assigned the majority label of its
    labelled 8-neighbours, sweeping inwards; ties go to GM."""
    lab = labels.labels.astype(np.int64).copy()
    pending = lab == Region.INTERFACE
    kernel = np.ones((3, 3))
    while pending.any():
        n_gm = ndimage.convolve((lab == Region.GM).astype(float), kernel, mode="constant")
        n_wm = ndimage.convolve((lab == Region.WM).astype(float), kernel, mode="constant")
        ready = pending & (n_gm + n_wm > 0)
        if not ready.any():
            # interface component with no tissue around it
            lab[pending] = Region.GM
            break
        lab[ready & (n_gm >= n_wm)] = Region.GM
        lab[ready & (n_gm < n_wm)] = Region.WM
        pending &= ~ready
    return lab


def paint_pcp(labels: RegionLabels, p: PcpParams) -> ParameterFields:
    grid = labels.grid
    side = grid.compress(tissue_sides(labels))
    gm = side == Region.GM
    logD = np.where(gm, p.logD_gm, p.logD_wm)
    logG = np.where(gm, p.logG_gm, p.logG_wm)
    return ParameterFields.from_vector(grid, np.concatenate([logD, logG]))


class PcpPosterior:
    """Log-posterior over the four PCP scalars; reuses one misfit object so
    repeated evaluations share its trajectory cache."""

    def __init__(self, ctx: MisfitContext, labels: RegionLabels, priors: ScalarPriors):
        check_same_grid(ctx.grid, labels)
        self.misfit = TumorMisfit(ctx)
        self.labels = labels
        self.priors = priors
        self.n_failed = 0

    def log_likelihood(self, p: PcpParams) -> float:
        return -self.misfit.cost(paint_pcp(self.labels, p).vector)

    def __call__(self, x) -> float:
        x = np.asarray(x, float)
        if not np.all(np.isfinite(x)):
            return -math.inf
        try:
            ll = self.log_likelihood(PcpParams.from_array(x))
        except NumericalError as exc:
            self.n_failed += 1
            log.debug("PCP evaluation failed at %s: %s", x, exc)
            return -math.inf
        return ll + self.priors.log_density(x) if math.isfinite(ll) else -math.inf


def pcp_log_posterior(ctx: MisfitContext, labels: RegionLabels, prior4: ScalarPriors, p) -> float:
    """Log-likelihood plus independent Gaussian log-priors (constants dropped).
    Non-finite parameters give ``-inf``."""
    x = p.as_array() if isinstance(p, PcpParams) else np.asarray(p, float)
    return PcpPosterior(ctx, labels, prior4)(x)


# ---------------------------------------------------------------------------
# DRAM


@dataclass(frozen=True)
class DramConfig:
    x0: tuple
    # initial proposal covariance; a vector means a diagonal
    cov0: tuple
    adapt_start: int = 500
    adapt_interval: int = 100
    # second-stage proposal std is dr_shrink times the first-stage std
    dr_shrink: float = 0.2
    # scale of the adapted covariance; None means 2.38^2 / d
    scale: float | None = None
    eps: float = 1e-10

    def __post_init__(self):
        if not 0 < self.dr_shrink < 1:
            raise ValidationError("dr_shrink must lie in (0, 1)")
        if self.adapt_interval < 1 or self.adapt_start < 1:
            raise ValidationError("adaptation start and interval must be >= 1")

    def initial_cov(self) -> np.ndarray:
        c = np.asarray(self.cov0, float)
        d = len(self.x0)
        c = np.diag(c) if c.ndim == 1 else c
        if c.shape != (d, d):
            raise ValidationError(f"initial covariance shape {c.shape} does not match dimension {d}")
        return c


@dataclass
class Chain:
    samples: np.ndarray  # (n, d)
    log_post: np.ndarray
    accepted_stage1: int = 0
    accepted_stage2: int = 0
    # (iteration, trace of the proposal covariance) at every adaptation
    adaptation: list = field(default_factory=list)
    adapt_start: int = 0
    # per iteration: 0 rejected, 1 or 2 the stage that accepted
    stage: np.ndarray = None

    def __len__(self):
        return len(self.samples)

    @property
    def acceptance_rate(self) -> float:
        """Fraction of first-stage (adaptive Metropolis) proposals accepted."""
        return self.accepted_stage1 / max(len(self) - 1, 1)

    @property
    def total_acceptance(self) -> float:
        """Fraction of iterations that moved, either stage."""
        return (self.accepted_stage1 + self.accepted_stage2) / max(len(self) - 1, 1)

    @property
    def post_adaptation_acceptance(self) -> float:
        f = self.stage[max(self.adapt_start, 1) :]
        return float(np.mean(f == 1)) if len(f) else self.acceptance_rate

    def params(self, burn_in: float = 0.0) -> list:
        start = int(burn_in * len(self))
        return [PcpParams.from_array(s) for s in self.samples[start:]]

    def summary(self, burn_in: float = 0.2, names=None) -> dict:
        s = self.samples[int(burn_in * len(self)) :]
        names = names or [f"x{i}" for i in range(s.shape[1])]
        return {
            "n": len(self),
            "burn_in": burn_in,
            "acceptance_rate": self.acceptance_rate,
            "total_acceptance": self.total_acceptance,
            "post_adaptation_acceptance": self.post_adaptation_acceptance,
            "mean": dict(zip(names, map(float, s.mean(axis=0)))),
            "std": dict(zip(names, map(float, s.std(axis=0, ddof=1)))) if len(s) > 1 else {},
        }


def _log_mvn_kernel(diff, chol):
    z = np.linalg.solve(chol, diff)
    return -0.5 * float(z @ z)


def dram_sample(target, n: int, cfg: DramConfig, seed) -> Chain:
    """Adaptive Metropolis with one delayed-rejection stage.

    ``target`` maps a length-d array to a log-density; non-finite values are
    treated as rejection.  The proposal covariance becomes
    ``scale * (empirical covariance + eps I)`` from ``adapt_start`` on and is
    refreshed every ``adapt_interval`` iterations.
    """
    if n < 1:
        raise ValidationError("chain length must be >= 1")
    rng = np.random.default_rng(seed)
    x = np.asarray(cfg.x0, float).copy()
    d = len(x)
    sd = 2.38**2 / d if cfg.scale is None else cfg.scale
    C = cfg.initial_cov()
    L = np.linalg.cholesky(C)
    lp = float(target(x))
    if not math.isfinite(lp):
        raise ValidationError("target is not finite at the initial point")

    samples = np.empty((n, d))
    lps = np.empty(n)
    stage = np.zeros(n, np.int8)
    samples[0], lps[0] = x, lp
    mean = x.copy()
    M2 = np.zeros((d, d))
    chain = Chain(samples, lps, adapt_start=min(cfg.adapt_start, n))
    shrink = cfg.dr_shrink

    def a1(lp_from, lp_to):
        return 1.0 if lp_to >= lp_from else math.exp(lp_to - lp_from)

    for t in range(1, n):
        y1 = x + L @ rng.standard_normal(d)
        lp1 = float(target(y1))
        lp1 = lp1 if math.isfinite(lp1) else -math.inf
        alpha1 = a1(lp, lp1) if lp1 > -math.inf else 0.0
        if rng.random() < alpha1:
            x, lp = y1, lp1
            chain.accepted_stage1 += 1
            stage[t] = 1
        else:
            y2 = x + shrink * (L @ rng.standard_normal(d))
            lp2 = float(target(y2))
            if math.isfinite(lp2):
                # stage-two ratio for symmetric proposals:
                # pi(y2) q1(y2, y1) (1 - a1(y2, y1)) / [pi(x) q1(x, y1) (1 - a1(x, y1))]
                back = 1.0 - (a1(lp2, lp1) if lp1 > -math.inf else 0.0)
                if back > 0:
                    log_r = (
                        lp2 - lp
                        + _log_mvn_kernel(y1 - y2, L)
                        - _log_mvn_kernel(y1 - x, L)
                        + math.log(back)
                        - math.log(1.0 - alpha1)
                    )
                    if math.log(rng.random() + 1e-300) < min(0.0, log_r):
                        x, lp = y2, lp2
                        chain.accepted_stage2 += 1
                        stage[t] = 2
        samples[t], lps[t] = x, lp

        # Welford update of the running mean and scatter
        delta = x - mean
        mean += delta / (t + 1)
        M2 += np.outer(delta, x - mean)
        if t + 1 >= cfg.adapt_start and (t + 1 - cfg.adapt_start) % cfg.adapt_interval == 0:
            cov = M2 / t + cfg.eps * np.eye(d)
            try:
                L = np.linalg.cholesky(sd * cov)
                chain.adaptation.append((t + 1, float(np.trace(sd * cov))))
            except np.linalg.LinAlgError:
                log.debug("adaptation skipped at %d: covariance not positive definite", t + 1)
    chain.stage = stage
    return chain


def pcp_dram_config(hyper: RegionHyper, step: float = 0.1, **kw) -> DramConfig:
    """Start at the prior means with a diagonal proposal of ``step`` times the
    prior standard deviations."""
    pr = ScalarPriors.from_hyper(hyper)
    return DramConfig(tuple(pr.mean), tuple(step**2 * pr.var), **kw)


def calibrate_pcp(ctx: MisfitContext, labels: RegionLabels, hyper: RegionHyper, n: int, seed, cfg=None) -> Chain:
    post = PcpPosterior(ctx, labels, ScalarPriors.from_hyper(hyper))
    return dram_sample(post, n, cfg or pcp_dram_config(hyper), seed)
