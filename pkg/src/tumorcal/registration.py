"""Atlas-based GM/WM segmentation: block down-sampling, Thirion demons
registration and nearest-neighbour label transfer.

Images are ``(height, width)`` float arrays; displacement fields are
``(height, width, 2)`` arrays holding ``(dx, dy)`` in pixels.  Warping follows
the pull convention ``out(x) = img(x + disp(x))``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DegenerateImage, DimensionMismatch, UnknownLabelValue, ValidationError
from .grid import BinaryMask, Grid, Region, RegionLabels, region_labels_from_masks

log = logging.getLogger(__name__)

ATLAS_LABEL_VALUES = (int(Region.OUTSIDE), int(Region.GM), int(Region.WM))


@dataclass(frozen=True)
class DemonsParams:
    iterations: int = 300
    smoothing_sigma: float = 1.5
    max_step: float = 0.5
    tol: float = 1e-4
    # halvings of a rejected update before giving up
    max_retries: int = 4

    def __post_init__(self):
        if self.iterations < 1:
            raise ValidationError("iterations must be >= 1")
        if self.smoothing_sigma < 0:
            raise ValidationError("smoothing_sigma must be >= 0")
        if not self.max_step > 0:
            raise ValidationError("max_step must be positive")


@dataclass
class DemonsResult:
    displacement: np.ndarray
    mse_trace: list = field(default_factory=list)
    iterations: int = 0


def _check_image(img, name="image"):
    img = np.asarray(img, dtype=float)
    if img.ndim != 2 or min(img.shape) < 2:
        raise DimensionMismatch(f"{name} must be 2D with both dimensions >= 2, got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValidationError(f"{name} has non-finite intensities")
    return img


def downsample_image(img, fx: int, fy: int) -> np.ndarray:
    """Average over ``fy x fx`` blocks; edges padded by replication when the
    factors do not divide the image size."""
    img = _check_image(img)
    fx, fy = int(fx), int(fy)
    if fx < 1 or fy < 1:
        raise ValidationError("down-sampling factors must be >= 1")
    h, w = img.shape
    ph, pw = (-h) % fy, (-w) % fx
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw)), mode="edge")
    H, W = img.shape
    return img.reshape(H // fy, fy, W // fx, fx).mean(axis=(1, 3))


def warp_image(img, disp, interp: str = "bilinear") -> np.ndarray:
    """Sample ``img`` at ``x + disp(x)``; out-of-range samples clamp to the border."""
    img = np.asarray(img)
    disp = np.asarray(disp, dtype=float)
    if disp.shape != img.shape + (2,):
        raise DimensionMismatch(f"displacement shape {disp.shape} does not match image {img.shape}")
    order = {"bilinear": 1, "nearest": 0}.get(interp)
    if order is None:
        raise ValidationError(f"unknown interpolation {interp!r}")
    yy, xx = np.mgrid[0 : img.shape[0], 0 : img.shape[1]].astype(float)
    coords = [yy + disp[..., 1], xx + disp[..., 0]]
    if order == 0:
        # explicit rounding keeps labels categorical and ties deterministic
        cy = np.clip(np.floor(coords[0] + 0.5).astype(int), 0, img.shape[0] - 1)
        cx = np.clip(np.floor(coords[1] + 0.5).astype(int), 0, img.shape[1] - 1)
        return img[cy, cx]
    return ndimage.map_coordinates(np.asarray(img, float), coords, order=1, mode="nearest")


def _smooth(disp, sigma):
    if sigma <= 0:
        return disp
    out = np.empty_like(disp)
    for c in range(2):
        out[..., c] = ndimage.gaussian_filter(disp[..., c], sigma, mode="nearest")
    return out


def demons(static, moving, p: DemonsParams = DemonsParams()) -> DemonsResult:
    """Thirion demons with the passive (static-gradient) force.

    Each iteration computes the per-pixel update

        du = (m o phi - f) grad f / (|grad f|^2 + (m o phi - f)^2),

    moves the displacement by ``-du`` (clamped to ``max_step`` pixels), and
    smooths the accumulated field with a Gaussian of ``smoothing_sigma``.
    Updates that would increase the mean squared intensity error are halved
    and retried, so the recorded error trace never increases.
    """
    f = _check_image(static, "static")
    m = _check_image(moving, "moving")
    if f.shape != m.shape:
        raise DimensionMismatch(f"static {f.shape} and moving {m.shape} differ in size")
    gy, gx = np.gradient(f)
    g2 = gx * gx + gy * gy
    if not np.any(g2 > 0):
        raise DegenerateImage("static image has zero gradient everywhere")
    disp = np.zeros(f.shape + (2,))
    mse = float(np.mean((m - f) ** 2))
    trace = [mse]
    it = 0
    for it in range(1, p.iterations + 1):
        diff = warp_image(m, disp) - f
        denom = g2 + diff * diff
        safe = denom > 1e-12
        ux = np.where(safe, -diff * gx / np.where(safe, denom, 1.0), 0.0)
        uy = np.where(safe, -diff * gy / np.where(safe, denom, 1.0), 0.0)
        norm = np.hypot(ux, uy)
        scale = np.minimum(1.0, p.max_step / np.maximum(norm, 1e-300))
        step = np.stack([ux * scale, uy * scale], axis=-1)
        accepted = False
        for _ in range(p.max_retries + 1):
            trial = _smooth(disp + step, p.smoothing_sigma)
            trial_mse = float(np.mean((warp_image(m, trial) - f) ** 2))
            if trial_mse <= mse:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            log.debug("demons: no decrease after %d halvings at iteration %d", p.max_retries, it)
            break
        change = (mse - trial_mse) / mse if mse > 0 else 0.0
        disp, mse = trial, trial_mse
        trace.append(mse)
        if change < p.tol:
            break
    return DemonsResult(disp, trace, it)


def demons_register(static, moving, p: DemonsParams = DemonsParams()) -> np.ndarray:
    """Displacement field aligning ``moving`` onto ``static``."""
    return demons(static, moving, p).displacement


def transfer_labels(atlas_labels, disp, target_grid: Grid, band_halfwidth: float = 0.6) -> RegionLabels:
    """Warp integer atlas labels (0 outside, 1 GM, 2 WM) into the subject,
    restrict to the subject brain and add the interface band."""
    lab = np.asarray(atlas_labels)
    if lab.shape != target_grid.shape:
        raise DimensionMismatch(f"atlas labels {lab.shape} do not match grid {target_grid.shape}")
    if not np.all(lab == np.round(lab)):
        raise UnknownLabelValue("atlas labels must be integers")
    lab = lab.astype(np.int64)
    bad = sorted(set(np.unique(lab).tolist()) - set(ATLAS_LABEL_VALUES))
    if bad:
        raise UnknownLabelValue(f"unknown atlas label values {bad}")
    warped = warp_image(lab, disp, "nearest")
    brain = target_grid.brain_mask
    wm = brain & (warped == Region.WM)
    gm = brain & ~wm
    return region_labels_from_masks(
        target_grid, BinaryMask(target_grid, gm), BinaryMask(target_grid, wm), band_halfwidth
    )
