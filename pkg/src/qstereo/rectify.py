"""Differential-rectification error budget and radial distortion model.

The budget math decides up to which disparity the resampling-free
matcher stays valid: a scale mismatch K between two cameras' views of
the same object smears the correlation peak, and the mismatch itself
has a lens term (focal-length spread across the rig) and a
disparity-dependent term (distortion differences grow with disparity).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError


@dataclass(frozen=True)
class DistortionModel:
    """Radial (3-term) distortion around the principal point.

    `d_perc` is the simple barrel/pincushion percentage used by the
    budget math; `fov_radius` is the pixel radius it refers to. The
    polynomial coefficients k1..k3 act on rho = distance / fov_radius.
    """

    focal_length: float
    principal_point: tuple[float, float]
    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    d_perc: float = 0.0
    fov_radius: float = 1.0

    def __post_init__(self):
        if self.focal_length <= 0:
            raise ValueError("focal_length must be positive")
        if self.fov_radius <= 0:
            raise ValueError("fov_radius must be positive")
        if abs(self.d_perc) > 50:
            raise ValueError("d_perc outside the +/-50% sane range")

    @property
    def radial_coeffs(self) -> tuple[float, float, float]:
        return (self.k1, self.k2, self.k3)

    def barrel_percent(self) -> float:
        """Equivalent simple-barrel percentage of the polynomial model.

        Defined as 100 * (radial displacement at rho=1) / fov_radius,
        which makes the two representations interconvertible.
        """
        return 100.0 * (self.k1 + self.k2 + self.k3)


@dataclass(frozen=True)
class ModalityScale:
    """Resolution relation between the high- and low-res modalities."""

    pixel_ratio: float = 12.8
    range_error_ratio: float = 13.0

    def __post_init__(self):
        if self.pixel_ratio <= 1 or self.range_error_ratio <= 1:
            raise ValueError("modality ratios must exceed 1")


def disparity_error_from_mismatch(k_diff: float, w: float) -> float:
    """Worst-case disparity error caused by scale mismatch k_diff.

    For a correlation window of w pixels the worst case puts all patch
    energy at the window end (w/2 from center), so the error is
    k_diff * w / 2.
    """
    if w <= 0:
        raise ValueError("window must be positive")
    if not (math.isfinite(k_diff) and math.isfinite(w)):
        raise ValueError("inputs must be finite")
    return k_diff * w / 2.0


def allowed_mismatch(d_err: float, w: float) -> float:
    """Scale mismatch budget for a target disparity error (inverse of
    disparity_error_from_mismatch): 2 * d_err / w."""
    if w <= 0:
        raise ValueError("window must be positive")
    if not (math.isfinite(d_err) and math.isfinite(w)):
        raise ValueError("inputs must be finite")
    return 2.0 * d_err / w


def disparity_mismatch(model: DistortionModel, d: float) -> float:
    """Disparity-dependent mismatch term: (D%/100) * d / r."""
    if d < 0:
        raise ValueError("disparity must be non-negative")
    return (model.d_perc / 100.0) * d / model.fov_radius


def max_differential_disparity(model: DistortionModel, k_disp: float) -> float:
    """Largest disparity for which the mismatch stays within k_disp.

    r * (100 / D%) * k_disp; a distortion-free model (D% = 0) has an
    unbounded budget, reported as +inf rather than an error.
    """
    if k_disp < 0:
        raise ValueError("k_disp must be non-negative")
    if model.d_perc == 0.0:
        return math.inf
    return model.fov_radius * (100.0 / model.d_perc) * k_disp


def lens_mismatch_from_rsd(rsd_f: float) -> float:
    """Lens contribution to the mismatch: the focal-length RSD itself."""
    if rsd_f < 0:
        raise ValueError("rsd_f must be non-negative")
    return rsd_f


def cross_modality_disparity(scale: ModalityScale, d_low: float) -> float:
    """Disparity in high-res pixels matching d_low low-res pixels."""
    return d_low * scale.pixel_ratio


@dataclass(frozen=True)
class RectificationBudget:
    """Assembled error budget for one modality.

    k_diff is tied to (d_err, w) through the exact inverse pair of
    equations above; d_max comes from the distortion model.
    """

    w: float
    d_err: float
    k_diff: float
    k_lens: float
    k_disp: float
    rsd_f: float
    d_max: float

    def __post_init__(self):
        for name in ("w", "d_err", "k_diff", "k_lens", "k_disp", "rsd_f", "d_max"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @classmethod
    def from_requirements(cls, model: DistortionModel, w: float, d_err: float,
                          rsd_f: float = 0.0) -> "RectificationBudget":
        """Budget for a target disparity error, splitting the allowance.

        The full mismatch allowance K_diff = 2*d_err/w is granted to the
        disparity term when sizing d_max; the lens term is reported
        separately and checked against the same allowance.
        """
        k_diff = allowed_mismatch(d_err, w)
        k_lens = lens_mismatch_from_rsd(rsd_f)
        k_disp = k_diff
        d_max = max_differential_disparity(model, k_disp)
        return cls(w=w, d_err=d_err, k_diff=k_diff, k_lens=k_lens,
                   k_disp=k_disp, rsd_f=rsd_f, d_max=d_max)

    @property
    def lens_within_budget(self) -> bool:
        return self.k_lens <= self.k_diff

    @property
    def combined_within_budget(self) -> bool:
        return self.k_lens + self.k_disp <= self.k_diff


def apply_distortion(model: DistortionModel, points):
    """Map undistorted pixel positions to distorted ones.

    `points` is (..., 2) in (x, y); the radial polynomial acts on the
    offset from the principal point with rho normalized by fov_radius.
    Points farther than 1.5 * fov_radius are outside the model's
    validity and raise.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    pp = np.asarray(model.principal_point)
    off = pts - pp
    rho2 = np.sum(off * off, axis=-1) / model.fov_radius**2
    if np.any(rho2 > 1.5**2):
        raise ValueError("point beyond 1.5 * fov_radius from principal point")
    scale = 1.0 + model.k1 * rho2 + model.k2 * rho2**2 + model.k3 * rho2**3
    out = pp + off * scale[..., None]
    return out[0] if single else out


def undistort(model: DistortionModel, points, tol: float = 1e-6,
              max_iter: int = 50):
    """Invert apply_distortion by damped fixed-point iteration.

    Converges to better than `tol` pixels; raises DivergenceError if the
    iteration has not settled after max_iter rounds.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    pp = np.asarray(model.principal_point)
    target = pts - pp
    off = target.copy()
    damping = 1.0
    for _ in range(max_iter):
        rho2 = np.sum(off * off, axis=-1) / model.fov_radius**2
        scale = 1.0 + model.k1 * rho2 + model.k2 * rho2**2 + model.k3 * rho2**3
        err = off * scale[..., None] - target
        if np.max(np.abs(err)) < tol:
            out = pp + off
            return out[0] if single else out
        # plain fixed point off <- target/scale, damped for stability
        step = target / scale[..., None] - off
        off = off + damping * step
    raise DivergenceError(f"undistort did not converge in {max_iter} iterations")


def budget_rows(model: DistortionModel, w: float, d_err: float,
                rsd_f: float) -> list[tuple[str, float]]:
    """Named budget quantities in presentation order for the CLI table."""
    budget = RectificationBudget.from_requirements(model, w, d_err, rsd_f)
    return [
        ("window_px", budget.w),
        ("target_disparity_error_px", budget.d_err),
        ("allowed_mismatch_K_diff", budget.k_diff),
        ("lens_mismatch_K_lens", budget.k_lens),
        ("disparity_mismatch_budget_K_disp", budget.k_disp),
        ("max_disparity_px", budget.d_max),
    ]
