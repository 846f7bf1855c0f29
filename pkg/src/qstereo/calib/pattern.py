"""Calibration target geometry and synthetic rendering.

The target is a checkerboard whose straight cell edges are each
replaced by two circular arcs meeting at the edge midpoint with tangent
continuity and deflecting to opposite sides (an S shape). The arcs
spread the pattern's spatial spectrum while leaving the grid nodes (the
cell corners) exactly on the lattice. Arc radius equals the cell edge
by default; shrinking `arc_radius` toward infinity is not needed —
setting `arcs=False` renders plain straight edges.

Rendering projects the pattern plane through a pose and the radial
distortion model with 4x supersampling, then applies Gaussian blur and
additive noise. Everything the detector is tested against comes from
the exact node projection, not from the raster.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..errors import DataError
from ..image import ImageGrid
from ..rectify import DistortionModel, apply_distortion, undistort


@dataclass(frozen=True)
class TargetSpec:
    """Arc-checkerboard calibration panel."""

    pitch_m: float = 0.18
    panel_width_m: float = 7.0
    panel_height_m: float = 3.0
    arcs: bool = True
    arc_radius: float = 1.0   # in cell-edge units
    invert: bool = False      # ink polarity

    def __post_init__(self):
        if self.pitch_m <= 0:
            raise ValueError("pitch must be positive")
        if self.arc_radius < 0.5:
            raise ValueError("arc radius below half an edge cannot reach the midpoint")

    @property
    def cells(self) -> tuple[int, int]:
        return (int(round(self.panel_width_m / self.pitch_m)),
                int(round(self.panel_height_m / self.pitch_m)))

    def node_range(self):
        """Inclusive (u, v) index ranges of the interior lattice nodes."""
        nu, nv = self.cells
        return (-(nu // 2) + 1, nu - nu // 2 - 1), (-(nv // 2) + 1, nv - nv // 2 - 1)

    def contains(self, u, v):
        nu, nv = self.cells
        return ((u >= -(nu // 2)) & (u <= nu - nu // 2)
                & (v >= -(nv // 2)) & (v <= nv - nv // 2))


def _edge_wiggle(t: np.ndarray, radius: float) -> np.ndarray:
    """Lateral S-displacement of an edge point at parameter t in [0, 1).

    Two arcs of the given radius (edge units) from node to midpoint to
    node; the first half deflects negative, the second positive, with
    zero displacement and tangent continuity at the midpoint.
    """
    h = np.sqrt(radius**2 - 0.0625)
    first = t < 0.5
    tm = np.where(first, t - 0.25, t - 0.75)
    mag = h - np.sqrt(radius**2 - tm**2)
    return np.where(first, mag, -mag)


def pattern_value(spec: TargetSpec, u, v):
    """Binary pattern value at lattice coordinates (u, v).

    Cells are unit squares; nodes are at integer (u, v). With arcs on,
    the boundary between columns i-1 and i at height v lies at
    u = i + s * wiggle(v mod 1) where the sign s alternates per cell so
    adjacent edges deflect consistently.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    col = np.floor(u).astype(np.int64)
    row = np.floor(v).astype(np.int64)
    if spec.arcs:
        # vertical edges: sign from (edge index + cell row) parity
        tv = v - row
        wl = _edge_wiggle(tv, spec.arc_radius) * _sign(col, row)
        wr = _edge_wiggle(tv, spec.arc_radius) * _sign(col + 1, row)
        col = col + (u - col >= 1.0 + wr).astype(np.int64) \
                  - (u - col < wl).astype(np.int64)
        # horizontal edges: same construction transposed
        tu = u - np.floor(u)
        wt = _edge_wiggle(tu, spec.arc_radius) * _sign(row, np.floor(u).astype(np.int64))
        wb = _edge_wiggle(tu, spec.arc_radius) * _sign(row + 1, np.floor(u).astype(np.int64))
        row = row + (v - row >= 1.0 + wb).astype(np.int64) \
                  - (v - row < wt).astype(np.int64)
    value = ((col + row) % 2).astype(np.float64)
    if spec.invert:
        value = 1.0 - value
    return value


def _sign(i, j):
    return np.where((i + j) % 2 == 0, 1.0, -1.0)


def rodrigues(rvec) -> np.ndarray:
    """Rotation matrix from an axis-angle 3-vector."""
    rvec = np.asarray(rvec, dtype=np.float64)
    theta = np.linalg.norm(rvec)
    if theta < 1e-12:
        k = _skew(rvec)
        return np.eye(3) + k  # first-order expansion
    axis = rvec / theta
    k = _skew(axis)
    return np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)


def _skew(w):
    return np.array([[0.0, -w[2], w[1]],
                     [w[2], 0.0, -w[0]],
                     [-w[1], w[0], 0.0]])


@dataclass(frozen=True)
class Pose:
    """Camera-from-target transform: q_cam = R(rvec) @ X + tvec."""

    rvec: tuple
    tvec: tuple

    @property
    def rotation(self) -> np.ndarray:
        return rodrigues(np.asarray(self.rvec))

    @property
    def translation(self) -> np.ndarray:
        return np.asarray(self.tvec, dtype=np.float64)


def project_points(model: DistortionModel, pose: Pose, points_xyz) -> np.ndarray:
    """Target-frame 3D points -> distorted pixel coordinates (..., 2)."""
    pts = np.atleast_2d(np.asarray(points_xyz, dtype=np.float64))
    q = pts @ pose.rotation.T + pose.translation
    if np.any(q[:, 2] <= 0):
        raise DataError("points behind the camera")
    pn = q[:, :2] / q[:, 2:3]
    pp = np.asarray(model.principal_point)
    undist = pp + model.focal_length * pn
    return apply_distortion(model, undist)


def node_world(spec: TargetSpec, u, v, correction=None) -> np.ndarray:
    """3D target-frame position of lattice node (u, v) in meters."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    xyz = np.stack([u * spec.pitch_m, v * spec.pitch_m, np.zeros_like(u)], axis=-1)
    if correction is not None:
        xyz = xyz + correction
    return xyz


def project_nodes(spec: TargetSpec, pose: Pose, model: DistortionModel,
                  size: tuple[int, int], margin: float = 1.0,
                  margin_px: float = 4.0):
    """Exact pixel positions of all target nodes visible in the frame.

    Returns (uv (N,2) int, xy (N,2) float) for nodes inside the image
    with `margin` cells of pattern around them and at least `margin_px`
    pixels from the frame edge (detection needs correlation support).
    """
    (u0, u1), (v0, v1) = spec.node_range()
    uu, vv = np.meshgrid(np.arange(u0, u1 + 1), np.arange(v0, v1 + 1))
    uv = np.stack([uu.ravel(), vv.ravel()], axis=1)
    keep = (spec.contains(uv[:, 0] - margin, uv[:, 1] - margin)
            & spec.contains(uv[:, 0] + margin, uv[:, 1] + margin))
    uv = uv[keep]
    xyz = node_world(spec, uv[:, 0], uv[:, 1])
    q = xyz @ pose.rotation.T + pose.translation
    front = q[:, 2] > 0
    uv, q = uv[front], q[front]
    pp = np.asarray(model.principal_point)
    undist = pp + model.focal_length * (q[:, :2] / q[:, 2:3])
    near = np.hypot(*(undist - pp).T) < 1.4 * model.fov_radius
    uv = uv[near]
    xy = apply_distortion(model, undist[near])
    w, h = size
    inside = ((xy[:, 0] >= margin_px) & (xy[:, 0] <= w - 1 - margin_px)
              & (xy[:, 1] >= margin_px) & (xy[:, 1] <= h - 1 - margin_px))
    return uv[inside], xy[inside]


def render_target(spec: TargetSpec, pose: Pose, model: DistortionModel,
                  size: tuple[int, int], blur_sigma: float = 0.0,
                  noise_sigma: float = 0.0,
                  rng: np.random.Generator | None = None,
                  supersample: int = 4, background: float = 0.5) -> ImageGrid:
    """Render the target into a (width, height) frame.

    Inverse mapping: every supersampled pixel is undistorted, cast as a
    ray, intersected with the target plane and classified by the
    pattern; off-panel rays get the neutral background level.
    """
    w, h = size
    ss = supersample
    step = np.arange(ss) / ss - 0.5 + 0.5 / ss
    xs = (np.arange(w)[:, None] + step[None, :]).ravel()
    ys = (np.arange(h)[:, None] + step[None, :]).ravel()
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    und = undistort(model, pts)
    pp = np.asarray(model.principal_point)
    dirs = np.concatenate([(und - pp) / model.focal_length,
                           np.ones((und.shape[0], 1))], axis=1)
    r = pose.rotation
    t = pose.translation
    rd = dirs @ r  # = R^T dirs, row-wise
    rt = r.T @ t
    denom = rd[:, 2]
    lam = np.where(np.abs(denom) > 1e-12, rt[2] / np.where(denom == 0, 1.0, denom), -1.0)
    hit = lam > 0
    x_t = lam * rd[:, 0] - rt[0]
    y_t = lam * rd[:, 1] - rt[1]
    u = x_t / spec.pitch_m
    v = y_t / spec.pitch_m
    values = np.full(u.shape, background)
    on_panel = hit & spec.contains(u, v)
    values[on_panel] = pattern_value(spec, u[on_panel], v[on_panel])
    img = values.reshape(h * ss, w * ss)
    img = img.reshape(h, ss, w, ss).mean(axis=(1, 3))
    if blur_sigma > 0:
        img = ndimage.gaussian_filter(img, blur_sigma, mode="nearest")
    if noise_sigma > 0:
        if rng is None:
            rng = np.random.default_rng(0)
        img = img + rng.normal(0.0, noise_sigma, img.shape)
    return ImageGrid(img)
