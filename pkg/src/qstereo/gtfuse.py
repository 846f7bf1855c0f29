"""Ground-truth fusion across modalities and the trimmed-RMSE evaluator.

A high-resolution disparity field is collapsed onto the low-resolution
tile grid. Destination tiles straddling an object edge mix foreground
and background disparities; averaging them would invent objects at an
intermediate range, so when the sample distribution is bimodal only the
larger-disparity (foreground) cluster is kept.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .rectify import ModalityScale
from .tilecorr import METHOD_INVALID, DisparityField, TileGrid

GAP_THRESHOLD = 0.5    # low-res pixels
MIN_FRACTION = 0.2     # smallest cluster share that still counts as a mode


@dataclass(frozen=True)
class GroundTruthTile:
    """Fused ground truth for one destination tile."""

    disparity: float
    confidence: float
    bimodal: bool = False
    fg: float = 0.0
    bg: float = 0.0
    valid: bool = True


@dataclass
class GroundTruthField:
    """Tile grid of fused ground truth values."""

    disparity: np.ndarray
    confidence: np.ndarray
    valid: np.ndarray
    bimodal: np.ndarray
    fg: np.ndarray
    bg: np.ndarray

    @classmethod
    def empty(cls, shape: tuple[int, int]) -> "GroundTruthField":
        return cls(disparity=np.zeros(shape), confidence=np.zeros(shape),
                   valid=np.zeros(shape, dtype=bool),
                   bimodal=np.zeros(shape, dtype=bool),
                   fg=np.zeros(shape), bg=np.zeros(shape))

    @property
    def shape(self) -> tuple[int, int]:
        return self.disparity.shape

    def set_tile(self, col: int, row: int, tile: GroundTruthTile):
        self.disparity[row, col] = tile.disparity
        self.confidence[row, col] = tile.confidence
        self.valid[row, col] = tile.valid
        self.bimodal[row, col] = tile.bimodal
        self.fg[row, col] = tile.fg
        self.bg[row, col] = tile.bg

    def tile(self, col: int, row: int) -> GroundTruthTile:
        return GroundTruthTile(disparity=float(self.disparity[row, col]),
                               confidence=float(self.confidence[row, col]),
                               bimodal=bool(self.bimodal[row, col]),
                               fg=float(self.fg[row, col]),
                               bg=float(self.bg[row, col]),
                               valid=bool(self.valid[row, col]))


def fuse_samples(values, n_total: int | None = None,
                 gap_threshold: float = GAP_THRESHOLD,
                 min_fraction: float = MIN_FRACTION) -> GroundTruthTile:
    """Apply the sort / largest-gap / foreground-mean rule to one tile.

    `values` are the valid source disparities already in low-res pixel
    units; `n_total` is the number of source samples mapped to the tile
    including invalid ones (defaults to len(values)) and sets the
    confidence denominator.
    """
    vals = np.sort(np.asarray(values, dtype=np.float64))
    if n_total is None:
        n_total = vals.size
    if vals.size == 0 or n_total == 0:
        return GroundTruthTile(0.0, 0.0, valid=False)
    if vals.size >= 2:
        gaps = np.diff(vals)
        split = int(np.argmax(gaps))
        gap = float(gaps[split])
        n_lower = split + 1
        n_upper = vals.size - n_lower
        if gap > gap_threshold and min(n_lower, n_upper) >= min_fraction * vals.size:
            upper = vals[n_lower:]
            return GroundTruthTile(disparity=float(upper.mean()),
                                   confidence=n_upper / n_total,
                                   bimodal=True,
                                   fg=float(upper.mean()),
                                   bg=float(vals[:n_lower].mean()))
    return GroundTruthTile(disparity=float(vals.mean()),
                           confidence=vals.size / n_total,
                           bimodal=False)


def downscale_gt(highres: DisparityField, scale: ModalityScale,
                 lowres_grid: TileGrid, highres_grid: TileGrid,
                 gap_threshold: float = GAP_THRESHOLD,
                 min_fraction: float = MIN_FRACTION) -> GroundTruthField:
    """Collapse a high-res disparity field onto the low-res tile grid.

    Source tile centers are mapped through the pixel ratio and assigned
    to the destination tile whose center is nearest; source disparities
    are divided by the same ratio. Tiles receiving no source samples are
    marked absent.
    """
    out = GroundTruthField.empty(lowres_grid.shape)
    rows, cols = lowres_grid.shape
    buckets: dict[tuple[int, int], list[float]] = {}
    totals: dict[tuple[int, int], int] = {}
    tile = lowres_grid.tile_size
    stride = lowres_grid.stride
    for col, row in highres_grid.tiles():
        cx, cy = highres_grid.center(col, row)
        lx = cx / scale.pixel_ratio
        ly = cy / scale.pixel_ratio
        # a source sample feeds every destination tile whose full
        # footprint [stride*c, stride*c + tile) contains it (tiles
        # overlap 50%, so up to four destinations per sample)
        for dc in range(int(np.floor((lx - tile) / stride)) + 1,
                        int(np.floor(lx / stride)) + 1):
            for dr in range(int(np.floor((ly - tile) / stride)) + 1,
                            int(np.floor(ly / stride)) + 1):
                if not (0 <= dc < cols and 0 <= dr < rows):
                    continue
                key = (dc, dr)
                totals[key] = totals.get(key, 0) + 1
                if highres.method[row, col] != METHOD_INVALID:
                    buckets.setdefault(key, []).append(
                        highres.disparity[row, col] / scale.pixel_ratio)
    for (dc, dr), n_total in totals.items():
        tile = fuse_samples(buckets.get((dc, dr), []), n_total=n_total,
                            gap_threshold=gap_threshold,
                            min_fraction=min_fraction)
        out.set_tile(dc, dr, tile)
    return out


def trimmed_rmse(estimate: DisparityField, gt: GroundTruthField,
                 trim: float = 0.1) -> float:
    """RMSE over tiles valid in both fields after dropping the worst
    `trim` fraction of absolute errors."""
    if not 0.0 <= trim < 0.5:
        raise ValueError("trim must be in [0, 0.5)")
    if estimate.shape != gt.shape:
        raise DataError(f"grid shapes differ: {estimate.shape} vs {gt.shape}")
    mask = estimate.valid & gt.valid
    errors = np.abs(estimate.disparity[mask] - gt.disparity[mask])
    if errors.size == 0:
        raise DataError("no tiles valid in both fields")
    errors = np.sort(errors)
    drop = int(np.floor(trim * errors.size + 1e-12))
    kept = errors[:errors.size - drop] if drop else errors
    if kept.size == 0:
        raise DataError("trim removed every tile")
    return float(np.sqrt(np.mean(kept**2)))


def error_map(estimate: DisparityField, gt: GroundTruthField) -> np.ndarray:
    """Per-tile |error| with NaN where either field is invalid."""
    out = np.full(estimate.shape, np.nan)
    mask = estimate.valid & gt.valid
    out[mask] = np.abs(estimate.disparity[mask] - gt.disparity[mask])
    return out
