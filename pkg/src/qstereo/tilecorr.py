"""Quadocular tile matcher.

Four cameras sit at the corners of a square, giving six baselines (two
horizontal, two vertical, two diagonal). Disparity is defined on the
horizontal baseline; a feature with disparity d is displaced between the
members of a pair by d * (offset_j - offset_i) in pixels, so horizontal
pairs move by (d, 0), vertical by (0, d) and diagonals by (+/-d, d).

Matching never resamples an image: tiles are extracted at integer
offsets, the sub-pixel remainder of the expected disparity is applied as
a spectral phase rotation (with the analysis window evaluated at the
shifted positions so it stays content-aligned), and the six
phase-correlation surfaces are fused into a 1D score whose
parabola-refined argmax is the residual disparity. Iterating the
pre-shift (eye-convergence style) drives the residual to zero, which
kills pixel locking: at the fixed point the peak sits at the surface
center where the parabola estimate is unbiased.

The heavy lifting runs through a batched core that stacks all candidate
pre-shifts and pairs of a tile into single FFT calls.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import fourier
from .errors import BoundaryError
from .fourier import Patch
from .image import image_data

DEFAULT_TILE = 16
DEFAULT_STRIDE = 8

# per-tile flag bits
FLAG_UNCONVERGED = 1
FLAG_OSCILLATION = 2
FLAG_CLAMPED = 4
FLAG_BOUNDARY_PEAK = 8
FLAG_OUT_OF_BUDGET = 16
FLAG_DEGENERATE = 32
FLAG_EDGE_CONTEXT = 64

METHOD_INVALID = 0
METHOD_POLY = 1
METHOD_NETWORK = 2


@dataclass(frozen=True)
class RigGeometry:
    """Four-camera square rig; offsets are in baseline units."""

    baseline_m: float = 0.15
    offsets: tuple = ((0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0))
    focal_length: float = 150.0
    sensor: tuple[int, int] = (160, 120)
    modality: str = "lwir"

    def __post_init__(self):
        if len(self.offsets) != 4:
            raise ValueError("quadocular rig needs exactly 4 camera offsets")
        kinds = sorted(kind for _, _, kind, _ in self.pairs)
        if kinds != ["d", "d", "h", "h", "v", "v"]:
            raise ValueError("camera offsets must form a square "
                             "(2 horizontal, 2 vertical, 2 diagonal pairs)")

    @property
    def pairs(self):
        """Six (i, j, kind, delta) tuples; delta = offset_j - offset_i."""
        out = []
        for i in range(4):
            for j in range(i + 1, 4):
                dx = self.offsets[j][0] - self.offsets[i][0]
                dy = self.offsets[j][1] - self.offsets[i][1]
                if dy == 0:
                    kind = "h"
                elif dx == 0:
                    kind = "v"
                else:
                    kind = "d"
                out.append((i, j, kind, (dx, dy)))
        return out

    @property
    def pair_ids(self):
        ids = []
        counters = {"h": 0, "v": 0, "d": 0}
        for _, _, kind, _ in self.pairs:
            ids.append(f"{kind}{counters[kind]}")
            counters[kind] += 1
        return ids


@dataclass(frozen=True)
class TileGrid:
    """50%-overlapping tile layout over an image.

    Tile (c, r) spans [stride*c, stride*c + tile_size); its center is at
    (stride*c + tile_size/2, stride*r + tile_size/2). A 160x120 frame
    yields a 20x15 grid; tiles whose footprint leaves the frame are
    marked invalid rather than padded.
    """

    width: int
    height: int
    tile_size: int = DEFAULT_TILE
    stride: int = DEFAULT_STRIDE

    def __post_init__(self):
        if self.stride != self.tile_size // 2:
            raise ValueError("stride must give 50% overlap (tile_size / 2)")

    @property
    def cols(self) -> int:
        return self.width // self.stride

    @property
    def rows(self) -> int:
        return self.height // self.stride

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def center(self, col: int, row: int) -> tuple[int, int]:
        half = self.tile_size // 2
        return (self.stride * col + half, self.stride * row + half)

    def fits(self, col: int, row: int) -> bool:
        x0 = self.stride * col
        y0 = self.stride * row
        return (x0 >= 0 and y0 >= 0
                and x0 + self.tile_size <= self.width
                and y0 + self.tile_size <= self.height)

    def tiles(self):
        for row in range(self.rows):
            for col in range(self.cols):
                yield col, row


def extract_tile(image, center: tuple[float, float], pre_shift_px: float = 0.0,
                 direction: tuple[float, float] = (1.0, 0.0),
                 tile_size: int = DEFAULT_TILE):
    """Crop a tile, applying the integer part of a pre-shift.

    The requested shift pre_shift_px * direction is split into a
    round-to-nearest integer extraction offset and a signed fraction
    |f| <= 0.5 that the caller applies later by spectral phase rotation,
    so integer + fraction always recombine to the requested shift
    exactly. Returns (Patch, (frac_x, frac_y)).
    """
    data = image_data(image)
    sx = pre_shift_px * direction[0]
    sy = pre_shift_px * direction[1]
    kx = int(np.rint(sx))
    ky = int(np.rint(sy))
    half = tile_size // 2
    x0 = int(round(center[0])) - half + kx
    y0 = int(round(center[1])) - half + ky
    if x0 < 0 or y0 < 0 or x0 + tile_size > data.shape[1] or y0 + tile_size > data.shape[0]:
        raise BoundaryError(f"tile at {center} shift ({sx:.2f},{sy:.2f}) "
                            f"leaves the {data.shape[1]}x{data.shape[0]} image")
    crop = data[y0:y0 + tile_size, x0:x0 + tile_size]
    return Patch(crop.copy(), origin=(x0, y0)), (sx - kx, sy - ky)


@dataclass
class TileCorrelationSet:
    """Six per-pair phase-correlation surfaces for one tile."""

    surfaces: dict
    pre_shift: float
    tile: tuple[int, int]

    @property
    def valid_pairs(self):
        return tuple(pid for pid, s in self.surfaces.items() if s is not None)

    @property
    def n_valid(self) -> int:
        return len(self.valid_pairs)


class _TileCorrelator:
    """Batched six-pair correlation for one tile at many pre-shifts."""

    def __init__(self, images, rig: RigGeometry, grid: TileGrid,
                 window: str = "hann", eps: float = 1e-6):
        self.images = [image_data(im) for im in images]
        if len(self.images) != 4:
            raise ValueError("need exactly four images")
        self.rig = rig
        self.grid = grid
        self.window = window
        self.eps = eps
        self.n = grid.tile_size
        self.pairs = rig.pairs
        self.pair_ids = rig.pair_ids
        self.base_cams = sorted({i for i, _, _, _ in self.pairs})
        n = self.n
        self._w0 = fourier.hann_window(n) if window == "hann" else np.ones((n, n))
        self._freqs = np.fft.fftfreq(n) * n
        self._t = np.arange(n, dtype=np.float64)

    def _crop(self, cam: int, center, kx: int, ky: int):
        img = self.images[cam]
        half = self.n // 2
        x0 = int(round(center[0])) - half + kx
        y0 = int(round(center[1])) - half + ky
        if x0 < 0 or y0 < 0 or x0 + self.n > img.shape[1] or y0 + self.n > img.shape[0]:
            return None
        return img[y0:y0 + self.n, x0:x0 + self.n]

    def surfaces(self, center, disparities):
        """Correlation surfaces for every (disparity, pair) combination.

        Returns (surf, valid): surf is (D, 6, n, n) with zero-filled
        invalid entries, valid is (D, 6) bool. Out-of-bounds tiles make
        a combination invalid; an out-of-bounds base tile kills the
        pairs it anchors.
        """
        disparities = np.atleast_1d(np.asarray(disparities, dtype=np.float64))
        D = disparities.size
        n = self.n

        base = {}
        stack = []
        for cam in self.base_cams:
            crop = self._crop(cam, center, 0, 0)
            if crop is not None:
                base[cam] = len(stack)
                stack.append(crop)
        valid = np.zeros((D, 6), dtype=bool)
        surf = np.zeros((D, 6, n, n))
        if not stack:
            return surf, valid
        tiles = np.asarray(stack, dtype=np.float64)
        tiles = tiles - tiles.mean(axis=(1, 2), keepdims=True)
        base_spec = np.fft.fft2(tiles * self._w0[None])

        crops, fxs, fys, slots, where = [], [], [], [], []
        for di, d in enumerate(disparities):
            for pi, (i, j, _, (dx, dy)) in enumerate(self.pairs):
                if i not in base:
                    continue
                sx, sy = d * dx, d * dy
                kx, ky = int(np.rint(sx)), int(np.rint(sy))
                crop = self._crop(j, center, kx, ky)
                if crop is None:
                    continue
                crops.append(crop)
                fxs.append(sx - kx)
                fys.append(sy - ky)
                slots.append(base[i])
                where.append((di, pi))
        if not crops:
            return surf, valid
        m = len(crops)
        t = np.asarray(crops, dtype=np.float64)
        t = t - t.mean(axis=(1, 2), keepdims=True)
        fx = np.asarray(fxs)
        fy = np.asarray(fys)
        if self.window == "hann":
            wx = fourier._hann_1d(self._t[None, :] - fx[:, None], n)
            wy = fourier._hann_1d(self._t[None, :] - fy[:, None], n)
            t = t * (wy[:, :, None] * wx[:, None, :])
        spec = np.fft.fft2(t)
        # rotate the rounding remainder out: multiply by exp(+2pi i k f / n)
        rx = np.exp(2j * np.pi * self._freqs[None, :] * fx[:, None] / n)
        ry = np.exp(2j * np.pi * self._freqs[None, :] * fy[:, None] / n)
        spec = spec * (ry[:, :, None] * rx[:, None, :])
        cross = np.conj(base_spec[slots]) * spec
        mag = np.abs(cross)
        peak = mag.max(axis=(1, 2))
        ok = peak > 0
        denom = mag + self.eps * np.where(ok, peak, 1.0)[:, None, None]
        norm = np.where(ok[:, None, None], cross / denom, 0.0)
        surfaces = np.fft.fftshift(np.real(np.fft.ifft2(norm)), axes=(1, 2))
        for k in range(m):
            di, pi = where[k]
            surf[di, pi] = surfaces[k]
            valid[di, pi] = True
        return surf, valid

    def fused_scores(self, surf, valid, scan_half: int):
        """Mean-of-pairs 1D score S(delta) for each candidate.

        Samples each pair's surface along its own disparity axis; with
        square-corner offsets those samples land on the integer lattice
        (diagonals advance one pixel per axis per unit disparity).
        Returns (score (D, 2*scan_half+1), n_pairs (D,)).
        """
        D = surf.shape[0]
        c = self.n // 2
        offs = np.arange(-scan_half, scan_half + 1)
        score = np.zeros((D, offs.size))
        for pi, (_, _, _, (dx, dy)) in enumerate(self.pairs):
            xs = c + offs * dx
            ys = c + offs * dy
            if np.allclose(xs, np.rint(xs)) and np.allclose(ys, np.rint(ys)):
                vals = surf[:, pi, np.rint(ys).astype(int), np.rint(xs).astype(int)]
            else:
                vals = np.stack([[_bilinear(surf[d, pi], x, y)
                                  for x, y in zip(xs, ys)] for d in range(D)])
            score += np.where(valid[:, pi, None], vals, 0.0)
        n_pairs = valid.sum(axis=1)
        score = score / np.maximum(n_pairs, 1)[:, None]
        return score, n_pairs


def correlate_pairs(quad, tile: tuple[int, int], expected_disparity: float,
                    rig: RigGeometry, grid: TileGrid,
                    window: str = "hann", eps: float = 1e-6) -> TileCorrelationSet:
    """Phase-correlate all six pairs of a tile at a given pre-shift.

    The first tile of each pair is extracted unshifted; the second is
    pre-shifted by the expected disparity projected on the pair's
    baseline delta. Pairs whose shifted tile leaves the image are left
    out of the set (surface None); the set is never fatal here.
    """
    corr = _TileCorrelator(quad, rig, grid, window=window, eps=eps)
    center = grid.center(*tile)
    surf, valid = corr.surfaces(center, [expected_disparity])
    surfaces = {}
    for pi, pid in enumerate(corr.pair_ids):
        if valid[0, pi]:
            surfaces[pid] = fourier.CorrelationSurface(surf[0, pi], pid)
        else:
            surfaces[pid] = None
    return TileCorrelationSet(surfaces=surfaces, pre_shift=float(expected_disparity),
                              tile=tile)


def _bilinear(surface: np.ndarray, x: float, y: float) -> float:
    h, w = surface.shape
    x0 = min(max(int(np.floor(x)), 0), w - 2)
    y0 = min(max(int(np.floor(y)), 0), h - 2)
    fx = x - x0
    fy = y - y0
    return float((1 - fy) * ((1 - fx) * surface[y0, x0] + fx * surface[y0, x0 + 1])
                 + fy * ((1 - fx) * surface[y0 + 1, x0] + fx * surface[y0 + 1, x0 + 1]))


@dataclass(frozen=True)
class FusedPeak:
    """Result of fusing one tile's correlation surfaces."""

    residual: float
    confidence: float
    score: float
    flags: int

    @property
    def ok(self) -> bool:
        return not (self.flags & FLAG_DEGENERATE)


def _peak_from_score(score: np.ndarray, scan_half: int) -> FusedPeak:
    if not np.any(score):
        return FusedPeak(0.0, 0.0, 0.0, FLAG_DEGENERATE)
    m = int(np.argmax(score))
    if m == 0 or m == score.size - 1:
        return FusedPeak(float(m - scan_half), 0.0, float(score[m]),
                         FLAG_BOUNDARY_PEAK)
    flags = 0
    vertex = fourier.parabola_vertex(score[m - 1], score[m], score[m + 1])
    if abs(vertex) > 1.0:
        vertex = float(np.clip(vertex, -1.0, 1.0))
        flags |= FLAG_CLAMPED
    confidence = float(np.clip(score[m] - 0.5 * (score[m - 1] + score[m + 1]),
                               0.0, 1.0))
    return FusedPeak(float(m - scan_half) + vertex, confidence,
                     float(score[m]), flags)


def fuse_and_argmax(cset: TileCorrelationSet, rig: RigGeometry,
                    scan_half: int = 4, min_pairs: int = 4) -> FusedPeak:
    """Combine the six surfaces into one disparity-residual estimate.

    Each pair's surface is sampled along its own disparity axis
    (bilinear in the general case; with square-corner offsets the
    samples land on the integer lattice) and the per-pair samples are
    averaged into S(delta), delta in [-scan_half, scan_half]. The
    residual is the parabola vertex through S at the integer argmax;
    confidence is the peak's prominence over its two neighbors, clamped
    to [0, 1].
    """
    deltas_by_id = dict(zip(rig.pair_ids, (d for _, _, _, d in rig.pairs)))
    valid = cset.valid_pairs
    if len(valid) < min_pairs:
        return FusedPeak(0.0, 0.0, 0.0, FLAG_DEGENERATE)
    offsets = np.arange(-scan_half, scan_half + 1)
    score = np.zeros(offsets.size)
    any_signal = False
    for pid in valid:
        surf = cset.surfaces[pid].data
        if not np.any(surf):
            continue
        any_signal = True
        c = surf.shape[0] // 2
        dx, dy = deltas_by_id[pid]
        for k, d in enumerate(offsets):
            score[k] += _bilinear(surf, c + d * dx, c + d * dy)
    if not any_signal:
        return FusedPeak(0.0, 0.0, 0.0, FLAG_DEGENERATE)
    score /= len(valid)
    return _peak_from_score(score, scan_half)


@dataclass
class DisparityField:
    """Per-tile disparity estimates with confidence and provenance."""

    disparity: np.ndarray
    confidence: np.ndarray
    method: np.ndarray      # uint8: 0 invalid, 1 poly, 2 network
    iterations: np.ndarray  # int16
    flags: np.ndarray       # uint8 bitmask

    @classmethod
    def empty(cls, shape: tuple[int, int]) -> "DisparityField":
        return cls(disparity=np.zeros(shape),
                   confidence=np.zeros(shape),
                   method=np.zeros(shape, dtype=np.uint8),
                   iterations=np.zeros(shape, dtype=np.int16),
                   flags=np.zeros(shape, dtype=np.uint8))

    @property
    def shape(self) -> tuple[int, int]:
        return self.disparity.shape

    @property
    def valid(self) -> np.ndarray:
        return self.method != METHOD_INVALID

    def copy(self) -> "DisparityField":
        return DisparityField(self.disparity.copy(), self.confidence.copy(),
                              self.method.copy(), self.iterations.copy(),
                              self.flags.copy())


@dataclass(frozen=True)
class TileEstimate:
    disparity: float
    confidence: float
    iterations: int
    flags: int
    valid: bool
    feat_pre: float = 0.0
    feat_surfaces: object = None   # (6, n, n) from the last iteration
    feat_valid: object = None      # (6,) pair mask


def _iterate(corr: _TileCorrelator, center, initial: float, d_max: float,
             max_iter: int, tol: float, scan_half: int,
             keep_surfaces: bool = False) -> TileEstimate:
    est = float(np.clip(initial, 0.0, d_max))
    flags = 0
    confidence = 0.0
    residuals: list[float] = []
    iterations = 0
    converged = False
    last = (0.0, None, None)
    for iterations in range(1, max_iter + 1):
        surf, valid = corr.surfaces(center, [est])
        if keep_surfaces:
            last = (est, surf[0], valid[0])
        if valid[0].sum() < 4:
            return TileEstimate(est, 0.0, iterations, FLAG_DEGENERATE, False)
        score, _ = corr.fused_scores(surf, valid, scan_half)
        peak = _peak_from_score(score[0], scan_half)
        if not peak.ok:
            return TileEstimate(est, 0.0, iterations, peak.flags, False)
        confidence = peak.confidence
        residuals.append(peak.residual)
        raw = est + peak.residual
        if raw < -0.5 or raw > d_max + 0.5:
            flags |= FLAG_OUT_OF_BUDGET
            est = float(np.clip(raw, 0.0, d_max))
            break
        est = float(np.clip(raw, 0.0, d_max))
        if abs(peak.residual) < tol:
            converged = True
            break
        flags |= peak.flags & (FLAG_BOUNDARY_PEAK | FLAG_CLAMPED)
    if not converged:
        flags |= FLAG_UNCONVERGED
        tail = residuals[-3:]
        if len(tail) == 3 and all(abs(r) >= tol for r in tail) \
                and tail[0] * tail[1] < 0 and tail[1] * tail[2] < 0:
            flags |= FLAG_OSCILLATION
    valid_out = converged and not (flags & FLAG_OUT_OF_BUDGET)
    return TileEstimate(est, confidence, iterations, flags, valid_out,
                        feat_pre=last[0], feat_surfaces=last[1],
                        feat_valid=last[2])


def iterate_disparity(quad, tile: tuple[int, int], initial: float,
                      d_max: float, rig: RigGeometry, grid: TileGrid,
                      max_iter: int = 8, tol: float = 0.02,
                      scan_half: int = 4, window: str = "hann") -> TileEstimate:
    """Eye-convergence loop: re-correlate at the running estimate until
    the fused residual drops below tol.

    Sign-alternating residuals still above tol after max_iter mark the
    tile as oscillating; estimates pressing past [0, d_max] are clamped
    and flagged out-of-budget.
    """
    corr = _TileCorrelator(quad, rig, grid, window=window)
    return _iterate(corr, grid.center(*tile), initial, d_max,
                    max_iter, tol, scan_half)


def _sweep(corr: _TileCorrelator, center, d_max: float, scan_half: int):
    cands = np.arange(0.0, d_max + 1e-9, 1.0)
    surf, valid = corr.surfaces(center, cands)
    enough = valid.sum(axis=1) >= 4
    if not np.any(enough):
        return None
    score, _ = corr.fused_scores(surf, valid, scan_half)
    best = None
    for di in np.nonzero(enough)[0]:
        peak = _peak_from_score(score[di], scan_half)
        if not peak.ok:
            continue
        if best is None or peak.score > best[1]:
            seed = float(np.clip(cands[di] + np.clip(peak.residual, -1.5, 1.5),
                                 0.0, d_max))
            best = (seed, peak.score)
    return best


def sweep_seed(quad, tile, d_max, rig, grid, scan_half=4, window="hann"):
    """Exhaustive 1-pix-step disparity sweep; returns (seed, score).

    Each candidate gets one correlate+fuse pass; the candidate with the
    strongest fused peak wins and its (clamped) residual is folded into
    the seed.
    """
    corr = _TileCorrelator(quad, rig, grid, window=window)
    return _sweep(corr, grid.center(*tile), d_max, scan_half)


def _solve_tile(corr: _TileCorrelator, grid: TileGrid, tile, seed, d_max,
                max_iter, tol, scan_half, keep_surfaces=False):
    if not grid.fits(*tile):
        return TileEstimate(0.0, 0.0, 0, FLAG_DEGENERATE, False)
    center = grid.center(*tile)
    if seed is None:
        found = _sweep(corr, center, d_max, scan_half)
        if found is None:
            return TileEstimate(0.0, 0.0, 0, FLAG_DEGENERATE, False)
        seed = found[0]
    return _iterate(corr, center, seed, d_max, max_iter, tol, scan_half,
                    keep_surfaces=keep_surfaces)


def _solve_chunk(args):
    (images, rig, grid, window, tiles_seeds, d_max, max_iter, tol,
     scan_half, keep_surfaces) = args
    corr = _TileCorrelator(images, rig, grid, window=window)
    out = []
    for tile, seed in tiles_seeds:
        out.append((tile, _solve_tile(corr, grid, tile, seed, d_max,
                                      max_iter, tol, scan_half,
                                      keep_surfaces)))
    return out


def _run_matcher(quad, rig, d_max, seed, grid, max_iter, tol, scan_half,
                 window, min_confidence, jobs, keep_surfaces):
    images = [image_data(im) for im in quad]
    if grid is None:
        grid = TileGrid(images[0].shape[1], images[0].shape[0])
    out = DisparityField.empty(grid.shape)
    estimates = {}

    def store(tile, est: TileEstimate):
        col, row = tile
        estimates[tile] = est
        out.disparity[row, col] = est.disparity
        out.confidence[row, col] = est.confidence
        out.iterations[row, col] = est.iterations
        out.flags[row, col] = est.flags
        ok = est.valid and est.confidence >= min_confidence
        out.method[row, col] = METHOD_POLY if ok else METHOD_INVALID

    if isinstance(seed, str) and seed == "neighbors":
        # inherently sequential: each tile seeds from solved neighbors
        corr = _TileCorrelator(images, rig, grid, window=window)
        for row in range(grid.rows):
            for col in range(grid.cols):
                neigh = []
                for dc, dr in ((-1, 0), (-1, -1), (0, -1), (1, -1)):
                    c2, r2 = col + dc, row + dr
                    if 0 <= c2 < grid.cols and 0 <= r2 < grid.rows \
                            and out.method[r2, c2] != METHOD_INVALID:
                        neigh.append(out.disparity[r2, c2])
                tile_seed = float(np.median(neigh)) if neigh else None
                est = _solve_tile(corr, grid, (col, row), tile_seed, d_max,
                                  max_iter, tol, scan_half, keep_surfaces)
                store((col, row), est)
        return out, estimates, grid

    tiles_seeds = []
    for col, row in grid.tiles():
        if isinstance(seed, DisparityField):
            tile_seed = (float(seed.disparity[row, col])
                         if seed.method[row, col] != METHOD_INVALID else None)
        else:
            tile_seed = None  # sweep
        tiles_seeds.append(((col, row), tile_seed))

    if jobs <= 1:
        results = _solve_chunk((images, rig, grid, window, tiles_seeds,
                                d_max, max_iter, tol, scan_half, keep_surfaces))
    else:
        parts = [tiles_seeds[k::jobs] for k in range(jobs)]
        args = [(images, rig, grid, window, part, d_max, max_iter, tol,
                 scan_half, keep_surfaces) for part in parts if part]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = [r for chunk in pool.map(_solve_chunk, args) for r in chunk]
    for tile, est in results:
        store(tile, est)
    return out, estimates, grid


def disparity_map(quad, rig: RigGeometry, d_max: float,
                  seed="sweep", grid: TileGrid | None = None,
                  max_iter: int = 8, tol: float = 0.02, scan_half: int = 4,
                  window: str = "hann", min_confidence: float = 0.02,
                  jobs: int = 1) -> DisparityField:
    """Run the iterative matcher over every tile of the grid.

    `seed` is "sweep" (exhaustive), "neighbors" (propagate from already
    solved neighbors in raster order), or a prior DisparityField. Tiles
    are independent work units; results are identical for any `jobs`.
    """
    out, _, _ = _run_matcher(quad, rig, d_max, seed, grid, max_iter, tol,
                             scan_half, window, min_confidence, jobs, False)
    return out


def disparity_map_with_features(quad, rig: RigGeometry, d_max: float,
                                seed="sweep", grid: TileGrid | None = None,
                                crop: int = 7, max_iter: int = 8,
                                tol: float = 0.02, scan_half: int = 4,
                                window: str = "hann",
                                min_confidence: float = 0.02, jobs: int = 1):
    """disparity_map plus network features captured from the matcher's
    final iteration (no extra correlation pass).

    The feature pre-shift channel holds the pre-shift the surfaces were
    actually computed at, which trails the final estimate by less than
    the convergence tolerance. Returns (field, features, feat_valid).
    """
    out, estimates, grid = _run_matcher(quad, rig, d_max, seed, grid, max_iter,
                                        tol, scan_half, window, min_confidence,
                                        jobs, True)
    rows, cols = grid.shape
    n_feat = 6 * crop * crop + 1
    features = np.zeros((rows, cols, n_feat))
    fvalid = np.zeros((rows, cols), dtype=bool)
    half = crop // 2
    c0 = grid.tile_size // 2
    sl = slice(c0 - half, c0 + half + 1)
    for (col, row), est in estimates.items():
        if out.method[row, col] == METHOD_INVALID or est.feat_surfaces is None:
            continue
        vec = np.zeros(n_feat)
        for pi in range(6):
            if est.feat_valid[pi]:
                vec[pi * crop * crop:(pi + 1) * crop * crop] = \
                    est.feat_surfaces[pi][sl, sl].ravel()
        vec[-1] = est.feat_pre
        features[row, col] = vec
        fvalid[row, col] = True
    return out, features, fvalid


def correlation_features(quad, rig: RigGeometry, field: DisparityField,
                         grid: TileGrid | None = None, crop: int = 7,
                         window: str = "hann"):
    """Per-tile network inputs: central crops of the six surfaces plus
    the applied pre-shift.

    Returns (features, valid): features is (rows, cols, 6*crop*crop + 1)
    with missing pairs zero-filled; valid marks tiles whose seed entry
    is usable. Pair order follows rig.pair_ids.
    """
    images = [image_data(im) for im in quad]
    if grid is None:
        grid = TileGrid(images[0].shape[1], images[0].shape[0])
    corr = _TileCorrelator(images, rig, grid, window=window)
    rows, cols = grid.shape
    n_feat = 6 * crop * crop + 1
    features = np.zeros((rows, cols, n_feat))
    valid = np.zeros((rows, cols), dtype=bool)
    half = crop // 2
    c0 = grid.tile_size // 2
    sl = slice(c0 - half, c0 + half + 1)
    for col, row in grid.tiles():
        if field.method[row, col] == METHOD_INVALID or not grid.fits(col, row):
            continue
        pre = float(field.disparity[row, col])
        surf, pv = corr.surfaces(grid.center(col, row), [pre])
        vec = np.zeros(n_feat)
        for pi in range(6):
            if pv[0, pi]:
                vec[pi * crop * crop:(pi + 1) * crop * crop] = surf[0, pi][sl, sl].ravel()
        vec[-1] = pre
        features[row, col] = vec
        valid[row, col] = True
    return features, valid
