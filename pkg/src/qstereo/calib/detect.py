"""Calibration-grid node detection.

Four stages:

1. Candidate patches are scanned in 2D bit-reversed order (early probes
   maximally spread over the frame, skipping claimed regions). A
   Hann-windowed amplitude spectrum of each patch yields the two
   dominant non-DC, non-conjugate peaks; inverting the frequency pair
   against the checkerboard fundamentals (+-1/2, +-1/2 cycles per cell)
   gives the two grid vectors in pixels.
2. A synthetic patch is rendered from those vectors and phase-correlated
   against the image patch; a peak above the acceptance threshold seeds
   a node at the matched lattice phase.
3. The wave algorithm grows the lattice breadth-first, predicting each
   neighbor from locally fitted grid vectors and re-verifying it by
   phase correlation at a lower threshold.
4. Node positions are refined by correlating against patches simulated
   through a local second-degree polynomial lattice-to-pixel model
   (with the arc pattern), iterated to a fixed point.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import fourier
from ..errors import DataError
from ..fourier import Patch, Spectrum
from ..image import image_data
from ..harness import fileio
from .pattern import TargetSpec, pattern_value

FLAG_AMBIGUOUS_LATTICE = 1


@dataclass(frozen=True)
class DetectConfig:
    scan_patch: int = 64          # stage-1 FD analysis patch (power of two)
    node_patch: int = 32          # per-node correlation patch (power of two)
    accept_threshold: float = 0.35
    wave_threshold: float = 0.25
    corr_eps: float = 0.2         # magnitude-weighted: periodic patches are sparse
    supersample: int = 4          # synthetic patch anti-aliasing
    freq_band: tuple = (0.03, 0.45)   # plausible |grid frequency|, cycles/px
    refine_passes: int = 8
    refine_tol: float = 1e-4
    min_component: int = 6


@dataclass
class GridNodeSet:
    """Detected nodes: pixel positions plus lattice indices."""

    uv: np.ndarray                 # (N, 2) int
    xy: np.ndarray                 # (N, 2) float
    corr: np.ndarray               # (N,) verification peak values
    flags: int = 0

    @classmethod
    def empty(cls) -> "GridNodeSet":
        return cls(uv=np.zeros((0, 2), dtype=int), xy=np.zeros((0, 2)),
                   corr=np.zeros(0))

    def __len__(self) -> int:
        return self.uv.shape[0]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["x", "y", "u", "v", "corr"])
            for k in range(len(self)):
                writer.writerow([f"{self.xy[k, 0]:.6f}", f"{self.xy[k, 1]:.6f}",
                                 int(self.uv[k, 0]), int(self.uv[k, 1]),
                                 f"{self.corr[k]:.4f}"])

    @classmethod
    def read_csv(cls, path) -> "GridNodeSet":
        uv, xy, corr = [], [], []
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                xy.append((float(row["x"]), float(row["y"])))
                uv.append((int(row["u"]), int(row["v"])))
                corr.append(float(row.get("corr", 1.0)))
        if not uv:
            return cls.empty()
        return cls(uv=np.asarray(uv, dtype=int), xy=np.asarray(xy),
                   corr=np.asarray(corr))

    def write_pfm(self, path) -> None:
        """4-plane layout over the lattice bounding box: X, Y, U, V."""
        if len(self) == 0:
            raise DataError("cannot write an empty node set as PFM")
        u0, v0 = self.uv.min(axis=0)
        u1, v1 = self.uv.max(axis=0)
        shape = (v1 - v0 + 1, u1 - u0 + 1)
        planes = [np.full(shape, np.nan) for _ in range(4)]
        for k in range(len(self)):
            r, c = self.uv[k, 1] - v0, self.uv[k, 0] - u0
            planes[0][r, c] = self.xy[k, 0]
            planes[1][r, c] = self.xy[k, 1]
            planes[2][r, c] = self.uv[k, 0]
            planes[3][r, c] = self.uv[k, 1]
        fileio.write_pfm_stack(path, planes)


def bit_reversed_order(n: int) -> np.ndarray:
    """0..n-1 in bit-reversed order (n rounded up to a power of two)."""
    bits = max(1, int(np.ceil(np.log2(max(n, 2)))))
    out = []
    for i in range(1 << bits):
        r = int(format(i, f"0{bits}b")[::-1], 2)
        if r < n:
            out.append(r)
    return np.asarray(out)


def scan_positions(width: int, height: int, patch: int):
    """Patch centers covering the frame, visited in 2D bit-reversed order."""
    step = patch // 2
    xs = np.arange(patch // 2, width - patch // 2 + 1, step)
    ys = np.arange(patch // 2, height - patch // 2 + 1, step)
    if xs.size == 0 or ys.size == 0:
        return []
    order_x = bit_reversed_order(xs.size)
    order_y = bit_reversed_order(ys.size)
    return [(int(xs[ix]), int(ys[iy])) for iy in order_y for ix in order_x]


def _crop(img: np.ndarray, center, size: int):
    x0 = int(round(center[0])) - size // 2
    y0 = int(round(center[1])) - size // 2
    if x0 < 0 or y0 < 0 or x0 + size > img.shape[1] or y0 + size > img.shape[0]:
        return None
    return img[y0:y0 + size, x0:x0 + size]


def _spectrum(tile: np.ndarray) -> Spectrum:
    data = tile - tile.mean()
    return fourier.forward_dft(Patch(data * fourier.hann_window(tile.shape[0])),
                               window="none")


def _amp_peak(amp: np.ndarray, mask: np.ndarray):
    """Sub-bin peak of a masked amplitude spectrum (fftshifted layout)."""
    work = np.where(mask, amp, 0.0)
    idx = int(np.argmax(work))
    py, px = divmod(idx, amp.shape[1])
    if work[py, px] <= 0:
        return None
    n = amp.shape[0]
    if 0 < px < n - 1 and 0 < py < n - 1:
        lx = np.log(amp[py, px - 1] + 1e-12)
        lm = np.log(amp[py, px] + 1e-12)
        rx = np.log(amp[py, px + 1] + 1e-12)
        fx = fourier.parabola_vertex(lx, lm, rx)
        ly = np.log(amp[py - 1, px] + 1e-12)
        ry = np.log(amp[py + 1, px] + 1e-12)
        fy = fourier.parabola_vertex(ly, lm, ry)
    else:
        fx = fy = 0.0
    return (px + fx - n // 2, py + fy - n // 2, float(amp[py, px]))


def grid_vectors_from_patch(tile: np.ndarray, freq_band) -> np.ndarray | None:
    """The two lattice step vectors (pixels) from a patch spectrum.

    Returns a 2x2 matrix with columns g1, g2 (canonicalized: positive
    determinant, g1 roughly along +x) or None when no plausible pair of
    spectral peaks exists.
    """
    n = tile.shape[0]
    windowed = (tile - tile.mean()) * fourier.hann_window(n)
    amp = np.abs(np.fft.fftshift(np.fft.fft2(windowed)))
    c = n // 2
    yy, xx = np.mgrid[0:n, 0:n]
    radius = np.hypot(xx - c, yy - c)
    mask = (radius >= max(2.5, freq_band[0] * n)) & (radius <= freq_band[1] * n)
    mask &= yy * n + xx < (c * n + c + 1)  # one half-plane: drop conjugates
    first = _amp_peak(amp, mask)
    if first is None:
        return None
    k1 = np.array(first[:2]) / n

    def suppress(peak):
        nonlocal mask
        rad = max(2.0, 0.35 * np.hypot(peak[0], peak[1]))
        d = np.hypot(xx - c - peak[0], yy - c - peak[1])
        dc = np.hypot(xx - c + peak[0], yy - c + peak[1])
        mask &= (d > rad) & (dc > rad)

    suppress(first)
    second = None
    for _ in range(4):
        cand = _amp_peak(amp, mask)
        if cand is None:
            return None
        k2 = np.array(cand[:2]) / n
        cross = abs(k1[0] * k2[1] - k1[1] * k2[0])
        if cross > 0.3 * np.linalg.norm(k1) * np.linalg.norm(k2) \
                and cand[2] > 0.2 * first[2]:
            second = cand
            break
        suppress(cand)  # collinear harmonic of the first peak
    if second is None:
        return None
    k2 = np.array(second[:2]) / n
    # checkerboard fundamentals in lattice frequency: (1/2, 1/2), (1/2, -1/2)
    w = np.column_stack([k1, k2])
    f = np.array([[0.5, 0.5], [0.5, -0.5]])
    try:
        a = np.linalg.solve(w.T, f)  # A = W^{-T} F
    except np.linalg.LinAlgError:
        return None
    return _canonical_vectors(a)


def _canonical_vectors(a: np.ndarray) -> np.ndarray:
    g1, g2 = a[:, 0].copy(), a[:, 1].copy()
    if abs(g1[0]) < abs(g2[0]):
        g1, g2 = g2, g1
    if g1[0] < 0:
        g1 = -g1
    if g2[1] < 0:
        g2 = -g2
    if g1[0] * g2[1] - g1[1] * g2[0] < 0:
        g2 = -g2
    return np.column_stack([g1, g2])


def synth_affine_patch(spec: TargetSpec, vectors: np.ndarray, uv0,
                       size: int, supersample: int = 2) -> np.ndarray:
    """Synthetic pattern patch with node `uv0` at the patch center,
    lattice geometry given by the grid-vector matrix."""
    inv = np.linalg.inv(vectors)
    return _render_patch(lambda q: q @ inv.T + np.asarray(uv0, dtype=np.float64),
                         spec, size, supersample)


def synth_quadratic_patch(spec: TargetSpec, coeffs: np.ndarray, uv0,
                          size: int, supersample: int = 2) -> np.ndarray:
    """Synthetic patch through a quadratic (du,dv) -> pixel-offset model.

    `coeffs` is (2, 6): [const, du, dv, du^2, du*dv, dv^2] per axis,
    giving offsets from the patch center. The inverse mapping runs a
    few Newton steps seeded by the affine part.
    """
    lin = coeffs[:, 1:3]
    lin_inv = np.linalg.inv(lin)
    const = coeffs[:, 0]

    def warp(q):
        duv = (q - const) @ lin_inv.T
        for _ in range(3):
            du, dv = duv[:, 0], duv[:, 1]
            basis = np.stack([np.ones_like(du), du, dv, du * du, du * dv, dv * dv],
                             axis=1)
            res = basis @ coeffs.T - q
            j11 = coeffs[0, 1] + 2 * coeffs[0, 3] * du + coeffs[0, 4] * dv
            j12 = coeffs[0, 2] + coeffs[0, 4] * du + 2 * coeffs[0, 5] * dv
            j21 = coeffs[1, 1] + 2 * coeffs[1, 3] * du + coeffs[1, 4] * dv
            j22 = coeffs[1, 2] + coeffs[1, 4] * du + 2 * coeffs[1, 5] * dv
            det = j11 * j22 - j12 * j21
            det = np.where(np.abs(det) < 1e-12, 1e-12, det)
            duv = duv - np.stack([(j22 * res[:, 0] - j12 * res[:, 1]) / det,
                                  (-j21 * res[:, 0] + j11 * res[:, 1]) / det], axis=1)
        return duv + np.asarray(uv0, dtype=np.float64)

    return _render_patch(warp, spec, size, supersample)


def _render_patch(warp, spec: TargetSpec, size: int, ss: int) -> np.ndarray:
    step = np.arange(ss) / ss - 0.5 + 0.5 / ss
    coords = (np.arange(size) - size // 2)[:, None] + step[None, :]
    coords = coords.ravel()
    gx, gy = np.meshgrid(coords, coords)
    q = np.stack([gx.ravel(), gy.ravel()], axis=1)
    uv = warp(q)
    vals = pattern_value(spec, uv[:, 0], uv[:, 1])
    img = vals.reshape(size * ss, size * ss)
    return img.reshape(size, ss, size, ss).mean(axis=(1, 3))


def _correlate_patches(synth: np.ndarray, real: np.ndarray, eps: float) -> np.ndarray:
    return fourier.phase_correlate(_spectrum(synth), _spectrum(real), eps=eps).data


def peak_near(surface: np.ndarray, expected, radius: float):
    """Strongest surface peak within `radius` of the expected shift.

    Returns (dx, dy, value) relative to zero shift, parabola-refined,
    or None when the window holds no positive sample.
    """
    n = surface.shape[0]
    c = n // 2
    yy, xx = np.mgrid[0:n, 0:n]
    mask = np.hypot(xx - c - expected[0], yy - c - expected[1]) <= radius
    work = np.where(mask, surface, -np.inf)
    idx = int(np.argmax(work))
    py, px = divmod(idx, n)
    if not np.isfinite(work[py, px]) or work[py, px] <= 0:
        return None
    x, y = float(px), float(py)
    if 0 < px < n - 1:
        x += fourier.parabola_vertex(surface[py, px - 1], surface[py, px],
                                     surface[py, px + 1])
    if 0 < py < n - 1:
        y += fourier.parabola_vertex(surface[py - 1, px], surface[py, px],
                                     surface[py + 1, px])
    return (x - c, y - c, float(surface[py, px]))


class _Detector:
    def __init__(self, img: np.ndarray, spec: TargetSpec, config: DetectConfig):
        self.img = img
        self.spec = spec
        self.config = config
        self.claim_step = config.scan_patch // 2
        h, w = img.shape
        self.claimed = np.zeros((h // self.claim_step + 2, w // self.claim_step + 2),
                                dtype=bool)

    def _claim(self, x: float, y: float):
        self.claimed[int(y / self.claim_step), int(x / self.claim_step)] = True

    def _is_claimed(self, x: float, y: float) -> bool:
        return bool(self.claimed[int(y / self.claim_step), int(x / self.claim_step)])

    # stage 2: verify a candidate patch and seed a node
    def seed_from_patch(self, center, vectors: np.ndarray):
        size = self.config.scan_patch
        real = _crop(self.img, center, size)
        if real is None:
            return None
        cell = max(np.linalg.norm(vectors[:, 0]), np.linalg.norm(vectors[:, 1]))
        if cell < 4 or cell > size / 2.5:
            return None
        synth = synth_affine_patch(self.spec, vectors, (0, 0), size,
                                   self.config.supersample)
        surf = _correlate_patches(synth, real, self.config.corr_eps)
        found = peak_near(surf, (0.0, 0.0), 1.05 * cell)
        if found is None or found[2] < self.config.accept_threshold:
            return None
        x = center[0] + found[0]
        y = center[1] + found[1]
        return (x, y, found[2])

    def _local_vectors(self, known: dict, uv) -> np.ndarray | None:
        rows = []
        targets = []
        for (du, dv) in [(a, b) for a in range(-2, 3) for b in range(-2, 3)]:
            key = (uv[0] + du, uv[1] + dv)
            if key in known:
                rows.append([1.0, du, dv])
                targets.append(known[key][:2])
        if len(rows) < 3:
            return None
        coef, *_ = np.linalg.lstsq(np.asarray(rows), np.asarray(targets), rcond=None)
        return coef[1:3].T  # columns g1, g2

    def verify_node(self, predicted, vectors: np.ndarray, uv, threshold: float):
        size = self.config.node_patch
        center = (int(round(predicted[0])), int(round(predicted[1])))
        real = _crop(self.img, center, size)
        if real is None:
            return None
        cell = max(np.linalg.norm(vectors[:, 0]), np.linalg.norm(vectors[:, 1]))
        if cell < 4 or cell > size / 1.5:
            return None
        synth = synth_affine_patch(self.spec, vectors, uv_parity(uv), size,
                                   self.config.supersample)
        surf = _correlate_patches(synth, real, self.config.corr_eps)
        expected = (predicted[0] - center[0], predicted[1] - center[1])
        found = peak_near(surf, expected, 0.45 * cell)
        if found is None or found[2] < threshold:
            return None
        off = np.hypot(found[0] - expected[0], found[1] - expected[1])
        if off > 0.45 * cell:
            return None
        return (center[0] + found[0], center[1] + found[1], found[2])

    # stage 3: breadth-first lattice growth
    def grow(self, seed, vectors: np.ndarray) -> dict:
        known = {(0, 0): seed}
        queue = deque([(0, 0)])
        while queue:
            uv = queue.popleft()
            for du, dv in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                nuv = (uv[0] + du, uv[1] + dv)
                if nuv in known:
                    continue
                local = self._local_vectors(known, nuv)
                g = local if local is not None else vectors
                base = known[uv]
                pred = (base[0] + g[0, 0] * du + g[0, 1] * dv,
                        base[1] + g[1, 0] * du + g[1, 1] * dv)
                got = self.verify_node(pred, g, nuv, self.config.wave_threshold)
                if got is None:
                    continue
                known[nuv] = got
                self._claim(got[0], got[1])
                queue.append(nuv)
        return known

    # stage 4: quadratic-model refinement to a fixed point
    def refine(self, known: dict) -> dict:
        size = self.config.node_patch
        for _ in range(self.config.refine_passes):
            updates = {}
            worst = 0.0
            for uv, (x, y, corrv) in known.items():
                coeffs, n_nb = _quadratic_fit(known, uv)
                if coeffs is None:
                    updates[uv] = (x, y, corrv)
                    continue
                center = (int(round(x)), int(round(y)))
                real = _crop(self.img, center, size)
                if real is None:
                    updates[uv] = (x, y, corrv)
                    continue
                coeffs = coeffs.copy()
                coeffs[:, 0] -= np.asarray(center, dtype=np.float64)
                synth = synth_quadratic_patch(self.spec, coeffs, uv_parity(uv),
                                              size, self.config.supersample)
                surf = _correlate_patches(synth, real, self.config.corr_eps)
                model_xy = coeffs[:, 0]  # synthetic node position in the crop
                found = peak_near(surf, (x - center[0] - model_xy[0],
                                         y - center[1] - model_xy[1]), 3.0)
                if found is None:
                    updates[uv] = (x, y, corrv)
                    continue
                nx = center[0] + model_xy[0] + found[0]
                ny = center[1] + model_xy[1] + found[1]
                worst = max(worst, np.hypot(nx - x, ny - y))
                updates[uv] = (nx, ny, found[2])
            known = updates
            if worst < self.config.refine_tol:
                break
        return known


def uv_parity(uv) -> tuple[int, int]:
    """Reduce a lattice index to its pattern parity class (0/1, 0)."""
    return ((uv[0] + uv[1]) % 2, 0)


def _quadratic_fit(known: dict, uv):
    rows = []
    targets = []
    for du in range(-2, 3):
        for dv in range(-2, 3):
            key = (uv[0] + du, uv[1] + dv)
            if key in known:
                rows.append([1.0, du, dv, du * du, du * dv, dv * dv])
                targets.append(known[key][:2])
    n = len(rows)
    if n < 3:
        return None, n
    a = np.asarray(rows)
    if n < 8:
        a = a[:, :3]  # affine fallback near the lattice rim
    coef, *_ = np.linalg.lstsq(a, np.asarray(targets), rcond=None)
    out = np.zeros((2, 6))
    out[:, :coef.shape[0]] = coef.T
    return out, n


def detect_grid(image, spec: TargetSpec,
                config: DetectConfig = DetectConfig()) -> GridNodeSet:
    """Run the full four-stage detection. Returns an empty set (never
    raises) when no pattern is found."""
    img = image_data(image)
    det = _Detector(img, spec, config)
    components = []
    for center in scan_positions(img.shape[1], img.shape[0], config.scan_patch):
        if det._is_claimed(center[0], center[1]):
            continue
        patch = _crop(img, center, config.scan_patch)
        if patch is None:
            continue
        vectors = grid_vectors_from_patch(patch, config.freq_band)
        if vectors is None:
            continue
        seed = det.seed_from_patch(center, vectors)
        if seed is None:
            continue
        nodes = det.grow(seed, vectors)
        if len(nodes) >= config.min_component:
            components.append(nodes)
            for (x, y, _) in nodes.values():
                det._claim(x, y)
    if not components:
        return GridNodeSet.empty()
    flags = 0
    if len(components) > 1:
        flags |= FLAG_AMBIGUOUS_LATTICE
        components.sort(key=lambda c: (len(c), float(np.mean([v[2] for v in c.values()]))),
                        reverse=True)
    best = det.refine(components[0])
    uv = np.asarray(sorted(best.keys()), dtype=int)
    xy = np.asarray([best[tuple(k)][:2] for k in uv])
    corr = np.asarray([best[tuple(k)][2] for k in uv])
    return GridNodeSet(uv=uv, xy=xy, corr=corr, flags=flags)
