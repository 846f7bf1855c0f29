"""Synthetic quadocular scene simulator.

Scenes are stacks of fronto-parallel textured patches over a textured
background plane. Textures are sums of random-phase sinusoids capped at
0.35x Nyquist, so every camera's view is evaluated analytically at its
disparity-displaced coordinates: there is no resampling error and the
per-tile ground truth is exact. Camera c at square-corner offset o_c
sees content displaced by disparity * o_c pixels; camera 0 sits at the
reference corner (0, 0).

Horizontal motion blur (a box filter) and per-camera focal-length
mismatch are folded into the sinusoid amplitudes/frequencies, keeping
the rendering exact; sensor noise is added last.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .. import gtfuse
from ..gtfuse import GroundTruthField
from ..image import ImageGrid
from ..tilecorr import RigGeometry, TileGrid
from . import fileio

MAX_TEXTURE_FREQ = 0.35  # cycles/pixel, keeps phase correlation well conditioned


@dataclass(frozen=True)
class Texture:
    """Band-limited random texture: sum of sinusoids below 0.35 Nyquist."""

    freqs: np.ndarray   # (K, 2) cycles/pixel
    amps: np.ndarray    # (K,)
    phases: np.ndarray  # (K,)

    @classmethod
    def random(cls, rng: np.random.Generator, n_waves: int = 48,
               contrast: float = 1.0, spectral_slope: float = 0.7,
               min_freq: float = 0.04) -> "Texture":
        angle = rng.uniform(0.0, 2.0 * np.pi, n_waves)
        radius = rng.uniform(min_freq, MAX_TEXTURE_FREQ, n_waves)
        freqs = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
        amps = radius ** (-spectral_slope)
        phases = rng.uniform(0.0, 2.0 * np.pi, n_waves)
        # normalize to the requested RMS contrast (random phases: var = sum a^2/2)
        rms = np.sqrt(np.sum(amps**2) / 2.0)
        amps = amps * (contrast / rms)
        return cls(freqs=freqs, amps=amps, phases=phases)

    def sample(self, x: np.ndarray, y: np.ndarray,
               freq_scale: float = 1.0, extra_phase: np.ndarray | None = None,
               amp_scale: np.ndarray | None = None) -> np.ndarray:
        """Evaluate at pixel coordinates (broadcastable x, y)."""
        out = np.zeros(np.broadcast(x, y).shape)
        phases = self.phases if extra_phase is None else self.phases + extra_phase
        amps = self.amps if amp_scale is None else self.amps * amp_scale
        for k in range(self.freqs.shape[0]):
            fx, fy = self.freqs[k] * freq_scale
            out += amps[k] * np.cos(2.0 * np.pi * (fx * x + fy * y) + phases[k])
        return out


@dataclass(frozen=True)
class ScenePatch:
    """Fronto-parallel textured rectangle; extent is in tile-grid cells."""

    disparity: float
    extent: tuple[int, int, int, int]  # (col0, row0, col1, row1), exclusive
    texture: Texture


@dataclass(frozen=True)
class SceneSpec:
    width: int = 160
    height: int = 120
    background_disparity: float = 0.0
    background_texture: Texture | None = None
    patches: tuple = ()
    blur_len: float = 0.0          # horizontal box blur length, pixels
    noise_sigma: float = 0.0
    focal_scales: tuple = (1.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        for p in self.patches:
            if p.disparity < self.background_disparity:
                raise ValueError("foreground patches must have disparity >= background")


@dataclass
class SimulatedScene:
    images: list            # four ImageGrid
    gt: GroundTruthField    # per-tile fused truth
    pixel_disparity: np.ndarray  # reference-camera per-pixel truth
    grid: TileGrid


def _patch_pixel_rect(extent, grid: TileGrid):
    """Pixel rectangle of a tile-cell extent (exclusive-cell convention)."""
    col0, row0, col1, row1 = extent
    half = grid.stride // 2
    x0 = grid.stride * col0 + grid.tile_size // 2 - half
    x1 = grid.stride * col1 + grid.tile_size // 2 - half
    y0 = grid.stride * row0 + grid.tile_size // 2 - half
    y1 = grid.stride * row1 + grid.tile_size // 2 - half
    return x0, y0, x1, y1


def _blur_scale(freqs_x: np.ndarray, blur_len: float) -> np.ndarray:
    if blur_len <= 0:
        return np.ones_like(freqs_x)
    arg = np.pi * freqs_x * blur_len
    return np.where(np.abs(arg) < 1e-12, 1.0, np.sin(arg) / np.where(arg == 0, 1.0, arg))


def simulate_quad(spec: SceneSpec, rig: RigGeometry,
                  rng: np.random.Generator | None = None,
                  gap_threshold: float = gtfuse.GAP_THRESHOLD,
                  min_fraction: float = gtfuse.MIN_FRACTION) -> SimulatedScene:
    """Render the four camera views and the exact per-tile ground truth.

    The per-pixel reference disparity map is aggregated into tile truth
    with the same foreground-preserving rule the ground-truth fusion
    module uses, so boundary tiles carry bimodal metadata.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    grid = TileGrid(spec.width, spec.height)
    bg_tex = spec.background_texture
    if bg_tex is None:
        bg_tex = Texture.random(np.random.default_rng(12345))
    ys, xs = np.mgrid[0:spec.height, 0:spec.width].astype(np.float64)
    ppx, ppy = spec.width / 2.0, spec.height / 2.0
    ref = np.asarray(rig.offsets[0], dtype=np.float64)

    # draw back-to-front in each camera: background, then patches by disparity
    order = sorted(range(len(spec.patches)), key=lambda i: spec.patches[i].disparity)
    images = []
    for cam in range(4):
        off = np.asarray(rig.offsets[cam], dtype=np.float64) - ref
        s = spec.focal_scales[cam]
        # focal mismatch scales coordinates about the principal point:
        # T(((p - pp)/s + pp) - d*off) evaluated via frequency/phase shifts
        img = _eval_texture(bg_tex, xs, ys, ppx, ppy, s,
                            spec.background_disparity, off, spec.blur_len)
        for i in order:
            patch = spec.patches[i]
            x0, y0, x1, y1 = _patch_pixel_rect(patch.extent, grid)
            dx = patch.disparity * off[0]
            dy = patch.disparity * off[1]
            mask = ((xs >= x0 + dx) & (xs < x1 + dx)
                    & (ys >= y0 + dy) & (ys < y1 + dy))
            if not np.any(mask):
                continue
            vals = _eval_texture(patch.texture, xs[mask], ys[mask], ppx, ppy, s,
                                 patch.disparity, off, spec.blur_len)
            img[mask] = vals
        if spec.noise_sigma > 0:
            img = img + rng.normal(0.0, spec.noise_sigma, img.shape)
        images.append(ImageGrid(img))

    # exact reference-camera disparity per pixel
    pixel_disparity = np.full((spec.height, spec.width), spec.background_disparity)
    for i in order:
        patch = spec.patches[i]
        x0, y0, x1, y1 = _patch_pixel_rect(patch.extent, grid)
        pixel_disparity[max(y0, 0):y1, max(x0, 0):x1] = patch.disparity

    gt = GroundTruthField.empty(grid.shape)
    half = grid.tile_size // 2
    for col, row in grid.tiles():
        if not grid.fits(col, row):
            continue
        cx, cy = grid.center(col, row)
        # truth aggregates over the full correlation window, so tiles on
        # object edges carry bimodal FG/BG metadata like the matcher sees
        cell = pixel_disparity[cy - half:cy + half, cx - half:cx + half]
        tile = gtfuse.fuse_samples(cell.ravel(), gap_threshold=gap_threshold,
                                   min_fraction=min_fraction)
        gt.set_tile(col, row, tile)
    return SimulatedScene(images=images, gt=gt,
                          pixel_disparity=pixel_disparity, grid=grid)


def _eval_texture(tex: Texture, xs, ys, ppx, ppy, focal_scale, disparity, off,
                  blur_len):
    # content position: t = (p - pp)/s + pp - d*off; expand into an
    # effective frequency f/s and a constant phase so evaluation stays exact
    shift_x = ppx * (1.0 - 1.0 / focal_scale) - disparity * off[0]
    shift_y = ppy * (1.0 - 1.0 / focal_scale) - disparity * off[1]
    extra_phase = 2.0 * np.pi * (tex.freqs[:, 0] * shift_x + tex.freqs[:, 1] * shift_y)
    amp_scale = _blur_scale(tex.freqs[:, 0] / focal_scale, blur_len)
    return tex.sample(xs, ys, freq_scale=1.0 / focal_scale,
                      extra_phase=extra_phase, amp_scale=amp_scale)


@dataclass
class SceneRecipe:
    """Randomized scene parameters, kept for the dataset manifest."""

    scene_id: int
    seed: int
    split: str
    spec: SceneSpec


def random_scene(rng: np.random.Generator, width: int = 160, height: int = 120,
                 d_max: float = 6.0, n_patches: tuple[int, int] = (1, 3),
                 contrast: float = 1.0, noise_sigma: float = 0.0,
                 blur_prob: float = 0.0, blur_len: float = 3.0,
                 rsd_f: float = 0.0) -> SceneSpec:
    """Draw a random fronto-parallel scene within the disparity budget."""
    grid = TileGrid(width, height)
    bg = float(rng.uniform(0.0, 0.35 * d_max))
    patches = []
    n = int(rng.integers(n_patches[0], n_patches[1] + 1))
    for _ in range(n):
        w = int(rng.integers(4, max(5, grid.cols // 2)))
        h = int(rng.integers(3, max(4, grid.rows // 2)))
        c0 = int(rng.integers(1, max(2, grid.cols - w - 1)))
        r0 = int(rng.integers(1, max(2, grid.rows - h - 1)))
        disp = float(rng.uniform(bg + 0.8, d_max))
        patches.append(ScenePatch(
            disparity=disp, extent=(c0, r0, c0 + w, r0 + h),
            texture=Texture.random(rng, contrast=contrast)))
    blur = blur_len if rng.uniform() < blur_prob else 0.0
    scales = 1.0 + rng.normal(0.0, rsd_f, 4) if rsd_f > 0 else np.ones(4)
    return SceneSpec(width=width, height=height, background_disparity=bg,
                     background_texture=Texture.random(rng, contrast=contrast),
                     patches=tuple(patches), blur_len=blur,
                     noise_sigma=noise_sigma, focal_scales=tuple(scales))


@dataclass
class DatasetManifest:
    scenes: list  # of dict rows

    def train_ids(self):
        return [r["scene_id"] for r in self.scenes if r["split"] == "train"]

    def test_ids(self):
        return [r["scene_id"] for r in self.scenes if r["split"] == "test"]


MANIFEST_FIELDS = ["scene_id", "split", "seed", "image_files", "gt_file"]


def generate_dataset(outdir, count: int, seed: int,
                     difficulty: dict | None = None) -> DatasetManifest:
    """Write a deterministic synthetic corpus: images + GT + manifest.

    The split is 80/20 by scene id (first 80% train), byte-identical for
    identical seeds. GT files are 6-plane stacked PFMs (disparity,
    confidence, valid, bimodal, fg, bg).
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    difficulty = dict(difficulty or {})
    rows = []
    n_train = int(round(count * 0.8))
    for i in range(count):
        scene_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        rng = np.random.default_rng(scene_seed)
        spec = random_scene(rng, **difficulty)
        scene = simulate_quad(spec, RigGeometry(), rng=rng)
        image_files = []
        for cam, img in enumerate(scene.images):
            name = f"scene{i:04d}_cam{cam}.pfm"
            fileio.write_pfm(outdir / name, img.data)
            image_files.append(name)
        gt_name = f"scene{i:04d}_gt.pfm"
        save_gt(outdir / gt_name, scene.gt)
        rows.append({"scene_id": i, "split": "train" if i < n_train else "test",
                     "seed": scene_seed, "image_files": ";".join(image_files),
                     "gt_file": gt_name})
    manifest = DatasetManifest(scenes=rows)
    with open(outdir / "manifest.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=MANIFEST_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    return manifest


def load_manifest(path) -> DatasetManifest:
    with open(path, newline="") as f:
        rows = []
        for row in csv.DictReader(f):
            row["scene_id"] = int(row["scene_id"])
            row["seed"] = int(row["seed"])
            rows.append(row)
    return DatasetManifest(scenes=rows)


def save_gt(path, gt: GroundTruthField) -> None:
    fileio.write_pfm_stack(path, [gt.disparity, gt.confidence,
                                  gt.valid.astype(np.float64),
                                  gt.bimodal.astype(np.float64),
                                  gt.fg, gt.bg])


def load_gt(path) -> GroundTruthField:
    planes = fileio.read_pfm_stack(path)
    if len(planes) != 6:
        raise ValueError(f"{path}: expected 6 GT planes, found {len(planes)}")
    return GroundTruthField(disparity=planes[0], confidence=planes[1],
                            valid=planes[2] > 0.5, bimodal=planes[3] > 0.5,
                            fg=planes[4], bg=planes[5])


def load_scene_images(outdir, row) -> list:
    return [ImageGrid(fileio.read_pfm(Path(outdir) / name))
            for name in row["image_files"].split(";")]
