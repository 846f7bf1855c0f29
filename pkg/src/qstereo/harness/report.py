"""Scene pipeline orchestration and Table-style reporting.

For every scene the polynomial matcher runs first; when a trained
network is supplied its prediction is evaluated next to the polynomial
result, producing one CSV row per scene (scene id, non-DNN RMSE, DNN
RMSE at the standard 10% trim) plus an average row.
"""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import gtfuse, refinenet, tilecorr
from ..gtfuse import GroundTruthField
from ..refinenet import RefineNet, SceneSample
from ..tilecorr import DisparityField, RigGeometry, TileGrid
from . import fileio, simulate


def scene_sample(quad, gt: GroundTruthField, rig: RigGeometry, d_max: float,
                 crop: int = 7, seed="sweep"):
    """Polynomial pipeline + feature extraction for one scene.

    The features fall out of the matcher's final iteration for free.
    Returns (SceneSample for training/inference, polynomial DisparityField).
    """
    field_, features, fvalid = tilecorr.disparity_map_with_features(
        quad, rig, d_max, seed=seed, crop=crop)
    valid = fvalid & gt.valid & field_.valid
    sample = SceneSample(features=features, gt_disparity=gt.disparity,
                         gt_confidence=gt.confidence, gt_bimodal=gt.bimodal,
                         gt_fg=gt.fg, gt_bg=gt.bg, valid=valid)
    return sample, field_


@dataclass
class SceneResult:
    scene_id: int
    non_dnn_rmse: float
    dnn_rmse: float | None = None


@dataclass
class PipelineReport:
    rows: list = field(default_factory=list)

    def averages(self):
        if not self.rows:
            return (float("nan"), None)
        non_dnn = float(np.mean([r.non_dnn_rmse for r in self.rows]))
        dnn_vals = [r.dnn_rmse for r in self.rows if r.dnn_rmse is not None]
        dnn = float(np.mean(dnn_vals)) if dnn_vals else None
        return non_dnn, dnn

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["scene", "non_dnn_rmse", "dnn_rmse"])
            for r in self.rows:
                writer.writerow([r.scene_id, f"{r.non_dnn_rmse:.6f}",
                                 "" if r.dnn_rmse is None else f"{r.dnn_rmse:.6f}"])
            non_dnn, dnn = self.averages()
            if self.rows:
                writer.writerow(["average", f"{non_dnn:.6f}",
                                 "" if dnn is None else f"{dnn:.6f}"])


def evaluate_scene(quad, gt: GroundTruthField, rig: RigGeometry, d_max: float,
                   net: RefineNet | None = None, trim: float = 0.1,
                   scene_id: int = 0, crop: int = 7) -> SceneResult:
    sample, field_ = scene_sample(quad, gt, rig, d_max, crop=crop)
    non_dnn = gtfuse.trimmed_rmse(field_, gt, trim)
    dnn = None
    if net is not None:
        pred = refinenet.predict(net, sample.features, sample.valid, field_)
        dnn = gtfuse.trimmed_rmse(pred, gt, trim)
    return SceneResult(scene_id=scene_id, non_dnn_rmse=non_dnn, dnn_rmse=dnn)


def _eval_job(args):
    outdir, row, rig, d_max, net_path, trim, crop = args
    quad = simulate.load_scene_images(outdir, row)
    gt = simulate.load_gt(Path(outdir) / row["gt_file"])
    net = refinenet.load_checkpoint(net_path) if net_path else None
    return evaluate_scene(quad, gt, rig, d_max, net=net, trim=trim,
                          scene_id=row["scene_id"], crop=crop)


def run_pipeline(dataset_dir, rig: RigGeometry, d_max: float,
                 net_path=None, trim: float = 0.1, jobs: int = 1,
                 split: str | None = None, crop: int = 7) -> PipelineReport:
    """Evaluate every scene of a generated dataset (optionally one split)."""
    dataset_dir = Path(dataset_dir)
    manifest = simulate.load_manifest(dataset_dir / "manifest.csv")
    rows = [r for r in manifest.scenes if split is None or r["split"] == split]
    report = PipelineReport()
    if not rows:
        return report
    args = [(dataset_dir, row, rig, d_max, net_path, trim, crop) for row in rows]
    if jobs <= 1:
        results = [_eval_job(a) for a in args]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_eval_job, args))
    report.rows = sorted(results, key=lambda r: r.scene_id)
    return report


def save_disparity_field(prefix, field_: DisparityField) -> None:
    """Write <prefix>.disparity.pfm / .confidence.pfm / .csv summary.

    Invalid tiles carry NaN in the disparity plane; the CSV holds
    per-field aggregates.
    """
    prefix = str(prefix)
    disp = field_.disparity.copy()
    disp[~field_.valid] = np.nan
    fileio.write_pfm(prefix + ".disparity.pfm", disp)
    fileio.write_pfm(prefix + ".confidence.pfm", field_.confidence)
    with open(prefix + ".csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["tiles", "valid", "mean_disparity", "mean_confidence",
                         "mean_iterations", "unconverged"])
        v = field_.valid
        writer.writerow([
            field_.disparity.size, int(v.sum()),
            f"{float(field_.disparity[v].mean()) if v.any() else float('nan'):.6f}",
            f"{float(field_.confidence[v].mean()) if v.any() else float('nan'):.6f}",
            f"{float(field_.iterations[v].mean()) if v.any() else float('nan'):.3f}",
            int(((field_.flags & tilecorr.FLAG_UNCONVERGED) != 0).sum())])


def load_disparity_field(prefix) -> DisparityField:
    prefix = str(prefix)
    disp = fileio.read_pfm(prefix + ".disparity.pfm")
    conf = fileio.read_pfm(prefix + ".confidence.pfm")
    out = DisparityField.empty(disp.shape)
    valid = np.isfinite(disp)
    out.disparity[valid] = disp[valid]
    out.confidence[...] = conf
    out.method[valid] = tilecorr.METHOD_POLY
    return out


def estimate_field_from_pfm(path) -> DisparityField:
    """Disparity PFM (NaN = invalid) -> DisparityField for evaluation."""
    disp = fileio.read_pfm(path)
    out = DisparityField.empty(disp.shape)
    valid = np.isfinite(disp)
    out.disparity[valid] = disp[valid]
    out.confidence[valid] = 1.0
    out.method[valid] = tilecorr.METHOD_POLY
    return out
