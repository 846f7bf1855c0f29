"""Command-line interface.

Subcommands: simulate | target | detect-grid | fit-calib | mre-report |
budget | depth | train | eval | report. Exit codes: 0 ok, 1 usage,
2 data error, 3 non-convergence.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import gtfuse, rectify, refinenet, tilecorr
from .calib import detect as calib_detect
from .calib import fit as calib_fit
from .calib import pattern as calib_pattern
from .errors import DataError, DivergenceError, QStereoError
from .harness import config as cfgmod
from .harness import fileio, report, simulate

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NOCONV = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="TOML configuration file")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--jobs", type=int, default=1, help="parallel workers")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qstereo",
                     description="quadocular long-range stereo depth engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic scene corpus")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=20)

    p = sub.add_parser("target", help="render synthetic calibration views")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--views", type=int, default=3)
    p.add_argument("--width", type=int, default=240)
    p.add_argument("--height", type=int, default=180)
    p.add_argument("--blur", type=float, default=0.0)
    p.add_argument("--noise", type=float, default=0.0)

    p = sub.add_parser("detect-grid", help="detect calibration nodes in an image")
    _add_common(p)
    p.add_argument("image", help="PFM or 16-bit PGM input image")
    p.add_argument("--out", required=True, help="output grid CSV")
    p.add_argument("--pfm", help="optional 4-plane PFM mirror of the grid")

    p = sub.add_parser("fit-calib", help="fit a camera from grid files")
    _add_common(p)
    p.add_argument("grids", nargs="+", help="grid CSV files (one per view)")
    p.add_argument("--out", required=True, help="camera solution file")
    p.add_argument("--refine-nodes", action="store_true",
                   help="also refine per-node 3D corrections")

    p = sub.add_parser("mre-report", help="per-view reprojection errors")
    _add_common(p)
    p.add_argument("solution")
    p.add_argument("grids", nargs="+")
    p.add_argument("--out", required=True, help="CSV output")

    p = sub.add_parser("budget", help="print the rectification error budget")
    _add_common(p)

    p = sub.add_parser("depth", help="disparity map from four images")
    _add_common(p)
    p.add_argument("images", nargs=4, help="four camera frames (PFM/PGM)")
    p.add_argument("--out", required=True, help="output prefix")
    p.add_argument("--seed-mode", default="sweep",
                   help="sweep | neighbors | prior:<prefix>")
    p.add_argument("--d-max", type=float, default=None,
                   help="disparity budget override (else from config)")
    p.add_argument("--predict", help="network checkpoint for refinement")

    p = sub.add_parser("train", help="train the refinement network")
    _add_common(p)
    p.add_argument("dataset", help="directory produced by `qstereo simulate`")
    p.add_argument("--out", required=True, help="checkpoint/history directory")
    p.add_argument("--d-max", type=float, default=None)

    p = sub.add_parser("eval", help="trimmed RMSE of an estimate vs ground truth")
    _add_common(p)
    p.add_argument("estimate", help="disparity PFM (NaN marks invalid tiles)")
    p.add_argument("gt", help="6-plane ground-truth PFM")
    p.add_argument("--trim", type=float, default=0.1)
    p.add_argument("--out", help="CSV output")
    p.add_argument("--error-map", help="per-tile |error| PFM output")

    p = sub.add_parser("report", help="evaluate a corpus (Table-style CSV)")
    _add_common(p)
    p.add_argument("dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", help="network checkpoint (adds DNN column)")
    p.add_argument("--split", choices=("train", "test"))
    p.add_argument("--d-max", type=float, default=None)
    return parser


def _load_config(args) -> dict:
    return cfgmod.load_toml(args.config) if args.config else {}


def _d_max(args, cfg: dict) -> float:
    if getattr(args, "d_max", None):
        return args.d_max
    return float(cfg.get("matcher", {}).get("d_max", 6.7))


def _read_image(path):
    path = str(path)
    if path.endswith(".pgm"):
        return fileio.read_pgm16(path).astype(np.float64)
    return fileio.read_pfm(path)


def _calib_model(cfg: dict) -> rectify.DistortionModel:
    if "camera" in cfg:
        return cfgmod.distortion_from_config(cfg["camera"])
    return rectify.DistortionModel(focal_length=200.0, principal_point=(120.0, 90.0),
                                   k1=0.03, d_perc=3.0, fov_radius=150.0)


def _target_spec(cfg: dict) -> calib_pattern.TargetSpec:
    sec = cfg.get("target", {})
    return calib_pattern.TargetSpec(
        pitch_m=float(sec.get("pitch_m", 0.18)),
        panel_width_m=float(sec.get("panel_width_m", 7.0)),
        panel_height_m=float(sec.get("panel_height_m", 3.0)),
        arcs=bool(sec.get("arcs", True)))


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    difficulty = cfgmod.difficulty_from_config(cfg) if cfg else {}
    simulate.generate_dataset(args.out, count=args.count, seed=args.seed,
                              difficulty=difficulty)
    print(f"wrote {args.count} scenes to {args.out}")
    return EXIT_OK


def cmd_target(args) -> int:
    cfg = _load_config(args)
    model = _calib_model(cfg)
    spec = _target_spec(cfg)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    size = (args.width, args.height)
    for k in range(args.views):
        pose = calib_pattern.Pose(
            rvec=tuple(rng.uniform(-0.25, 0.25, 3)),
            tvec=(float(rng.uniform(-0.3, 0.3)), float(rng.uniform(-0.2, 0.2)),
                  float(rng.uniform(2.2, 3.2))))
        img = calib_pattern.render_target(spec, pose, model, size,
                                          blur_sigma=args.blur,
                                          noise_sigma=args.noise, rng=rng)
        fileio.write_pfm(outdir / f"view{k:02d}.pfm", img.data)
        uv, xy = calib_pattern.project_nodes(spec, pose, model, size)
        calib_detect.GridNodeSet(uv=uv, xy=xy, corr=np.ones(len(uv))) \
            .write_csv(outdir / f"view{k:02d}_nodes.csv")
    print(f"wrote {args.views} views to {outdir}")
    return EXIT_OK


def cmd_detect_grid(args) -> int:
    cfg = _load_config(args)
    spec = _target_spec(cfg)
    image = _read_image(args.image)
    nodes = calib_detect.detect_grid(image, spec)
    nodes.write_csv(args.out)
    if args.pfm and len(nodes):
        nodes.write_pfm(args.pfm)
    print(f"{len(nodes)} nodes -> {args.out}")
    return EXIT_OK


def cmd_fit_calib(args) -> int:
    cfg = _load_config(args)
    spec = _target_spec(cfg)
    seed_model = _calib_model(cfg)
    views = [calib_detect.GridNodeSet.read_csv(p) for p in args.grids]
    solution = calib_fit.fit_camera(views, spec, seed_model)
    if args.refine_nodes:
        solution = calib_fit.refine_target_nodes(solution, views, spec)
    calib_fit.save_solution(args.out, solution)
    print(f"mre = {solution.mre:.5f} px -> {args.out}")
    return EXIT_OK if solution.converged else EXIT_NOCONV


def cmd_mre_report(args) -> int:
    cfg = _load_config(args)
    spec = _target_spec(cfg)
    solution = calib_fit.load_solution(args.solution)
    views = [calib_detect.GridNodeSet.read_csv(p) for p in args.grids]
    if len(views) != len(solution.poses):
        raise DataError("grid file count differs from the solution's view count")
    with open(args.out, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["view", "nodes", "mre_px"])
        for k, view in enumerate(views):
            one = calib_fit.CameraSolution(model=solution.model,
                                           poses=[solution.poses[k]],
                                           mre=0.0,
                                           corrections=solution.corrections)
            writer.writerow([k, len(view),
                             f"{calib_fit.mre(one, [view], spec):.6f}"])
        writer.writerow(["all", sum(len(v) for v in views),
                         f"{calib_fit.mre(solution, views, spec):.6f}"])
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_budget(args) -> int:
    if not args.config:
        raise DataError("budget needs --config with [[budget]] sections")
    cfg = _load_config(args)
    sections = cfgmod.budgets_from_config(cfg)
    all_ok = True
    for sec in sections:
        budget = rectify.RectificationBudget.from_requirements(
            sec.model, sec.window, sec.disparity_error, sec.rsd_f)
        print(f"[{sec.name}]")
        for name, value in rectify.budget_rows(sec.model, sec.window,
                                               sec.disparity_error, sec.rsd_f):
            print(f"  {name:34s} {value:.6g}")
        status = "ok" if budget.lens_within_budget else "OVER BUDGET"
        print(f"  lens mismatch vs allowance         {status}")
        low_dmax = budget.d_max
        print(f"  cross-modality d_max (high-res px) "
              f"{rectify.cross_modality_disparity(rectify.ModalityScale(pixel_ratio=sec.pixel_ratio), low_dmax):.6g}")
        all_ok = all_ok and budget.lens_within_budget
    return EXIT_OK if all_ok else EXIT_DATA


def cmd_depth(args) -> int:
    cfg = _load_config(args)
    rig = cfgmod.rig_from_config(cfg)
    d_max = _d_max(args, cfg)
    quad = [_read_image(p) for p in args.images]
    if args.seed_mode in ("sweep", "neighbors"):
        seed = args.seed_mode
    elif args.seed_mode.startswith("prior:"):
        seed = report.load_disparity_field(args.seed_mode[len("prior:"):])
    else:
        raise DataError(f"unknown seed mode {args.seed_mode!r}")
    field = tilecorr.disparity_map(quad, rig, d_max, seed=seed, jobs=args.jobs)
    if args.predict:
        net = refinenet.load_checkpoint(args.predict)
        features, fvalid = tilecorr.correlation_features(quad, rig, field)
        field = refinenet.predict(net, features, fvalid, field)
    report.save_disparity_field(args.out, field)
    print(f"{int(field.valid.sum())}/{field.valid.size} tiles -> {args.out}.*")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    rig = cfgmod.rig_from_config(cfg)
    d_max = _d_max(args, cfg)
    tsec = cfgmod.train_from_config(cfg)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    dataset = Path(args.dataset)
    manifest = simulate.load_manifest(dataset / "manifest.csv")
    samples = {"train": [], "test": []}
    for row in manifest.scenes:
        quad = simulate.load_scene_images(dataset, row)
        gt = simulate.load_gt(dataset / row["gt_file"])
        sample, _ = report.scene_sample(quad, gt, rig, d_max, crop=tsec.crop)
        sample.scene_id = row["scene_id"]
        samples[row["split"]].append(sample)
    if not samples["train"]:
        raise DataError("dataset has no training scenes")
    net_config = refinenet.NetConfig(
        input_dim=6 * tsec.crop * tsec.crop + 1,
        lambda_fb=tsec.lambda_fb, lambda_1=tsec.lambda_1, lambda_3=tsec.lambda_3)
    train_config = refinenet.TrainConfig(
        epochs=tsec.epochs, batch_scenes=tsec.batch_scenes,
        learning_rate=tsec.learning_rate, seed=tsec.seed)
    net, history = refinenet.train(samples["train"], train_config,
                                   net_config=net_config,
                                   checkpoint_dir=outdir)
    refinenet.save_checkpoint(outdir / "final.qsnw", net)
    history.write_csv(outdir / "history.csv")
    print(f"trained {train_config.epochs} epochs -> {outdir}/final.qsnw")
    if history.aborted:
        print("training aborted on non-finite loss; last good checkpoint kept")
        return EXIT_NOCONV
    return EXIT_OK


def cmd_eval(args) -> int:
    estimate = report.estimate_field_from_pfm(args.estimate)
    gt = simulate.load_gt(args.gt)
    value = gtfuse.trimmed_rmse(estimate, gt, args.trim)
    print(f"trimmed rmse ({args.trim:.0%} trim): {value:.6f} px")
    if args.error_map:
        fileio.write_pfm(args.error_map, gtfuse.error_map(estimate, gt))
    if args.out:
        with open(args.out, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["trim", "tiles", "rmse_px"])
            writer.writerow([args.trim, int((estimate.valid & gt.valid).sum()),
                             f"{value:.6f}"])
    return EXIT_OK


def cmd_report(args) -> int:
    cfg = _load_config(args)
    rig = cfgmod.rig_from_config(cfg)
    d_max = _d_max(args, cfg)
    rep = report.run_pipeline(args.dataset, rig, d_max,
                              net_path=args.checkpoint, trim=0.1,
                              jobs=args.jobs, split=args.split)
    rep.write_csv(args.out)
    non_dnn, dnn = rep.averages()
    if rep.rows:
        line = f"{len(rep.rows)} scenes: non-DNN avg {non_dnn:.4f}"
        if dnn is not None:
            line += f", DNN avg {dnn:.4f}"
        print(line)
    else:
        print("no scenes evaluated")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "target": cmd_target,
    "detect-grid": cmd_detect_grid,
    "fit-calib": cmd_fit_calib,
    "mre-report": cmd_mre_report,
    "budget": cmd_budget,
    "depth": cmd_depth,
    "train": cmd_train,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NOCONV
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except QStereoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
