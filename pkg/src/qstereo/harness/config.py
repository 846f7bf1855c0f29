"""TOML configuration loading for the CLI.

A config file can describe the rig, the error budget, scene-generation
difficulty, and training hyperparameters. All sections are optional;
missing keys fall back to the defaults documented in the README.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..errors import DataError
from ..rectify import DistortionModel, ModalityScale
from ..tilecorr import RigGeometry


def load_toml(path) -> dict:
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except FileNotFoundError:
        raise DataError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise DataError(f"{path}: bad TOML: {exc}")


def rig_from_config(cfg: dict) -> RigGeometry:
    rig = cfg.get("rig", {})
    return RigGeometry(
        baseline_m=float(rig.get("baseline_m", 0.15)),
        focal_length=float(rig.get("focal_length_px", 150.0)),
        sensor=(int(rig.get("sensor_width", 160)), int(rig.get("sensor_height", 120))),
        modality=str(rig.get("modality", "lwir")))


def distortion_from_config(section: dict) -> DistortionModel:
    return DistortionModel(
        focal_length=float(section.get("focal_length_px", 150.0)),
        principal_point=(float(section.get("cx", 80.0)), float(section.get("cy", 60.0))),
        k1=float(section.get("k1", 0.0)),
        k2=float(section.get("k2", 0.0)),
        k3=float(section.get("k3", 0.0)),
        d_perc=float(section.get("d_perc", 0.0)),
        fov_radius=float(section.get("fov_radius_px", 1.0)))


@dataclass
class BudgetSection:
    name: str
    model: DistortionModel
    window: float
    disparity_error: float
    rsd_f: float
    pixel_ratio: float = 12.8


def budgets_from_config(cfg: dict) -> list[BudgetSection]:
    out = []
    for section in cfg.get("budget", []):
        model = distortion_from_config(section)
        out.append(BudgetSection(
            name=str(section.get("name", f"modality{len(out)}")),
            model=model,
            window=float(section.get("window_px", 8.0)),
            disparity_error=float(section.get("disparity_error_px", 0.05)),
            rsd_f=float(section.get("rsd_f", 0.0)),
            pixel_ratio=float(section.get("pixel_ratio", 12.8))))
    if not out:
        raise DataError("config has no [[budget]] sections")
    return out


def scale_from_config(cfg: dict) -> ModalityScale:
    sec = cfg.get("modality_scale", {})
    return ModalityScale(pixel_ratio=float(sec.get("pixel_ratio", 12.8)),
                         range_error_ratio=float(sec.get("range_error_ratio", 13.0)))


def difficulty_from_config(cfg: dict) -> dict:
    sec = dict(cfg.get("scenes", {}))
    known = {"width", "height", "d_max", "contrast", "noise_sigma",
             "blur_prob", "blur_len", "rsd_f"}
    extra = set(sec) - known - {"count", "n_patches_min", "n_patches_max"}
    if extra:
        raise DataError(f"unknown [scenes] keys: {sorted(extra)}")
    out = {k: sec[k] for k in known & set(sec)}
    if "n_patches_min" in sec or "n_patches_max" in sec:
        out["n_patches"] = (int(sec.get("n_patches_min", 1)),
                            int(sec.get("n_patches_max", 3)))
    return out


@dataclass
class TrainSection:
    epochs: int = 40
    batch_scenes: int = 8
    learning_rate: float = 3e-4
    seed: int = 0
    lambda_fb: float = 0.5
    lambda_1: float = 0.2
    lambda_3: float = 0.2
    crop: int = 7


def train_from_config(cfg: dict) -> TrainSection:
    sec = cfg.get("train", {})
    out = TrainSection()
    for name in ("epochs", "batch_scenes", "seed", "crop"):
        if name in sec:
            setattr(out, name, int(sec[name]))
    for name in ("learning_rate", "lambda_fb", "lambda_1", "lambda_3"):
        if name in sec:
            setattr(out, name, float(sec[name]))
    return out
