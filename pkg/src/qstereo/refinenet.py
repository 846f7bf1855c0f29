"""Two-stage disparity refinement network, trained from scratch.

Stage 1 is a per-tile MLP (widths 256-128-32-16, leaky ReLU on all but
the last layer) fed with central crops of the six correlation surfaces
plus the applied pre-shift. Stage 2 is a single 5x5 convolution over the
stage-1 feature grid producing one disparity residual per tile; the
final prediction for a tile is its pre-shift plus that residual.

Training runs the 25-head Siamese configuration: stage 1 on each tile
of a 5x5 cluster, stage 2 once (valid convolution) for the center tile.
Computing stage 1 over a whole scene grid and convolving is the same
operation, so that is how batches are evaluated. Two weight-shared
masked variants of stage 2 (center tile only, inner 3x3) regularize
training; their L2 terms and a foreground/background in-between penalty
join the confidence-weighted main L2 in the cost.

Everything is numpy; gradients are hand-derived and checked against
central finite differences in the tests.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataError
from .tilecorr import (FLAG_EDGE_CONTEXT, METHOD_INVALID, METHOD_NETWORK,
                       DisparityField)

CHECKPOINT_MAGIC = b"QSNW"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    input_dim: int = 295          # 6 pairs x 7x7 crop + pre-shift scalar
    widths: tuple = (256, 128, 32, 16)
    leak: float = 0.1
    kernel: int = 5
    lambda_fb: float = 0.5
    lambda_1: float = 0.2
    lambda_3: float = 0.2

    def __post_init__(self):
        if len(self.widths) != 4:
            raise ValueError("stage 1 has exactly four FC layers")
        if self.kernel % 2 == 0:
            raise ValueError("stage-2 kernel must be odd")


def _mask_center(k: int) -> np.ndarray:
    m = np.zeros((k, k))
    m[k // 2, k // 2] = 1.0
    return m


def _mask_inner3(k: int) -> np.ndarray:
    m = np.zeros((k, k))
    c = k // 2
    m[c - 1:c + 2, c - 1:c + 2] = 1.0
    return m


class RefineNet:
    """Parameter container plus forward/backward passes."""

    def __init__(self, config: NetConfig = NetConfig(),
                 rng: np.random.Generator | None = None):
        self.config = config
        if rng is None:
            rng = np.random.default_rng(0)
        self.weights = []
        self.biases = []
        d_in = config.input_dim
        for w in config.widths:
            limit = np.sqrt(3.0 / d_in)  # scaled uniform fan-in
            self.weights.append(rng.uniform(-limit, limit, (d_in, w)))
            self.biases.append(np.zeros(w))
            d_in = w
        k = config.kernel
        ch = config.widths[-1]
        limit = np.sqrt(3.0 / (k * k * ch))
        self.kernel = rng.uniform(-limit, limit, (k, k, ch))
        self.kernel_bias = 0.0

    # --- parameter plumbing -------------------------------------------------

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases), start=1):
            out.append((f"fc{i}_w", w))
            out.append((f"fc{i}_b", b))
        out.append(("conv_k", self.kernel))
        out.append(("conv_b", np.array([self.kernel_bias])))
        return out

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for _, p in self.parameters()])

    def set_flat(self, flat: np.ndarray) -> None:
        pos = 0
        for i in range(4):
            for arr_name in ("weights", "biases"):
                arr = getattr(self, arr_name)[i]
                arr[...] = flat[pos:pos + arr.size].reshape(arr.shape)
                pos += arr.size
        self.kernel[...] = flat[pos:pos + self.kernel.size].reshape(self.kernel.shape)
        pos += self.kernel.size
        self.kernel_bias = float(flat[pos])
        pos += 1
        if pos != flat.size:
            raise ValueError("flat parameter vector has the wrong length")

    def copy(self) -> "RefineNet":
        dup = RefineNet.__new__(RefineNet)
        dup.config = self.config
        dup.weights = [w.copy() for w in self.weights]
        dup.biases = [b.copy() for b in self.biases]
        dup.kernel = self.kernel.copy()
        dup.kernel_bias = self.kernel_bias
        return dup

    # --- stage 1 ------------------------------------------------------------

    def stage1_forward(self, x: np.ndarray) -> np.ndarray:
        """Per-tile MLP; accepts (..., input_dim), returns (..., 16)."""
        out, _ = self._stage1(np.asarray(x, dtype=np.float64))
        return out

    def _stage1(self, x: np.ndarray):
        lead = x.shape[:-1]
        a = x.reshape(-1, x.shape[-1])
        cache = [a]
        for i in range(4):
            z = a @ self.weights[i] + self.biases[i]
            if i < 3:
                a = np.where(z > 0, z, self.config.leak * z)
            else:
                a = z
            cache.append(z)
        return a.reshape(*lead, -1), cache

    def _stage1_backward(self, cache, dout: np.ndarray, grads) -> None:
        da = dout.reshape(-1, dout.shape[-1])
        acts = [cache[0]]
        for i in range(3):  # recompute activations from cached pre-activations
            z = cache[i + 1]
            acts.append(np.where(z > 0, z, self.config.leak * z))
        for i in range(3, -1, -1):
            z = cache[i + 1]
            dz = da if i == 3 else da * np.where(z > 0, 1.0, self.config.leak)
            grads[f"fc{i+1}_w"] += acts[i].T @ dz
            grads[f"fc{i+1}_b"] += dz.sum(axis=0)
            da = dz @ self.weights[i].T

    # --- stage 2 ------------------------------------------------------------

    def stage2_forward(self, grid: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        """Valid 5x5 convolution of a (rows, cols, 16) feature grid.

        Each output is one np.dot over a contiguous window copy, so the
        result is bit-identical no matter how the input grid was
        assembled (full frame or a single Siamese cluster).
        """
        grid = np.ascontiguousarray(grid, dtype=np.float64)
        k = self.config.kernel
        if grid.ndim != 3 or grid.shape[0] < k or grid.shape[1] < k:
            raise ValueError(f"stage-2 input must be at least {k}x{k}xC, "
                             f"got {grid.shape}")
        kern = self.kernel if mask is None else self.kernel * mask[:, :, None]
        kflat = np.ascontiguousarray(kern).ravel()
        rows = grid.shape[0] - k + 1
        cols = grid.shape[1] - k + 1
        out = np.empty((rows, cols))
        for y in range(rows):
            for x in range(cols):
                window = np.ascontiguousarray(grid[y:y + k, x:x + k, :]).ravel()
                out[y, x] = np.dot(window, kflat)
        return out + self.kernel_bias

    def _stage2_backward(self, grid: np.ndarray, dout: np.ndarray,
                         mask: np.ndarray | None, grads) -> np.ndarray:
        k = self.config.kernel
        sw = np.lib.stride_tricks.sliding_window_view(grid, (k, k), axis=(0, 1))
        dk = np.einsum("yx,yxcab->abc", dout, sw)
        if mask is not None:
            dk = dk * mask[:, :, None]
        grads["conv_k"] += dk
        grads["conv_b"] += dout.sum()
        kern = self.kernel if mask is None else self.kernel * mask[:, :, None]
        dgrid = np.zeros_like(grid)
        h, w = dout.shape
        for a in range(k):
            for b in range(k):
                dgrid[a:a + h, b:b + w, :] += dout[:, :, None] * kern[a, b][None, None, :]
        return dgrid

    def zero_grads(self) -> dict:
        return {name: np.zeros_like(p) for name, p in self.parameters()}


def siamese_forward(net: RefineNet, clusters: np.ndarray) -> np.ndarray:
    """25-head Siamese training configuration.

    `clusters` is (B, 5, 5, input_dim); each cluster runs 25 shared
    stage-1 instances and one stage-2 valid convolution, yielding the
    center-tile prediction. Identical (bit for bit) to running
    stage2_forward over a stage-1 feature grid.
    """
    clusters = np.asarray(clusters, dtype=np.float64)
    k = net.config.kernel
    if clusters.ndim != 4 or clusters.shape[1] != k or clusters.shape[2] != k:
        raise ValueError(f"expected (B, {k}, {k}, D) clusters, got {clusters.shape}")
    out = np.empty(clusters.shape[0])
    for b in range(clusters.shape[0]):
        feats = net.stage1_forward(clusters[b].reshape(k * k, -1))
        out[b] = net.stage2_forward(feats.reshape(k, k, -1))[0, 0]
    return out


# --- cost -------------------------------------------------------------------


@dataclass(frozen=True)
class CostBreakdown:
    l2_main: float
    l2_between: float
    l2_center_only: float
    l2_3x3: float
    lambda_fb: float
    lambda_1: float
    lambda_3: float

    @property
    def total(self) -> float:
        return (self.l2_main + self.lambda_fb * self.l2_between
                + self.lambda_1 * self.l2_center_only
                + self.lambda_3 * self.l2_3x3)


def between_penalty(pred, fg, bg):
    """Penalty for predictions strictly between foreground and
    background: max(0, (fg - pred) (pred - bg)) / (fg - bg)^2."""
    span2 = (fg - bg) ** 2
    raw = np.maximum(0.0, (fg - pred) * (pred - bg))
    return np.where(span2 > 0, raw / np.where(span2 > 0, span2, 1.0), 0.0)


def _between_grad(pred, fg, bg):
    span2 = (fg - bg) ** 2
    inside = (fg - pred) * (pred - bg) > 0
    grad = (fg + bg - 2.0 * pred) / np.where(span2 > 0, span2, 1.0)
    return np.where(inside & (span2 > 0), grad, 0.0)


def cost_breakdown(pred, pred_center, pred_3x3, gt, conf, bimodal, fg, bg,
                   config: NetConfig) -> CostBreakdown:
    """Confidence-weighted cost over one batch of center-tile predictions.

    All prediction arrays hold full disparities (pre-shift + residual);
    the between term only sees samples whose ground truth is bimodal.
    """
    conf = np.asarray(conf, dtype=np.float64)
    wsum = conf.sum()
    if wsum <= 0:
        raise ValueError("confidences must have positive mass")
    main = float(np.sum(conf * (pred - gt) ** 2) / wsum)
    pen = between_penalty(pred, fg, bg) * bimodal
    btw = float(np.sum(conf * pen) / wsum)
    l2c = float(np.sum(conf * (pred_center - gt) ** 2) / wsum)
    l23 = float(np.sum(conf * (pred_3x3 - gt) ** 2) / wsum)
    return CostBreakdown(main, btw, l2c, l23, config.lambda_fb,
                         config.lambda_1, config.lambda_3)


# --- scene-grid training ----------------------------------------------------


@dataclass
class SceneSample:
    """One scene's worth of training data on the tile grid."""

    features: np.ndarray   # (rows, cols, input_dim); [..., -1] is the pre-shift
    gt_disparity: np.ndarray
    gt_confidence: np.ndarray
    gt_bimodal: np.ndarray
    gt_fg: np.ndarray
    gt_bg: np.ndarray
    valid: np.ndarray      # tiles usable as training targets
    scene_id: int = -1


def _forward_scene(net: RefineNet, sample: SceneSample):
    k = net.config.kernel
    rows, cols, _ = sample.features.shape
    feats, cache = net._stage1(sample.features.reshape(rows * cols, -1))
    grid = feats.reshape(rows, cols, -1)
    half = k // 2
    pre = sample.features[half:rows - half, half:cols - half, -1]
    out = net.stage2_forward(grid)
    out_c = net.stage2_forward(grid, _mask_center(k))
    out_3 = net.stage2_forward(grid, _mask_inner3(k))
    center = (slice(half, rows - half), slice(half, cols - half))
    return {
        "cache": cache, "grid": grid, "pre": pre,
        "pred": pre + out, "pred_c": pre + out_c, "pred_3": pre + out_3,
        "gt": sample.gt_disparity[center], "conf": sample.gt_confidence[center],
        "bimodal": sample.gt_bimodal[center].astype(np.float64),
        "fg": sample.gt_fg[center], "bg": sample.gt_bg[center],
        "valid": sample.valid[center],
    }


def batch_cost(net: RefineNet, samples: list[SceneSample],
               with_grads: bool = False):
    """Cost (and optionally gradients) over a batch of scene grids."""
    config = net.config
    fwd = [_forward_scene(net, s) for s in samples]
    conf_all, pred_all, predc_all, pred3_all = [], [], [], []
    gt_all, bim_all, fg_all, bg_all = [], [], [], []
    for f in fwd:
        v = f["valid"]
        conf_all.append(f["conf"][v])
        pred_all.append(f["pred"][v])
        predc_all.append(f["pred_c"][v])
        pred3_all.append(f["pred_3"][v])
        gt_all.append(f["gt"][v])
        bim_all.append(f["bimodal"][v])
        fg_all.append(f["fg"][v])
        bg_all.append(f["bg"][v])
    conf = np.concatenate(conf_all)
    breakdown = cost_breakdown(np.concatenate(pred_all), np.concatenate(predc_all),
                               np.concatenate(pred3_all), np.concatenate(gt_all),
                               conf, np.concatenate(bim_all),
                               np.concatenate(fg_all), np.concatenate(bg_all),
                               config)
    if not with_grads:
        return breakdown, None
    wsum = conf.sum()
    grads = net.zero_grads()
    k = config.kernel
    for f in fwd:
        v = f["valid"].astype(np.float64)
        w = f["conf"] * v
        dmain = 2.0 * w * (f["pred"] - f["gt"])
        dmain += config.lambda_fb * w * _between_grad(f["pred"], f["fg"], f["bg"]) \
            * f["bimodal"]
        dc = config.lambda_1 * 2.0 * w * (f["pred_c"] - f["gt"])
        d3 = config.lambda_3 * 2.0 * w * (f["pred_3"] - f["gt"])
        dgrid = net._stage2_backward(f["grid"], dmain / wsum, None, grads)
        dgrid += net._stage2_backward(f["grid"], dc / wsum, _mask_center(k), grads)
        dgrid += net._stage2_backward(f["grid"], d3 / wsum, _mask_inner3(k), grads)
        net._stage1_backward(f["cache"], dgrid.reshape(-1, dgrid.shape[-1]), grads)
    return breakdown, grads


def predict(net: RefineNet, features: np.ndarray, valid: np.ndarray,
            seed: DisparityField) -> DisparityField:
    """Full-frame inference: network residual added to the pre-shift.

    The base disparity is the features' own pre-shift channel (the
    pre-shift the correlation crops were computed at). Stage-1 features
    are edge-replicated by the kernel half-width so the output grid
    matches the tile grid; tiles whose receptive field used replicated
    context are flagged. Prediction keeps the seed's confidence and
    validity.
    """
    rows, cols, _ = features.shape
    if seed.shape != (rows, cols):
        raise ValueError("seed field and feature grid shapes differ")
    feats = net.stage1_forward(features.reshape(rows * cols, -1))
    grid = feats.reshape(rows, cols, -1)
    half = net.config.kernel // 2
    padded = np.pad(grid, ((half, half), (half, half), (0, 0)), mode="edge")
    residual = net.stage2_forward(padded)
    out = seed.copy()
    mask = valid & seed.valid
    out.disparity[mask] = features[..., -1][mask] + residual[mask]
    out.method[mask] = METHOD_NETWORK
    edge = np.zeros((rows, cols), dtype=bool)
    edge[:half], edge[-half:], edge[:, :half], edge[:, -half:] = True, True, True, True
    out.flags[mask & edge] |= FLAG_EDGE_CONTEXT
    return out


# --- optimization -----------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_scenes: int = 8
    learning_rate: float = 3e-4
    lr_schedule: tuple = ()        # (epoch, factor) pairs, applied at epoch start
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    shuffle: bool = True


@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)
    aborted: bool = False

    def write_csv(self, path) -> None:
        names = ["epoch", "l2_main", "l2_between", "l2_center_only",
                 "l2_3x3", "total", "val_rmse"]
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=names)
            writer.writeheader()
            writer.writerows(self.rows)


def train(train_samples: list[SceneSample], config: TrainConfig,
          net: RefineNet | None = None, net_config: NetConfig = NetConfig(),
          val_fn=None, checkpoint_dir=None, keep_best: bool = False):
    """Adam over scene-grid batches; returns (net, history).

    A non-finite loss aborts and restores the last finite epoch's
    parameters. `val_fn(net) -> float` is evaluated per epoch when
    given and recorded in the history; with keep_best the parameters of
    the best-validation epoch are restored at the end (early stopping).
    """
    if not train_samples:
        raise ValueError("no training samples")
    if net is None:
        net = RefineNet(net_config, rng=np.random.default_rng(config.seed))
    rng = np.random.default_rng(config.seed)
    m = {name: np.zeros_like(p) for name, p in net.parameters()}
    v = {name: np.zeros_like(p) for name, p in net.parameters()}
    step = 0
    history = TrainHistory()
    last_good = net.get_flat()
    best = (np.inf, None)
    lr = config.learning_rate
    for epoch in range(1, config.epochs + 1):
        for at, factor in config.lr_schedule:
            if epoch == at:
                lr *= factor
        order = np.arange(len(train_samples))
        if config.shuffle:
            rng.shuffle(order)
        epoch_terms = np.zeros(5)
        n_batches = 0
        for start in range(0, order.size, config.batch_scenes):
            batch = [train_samples[i] for i in order[start:start + config.batch_scenes]]
            breakdown, grads = batch_cost(net, batch, with_grads=True)
            step += 1
            for (name, p) in net.parameters():
                g = grads[name]
                m[name] = config.beta1 * m[name] + (1 - config.beta1) * g
                v[name] = config.beta2 * v[name] + (1 - config.beta2) * g * g
                mh = m[name] / (1 - config.beta1 ** step)
                vh = v[name] / (1 - config.beta2 ** step)
                upd = lr * mh / (np.sqrt(vh) + config.adam_eps)
                if name == "conv_b":
                    net.kernel_bias -= float(upd[0])
                else:
                    p -= upd
            epoch_terms += [breakdown.l2_main, breakdown.l2_between,
                            breakdown.l2_center_only, breakdown.l2_3x3,
                            breakdown.total]
            n_batches += 1
        epoch_terms /= max(n_batches, 1)
        if not np.all(np.isfinite(epoch_terms)) or not np.all(np.isfinite(net.get_flat())):
            net.set_flat(last_good)
            history.aborted = True
            break
        last_good = net.get_flat()
        row = {"epoch": epoch, "l2_main": epoch_terms[0],
               "l2_between": epoch_terms[1], "l2_center_only": epoch_terms[2],
               "l2_3x3": epoch_terms[3], "total": epoch_terms[4],
               "val_rmse": ""}
        if val_fn is not None:
            val = float(val_fn(net))
            row["val_rmse"] = val
            if val < best[0]:
                best = (val, net.get_flat())
        history.rows.append(row)
        if checkpoint_dir is not None:
            save_checkpoint(Path(checkpoint_dir) / f"epoch{epoch:04d}.qsnw", net)
    if keep_best and best[1] is not None:
        net.set_flat(best[1])
    return net, history


# --- gradient verification ---------------------------------------------------


def gradient_check(net: RefineNet, samples: list[SceneSample],
                   step: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference grads.

    The finite-difference step is scaled per parameter (normalized by
    max(1, |theta|)). Meant for small test configurations; runs over
    every parameter.
    """
    _, grads = batch_cost(net, samples, with_grads=True)
    analytic = np.concatenate([grads[name].ravel() for name, _ in net.parameters()])
    flat = net.get_flat()
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        h = step * max(1.0, abs(flat[i]))
        probe = flat.copy()
        probe[i] = flat[i] + h
        net.set_flat(probe)
        up, _ = batch_cost(net, samples)
        probe[i] = flat[i] - h
        net.set_flat(probe)
        dn, _ = batch_cost(net, samples)
        numeric[i] = (up.total - dn.total) / (2.0 * h)
    net.set_flat(flat)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


# --- checkpoint format --------------------------------------------------------
#
# magic "QSNW" | u32 version | u32 input_dim | u32 n_fc (=4) | 4x u32 widths
# | u32 kernel | u32 channels | f32 leak | parameters as little-endian f32
# in order fc1_w, fc1_b, ... fc4_w, fc4_b, conv kernel, conv bias.


def save_checkpoint(path, net: RefineNet) -> None:
    cfg = net.config
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IIII", CHECKPOINT_VERSION, cfg.input_dim, 4, cfg.widths[0]))
        f.write(struct.pack("<III", cfg.widths[1], cfg.widths[2], cfg.widths[3]))
        f.write(struct.pack("<IIf", cfg.kernel, cfg.widths[-1], cfg.leak))
        for _, p in net.parameters():
            f.write(p.astype("<f4").tobytes())


def load_checkpoint(path) -> RefineNet:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a network checkpoint")
    version, input_dim, n_fc, w0 = struct.unpack_from("<IIII", data, 4)
    if version != CHECKPOINT_VERSION or n_fc != 4:
        raise DataError(f"{path}: unsupported checkpoint layout")
    w1, w2, w3 = struct.unpack_from("<III", data, 20)
    kernel, channels, leak = struct.unpack_from("<IIf", data, 32)
    config = NetConfig(input_dim=input_dim, widths=(w0, w1, w2, w3),
                       leak=float(np.float32(leak)), kernel=kernel)
    net = RefineNet(config)
    pos = 44
    for name, p in net.parameters():
        vals = np.frombuffer(data, dtype="<f4", count=p.size, offset=pos)
        pos += 4 * p.size
        if name == "conv_b":
            net.kernel_bias = float(vals[0])
        else:
            p[...] = vals.reshape(p.shape).astype(np.float64)
    if pos != len(data):
        raise DataError(f"{path}: trailing bytes in checkpoint")
    return net
