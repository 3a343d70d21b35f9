"""Supervised fine-tuning and the depth evaluation suite.

Fine-tuning uses a scale-invariant log loss with a polynomial learning-rate
decay. Evaluation covers the standard indoor depth metrics (RMSE, delta
thresholds, REL, log10) and the boundary/planarity out-of-distribution
metrics (DBE accuracy/completeness in pixels, planarity deviation in cm,
plane-orientation error in degrees, AbsRel).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .core_data import DepthMap, Image, Intrinsics
from .corpus import labeled_frames
from .networks import (
    Checkpoint,
    EncoderSpec,
    ModelBundle,
    restore_bundle,
    save_checkpoint,
)
from .reporting import StageResult, TrainingDivergedError, plot_loss_curves, write_loss_csv

SILOG_VARIANCE_WEIGHT = 0.85


class EmptyEvalError(ValueError):
    """No valid pixels (or degenerate inputs) for a metric."""


@dataclass(frozen=True)
class EvalConfig:
    cap: float = 10.0  # meters; gt above this is excluded, predictions clipped
    min_depth: float = 1e-3
    scaling: str = "none"  # "none" (metric checkpoints) | "per-image-median"
    dbe_truncation: float = 10.0  # pixels
    edge_threshold: float = 0.1  # on the relative depth gradient

    def __post_init__(self):
        if self.cap <= 0:
            raise ValueError("depth cap must be positive")
        if self.scaling not in ("none", "per-image-median"):
            raise ValueError(f"unknown scaling mode {self.scaling!r}")


@dataclass(frozen=True)
class DepthMetrics:
    rmse: float
    delta1: float
    delta2: float
    delta3: float
    rel: float
    log10: float

    def __post_init__(self):
        if not (self.delta1 <= self.delta2 + 1e-12 and self.delta2 <= self.delta3 + 1e-12):
            raise ValueError("delta thresholds must be nondecreasing")
        for name in ("rmse", "delta1", "delta2", "delta3", "rel", "log10"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    def as_row(self) -> list[float]:
        return [self.rmse, self.delta1, self.delta2, self.delta3, self.rel, self.log10]

    @staticmethod
    def columns() -> list[str]:
        return ["rmse", "delta1", "delta2", "delta3", "rel", "log10"]


@dataclass(frozen=True)
class IbimsMetrics:
    dbe_acc: float | None  # pixels; None when no predicted/gt edges exist
    dbe_comp: float | None
    pe_plan: float | None  # centimeters
    pe_orie: float | None  # degrees
    absrel: float

    def __post_init__(self):
        for name in ("dbe_acc", "dbe_comp", "pe_plan", "pe_orie"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be nonnegative")

    @staticmethod
    def columns() -> list[str]:
        return ["dbe_acc", "dbe_comp", "pe_plan", "pe_orie", "absrel"]


def apply_median_scaling(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Scale predictions so their median matches the ground truth median."""
    scale = np.median(gt) / np.median(pred)
    return pred * scale


def _valid_pixels(pred: DepthMap, gt: DepthMap, cfg: EvalConfig) -> np.ndarray:
    return (
        gt.valid_mask
        & pred.valid_mask
        & (gt.depth >= cfg.min_depth)
        & (gt.depth <= cfg.cap)
    )


def _prepared_values(
    pred: DepthMap, gt: DepthMap, cfg: EvalConfig
) -> tuple[np.ndarray, np.ndarray]:
    valid = _valid_pixels(pred, gt, cfg)
    if not valid.any():
        raise EmptyEvalError("no valid pixels for evaluation")
    p = pred.depth[valid].astype(np.float64)
    g = gt.depth[valid].astype(np.float64)
    if cfg.scaling == "per-image-median":
        p = apply_median_scaling(p, g)
    p = np.clip(p, cfg.min_depth, cfg.cap)
    return p, g


def nyu_metrics(pred: DepthMap, gt: DepthMap, cfg: EvalConfig = EvalConfig()) -> DepthMetrics:
    p, g = _prepared_values(pred, gt, cfg)
    ratio = np.maximum(p / g, g / p)
    return DepthMetrics(
        rmse=float(np.sqrt(np.mean((p - g) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25**2)),
        delta3=float(np.mean(ratio < 1.25**3)),
        rel=float(np.mean(np.abs(p - g) / g)),
        log10=float(np.mean(np.abs(np.log10(p) - np.log10(g)))),
    )


def detect_depth_edges(depth: np.ndarray, threshold: float) -> np.ndarray:
    """Pixels where the depth-normalized gradient magnitude exceeds the threshold."""
    d = depth.astype(np.float64)
    gx = np.zeros_like(d)
    gy = np.zeros_like(d)
    gx[:, 1:-1] = (d[:, 2:] - d[:, :-2]) / 2.0
    gy[1:-1, :] = (d[2:, :] - d[:-2, :]) / 2.0
    return np.hypot(gx, gy) / d > threshold


def _fit_plane(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares plane through (N, 3) points: returns (unit normal, centroid)."""
    centroid = points.mean(axis=0)
    centered = points - centroid
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    return vt[-1], centroid


def ibims_metrics(
    pred: DepthMap,
    gt: DepthMap,
    gt_edges: np.ndarray,
    plane_masks: list[tuple[np.ndarray, np.ndarray]],
    K: Intrinsics,
    cfg: EvalConfig = EvalConfig(),
) -> IbimsMetrics:
    """Depth-boundary and planarity errors plus AbsRel.

    plane_masks pairs a boolean region mask with the ground-truth plane normal.
    Degenerate inputs (no edges, no planes) yield None for the affected fields
    rather than failing the run.
    """
    gt_edges = np.asarray(gt_edges, dtype=bool)
    pred_edges = detect_depth_edges(pred.depth, cfg.edge_threshold)

    dbe_acc = dbe_comp = None
    if gt_edges.any():
        theta = cfg.dbe_truncation
        if pred_edges.any():
            dist_to_gt = ndimage.distance_transform_edt(~gt_edges)
            dbe_acc = float(np.mean(np.minimum(dist_to_gt[pred_edges], theta)))
            dist_to_pred = ndimage.distance_transform_edt(~pred_edges)
            dbe_comp = float(np.mean(np.minimum(dist_to_pred[gt_edges], theta)))

    pe_plan = pe_orie = None
    if plane_masks:
        us, vs = np.meshgrid(np.arange(pred.width), np.arange(pred.height))
        x = (us - K.cx) / K.fx * pred.depth
        y = (vs - K.cy) / K.fy * pred.depth
        points = np.stack([x, y, pred.depth], axis=-1).astype(np.float64)
        plan_errors = []
        orie_errors = []
        for mask, gt_normal in plane_masks:
            mask = np.asarray(mask, dtype=bool)
            if mask.sum() < 3:
                raise EmptyEvalError("plane mask needs at least 3 pixels")
            pts = points[mask]
            normal, centroid = _fit_plane(pts)
            residuals = (pts - centroid) @ normal
            plan_errors.append(float(np.sqrt(np.mean(residuals**2))) * 100.0)  # meters -> cm
            gt_n = np.asarray(gt_normal, dtype=np.float64)
            gt_n = gt_n / np.linalg.norm(gt_n)
            cosang = abs(float(normal @ gt_n))  # plane orientation is sign-free
            orie_errors.append(math.degrees(math.acos(min(1.0, cosang))))
        pe_plan = float(np.mean(plan_errors))
        pe_orie = float(np.mean(orie_errors))

    p, g = _prepared_values(pred, gt, cfg)
    absrel = float(np.mean(np.abs(p - g) / g))
    return IbimsMetrics(
        dbe_acc=dbe_acc, dbe_comp=dbe_comp, pe_plan=pe_plan, pe_orie=pe_orie, absrel=absrel
    )


def planar_tiles(
    gt: DepthMap,
    K: Intrinsics,
    tile: int = 16,
    rms_threshold_m: float = 0.002,
    max_tiles: int = 4,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Derive planar-region masks from ground truth for planarity evaluation.

    Fits a plane to each full-valid tile of the gt depth map and keeps the
    flattest ones; returns (mask, gt plane normal) pairs usable as the
    plane_masks argument of ibims_metrics.
    """
    h, w = gt.depth.shape
    us, vs = np.meshgrid(np.arange(w), np.arange(h))
    x = (us - K.cx) / K.fx * gt.depth
    y = (vs - K.cy) / K.fy * gt.depth
    points = np.stack([x, y, gt.depth], axis=-1).astype(np.float64)
    candidates = []
    for r0 in range(0, h - tile + 1, tile):
        for c0 in range(0, w - tile + 1, tile):
            block_valid = gt.valid_mask[r0 : r0 + tile, c0 : c0 + tile]
            if not block_valid.all():
                continue
            pts = points[r0 : r0 + tile, c0 : c0 + tile].reshape(-1, 3)
            normal, centroid = _fit_plane(pts)
            rms = float(np.sqrt(np.mean(((pts - centroid) @ normal) ** 2)))
            if rms <= rms_threshold_m:
                mask = np.zeros((h, w), dtype=bool)
                mask[r0 : r0 + tile, c0 : c0 + tile] = True
                candidates.append((rms, mask, normal))
    candidates.sort(key=lambda t: t[0])
    return [(mask, normal) for _, mask, normal in candidates[:max_tiles]]


def relative_improvement(baseline: float, improved: float, higher_is_better: bool = False) -> float:
    """Percent improvement versus the baseline, sign-aware for metric direction."""
    if baseline <= 0:
        raise ValueError("baseline must be positive")
    if higher_is_better:
        return 100.0 * (improved - baseline) / baseline
    return 100.0 * (baseline - improved) / baseline


# ---------------------------------------------------------------------------
# Fine-tuning
# ---------------------------------------------------------------------------


def polynomial_lr(step: int, total_steps: int, lr_max: float, lr_min: float, power: float = 0.9) -> float:
    """lr_max at step 0 decaying polynomially to lr_min at the final step."""
    if total_steps <= 1:
        return lr_min
    frac = min(max(step / (total_steps - 1), 0.0), 1.0)
    return lr_min + (lr_max - lr_min) * (1.0 - frac) ** power


def silog_loss(pred: torch.Tensor, gt: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Variance-weighted scale-invariant log loss."""
    if not bool(valid.any()):
        raise EmptyEvalError("scale-invariant loss over empty valid set")
    d = torch.log(pred[valid]) - torch.log(gt[valid])
    return (d * d).mean() - SILOG_VARIANCE_WEIGHT * d.mean() ** 2


@dataclass(frozen=True)
class FTConfig:
    epochs: int = 10
    batch_size: int = 4
    lr_max: float = 1e-3
    lr_min: float = 1e-4
    poly_power: float = 0.9
    encoder_lr_scale: float = 1.0  # <1 protects pre-trained features (discriminative lr)
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "FTConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def predict_depth(bundle: ModelBundle, image: Image) -> DepthMap:
    with torch.no_grad():
        x = torch.from_numpy(image.values).permute(2, 0, 1).unsqueeze(0)
        feats, _ = bundle.encoder(x)
        depth = bundle.depth_decoder(feats)[0, 0]
    return DepthMap.dense(depth.numpy())


def evaluate_on_frames(
    bundle: ModelBundle, labeled: list[tuple[Image, DepthMap, Intrinsics]], cfg: EvalConfig
) -> tuple[DepthMetrics, list[DepthMetrics]]:
    """Per-image metrics and their mean over the set."""
    if not labeled:
        raise EmptyEvalError("no labeled frames to evaluate")
    per_image = [nyu_metrics(predict_depth(bundle, img), gt, cfg) for img, gt, _ in labeled]
    rows = np.array([m.as_row() for m in per_image], dtype=np.float64)
    mean = rows.mean(axis=0)
    return DepthMetrics(*[float(v) for v in mean]), per_image


def run_finetune_stage(
    config: FTConfig,
    sequences,
    out_dir: Path | str,
    init: Checkpoint | None = None,
    max_frames: int | None = None,
    encoder_spec: EncoderSpec | None = None,
) -> StageResult:
    """Supervised fine-tuning with the scale-invariant log loss; tag 'finetune'."""
    torch.set_num_threads(1)  # tiny tensors: thread sync costs more than it buys
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    labeled = labeled_frames(sequences)
    if not labeled:
        raise ValueError("fine-tuning needs frames with ground-truth depth")
    if max_frames is not None and len(labeled) > max_frames:
        # deterministic, evenly spread over the pool (stratifies across sequences)
        pick = np.linspace(0, len(labeled) - 1, max_frames).round().astype(int)
        labeled = [labeled[i] for i in pick]

    parts = ("encoder", "depth_decoder")
    if init is not None:
        bundle = restore_bundle(init, parts, seed=config.seed)
        history = init.history + ("finetune",)
    else:
        bundle = ModelBundle(encoder_spec or EncoderSpec(), parts, seed=config.seed)
        history = ("finetune",)

    items = [
        (
            torch.from_numpy(img.values).permute(2, 0, 1),
            torch.from_numpy(gt.depth),
            torch.from_numpy(gt.valid_mask),
        )
        for img, gt, _ in labeled
    ]
    steps_per_epoch = max(1, math.ceil(len(items) / config.batch_size))
    total_steps = steps_per_epoch * config.epochs
    opt = torch.optim.Adam(
        [
            {"params": bundle.encoder.parameters(), "lr_scale": config.encoder_lr_scale},
            {"params": bundle.depth_decoder.parameters(), "lr_scale": 1.0},
        ],
        lr=config.lr_max,
    )
    order_rng = np.random.default_rng(config.seed + 2)

    rows: list[tuple] = []
    step = 0
    for _epoch in range(config.epochs):
        perm = order_rng.permutation(len(items))
        for bidx in range(steps_per_epoch):
            idx = perm[bidx * config.batch_size : (bidx + 1) * config.batch_size]
            if len(idx) == 0:
                continue
            lr = polynomial_lr(step, total_steps, config.lr_max, config.lr_min, config.poly_power)
            for group in opt.param_groups:
                group["lr"] = lr * group["lr_scale"]
            opt.zero_grad()
            imgs = torch.stack([items[i][0] for i in idx])
            gts = torch.stack([items[i][1] for i in idx])
            valids = torch.stack([items[i][2] for i in idx])
            feats, _ = bundle.encoder(imgs)
            pred = bundle.depth_decoder(feats)[:, 0]
            loss = silog_loss(pred, gts, valids)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"fine-tuning diverged at step {step}: {loss}")
            loss.backward()
            opt.step()
            rows.append((step, float(loss), lr))
            step += 1

    ckpt_path = out / "finetune.ckpt"
    ckpt = save_checkpoint(bundle, ckpt_path, stage="finetune", seed=config.seed, history=history)
    header = ["step", "silog", "lr"]
    log_csv = write_loss_csv(out / "finetune_loss.csv", header, rows)
    curve_png = plot_loss_curves(out / "finetune_loss.png", header, rows, "supervised fine-tuning")
    return StageResult(
        checkpoint=ckpt,
        checkpoint_path=ckpt_path,
        log_csv=log_csv,
        curve_png=curve_png,
        summary={"steps": step, "final_train_loss": rows[-1][1] if rows else None,
                 "n_labeled": len(labeled)},
    )
