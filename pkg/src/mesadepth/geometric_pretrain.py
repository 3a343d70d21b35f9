"""Geometric pre-training: differentiable view synthesis and its losses.

Backprojection, pinhole projection, inverse warping with manual bilinear
sampling (zero padding outside bounds, explicit valid-mask exclusion), SSIM
with 3x3 mean pooling, the photometric loss, and the ratio-form depth
inconsistency / geometry consistency loss. All ops are differentiable w.r.t.
depth and pose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .core_data import Intrinsics
from .corpus import consecutive_pairs
from .networks import (
    Checkpoint,
    EncoderSpec,
    ModelBundle,
    save_checkpoint,
    restore_bundle,
)
from .reporting import StageResult, TrainingDivergedError, plot_loss_curves, write_loss_csv

Z_MIN = 1e-3  # meters; points at or behind this plane are excluded from projection


class NoValidPointsError(ValueError):
    """Warp produced an empty valid set."""


@dataclass(frozen=True)
class SSIMParams:
    c1: float = 0.01**2
    c2: float = 0.03**2

    def __post_init__(self):
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("SSIM constants must be positive")


@dataclass(frozen=True)
class PhotometricParams:
    lam: float = 0.15  # weight of the L1 term; 1-lam weighs the SSIM term
    ssim: SSIMParams = SSIMParams()

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must be in [0, 1], got {self.lam}")


@dataclass(frozen=True)
class WarpResult:
    synthesized: torch.Tensor  # (H, W, 3), finite everywhere, meaningful on valid_mask
    valid_mask: torch.Tensor  # (H, W) bool
    projected_depth: torch.Tensor  # (H, W) depth of reference points in the source frame
    sampled_depth: torch.Tensor  # (H, W) source depth bilinearly sampled at projected coords


def backproject(depth: torch.Tensor, K: Intrinsics) -> torch.Tensor:
    """Per-pixel 3D points depth * K^-1 (u, v, 1); (H, W) -> (H, W, 3)."""
    h, w = depth.shape
    dtype = depth.dtype
    vs, us = torch.meshgrid(
        torch.arange(h, dtype=dtype), torch.arange(w, dtype=dtype), indexing="ij"
    )
    x = (us - K.cx) / K.fx
    y = (vs - K.cy) / K.fy
    return torch.stack([x * depth, y * depth, depth], dim=-1)


def project(
    points: torch.Tensor, K: Intrinsics, z_min: float = Z_MIN
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Pinhole projection of (..., 3) points -> (pixel coords, depth, valid).

    Points with z <= z_min are flagged invalid and never divided by.
    """
    z = points[..., 2]
    valid = z > z_min
    safe_z = torch.where(valid, z, torch.ones_like(z))
    u = K.fx * points[..., 0] / safe_z + K.cx
    v = K.fy * points[..., 1] / safe_z + K.cy
    return torch.stack([u, v], dim=-1), z, valid


def bilinear_sample(img: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Sample (H, W, C) image at (..., 2) pixel coords; zero outside bounds.

    Exactly-integer coordinates return the pixel value bitwise (the fractional
    weights are exactly 0/1), which the identity-warp contract relies on.
    """
    h, w, _ = img.shape
    x = coords[..., 0]
    y = coords[..., 1]
    x0 = torch.floor(x)
    y0 = torch.floor(y)
    fx = (x - x0).unsqueeze(-1)
    fy = (y - y0).unsqueeze(-1)
    x0 = x0.long()
    y0 = y0.long()

    def tap(xi: torch.Tensor, yi: torch.Tensor) -> torch.Tensor:
        inb = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        v = img[yi.clamp(0, h - 1), xi.clamp(0, w - 1)]
        return v * inb.unsqueeze(-1).to(img.dtype)

    return (
        (1 - fx) * (1 - fy) * tap(x0, y0)
        + fx * (1 - fy) * tap(x0 + 1, y0)
        + (1 - fx) * fy * tap(x0, y0 + 1)
        + fx * fy * tap(x0 + 1, y0 + 1)
    )


def inverse_warp(
    img_b: torch.Tensor,
    depth_b: torch.Tensor,
    depth_a: torch.Tensor,
    rotation: torch.Tensor,
    translation: torch.Tensor,
    K: Intrinsics,
) -> WarpResult:
    """Synthesize the reference view from the source via depth_a and the a->b pose.

    The sampling grid is computed in float64 so that an identity transform
    lands on exact integer coordinates regardless of the input dtype.
    """
    h, w = depth_a.shape
    if img_b.shape[:2] != (h, w) or depth_b.shape != (h, w):
        raise ValueError("image/depth sizes must match")
    points_a = backproject(depth_a.to(torch.float64), K)
    points_b = points_a @ rotation.to(torch.float64).T + translation.to(torch.float64)
    coords, z_b, positive = project(points_b, K)
    in_bounds = (
        (coords[..., 0] >= 0)
        & (coords[..., 0] <= w - 1)
        & (coords[..., 1] >= 0)
        & (coords[..., 1] <= h - 1)
    )
    valid = positive & in_bounds
    if not bool(valid.any()):
        raise NoValidPointsError("no valid projected points; check pose and depth")
    coords = coords.to(img_b.dtype)
    synthesized = bilinear_sample(img_b, coords)
    sampled_depth = bilinear_sample(depth_b.unsqueeze(-1), coords).squeeze(-1)
    return WarpResult(
        synthesized=synthesized,
        valid_mask=valid,
        projected_depth=z_b.to(depth_a.dtype),
        sampled_depth=sampled_depth,
    )


def ssim_map(a: torch.Tensor, b: torch.Tensor, params: SSIMParams = SSIMParams()) -> torch.Tensor:
    """Per-pixel SSIM via 3x3 mean pooling with reflection padding; (H, W, 3) -> (H, W)."""
    if a.shape != b.shape:
        raise ValueError("ssim inputs must share shape")
    x = a.permute(2, 0, 1).unsqueeze(0)
    y = b.permute(2, 0, 1).unsqueeze(0)

    def pool(z: torch.Tensor) -> torch.Tensor:
        return F.avg_pool2d(F.pad(z, (1, 1, 1, 1), mode="reflect"), 3, stride=1)

    mu_x = pool(x)
    mu_y = pool(y)
    sigma_x = pool(x * x) - mu_x * mu_x
    sigma_y = pool(y * y) - mu_y * mu_y
    sigma_xy = pool(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + params.c1) * (2 * sigma_xy + params.c2)
    den = (mu_x * mu_x + mu_y * mu_y + params.c1) * (sigma_x + sigma_y + params.c2)
    ssim = (num / den).clamp(-1.0, 1.0)
    return ssim.mean(dim=1)[0]


def photometric_loss(
    img_a: torch.Tensor,
    warp: WarpResult,
    params: PhotometricParams = PhotometricParams(),
    weight: torch.Tensor | None = None,
) -> torch.Tensor:
    """Mean over valid pixels of lam * |I_a - I_a'| + (1 - lam) * (1 - SSIM) / 2.

    Channel differences are averaged per pixel. An optional per-pixel weight
    multiplies both terms (used with weight = 1 - depth inconsistency).
    """
    valid = warp.valid_mask
    if not bool(valid.any()):
        raise NoValidPointsError("photometric loss over empty valid set")
    l1 = (img_a - warp.synthesized).abs().mean(dim=-1)
    dssim = ((1.0 - ssim_map(img_a, warp.synthesized, params.ssim)) / 2.0).clamp(0.0, 1.0)
    per_pixel = params.lam * l1 + (1.0 - params.lam) * dssim
    if weight is not None:
        per_pixel = per_pixel * weight
    return per_pixel[valid].mean()


def depth_inconsistency(warp: WarpResult) -> torch.Tensor:
    """|projected - sampled| / (projected + sampled) on the valid set, 0 elsewhere."""
    num = (warp.projected_depth - warp.sampled_depth).abs()
    den = (warp.projected_depth + warp.sampled_depth).clamp_min(1e-12)
    d = num / den
    return torch.where(warp.valid_mask, d, torch.zeros_like(d))


def geometry_consistency_loss(d_diff: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    if not bool(valid.any()):
        raise NoValidPointsError("geometry consistency over empty valid set")
    return d_diff[valid].mean()


def pose_vec_to_rt(vec: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Differentiable axis-angle 6-vector -> (rotation matrix, translation)."""
    r = vec[:3]
    t = vec[3:]
    theta_sq = (r * r).sum()
    # clamped denominators keep the unselected branch free of 0/0, which would
    # otherwise poison gradients at exactly zero rotation (NaN * 0 = NaN)
    theta_sq_safe = theta_sq.clamp_min(1e-12)
    theta = torch.sqrt(theta_sq_safe)
    small = theta_sq < 1e-8
    a = torch.where(small, 1.0 - theta_sq / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta_sq / 24.0, (1.0 - torch.cos(theta)) / theta_sq_safe)
    zero = torch.zeros((), dtype=vec.dtype, device=vec.device)
    k = torch.stack(
        [
            torch.stack([zero, -r[2], r[1]]),
            torch.stack([r[2], zero, -r[0]]),
            torch.stack([-r[1], r[0], zero]),
        ]
    )
    eye = torch.eye(3, dtype=vec.dtype, device=vec.device)
    rot = eye + a * k + b * (k @ k)
    return rot, t


@dataclass(frozen=True)
class GPConfig:
    lam: float = 0.15
    w_g: float = 0.5
    epochs: int = 10
    batch_size: int = 2
    lr: float = 1e-4
    pair_stride: int = 1
    seed: int = 0
    holdout_fraction: float = 0.1

    @classmethod
    def from_dict(cls, d: dict) -> "GPConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        if "w_G" in d:
            d["w_g"] = d.pop("w_G")
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def pair_losses(
    bundle: ModelBundle,
    img_a: torch.Tensor,
    img_b: torch.Tensor,
    K: Intrinsics,
    params: PhotometricParams,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Photometric + geometry losses summed over both pair directions."""
    both = torch.stack([img_a, img_b]).permute(0, 3, 1, 2)
    feats, _ = bundle.encoder(both)
    depths = bundle.depth_decoder(feats)[:, 0]  # (2, H, W)
    pose_fwd = bundle.pose_net(both[0:1], both[1:2])[0]
    pose_bwd = bundle.pose_net(both[1:2], both[0:1])[0]
    total_p = torch.zeros(())
    total_g = torch.zeros(())
    for ref, src, pose in ((0, 1, pose_fwd), (1, 0, pose_bwd)):
        rot, t = pose_vec_to_rt(pose)
        warp = inverse_warp(
            both[src].permute(1, 2, 0), depths[src], depths[ref], rot, t, K
        )
        d_diff = depth_inconsistency(warp)
        total_p = total_p + photometric_loss(
            both[ref].permute(1, 2, 0), warp, params
        )
        total_g = total_g + geometry_consistency_loss(d_diff, warp.valid_mask)
    return total_p / 2.0, total_g / 2.0


def _holdout_photometric(
    bundle: ModelBundle, pairs, params: PhotometricParams
) -> float:
    total = 0.0
    with torch.no_grad():
        for img_a, img_b, K in pairs:
            ta = torch.from_numpy(img_a.values)
            tb = torch.from_numpy(img_b.values)
            lp, _ = pair_losses(bundle, ta, tb, K, params)
            total += float(lp)
    return total / max(1, len(pairs))


def run_gp_stage(
    config: GPConfig,
    sequences,
    out_dir: Path | str,
    init: Checkpoint | None = None,
    encoder_spec: EncoderSpec | None = None,
) -> StageResult:
    """Joint depth + pose training with photometric and geometry losses; tag 'gp'."""
    if init is not None and init.stage != "mp":
        raise ValueError(f"geometric stage expects an 'mp' checkpoint or none, got {init.stage!r}")
    torch.set_num_threads(1)  # tiny tensors: thread sync costs more than it buys
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    parts = ("encoder", "depth_decoder", "pose_net")
    if init is not None:
        bundle = restore_bundle(init, parts, seed=config.seed)
        encoder_spec = bundle.spec
        history = init.history + ("gp",)
    else:
        encoder_spec = encoder_spec or EncoderSpec()
        bundle = ModelBundle(encoder_spec, parts, seed=config.seed)
        history = ("gp",)

    pairs = consecutive_pairs(sequences, stride=config.pair_stride)
    if not pairs:
        raise ValueError("no consecutive pairs in the corpus")
    split_rng = np.random.default_rng(config.seed)
    order = split_rng.permutation(len(pairs))
    n_hold = int(round(config.holdout_fraction * len(pairs)))
    if config.holdout_fraction > 0:
        n_hold = max(1, n_hold)
    n_hold = min(n_hold, len(pairs) - 1)
    train = [pairs[i] for i in order[n_hold:]]
    # degenerate corpora (single pair): validate on the training pair itself
    hold = [pairs[i] for i in order[:n_hold]] or train

    params = PhotometricParams(lam=config.lam)
    opt = torch.optim.Adam(bundle.parameters(), lr=config.lr)
    order_rng = np.random.default_rng(config.seed + 2)

    initial_holdout = _holdout_photometric(bundle, hold, params)
    rows: list[tuple] = []
    step = 0
    steps_per_epoch = max(1, math.ceil(len(train) / config.batch_size))
    for _epoch in range(config.epochs):
        perm = order_rng.permutation(len(train))
        for bidx in range(steps_per_epoch):
            idx = perm[bidx * config.batch_size : (bidx + 1) * config.batch_size]
            if len(idx) == 0:
                continue
            opt.zero_grad()
            lp_sum = torch.zeros(())
            lg_sum = torch.zeros(())
            for i in idx:
                img_a, img_b, K = train[i]
                lp, lg = pair_losses(
                    bundle,
                    torch.from_numpy(img_a.values),
                    torch.from_numpy(img_b.values),
                    K,
                    params,
                )
                lp_sum = lp_sum + lp
                lg_sum = lg_sum + lg
            lp_sum = lp_sum / len(idx)
            lg_sum = lg_sum / len(idx)
            loss = lp_sum + config.w_g * lg_sum
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"geometric stage diverged at step {step}: {loss}")
            loss.backward()
            opt.step()
            rows.append((step, float(lp_sum), float(lg_sum)))
            step += 1

    final_holdout = _holdout_photometric(bundle, hold, params)
    ckpt_path = out / "gp.ckpt"
    ckpt = save_checkpoint(bundle, ckpt_path, stage="gp", seed=config.seed, history=history)
    header = ["step", "photometric", "geometry"]
    log_csv = write_loss_csv(out / "gp_loss.csv", header, rows)
    curve_png = plot_loss_curves(out / "gp_loss.png", header, rows, "geometric pre-training")
    return StageResult(
        checkpoint=ckpt,
        checkpoint_path=ckpt_path,
        log_csv=log_csv,
        curve_png=curve_png,
        summary={
            "initial_holdout_photometric": initial_holdout,
            "final_holdout_photometric": final_holdout,
            "steps": step,
        },
    )
