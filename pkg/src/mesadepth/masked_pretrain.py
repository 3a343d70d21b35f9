"""Masked pre-training: random patch masking and masked-region L1 reconstruction.

The reconstruction target is the raw image; only masked pixels contribute to
the loss, normalized by the number of masked pixels with channel differences
averaged per pixel (invariant to channel count).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .core_data import Image
from .corpus import all_images
from .networks import Checkpoint, EncoderSpec, ModelBundle, save_checkpoint
from .reporting import StageResult, TrainingDivergedError, plot_loss_curves, write_loss_csv


class MaskError(ValueError):
    """Invalid mask geometry or degenerate mask request."""


class NoMaskedPixelsError(ValueError):
    """Loss requested over an empty mask."""


@dataclass(frozen=True)
class MaskSpec:
    patch_size: int = 8
    mask_ratio: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.mask_ratio < 1.0:
            raise MaskError(f"mask_ratio must be in (0, 1), got {self.mask_ratio}")
        if self.patch_size < 1:
            raise MaskError("patch_size must be >= 1")


@dataclass(frozen=True)
class MaskedBatch:
    original: Image
    masked_input: Image
    mask: np.ndarray  # (H, W) bool, True = masked

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=bool)
        same = self.masked_input.values[~m] == self.original.values[~m]
        if not bool(same.all()):
            raise MaskError("masked_input must equal original outside the mask")
        object.__setattr__(self, "mask", m)


def sample_mask(
    h: int, w: int, spec: MaskSpec, rng: np.random.Generator | None = None
) -> np.ndarray:
    """Patchwise boolean mask; masked-patch count = round(ratio * num_patches).

    Degenerate outcomes (no masked patch, or no visible patch) are rejected.
    """
    ps = spec.patch_size
    if h % ps != 0 or w % ps != 0:
        raise MaskError(f"patch_size {ps} does not divide image size {h}x{w}")
    ph, pw = h // ps, w // ps
    n_patches = ph * pw
    n_masked = int(round(spec.mask_ratio * n_patches))
    if n_masked >= n_patches:
        raise MaskError(f"mask ratio {spec.mask_ratio} leaves no visible patch")
    if n_masked < 1:
        raise MaskError(f"mask ratio {spec.mask_ratio} masks no patch")
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    chosen = rng.choice(n_patches, size=n_masked, replace=False)
    patch_mask = np.zeros(n_patches, dtype=bool)
    patch_mask[chosen] = True
    return np.kron(patch_mask.reshape(ph, pw), np.ones((ps, ps), dtype=bool))


def apply_mask(
    image: torch.Tensor, mask: torch.Tensor, token_value: torch.Tensor
) -> torch.Tensor:
    """Replace masked pixels with the (learnable) per-channel token; (H, W, 3) in/out."""
    if image.shape[:2] != mask.shape:
        raise MaskError(f"mask shape {tuple(mask.shape)} does not match image {tuple(image.shape)}")
    return torch.where(mask[..., None], token_value.reshape(1, 1, 3).to(image.dtype), image)


def masked_l1_loss(
    pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor
) -> torch.Tensor:
    """Mean over masked pixels of the per-pixel channel-mean absolute difference."""
    if not bool(mask.any()):
        raise NoMaskedPixelsError("loss undefined for an empty mask")
    per_pixel = (pred - target).abs().mean(dim=-1)
    return per_pixel[mask].mean()


def make_masked_batch(image: Image, mask: np.ndarray, token_value: np.ndarray) -> MaskedBatch:
    masked = apply_mask(
        torch.from_numpy(image.values),
        torch.from_numpy(np.asarray(mask, dtype=bool)),
        torch.as_tensor(np.asarray(token_value, dtype=np.float32)),
    )
    return MaskedBatch(original=image, masked_input=Image(values=masked.numpy()), mask=mask)


@dataclass(frozen=True)
class MPConfig:
    patch_size: int = 8
    mask_ratio: float = 0.6
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    holdout_fraction: float = 0.1

    @classmethod
    def from_dict(cls, d: dict) -> "MPConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def _holdout_eval(
    bundle: ModelBundle, images: list[torch.Tensor], spec: MaskSpec
) -> float:
    """Masked reconstruction loss on the held-out set with a fixed mask stream."""
    rng = np.random.default_rng(spec.seed)
    total = 0.0
    with torch.no_grad():
        for img in images:
            mask = torch.from_numpy(sample_mask(img.shape[0], img.shape[1], spec, rng))
            masked = apply_mask(img, mask, bundle.mask_token)
            x = masked.permute(2, 0, 1).unsqueeze(0)
            feats, _ = bundle.encoder(x)
            recon = bundle.mp_head(feats[-1])[0].permute(1, 2, 0)
            total += float(masked_l1_loss(recon, img, mask))
    return total / len(images)


def run_mp_stage(
    config: MPConfig,
    sequences,
    out_dir: Path | str,
    encoder_spec: EncoderSpec | None = None,
) -> StageResult:
    """Train encoder + linear reconstruction head on masked images; tag 'mp'."""
    torch.set_num_threads(1)  # tiny tensors: thread sync costs more than it buys
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    encoder_spec = encoder_spec or EncoderSpec()
    images = all_images(sequences)
    if len(images) < 2:
        raise ValueError("masked pre-training needs at least 2 images")

    split_rng = np.random.default_rng(config.seed)
    order = split_rng.permutation(len(images))
    n_hold = max(1, int(round(config.holdout_fraction * len(images))))
    hold_idx = set(order[:n_hold].tolist())
    tensors = [torch.from_numpy(img.values) for img in images]
    train = [t for i, t in enumerate(tensors) if i not in hold_idx]
    held = [t for i, t in enumerate(tensors) if i in hold_idx]

    bundle = ModelBundle(
        encoder_spec, parts=("encoder", "mp_head", "mask_token"), seed=config.seed
    )
    opt = torch.optim.Adam(bundle.parameters(), lr=config.lr)
    spec = MaskSpec(config.patch_size, config.mask_ratio, seed=config.seed)
    mask_rng = np.random.default_rng(config.seed + 1)  # dedicated mask stream
    order_rng = np.random.default_rng(config.seed + 2)
    eval_spec = MaskSpec(config.patch_size, config.mask_ratio, seed=config.seed + 3)

    initial_holdout = _holdout_eval(bundle, held, eval_spec)
    rows: list[tuple] = []
    step = 0
    steps_per_epoch = max(1, math.ceil(len(train) / config.batch_size))
    for _epoch in range(config.epochs):
        perm = order_rng.permutation(len(train))
        for b in range(steps_per_epoch):
            idx = perm[b * config.batch_size : (b + 1) * config.batch_size]
            if len(idx) == 0:
                continue
            opt.zero_grad()
            loss = torch.zeros(())
            for i in idx:
                img = train[i]
                mask = torch.from_numpy(
                    sample_mask(img.shape[0], img.shape[1], spec, mask_rng)
                )
                masked = apply_mask(img, mask, bundle.mask_token)
                feats, _ = bundle.encoder(masked.permute(2, 0, 1).unsqueeze(0))
                recon = bundle.mp_head(feats[-1])[0].permute(1, 2, 0)
                loss = loss + masked_l1_loss(recon, img, mask)
            loss = loss / len(idx)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"masked stage diverged at step {step}: {loss}")
            loss.backward()
            opt.step()
            rows.append((step, float(loss)))
            step += 1

    final_holdout = _holdout_eval(bundle, held, eval_spec)
    ckpt_path = out / "mp.ckpt"
    ckpt = save_checkpoint(bundle, ckpt_path, stage="mp", seed=config.seed, history=("mp",))
    log_csv = write_loss_csv(out / "mp_loss.csv", ["step", "loss"], rows)
    curve_png = plot_loss_curves(out / "mp_loss.png", ["step", "loss"], rows, "masked pre-training")
    return StageResult(
        checkpoint=ckpt,
        checkpoint_path=ckpt_path,
        log_csv=log_csv,
        curve_png=curve_png,
        summary={
            "initial_holdout_loss": initial_holdout,
            "final_holdout_loss": final_holdout,
            "final_train_loss": rows[-1][1] if rows else None,
            "steps": step,
        },
    )
