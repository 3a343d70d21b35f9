"""Supervised pre-training against pseudo-depth from an external provider.

The pseudo-depth teacher is scale-ambiguous, so every loss here is invariant
to a global rescaling of the teacher: cosine normal matching, ratio-test
confident depth ranking with a softplus margin, and relative-normal agreement
across image edges. A synthetic oracle (ground truth + multiplicative noise)
stands in for an off-the-shelf provider at desk scale.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .core_data import DepthMap, Intrinsics, read_pgm16
from .geometric_pretrain import (
    PhotometricParams,
    backproject,
    depth_inconsistency,
    geometry_consistency_loss,
    inverse_warp,
    pose_vec_to_rt,
    photometric_loss,
)
from .networks import Checkpoint, ModelBundle, restore_bundle, save_checkpoint
from .reporting import StageResult, TrainingDivergedError, plot_loss_curves, write_loss_csv

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PseudoDepth:
    """Dense positive depth from a (possibly scale-ambiguous) teacher."""

    depth: np.ndarray
    up_to_scale: bool = True

    def __post_init__(self):
        d = np.asarray(self.depth, dtype=np.float32)
        if d.ndim != 2:
            raise ValueError(f"pseudo-depth must be (H, W), got {d.shape}")
        if not np.isfinite(d).all():
            raise ValueError("pseudo-depth must be finite")
        if not (d > 0).all():
            raise ValueError("pseudo-depth must be strictly positive")
        object.__setattr__(self, "depth", d)


@dataclass(frozen=True)
class PseudoNoiseSpec:
    sigma: float = 0.05  # stdev of multiplicative log-normal noise
    scale_min: float = 1.0  # global scale jitter drawn log-uniformly from [min, max]
    scale_max: float = 1.0
    seed: int = 0


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0  # weighted photometric
    beta: float = 0.5  # geometry consistency
    gamma: float = 0.1  # normal matching
    delta: float = 1.0  # confident depth ranking
    epsilon: float = 1.0  # edge-aware relative normal

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "delta", "epsilon"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass(frozen=True)
class RankingPair:
    p0: int  # flat pixel index
    p1: int
    label: int  # sign of pseudo[p0] - pseudo[p1], in {-1, +1}
    confident: bool

    def __post_init__(self):
        if self.p0 == self.p1:
            raise ValueError("ranking pair must use distinct pixels")
        if self.label not in (-1, 1):
            raise ValueError("label must be -1 or +1")


@dataclass(frozen=True)
class RankingSamplerSpec:
    n_pairs: int = 256
    tau: float = 1.15  # confidence threshold on the pseudo-depth ratio
    seed: int = 0


@dataclass(frozen=True)
class EdgePairSpec:
    n_pairs: int = 256
    radius: int = 2  # pixel offset on each side of the edge
    percentile: float = 90.0  # gradient-magnitude threshold
    seed: int = 0


def pseudo_depth_oracle(gt: DepthMap, noise: PseudoNoiseSpec = PseudoNoiseSpec()) -> PseudoDepth:
    """Ground truth corrupted by log-normal noise and global scale jitter."""
    rng = np.random.default_rng(noise.seed)
    factor = np.exp(noise.sigma * rng.standard_normal(gt.depth.shape)).astype(np.float32)
    scale = math.exp(rng.uniform(math.log(noise.scale_min), math.log(noise.scale_max)))
    return PseudoDepth(depth=gt.depth * factor * np.float32(scale), up_to_scale=True)


def load_pseudo_depth(path: Path | str) -> PseudoDepth:
    """16-bit PGM in millimeters -> meters; rejects nonpositive pixels."""
    mm = read_pgm16(path).astype(np.float32)
    if not (mm > 0).all():
        raise ValueError(f"{path}: pseudo-depth contains nonpositive pixels")
    return PseudoDepth(depth=mm / 1000.0, up_to_scale=True)


def normals_from_depth(
    depth: torch.Tensor, K: Intrinsics
) -> tuple[torch.Tensor, torch.Tensor]:
    """Unit surface normals from central differences of backprojected points.

    Normals are oriented toward the camera (a fronto-parallel plane maps to
    (0, 0, -1)). Border pixels carry a False validity flag.
    """
    h, w = depth.shape
    pts = backproject(depth, K)
    du = (pts[1:-1, 2:] - pts[1:-1, :-2]) / 2.0
    dv = (pts[2:, 1:-1] - pts[:-2, 1:-1]) / 2.0
    n = torch.cross(du, dv, dim=-1)
    n = n / torch.linalg.norm(n, dim=-1, keepdim=True).clamp_min(1e-12)
    facing_away = (n * pts[1:-1, 1:-1]).sum(dim=-1, keepdim=True) > 0
    n = torch.where(facing_away, -n, n)
    normals = torch.zeros_like(pts)
    normals[1:-1, 1:-1] = n
    valid = torch.zeros((h, w), dtype=torch.bool)
    valid[1:-1, 1:-1] = True
    return normals, valid


def normal_matching_loss(
    pred_depth: torch.Tensor, pseudo_depth: torch.Tensor, K: Intrinsics
) -> torch.Tensor:
    """Mean over interior pixels of 1 - <n_pred, n_pseudo>; in [0, 2]."""
    n_pred, valid_pred = normals_from_depth(pred_depth, K)
    n_ps, valid_ps = normals_from_depth(pseudo_depth, K)
    valid = valid_pred & valid_ps
    cos = (n_pred * n_ps).sum(dim=-1)
    return (1.0 - cos)[valid].mean()


def sample_ranking_pairs(pseudo_depth: np.ndarray, spec: RankingSamplerSpec) -> list[RankingPair]:
    """Seeded pixel-pair sample with the pseudo-depth ratio confidence test."""
    rng = np.random.default_rng(spec.seed)
    flat = pseudo_depth.reshape(-1)
    n_pix = flat.size
    pairs: list[RankingPair] = []
    idx0 = rng.integers(0, n_pix, size=spec.n_pairs)
    idx1 = rng.integers(0, n_pix, size=spec.n_pairs)
    for a, b in zip(idx0, idx1):
        if a == b:
            continue
        hi = max(flat[a], flat[b])
        lo = min(flat[a], flat[b])
        confident = bool(hi / lo > spec.tau)
        label = 1 if flat[a] > flat[b] else -1
        if flat[a] == flat[b]:
            confident = False
        pairs.append(RankingPair(p0=int(a), p1=int(b), label=label, confident=confident))
    return pairs


def confident_depth_ranking_loss(
    pred_depth: torch.Tensor, pseudo: PseudoDepth, spec: RankingSamplerSpec = RankingSamplerSpec()
) -> torch.Tensor:
    """Softplus ranking loss over confident pairs, margin scaled by mean depth.

    Contributes 0 (with a warning) when no sampled pair passes the ratio test.
    """
    pairs = [p for p in sample_ranking_pairs(pseudo.depth, spec) if p.confident]
    if not pairs:
        logger.warning("no confident ranking pairs sampled; ranking loss contributes 0")
        return torch.zeros((), dtype=pred_depth.dtype)
    flat = pred_depth.reshape(-1)
    i0 = torch.tensor([p.p0 for p in pairs])
    i1 = torch.tensor([p.p1 for p in pairs])
    labels = torch.tensor([float(p.label) for p in pairs], dtype=pred_depth.dtype)
    scale = flat.mean()
    margin = labels * (flat[i0] - flat[i1]) / scale
    return F.softplus(-margin).mean()


def detect_image_edges(image: torch.Tensor, percentile: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Interior edge mask from the gray gradient magnitude; returns (mask, gx, gy)."""
    gray = image.mean(dim=-1).detach().cpu().numpy().astype(np.float64)
    gx = np.zeros_like(gray)
    gy = np.zeros_like(gray)
    gx[:, 1:-1] = (gray[:, 2:] - gray[:, :-2]) / 2.0
    gy[1:-1, :] = (gray[2:, :] - gray[:-2, :]) / 2.0
    mag = np.hypot(gx, gy)
    interior = np.zeros_like(mag, dtype=bool)
    interior[1:-1, 1:-1] = True
    thresh = np.percentile(mag[interior], percentile)
    edges = (mag > thresh) & interior
    return edges, gx, gy


def edge_aware_relative_normal_loss(
    pred_depth: torch.Tensor,
    pseudo: PseudoDepth,
    image: torch.Tensor,
    K: Intrinsics,
    spec: EdgePairSpec = EdgePairSpec(),
) -> torch.Tensor:
    """Relative-normal agreement across image edges.

    For sampled edge pixels, a pair of points straddling the edge (offset
    +-radius along the local gradient direction) must reproduce the teacher's
    normal relationship: loss is |<n0, n1>_pred - <n0, n1>_pseudo| averaged
    over pairs. Contributes 0 with a warning when no usable edge exists.
    """
    h, w = pred_depth.shape
    edges, gx, gy = detect_image_edges(image, spec.percentile)
    margin = spec.radius + 1  # endpoints must stay normal-valid (interior)
    usable = np.zeros_like(edges)
    usable[margin : h - margin, margin : w - margin] = edges[margin : h - margin, margin : w - margin]
    rows, cols = np.nonzero(usable)
    if rows.size == 0:
        logger.warning("no usable edge pixels; relative-normal loss contributes 0")
        return torch.zeros((), dtype=pred_depth.dtype)
    rng = np.random.default_rng(spec.seed)
    take = min(spec.n_pairs, rows.size)
    chosen = rng.choice(rows.size, size=take, replace=False)
    mag = np.hypot(gx[rows[chosen], cols[chosen]], gy[rows[chosen], cols[chosen]])
    mag = np.maximum(mag, 1e-12)
    off_c = np.round(spec.radius * gx[rows[chosen], cols[chosen]] / mag).astype(int)
    off_r = np.round(spec.radius * gy[rows[chosen], cols[chosen]] / mag).astype(int)
    r0 = rows[chosen] + off_r
    c0 = cols[chosen] + off_c
    r1 = rows[chosen] - off_r
    c1 = cols[chosen] - off_c

    n_pred, _ = normals_from_depth(pred_depth, K)
    n_ps, _ = normals_from_depth(torch.from_numpy(pseudo.depth).to(pred_depth.dtype), K)
    dot_pred = (n_pred[r0, c0] * n_pred[r1, c1]).sum(dim=-1)
    dot_ps = (n_ps[r0, c0] * n_ps[r1, c1]).sum(dim=-1)
    return (dot_pred - dot_ps).abs().mean()


def combined_loss(
    img_a: torch.Tensor,
    img_b: torch.Tensor,
    depth_a: torch.Tensor,
    depth_b: torch.Tensor,
    pose_ab: torch.Tensor,
    pseudo_a: PseudoDepth,
    weights: LossWeights,
    K: Intrinsics,
    photo_params: PhotometricParams = PhotometricParams(),
    ranking_spec: RankingSamplerSpec = RankingSamplerSpec(),
    edge_spec: EdgePairSpec = EdgePairSpec(),
) -> tuple[torch.Tensor, dict[str, float]]:
    """Five-term objective; terms with zero weight are skipped entirely."""
    total = torch.zeros((), dtype=depth_a.dtype)
    breakdown: dict[str, float] = {}

    if weights.alpha > 0 or weights.beta > 0:
        rot, t = pose_vec_to_rt(pose_ab)
        warp = inverse_warp(img_b, depth_b, depth_a, rot, t, K)
        d_diff = depth_inconsistency(warp)
        if weights.alpha > 0:
            lp = photometric_loss(img_a, warp, photo_params, weight=1.0 - d_diff)
            total = total + weights.alpha * lp
            breakdown["photometric_weighted"] = float(lp)
        if weights.beta > 0:
            lg = geometry_consistency_loss(d_diff, warp.valid_mask)
            total = total + weights.beta * lg
            breakdown["geometry"] = float(lg)
    if weights.gamma > 0:
        pseudo_t = torch.from_numpy(pseudo_a.depth).to(depth_a.dtype)
        ln = normal_matching_loss(depth_a, pseudo_t, K)
        total = total + weights.gamma * ln
        breakdown["normal"] = float(ln)
    if weights.delta > 0:
        lcdr = confident_depth_ranking_loss(depth_a, pseudo_a, ranking_spec)
        total = total + weights.delta * lcdr
        breakdown["ranking"] = float(lcdr)
    if weights.epsilon > 0:
        lern = edge_aware_relative_normal_loss(depth_a, pseudo_a, img_a, K, edge_spec)
        total = total + weights.epsilon * lern
        breakdown["relative_normal"] = float(lern)
    for key in ("photometric_weighted", "geometry", "normal", "ranking", "relative_normal"):
        breakdown.setdefault(key, 0.0)
    return total, breakdown


@dataclass(frozen=True)
class GPSPConfig:
    weights: LossWeights = LossWeights()
    lam: float = 0.15
    epochs: int = 10
    batch_size: int = 2
    lr: float = 1e-4
    pair_stride: int = 1
    seed: int = 0
    n_ranking_pairs: int = 256
    ranking_tau: float = 1.15
    n_edge_pairs: int = 256
    edge_radius: int = 2
    edge_percentile: float = 90.0
    # teacher default: scale jitter only; per-pixel noise corrupts teacher normals,
    # which real (network-produced) pseudo-depth does not suffer from
    pseudo_sigma: float = 0.0
    pseudo_scale_min: float = 0.6
    pseudo_scale_max: float = 1.6

    @classmethod
    def from_dict(cls, d: dict) -> "GPSPConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        weight_keys = {"alpha", "beta", "gamma", "delta", "epsilon"}
        weights = LossWeights(**{k: d.pop(k) for k in list(d) if k in weight_keys})
        kwargs = {k: v for k, v in d.items() if k in cls.__dataclass_fields__ and k != "weights"}
        return cls(weights=weights, **kwargs)


def _pseudo_for_sequences(sequences, config: GPSPConfig) -> list[list[PseudoDepth]]:
    """Oracle pseudo-depth per frame, seeded per (sequence, frame)."""
    out = []
    for si, seq in enumerate(sequences):
        if seq.gt_depths is None:
            raise ValueError(
                "supervised stage needs pseudo-depth: provide pseudo maps or gt depth "
                "for the synthetic oracle"
            )
        maps = []
        for fi, gt in enumerate(seq.gt_depths):
            noise = PseudoNoiseSpec(
                sigma=config.pseudo_sigma,
                scale_min=config.pseudo_scale_min,
                scale_max=config.pseudo_scale_max,
                seed=config.seed * 1_000_003 + si * 1_009 + fi,
            )
            maps.append(pseudo_depth_oracle(gt, noise))
        out.append(maps)
    return out


def run_gp_sp_stage(
    config: GPSPConfig,
    sequences,
    out_dir: Path | str,
    init: Checkpoint,
    pseudo_maps: list[list[PseudoDepth]] | None = None,
) -> StageResult:
    """Joint geometric + supervised training with the five-term loss; tag 'gp_sp'."""
    if init is None or init.stage not in ("mp", "gp"):
        got = None if init is None else init.stage
        raise ValueError(f"joint stage expects an 'mp' or 'gp' checkpoint, got {got!r}")
    torch.set_num_threads(1)  # tiny tensors: thread sync costs more than it buys
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bundle = restore_bundle(init, ("encoder", "depth_decoder", "pose_net"), seed=config.seed)
    history = init.history + ("gp_sp",)

    if pseudo_maps is None:
        pseudo_maps = _pseudo_for_sequences(sequences, config)
    for seq, maps in zip(sequences, pseudo_maps):
        if len(maps) != len(seq):
            raise ValueError("pseudo-depth count must match frame count")
        for m in maps:
            if m.depth.shape != (seq.height, seq.width):
                raise ValueError(
                    f"pseudo-depth shape {m.depth.shape} does not match frames "
                    f"{(seq.height, seq.width)}"
                )

    pairs = []
    for seq, maps in zip(sequences, pseudo_maps):
        for i in range(len(seq) - config.pair_stride):
            j = i + config.pair_stride
            pairs.append((seq.frames[i], seq.frames[j], seq.intrinsics, maps[i], maps[j]))
    if not pairs:
        raise ValueError("no consecutive pairs in the corpus")

    photo_params = PhotometricParams(lam=config.lam)
    opt = torch.optim.Adam(bundle.parameters(), lr=config.lr)
    order_rng = np.random.default_rng(config.seed + 2)
    sampler_rng = np.random.default_rng(config.seed + 3)  # dedicated pair-sampling stream

    rows: list[tuple] = []
    step = 0
    steps_per_epoch = max(1, math.ceil(len(pairs) / config.batch_size))
    term_keys = ["photometric_weighted", "geometry", "normal", "ranking", "relative_normal"]
    for _epoch in range(config.epochs):
        perm = order_rng.permutation(len(pairs))
        for bidx in range(steps_per_epoch):
            idx = perm[bidx * config.batch_size : (bidx + 1) * config.batch_size]
            if len(idx) == 0:
                continue
            opt.zero_grad()
            loss = torch.zeros(())
            acc = {k: 0.0 for k in term_keys}
            n_terms = 0
            for i in idx:
                img_a, img_b, K, ps_a, ps_b = pairs[i]
                ta = torch.from_numpy(img_a.values)
                tb = torch.from_numpy(img_b.values)
                both = torch.stack([ta, tb]).permute(0, 3, 1, 2)
                feats, _ = bundle.encoder(both)
                depths = bundle.depth_decoder(feats)[:, 0]
                pose_fwd = bundle.pose_net(both[0:1], both[1:2])[0]
                pose_bwd = bundle.pose_net(both[1:2], both[0:1])[0]
                for ref, src, pose, ps in ((0, 1, pose_fwd, ps_a), (1, 0, pose_bwd, ps_b)):
                    rspec = RankingSamplerSpec(
                        n_pairs=config.n_ranking_pairs,
                        tau=config.ranking_tau,
                        seed=int(sampler_rng.integers(0, 2**31)),
                    )
                    espec = EdgePairSpec(
                        n_pairs=config.n_edge_pairs,
                        radius=config.edge_radius,
                        percentile=config.edge_percentile,
                        seed=int(sampler_rng.integers(0, 2**31)),
                    )
                    ltotal, terms = combined_loss(
                        both[ref].permute(1, 2, 0),
                        both[src].permute(1, 2, 0),
                        depths[ref],
                        depths[src],
                        pose,
                        ps,
                        config.weights,
                        K,
                        photo_params,
                        rspec,
                        espec,
                    )
                    loss = loss + ltotal
                    for k in term_keys:
                        acc[k] += terms[k]
                    n_terms += 1
            loss = loss / n_terms
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"joint stage diverged at step {step}: {loss}")
            loss.backward()
            opt.step()
            rows.append(tuple([step] + [acc[k] / n_terms for k in term_keys]))
            step += 1

    ckpt_path = out / "gp_sp.ckpt"
    ckpt = save_checkpoint(bundle, ckpt_path, stage="gp_sp", seed=config.seed, history=history)
    header = ["step"] + term_keys
    log_csv = write_loss_csv(out / "gp_sp_loss.csv", header, rows)
    curve_png = plot_loss_curves(out / "gp_sp_loss.png", header, rows, "joint geometric + supervised")
    return StageResult(
        checkpoint=ckpt,
        checkpoint_path=ckpt_path,
        log_csv=log_csv,
        curve_png=curve_png,
        summary={"steps": step, "final_terms": {k: rows[-1][1 + term_keys.index(k)] for k in term_keys} if rows else {}},
    )
