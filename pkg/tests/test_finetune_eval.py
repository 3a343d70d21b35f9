"""Depth metrics, boundary/planarity metrics, lr schedule, fine-tuning stage."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mesadepth.core_data import (
    DepthMap,
    Intrinsics,
    generate_synthetic_sequence,
    random_scene_spec,
)
from mesadepth.finetune_eval import (
    DepthMetrics,
    EmptyEvalError,
    EvalConfig,
    FTConfig,
    IbimsMetrics,
    apply_median_scaling,
    detect_depth_edges,
    evaluate_on_frames,
    ibims_metrics,
    nyu_metrics,
    planar_tiles,
    polynomial_lr,
    predict_depth,
    relative_improvement,
    run_finetune_stage,
    silog_loss,
)
from mesadepth.networks import restore_bundle

K = Intrinsics(fx=40.0, fy=40.0, cx=15.5, cy=15.5)


def dense(arr):
    return DepthMap.dense(np.asarray(arr, dtype=np.float32))


# ------------------------------------------------------------- standard metrics

def test_nyu_perfect_prediction():
    gt = dense(np.random.default_rng(0).uniform(1, 5, (8, 8)))
    m = nyu_metrics(gt, gt)
    assert m.rmse == 0.0 and m.rel == 0.0 and m.log10 == 0.0
    assert m.delta1 == m.delta2 == m.delta3 == 1.0


def test_nyu_uniform_scaling_case():
    # 1.3x scaling: delta1 = 0 (1.3 > 1.25), delta2 = 1 (1.3 < 1.5625),
    # REL = 0.3, log10 = log10(1.3)
    gt = dense(np.full((8, 8), 2.0))
    pred = dense(np.full((8, 8), 2.6))
    m = nyu_metrics(pred, gt)
    assert m.delta1 == 0.0 and m.delta2 == 1.0 and m.delta3 == 1.0
    assert m.rel == pytest.approx(0.3, rel=1e-6)
    assert m.log10 == pytest.approx(math.log10(1.3), rel=1e-6)
    assert m.rmse == pytest.approx(0.6, rel=1e-6)


def test_nyu_matches_scalar_recomputation():
    rng = np.random.default_rng(1)
    gt_arr = dense(rng.uniform(0.5, 8.0, (8, 8))).depth.astype(np.float64)
    pred_arr = dense(rng.uniform(0.5, 8.0, (8, 8))).depth.astype(np.float64)
    m = nyu_metrics(dense(pred_arr), dense(gt_arr))

    acc = {"se": [], "d1": [], "d2": [], "d3": [], "rel": [], "l10": []}
    for r in range(8):
        for c in range(8):
            p, g = pred_arr[r, c], gt_arr[r, c]
            ratio = max(p / g, g / p)
            acc["se"].append((p - g) ** 2)
            acc["d1"].append(ratio < 1.25)
            acc["d2"].append(ratio < 1.25**2)
            acc["d3"].append(ratio < 1.25**3)
            acc["rel"].append(abs(p - g) / g)
            acc["l10"].append(abs(math.log10(p) - math.log10(g)))
    assert m.rmse == pytest.approx(math.sqrt(np.mean(acc["se"])), rel=1e-9)
    assert m.delta1 == pytest.approx(np.mean(acc["d1"]), rel=1e-9)
    assert m.delta2 == pytest.approx(np.mean(acc["d2"]), rel=1e-9)
    assert m.delta3 == pytest.approx(np.mean(acc["d3"]), rel=1e-9)
    assert m.rel == pytest.approx(np.mean(acc["rel"]), rel=1e-9)
    assert m.log10 == pytest.approx(np.mean(acc["l10"]), rel=1e-9)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_delta_ordering_property(seed):
    rng = np.random.default_rng(seed)
    gt_arr = rng.uniform(0.2, 9.0, (6, 6))
    pred_arr = rng.uniform(0.2, 9.0, (6, 6))
    m = nyu_metrics(dense(pred_arr), dense(gt_arr))
    assert m.delta1 <= m.delta2 <= m.delta3


def test_delta_swap_symmetry():
    rng = np.random.default_rng(2)
    a = dense(rng.uniform(1, 5, (8, 8)))
    b = dense(rng.uniform(1, 5, (8, 8)))
    m1 = nyu_metrics(a, b)
    m2 = nyu_metrics(b, a)
    assert m1.delta1 == m2.delta1 and m1.delta2 == m2.delta2 and m1.delta3 == m2.delta3
    assert m1.rel != m2.rel  # REL normalizes by gt only


def test_median_scaling_idempotent():
    rng = np.random.default_rng(3)
    pred = rng.uniform(1, 5, 64)
    gt = rng.uniform(1, 5, 64)
    once = apply_median_scaling(pred, gt)
    twice = apply_median_scaling(once, gt)
    assert np.allclose(once, twice, rtol=1e-12)


def test_nyu_no_valid_pixels():
    gt = DepthMap(depth=np.ones((4, 4), np.float32), valid_mask=np.zeros((4, 4), bool))
    with pytest.raises(EmptyEvalError):
        nyu_metrics(dense(np.ones((4, 4))), gt)


def test_depth_metrics_invariants():
    with pytest.raises(ValueError):
        DepthMetrics(rmse=0.1, delta1=0.9, delta2=0.5, delta3=1.0, rel=0.1, log10=0.1)
    with pytest.raises(ValueError):
        DepthMetrics(rmse=-0.1, delta1=0.5, delta2=0.6, delta3=1.0, rel=0.1, log10=0.1)


# ------------------------------------------------------------- boundary/planarity

def two_plane_scene(h=48, w=48, z_near=2.0, z_far=3.0):
    """Left half at z_near, right half at z_far: one vertical depth edge."""
    depth = np.full((h, w), z_far, dtype=np.float32)
    depth[:, : w // 2] = z_near
    gt_edges = np.zeros((h, w), dtype=bool)
    gt_edges[:, w // 2 - 1 : w // 2 + 1] = True
    masks = []
    m1 = np.zeros((h, w), dtype=bool)
    m1[8:24, 4:20] = True
    masks.append((m1, np.array([0.0, 0.0, 1.0])))
    m2 = np.zeros((h, w), dtype=bool)
    m2[8:24, w - 20 : w - 4] = True
    masks.append((m2, np.array([0.0, 0.0, 1.0])))
    return dense(depth), gt_edges, masks


def test_ibims_perfect_prediction():
    gt, gt_edges, masks = two_plane_scene()
    m = ibims_metrics(gt, gt, gt_edges, masks, K)
    assert m.dbe_acc is not None and m.dbe_acc <= 1.0
    assert m.dbe_comp is not None and m.dbe_comp <= 1.0
    assert m.pe_plan is not None and m.pe_plan <= 0.1  # cm
    assert m.pe_orie is not None and m.pe_orie <= 0.5  # degrees
    assert m.absrel == pytest.approx(0.0, abs=1e-9)


def test_ibims_orientation_scale_invariant():
    gt, gt_edges, masks = two_plane_scene()
    scaled = dense(gt.depth * 1.1)
    m1 = ibims_metrics(gt, gt, gt_edges, masks, K)
    m2 = ibims_metrics(scaled, gt, gt_edges, masks, K)
    assert abs(m1.pe_orie - m2.pe_orie) < 1e-6


def test_ibims_no_predicted_edges():
    gt, gt_edges, masks = two_plane_scene()
    flat = dense(np.full_like(gt.depth, 2.5))
    m = ibims_metrics(flat, gt, gt_edges, masks, K)
    assert m.dbe_acc is None and m.dbe_comp is None  # absent, not zero
    assert m.absrel > 0


def test_ibims_empty_plane_list_and_small_mask():
    gt, gt_edges, _ = two_plane_scene()
    m = ibims_metrics(gt, gt, gt_edges, [], K)
    assert m.pe_plan is None and m.pe_orie is None
    tiny = np.zeros_like(gt_edges)
    tiny[0, 0] = True
    with pytest.raises(EmptyEvalError, match="3 pixels"):
        ibims_metrics(gt, gt, gt_edges, [(tiny, np.array([0, 0, 1.0]))], K)


def test_ibims_invariants():
    with pytest.raises(ValueError):
        IbimsMetrics(dbe_acc=-1.0, dbe_comp=None, pe_plan=None, pe_orie=None, absrel=0.1)


def test_detect_depth_edges_relative():
    depth = np.full((16, 16), 2.0)
    depth[:, 8:] = 3.0
    edges = detect_depth_edges(depth, threshold=0.1)
    assert edges[:, 7:9].any()
    assert not edges[:, :5].any() and not edges[:, 12:].any()


def test_planar_tiles_from_gt():
    gt, _, _ = two_plane_scene()
    tiles = planar_tiles(gt, K, tile=16)
    assert tiles
    for mask, normal in tiles:
        assert mask.sum() == 16 * 16
        assert abs(abs(normal[2]) - 1.0) < 1e-6  # fronto-parallel planes


# ------------------------------------------------------------- relative improvement

def test_relative_improvement_cases():
    assert relative_improvement(0.287, 0.265) == pytest.approx(7.67, abs=0.01)
    assert relative_improvement(1.0, 1.0) == 0.0
    assert relative_improvement(0.083, 0.074) == pytest.approx(10.84, abs=0.01)
    # direction-aware: higher-is-better metrics flip the sign convention
    assert relative_improvement(0.949, 0.954, higher_is_better=True) == pytest.approx(
        0.527, abs=0.01
    )
    with pytest.raises(ValueError):
        relative_improvement(0.0, 1.0)


# ------------------------------------------------------------- lr schedule and loss

def test_polynomial_lr_endpoints_and_monotone():
    total = 100
    lrs = [polynomial_lr(t, total, 1e-3, 1e-5, 0.9) for t in range(total)]
    assert lrs[0] == pytest.approx(1e-3)
    assert lrs[-1] == pytest.approx(1e-5)
    assert all(a >= b - 1e-15 for a, b in zip(lrs, lrs[1:]))


def test_silog_zero_for_perfect():
    gt = torch.rand(8, 8, dtype=torch.float64) + 0.5
    valid = torch.ones(8, 8, dtype=torch.bool)
    assert float(silog_loss(gt, gt, valid)) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(EmptyEvalError):
        silog_loss(gt, gt, torch.zeros(8, 8, dtype=torch.bool))


# ------------------------------------------------------------- fine-tuning stage

def test_finetune_stage_runs_and_tags(tmp_path):
    seqs = [generate_synthetic_sequence(random_scene_spec(s, n_frames=3)) for s in (0, 1)]
    cfg = FTConfig(epochs=1, batch_size=4, seed=0)
    result = run_finetune_stage(cfg, seqs, tmp_path, init=None)
    assert result.checkpoint.stage == "finetune"
    assert result.checkpoint.history == ("finetune",)
    bundle = restore_bundle(result.checkpoint, ("encoder", "depth_decoder"), seed=0)
    labeled = [(seqs[0].frames[0], seqs[0].gt_depths[0], seqs[0].intrinsics)]
    agg, per = evaluate_on_frames(bundle, labeled, EvalConfig(scaling="per-image-median"))
    assert len(per) == 1 and agg.rmse >= 0


@pytest.mark.slow
def test_finetune_overfits_single_image(tmp_path):
    # capacity sanity: 1000 steps on one labeled frame drive its RMSE below 5 cm
    seq = generate_synthetic_sequence(random_scene_spec(2, n_frames=2))
    cfg = FTConfig(epochs=1000, batch_size=1, lr_max=1e-3, lr_min=1e-4, seed=0)
    result = run_finetune_stage(cfg, [seq], tmp_path, init=None, max_frames=1)
    bundle = restore_bundle(result.checkpoint, ("encoder", "depth_decoder"), seed=0)
    img, gt, intr = seq.frames[0], seq.gt_depths[0], seq.intrinsics
    m = nyu_metrics(predict_depth(bundle, img), gt, EvalConfig(scaling="none"))
    assert m.rmse < 0.05


def test_evaluate_on_frames_aggregates(tmp_path):
    seq = generate_synthetic_sequence(random_scene_spec(3, n_frames=3))
    from mesadepth.networks import EncoderSpec, ModelBundle, save_checkpoint, load_checkpoint

    bundle = ModelBundle(EncoderSpec(), ("encoder", "depth_decoder"), seed=0)
    labeled = [(f, d, seq.intrinsics) for f, d in zip(seq.frames, seq.gt_depths)]
    agg, per = evaluate_on_frames(bundle, labeled, EvalConfig(scaling="per-image-median"))
    assert len(per) == 3
    rows = np.array([m.as_row() for m in per])
    assert np.allclose(agg.as_row(), rows.mean(axis=0))
