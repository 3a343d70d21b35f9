"""Pseudo-depth oracle, normal/ranking/edge losses, and the combined objective."""

import logging
import math

import numpy as np
import pytest
import torch

from mesadepth.core_data import DepthMap, Intrinsics
from mesadepth.geometric_pretrain import PhotometricParams, inverse_warp, pose_vec_to_rt
from mesadepth.masked_pretrain import MPConfig, run_mp_stage
from mesadepth.supervised_pretrain import (
    EdgePairSpec,
    GPSPConfig,
    LossWeights,
    PseudoDepth,
    PseudoNoiseSpec,
    RankingPair,
    RankingSamplerSpec,
    combined_loss,
    confident_depth_ranking_loss,
    edge_aware_relative_normal_loss,
    load_pseudo_depth,
    normal_matching_loss,
    normals_from_depth,
    pseudo_depth_oracle,
    run_gp_sp_stage,
    sample_ranking_pairs,
)
from mesadepth.core_data import write_pgm16, generate_synthetic_sequence, random_scene_spec

K = Intrinsics(fx=40.0, fy=40.0, cx=15.5, cy=15.5)


def plane_depth(normal, d, h=32, w=32, intr=K):
    """Depth field of the plane {x : <n, x> = d} seen through the pinhole."""
    us, vs = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    rays = np.stack([(us - intr.cx) / intr.fx, (vs - intr.cy) / intr.fy, np.ones_like(us)], -1)
    return (d / (rays @ np.asarray(normal, dtype=np.float64))).astype(np.float64)


# ------------------------------------------------------------- pseudo-depth

def test_oracle_identity_without_noise():
    gt = DepthMap.dense(np.random.default_rng(0).uniform(1, 3, (8, 8)).astype(np.float32))
    ps = pseudo_depth_oracle(gt, PseudoNoiseSpec(sigma=0.0, scale_min=1.0, scale_max=1.0))
    assert np.array_equal(ps.depth, gt.depth)
    assert ps.up_to_scale


def test_oracle_pure_scale_preserves_ordering():
    gt = DepthMap.dense(np.random.default_rng(1).uniform(1, 3, (8, 8)).astype(np.float32))
    ps = pseudo_depth_oracle(gt, PseudoNoiseSpec(sigma=0.0, scale_min=2.0, scale_max=2.0))
    assert np.allclose(ps.depth, 2.0 * gt.depth, rtol=1e-6)
    flat_gt, flat_ps = gt.depth.flatten(), ps.depth.flatten()
    assert np.array_equal(np.argsort(flat_gt), np.argsort(flat_ps))


def test_oracle_lognormal_tail():
    gt = DepthMap.dense(np.full((256, 256), 2.0, dtype=np.float32))
    sigma = 0.05
    ps = pseudo_depth_oracle(gt, PseudoNoiseSpec(sigma=sigma, scale_min=1.0, scale_max=1.0, seed=1))
    ratio = ps.depth / gt.depth
    inside = (ratio >= math.exp(-4 * sigma)) & (ratio <= math.exp(4 * sigma))
    assert inside.mean() >= 0.9999


def test_pseudo_depth_rejects_nonpositive(tmp_path):
    mm = np.full((8, 8), 2000, dtype=np.uint16)
    write_pgm16(tmp_path / "ok.pgm", mm)
    ps = load_pseudo_depth(tmp_path / "ok.pgm")
    assert np.allclose(ps.depth, 2.0)

    mm[3, 3] = 0
    write_pgm16(tmp_path / "bad.pgm", mm)
    with pytest.raises(ValueError, match="nonpositive"):
        load_pseudo_depth(tmp_path / "bad.pgm")

    with pytest.raises(ValueError):
        PseudoDepth(depth=np.zeros((4, 4), dtype=np.float32))


# ------------------------------------------------------------- normals

def test_normals_fronto_parallel_plane():
    depth = torch.full((16, 16), 2.5, dtype=torch.float64)
    n, valid = normals_from_depth(depth, K)
    assert not valid[0].any() and not valid[:, 0].any()  # border invalid
    inner = n[valid]
    assert float((inner - torch.tensor([0.0, 0.0, -1.0], dtype=torch.float64)).abs().max()) < 1e-6


@pytest.mark.parametrize("normal", [(0.3, 0.0, -1.0), (0.0, -0.4, -1.0), (0.2, 0.2, -1.0)])
def test_normals_tilted_plane(normal):
    n_true = np.asarray(normal) / np.linalg.norm(normal)
    depth = torch.from_numpy(plane_depth(n_true, d=-2.0))  # d < 0 keeps depth positive
    n, valid = normals_from_depth(depth, K)
    cos = (n[valid] @ torch.from_numpy(n_true)).numpy()
    angle = np.degrees(np.arccos(np.clip(np.abs(cos), -1, 1)))
    assert angle.max() < 2.0


def test_normals_unit_length():
    rng = np.random.default_rng(3)
    depth = torch.from_numpy(np.abs(rng.normal(2, 0.2, (16, 16))) + 0.5)
    n, valid = normals_from_depth(depth, K)
    norms = torch.linalg.norm(n[valid], dim=-1)
    assert float((norms - 1.0).abs().max()) < 1e-6


# ------------------------------------------------------------- normal matching

def test_normal_matching_zero_for_identical():
    depth = torch.from_numpy(plane_depth((0.2, -0.1, -1.0), d=-2.0))
    assert float(normal_matching_loss(depth, depth.clone(), K)) == pytest.approx(0.0, abs=1e-12)


def test_normal_matching_orthogonal_planes():
    # 45-degree opposite tilts: normals differ by 90 degrees everywhere
    n1 = np.array([1.0, 0.0, -1.0]) / math.sqrt(2)
    n2 = np.array([-1.0, 0.0, -1.0]) / math.sqrt(2)
    d1 = torch.from_numpy(plane_depth(n1, d=-2.0))
    d2 = torch.from_numpy(plane_depth(n2, d=-2.0))
    assert float(normal_matching_loss(d1, d2, K)) == pytest.approx(1.0, abs=1e-6)


def test_normal_matching_brute_force():
    rng = np.random.default_rng(4)
    small_k = Intrinsics(fx=10.0, fy=10.0, cx=3.5, cy=3.5)
    pred = torch.from_numpy(np.abs(rng.normal(2, 0.3, (8, 8))) + 0.5)
    ps = torch.from_numpy(np.abs(rng.normal(2, 0.3, (8, 8))) + 0.5)
    loss = float(normal_matching_loss(pred, ps, small_k))

    n_p, v_p = normals_from_depth(pred, small_k)
    n_s, v_s = normals_from_depth(ps, small_k)
    acc, cnt = 0.0, 0
    for r in range(8):
        for c in range(8):
            if v_p[r, c] and v_s[r, c]:
                acc += 1.0 - float(n_p[r, c] @ n_s[r, c])
                cnt += 1
    assert loss == pytest.approx(acc / cnt, rel=1e-12)
    assert 0.0 <= loss <= 2.0


# ------------------------------------------------------------- ranking

def test_ranking_pair_invariants():
    with pytest.raises(ValueError):
        RankingPair(p0=3, p1=3, label=1, confident=True)
    with pytest.raises(ValueError):
        RankingPair(p0=0, p1=1, label=0, confident=False)


def test_ranking_confidence_scale_invariant():
    rng = np.random.default_rng(5)
    ps = rng.uniform(1, 4, (8, 8)).astype(np.float32)
    spec = RankingSamplerSpec(n_pairs=64, seed=9)
    base = sample_ranking_pairs(ps, spec)
    for s in (0.25, 7.0):
        scaled = sample_ranking_pairs(ps * s, spec)
        assert [(p.p0, p.p1, p.label, p.confident) for p in base] == [
            (p.p0, p.p1, p.label, p.confident) for p in scaled
        ]


def test_ranking_saturated_and_tied():
    # a sparse far pixel keeps the mean-depth scale small while pair margins are huge
    ps_map = np.ones((4, 4), dtype=np.float32)
    ps_map[0, 1] = 4.0
    ps = PseudoDepth(depth=ps_map)
    spec = RankingSamplerSpec(n_pairs=128, tau=1.15, seed=0)
    pred_agree = np.ones((4, 4), dtype=np.float64)
    pred_agree[0, 1] = 100.0
    assert float(confident_depth_ranking_loss(torch.from_numpy(pred_agree), ps, spec)) < 1e-2
    # exact ties on every pair: softplus(0) = log 2
    pred_tie = torch.full((4, 4), 2.0, dtype=torch.float64)
    assert float(confident_depth_ranking_loss(pred_tie, ps, spec)) == pytest.approx(
        math.log(2.0), rel=1e-9
    )


def test_ranking_matches_scalar_reimplementation():
    rng = np.random.default_rng(6)
    ps = PseudoDepth(depth=rng.uniform(1, 3, (4, 4)).astype(np.float32))
    pred = torch.from_numpy(rng.uniform(0.5, 2.5, (4, 4)))
    spec = RankingSamplerSpec(n_pairs=8, tau=1.15, seed=123)
    loss = float(confident_depth_ranking_loss(pred, ps, spec))

    # independent scalar re-computation from the same seeded stream
    r2 = np.random.default_rng(123)
    flat_ps = ps.depth.reshape(-1)
    flat_d = pred.numpy().reshape(-1)
    i0 = r2.integers(0, 16, size=8)
    i1 = r2.integers(0, 16, size=8)
    s = flat_d.mean()
    vals = []
    for a, b in zip(i0, i1):
        if a == b or flat_ps[a] == flat_ps[b]:
            continue
        if max(flat_ps[a], flat_ps[b]) / min(flat_ps[a], flat_ps[b]) <= 1.15:
            continue
        ell = 1.0 if flat_ps[a] > flat_ps[b] else -1.0
        vals.append(math.log(1.0 + math.exp(-ell * (flat_d[a] - flat_d[b]) / s)))
    assert vals, "seed must produce confident pairs"
    assert loss == pytest.approx(float(np.mean(vals)), rel=1e-9)


def test_ranking_positive_and_empty(caplog):
    rng = np.random.default_rng(7)
    ps_flat = PseudoDepth(depth=np.full((8, 8), 2.0, dtype=np.float32))
    pred = torch.from_numpy(rng.uniform(1, 3, (8, 8)))
    with caplog.at_level(logging.WARNING):
        loss = confident_depth_ranking_loss(pred, ps_flat, RankingSamplerSpec(seed=0))
    assert float(loss) == 0.0
    assert "no confident" in caplog.text

    # softplus positivity whenever confident pairs exist
    ps = PseudoDepth(depth=rng.uniform(1, 4, (8, 8)).astype(np.float32))
    assert float(confident_depth_ranking_loss(pred, ps, RankingSamplerSpec(seed=1))) > 0.0


# ------------------------------------------------------------- edge-aware relative normals

def crease_scene(h=32, w=32):
    """Vertical image edge at w/2; pseudo-depth is a 90-degree roof along it."""
    img = np.full((h, w, 3), 0.25, dtype=np.float64)
    img[:, w // 2 :] = 0.75
    n_l = np.array([1.0, 0.0, -1.0]) / math.sqrt(2)
    n_r = np.array([-1.0, 0.0, -1.0]) / math.sqrt(2)
    left = plane_depth(n_l, d=-2.0)
    right = plane_depth(n_r, d=-2.0)
    us = np.arange(w)[None, :].repeat(h, 0)
    ps = np.where(us < w // 2, left, right)
    return torch.from_numpy(img), PseudoDepth(depth=ps.astype(np.float32))


def test_edge_loss_zero_for_identical():
    img, ps = crease_scene()
    pred = torch.from_numpy(ps.depth.astype(np.float64))
    loss = edge_aware_relative_normal_loss(pred, ps, img, K, EdgePairSpec(seed=0))
    assert float(loss) == pytest.approx(0.0, abs=1e-12)


def test_edge_loss_crease_vs_flat():
    # teacher has a 90-degree crease (normal dot 0 across the edge); flat prediction
    # keeps dot 1, so every pair contributes |1 - 0| = 1
    img, ps = crease_scene()
    pred_flat = torch.full((32, 32), 2.0, dtype=torch.float64)
    loss = edge_aware_relative_normal_loss(pred_flat, ps, img, K, EdgePairSpec(seed=0))
    assert float(loss) == pytest.approx(1.0, abs=1e-6)


def test_edge_loss_matches_scalar_reimplementation():
    rng = np.random.default_rng(8)
    h = w = 16
    small_k = Intrinsics(fx=20.0, fy=20.0, cx=7.5, cy=7.5)
    img = torch.from_numpy(rng.uniform(0, 1, (h, w, 3)))
    ps = PseudoDepth(depth=rng.uniform(1.5, 2.5, (h, w)).astype(np.float32))
    pred = torch.from_numpy(rng.uniform(1.5, 2.5, (h, w)))
    spec = EdgePairSpec(n_pairs=16, radius=2, percentile=90.0, seed=77)
    loss = float(edge_aware_relative_normal_loss(pred, ps, img, small_k, spec))

    from mesadepth.supervised_pretrain import detect_image_edges

    edges, gx, gy = detect_image_edges(img, 90.0)
    margin = 3
    usable = np.zeros_like(edges)
    usable[margin : h - margin, margin : w - margin] = edges[margin : h - margin, margin : w - margin]
    rows, cols = np.nonzero(usable)
    r2 = np.random.default_rng(77)
    chosen = r2.choice(rows.size, size=min(16, rows.size), replace=False)
    n_pred, _ = normals_from_depth(pred, small_k)
    n_ps, _ = normals_from_depth(torch.from_numpy(ps.depth).double(), small_k)
    vals = []
    for idx in chosen:
        r, c = rows[idx], cols[idx]
        mag = math.hypot(gx[r, c], gy[r, c])
        oc = round(2 * gx[r, c] / mag)
        orr = round(2 * gy[r, c] / mag)
        d_pred = float(n_pred[r + orr, c + oc] @ n_pred[r - orr, c - oc])
        d_ps = float(n_ps[r + orr, c + oc] @ n_ps[r - orr, c - oc])
        vals.append(abs(d_pred - d_ps))
    assert loss == pytest.approx(float(np.mean(vals)), rel=1e-9)


def test_edge_loss_no_edges(caplog):
    img = torch.full((16, 16, 3), 0.5, dtype=torch.float64)  # constant: no gradient anywhere
    ps = PseudoDepth(depth=np.full((16, 16), 2.0, dtype=np.float32))
    pred = torch.full((16, 16), 2.0, dtype=torch.float64)
    with caplog.at_level(logging.WARNING):
        loss = edge_aware_relative_normal_loss(pred, ps, img, K, EdgePairSpec(seed=0))
    assert float(loss) == 0.0
    assert "no usable edge" in caplog.text


# ------------------------------------------------------------- combined loss

def combined_inputs(seed=0):
    seq = generate_synthetic_sequence(random_scene_spec(seed, n_frames=2))
    img_a = torch.from_numpy(seq.frames[0].values).double()
    img_b = torch.from_numpy(seq.frames[1].values).double()
    depth_a = torch.from_numpy(seq.gt_depths[0].depth).double()
    depth_b = torch.from_numpy(seq.gt_depths[1].depth).double()
    pose = seq.gt_poses[0]
    from mesadepth.core_data import se3_to_6d

    p6 = se3_to_6d(pose)
    pose_vec = torch.from_numpy(np.concatenate([p6.rotation, p6.translation]))
    ps = pseudo_depth_oracle(seq.gt_depths[0], PseudoNoiseSpec(sigma=0.0, scale_min=1.3, scale_max=1.3))
    return img_a, img_b, depth_a, depth_b, pose_vec, ps, seq.intrinsics


def test_combined_all_zero_weights():
    img_a, img_b, d_a, d_b, pose, ps, intr = combined_inputs()
    total, breakdown = combined_loss(
        img_a, img_b, d_a, d_b, pose, ps, LossWeights(0, 0, 0, 0, 0), intr
    )
    assert float(total) == 0.0
    assert set(breakdown) == {"photometric_weighted", "geometry", "normal", "ranking", "relative_normal"}


def test_combined_single_term_isolation():
    img_a, img_b, d_a, d_b, pose, ps, intr = combined_inputs()
    total, _ = combined_loss(img_a, img_b, d_a, d_b, pose, ps, LossWeights(1, 0, 0, 0, 0), intr)

    rot, t = pose_vec_to_rt(pose)
    warp = inverse_warp(img_b, d_b, d_a, rot, t, intr)
    from mesadepth.geometric_pretrain import depth_inconsistency, photometric_loss

    d_diff = depth_inconsistency(warp)
    expected = photometric_loss(img_a, warp, PhotometricParams(), weight=1.0 - d_diff)
    assert float(total) == pytest.approx(float(expected), rel=1e-12)


def test_combined_is_weighted_sum_of_terms():
    img_a, img_b, d_a, d_b, pose, ps, intr = combined_inputs(seed=1)
    w = LossWeights(1.0, 0.5, 0.1, 1.0, 1.0)
    total, breakdown = combined_loss(img_a, img_b, d_a, d_b, pose, ps, w, intr)
    hand = (
        w.alpha * breakdown["photometric_weighted"]
        + w.beta * breakdown["geometry"]
        + w.gamma * breakdown["normal"]
        + w.delta * breakdown["ranking"]
        + w.epsilon * breakdown["relative_normal"]
    )
    assert float(total) == pytest.approx(hand, rel=1e-9)


def test_term_isolation_gradients():
    img_a, img_b, d_a, d_b, pose, ps, intr = combined_inputs(seed=2)

    def grad_wrt_depth(weights):
        d = d_a.clone().requires_grad_(True)
        total, _ = combined_loss(img_a, img_b, d, d_b, pose, ps, weights, intr)
        (g,) = torch.autograd.grad(total, d)
        return g

    g_no_normal = grad_wrt_depth(LossWeights(1.0, 0.5, 0.0, 1.0, 1.0))
    g_photo_geo = grad_wrt_depth(LossWeights(1.0, 0.5, 0.0, 0.0, 0.0))
    g_ranking = grad_wrt_depth(LossWeights(0.0, 0.0, 0.0, 1.0, 0.0))
    g_ern = grad_wrt_depth(LossWeights(0.0, 0.0, 0.0, 0.0, 1.0))
    recomposed = g_photo_geo + g_ranking + g_ern
    assert float((g_no_normal - recomposed).abs().max()) < 1e-10


def test_supervised_losses_gradient_fd():
    rng = np.random.default_rng(9)
    small_k = Intrinsics(fx=20.0, fy=20.0, cx=7.5, cy=7.5)
    ps = PseudoDepth(depth=rng.uniform(1.5, 2.8, (16, 16)).astype(np.float32))
    img = torch.from_numpy(rng.uniform(0, 1, (16, 16, 3)))
    d0 = torch.from_numpy(rng.uniform(1.5, 2.8, (16, 16)))

    losses = {
        "normal": lambda d: normal_matching_loss(d, torch.from_numpy(ps.depth).double(), small_k),
        "ranking": lambda d: confident_depth_ranking_loss(d, ps, RankingSamplerSpec(n_pairs=64, seed=3)),
        "edge": lambda d: edge_aware_relative_normal_loss(d, ps, img, small_k, EdgePairSpec(n_pairs=32, seed=3)),
    }
    for name, fn in losses.items():
        d = d0.clone().requires_grad_(True)
        (g,) = torch.autograd.grad(fn(d), d, allow_unused=False)
        for i in rng.choice(d0.numel(), size=8, replace=False):
            plus, minus = d0.flatten().clone(), d0.flatten().clone()
            plus[i] += 1e-4
            minus[i] -= 1e-4
            fd = (float(fn(plus.reshape(16, 16))) - float(fn(minus.reshape(16, 16)))) / 2e-4
            a = float(g.flatten()[i])
            if max(abs(fd), abs(a)) < 1e-9:
                continue
            assert abs(fd - a) <= 1e-2 * max(abs(fd), abs(a)), f"{name}[{i}]: {fd} vs {a}"


# ------------------------------------------------------------- stage driver

def test_run_gp_sp_stage(tmp_path):
    seqs = [generate_synthetic_sequence(random_scene_spec(s, n_frames=3)) for s in (0, 1)]
    mp = run_mp_stage(MPConfig(epochs=1, batch_size=8, seed=0), seqs, tmp_path / "mp")
    cfg = GPSPConfig(epochs=1, batch_size=4, seed=0)
    result = run_gp_sp_stage(cfg, seqs, tmp_path / "gpsp", init=mp.checkpoint)
    assert result.checkpoint.stage == "gp_sp"
    assert result.checkpoint.history == ("mp", "gp_sp")
    header = result.log_csv.read_text().splitlines()[0].split(",")
    assert header == ["step", "photometric_weighted", "geometry", "normal", "ranking", "relative_normal"]
    rows = result.log_csv.read_text().splitlines()[1:]
    assert rows and all(len(r.split(",")) == 6 for r in rows)

    with pytest.raises(ValueError, match="'mp' or 'gp'"):
        run_gp_sp_stage(cfg, seqs, tmp_path / "bad", init=result.checkpoint)


def test_run_gp_sp_shape_mismatch(tmp_path):
    seqs = [generate_synthetic_sequence(random_scene_spec(0, n_frames=3))]
    mp = run_mp_stage(MPConfig(epochs=1, batch_size=8, seed=0), seqs, tmp_path / "mp")
    bad = [[PseudoDepth(depth=np.ones((8, 8), dtype=np.float32))] * 3]
    with pytest.raises(ValueError, match="shape"):
        run_gp_sp_stage(GPSPConfig(epochs=1, seed=0), seqs, tmp_path / "x", init=mp.checkpoint,
                        pseudo_maps=bad)
