"""Encoder probes, decoder positivity, pose initialization, checkpoint round-trips."""

import numpy as np
import pytest
import torch

from mesadepth.core_data import Image
from mesadepth.networks import (
    DISP_A,
    DISP_B,
    PROBE_NAMES,
    Checkpoint,
    CheckpointError,
    EncoderSpec,
    ModelBundle,
    depth_decoder_forward,
    disparity_to_depth,
    encoder_forward,
    image_to_tensor,
    load_checkpoint,
    pose_net_forward,
    restore_bundle,
    save_checkpoint,
)
from mesadepth.tensorio import ContainerError, check_prefix_free


@pytest.fixture(scope="module")
def bundle():
    return ModelBundle(
        EncoderSpec(),
        parts=("encoder", "depth_decoder", "pose_net", "mp_head", "mask_token"),
        seed=0,
    )


def test_zero_image_finite_probes(bundle):
    img = Image(values=np.zeros((64, 64, 3), dtype=np.float32))
    _, probes = encoder_forward(bundle, img, probe=True)
    assert set(probes) == set(PROBE_NAMES)
    for name, act in probes.items():
        assert torch.isfinite(act).all(), name


def test_probe_transparency_bitwise(bundle):
    x = torch.rand(2, 3, 64, 64, generator=torch.Generator().manual_seed(1))
    feats_off, none = bundle.encoder(x, probe=False)
    feats_on, probes = bundle.encoder(x, probe=True)
    assert none is None and probes is not None
    for a, b in zip(feats_off, feats_on):
        assert torch.equal(a, b)


def test_downsample_arithmetic(bundle):
    x = torch.rand(1, 3, 64, 64)
    feats, _ = bundle.encoder(x)
    assert tuple(feats[-1].shape[2:]) == (4, 4)  # 64 / 2^4


def test_indivisible_size_rejected(bundle):
    with pytest.raises(ValueError, match="divisible"):
        bundle.encoder(torch.rand(1, 3, 60, 60))


def test_disparity_parameterization_limits():
    assert float(disparity_to_depth(torch.tensor(-1e9))) == pytest.approx(1.0 / DISP_B)
    assert float(disparity_to_depth(torch.tensor(1e9))) == pytest.approx(1.0 / (DISP_A + DISP_B))


def test_decoder_positivity():
    # parameterization: positive for any raw logit
    raw = torch.from_numpy(np.random.default_rng(0).normal(0, 50, size=10_000))
    assert float(disparity_to_depth(raw).min()) > 0
    # and through randomly initialized decoders
    for seed in range(3):
        b = ModelBundle(EncoderSpec(), ("encoder", "depth_decoder"), seed=seed)
        feats, _ = b.encoder(torch.rand(1, 3, 64, 64, generator=torch.Generator().manual_seed(seed)))
        assert float(b.depth_decoder(feats).min()) > 0


def test_decoder_emits_dense_valid_depth(bundle):
    img = Image(values=np.random.default_rng(2).uniform(0, 1, (64, 64, 3)).astype(np.float32))
    feats, _ = encoder_forward(bundle, img)
    dm = depth_decoder_forward(bundle, feats)
    assert dm.valid_mask.all()
    assert dm.depth.shape == (64, 64)


def test_pose_identity_at_init():
    b = ModelBundle(EncoderSpec(), ("pose_net",), seed=5)
    x = torch.rand(1, 3, 64, 64)
    assert float(b.pose_net(x, x).abs().max()) == 0.0


def test_pose_wrapper_and_swap(bundle):
    rng = np.random.default_rng(3)
    img_a = Image(values=rng.uniform(0, 1, (64, 64, 3)).astype(np.float32))
    img_b = Image(values=rng.uniform(0, 1, (64, 64, 3)).astype(np.float32))
    p_ab = pose_net_forward(bundle, img_a, img_b)
    p_ba = pose_net_forward(bundle, img_b, img_a)
    # no symmetry constraint is imposed; only finiteness is contractual
    assert np.isfinite(p_ab.rotation).all() and np.isfinite(p_ba.rotation).all()


def test_pose_size_mismatch_rejected(bundle):
    with pytest.raises(ValueError, match="mismatch"):
        bundle.pose_net(torch.rand(1, 3, 64, 64), torch.rand(1, 3, 32, 32))


def test_checkpoint_byte_stable(tmp_path, bundle):
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(bundle, p1, stage="mp", seed=0, history=("mp",))
    ck = load_checkpoint(p1)
    restored = restore_bundle(ck, bundle.parts, seed=42)
    save_checkpoint(restored, p2, stage="mp", seed=0, history=("mp",))
    assert p1.read_bytes() == p2.read_bytes()


def test_mp_checkpoint_into_gp_parts(tmp_path):
    mp_bundle = ModelBundle(EncoderSpec(), ("encoder", "mp_head", "mask_token"), seed=1)
    path = tmp_path / "mp.ckpt"
    save_checkpoint(mp_bundle, path, stage="mp", seed=1, history=("mp",))
    ck = load_checkpoint(path)

    gp_bundle = restore_bundle(ck, ("encoder", "depth_decoder", "pose_net"), seed=9)
    ref = mp_bundle.state_dict()
    for name, tensor in gp_bundle.state_dict().items():
        if name.startswith("encoder."):
            assert torch.equal(tensor, ref[name]), name
    # reconstruction head is discarded; decoder exists freshly initialized
    assert not hasattr(gp_bundle, "mp_head")
    assert hasattr(gp_bundle, "depth_decoder")


def test_corrupt_checkpoint_rejected(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"MESATNSR" + b"\xff" * 32)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_bytes(b"not a container at all")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_fingerprint_mismatch_requires_force(tmp_path):
    b = ModelBundle(EncoderSpec(), ("encoder",), seed=0)
    path = tmp_path / "x.ckpt"
    save_checkpoint(b, path, stage="mp", seed=0)
    ck = load_checkpoint(path)
    other_spec = EncoderSpec(norm_groups=4)
    with pytest.raises(CheckpointError, match="fingerprint"):
        restore_bundle(ck, ("encoder",), seed=0, spec=other_spec)
    restore_bundle(ck, ("encoder",), seed=0, spec=other_spec, force=True)


def test_unknown_stage_tag_rejected():
    with pytest.raises(CheckpointError):
        Checkpoint(params={}, stage="bogus", seed=0, config={}, fingerprint="x")


def test_prefix_free_namespace():
    check_prefix_free(["encoder.stem.conv.weight", "encoder.stem.conv.bias"])
    with pytest.raises(ContainerError):
        check_prefix_free(["encoder.stem", "encoder.stem.conv.weight"])
    with pytest.raises(ContainerError):
        check_prefix_free(["a.b", "a.b"])


def test_image_to_tensor_layout():
    img = Image(values=np.random.default_rng(0).uniform(0, 1, (32, 64, 3)).astype(np.float32))
    t = image_to_tensor(img)
    assert tuple(t.shape) == (1, 3, 32, 64)
    assert torch.equal(t[0, 1], torch.from_numpy(img.values[:, :, 1]))
