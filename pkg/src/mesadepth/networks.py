"""Toy encoder with nine named probe points, depth decoder, pose network, checkpoints.

The encoder is a small 4-stage convolutional net (stride-2 per stage). Probe
points sit after normalization layers and mirror the early / middle-block /
late layout that the layer-wise similarity analysis depends on: probes 0-1 at
the ends of the first two stages, probes 2-6 inside the third stage's blocks,
probe 7 at its downsample, probe 8 at the final normalization.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import tensorio
from .core_data import DepthMap, Image, Pose6D

PROBE_NAMES: tuple[str, ...] = tuple(f"layer{i}" for i in range(9))

STAGE_TAGS = ("mp", "gp", "gp_sp", "finetune")

PART_NAMES = ("encoder", "depth_decoder", "pose_net", "mp_head", "mask_token")

# depth = 1 / (DISP_A * sigmoid(raw) + DISP_B): range (1/(A+B), 1/B)
DISP_A = 10.0
DISP_B = 0.01

POSE_OUTPUT_SCALE = 0.01


class CheckpointError(RuntimeError):
    """Checkpoint incompatibility or corruption."""


@dataclass(frozen=True)
class EncoderSpec:
    stage_channels: tuple[int, int, int, int] = (32, 64, 128, 256)
    mid_blocks: int = 5  # third stage hosts probes 2-6, one per block
    norm_groups: int = 8

    def __post_init__(self):
        if len(self.stage_channels) != 4:
            raise ValueError("encoder uses exactly 4 stages")
        if self.mid_blocks != 5:
            raise ValueError("third stage needs 5 blocks to host probes 2-6")

    @property
    def probe_names(self) -> tuple[str, ...]:
        return PROBE_NAMES

    @property
    def total_downsample(self) -> int:
        return 16

    def to_config(self) -> dict:
        return {
            "stage_channels": list(self.stage_channels),
            "mid_blocks": self.mid_blocks,
            "norm_groups": self.norm_groups,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "EncoderSpec":
        return cls(
            stage_channels=tuple(cfg["stage_channels"]),
            mid_blocks=int(cfg["mid_blocks"]),
            norm_groups=int(cfg["norm_groups"]),
        )


def _gn(groups: int, channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(groups, channels), channels)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, groups: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm1 = _gn(groups, channels)
        self.act = nn.ReLU(inplace=False)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (block output, norm1 activation) so probes stay side-effect free."""
        h = self.norm1(self.conv1(x))
        return self.act(x + h), h


class Downsample(nn.Module):
    def __init__(self, c_in: int, c_out: int, groups: int):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)
        self.norm = _gn(groups, c_out)
        self.act = nn.ReLU(inplace=False)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.norm(self.conv(x))
        return self.act(h), h


class ToyEncoder(nn.Module):
    """4-stage encoder; forward returns per-stage features and optional probe map."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        c1, c2, c3, c4 = spec.stage_channels
        g = spec.norm_groups
        self.spec = spec
        self.stem = Downsample(3, c1, g)
        self.block1 = ResidualBlock(c1, g)
        self.down1 = Downsample(c1, c2, g)
        self.block2 = ResidualBlock(c2, g)
        self.down2 = Downsample(c2, c3, g)
        self.mid_blocks = nn.ModuleList(ResidualBlock(c3, g) for _ in range(spec.mid_blocks))
        self.down3 = Downsample(c3, c4, g)
        self.block4 = ResidualBlock(c4, g)
        self.final_norm = _gn(g, c4)

    def forward(
        self, x: torch.Tensor, probe: bool = False
    ) -> tuple[list[torch.Tensor], dict[str, torch.Tensor] | None]:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) input, got {tuple(x.shape)}")
        h, w = x.shape[2], x.shape[3]
        if h % 16 != 0 or w % 16 != 0:
            raise ValueError(f"input size {h}x{w} not divisible by total downsample 16")
        probes: dict[str, torch.Tensor] = {}

        x0, _ = self.stem(x)
        x1, _ = self.block1(x0)
        x1, n0 = self.down1(x1)
        probes["layer0"] = n0
        x2, _ = self.block2(x1)
        x2, n1 = self.down2(x2)
        probes["layer1"] = n1
        x3 = x2
        for i, blk in enumerate(self.mid_blocks):
            x3, n = blk(x3)
            probes[f"layer{2 + i}"] = n
        x4, n7 = self.down3(x3)
        probes["layer7"] = n7
        x4, _ = self.block4(x4)
        x4 = self.final_norm(x4)
        probes["layer8"] = x4

        features = [x0, x1, x2, x3, x4]
        return features, (probes if probe else None)


class DepthDecoder(nn.Module):
    """DispNet-style decoder with skip connections; emits strictly positive depth."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        c1, c2, c3, c4 = spec.stage_channels
        g = spec.norm_groups

        def up_block(c_in, c_skip, c_out):
            return nn.Sequential(
                nn.Conv2d(c_in + c_skip, c_out, 3, padding=1), _gn(g, c_out), nn.ReLU()
            )

        self.reduce = nn.Sequential(nn.Conv2d(c4, c3, 3, padding=1), _gn(g, c3), nn.ReLU())
        self.up3 = up_block(c3, c3, c2)  # /16 -> /8, skip from stage-2 output
        self.up2 = up_block(c2, c2, c1)  # /8 -> /4
        self.up1 = up_block(c1, c1, c1)  # /4 -> /2
        self.head = nn.Conv2d(c1, 1, 3, padding=1)
        # bias the initial output toward mid-range indoor depth (~2.5 m) so no
        # stage has to drag the global scale across the sigmoid
        nn.init.constant_(self.head.bias, -3.2)

    @staticmethod
    def _up(x: torch.Tensor) -> torch.Tensor:
        return nn.functional.interpolate(x, scale_factor=2, mode="nearest")

    def forward(self, features: list[torch.Tensor]) -> torch.Tensor:
        x0, x1, x2, x3, x4 = features
        x = self.reduce(x4)
        x = self.up3(torch.cat([self._up(x), x3], dim=1))
        x = self.up2(torch.cat([self._up(x), x1], dim=1))
        x = self.up1(torch.cat([self._up(x), x0], dim=1))
        raw = self.head(self._up(x))
        return disparity_to_depth(raw)


def disparity_to_depth(raw: torch.Tensor) -> torch.Tensor:
    """Map raw logits to depth in (1/(DISP_A+DISP_B), 1/DISP_B) meters."""
    return 1.0 / (DISP_A * torch.sigmoid(raw) + DISP_B)


class PoseNet(nn.Module):
    """Relative pose from a concatenated image pair; zero-initialized final layer."""

    def __init__(self, groups: int = 8):
        super().__init__()
        chans = [16, 32, 64, 128]
        layers: list[nn.Module] = []
        c_in = 6
        for c in chans:
            layers += [nn.Conv2d(c_in, c, 3, stride=2, padding=1), _gn(groups, c), nn.ReLU()]
            c_in = c
        self.convs = nn.Sequential(*layers)
        self.fc = nn.Linear(chans[-1], 6)
        nn.init.zeros_(self.fc.weight)
        nn.init.zeros_(self.fc.bias)

    def forward(self, img_a: torch.Tensor, img_b: torch.Tensor) -> torch.Tensor:
        if img_a.shape != img_b.shape:
            raise ValueError(f"image size mismatch: {tuple(img_a.shape)} vs {tuple(img_b.shape)}")
        x = torch.cat([img_a, img_b], dim=1)
        x = self.convs(x).mean(dim=(2, 3))
        return POSE_OUTPUT_SCALE * self.fc(x)


class MaskedHead(nn.Module):
    """Single linear map from deepest features to the pixels they cover."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        scale = spec.total_downsample
        self.proj = nn.Conv2d(spec.stage_channels[-1], 3 * scale * scale, 1)
        self.shuffle = nn.PixelShuffle(scale)

    def forward(self, deepest: torch.Tensor) -> torch.Tensor:
        return self.shuffle(self.proj(deepest))


class ModelBundle(nn.Module):
    """Encoder plus the stage-specific heads present for a given training phase."""

    def __init__(self, spec: EncoderSpec, parts: tuple[str, ...], seed: int = 0):
        super().__init__()
        unknown = set(parts) - set(PART_NAMES)
        if unknown:
            raise ValueError(f"unknown model parts: {sorted(unknown)}")
        torch.manual_seed(seed)
        self.spec = spec
        self.parts = tuple(parts)
        self.encoder = ToyEncoder(spec)
        if "depth_decoder" in parts:
            self.depth_decoder = DepthDecoder(spec)
        if "pose_net" in parts:
            self.pose_net = PoseNet(spec.norm_groups)
        if "mp_head" in parts:
            self.mp_head = MaskedHead(spec)
        if "mask_token" in parts:
            self.mask_token = nn.Parameter(torch.zeros(3))

    def config(self) -> dict:
        return {"encoder": self.spec.to_config()}


@dataclass(frozen=True)
class Checkpoint:
    """Named float32 parameters plus provenance metadata."""

    params: dict[str, np.ndarray]
    stage: str
    seed: int
    config: dict
    fingerprint: str
    history: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.stage not in STAGE_TAGS and self.stage != "random":
            raise CheckpointError(f"unknown stage tag {self.stage!r}")


def save_checkpoint(
    bundle: ModelBundle,
    path: Path | str,
    stage: str,
    seed: int,
    history: tuple[str, ...] = (),
) -> Checkpoint:
    params = {k: v.detach().cpu().numpy().astype(np.float32) for k, v in bundle.state_dict().items()}
    config = bundle.config()
    ckpt = Checkpoint(
        params=params,
        stage=stage,
        seed=seed,
        config=config,
        fingerprint=tensorio.fingerprint(config),
        history=tuple(history),
    )
    meta = {
        "stage": ckpt.stage,
        "seed": ckpt.seed,
        "config": ckpt.config,
        "fingerprint": ckpt.fingerprint,
        "history": list(ckpt.history),
    }
    tensorio.write_tensors(path, params, meta)
    return ckpt


def load_checkpoint(path: Path | str) -> Checkpoint:
    try:
        tensors, meta = tensorio.read_tensors(path)
    except tensorio.ContainerError as e:
        raise CheckpointError(str(e)) from e
    try:
        return Checkpoint(
            params=tensors,
            stage=meta["stage"],
            seed=int(meta["seed"]),
            config=meta["config"],
            fingerprint=meta["fingerprint"],
            history=tuple(meta.get("history", [])),
        )
    except KeyError as e:
        raise CheckpointError(f"{path}: missing checkpoint metadata field {e}") from e


def restore_bundle(
    ckpt: Checkpoint,
    parts: tuple[str, ...],
    seed: int,
    spec: EncoderSpec | None = None,
    force: bool = False,
) -> ModelBundle:
    """Fresh bundle with matching parameters copied from the checkpoint.

    Parts absent from the checkpoint stay freshly initialized (this is how the
    masked-stage head gets discarded when moving to the geometric stage).
    Config fingerprint mismatches are rejected unless force is set.
    """
    spec = spec or EncoderSpec.from_config(ckpt.config["encoder"])
    expected = tensorio.fingerprint({"encoder": spec.to_config()})
    if ckpt.fingerprint != expected and not force:
        raise CheckpointError(
            f"checkpoint fingerprint {ckpt.fingerprint} does not match current config "
            f"{expected}; pass force to override"
        )
    bundle = ModelBundle(spec, parts, seed=seed)
    state = bundle.state_dict()
    loaded = {}
    for name, tensor in state.items():
        if name in ckpt.params and tuple(ckpt.params[name].shape) == tuple(tensor.shape):
            loaded[name] = torch.from_numpy(ckpt.params[name].copy())
        else:
            loaded[name] = tensor
    bundle.load_state_dict(loaded)
    return bundle


# ---------------------------------------------------------------------------
# Value-object wrappers around the torch modules
# ---------------------------------------------------------------------------


def image_to_tensor(image: Image) -> torch.Tensor:
    """(H, W, 3) [0,1] numpy -> (1, 3, H, W) float32 tensor."""
    return torch.from_numpy(image.values).permute(2, 0, 1).unsqueeze(0).contiguous()


def encoder_forward(
    bundle: ModelBundle, image: Image, probe: bool = False
) -> tuple[list[torch.Tensor], dict[str, torch.Tensor] | None]:
    with torch.no_grad():
        return bundle.encoder(image_to_tensor(image), probe=probe)


def depth_decoder_forward(bundle: ModelBundle, features: list[torch.Tensor]) -> DepthMap:
    with torch.no_grad():
        depth = bundle.depth_decoder(features)
    return DepthMap.dense(depth[0, 0].numpy())


def pose_net_forward(bundle: ModelBundle, img_a: Image, img_b: Image) -> Pose6D:
    with torch.no_grad():
        vec = bundle.pose_net(image_to_tensor(img_a), image_to_tensor(img_b))[0].numpy()
    return Pose6D(rotation=vec[:3].astype(np.float64), translation=vec[3:].astype(np.float64))
