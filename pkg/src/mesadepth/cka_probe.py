"""Layer-wise representation analysis: probe activations, linear CKA, profiles.

Activations are captured at nine registered probe layers via forward hooks,
spatially subsampled with a pinned sample manifest so that two checkpoints
can be compared on identical inputs. Similarities use feature-space linear
CKA (deterministic, exactly checkable against the centered-Gram formulation).
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from . import tensorio  # noqa: E402
from .core_data import Image  # noqa: E402
from .networks import PROBE_NAMES, Checkpoint, restore_bundle  # noqa: E402
from .reporting import PNG_METADATA  # noqa: E402


logger = logging.getLogger(__name__)


class DegenerateActivationsError(ValueError):
    """Constant (zero-variance) features make CKA undefined."""


class ManifestMismatchError(ValueError):
    """Activation sets sampled with different manifests cannot be compared."""


class ProbeError(ValueError):
    """Registry refers to a layer that does not exist in the model."""


@dataclass(frozen=True)
class ProbeRegistry:
    """Ordered (identifier, model-layer-name) pairs; exactly nine entries."""

    entries: tuple[tuple[str, str], ...]

    def __post_init__(self):
        entries = tuple((str(i), str(l)) for i, l in self.entries)
        if len(entries) != 9:
            raise ProbeError(f"registry must have exactly 9 entries, got {len(entries)}")
        if tuple(i for i, _ in entries) != PROBE_NAMES:
            raise ProbeError(f"identifiers must be {PROBE_NAMES}")
        object.__setattr__(self, "entries", entries)

    @property
    def identifiers(self) -> tuple[str, ...]:
        return tuple(i for i, _ in self.entries)

    def layer_name(self, identifier: str) -> str:
        return dict(self.entries)[identifier]


def load_registry(path: Path | str) -> ProbeRegistry:
    with open(path) as f:
        data = json.load(f)
    return ProbeRegistry(entries=tuple((e[0], e[1]) for e in data))


def save_registry(registry: ProbeRegistry, path: Path | str) -> None:
    with open(path, "w") as f:
        json.dump([list(e) for e in registry.entries], f, indent=2)


def builtin_registry(name: str) -> ProbeRegistry:
    """Shipped registries: 'toy' for the bundled encoder, 'swin_v2_l' for reference."""
    ref = resources.files("mesadepth").joinpath(f"registries/{name}.json")
    with ref.open() as f:
        data = json.load(f)
    return ProbeRegistry(entries=tuple((e[0], e[1]) for e in data))


@dataclass(frozen=True)
class SampleManifest:
    """Which images and which unit-square positions feed the activation matrices."""

    image_ids: tuple[int, ...]
    positions: np.ndarray  # (n_images, tokens_per_image, 2) in [0, 1)
    seed: int

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 3 or pos.shape[0] != len(self.image_ids) or pos.shape[2] != 2:
            raise ValueError(f"positions must be (n_images, tokens, 2), got {pos.shape}")
        if not ((pos >= 0) & (pos < 1)).all():
            raise ValueError("positions must lie in [0, 1)")
        object.__setattr__(self, "image_ids", tuple(int(i) for i in self.image_ids))
        object.__setattr__(self, "positions", pos)

    def matches(self, other: "SampleManifest") -> bool:
        return (
            self.image_ids == other.image_ids
            and self.seed == other.seed
            and np.array_equal(self.positions, other.positions)
        )

    @property
    def rows(self) -> int:
        return self.positions.shape[0] * self.positions.shape[1]


@dataclass(frozen=True)
class ActivationSet:
    """Probe id -> (rows, channels) activation matrix, all sharing one manifest."""

    activations: dict[str, np.ndarray]
    manifest: SampleManifest
    checkpoint_hash: str | None = None

    def __post_init__(self):
        if set(self.activations) != set(PROBE_NAMES):
            raise ValueError(f"activation set must cover all probes {PROBE_NAMES}")
        acts = {k: np.asarray(v, dtype=np.float32) for k, v in self.activations.items()}
        rows = {k: a.shape[0] for k, a in acts.items()}
        if len(set(rows.values())) != 1:
            raise ValueError(f"row counts differ across probes: {rows}")
        n_rows = next(iter(rows.values()))
        if n_rows != self.manifest.rows:
            raise ValueError("row count does not match the manifest")
        if n_rows < 2:
            raise ValueError("activation sets need at least 2 rows")
        max_channels = max(a.shape[1] for a in acts.values())
        if n_rows < 2 * max_channels:
            logger.warning(
                "activation set has %d rows for up to %d channels; similarities may be "
                "rank-limited (recommended rows >= %d)",
                n_rows, max_channels, 2 * max_channels,
            )
        for k, a in acts.items():
            if not np.isfinite(a).all():
                raise ValueError(f"non-finite activations at probe {k}")
        object.__setattr__(self, "activations", acts)

    def __getitem__(self, probe: str) -> np.ndarray:
        return self.activations[probe]


def checkpoint_hash(ckpt: Checkpoint) -> str:
    h = hashlib.sha256()
    for name in sorted(ckpt.params):
        h.update(name.encode())
        h.update(ckpt.params[name].tobytes())
    return h.hexdigest()[:16]


def collect_activations(
    ckpt: Checkpoint,
    registry: ProbeRegistry,
    dataset: list[Image],
    n_images: int = 128,
    tokens_per_image: int = 64,
    seed: int = 0,
    manifest: SampleManifest | None = None,
) -> ActivationSet:
    """Probe forward passes over sampled images and spatial positions.

    Positions live in the unit square and are mapped to each probe's own grid,
    so one manifest aligns probes of different resolutions. Pass an existing
    manifest to guarantee two checkpoints see identical samples.
    """
    bundle = restore_bundle(ckpt, parts=("encoder",), seed=0)
    bundle.eval()
    available = dict(bundle.encoder.named_modules())
    for identifier, layer in registry.entries:
        if layer not in available:
            probes = [l for _, l in registry.entries if l in available]
            raise ProbeError(
                f"layer {layer!r} (probe {identifier}) not found in model; "
                f"available probe layers include: {sorted(set(probes))[:12]}"
            )

    if manifest is None:
        rng = np.random.default_rng(seed)
        replace = len(dataset) < n_images
        image_ids = tuple(
            int(i) for i in rng.choice(len(dataset), size=n_images, replace=replace)
        )
        positions = rng.uniform(0.0, 1.0, size=(n_images, tokens_per_image, 2))
        manifest = SampleManifest(image_ids=image_ids, positions=positions, seed=seed)

    captured: dict[str, torch.Tensor] = {}
    hooks = []

    def make_hook(identifier: str):
        def hook(_module, _inputs, output):
            captured[identifier] = output

        return hook

    for identifier, layer in registry.entries:
        hooks.append(available[layer].register_forward_hook(make_hook(identifier)))

    rows: dict[str, list[np.ndarray]] = {i: [] for i, _ in registry.entries}
    try:
        with torch.no_grad():
            for img_idx, image_id in enumerate(manifest.image_ids):
                image = dataset[image_id]
                x = torch.from_numpy(image.values).permute(2, 0, 1).unsqueeze(0)
                captured.clear()
                bundle.encoder(x)
                pos = manifest.positions[img_idx]
                for identifier in registry.identifiers:
                    act = captured[identifier][0]  # (C, Hp, Wp)
                    c, hp, wp = act.shape
                    rr = np.floor(pos[:, 1] * hp).astype(int)
                    cc = np.floor(pos[:, 0] * wp).astype(int)
                    rows[identifier].append(act[:, rr, cc].T.numpy())
    finally:
        for h in hooks:
            h.remove()

    activations = {k: np.concatenate(v, axis=0) for k, v in rows.items()}
    return ActivationSet(
        activations=activations, manifest=manifest, checkpoint_hash=checkpoint_hash(ckpt)
    )


def linear_cka(x: np.ndarray, y: np.ndarray) -> float:
    """Feature-space linear CKA: ||Yc' Xc||_F^2 / (||Xc' Xc||_F ||Yc' Yc||_F)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2:
        raise ValueError("CKA expects 2-D matrices")
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"row counts differ: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise ValueError("CKA needs at least 2 rows")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    num = float(np.linalg.norm(yc.T @ xc, "fro") ** 2)
    dx = float(np.linalg.norm(xc.T @ xc, "fro"))
    dy = float(np.linalg.norm(yc.T @ yc, "fro"))
    if dx == 0.0 or dy == 0.0:
        raise DegenerateActivationsError("constant features have zero centered norm")
    return num / (dx * dy)


@dataclass(frozen=True)
class SimilarityMatrix:
    values: np.ndarray  # (9, 9)
    row_label: str
    col_label: str

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (9, 9):
            raise ValueError(f"similarity matrix must be 9x9, got {v.shape}")
        if (v < -1e-6).any() or (v > 1 + 1e-6).any():
            raise ValueError("similarity entries must lie in [0, 1] within 1e-6")
        object.__setattr__(self, "values", v)

    def clamped(self) -> np.ndarray:
        return np.clip(self.values, 0.0, 1.0)


def similarity_matrix(a: ActivationSet, b: ActivationSet,
                      row_label: str = "A", col_label: str = "B") -> SimilarityMatrix:
    """Entry (i, j) = CKA(a[layer_i], b[layer_j]); refuses misaligned manifests."""
    if not a.manifest.matches(b.manifest):
        raise ManifestMismatchError(
            "activation sets were sampled with different manifests; re-collect with "
            "an explicit shared manifest"
        )
    n = len(PROBE_NAMES)
    values = np.zeros((n, n))
    for i, pi in enumerate(PROBE_NAMES):
        for j, pj in enumerate(PROBE_NAMES):
            values[i, j] = linear_cka(a[pi], b[pj])
    m = SimilarityMatrix(values=values, row_label=row_label, col_label=col_label)
    if a is b or (a.checkpoint_hash is not None and a.checkpoint_hash == b.checkpoint_hash):
        sym_err = float(np.abs(values - values.T).max())
        diag_err = float(np.abs(np.diag(values) - 1.0).max())
        if sym_err > 1e-6 or diag_err > 1e-6:
            raise ValueError(
                f"self-comparison must be symmetric with unit diagonal "
                f"(sym {sym_err:.2e}, diag {diag_err:.2e})"
            )
    return m


def first_row_profile(m: SimilarityMatrix) -> np.ndarray:
    """Row 0: similarity of every layer to layer 0 (self-comparison matrices)."""
    if abs(m.values[0, 0] - 1.0) > 1e-6:
        raise ValueError("first-row profile expects a self-comparison matrix (m[0,0] = 1)")
    return m.values[0].copy()


def diagonal_profile(m: SimilarityMatrix) -> np.ndarray:
    """Per-layer similarity between the two compared models."""
    return np.diag(m.values).copy()


@dataclass(frozen=True)
class UShapeScore:
    min_index: int
    depth: float
    is_u_shaped: bool


def u_shape_score(profile: np.ndarray) -> UShapeScore:
    """Dip-and-recover diagnostic on a layer-0 similarity profile."""
    p = np.asarray(profile, dtype=np.float64)
    if p.shape != (9,):
        raise ValueError(f"profile must have 9 entries, got {p.shape}")
    if abs(p[0] - 1.0) > 1e-6:
        raise ValueError("profile element 0 must equal 1")
    min_index = int(np.argmin(p))
    depth = float(min(p[0], p[8]) - p[min_index])
    return UShapeScore(
        min_index=min_index,
        depth=depth,
        is_u_shaped=bool(1 <= min_index <= 7 and depth > 0.05),
    )


def render_heatmap(m: SimilarityMatrix, path: Path | str) -> Path:
    """9x9 annotated heatmap, lighter = more similar; byte-deterministic output."""
    if (m.values < -1e-6).any() or (m.values > 1 + 1e-6).any():
        raise ValueError("refusing to render similarities outside [0, 1]")
    path = Path(path)
    values = m.clamped()
    fig, ax = plt.subplots(figsize=(5.4, 4.6))
    im = ax.imshow(values, cmap="viridis", vmin=0.0, vmax=1.0)
    ticks = list(range(9))
    ax.set_xticks(ticks)
    ax.set_yticks(ticks)
    ax.set_xticklabels(ticks, fontsize=8)
    ax.set_yticklabels(ticks, fontsize=8)
    ax.set_xlabel(m.col_label)
    ax.set_ylabel(m.row_label)
    for i in range(9):
        for j in range(9):
            ax.text(
                j, i, f"{values[i, j]:.2f}",
                ha="center", va="center", fontsize=6,
                color="white" if values[i, j] < 0.6 else "black",
            )
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=PNG_METADATA)
    plt.close(fig)
    return path


def save_activation_set(aset: ActivationSet, path: Path | str) -> None:
    tensors = dict(aset.activations)
    tensors["_manifest_positions"] = aset.manifest.positions.astype(np.float32)
    meta = {
        "probe_names": list(PROBE_NAMES),
        "image_ids": list(aset.manifest.image_ids),
        "seed": aset.manifest.seed,
        "checkpoint_hash": aset.checkpoint_hash,
        "shapes": {k: list(v.shape) for k, v in aset.activations.items()},
    }
    tensorio.write_tensors(path, tensors, meta)


def load_activation_set(path: Path | str) -> ActivationSet:
    tensors, meta = tensorio.read_tensors(path)
    positions = tensors.pop("_manifest_positions").astype(np.float64)
    manifest = SampleManifest(
        image_ids=tuple(meta["image_ids"]), positions=positions, seed=int(meta["seed"])
    )
    return ActivationSet(
        activations=tensors, manifest=manifest, checkpoint_hash=meta.get("checkpoint_hash")
    )
