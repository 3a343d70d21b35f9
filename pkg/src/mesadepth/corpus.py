"""Corpus handling: directories of frame sequences and train/eval splits."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .core_data import (
    DataError,
    DepthMap,
    FrameSequence,
    Image,
    Intrinsics,
    generate_synthetic_sequence,
    load_sequence,
    random_scene_spec,
    save_sequence,
)


def generate_corpus(
    out_dir: Path | str,
    n_sequences: int = 10,
    frames_per_sequence: int = 20,
    height: int = 64,
    width: int = 64,
    seed: int = 0,
) -> list[Path]:
    """Write a synthetic corpus of sequence directories; returns their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(n_sequences):
        spec = random_scene_spec(seed * 10_000 + i, n_frames=frames_per_sequence,
                                 height=height, width=width)
        seq = generate_synthetic_sequence(spec)
        seq_dir = out / f"seq_{i:03d}"
        save_sequence(seq, seq_dir)
        paths.append(seq_dir)
    return paths


def load_corpus(path: Path | str) -> list[FrameSequence]:
    root = Path(path)
    seq_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not seq_dirs:
        raise DataError(f"no sequence directories under {root}")
    return [load_sequence(d) for d in seq_dirs]


def split_sequences(
    sequences: list[FrameSequence], eval_fraction: float = 0.2, seed: int = 0
) -> tuple[list[FrameSequence], list[FrameSequence]]:
    """Deterministic by-sequence split; at least one sequence on each side."""
    n = len(sequences)
    if n < 2:
        raise DataError("need at least 2 sequences to split")
    order = np.random.default_rng(seed).permutation(n)
    n_eval = min(max(1, int(round(eval_fraction * n))), n - 1)
    eval_idx = set(order[:n_eval].tolist())
    train = [sequences[i] for i in range(n) if i not in eval_idx]
    held_out = [sequences[i] for i in range(n) if i in eval_idx]
    return train, held_out


def all_images(sequences: list[FrameSequence]) -> list[Image]:
    return [f for seq in sequences for f in seq.frames]


def consecutive_pairs(
    sequences: list[FrameSequence], stride: int = 1
) -> list[tuple[Image, Image, Intrinsics]]:
    """(I_a, I_b, K) for frames (i, i+stride) of every sequence."""
    pairs = []
    for seq in sequences:
        for i in range(len(seq) - stride):
            pairs.append((seq.frames[i], seq.frames[i + stride], seq.intrinsics))
    return pairs


def labeled_frames(
    sequences: list[FrameSequence],
) -> list[tuple[Image, DepthMap, Intrinsics]]:
    items = []
    for seq in sequences:
        if seq.gt_depths is None:
            continue
        for img, depth in zip(seq.frames, seq.gt_depths):
            items.append((img, depth, seq.intrinsics))
    return items
