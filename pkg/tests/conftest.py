import numpy as np
import pytest
import torch

from mesadepth.core_data import (
    generate_synthetic_sequence,
    random_closure_scene_spec,
    random_scene_spec,
)

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def wedge_seq():
    """Continuous-depth scene: warp closure holds at every interior pixel."""
    return generate_synthetic_sequence(random_closure_scene_spec(7))


@pytest.fixture(scope="session")
def general_seq():
    """Scene with bounded primitives (has occlusion edges)."""
    return generate_synthetic_sequence(random_scene_spec(7, n_frames=4))


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Small on-disk corpus: 3 sequences x 4 frames."""
    from mesadepth.corpus import generate_corpus

    root = tmp_path_factory.mktemp("tiny_corpus")
    generate_corpus(root, n_sequences=3, frames_per_sequence=4, seed=11)
    return root


def seq_pair_tensors(seq, i=0):
    """(img_a, img_b, depth_a, depth_b, rotation, translation, K) as torch tensors."""
    pose = seq.gt_poses[i]
    return (
        torch.from_numpy(seq.frames[i].values),
        torch.from_numpy(seq.frames[i + 1].values),
        torch.from_numpy(seq.gt_depths[i].depth),
        torch.from_numpy(seq.gt_depths[i + 1].depth),
        torch.from_numpy(pose.rotation),
        torch.from_numpy(pose.translation),
        seq.intrinsics,
    )


def interior_mask(valid: np.ndarray, margin: int = 2) -> np.ndarray:
    out = np.zeros_like(valid)
    out[margin:-margin, margin:-margin] = valid[margin:-margin, margin:-margin]
    return out
