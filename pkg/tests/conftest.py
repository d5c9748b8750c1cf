import numpy as np
import pytest
import torch

from flowvid.scene import SceneConfig, render_sequence


@pytest.fixture(scope="session")
def tiny_sequences():
    """Eight small sequences for fast trainer tests."""
    seqs = []
    for i in range(8):
        cfg = SceneConfig(
            seed=100 + i,
            num_frames=8,
            height=32,
            width=32,
            num_shapes=2,
            camera_pan=(i % 2, 0),
            size_range=(6.0, 12.0),
        )
        seqs.append(render_sequence(cfg))
    return seqs


@pytest.fixture(scope="session")
def small64_sequences():
    """Four 64x64 sequences for progressive-schedule tests."""
    seqs = []
    for i in range(4):
        cfg = SceneConfig(
            seed=200 + i,
            num_frames=8,
            height=64,
            width=64,
            num_shapes=2,
            camera_pan=(0, i % 2),
        )
        seqs.append(render_sequence(cfg))
    return seqs


@pytest.fixture(autouse=True)
def _fixed_torch_state():
    state = torch.get_rng_state()
    yield
    torch.set_rng_state(state)
