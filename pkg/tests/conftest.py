"""Shared fixtures and oracle helpers."""

from __future__ import annotations

import numpy as np
import pytest

from regat import counters
from regat.features import RegionFeatureTensor
from regat.model import ModelConfig, embed_video, init_params
from regat.training import triplet_loss


@pytest.fixture(autouse=True)
def _reset_counters():
    counters.reset_all()
    yield
    counters.reset_all()


def tiny_config(**overrides) -> ModelConfig:
    base = dict(in_dim=3, mid_dim=2, n_layers=2, embed_dim=3)
    base.update(overrides)
    return ModelConfig(**base)


def random_tensor(rng, n_frames, n_regions, n_channels, video_id="v") -> RegionFeatureTensor:
    return RegionFeatureTensor(
        video_id, rng.standard_normal((n_frames, n_regions, n_channels)).astype(np.float32)
    )


def grad_matches_fd(fd: float, grad: float, rel_tol=1e-4, abs_tol=1e-8) -> bool:
    """Central-difference agreement with an absolute floor."""
    return abs(fd - grad) <= max(abs_tol, rel_tol * max(abs(fd), abs(grad)))


def fd_triplet_gradient(params, videos, margin, name, index, h=1e-5) -> float:
    """Central finite difference of the triplet loss along one parameter entry.

    Uses only the tape-free forward pass, so it is an independent check of
    the recorded gradients.
    """
    def loss_at(delta):
        q = params.copy()
        if q.arrays[name].ndim:
            q.arrays[name][index] += delta
        else:
            q.arrays[name] = q.arrays[name] + delta
        embs = [embed_video(q, v) for v in videos]
        return triplet_loss(*embs, margin)

    return (loss_at(h) - loss_at(-h)) / (2 * h)


def make_tiny_instance(seed, **config_overrides):
    """Random tiny model plus an anchor/positive/negative video triple."""
    rng = np.random.default_rng(seed)
    config = tiny_config(**config_overrides)
    params = init_params(config, seed=seed + 1)
    videos = [
        random_tensor(rng, int(rng.integers(1, 4)), int(rng.integers(1, 3)), config.in_dim, f"v{i}")
        for i in range(3)
    ]
    return params, videos
