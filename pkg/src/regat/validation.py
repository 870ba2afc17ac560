"""Input validation helpers for the estimator-facing API."""

from __future__ import annotations

import numpy as np

from .features import RegionFeatureTensor


def as_tensor_list(X) -> list[RegionFeatureTensor]:
    """Coerce estimator input into region feature tensors.

    Accepts RegionFeatureTensor objects or raw (frames, regions, channels)
    arrays (which get positional ids). All videos must agree on region and
    channel counts.
    """
    if isinstance(X, (RegionFeatureTensor, np.ndarray)):
        X = [X]
    tensors = []
    for i, item in enumerate(X):
        if isinstance(item, RegionFeatureTensor):
            tensors.append(item)
        else:
            arr = np.asarray(item)
            if arr.ndim != 3:
                raise ValueError(
                    f"X[{i}]: expected a (frames, regions, channels) array, got shape {arr.shape}"
                )
            tensors.append(RegionFeatureTensor(f"video_{i:05d}", arr.astype(np.float32)))
    if not tensors:
        raise ValueError("X is empty")
    shapes = {(t.n_regions, t.n_channels) for t in tensors}
    if len(shapes) != 1:
        raise ValueError(f"inconsistent region/channel counts across videos: {sorted(shapes)}")
    ids = [t.video_id for t in tensors]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate video ids in X")
    return tensors


def check_labels(y, n_videos: int) -> list[str]:
    """Group labels, one per video, as strings."""
    if y is None:
        raise ValueError("group labels are required for fitting")
    labels = [str(label) for label in np.asarray(y).reshape(-1)]
    if len(labels) != n_videos:
        raise ValueError(f"got {len(labels)} labels for {n_videos} videos")
    return labels
