"""Spatio-temporal region graph built from tensor shape alone.

One node per region descriptor. Node i (0-based) belongs to frame i // R
(0-based); its neighbors are every node of its own frame (including itself)
and of frames within TEMPORAL_WINDOW, i.e. j is a neighbor of i iff
|frame(i) - frame(j)| <= window. Feature values never influence the
topology. The encoder is defined on the default window of 1 (adjacent
frames only, no skip edges); the window parameter exists so that
alternative interpretation can be examined in isolation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Frames within this distance are connected; 1 = adjacent frames only.
TEMPORAL_WINDOW = 1

# Upper bound on node count; reject larger graphs rather than truncating.
DEFAULT_MAX_NODES = 4_000_000


@dataclass(frozen=True)
class RegionGraph:
    """Immutable region graph for a video of n_frames x n_regions nodes."""

    n_frames: int
    n_regions: int
    window: int = TEMPORAL_WINDOW

    @property
    def n_nodes(self) -> int:
        return self.n_frames * self.n_regions

    def node_frame(self, i: int) -> int:
        """0-based frame index of node i."""
        self._check_node(i)
        return i // self.n_regions

    def neighbors(self, i: int) -> np.ndarray:
        """Sorted neighbor ids of node i, self-loop included.

        Neighborhoods are contiguous id ranges because nodes are numbered
        frame-major: all nodes of frames within the temporal window.
        """
        start, stop = self.neighbor_bounds(i)
        return np.arange(start, stop)

    def neighbor_bounds(self, i: int) -> tuple[int, int]:
        """Half-open id range [start, stop) equal to neighbors(i)."""
        self._check_node(i)
        f = i // self.n_regions
        return (
            max(0, f - self.window) * self.n_regions,
            min(self.n_frames, f + self.window + 1) * self.n_regions,
        )

    def degree(self, i: int) -> int:
        start, stop = self.neighbor_bounds(i)
        return stop - start

    def degrees(self) -> np.ndarray:
        """Degree of every node, in node id order."""
        frames = np.arange(self.n_frames)
        frame_deg = (
            np.minimum(self.n_frames, frames + self.window + 1)
            - np.maximum(0, frames - self.window)
        ) * self.n_regions
        return np.repeat(frame_deg, self.n_regions)

    def _check_node(self, i: int) -> None:
        if not (0 <= i < self.n_nodes):
            raise IndexError(f"node {i} out of range [0, {self.n_nodes})")


def build_region_graph(
    n_frames: int,
    n_regions: int,
    window: int = TEMPORAL_WINDOW,
    max_nodes: int = DEFAULT_MAX_NODES,
) -> RegionGraph:
    """Build the region graph for a video shape.

    Rejects node counts above max_nodes instead of truncating.
    """
    if n_frames < 1 or n_regions < 1:
        raise ValueError("n_frames and n_regions must be >= 1")
    if window < 0:
        raise ValueError("window must be >= 0")
    if n_frames * n_regions > max_nodes:
        raise ValueError(
            f"graph of {n_frames * n_regions} nodes exceeds limit {max_nodes}"
        )
    return RegionGraph(n_frames, n_regions, window)


def degree_histogram(graph: RegionGraph) -> dict[int, int]:
    """Exact map of degree -> node count."""
    degrees, counts = np.unique(graph.degrees(), return_counts=True)
    return {int(d): int(c) for d, c in zip(degrees, counts)}
