"""Synthesized clips and a desk-scale engine model, shared across tests."""

from __future__ import annotations

import subprocess
import sys

import cv2
import numpy as np
import pytest


def write_clip(path, n_frames: int, fps: float = 8.0, size=(64, 48), static=False, seed=0):
    writer = cv2.VideoWriter(str(path), cv2.VideoWriter_fourcc(*"MJPG"), fps, size)
    assert writer.isOpened(), "MJPG writer unavailable"
    rng = np.random.default_rng(seed)
    frame = rng.integers(0, 256, (size[1], size[0], 3)).astype(np.uint8)
    for _ in range(n_frames):
        if not static:
            frame = rng.integers(0, 256, (size[1], size[0], 3)).astype(np.uint8)
        writer.write(frame)
    writer.release()
    return path


def run_engine(*args):
    """Invoke the retrieval engine's CLI (the primary's public interface)."""
    return subprocess.run(
        [sys.executable, "-m", "regat.cli", *map(str, args)],
        capture_output=True,
        text=True,
    )


@pytest.fixture(scope="session")
def short_clip(tmp_path_factory):
    return write_clip(tmp_path_factory.mktemp("clips") / "short.avi", n_frames=24, seed=1)


@pytest.fixture(scope="session")
def static_clip(tmp_path_factory):
    return write_clip(
        tmp_path_factory.mktemp("clips") / "static.avi", n_frames=24, static=True, seed=2
    )


@pytest.fixture(scope="session")
def engine_model(tmp_path_factory):
    """A tiny engine model for 3840-channel input, trained via the CLI."""
    workdir = tmp_path_factory.mktemp("engine")
    corpus = workdir / "corpus"
    result = run_engine(
        "synth", "--out", corpus, "--groups", "2", "--per-group", "2",
        "--frames-min", "2", "--frames-max", "3", "--regions", "9",
        "--channels", "3840", "--seed", "5",
    )
    assert result.returncode == 0, result.stderr
    model = workdir / "model.bin"
    result = run_engine(
        "train", "--corpus", corpus, "--out", model, "--epochs", "1",
        "--mid-dim", "2", "--layers", "1", "--embed-dim", "4",
        "--triplets-per-pool", "1", "--pools", "1", "--lr", "1e-3", "--seed", "0",
    )
    assert result.returncode == 0, result.stderr
    return model
