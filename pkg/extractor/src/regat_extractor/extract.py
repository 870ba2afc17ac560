"""Frame sampling, CNN stage activations, and 3x3 regional max pooling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
import torch
from torchvision.models import resnet50

from .rmf1 import write_rmf1

# ImageNet statistics; standard input normalization for the backbone.
_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)

GRID = 3  # per-stage regions form a GRID x GRID spatial partition


@dataclass(frozen=True)
class ExtractorConfig:
    """Extraction settings, recorded in the output's metadata sidecar.

    With the resnet50 backbone the four stage outputs carry
    256 + 512 + 1024 + 2048 = 3840 channels, and the 3x3 grid gives 9
    regions per frame. weights_path may point to a local state dict;
    without one the backbone is deterministically seeded (the engine
    contract only needs stable, valid descriptors).
    """

    frame_rate: float = 1.0
    backbone: str = "resnet50"
    weights_path: str | None = None
    normalization: str = "l2"  # "l2" (per region, after concat) or "none"
    input_size: int = 224
    seed: int = 0

    def __post_init__(self):
        if self.frame_rate <= 0:
            raise ValueError("frame_rate must be > 0")
        if self.backbone != "resnet50":
            raise ValueError(f"unsupported backbone {self.backbone!r}")
        if self.normalization not in ("l2", "none"):
            raise ValueError("normalization must be 'l2' or 'none'")
        if self.input_size < 32:
            raise ValueError("input_size too small for the backbone")


class _StageExtractor(torch.nn.Module):
    """Backbone trunk returning every bottleneck stage's activation map."""

    def __init__(self, config: ExtractorConfig):
        super().__init__()
        torch.manual_seed(config.seed)
        net = resnet50(weights=None)
        if config.weights_path:
            state = torch.load(config.weights_path, map_location="cpu", weights_only=True)
            net.load_state_dict(state)
        self.stem = torch.nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.stages = torch.nn.ModuleList([net.layer1, net.layer2, net.layer3, net.layer4])
        self.eval()

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = self.stem(x)
        outputs = []
        for stage in self.stages:
            x = stage(x)
            outputs.append(x)
        return outputs


_MODEL_CACHE: dict[tuple, _StageExtractor] = {}


def _backbone(config: ExtractorConfig) -> _StageExtractor:
    key = (config.backbone, config.weights_path, config.seed)
    if key not in _MODEL_CACHE:
        _MODEL_CACHE[key] = _StageExtractor(config)
    return _MODEL_CACHE[key]


def sample_frames(video_path, frame_rate: float = 1.0) -> list[np.ndarray]:
    """BGR frames at 1/frame_rate-second marks; length ceil(duration * rate).

    The frame nearest each sample time is used; the final sample clamps to
    the last frame.
    """
    video_path = Path(video_path)
    if not video_path.exists():
        raise FileNotFoundError(video_path)
    capture = cv2.VideoCapture(str(video_path))
    if not capture.isOpened():
        raise ValueError(f"{video_path}: cannot decode video")
    try:
        fps = capture.get(cv2.CAP_PROP_FPS) or 0.0
        frame_count = int(capture.get(cv2.CAP_PROP_FRAME_COUNT))
        if fps <= 0 or frame_count <= 0:
            raise ValueError(f"{video_path}: zero-length or headerless video")
        duration = frame_count / fps
        n_samples = max(1, math.ceil(duration * frame_rate))
        wanted = [
            min(frame_count - 1, round(i * fps / frame_rate)) for i in range(n_samples)
        ]
        frames: list[np.ndarray] = []
        index = 0
        ok, frame = capture.read()
        for target in wanted:
            while index < target and ok:
                ok, nxt = capture.read()
                if ok:
                    frame, index = nxt, index + 1
            if frame is None:
                raise ValueError(f"{video_path}: decode failed at frame {target}")
            frames.append(frame.copy())
        return frames
    finally:
        capture.release()


def _preprocess(frames: list[np.ndarray], size: int) -> torch.Tensor:
    batch = []
    for frame in frames:
        rgb = cv2.cvtColor(frame, cv2.COLOR_BGR2RGB)
        rgb = cv2.resize(rgb, (size, size), interpolation=cv2.INTER_AREA)
        arr = (rgb.astype(np.float32) / 255.0 - _MEAN) / _STD
        batch.append(arr.transpose(2, 0, 1))
    return torch.from_numpy(np.stack(batch))


def region_descriptors(frames: list[np.ndarray], config: ExtractorConfig) -> np.ndarray:
    """(n_frames, 9, 3840) region descriptors from the stage activations."""
    model = _backbone(config)
    with torch.no_grad():
        stages = model(_preprocess(frames, config.input_size))
        per_stage = []
        for activation in stages:
            pooled = torch.nn.functional.adaptive_max_pool2d(activation, (GRID, GRID))
            # (n, c, 3, 3) -> (n, 9, c), row-major over the spatial grid
            per_stage.append(pooled.flatten(2).transpose(1, 2))
        regions = torch.cat(per_stage, dim=2).numpy().astype(np.float32)
    if config.normalization == "l2":
        norms = np.linalg.norm(regions, axis=2, keepdims=True)
        regions = regions / np.maximum(norms, 1e-12)
    return regions


def extract(video_path, out_path, config: ExtractorConfig | None = None) -> np.ndarray:
    """Extract a video into an RMF1 file plus a key=value metadata sidecar.

    Returns the (frames, 9, 3840) tensor that was written. Deterministic:
    the same clip and config produce identical bytes.
    """
    config = config or ExtractorConfig()
    frames = sample_frames(video_path, config.frame_rate)
    regions = region_descriptors(frames, config)
    write_rmf1(regions, out_path)
    meta = {
        "source": str(video_path),
        "backbone": config.backbone,
        "weights": config.weights_path or "none",
        "normalization": config.normalization,
        "frame_rate": f"{config.frame_rate:g}",
        "frames": str(regions.shape[0]),
        "regions": str(regions.shape[1]),
        "channels": str(regions.shape[2]),
    }
    sidecar = Path(str(out_path) + ".meta")
    sidecar.write_text("".join(f"{k}={v}\n" for k, v in meta.items()), encoding="utf-8")
    return regions
