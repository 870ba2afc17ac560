"""Region feature tensors, their binary file format, and synthetic corpora.

A video reaches the engine as a T x R x C array: T frames sampled at one
second intervals, R region descriptors per frame, C channels per descriptor.
Tensors are stored in the RMF1 format defined in `write_features`, and
corpora are described by a tab-separated manifest mapping video ids to
feature files and group labels (same group = related videos).
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ChecksumError,
    DimensionError,
    PayloadError,
    TruncatedFileError,
)

RMF1_MAGIC = b"RMF1\x00\x00\x00\x00"

# Reject headers whose payload would exceed this many values. Guards against
# absurd allocations from corrupt dimension fields.
MAX_TENSOR_VALUES = 1 << 31


@dataclass(frozen=True)
class RegionFeatureTensor:
    """Per-video region descriptors, shape (n_frames, n_regions, n_channels).

    Frame indices are 1-based throughout the public API to match the shot
    manifest format. Data is float32 (the on-disk width); the model upcasts
    to float64 internally.
    """

    video_id: str
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ValueError(f"feature data must be 3-d, got shape {data.shape}")
        if min(data.shape) < 1:
            raise ValueError(f"all dimensions must be >= 1, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("feature data contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def n_regions(self) -> int:
        return self.data.shape[1]

    @property
    def n_channels(self) -> int:
        return self.data.shape[2]

    def frame_slice(self, start: int, stop: int, video_id: str | None = None) -> "RegionFeatureTensor":
        """Contiguous frame range [start, stop], 1-based inclusive."""
        if not (1 <= start <= stop <= self.n_frames):
            raise ValueError(f"invalid frame range [{start}, {stop}] for T={self.n_frames}")
        return RegionFeatureTensor(video_id or self.video_id, self.data[start - 1 : stop])

    def __eq__(self, other) -> bool:
        if not isinstance(other, RegionFeatureTensor):
            return NotImplemented
        return (
            self.video_id == other.video_id
            and self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
        )


def write_features(tensor: RegionFeatureTensor, path) -> None:
    """Write a tensor in the RMF1 format.

    Layout, little-endian: 8-byte magic "RMF1\\0\\0\\0\\0"; three uint32
    dimensions (frames, regions, channels); frames*regions*channels float32
    values in (frame, region, channel) row-major order; CRC32 of everything
    preceding as the final 4 bytes. `read_features` reproduces the tensor
    bit-exactly.

    The tensor is validated before any bytes are written, and the file
    appears atomically (write to a temp path, then rename), so concurrent
    writers to distinct paths never interleave.
    """
    if not isinstance(tensor, RegionFeatureTensor):
        raise TypeError("expected a RegionFeatureTensor")
    data = np.ascontiguousarray(tensor.data, dtype="<f4")
    if not np.all(np.isfinite(data)):
        raise ValueError("feature data contains non-finite values")

    header = RMF1_MAGIC + struct.pack("<III", *data.shape)
    payload = data.tobytes()
    crc = zlib.crc32(header + payload) & 0xFFFFFFFF

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(payload)
        fh.write(struct.pack("<I", crc))
    os.replace(tmp, path)


def read_features(path, video_id: str | None = None) -> RegionFeatureTensor:
    """Read an RMF1 file, verifying structure and checksum.

    Raises a distinct error per failure mode: `BadMagicError`,
    `DimensionError` (zero or oversized dims), `TruncatedFileError`,
    `ChecksumError`, `PayloadError` (non-finite values).
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(RMF1_MAGIC):
        raise TruncatedFileError(f"{path}: file shorter than magic")
    if raw[: len(RMF1_MAGIC)] != RMF1_MAGIC:
        raise BadMagicError(f"{path}: not an RMF1 file")
    if len(raw) < len(RMF1_MAGIC) + 12:
        raise TruncatedFileError(f"{path}: header incomplete")
    t, r, c = struct.unpack_from("<III", raw, len(RMF1_MAGIC))
    if min(t, r, c) < 1:
        raise DimensionError(f"{path}: dimensions must be >= 1, got {(t, r, c)}")
    n_values = t * r * c
    if n_values > MAX_TENSOR_VALUES:
        raise DimensionError(f"{path}: payload of {n_values} values exceeds guard")
    expected = len(RMF1_MAGIC) + 12 + 4 * n_values + 4
    if len(raw) < expected:
        raise TruncatedFileError(f"{path}: expected {expected} bytes, found {len(raw)}")
    if len(raw) > expected:
        raise TruncatedFileError(f"{path}: {len(raw) - expected} trailing bytes")

    stored_crc = struct.unpack_from("<I", raw, expected - 4)[0]
    actual_crc = zlib.crc32(raw[: expected - 4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise ChecksumError(f"{path}: CRC mismatch ({stored_crc:#x} != {actual_crc:#x})")

    data = np.frombuffer(raw, dtype="<f4", count=n_values, offset=len(RMF1_MAGIC) + 12)
    data = data.reshape(t, r, c).copy()
    if not np.all(np.isfinite(data)):
        raise PayloadError(f"{path}: payload contains non-finite values")
    return RegionFeatureTensor(video_id or path.stem, data)


def flatten_frame(tensor: RegionFeatureTensor, t: int) -> np.ndarray:
    """Concatenate the region descriptors of frame t (1-based) into one vector.

    Region-major, channel-minor; output length n_regions * n_channels.
    """
    if not (1 <= t <= tensor.n_frames):
        raise ValueError(f"frame index {t} out of range [1, {tensor.n_frames}]")
    return tensor.data[t - 1].reshape(-1).astype(np.float64)


@dataclass
class CorpusManifest:
    """Labeled corpus: (video_id, feature path, group_id) per video.

    Videos sharing a group_id are treated as related (retrieval positives
    and training anchor/positive pairs); all other pairs are negatives.
    """

    entries: list[tuple[str, Path, str]] = field(default_factory=list)

    def __post_init__(self):
        ids = [vid for vid, _, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate video ids in manifest")

    @property
    def video_ids(self) -> list[str]:
        return [vid for vid, _, _ in self.entries]

    @property
    def group_ids(self) -> list[str]:
        return sorted({gid for _, _, gid in self.entries})

    def group_of(self, video_id: str) -> str:
        for vid, _, gid in self.entries:
            if vid == video_id:
                return gid
        raise KeyError(video_id)

    def members(self, group_id: str) -> list[str]:
        return [vid for vid, _, gid in self.entries if gid == group_id]

    def load(self, video_id: str) -> RegionFeatureTensor:
        for vid, path, _ in self.entries:
            if vid == video_id:
                return read_features(path, video_id=vid)
        raise KeyError(video_id)

    def load_all(self) -> list[RegionFeatureTensor]:
        return [read_features(path, video_id=vid) for vid, path, _ in self.entries]

    def save(self, path) -> None:
        """Write the manifest; paths inside its directory are stored relative."""
        path = Path(path)
        lines = []
        for vid, fp, gid in self.entries:
            fp = Path(fp)
            try:
                fp = fp.resolve().relative_to(path.parent.resolve())
            except ValueError:
                pass
            lines.append(f"{vid}\t{fp}\t{gid}\n")
        path.write_text("".join(lines), encoding="utf-8")

    @classmethod
    def read(cls, path) -> "CorpusManifest":
        """Parse a manifest file; relative feature paths resolve against it."""
        path = Path(path)
        entries = []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
            vid, fp, gid = parts
            fp = Path(fp)
            if not fp.is_absolute():
                fp = path.parent / fp
            if not fp.exists():
                raise FileNotFoundError(f"{path}:{lineno}: feature file {fp} not found")
            entries.append((vid, fp, gid))
        return cls(entries)


@dataclass
class InMemoryCorpus:
    """Manifest-shaped corpus held in memory (estimator input, tests)."""

    tensors: dict[str, RegionFeatureTensor]
    groups: dict[str, str]

    def __post_init__(self):
        if set(self.tensors) != set(self.groups):
            raise ValueError("tensors and groups must cover the same video ids")

    @property
    def video_ids(self) -> list[str]:
        return list(self.tensors)

    @property
    def group_ids(self) -> list[str]:
        return sorted(set(self.groups.values()))

    def group_of(self, video_id: str) -> str:
        return self.groups[video_id]

    def members(self, group_id: str) -> list[str]:
        return [vid for vid, gid in self.groups.items() if gid == group_id]

    def load(self, video_id: str) -> RegionFeatureTensor:
        return self.tensors[video_id]

    def load_all(self) -> list[RegionFeatureTensor]:
        return list(self.tensors.values())


def synth_corpus(
    out_dir,
    n_groups: int,
    videos_per_group: int,
    frames_range: tuple[int, int] = (20, 60),
    n_regions: int = 4,
    n_channels: int = 32,
    noise_scale: float = 0.1,
    seed: int = 0,
    subsample_prob: float = 0.0,
) -> CorpusManifest:
    """Generate a labeled corpus of partial-copy groups.

    Each group has a prototype region sequence of length frames_range[1].
    A video is a random temporal crop of its group prototype (length drawn
    from frames_range), plus elementwise Gaussian noise of the given scale
    and, with probability subsample_prob, an order-preserving frame
    subsample. Same-group videos therefore behave like partial copies of
    one another; cross-group videos are unrelated. Deterministic in seed.

    Writes one RMF1 file per video plus ``manifest.tsv`` into out_dir and
    returns the manifest.
    """
    if n_groups < 1 or videos_per_group < 1:
        raise ValueError("counts must be >= 1")
    t_min, t_max = frames_range
    if not (1 <= t_min <= t_max):
        raise ValueError(f"unsatisfiable frames_range {frames_range}")
    if n_regions < 1 or n_channels < 1:
        raise ValueError("n_regions and n_channels must be >= 1")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    entries = []
    for g in range(n_groups):
        proto = rng.standard_normal((t_max, n_regions, n_channels))
        for v in range(videos_per_group):
            length = int(rng.integers(t_min, t_max + 1))
            start = int(rng.integers(0, t_max - length + 1))
            frames = proto[start : start + length]
            if subsample_prob > 0 and rng.random() < subsample_prob and length > t_min:
                keep = np.sort(rng.choice(length, size=t_min, replace=False))
                frames = frames[keep]
            if noise_scale > 0:
                frames = frames + rng.normal(0.0, noise_scale, size=frames.shape)
            vid = f"g{g:03d}_v{v:02d}"
            tensor = RegionFeatureTensor(vid, frames.astype(np.float32))
            fpath = out_dir / f"{vid}.rmf"
            write_features(tensor, fpath)
            entries.append((vid, fpath, f"g{g:03d}"))

    manifest = CorpusManifest(entries)
    manifest.save(out_dir / "manifest.tsv")
    return manifest


def _scene(rng, base: np.ndarray, length: int, jitter: float) -> np.ndarray:
    """One realization of a scene: its base frame plus per-frame jitter."""
    noise = rng.normal(0.0, jitter, size=(length,) + base.shape)
    return base[None, :, :] + noise


def synth_scene_corpus(
    out_dir,
    n_groups: int,
    videos_per_group: int,
    scene_len: int = 12,
    n_regions: int = 4,
    n_channels: int = 32,
    jitter: float = 0.1,
    n_distractor_scenes: int = 6,
    seed: int = 0,
) -> tuple[CorpusManifest, CorpusManifest, "Path"]:
    """Generate a shot-structured corpus where positives share one scene.

    Database videos concatenate three scenes: one scene unique to the
    video's group (placed at a random position) and two drawn from a shared
    distractor pool, so whole-video statistics look alike across groups
    while only same-group videos contain the query content. Queries are
    single-scene clips of each group's scene. Scene frames are a fixed base
    frame plus small jitter, so consecutive-frame cosine stays high inside
    a scene and drops at scene joins.

    Writes database and query RMF1 files, ``db_manifest.tsv``,
    ``query_manifest.tsv``, ``qrels.tsv`` (label ``shared`` for same-group
    pairs, ``none`` otherwise), and ``tasks.tsv`` with task ``scene``
    counting ``shared`` as positive. Returns (db_manifest, query_manifest,
    qrels_path).
    """
    if n_groups < 1 or videos_per_group < 1 or scene_len < 1:
        raise ValueError("counts must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    group_bases = rng.standard_normal((n_groups, n_regions, n_channels))
    pool_bases = rng.standard_normal((n_distractor_scenes, n_regions, n_channels))

    db_entries = []
    for g in range(n_groups):
        for v in range(videos_per_group):
            d1, d2 = rng.choice(n_distractor_scenes, size=2, replace=False)
            scenes = [
                _scene(rng, pool_bases[d1], scene_len, jitter),
                _scene(rng, group_bases[g], scene_len, jitter),
                _scene(rng, pool_bases[d2], scene_len, jitter),
            ]
            order = rng.permutation(3)
            frames = np.concatenate([scenes[i] for i in order], axis=0)
            vid = f"g{g:03d}_v{v:02d}"
            fpath = out_dir / f"{vid}.rmf"
            write_features(RegionFeatureTensor(vid, frames.astype(np.float32)), fpath)
            db_entries.append((vid, fpath, f"g{g:03d}"))
    db_manifest = CorpusManifest(db_entries)
    db_manifest.save(out_dir / "db_manifest.tsv")

    query_entries = []
    for g in range(n_groups):
        frames = _scene(rng, group_bases[g], scene_len, jitter)
        qid = f"q{g:03d}"
        fpath = out_dir / f"{qid}.rmf"
        write_features(RegionFeatureTensor(qid, frames.astype(np.float32)), fpath)
        query_entries.append((qid, fpath, f"g{g:03d}"))
    query_manifest = CorpusManifest(query_entries)
    query_manifest.save(out_dir / "query_manifest.tsv")

    qrels_path = out_dir / "qrels.tsv"
    with open(qrels_path, "w", encoding="utf-8") as fh:
        for qid, _, qgroup in query_entries:
            for vid, _, vgroup in db_entries:
                label = "shared" if vgroup == qgroup else "none"
                fh.write(f"{qid}\t{vid}\t{label}\n")
    (out_dir / "tasks.tsv").write_text("scene\tshared\n", encoding="utf-8")

    return db_manifest, query_manifest, qrels_path
