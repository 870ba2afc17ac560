"""Embedding index, cosine ranking, shot-level aggregation, and evaluation.

The index is a flat exact-scan store: ranking a query is one cosine per
database entry, so all pairwise work happens after encoding. Shot-level
search scores a (query shots x database shots) cosine matrix per video
pair and aggregates it with (symmetric) chamfer similarity. Evaluation is
standard mean average precision over labeled relevance judgments.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
import struct
import zlib

import numpy as np

from . import counters
from .errors import (
    BadMagicError,
    ChecksumError,
    DimensionError,
    TruncatedFileError,
)
from .shots import ShotSet
from .training import cosine_similarity

EMB_MAGIC = b"EMB1"


@dataclass
class RankedList:
    """Candidates for one query, best first; ties broken by ascending id."""

    query_id: str
    items: list[tuple[str, float]]

    def __post_init__(self):
        for (ida, sa), (idb, sb) in zip(self.items, self.items[1:]):
            if sb > sa or (sb == sa and idb <= ida):
                raise ValueError(f"ranking order violated at {ida!r} -> {idb!r}")

    @property
    def video_ids(self) -> list[str]:
        return [vid for vid, _ in self.items]


def _sorted_items(scored: list[tuple[str, float]]) -> list[tuple[str, float]]:
    return sorted(scored, key=lambda item: (-item[1], item[0]))


class EmbeddingIndex:
    """Flat store of embeddings, video- or shot-granular."""

    def __init__(self, mode: str):
        if mode not in ("video", "shot"):
            raise ValueError("mode must be 'video' or 'shot'")
        self.mode = mode
        self._keys: list[tuple] = []
        self._key_set: set[tuple] = set()
        self._video_order: dict[str, None] = {}
        self._vectors: list[np.ndarray] = []
        self._dim: int | None = None

    def _append(self, key: tuple, vec: np.ndarray) -> None:
        self._keys.append(key)
        self._key_set.add(key)
        self._video_order.setdefault(key[0])
        self._vectors.append(vec)

    def __len__(self) -> int:
        return len(self._keys)

    @property
    def dim(self) -> int:
        if self._dim is None:
            raise ValueError("index is empty")
        return self._dim

    def _check_vector(self, vec) -> np.ndarray:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.ndim != 1:
            raise DimensionError(f"embedding must be 1-d, got shape {vec.shape}")
        if self._dim is None:
            self._dim = vec.shape[0]
        elif vec.shape[0] != self._dim:
            raise DimensionError(f"embedding dim {vec.shape[0]} != index dim {self._dim}")
        return vec

    def add_video(self, video_id: str, embedding) -> None:
        if self.mode != "video":
            raise ValueError("index is shot-granular")
        key = (video_id,)
        if key in self._key_set:
            raise ValueError(f"duplicate video id {video_id!r}")
        self._append(key, self._check_vector(embedding))

    def add_shots(self, shot_set: ShotSet) -> None:
        if self.mode != "shot":
            raise ValueError("index is video-granular")
        if shot_set.video_id in self._video_order:
            raise ValueError(f"duplicate video id {shot_set.video_id!r}")
        for idx, emb in enumerate(shot_set.embeddings):
            self._append((shot_set.video_id, idx), self._check_vector(emb))

    @property
    def video_ids(self) -> list[str]:
        return list(self._video_order)

    def entries(self) -> list[tuple]:
        """(video_id, vector) or (video_id, shot_idx, vector) per record."""
        return [key + (vec,) for key, vec in zip(self._keys, self._vectors)]

    def video_matrix(self) -> tuple[list[str], np.ndarray]:
        if self.mode != "video":
            raise ValueError("video_matrix on a shot index")
        return [k[0] for k in self._keys], np.stack(self._vectors)

    def shots_of(self, video_id: str) -> np.ndarray:
        if self.mode != "shot":
            raise ValueError("shots_of on a video index")
        rows = [vec for key, vec in zip(self._keys, self._vectors) if key[0] == video_id]
        if not rows:
            raise KeyError(video_id)
        return np.stack(rows)

    def save(self, path) -> None:
        """EMB1 binary: magic, mode byte, count, dim, records, trailing CRC32.

        Record: uint16 id length + UTF-8 id, uint32 shot index (shot mode
        only), dim float64 values. Little-endian; round-trips bit-exactly.
        """
        if self._dim is None:
            raise ValueError("cannot save an empty index")
        blob = EMB_MAGIC + struct.pack(
            "<BII", 0 if self.mode == "video" else 1, len(self._keys), self._dim
        )
        for key, vec in zip(self._keys, self._vectors):
            vid = key[0].encode("utf-8")
            blob += struct.pack("<H", len(vid)) + vid
            if self.mode == "shot":
                blob += struct.pack("<I", key[1])
            blob += np.ascontiguousarray(vec, dtype="<f8").tobytes()
        blob += struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF)
        Path(path).write_bytes(blob)

    @classmethod
    def load(cls, path) -> "EmbeddingIndex":
        path = Path(path)
        raw = path.read_bytes()
        if len(raw) < 4 or raw[:4] != EMB_MAGIC:
            raise BadMagicError(f"{path}: not an embedding file")
        if len(raw) < 17:
            raise TruncatedFileError(f"{path}: header incomplete")
        stored = struct.unpack_from("<I", raw, len(raw) - 4)[0]
        if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != stored:
            raise ChecksumError(f"{path}: CRC mismatch")
        mode_byte, count, dim = struct.unpack_from("<BII", raw, 4)
        if mode_byte not in (0, 1):
            raise DimensionError(f"{path}: bad mode byte {mode_byte}")
        index = cls("video" if mode_byte == 0 else "shot")
        off = 13
        body_end = len(raw) - 4
        for _ in range(count):
            if off + 2 > body_end:
                raise TruncatedFileError(f"{path}: record header past end")
            (id_len,) = struct.unpack_from("<H", raw, off)
            off += 2
            vid = raw[off : off + id_len].decode("utf-8")
            off += id_len
            shot_idx = None
            if index.mode == "shot":
                (shot_idx,) = struct.unpack_from("<I", raw, off)
                off += 4
            if off + 8 * dim > body_end:
                raise TruncatedFileError(f"{path}: payload past end")
            vec = np.frombuffer(raw, dtype="<f8", count=dim, offset=off).copy()
            off += 8 * dim
            key = (vid,) if index.mode == "video" else (vid, shot_idx)
            if key in index._key_set:
                raise DimensionError(f"{path}: duplicate record key {key}")
            index._append(key, index._check_vector(vec))
        if off != body_end:
            raise TruncatedFileError(f"{path}: {body_end - off} unread bytes")
        return index


def rank(query_embedding: np.ndarray, index: EmbeddingIndex, query_id: str = "query") -> RankedList:
    """Cosine similarity against every video entry, best first."""
    if len(index) == 0:
        raise ValueError("empty index")
    ids, matrix = index.video_matrix()
    query = np.asarray(query_embedding, dtype=np.float64)
    scored = [(vid, cosine_similarity(query, row)) for vid, row in zip(ids, matrix)]
    counters.similarity_evals.add(len(ids))
    return RankedList(query_id, _sorted_items(scored))


def _shot_rows(obj) -> np.ndarray:
    if isinstance(obj, ShotSet):
        return np.stack([np.asarray(e, dtype=np.float64) for e in obj.embeddings])
    arr = np.asarray(obj, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("expected a ShotSet or an (n_shots, dim) array")
    return arr


def shot_similarity_matrix(query_shots, db_shots) -> np.ndarray:
    """Pairwise shot cosine matrix S with S[i, j] = cos(query i, database j)."""
    q = _shot_rows(query_shots)
    d = _shot_rows(db_shots)
    if q.shape[0] == 0 or d.shape[0] == 0:
        raise ValueError("shot sets must be non-empty")
    return np.array([[cosine_similarity(qi, dj) for dj in d] for qi in q])


def chamfer(similarity: np.ndarray) -> float:
    """Mean over query shots of the best-matching database shot."""
    s = np.asarray(similarity, dtype=np.float64)
    if s.ndim != 2 or s.size == 0:
        raise ValueError("similarity matrix must be non-empty and 2-d")
    return float(s.max(axis=1).mean())


def symmetric_chamfer(similarity: np.ndarray) -> float:
    """Average of the chamfer similarity of S and of its transpose."""
    s = np.asarray(similarity, dtype=np.float64)
    return (chamfer(s) + chamfer(s.T)) / 2.0


def shot_rank(
    query_shots,
    index: EmbeddingIndex,
    aggregation: str = "cs",
    query_id: str | None = None,
) -> RankedList:
    """Rank database videos by aggregated shot similarity (one score per video).

    `query_shots` is a ShotSet or an (n_shots, dim) array; pass query_id
    explicitly for the latter.
    """
    if aggregation not in ("cs", "scs"):
        raise ValueError("aggregation must be 'cs' or 'scs'")
    if index.mode != "shot":
        raise ValueError("shot_rank needs a shot-granular index")
    if len(index) == 0:
        raise ValueError("empty index")
    if query_id is None:
        if not isinstance(query_shots, ShotSet):
            raise ValueError("query_id required when query_shots is a bare array")
        query_id = query_shots.video_id
    agg = chamfer if aggregation == "cs" else symmetric_chamfer
    scored = []
    for vid in index.video_ids:
        s = shot_similarity_matrix(query_shots, index.shots_of(vid))
        scored.append((vid, agg(s)))
    counters.similarity_evals.add(len(scored))
    return RankedList(query_id, _sorted_items(scored))


def average_query_expansion(
    query_embedding: np.ndarray, index: EmbeddingIndex, k: int = 5
) -> np.ndarray:
    """Mean of the query and its top-k retrieved embeddings (single pass).

    The caller re-ranks with the expanded vector. k is clamped to the
    index size with a warning.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(index) == 0:
        raise ValueError("empty index")
    if k > len(index):
        warnings.warn(f"query expansion k={k} clamped to index size {len(index)}")
        k = len(index)
    ranked = rank(query_embedding, index, query_id="qe")
    ids, matrix = index.video_matrix()
    row = {vid: vec for vid, vec in zip(ids, matrix)}
    top = [row[vid] for vid, _ in ranked.items[:k]]
    return np.mean([np.asarray(query_embedding, dtype=np.float64)] + top, axis=0)


@dataclass
class Qrels:
    """Relevance labels per (query, video), with an optional query grouping.

    `labels[q][v]` is the set of labels assigned to the pair; a task names
    the subset of labels that count as positive. The universe is every
    video id mentioned; ranked ids outside it are rejected to catch
    granularity or corpus mixups.
    """

    labels: dict[str, dict[str, set[str]]]
    query_groups: dict[str, str] = field(default_factory=dict)

    @property
    def universe(self) -> set[str]:
        out = set()
        for per_query in self.labels.values():
            out.update(per_query)
        return out

    def positives(self, query_id: str, positive_labels: set[str]) -> set[str]:
        per_query = self.labels.get(query_id)
        if per_query is None:
            raise KeyError(f"query {query_id!r} not in qrels")
        return {vid for vid, labs in per_query.items() if labs & positive_labels}

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for qid in sorted(self.labels):
                group = self.query_groups.get(qid)
                for vid in sorted(self.labels[qid]):
                    for label in sorted(self.labels[qid][vid]):
                        if group is None:
                            fh.write(f"{qid}\t{vid}\t{label}\n")
                        else:
                            fh.write(f"{qid}\t{vid}\t{label}\t{group}\n")

    @classmethod
    def read(cls, path) -> "Qrels":
        labels: dict[str, dict[str, set[str]]] = {}
        groups: dict[str, str] = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) not in (3, 4):
                raise ValueError(f"{path}:{lineno}: expected 3 or 4 fields")
            qid, vid, label = parts[:3]
            labels.setdefault(qid, {}).setdefault(vid, set()).add(label)
            if len(parts) == 4:
                prev = groups.get(qid)
                if prev is not None and prev != parts[3]:
                    raise ValueError(f"{path}:{lineno}: conflicting group for {qid!r}")
                groups[qid] = parts[3]
        return cls(labels, groups)


def read_tasks(path) -> dict[str, set[str]]:
    """Task file: task_name <tab> comma-separated positive labels."""
    tasks: dict[str, set[str]] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 2 fields")
        tasks[parts[0]] = {lab for lab in parts[1].split(",") if lab}
    return tasks


@dataclass
class MapResult:
    value: float
    per_query: dict[str, float]
    excluded: list[str]
    per_group: dict[str, float] | None


def average_precision(ranking: RankedList, relevant: set[str]) -> float:
    """AP with the full positive count as denominator (TREC style)."""
    if not relevant:
        raise ValueError("average_precision needs at least one positive")
    hits = 0
    total = 0.0
    for position, vid in enumerate(ranking.video_ids, 1):
        if vid in relevant:
            hits += 1
            total += hits / position
    return total / len(relevant)


def mean_average_precision(
    rankings: list[RankedList],
    qrels: Qrels,
    positive_labels: set[str],
) -> MapResult:
    """mAP over queries with at least one positive.

    Queries without positives are excluded and reported. A per-group macro
    average (mean of within-group mAP means) is included when the qrels
    carry query groups. Every ranked id must belong to the qrels universe.
    """
    universe = qrels.universe
    per_query: dict[str, float] = {}
    excluded: list[str] = []
    for ranking in rankings:
        unknown = [vid for vid in ranking.video_ids if vid not in universe]
        if unknown:
            raise ValueError(
                f"query {ranking.query_id!r}: ranked ids not in qrels universe: {unknown[:3]}"
            )
        relevant = qrels.positives(ranking.query_id, positive_labels)
        if not relevant:
            excluded.append(ranking.query_id)
            continue
        per_query[ranking.query_id] = average_precision(ranking, relevant)

    if not per_query:
        raise ValueError("no queries with positives")
    value = float(np.mean(list(per_query.values())))

    per_group = None
    if qrels.query_groups:
        grouped: dict[str, list[float]] = {}
        for qid, ap in per_query.items():
            group = qrels.query_groups.get(qid)
            if group is not None:
                grouped.setdefault(group, []).append(ap)
        if grouped:
            per_group = {g: float(np.mean(aps)) for g, aps in sorted(grouped.items())}
    return MapResult(value, per_query, excluded, per_group)


def write_rankings(rankings: list[RankedList], path) -> None:
    """TSV: query_id, 1-based rank, video_id, score."""
    with open(path, "w", encoding="utf-8") as fh:
        for ranking in rankings:
            for position, (vid, score) in enumerate(ranking.items, 1):
                fh.write(f"{ranking.query_id}\t{position}\t{vid}\t{score:.17g}\n")


def read_rankings(path) -> list[RankedList]:
    by_query: dict[str, list[tuple[int, str, float]]] = {}
    order: list[str] = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 fields")
        qid, pos, vid, score = parts
        if qid not in by_query:
            by_query[qid] = []
            order.append(qid)
        by_query[qid].append((int(pos), vid, float(score)))
    rankings = []
    for qid in order:
        rows = sorted(by_query[qid])
        if [p for p, _, _ in rows] != list(range(1, len(rows) + 1)):
            raise ValueError(f"{path}: ranks for {qid!r} are not 1..n")
        rankings.append(RankedList(qid, [(vid, score) for _, vid, score in rows]))
    return rankings
