"""Triplet-margin training: loss, exact gradients, Adam, and hard mining.

A training step embeds an anchor, a positive (same group), and a negative
(different group) on one autodiff tape, takes the hinge on their cosine
gaps, and backpropagates through every stage of the encoder. Mining
re-embeds the corpus under the current parameters and keeps the hardest
negative per anchor-positive pair. All math is float64.
"""

from __future__ import annotations

import csv
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import BadMagicError, ChecksumError, TruncatedFileError
from .features import CorpusManifest, RegionFeatureTensor
from .model import (
    ForwardTrace,
    ModelConfig,
    ModelParams,
    _pack_array,
    _Reader,
    embed_video,
    forward_trace,
    init_params,
    save_params,
)

# Gradients per parameter, keyed like ModelParams.arrays.
GradientSet = dict[str, np.ndarray]

OPT_MAGIC = b"RGO1"

ZERO_NORM_EPS = 1e-12


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine of the angle between u and v; 0 if either is (near) zero.

    Total function: the zero-vector fallback keeps losses and gradients
    bounded near initialization.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu < ZERO_NORM_EPS or nv < ZERO_NORM_EPS:
        return 0.0
    # clip rounding spill so the result honors the [-1, 1] contract
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def triplet_loss(v: np.ndarray, v_pos: np.ndarray, v_neg: np.ndarray, margin: float) -> float:
    """Hinge on cosine gaps: max(0, c(v, v_neg) - c(v, v_pos) + margin)."""
    return max(0.0, cosine_similarity(v, v_neg) - cosine_similarity(v, v_pos) + margin)


def _cosine_var(tape, u: ad.Var, v: ad.Var) -> ad.Var:
    nu = ad.sqrt(tape, ad.dot(tape, u, u))
    nv = ad.sqrt(tape, ad.dot(tape, v, v))
    if nu.value < ZERO_NORM_EPS or nv.value < ZERO_NORM_EPS:
        return ad.constant(0.0)
    return ad.div(tape, ad.dot(tape, u, v), ad.mul(tape, nu, nv))


def _loss_var(tape, emb_a: ad.Var, emb_p: ad.Var, emb_n: ad.Var, margin: float) -> ad.Var:
    gap = ad.sub(tape, _cosine_var(tape, emb_a, emb_n), _cosine_var(tape, emb_a, emb_p))
    return ad.relu(tape, ad.add_const(tape, gap, margin))


def backward(
    trace_a: ForwardTrace,
    trace_p: ForwardTrace,
    trace_n: ForwardTrace,
    margin: float,
) -> GradientSet:
    """Exact reverse-mode gradients of the triplet loss w.r.t. every parameter.

    The three traces must come from the same tape and params (see
    `model.forward_trace`). A hinge-inactive triplet returns exact zeros.
    """
    traces = (trace_a, trace_p, trace_n)
    if any(t._tape is None for t in traces):
        raise ValueError("traces were not recorded on a tape")
    if len({id(t._tape) for t in traces}) != 1 or len({id(t._params) for t in traces}) != 1:
        raise ValueError("traces come from different tapes or params")

    params: ModelParams = trace_a._params
    tape = trace_a._tape
    loss = _loss_var(
        tape, trace_a._embedding_var, trace_p._embedding_var, trace_n._embedding_var, margin
    )
    names = params.names()
    if loss.value == 0.0:
        return {name: np.zeros_like(params[name]) for name in names}
    pv = trace_a._param_vars
    grads = tape.gradients(loss, [pv[name] for name in names])
    return dict(zip(names, grads))


@dataclass
class TrainConfig:
    """Optimization hyperparameters.

    Defaults: margin 0.2, fixed learning rate 3e-7, 120 epochs, two pools
    of 1000 triplets per epoch (2000 iterations), batch size one, clips
    capped at 64 frames.
    """

    margin: float = 0.2
    learning_rate: float = 3e-7
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 120
    triplets_per_pool: int = 1000
    pools_per_epoch: int = 2
    max_clip_len: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1/beta2 must be in [0, 1)")
        if self.epochs < 0 or self.triplets_per_pool < 1 or self.pools_per_epoch < 1:
            raise ValueError("bad epoch/pool counts")
        if self.max_clip_len < 1:
            raise ValueError("max_clip_len must be >= 1")


class AdamState:
    """First/second moment estimates plus the step counter."""

    def __init__(self, step: int, m: dict[str, np.ndarray], v: dict[str, np.ndarray]):
        self.step = step
        self.m = m
        self.v = v

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        return cls(
            0,
            {k: np.zeros_like(a) for k, a in params.arrays.items()},
            {k: np.zeros_like(a) for k, a in params.arrays.items()},
        )


def adam_step(
    params: ModelParams, grads: GradientSet, state: AdamState, config: TrainConfig
) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update. Mutates params and state in place."""
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    corr1 = 1.0 - b1**state.step
    corr2 = 1.0 - b2**state.step
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params.arrays[name] -= config.learning_rate * (m / corr1) / (
            np.sqrt(v / corr2) + config.eps
        )
    return params, state


@dataclass(frozen=True)
class Triplet:
    """Anchor/positive/negative video ids with 1-based inclusive clip windows."""

    anchor_id: str
    positive_id: str
    negative_id: str
    anchor_window: tuple[int, int]
    positive_window: tuple[int, int]
    negative_window: tuple[int, int]

    def __post_init__(self):
        for start, end in (self.anchor_window, self.positive_window, self.negative_window):
            if not (1 <= start <= end):
                raise ValueError(f"bad clip window ({start}, {end})")


def _clip_window(rng, n_frames: int, max_len: int) -> tuple[int, int]:
    if n_frames <= max_len:
        return (1, n_frames)
    start = int(rng.integers(1, n_frames - max_len + 2))
    return (start, start + max_len - 1)


def mine_triplets(
    manifest: CorpusManifest,
    params: ModelParams,
    pool_size: int,
    seed: int = 0,
    max_clip_len: int = 64,
    tensors: dict[str, RegionFeatureTensor] | None = None,
) -> list[Triplet]:
    """Build a pool of hard triplets under the current parameters.

    Every ordered same-group (anchor, positive) pair is a candidate; the
    pool keeps min(pool_size, #pairs) of them without duplication, each
    paired with its hardest negative: the foreign-group video whose current
    embedding has the highest cosine to the anchor (ties to the smallest
    id). Clips longer than max_clip_len are cropped to a random window.
    Deterministic in (manifest, params, seed).
    """
    groups = manifest.group_ids
    if len(groups) < 2:
        raise ValueError("mining needs at least 2 groups")
    if tensors is None:
        tensors = {vid: manifest.load(vid) for vid in manifest.video_ids}

    embeddings = {vid: embed_video(params, tensors[vid]) for vid in sorted(tensors)}

    pairs = []
    for group in groups:
        members = sorted(manifest.members(group))
        pairs.extend((a, p) for a in members for p in members if a != p)

    rng = np.random.default_rng(seed)
    if len(pairs) > pool_size:
        keep = rng.choice(len(pairs), size=pool_size, replace=False)
        pairs = [pairs[i] for i in sorted(keep)]

    by_group: dict[str, list[str]] = {g: sorted(manifest.members(g)) for g in groups}
    triplets = []
    for anchor, positive in pairs:
        anchor_group = manifest.group_of(anchor)
        candidates = [vid for g, vids in by_group.items() if g != anchor_group for vid in vids]
        sims = np.array([cosine_similarity(embeddings[anchor], embeddings[c]) for c in candidates])
        negative = candidates[int(np.argmax(sims))]
        triplets.append(
            Triplet(
                anchor,
                positive,
                negative,
                _clip_window(rng, tensors[anchor].n_frames, max_clip_len),
                _clip_window(rng, tensors[positive].n_frames, max_clip_len),
                _clip_window(rng, tensors[negative].n_frames, max_clip_len),
            )
        )
    return triplets


def save_opt_state(state: AdamState, path) -> None:
    """Optimizer-state sidecar for checkpoints; CRC-terminated like params."""
    blob = OPT_MAGIC + struct.pack("<Q", state.step)
    names = sorted(state.m)
    blob += struct.pack("<I", len(names))
    for name in names:
        blob += _pack_array("m:" + name, state.m[name])
        blob += _pack_array("v:" + name, state.v[name])
    blob += struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF)
    Path(path).write_bytes(blob)


def load_opt_state(path) -> AdamState:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4 or raw[:4] != OPT_MAGIC:
        raise BadMagicError(f"{path}: not an optimizer state file")
    stored = struct.unpack_from("<I", raw, len(raw) - 4)[0]
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != stored:
        raise ChecksumError(f"{path}: CRC mismatch")
    r = _Reader(raw[:-4], path)
    r.take(4)
    (step,) = r.unpack("<Q")
    (n_names,) = r.unpack("<I")
    m: dict[str, np.ndarray] = {}
    v: dict[str, np.ndarray] = {}
    for _ in range(2 * n_names):
        (name_len,) = r.unpack("<H")
        tag = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).copy()
        kind, _, name = tag.partition(":")
        (m if kind == "m" else v)[name] = arr
    if r.off != len(r.raw):
        raise TruncatedFileError(f"{path}: {len(r.raw) - r.off} unread bytes")
    return AdamState(step, m, v)


@dataclass(frozen=True)
class LossRecord:
    epoch: int
    iteration: int
    loss: float


def write_loss_history(history: list[LossRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "iteration", "loss"])
        for rec in history:
            writer.writerow([rec.epoch, rec.iteration, f"{rec.loss:.17g}"])


def epoch_mean_losses(history: list[LossRecord]) -> list[float]:
    """Mean per-iteration loss of each epoch, in epoch order."""
    sums: dict[int, list[float]] = {}
    for rec in history:
        sums.setdefault(rec.epoch, []).append(rec.loss)
    return [float(np.mean(sums[e])) for e in sorted(sums)]


def train(
    manifest: CorpusManifest,
    config: TrainConfig,
    model_config: ModelConfig | None = None,
    checkpoint_dir=None,
    progress=None,
) -> tuple[ModelParams, list[LossRecord]]:
    """Train the encoder on a labeled corpus.

    Per epoch, `pools_per_epoch` pools are mined under the current
    parameters and each pool's triplets are applied one at a time
    (batch size one): embed the three clips on a tape, take the triplet
    hinge, backpropagate, Adam step. The whole corpus is held in memory.

    Returns the trained params and the per-iteration loss history. When
    checkpoint_dir is given, params and optimizer state are written after
    every epoch. `progress`, if given, is called with (epoch, mean_loss).
    """
    tensors = {vid: manifest.load(vid) for vid in manifest.video_ids}
    if model_config is None:
        any_tensor = next(iter(tensors.values()))
        model_config = ModelConfig(in_dim=any_tensor.n_channels)

    params = init_params(model_config, config.seed).copy()
    state = AdamState.zeros(params)
    history: list[LossRecord] = []

    for epoch in range(1, config.epochs + 1):
        iteration = 0
        for pool_idx in range(config.pools_per_epoch):
            pool_seed = np.random.default_rng(
                [config.seed, epoch, pool_idx]
            ).integers(0, 2**63)
            pool = mine_triplets(
                manifest,
                params,
                config.triplets_per_pool,
                seed=int(pool_seed),
                max_clip_len=config.max_clip_len,
                tensors=tensors,
            )
            for triplet in pool:
                iteration += 1
                tape = ad.Tape()
                clips = [
                    tensors[vid].frame_slice(*win)
                    for vid, win in (
                        (triplet.anchor_id, triplet.anchor_window),
                        (triplet.positive_id, triplet.positive_window),
                        (triplet.negative_id, triplet.negative_window),
                    )
                ]
                traces = [forward_trace(params, clip, tape) for clip in clips]
                loss = triplet_loss(
                    traces[0].embedding,
                    traces[1].embedding,
                    traces[2].embedding,
                    config.margin,
                )
                grads = backward(*traces, config.margin)
                adam_step(params, grads, state, config)
                history.append(LossRecord(epoch, iteration, loss))
        epoch_losses = [r.loss for r in history if r.epoch == epoch]
        if progress is not None:
            progress(epoch, float(np.mean(epoch_losses)))
        if checkpoint_dir is not None:
            checkpoint_dir = Path(checkpoint_dir)
            checkpoint_dir.mkdir(parents=True, exist_ok=True)
            save_params(params, checkpoint_dir / f"epoch_{epoch:04d}.params")
            save_opt_state(state, checkpoint_dir / f"epoch_{epoch:04d}.params.opt")

    return params, history
