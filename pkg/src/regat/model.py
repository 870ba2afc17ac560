"""The video encoder: region graph attention into a fixed-size embedding.

Pipeline per video: reduce descriptor channels, run a stack of graph
attention layers over the region graph, concatenate layer outputs along
channels, pool regions with affinity-derived attention weights, and map the
pooled vector through a two-layer head.

All stages run on the autodiff tape so training gets exact gradients; with
``tape=None`` the same code is plain numpy inference. Layer attention is
computed in frame-banded form (each frame attends to a <= 3-frame window),
so the full node-pair score matrix is never materialized; the pooling
affinities need only row means, which reduce exactly to a product with the
mean key vector.
"""

from __future__ import annotations

import struct
import weakref
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import counters
from .errors import (
    BadMagicError,
    ChecksumError,
    DimensionError,
    TruncatedFileError,
    VersionError,
)
from .features import RegionFeatureTensor
from .graph import DEFAULT_MAX_NODES, RegionGraph, build_region_graph

REGION_AGG_MODES = ("attention", "max", "average")
POOLING_MODES = ("attention", "max", "average")
CONCAT_MODES = ("all", "gat_plus_reduce", "gat_only", "final")

PARAMS_MAGIC = b"RGP1"
PARAMS_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    in_dim: descriptor channels of the input tensors.
    mid_dim: reduced channel width used inside the attention layers.
    n_layers: number of graph attention layers.
    embed_dim: output embedding width.
    tied_attention: reuse the query transform as the key transform.
    region_agg: how a node aggregates its neighborhood (attention/max/average).
    pooling: how regions collapse into one vector (attention/max/average).
    concat_mode: which stages feed the channelwise concatenation.
    """

    in_dim: int
    mid_dim: int = 512
    n_layers: int = 3
    embed_dim: int = 4096
    tied_attention: bool = False
    region_agg: str = "attention"
    pooling: str = "attention"
    concat_mode: str = "all"

    def __post_init__(self):
        if min(self.in_dim, self.mid_dim, self.n_layers, self.embed_dim) < 1:
            raise ValueError("in_dim, mid_dim, n_layers, embed_dim must be >= 1")
        if self.region_agg not in REGION_AGG_MODES:
            raise ValueError(f"region_agg must be one of {REGION_AGG_MODES}")
        if self.pooling not in POOLING_MODES:
            raise ValueError(f"pooling must be one of {POOLING_MODES}")
        if self.concat_mode not in CONCAT_MODES:
            raise ValueError(f"concat_mode must be one of {CONCAT_MODES}")

    @property
    def concat_width(self) -> int:
        """Width of the concatenated per-region representation."""
        if self.concat_mode == "all":
            return self.in_dim + (self.n_layers + 1) * self.mid_dim
        if self.concat_mode == "gat_plus_reduce":
            return (self.n_layers + 1) * self.mid_dim
        if self.concat_mode == "gat_only":
            return self.n_layers * self.mid_dim
        return self.mid_dim


def _param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {
        "reduce_w": (config.in_dim, config.mid_dim),
        "reduce_b": (config.mid_dim,),
    }
    for k in range(config.n_layers):
        for name in ("query", "key", "out"):
            shapes[f"layer{k}_{name}_w"] = (config.mid_dim, config.mid_dim)
            shapes[f"layer{k}_{name}_b"] = (config.mid_dim,)
    shapes["pool_w"] = (config.n_layers,)
    shapes["pool_b"] = ()
    shapes["mlp_w1"] = (config.concat_width, config.embed_dim)
    shapes["mlp_b1"] = (config.embed_dim,)
    shapes["mlp_w2"] = (config.embed_dim, config.embed_dim)
    shapes["mlp_b2"] = (config.embed_dim,)
    return shapes


class ModelParams:
    """All learnable weights, keyed by name, float64 in memory."""

    def __init__(self, config: ModelConfig, arrays: dict[str, np.ndarray]):
        expected = _param_shapes(config)
        if set(arrays) != set(expected):
            missing = set(expected) ^ set(arrays)
            raise ValueError(f"parameter set mismatch: {sorted(missing)}")
        for name, shape in expected.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise DimensionError(
                    f"parameter {name}: shape {arr.shape} != expected {shape}"
                )
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"parameter {name} contains non-finite values")
            arrays[name] = arr
        self.config = config
        self.arrays = arrays

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def equal(self, other: "ModelParams") -> bool:
        return self.config == other.config and all(
            np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays
        )

    def names(self) -> list[str]:
        return sorted(self.arrays)

    def as_vars(self) -> dict[str, ad.Var]:
        """Wrap every parameter as an autodiff leaf."""
        return {name: ad.constant(self.arrays[name]) for name in self.names()}


def glorot_bound(fan_in: int, fan_out: int) -> float:
    """Half-width of the uniform init range for a fan_in x fan_out matrix."""
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Uniform(-s, s) weights with s from each matrix's fan-in/fan-out; zero biases."""
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    for name, shape in _param_shapes(config).items():
        if "_b" in name:
            arrays[name] = np.zeros(shape)
        elif name == "pool_w":
            s = glorot_bound(config.n_layers, 1)
            arrays[name] = rng.uniform(-s, s, size=shape)
        else:
            s = glorot_bound(shape[0], shape[1])
            arrays[name] = rng.uniform(-s, s, size=shape)
    return ModelParams(config, arrays)


@dataclass
class ForwardTrace:
    """Intermediate values of one video forward pass.

    Attention weights are stored in frame-banded form (n_frames, n_regions,
    3*n_regions): for frame t the column blocks are the regions of frames
    t-1, t, t+1, with out-of-range blocks masked to exact zero weight.
    """

    n_frames: int
    n_regions: int
    x_input: np.ndarray
    x_layers: list[np.ndarray]
    attention: list[np.ndarray]
    window_mask: np.ndarray
    mean_affinities: np.ndarray
    regions: np.ndarray
    beta: np.ndarray | None
    pooled: np.ndarray
    embedding: np.ndarray
    _tape: object = field(default=None, repr=False)
    _param_vars: dict = field(default=None, repr=False)
    _embedding_var: object = field(default=None, repr=False)
    _params: object = field(default=None, repr=False)

    def dense_attention(self, layer: int) -> np.ndarray:
        """Expand layer attention to a full node-by-node matrix (tests, diagnostics)."""
        return banded_to_dense(self.attention[layer], self.n_frames, self.n_regions)

    def attention_row_sums(self, layer: int) -> np.ndarray:
        return self.attention[layer].sum(axis=-1).reshape(-1)


def window_mask(n_frames: int, n_regions: int) -> np.ndarray:
    """Validity of the banded column blocks: (n_frames, 1, 3*n_regions)."""
    mask = np.zeros((n_frames, 1, 3 * n_regions), dtype=bool)
    mask[1:, :, :n_regions] = True
    mask[:, :, n_regions : 2 * n_regions] = True
    mask[: n_frames - 1, :, 2 * n_regions :] = True
    return mask


def banded_to_dense(banded: np.ndarray, n_frames: int, n_regions: int) -> np.ndarray:
    """(T, R, 3R) banded weights -> (N, N) dense matrix, zeros off-window."""
    n = n_frames * n_regions
    dense = np.zeros((n, n))
    for t in range(n_frames):
        rows = slice(t * n_regions, (t + 1) * n_regions)
        lo = max(0, t - 1)
        hi = min(n_frames, t + 2)
        cols = slice(lo * n_regions, hi * n_regions)
        offset = (lo - (t - 1)) * n_regions
        width = (hi - lo) * n_regions
        dense[rows, cols] = banded[t][:, offset : offset + width]
    return dense


def _window_stack(tape, x3: ad.Var, n_frames: int):
    """(T, R, C) -> (T, 3R, C): rows of frames t-1, t, t+1 per frame t."""
    prev = ad.pad_axis0(tape, ad.slice_axis0(tape, x3, 0, n_frames - 1), 1, 0)
    nxt = ad.pad_axis0(tape, ad.slice_axis0(tape, x3, 1, n_frames), 0, 1)
    return ad.concat(tape, [prev, x3, nxt], axis=1)


def _layer_forward(tape, pv, layer, x_prev, n_frames, n_regions, mask, config):
    """One graph attention layer on the tape.

    Returns (x_next (N, mid), banded weights Var or None, mean affinity (N,)).
    """
    a2 = ad.add_row(
        tape,
        ad.matmul(tape, x_prev, pv[f"layer{layer}_query_w"]),
        pv[f"layer{layer}_query_b"],
    )
    if config.tied_attention:
        b2 = a2
    else:
        b2 = ad.add_row(
            tape,
            ad.matmul(tape, x_prev, pv[f"layer{layer}_key_w"]),
            pv[f"layer{layer}_key_b"],
        )

    # Row mean of the all-pairs affinity matrix A B^T equals A @ mean(B):
    # the N x N matrix itself is never needed.
    affinity = ad.matvec(tape, a2, ad.mean_axis0(tape, b2))

    mid = config.mid_dim
    x3 = ad.reshape(tape, x_prev, (n_frames, n_regions, mid))
    xwin = _window_stack(tape, x3, n_frames)

    weights = None
    if config.region_agg == "attention":
        a3 = ad.reshape(tape, a2, (n_frames, n_regions, mid))
        b3 = ad.reshape(tape, b2, (n_frames, n_regions, mid))
        bwin = _window_stack(tape, b3, n_frames)
        scores = ad.bmm(tape, a3, ad.transpose_last2(tape, bwin))
        weights = ad.softmax_last(tape, scores, mask=mask)
        m3 = ad.bmm(tape, weights, xwin)
    else:
        # Neighborhoods are frame-window based, so every region of a frame
        # reduces over the same row set; compute once per frame, broadcast.
        maskf = mask.astype(np.float64).reshape(n_frames, 3 * n_regions, 1)
        if config.region_agg == "average":
            counts = mask.sum(axis=(1, 2)).astype(np.float64)
            summed = ad.sum_axis1(tape, ad.mul_const(tape, xwin, maskf))
            per_frame = ad.mul_const(tape, summed, (1.0 / counts)[:, None])
        else:
            shifted = ad.add_const(tape, xwin, -1e30 * (1.0 - maskf))
            per_frame = ad.max_axis1(tape, shifted)
        m3 = ad.broadcast_axis1(
            tape, ad.reshape(tape, per_frame, (n_frames, 1, mid)), n_regions
        )

    m2 = ad.reshape(tape, m3, (n_frames * n_regions, mid))
    x_next = ad.elu(
        tape,
        ad.add_row(
            tape,
            ad.matmul(tape, m2, pv[f"layer{layer}_out_w"]),
            pv[f"layer{layer}_out_b"],
        ),
    )
    return x_next, weights, affinity


def _concat_blocks(config, x_in, x_layers):
    if config.concat_mode == "all":
        return [x_in] + x_layers
    if config.concat_mode == "gat_plus_reduce":
        return x_layers
    if config.concat_mode == "gat_only":
        return x_layers[1:]
    return [x_layers[-1]]


def _forward(tape, pv, data64: np.ndarray, config: ModelConfig, params=None) -> ForwardTrace:
    """Full forward pass on Vars. data64 is the (T, R, C) float64 tensor."""
    n_frames, n_regions, in_dim = data64.shape
    if in_dim != config.in_dim:
        raise DimensionError(
            f"tensor has {in_dim} channels, model expects {config.in_dim}"
        )
    n = n_frames * n_regions
    mask = window_mask(n_frames, n_regions)

    x_in = ad.constant(data64.reshape(n, in_dim))
    x0 = ad.elu(
        tape, ad.add_row(tape, ad.matmul(tape, x_in, pv["reduce_w"]), pv["reduce_b"])
    )

    x_layers = [x0]
    attn_banded: list[np.ndarray] = []
    affinities = []
    for k in range(config.n_layers):
        x_next, weights, affinity = _layer_forward(
            tape, pv, k, x_layers[-1], n_frames, n_regions, mask, config
        )
        x_layers.append(x_next)
        affinities.append(affinity)
        attn_banded.append(
            weights.value if weights is not None else np.zeros((n_frames, n_regions, 0))
        )

    regions = ad.concat(tape, _concat_blocks(config, x_in, x_layers), axis=1)
    alpha_mat = ad.concat(
        tape, [ad.reshape(tape, a, (n, 1)) for a in affinities], axis=1
    )

    beta = None
    if config.pooling == "attention":
        logits = ad.add_scalar(
            tape, ad.matvec(tape, alpha_mat, pv["pool_w"]), pv["pool_b"]
        )
        beta = ad.softmax_last(tape, logits)
        pooled = ad.vecmat(tape, beta, regions)
    elif config.pooling == "average":
        pooled = ad.mean_axis0(tape, regions)
    else:
        pooled = ad.max_axis0(tape, regions)

    hidden = ad.elu(
        tape, ad.add_row(tape, ad.vecmat(tape, pooled, pv["mlp_w1"]), pv["mlp_b1"])
    )
    embedding = ad.add_row(
        tape, ad.vecmat(tape, hidden, pv["mlp_w2"]), pv["mlp_b2"]
    )

    return ForwardTrace(
        n_frames=n_frames,
        n_regions=n_regions,
        x_input=x_in.value,
        x_layers=[x.value for x in x_layers],
        attention=attn_banded,
        window_mask=mask,
        mean_affinities=alpha_mat.value,
        regions=regions.value,
        beta=None if beta is None else beta.value,
        pooled=pooled.value,
        embedding=embedding.value,
        _tape=tape,
        _param_vars=pv,
        _embedding_var=embedding,
        _params=params,
    )


# Each training tape gets one shared set of parameter Vars, so the three
# forwards of a triplet accumulate into the same leaves.
_TAPE_VARS: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()


def forward_trace(params: ModelParams, tensor: RegionFeatureTensor, tape) -> ForwardTrace:
    """Forward pass for training: records onto `tape`.

    All traces taken on one tape must come from the same params object;
    they share its parameter Vars.
    """
    bound = _TAPE_VARS.get(tape)
    if bound is None:
        bound = (params, params.as_vars())
        _TAPE_VARS[tape] = bound
    elif bound[0] is not params:
        raise ValueError("tape already bound to different params")
    data64 = tensor.data.astype(np.float64)
    counters.encoder_passes.add(1)
    return _forward(tape, bound[1], data64, params.config, params=params)


def reduce_dims(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Channel reduction: elu(x @ W + b), (N, in_dim) -> (N, mid_dim)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.config.in_dim:
        raise DimensionError(f"expected (N, {params.config.in_dim}), got {x.shape}")
    pv = params.as_vars()
    return ad.elu(
        None, ad.add_row(None, ad.matmul(None, ad.constant(x), pv["reduce_w"]), pv["reduce_b"])
    ).value


def gat_layer_forward(
    params: ModelParams, layer: int, graph: RegionGraph, x_prev: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One attention layer outside the tape (0-based layer index).

    Returns (next region matrix (N, mid_dim), dense attention weights
    (N, N) with zeros off-neighborhood, mean affinity vector (N,)).
    """
    if not (0 <= layer < params.config.n_layers):
        raise ValueError(f"layer {layer} out of range")
    if graph.window != 1:
        raise ValueError("the encoder is defined on the window-1 region graph")
    x_prev = np.asarray(x_prev, dtype=np.float64)
    if x_prev.shape != (graph.n_nodes, params.config.mid_dim):
        raise DimensionError(
            f"expected ({graph.n_nodes}, {params.config.mid_dim}), got {x_prev.shape}"
        )
    if not np.all(np.isfinite(x_prev)):
        raise ValueError("layer input contains non-finite values")
    pv = params.as_vars()
    mask = window_mask(graph.n_frames, graph.n_regions)
    x_next, weights, affinity = _layer_forward(
        None, pv, layer, ad.constant(x_prev), graph.n_frames, graph.n_regions,
        mask, params.config,
    )
    if weights is None:
        dense = np.zeros((graph.n_nodes, graph.n_nodes))
    else:
        dense = banded_to_dense(weights.value, graph.n_frames, graph.n_regions)
    return x_next.value, dense, affinity.value


def depth_concat(*blocks: np.ndarray) -> np.ndarray:
    """Concatenate per-region matrices along channels; rows must agree."""
    blocks = [np.asarray(b, dtype=np.float64) for b in blocks]
    if not blocks:
        raise ValueError("nothing to concatenate")
    rows = {b.shape[0] for b in blocks}
    if len(rows) != 1:
        raise ValueError(f"inconsistent row counts {sorted(rows)}")
    return np.concatenate(blocks, axis=1)


def attention_pool(
    params: ModelParams,
    regions: np.ndarray,
    affinities: np.ndarray,
    pooling: str | None = None,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Collapse region rows into one vector; returns (pooled, beta or None)."""
    regions = np.asarray(regions, dtype=np.float64)
    affinities = np.asarray(affinities, dtype=np.float64)
    if regions.shape[0] < 1:
        raise ValueError("need at least one region")
    if affinities.shape != (regions.shape[0], params.config.n_layers):
        raise DimensionError(
            f"affinities shape {affinities.shape} != "
            f"({regions.shape[0]}, {params.config.n_layers})"
        )
    mode = pooling or params.config.pooling
    if mode == "average":
        return regions.mean(axis=0), None
    if mode == "max":
        return regions.max(axis=0), None
    pv = params.as_vars()
    logits = ad.add_scalar(
        None, ad.matvec(None, ad.constant(affinities), pv["pool_w"]), pv["pool_b"]
    )
    beta = ad.softmax_last(None, logits).value
    return beta @ regions, beta


def _elu_np(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def mlp_head(params: ModelParams, pooled: np.ndarray) -> np.ndarray:
    """Two-layer head; the final layer is linear."""
    pooled = np.asarray(pooled, dtype=np.float64)
    if pooled.shape != (params.config.concat_width,):
        raise DimensionError(
            f"expected ({params.config.concat_width},), got {pooled.shape}"
        )
    hidden = _elu_np(pooled @ params["mlp_w1"] + params["mlp_b1"])
    return hidden @ params["mlp_w2"] + params["mlp_b2"]


def embed_video(
    params: ModelParams,
    tensor: RegionFeatureTensor,
    want_trace: bool = False,
    max_nodes: int = DEFAULT_MAX_NODES,
):
    """Encode one video into an embed_dim vector. Deterministic.

    Counts one encoder pass. With want_trace=True also returns the
    ForwardTrace for diagnostics.
    """
    if not isinstance(tensor, RegionFeatureTensor):
        raise TypeError("expected a RegionFeatureTensor")
    build_region_graph(tensor.n_frames, tensor.n_regions, max_nodes=max_nodes)
    data64 = tensor.data.astype(np.float64)
    counters.encoder_passes.add(1)
    trace = _forward(None, params.as_vars(), data64, params.config, params=params)
    if want_trace:
        return trace.embedding, trace
    return trace.embedding


def write_pooling_diagnostics(video_id: str, trace: ForwardTrace, fh) -> None:
    """Dump pooling weights as text: video_id, node_id, 1-based frame, weight."""
    if trace.beta is None:
        raise ValueError("trace has no pooling weights (non-attention pooling)")
    for i, b in enumerate(trace.beta):
        frame = i // trace.n_regions + 1
        fh.write(f"{video_id}\t{i}\t{frame}\t{b:.17g}\n")


def _pack_array(name: str, arr: np.ndarray) -> bytes:
    name_b = name.encode("utf-8")
    head = struct.pack("<H", len(name_b)) + name_b + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def save_params(params: ModelParams, path) -> None:
    """Write a versioned, CRC-terminated parameter file (bit-exact round-trip)."""
    cfg = params.config
    blob = PARAMS_MAGIC + struct.pack("<I", PARAMS_VERSION)
    blob += struct.pack(
        "<IIIIBBBB",
        cfg.in_dim,
        cfg.mid_dim,
        cfg.n_layers,
        cfg.embed_dim,
        int(cfg.tied_attention),
        REGION_AGG_MODES.index(cfg.region_agg),
        POOLING_MODES.index(cfg.pooling),
        CONCAT_MODES.index(cfg.concat_mode),
    )
    names = params.names()
    blob += struct.pack("<I", len(names))
    for name in names:
        blob += _pack_array(name, params[name])
    blob += struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF)
    Path(path).write_bytes(blob)


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.raw):
            raise TruncatedFileError(f"{self.path}: truncated at byte {self.off}")
        out = self.raw[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_params(path) -> ModelParams:
    """Read a parameter file, verifying version, checksum, and shapes."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4 or raw[:4] != PARAMS_MAGIC:
        raise BadMagicError(f"{path}: not a parameter file")
    if len(raw) < 8:
        raise TruncatedFileError(f"{path}: header incomplete")
    stored_crc = struct.unpack_from("<I", raw, len(raw) - 4)[0]
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != stored_crc:
        raise ChecksumError(f"{path}: CRC mismatch")

    r = _Reader(raw[:-4], path)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != PARAMS_VERSION:
        raise VersionError(f"{path}: unsupported version {version}")
    in_dim, mid_dim, n_layers, embed_dim, tied, agg, pool, concat = r.unpack("<IIIIBBBB")
    try:
        config = ModelConfig(
            in_dim=in_dim,
            mid_dim=mid_dim,
            n_layers=n_layers,
            embed_dim=embed_dim,
            tied_attention=bool(tied),
            region_agg=REGION_AGG_MODES[agg],
            pooling=POOLING_MODES[pool],
            concat_mode=CONCAT_MODES[concat],
        )
    except (IndexError, ValueError) as exc:
        raise DimensionError(f"{path}: bad config header ({exc})") from exc

    (n_arrays,) = r.unpack("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n_arrays):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).copy()
    if r.off != len(r.raw):
        raise TruncatedFileError(f"{path}: {len(r.raw) - r.off} unread bytes")
    try:
        return ModelParams(config, arrays)
    except (ValueError, DimensionError) as exc:
        raise DimensionError(f"{path}: payload inconsistent with header ({exc})") from exc
