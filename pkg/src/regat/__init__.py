"""Content-based video retrieval with region-graph attention embeddings.

Videos enter the engine as per-frame region descriptor tensors. A graph
attention network turns each video (or shot) into one fixed-size embedding,
trained with a triplet margin loss, so search over n videos costs n encoder
passes plus cheap cosine arithmetic instead of n^2 network evaluations.
"""

from .features import (
    CorpusManifest,
    RegionFeatureTensor,
    flatten_frame,
    read_features,
    synth_corpus,
    synth_scene_corpus,
    write_features,
)
from .graph import RegionGraph, build_region_graph, degree_histogram
from .model import (
    ModelConfig,
    ModelParams,
    embed_video,
    init_params,
    load_params,
    save_params,
)
from .training import TrainConfig, train
from .shots import ShotSet, detect_shot_boundaries, embed_shots, segment_shots
from .retrieval import (
    EmbeddingIndex,
    Qrels,
    RankedList,
    average_query_expansion,
    chamfer,
    mean_average_precision,
    rank,
    shot_rank,
    symmetric_chamfer,
)
from .estimator import VideoGraphEncoder

__version__ = "0.1.0"

__all__ = [
    "CorpusManifest",
    "EmbeddingIndex",
    "ModelConfig",
    "ModelParams",
    "Qrels",
    "RankedList",
    "RegionFeatureTensor",
    "RegionGraph",
    "ShotSet",
    "TrainConfig",
    "VideoGraphEncoder",
    "average_query_expansion",
    "build_region_graph",
    "chamfer",
    "degree_histogram",
    "detect_shot_boundaries",
    "embed_shots",
    "embed_video",
    "flatten_frame",
    "init_params",
    "load_params",
    "mean_average_precision",
    "rank",
    "read_features",
    "save_params",
    "segment_shots",
    "shot_rank",
    "symmetric_chamfer",
    "synth_corpus",
    "synth_scene_corpus",
    "train",
    "write_features",
]
