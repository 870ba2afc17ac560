"""Scikit-learn style wrapper around the video encoder.

`VideoGraphEncoder` is a transformer: `fit(X, y)` trains the triplet model
on videos X grouped by labels y, `transform(X)` returns one embedding row
per video. It composes with the usual sklearn tooling (`get_params`,
`clone`, scoring) so the encoder can sit inside model-selection loops.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .features import InMemoryCorpus
from .model import ModelConfig, embed_video
from .retrieval import EmbeddingIndex, Qrels, mean_average_precision, rank
from .training import TrainConfig, train
from .validation import as_tensor_list, check_labels


class VideoGraphEncoder(BaseEstimator, TransformerMixin):
    """Trainable encoder mapping a video tensor to one fixed-size embedding.

    Parameters mirror the model and optimizer defaults: 512 intermediate
    channels, 3 graph attention layers, 4096-d embeddings, margin 0.2,
    learning rate 3e-7, 120 epochs of two 1000-triplet pools. Scale them
    down for small corpora.
    """

    def __init__(
        self,
        mid_dim: int = 512,
        n_layers: int = 3,
        embed_dim: int = 4096,
        tied_attention: bool = False,
        region_agg: str = "attention",
        pooling: str = "attention",
        concat_mode: str = "all",
        margin: float = 0.2,
        learning_rate: float = 3e-7,
        epochs: int = 120,
        triplets_per_pool: int = 1000,
        pools_per_epoch: int = 2,
        max_clip_len: int = 64,
        seed: int = 0,
    ):
        self.mid_dim = mid_dim
        self.n_layers = n_layers
        self.embed_dim = embed_dim
        self.tied_attention = tied_attention
        self.region_agg = region_agg
        self.pooling = pooling
        self.concat_mode = concat_mode
        self.margin = margin
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.triplets_per_pool = triplets_per_pool
        self.pools_per_epoch = pools_per_epoch
        self.max_clip_len = max_clip_len
        self.seed = seed

    def _model_config(self, in_dim: int) -> ModelConfig:
        return ModelConfig(
            in_dim=in_dim,
            mid_dim=self.mid_dim,
            n_layers=self.n_layers,
            embed_dim=self.embed_dim,
            tied_attention=self.tied_attention,
            region_agg=self.region_agg,
            pooling=self.pooling,
            concat_mode=self.concat_mode,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            margin=self.margin,
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            triplets_per_pool=self.triplets_per_pool,
            pools_per_epoch=self.pools_per_epoch,
            max_clip_len=self.max_clip_len,
            seed=self.seed,
        )

    def fit(self, X, y):
        """Train on videos X with group labels y (same label = related)."""
        tensors = as_tensor_list(X)
        labels = check_labels(y, len(tensors))
        corpus = InMemoryCorpus(
            {t.video_id: t for t in tensors},
            {t.video_id: g for t, g in zip(tensors, labels)},
        )
        self.n_features_in_ = tensors[0].n_channels
        self.config_ = self._model_config(self.n_features_in_)
        self.params_, self.loss_history_ = train(
            corpus, self._train_config(), model_config=self.config_
        )
        return self

    def transform(self, X) -> np.ndarray:
        """Embed each video; returns an (n_videos, embed_dim) float64 array."""
        if not hasattr(self, "params_"):
            raise NotFittedError("fit the encoder before calling transform")
        tensors = as_tensor_list(X)
        return np.stack([embed_video(self.params_, t) for t in tensors])

    def score(self, X, y) -> float:
        """Leave-one-out retrieval mAP: each video queries all the others."""
        tensors = as_tensor_list(X)
        labels = check_labels(y, len(tensors))
        embeddings = self.transform(tensors)

        rankings = []
        qrels_labels: dict[str, dict[str, set[str]]] = {}
        for i, query in enumerate(tensors):
            index = EmbeddingIndex("video")
            for j, candidate in enumerate(tensors):
                if j != i:
                    index.add_video(candidate.video_id, embeddings[j])
            rankings.append(rank(embeddings[i], index, query_id=query.video_id))
            qrels_labels[query.video_id] = {
                other.video_id: {"same" if labels[j] == labels[i] else "other"}
                for j, other in enumerate(tensors)
                if j != i
            }
        result = mean_average_precision(rankings, Qrels(qrels_labels), {"same"})
        return result.value
