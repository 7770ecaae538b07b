"""
Neural triple disambiguation model.

A fastText-style classifier: every string feature of a candidate is hashed
into a bucket, the bucket embeddings are averaged and a linear layer with a
logistic output gives the confidence that the target triple is correct.
"""
import logging
import os
import pickle
from typing import Optional, Sequence, Tuple

import joblib
import numpy as np
from sklearn.utils import murmurhash3_32

from src import config
from src.checkpoint import CheckpointError
from src.tensor_core import (ParameterSet, Tensor, add, div, embedding_lookup, init_uniform, matmul,
                             mul, reshape, tsum)

logger = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1


class NtdModel:
    """Averaged hashed-feature embeddings followed by a logistic unit."""

    def __init__(self, embeddings: np.ndarray, weights: np.ndarray, bias: float):
        self.embeddings = np.asarray(embeddings, dtype=np.float64)
        self.weights = np.asarray(weights, dtype=np.float64).reshape(-1)
        self.bias = float(bias)
        if self.embeddings.ndim != 2 or self.embeddings.shape[1] != self.weights.shape[0]:
            raise ValueError(f"embedding shape {self.embeddings.shape} does not match weights {self.weights.shape}")

    @property
    def n_buckets(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @classmethod
    def zeros(cls, n_buckets: Optional[int] = None, dim: Optional[int] = None) -> "NtdModel":
        n_buckets = n_buckets or config.NTD_BUCKETS
        dim = dim or config.NTD_DIM
        return cls(np.zeros((n_buckets, dim)), np.zeros(dim), 0.0)

    @classmethod
    def initialized(cls, n_buckets: int, dim: int, seed: int) -> "NtdModel":
        """Random embeddings with a zero output layer, so every initial score is 0.5."""
        rng = np.random.RandomState(seed)
        return cls(init_uniform(rng, (n_buckets, dim), dim), np.zeros(dim), 0.0)

    def feature_ids(self, features: Sequence[str]) -> np.ndarray:
        return np.array([murmurhash3_32(f, seed=0, positive=True) % self.n_buckets for f in features],
                        dtype=np.int64)

    def encode_batch(self, feature_lists: Sequence[Sequence[str]]) -> Tuple[np.ndarray, np.ndarray]:
        """Pad hashed ids of several bags into (B, L) ids and a (B, L) mask."""
        ids = [self.feature_ids(features) for features in feature_lists]
        width = max([len(i) for i in ids] + [1])
        matrix = np.zeros((len(ids), width), dtype=np.int64)
        mask = np.zeros((len(ids), width))
        for row, bag in enumerate(ids):
            matrix[row, :len(bag)] = bag
            mask[row, :len(bag)] = 1.0
        return matrix, mask

    def logit(self, features: Sequence[str]) -> float:
        ids = self.feature_ids(features)
        if len(ids) == 0:
            return self.bias
        hidden = self.embeddings[ids].mean(axis=0)
        return float(hidden @ self.weights + self.bias)

    def score(self, features: Sequence[str]) -> float:
        """Confidence in [0, 1] that the target triple is correct."""
        return float(0.5 * (1.0 + np.tanh(0.5 * self.logit(features))))

    def score_many(self, feature_lists: Sequence[Sequence[str]]) -> np.ndarray:
        return np.array([self.score(features) for features in feature_lists])

    def to_parameters(self) -> ParameterSet:
        params = ParameterSet()
        params.add("embeddings", self.embeddings.copy())
        params.add("weights", self.weights.reshape(-1, 1).copy())
        params.add("bias", np.array([self.bias]))
        return params

    @classmethod
    def from_parameters(cls, params: ParameterSet) -> "NtdModel":
        return cls(params["embeddings"].data.copy(), params["weights"].data.reshape(-1).copy(),
                   float(params["bias"].data[0]))

    def save(self, path: Optional[str] = None) -> str:
        path = path or config.NTD_MODEL_PATH
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        joblib.dump({
            "format_version": MODEL_FORMAT_VERSION,
            "n_buckets": self.n_buckets,
            "dim": self.dim,
            "embeddings": self.embeddings,
            "weights": self.weights,
            "bias": self.bias,
        }, path)
        logger.info(f"Saved NTD model to {path}")
        return path

    @classmethod
    def load(cls, path: Optional[str] = None) -> "NtdModel":
        """
        Read a model written by `save`.

        Raises:
            CheckpointError: when the file is unreadable, corrupt or of another format version
        """
        path = path or config.NTD_MODEL_PATH
        try:
            state = joblib.load(path)
        except (OSError, EOFError, pickle.UnpicklingError, ValueError, KeyError, AttributeError, IndexError,
                TypeError) as e:
            raise CheckpointError(f"cannot read NTD model {path}: {e or type(e).__name__}") from None
        if not isinstance(state, dict) or state.get("format_version") != MODEL_FORMAT_VERSION:
            version = state.get("format_version") if isinstance(state, dict) else None
            raise CheckpointError(f"unsupported NTD model version {version} in {path}")
        try:
            model = cls(state["embeddings"], state["weights"], state["bias"])
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"corrupt NTD model {path}: {e}") from None
        logger.info(f"Loaded NTD model from {path}")
        return model


def batch_logits(params: ParameterSet, ids: np.ndarray, mask: np.ndarray) -> Tensor:
    """Differentiable logits (B,) for padded hashed ids."""
    embedded = embedding_lookup(params["embeddings"], ids)
    summed = tsum(mul(embedded, mask[:, :, None]), axis=1)
    counts = np.maximum(mask.sum(axis=1, keepdims=True), 1.0)
    hidden = div(summed, counts)
    return reshape(add(matmul(hidden, params["weights"]), params["bias"]), (ids.shape[0],))


def load_ntd_model(path: Optional[str] = None) -> Optional[NtdModel]:
    """
    Load the NTD model if it exists.

    Returns:
        The model, or None when no model file is present; anchoring then
        falls back to the rule-based score.
    """
    path = path or config.NTD_MODEL_PATH
    if not os.path.exists(path):
        logger.warning(f"NTD model {path} not found, falling back to RB+KR scoring")
        return None
    return NtdModel.load(path)
