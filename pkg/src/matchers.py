"""
Multi-channel query-title matchers.

Each text is encoded into three parallel channels (tokens, entities and
has_operation triples). A channel pair is turned into a similarity feature
vector by one of three architectures (ARC-I, MatchPyramid, IWAN); the three
channel features are concatenated and classified into unrelated / related /
similar by a 2-layer MLP.
"""
import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, TYPE_CHECKING

import numpy as np

from src import config
from src.anchoring import AnchorSet, tokenize
from src.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from src.kg_store import KnowledgeGraph, RelationKind
from src.tensor_core import (ParameterSet, Tensor, TensorError, add, bilstm, concat, conv1d, conv2d,
                             cosine_similarity_matrix, div, embedding_lookup, getitem, init_uniform,
                             log, matmul, max_over_time, max_pool2d, mean, mul, no_grad, relu,
                             reshape, softmax, sub, tanh, transpose, tsum)

if TYPE_CHECKING:
    from src.train_eval import MatchExample

logger = logging.getLogger(__name__)

PAD_ID = 0
NULL_ID = 1
UNK_ID = 2
SPECIAL_TOKENS = ("<pad>", "<null>", "<unk>")

ARCHITECTURES = ("arc1", "matchpyramid", "iwan")
CHANNELS = ("token", "entity", "triple")
LABELS = ("unrelated", "related", "similar")


class MatcherError(ValueError):
    """Raised for invalid matcher inputs."""


class Vocabulary:
    """
    Token and entity id maps.

    Ids 0, 1 and 2 are padding, the learned null id for empty channels and
    the unknown id. Entity rows also hold one row per relation so triples
    can share the entity embedding table.
    """

    def __init__(self, tokens: Sequence[str], entities: Sequence[int]):
        self.tokens: List[str] = list(SPECIAL_TOKENS) + sorted(set(tokens) - set(SPECIAL_TOKENS))
        self.token_to_id = {tok: i for i, tok in enumerate(self.tokens)}
        self.entities: List[int] = sorted(set(entities))
        offset = len(SPECIAL_TOKENS)
        self.entity_to_row = {e: offset + i for i, e in enumerate(self.entities)}
        self.relation_to_row = {kind.value: offset + len(self.entities) + i for i, kind in enumerate(RelationKind)}

    @classmethod
    def build(cls, texts: Sequence[str], kg: KnowledgeGraph, mode: Optional[str] = None) -> "Vocabulary":
        """Build from training texts (case-folded tokens) and the KG's normalized entities."""
        tokens = {t.text.casefold() for text in texts for t in tokenize(text, mode)}
        vocab = cls(tokens, set(kg.synonym_rep.values()))
        logger.info(f"Built vocabulary with {vocab.token_size} tokens and {vocab.entity_size} entity rows")
        return vocab

    @property
    def token_size(self) -> int:
        return len(self.tokens)

    @property
    def entity_size(self) -> int:
        return len(SPECIAL_TOKENS) + len(self.entities) + len(self.relation_to_row)

    def token_id(self, token: str) -> int:
        return self.token_to_id.get(token.casefold(), UNK_ID)

    def entity_row(self, entity_id: int) -> int:
        return self.entity_to_row.get(entity_id, UNK_ID)

    def relation_row(self, relation: str) -> int:
        return self.relation_to_row[relation]

    def to_dict(self) -> Dict[str, Any]:
        return {"tokens": self.tokens[len(SPECIAL_TOKENS):], "entities": self.entities}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Vocabulary":
        return cls(data["tokens"], data["entities"])


@dataclass(frozen=True)
class ChannelLimits:
    tokens: int = config.MAX_TOKENS
    entities: int = config.MAX_ENTITIES
    triples: int = config.MAX_TRIPLES

    def of(self, channel: str) -> int:
        return {"token": self.tokens, "entity": self.entities, "triple": self.triples}[channel]


@dataclass
class ChannelizedInput:
    """Padded id sequences of one text; empty channels hold [null] with valid length 0."""

    token_ids: np.ndarray
    token_len: int
    entity_ids: np.ndarray
    entity_len: int
    triple_ids: np.ndarray
    triple_len: int


@dataclass
class ChannelBatch:
    token_ids: np.ndarray
    token_len: np.ndarray
    entity_ids: np.ndarray
    entity_len: np.ndarray
    triple_ids: np.ndarray
    triple_len: np.ndarray

    def __len__(self) -> int:
        return self.token_ids.shape[0]


@dataclass
class EmbeddedChannel:
    values: Tensor
    lengths: np.ndarray
    mask: np.ndarray


@dataclass
class SimilarityFeatures:
    f_w: Tensor
    f_e: Tensor
    f_t: Tensor

    @property
    def fused(self) -> Tensor:
        return concat([self.f_w, self.f_e, self.f_t], axis=-1)


@dataclass
class MatchPrediction:
    s: np.ndarray
    label: int

    def as_dict(self) -> Dict[str, float]:
        return {name: float(p) for name, p in zip(LABELS, self.s)}


@dataclass
class MatcherDims:
    embedding: int = 128
    filters: int = 256
    window: int = 2
    pyramid_filters: Tuple[int, int] = (8, 16)
    pyramid_kernel: int = 3
    lstm_hidden: int = 64
    mlp_hidden: int = 128
    fusion_hidden: int = 128

    @classmethod
    def for_architecture(cls, architecture: str, overrides: Optional[Dict[str, Any]] = None) -> "MatcherDims":
        dims = cls(embedding=256 if architecture == "iwan" else 128)
        for key, value in (overrides or {}).items():
            if not hasattr(dims, key):
                raise MatcherError(f"unknown dimension {key!r}")
            setattr(dims, key, tuple(value) if key == "pyramid_filters" else int(value))
        return dims


def _pad(ids: List, limit: int, what: str, width: Optional[int] = None) -> Tuple[np.ndarray, int]:
    if len(ids) > limit:
        logger.warning(f"Truncating {what} channel from {len(ids)} to {limit}")
        ids = ids[:limit]
    shape = (limit,) if width is None else (limit, width)
    out = np.full(shape, PAD_ID, dtype=np.int64)
    if ids:
        out[:len(ids)] = ids
        return out, len(ids)
    out[0] = NULL_ID
    return out, 0


def encode_text(text: str, anchors: AnchorSet, vocab: Vocabulary, limits: Optional[ChannelLimits] = None,
                mode: Optional[str] = None) -> ChannelizedInput:
    limits = limits or ChannelLimits()
    token_ids, token_len = _pad([vocab.token_id(t.text) for t in tokenize(text, mode)], limits.tokens, "token")
    entity_ids, entity_len = _pad([vocab.entity_row(m.entity) for m in anchors.entities], limits.entities, "entity")
    triples = [[vocab.entity_row(t.head.entity), vocab.relation_row(t.relation.value), vocab.entity_row(t.tail.entity)]
               for t in anchors.operation_triples()]
    triple_ids, triple_len = _pad(triples, limits.triples, "triple", width=3)
    return ChannelizedInput(token_ids, token_len, entity_ids, entity_len, triple_ids, triple_len)


def encode_channels(example: "MatchExample", anchors_q: AnchorSet, anchors_d: AnchorSet, vocab: Vocabulary,
                    limits: Optional[ChannelLimits] = None,
                    mode: Optional[str] = None) -> Tuple[ChannelizedInput, ChannelizedInput]:
    """
    Encode the query and title of an example into channel ids.

    Tokens map to vocabulary ids (unknown id when unseen), entities to their
    normalized rows in position order, and only has_operation triples enter
    the triple channel as (head, relation, tail) row triplets.
    """
    return (encode_text(example.query, anchors_q, vocab, limits, mode),
            encode_text(example.title, anchors_d, vocab, limits, mode))


def collate(inputs: Sequence[ChannelizedInput]) -> ChannelBatch:
    if not inputs:
        raise MatcherError("cannot collate an empty batch")
    return ChannelBatch(
        token_ids=np.stack([x.token_ids for x in inputs]),
        token_len=np.array([x.token_len for x in inputs], dtype=np.int64),
        entity_ids=np.stack([x.entity_ids for x in inputs]),
        entity_len=np.array([x.entity_len for x in inputs], dtype=np.int64),
        triple_ids=np.stack([x.triple_ids for x in inputs]),
        triple_len=np.array([x.triple_len for x in inputs], dtype=np.int64),
    )


def embed_channel(params: ParameterSet, channel: str, batch: ChannelBatch) -> EmbeddedChannel:
    """Look up embeddings and zero every position past the effective length max(valid, 1)."""
    if channel == "token":
        values = embedding_lookup(params["embed.token"], batch.token_ids)
        lengths = batch.token_len
    elif channel == "entity":
        values = embedding_lookup(params["embed.entity"], batch.entity_ids)
        lengths = batch.entity_len
    elif channel == "triple":
        values = mean(embedding_lookup(params["embed.entity"], batch.triple_ids), axis=2)
        lengths = batch.triple_len
    else:
        raise MatcherError(f"unknown channel {channel!r}")
    effective = np.maximum(lengths, 1)
    mask = (np.arange(values.shape[1])[None, :] < effective[:, None]).astype(np.float64)
    return EmbeddedChannel(mul(values, mask[:, :, None]), effective, mask)


# ARC-I

def arc1_features(x_q: EmbeddedChannel, x_d: EmbeddedChannel, params: ParameterSet, prefix: str) -> Tensor:
    """Siamese CNN: shared conv1d + max-over-time on each side, then concatenation."""
    def encode(x: EmbeddedChannel) -> Tensor:
        hidden = relu(conv1d(x.values, params[f"{prefix}.conv_w"], params[f"{prefix}.conv_b"]))
        return max_over_time(hidden, x.lengths)

    return concat([encode(x_q), encode(x_d)], axis=-1)


# MatchPyramid

def interaction_matrix(x_q: EmbeddedChannel, x_d: EmbeddedChannel) -> Tensor:
    return cosine_similarity_matrix(x_q.values, x_d.values)


def matchpyramid_features(x_q: EmbeddedChannel, x_d: EmbeddedChannel, params: ParameterSet, prefix: str,
                          padding: int = 1) -> Tensor:
    """Cosine interaction matrix through two conv2d + max_pool2d layers, flattened."""
    matrix = interaction_matrix(x_q, x_d)
    batch = matrix.shape[0]
    hidden = reshape(matrix, (batch, 1) + matrix.shape[1:])
    for layer in (1, 2):
        hidden = relu(conv2d(hidden, params[f"{prefix}.conv{layer}_w"], params[f"{prefix}.conv{layer}_b"],
                             padding=padding))
        hidden = max_pool2d(hidden, 2)
    return reshape(hidden, (batch, -1))


# IWAN

def orthogonal_decompose(h: Tensor, a: Tensor) -> Tuple[Tensor, Tensor]:
    """
    Split h into components parallel and orthogonal to a, per position.

    When a is the zero vector the parallel part is 0 and the orthogonal part is h.
    """
    dot = tsum(mul(h, a), axis=-1, keepdims=True)
    norm2 = tsum(mul(a, a), axis=-1, keepdims=True)
    zero = (norm2.data == 0.0).astype(np.float64)
    coefficient = mul(div(dot, add(norm2, zero)), 1.0 - zero)
    parallel = mul(coefficient, a)
    return parallel, sub(h, parallel)


def _align(source: Tensor, target: Tensor, target_mask: np.ndarray) -> Tensor:
    """Scaled dot-product attention of every source position over valid target positions."""
    scale = 1.0 / np.sqrt(source.shape[-1])
    scores = mul(matmul(source, transpose(target, (0, 2, 1))), scale)
    weights = softmax(scores, axis=-1, mask=target_mask[:, None, :] > 0)
    return matmul(weights, target)


def _masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    summed = tsum(mul(x, mask[:, :, None]), axis=1)
    return div(summed, mask.sum(axis=1, keepdims=True))


def iwan_features(x_q: EmbeddedChannel, x_d: EmbeddedChannel, params: ParameterSet, prefix: str) -> Tensor:
    """Bi-LSTM states, cross attention, orthogonal decomposition, mean pooling and a 1-layer MLP."""
    forward = (params[f"{prefix}.fwd_wx"], params[f"{prefix}.fwd_wh"], params[f"{prefix}.fwd_b"])
    backward = (params[f"{prefix}.bwd_wx"], params[f"{prefix}.bwd_wh"], params[f"{prefix}.bwd_b"])
    q_h = bilstm(x_q.values, x_q.lengths, forward, backward)
    d_h = bilstm(x_d.values, x_d.lengths, forward, backward)
    q_p, q_o = orthogonal_decompose(q_h, _align(q_h, d_h, x_d.mask))
    d_p, d_o = orthogonal_decompose(d_h, _align(d_h, q_h, x_q.mask))
    pooled = concat([_masked_mean(q_p, x_q.mask), _masked_mean(q_o, x_q.mask),
                     _masked_mean(d_p, x_d.mask), _masked_mean(d_o, x_d.mask)], axis=-1)
    return tanh(add(matmul(pooled, params[f"{prefix}.mlp_w"]), params[f"{prefix}.mlp_b"]))


FEATURE_FUNCTIONS = {
    "arc1": arc1_features,
    "matchpyramid": matchpyramid_features,
    "iwan": iwan_features,
}


def feature_dim(architecture: str, dims: MatcherDims, length: int) -> int:
    if architecture == "arc1":
        return 2 * dims.filters
    if architecture == "matchpyramid":
        side = length
        for _ in range(2):
            side = -(-side // 2)
        return dims.pyramid_filters[1] * side * side
    if architecture == "iwan":
        return dims.mlp_hidden
    raise MatcherError(f"unknown architecture {architecture!r}")


def fuse_and_classify(f_w: Tensor, f_e: Tensor, f_t: Tensor, params: ParameterSet) -> Tensor:
    """Concatenate channel features, 2-layer MLP, softmax over the three labels; returns (B, 3)."""
    fused = SimilarityFeatures(f_w, f_e, f_t).fused
    expected = params["fuse.w1"].shape[0]
    if fused.shape[-1] != expected:
        raise MatcherError(f"fused feature dimension {fused.shape[-1]} does not match MLP input {expected}")
    hidden = tanh(add(matmul(fused, params["fuse.w1"]), params["fuse.b1"]))
    logits = add(matmul(hidden, params["fuse.w2"]), params["fuse.b2"])
    return softmax(logits, axis=-1)


def loss(predictions: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean cross-entropy of (B, 3) probabilities against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0 or predictions.shape[0] == 0:
        raise MatcherError("loss of an empty batch")
    if labels.shape[0] != predictions.shape[0]:
        raise MatcherError(f"{predictions.shape[0]} predictions but {labels.shape[0]} labels")
    if labels.min() < 0 or labels.max() >= len(LABELS):
        raise MatcherError(f"labels must be in 0..{len(LABELS) - 1}")
    picked = getitem(predictions, (np.arange(labels.shape[0]), labels))
    return mul(mean(log(picked)), -1.0)


@dataclass
class MatcherSpec:
    architecture: str
    channels: Tuple[str, ...]
    dims: MatcherDims = field(default_factory=MatcherDims)
    limits: ChannelLimits = field(default_factory=ChannelLimits)

    def to_dict(self) -> Dict[str, Any]:
        return {"architecture": self.architecture, "channels": list(self.channels),
                "dims": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.dims).items()},
                "limits": asdict(self.limits)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MatcherSpec":
        return cls(data["architecture"], tuple(data["channels"]),
                   MatcherDims.for_architecture(data["architecture"], data.get("dims")),
                   ChannelLimits(**data.get("limits", {})))


class MultiChannelMatcher:
    """
    A matcher of one architecture kind with separate extractor weights per channel.

    Disabled channels contribute zero feature vectors so the fusion layer keeps
    the same input size across ablations.
    """

    def __init__(self, spec: MatcherSpec, vocab: Vocabulary, seed: int = config.DEFAULT_SEED):
        if spec.architecture not in ARCHITECTURES:
            raise MatcherError(f"unknown architecture {spec.architecture!r}")
        unknown = [c for c in spec.channels if c not in CHANNELS]
        if unknown or not spec.channels:
            raise MatcherError(f"channels must be a non-empty subset of {CHANNELS}, got {list(spec.channels)}")
        self.spec = spec
        self.vocab = vocab
        self.params = ParameterSet()
        self._init_params(np.random.RandomState(seed))

    @property
    def architecture(self) -> str:
        return self.spec.architecture

    def _init_params(self, rng: np.random.RandomState) -> None:
        dims = self.spec.dims
        emb = dims.embedding
        add_param = self.params.add
        add_param("embed.token", init_uniform(rng, (self.vocab.token_size, emb), emb))
        add_param("embed.entity", init_uniform(rng, (self.vocab.entity_size, emb), emb))
        for channel in CHANNELS:
            if channel not in self.spec.channels:
                continue
            prefix = channel
            if self.architecture == "arc1":
                fan_in = dims.window * emb
                add_param(f"{prefix}.conv_w", init_uniform(rng, (dims.window, emb, dims.filters), fan_in))
                add_param(f"{prefix}.conv_b", init_uniform(rng, (dims.filters,), fan_in))
            elif self.architecture == "matchpyramid":
                k = dims.pyramid_kernel
                c1, c2 = dims.pyramid_filters
                add_param(f"{prefix}.conv1_w", init_uniform(rng, (c1, 1, k, k), k * k))
                add_param(f"{prefix}.conv1_b", init_uniform(rng, (c1,), k * k))
                add_param(f"{prefix}.conv2_w", init_uniform(rng, (c2, c1, k, k), c1 * k * k))
                add_param(f"{prefix}.conv2_b", init_uniform(rng, (c2,), c1 * k * k))
            else:
                hidden = dims.lstm_hidden
                for direction in ("fwd", "bwd"):
                    add_param(f"{prefix}.{direction}_wx", init_uniform(rng, (emb, 4 * hidden), emb))
                    add_param(f"{prefix}.{direction}_wh", init_uniform(rng, (hidden, 4 * hidden), hidden))
                    add_param(f"{prefix}.{direction}_b", init_uniform(rng, (4 * hidden,), hidden))
                add_param(f"{prefix}.mlp_w", init_uniform(rng, (8 * hidden, dims.mlp_hidden), 8 * hidden))
                add_param(f"{prefix}.mlp_b", init_uniform(rng, (dims.mlp_hidden,), 8 * hidden))
        fused = sum(self.channel_dim(c) for c in CHANNELS)
        add_param("fuse.w1", init_uniform(rng, (fused, dims.fusion_hidden), fused))
        add_param("fuse.b1", init_uniform(rng, (dims.fusion_hidden,), fused))
        add_param("fuse.w2", init_uniform(rng, (dims.fusion_hidden, len(LABELS)), dims.fusion_hidden))
        add_param("fuse.b2", init_uniform(rng, (len(LABELS),), dims.fusion_hidden))

    def channel_dim(self, channel: str) -> int:
        return feature_dim(self.architecture, self.spec.dims, self.spec.limits.of(channel))

    def channel_features(self, channel: str, batch_q: ChannelBatch, batch_d: ChannelBatch) -> Tensor:
        if channel not in self.spec.channels:
            return Tensor(np.zeros((len(batch_q), self.channel_dim(channel))))
        x_q = embed_channel(self.params, channel, batch_q)
        x_d = embed_channel(self.params, channel, batch_d)
        return FEATURE_FUNCTIONS[self.architecture](x_q, x_d, self.params, channel)

    def forward(self, batch_q: ChannelBatch, batch_d: ChannelBatch) -> Tensor:
        """Label probabilities (B, 3)."""
        f_w, f_e, f_t = (self.channel_features(c, batch_q, batch_d) for c in CHANNELS)
        return fuse_and_classify(f_w, f_e, f_t, self.params)

    def loss(self, batch_q: ChannelBatch, batch_d: ChannelBatch, labels: Sequence[int]) -> Tensor:
        return loss(self.forward(batch_q, batch_d), labels)

    def predict(self, inputs: Sequence[Tuple[ChannelizedInput, ChannelizedInput]]) -> List[MatchPrediction]:
        if not inputs:
            return []
        with no_grad():
            probs = self.forward(collate([q for q, _ in inputs]), collate([d for _, d in inputs])).data
        return [MatchPrediction(s=row.copy(), label=int(np.argmax(row))) for row in probs]

    def save(self, path: str, train_config: Dict[str, Any]) -> None:
        metadata = {"spec": self.spec.to_dict(), "vocab": self.vocab.to_dict(), "config": train_config}
        save_checkpoint(path, self.params.snapshot(), self.architecture, train_config, metadata)

    @classmethod
    def load(cls, path: str) -> "MultiChannelMatcher":
        header, tensors = load_checkpoint(path)
        metadata = header.get("metadata", {})
        try:
            matcher = cls(MatcherSpec.from_dict(metadata["spec"]), Vocabulary.from_dict(metadata["vocab"]))
        except (KeyError, TypeError) as e:
            raise CheckpointError(f"checkpoint {path} has no usable matcher metadata: {e}") from None
        try:
            matcher.params.load_snapshot(tensors)
        except TensorError as e:
            raise CheckpointError(f"checkpoint {path} does not fit its matcher: {e}") from None
        logger.info(f"Loaded {matcher.architecture} matcher with channels {list(matcher.spec.channels)} from {path}")
        return matcher
