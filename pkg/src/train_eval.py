"""
Datasets, training loops, metrics and evaluation protocols.

Covers query-title matching (train/evaluate a multi-channel matcher, channel
ablations, architecture comparison) and triple disambiguation (train the
NTD model, evaluate RB / RB+KR / RB+KR+NTD with accuracy and AUC).
"""
import csv
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from sklearn.metrics import accuracy_score, roc_auc_score
from sklearn.model_selection import train_test_split

from src import config
from src.anchoring import (AnchorSet, TripleCandidate, anchor, anchor_coverage, combine_scores,
                           extract_entities_fmm, filter_knowledge_reasoning, generate_triple_candidates,
                           ntd_features, score_neural, tokenize)
from src.kg_store import KnowledgeGraph, RelationKind, normalize_entity, resolve_alias
from src.matchers import (ARCHITECTURES, CHANNELS, ChannelLimits, ChannelizedInput, MatchPrediction,
                          MatcherSpec, MatcherDims, MultiChannelMatcher, Vocabulary, collate, encode_channels)
from src.matchers import loss as matcher_loss
from src.ntd_model import NtdModel, batch_logits
from src.rule_scorer import RuleBasedScorer, get_rule_scorer
from src.tensor_core import adam_step, backward, mean, mul, no_grad, reset_tape, softplus, sub

logger = logging.getLogger(__name__)

ABLATION_GRID = (
    ("token",),
    ("token", "entity"),
    ("token", "triple"),
    ("token", "entity", "triple"),
)

SCORER_MODES = ("rb", "rb_kr", "rb_kr_ntd")


class DatasetError(ValueError):
    """Raised for malformed dataset files or unusable datasets."""


class ConfigError(ValueError):
    """Raised with every violation found in a configuration."""

    def __init__(self, problems: List[str], source: str = "config"):
        self.problems = problems
        super().__init__(f"invalid {source}: " + "; ".join(problems))


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss stops being finite."""


class MetricError(ValueError):
    """Raised when a metric is undefined for the given examples."""


@dataclass(frozen=True)
class MatchExample:
    query: str
    title: str
    label: int

    def __post_init__(self):
        if self.label not in (0, 1, 2):
            raise DatasetError(f"label must be 0, 1 or 2, got {self.label!r}")
        if not self.query.strip() or not self.title.strip():
            raise DatasetError("query and title must be non-empty")


@dataclass(frozen=True)
class DisambExample:
    query: str
    head_surface: str
    relation: RelationKind
    tail_surface: str
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise DatasetError(f"disambiguation label must be 0 or 1, got {self.label!r}")
        if self.relation not in (RelationKind.HAS_OPERATION, RelationKind.COMPONENT_OF):
            raise DatasetError(f"disambiguation relation must be has_operation or component_of, got {self.relation}")


class DatasetSplits(NamedTuple):
    train: List[Any]
    valid: List[Any]
    test: List[Any]


# Configuration

def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _collect_problems(data: Dict[str, Any], schema: Dict[str, Tuple[Callable[[Any], bool], str]]) -> List[str]:
    problems = [f"unknown key {key!r}" for key in data if key not in schema]
    for key, (check, message) in schema.items():
        if key in data and not check(data[key]):
            problems.append(f"{key}: {message}, got {data[key]!r}")
    return problems


@dataclass
class TrainConfig:
    """Hyperparameters of one matcher training run."""

    name: str = "default"
    architecture: str = "arc1"
    channels: Tuple[str, ...] = CHANNELS
    batch_size: int = 32
    learning_rate: float = 0.001
    epochs: int = 10
    seed: int = config.DEFAULT_SEED
    dims: Dict[str, Any] = field(default_factory=dict)
    max_tokens: int = config.MAX_TOKENS
    max_entities: int = config.MAX_ENTITIES
    max_triples: int = config.MAX_TRIPLES
    threshold: float = config.ANCHOR_THRESHOLD
    dataset: Optional[str] = None

    SCHEMA = {
        "name": (lambda v: isinstance(v, str) and bool(v), "must be a non-empty string"),
        "architecture": (lambda v: v in ARCHITECTURES, f"must be one of {', '.join(ARCHITECTURES)}"),
        "channels": (lambda v: isinstance(v, list) and bool(v) and all(c in CHANNELS for c in v)
                     and len(set(v)) == len(v), f"must be a non-empty list of distinct {'/'.join(CHANNELS)}"),
        "batch_size": (lambda v: _is_int(v) and v >= 1, "must be an integer >= 1"),
        "learning_rate": (lambda v: _is_number(v) and v > 0, "must be a positive number"),
        "epochs": (lambda v: _is_int(v) and v >= 1, "must be an integer >= 1"),
        "seed": (lambda v: _is_int(v) and v >= 0, "must be a non-negative integer"),
        "dims": (lambda v: isinstance(v, dict) and all(k in MatcherDims.__dataclass_fields__ for k in v),
                 f"must be an object with keys among {', '.join(MatcherDims.__dataclass_fields__)}"),
        "max_tokens": (lambda v: _is_int(v) and v >= 1, "must be an integer >= 1"),
        "max_entities": (lambda v: _is_int(v) and v >= 1, "must be an integer >= 1"),
        "max_triples": (lambda v: _is_int(v) and v >= 1, "must be an integer >= 1"),
        "threshold": (lambda v: _is_number(v) and 0.0 <= v <= 1.0, "must be a number in [0, 1]"),
        "dataset": (lambda v: v is None or isinstance(v, str), "must be a path string"),
    }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        """
        Validate and build a config.

        Raises:
            ConfigError: listing every problem found
        """
        if not isinstance(data, dict):
            raise ConfigError(["config must be a JSON object"])
        problems = _collect_problems(data, cls.SCHEMA)
        if problems:
            raise ConfigError(problems)
        values = dict(data)
        if "channels" in values:
            values["channels"] = tuple(values["channels"])
        return cls(**values)

    @classmethod
    def from_file(cls, path: str) -> "TrainConfig":
        return cls.from_dict(_read_json_config(path))

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["channels"] = list(self.channels)
        data.pop("dataset")
        return data

    def matcher_spec(self) -> MatcherSpec:
        return MatcherSpec(self.architecture, tuple(self.channels),
                           MatcherDims.for_architecture(self.architecture, self.dims),
                           ChannelLimits(self.max_tokens, self.max_entities, self.max_triples))


@dataclass
class NtdTrainConfig:
    """Hyperparameters of the neural disambiguator."""

    epochs: int = 30
    learning_rate: float = 0.05
    batch_size: int = 32
    seed: int = config.DEFAULT_SEED
    valid_fraction: float = 0.1
    n_buckets: int = config.NTD_BUCKETS
    dim: int = config.NTD_DIM

    SCHEMA = {
        "epochs": (lambda v: _is_int(v) and v >= 1, "must be an integer >= 1"),
        "learning_rate": (lambda v: _is_number(v) and v > 0, "must be a positive number"),
        "batch_size": (lambda v: _is_int(v) and v >= 1, "must be an integer >= 1"),
        "seed": (lambda v: _is_int(v) and v >= 0, "must be a non-negative integer"),
        "valid_fraction": (lambda v: _is_number(v) and 0.0 <= v < 1.0, "must be a number in [0, 1)"),
        "n_buckets": (lambda v: _is_int(v) and v >= 1, "must be an integer >= 1"),
        "dim": (lambda v: _is_int(v) and v >= 1, "must be an integer >= 1"),
    }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "NtdTrainConfig":
        if not isinstance(data, dict):
            raise ConfigError(["config must be a JSON object"], "NTD config")
        problems = _collect_problems(data, cls.SCHEMA)
        if problems:
            raise ConfigError(problems, "NTD config")
        return cls(**data)

    @classmethod
    def from_file(cls, path: str) -> "NtdTrainConfig":
        return cls.from_dict(_read_json_config(path))


def _read_json_config(path: str) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except OSError as e:
        raise ConfigError([f"cannot read {path}: {e.strerror}"]) from None
    except json.JSONDecodeError as e:
        raise ConfigError([f"{path} is not valid JSON: {e.msg} (line {e.lineno})"]) from None


# Datasets

def _read_tsv(path: str, columns: List[str]) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, sep="\t", header=None, names=columns, dtype=str, quoting=csv.QUOTE_NONE,
                            keep_default_na=False, na_filter=True, encoding="utf-8", skip_blank_lines=True)
    except FileNotFoundError:
        raise DatasetError(f"dataset file {path} not found") from None
    except (pd.errors.ParserError, UnicodeDecodeError) as e:
        raise DatasetError(f"{path}: cannot parse TSV: {e}") from None
    except pd.errors.EmptyDataError:
        return pd.DataFrame(columns=columns)
    missing = frame.isna().any(axis=1)
    if missing.any():
        line = int(np.flatnonzero(missing.to_numpy())[0]) + 1
        raise DatasetError(f"{path}:{line}: expected {len(columns)} tab-separated fields")
    return frame


def _parse_label(value: str, allowed: Tuple[str, ...], path: str, line: int) -> int:
    if value.strip() not in allowed:
        raise DatasetError(f"{path}:{line}: label must be one of {', '.join(allowed)}, got {value!r}")
    return int(value)


def load_match_dataset(path: str) -> List[MatchExample]:
    """Read query \\t title \\t label TSV (no header)."""
    frame = _read_tsv(path, ["query", "title", "label"])
    examples = []
    for line, row in enumerate(frame.itertuples(index=False), start=1):
        label = _parse_label(row.label, ("0", "1", "2"), path, line)
        try:
            examples.append(MatchExample(row.query, row.title, label))
        except DatasetError as e:
            raise DatasetError(f"{path}:{line}: {e}") from None
    logger.info(f"Loaded {len(examples)} matching examples from {path}")
    return examples


def load_disamb_dataset(path: str) -> List[DisambExample]:
    """Read query \\t head \\t relation \\t tail \\t label TSV (no header)."""
    frame = _read_tsv(path, ["query", "head", "relation", "tail", "label"])
    examples = []
    for line, row in enumerate(frame.itertuples(index=False), start=1):
        label = _parse_label(row.label, ("0", "1"), path, line)
        try:
            examples.append(DisambExample(row.query, row.head, RelationKind.parse(row.relation), row.tail, label))
        except (DatasetError, ValueError) as e:
            raise DatasetError(f"{path}:{line}: {e}") from None
    logger.info(f"Loaded {len(examples)} disambiguation examples from {path}")
    return examples


def _write_tsv(rows: List[List[Any]], path: str) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    pd.DataFrame(rows).to_csv(path, sep="\t", header=False, index=False, quoting=csv.QUOTE_NONE,
                              escapechar="\\", encoding="utf-8")


def save_match_dataset(examples: Sequence[MatchExample], path: str) -> None:
    _write_tsv([[e.query, e.title, e.label] for e in examples], path)


def save_disamb_dataset(examples: Sequence[DisambExample], path: str) -> None:
    _write_tsv([[e.query, e.head_surface, e.relation.value, e.tail_surface, e.label] for e in examples], path)


def load_faq_index(path: str) -> List[Tuple[str, str]]:
    """Read the FAQ index: one title per line, optionally followed by a tab and an answer id."""
    titles = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            titles.append((parts[0], parts[1] if len(parts) > 1 else str(line_no)))
    logger.info(f"Loaded {len(titles)} FAQ titles from {path}")
    return titles


def split_dataset(examples: Sequence[Any], seed: int) -> DatasetSplits:
    """
    Deterministic shuffled 8:1:1 split.

    Train gets floor(0.8 n), valid floor(0.1 n) and test the remainder.

    Raises:
        DatasetError: with fewer than 10 examples
    """
    n = len(examples)
    if n < 10:
        raise DatasetError(f"need at least 10 examples to split, got {n}")
    n_train = (8 * n) // 10
    n_valid = n // 10
    n_test = n - n_train - n_valid
    train_valid, test = train_test_split(list(examples), test_size=n_test, random_state=seed, shuffle=True)
    train, valid = train_test_split(train_valid, test_size=n_valid, random_state=seed, shuffle=True)
    return DatasetSplits(list(train), list(valid), list(test))


# Anchors

def anchor_fingerprint(kg: KnowledgeGraph, ntd: Optional[NtdModel], threshold: float,
                       scorer: RuleBasedScorer) -> str:
    digest = hashlib.sha256()
    digest.update(json.dumps([t.key for t in kg.triples]).encode("utf-8"))
    digest.update(json.dumps(sorted(kg.alias_index.items())).encode("utf-8"))
    digest.update(json.dumps({"threshold": threshold, "weights": scorer.weights, "rb": config.RB_WEIGHT,
                              "ntd": config.NTD_WEIGHT}, sort_keys=True).encode("utf-8"))
    if ntd is not None:
        digest.update(ntd.embeddings.tobytes())
        digest.update(ntd.weights.tobytes())
        digest.update(np.float64(ntd.bias).tobytes())
    return digest.hexdigest()


class AnchorProvider:
    """
    Memoizes anchors per text, optionally persisted as a JSONL sidecar.

    The sidecar starts with a fingerprint record; a mismatch discards it.
    """

    def __init__(self, kg: KnowledgeGraph, ntd: Optional[NtdModel] = None, threshold: Optional[float] = None,
                 cache_path: Optional[str] = None, scorer: Optional[RuleBasedScorer] = None):
        self.kg = kg
        self.ntd = ntd
        self.threshold = config.ANCHOR_THRESHOLD if threshold is None else threshold
        self.scorer = scorer or get_rule_scorer()
        self.cache_path = cache_path
        self.fingerprint = anchor_fingerprint(kg, ntd, self.threshold, self.scorer)
        self._anchors: Dict[str, AnchorSet] = {}
        self._dirty = False
        if cache_path and os.path.exists(cache_path):
            self._load()

    def _load(self) -> None:
        try:
            with open(self.cache_path, "r", encoding="utf-8") as f:
                lines = [json.loads(line) for line in f if line.strip()]
        except (OSError, UnicodeDecodeError, json.JSONDecodeError) as e:
            logger.warning(f"Anchor cache {self.cache_path} is unreadable ({e}), recomputing anchors")
            return
        if not lines or not isinstance(lines[0], dict) or lines[0].get("fingerprint") != self.fingerprint:
            logger.warning(f"Anchor cache {self.cache_path} is stale, recomputing anchors")
            return
        anchors: Dict[str, AnchorSet] = {}
        try:
            for record in lines[1:]:
                anchors[record["text"]] = AnchorSet.from_dict(record["anchors"], record["text"])
        except (KeyError, TypeError, ValueError) as e:
            logger.warning(f"Anchor cache {self.cache_path} has a malformed record ({e}), recomputing anchors")
            return
        self._anchors = anchors
        logger.info(f"Loaded {len(self._anchors)} cached anchor sets from {self.cache_path}")

    def get(self, text: str) -> AnchorSet:
        anchors = self._anchors.get(text)
        if anchors is None:
            anchors = anchor(text, self.kg, self.ntd, self.threshold, self.scorer)
            self._anchors[text] = anchors
            self._dirty = True
        return anchors

    def precompute(self, texts: Iterable[str]) -> None:
        for text in texts:
            self.get(text)
        self.save()

    def save(self) -> None:
        if not self.cache_path or not self._dirty:
            return
        directory = os.path.dirname(self.cache_path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(self.cache_path, "w", encoding="utf-8") as f:
            f.write(json.dumps({"fingerprint": self.fingerprint}) + "\n")
            for text in sorted(self._anchors):
                f.write(json.dumps({"text": text, "anchors": self._anchors[text].to_dict()},
                                   ensure_ascii=False) + "\n")
        self._dirty = False
        logger.info(f"Wrote {len(self._anchors)} anchor sets to {self.cache_path}")


def encode_examples(examples: Sequence[MatchExample], provider: AnchorProvider, vocab: Vocabulary,
                    limits: ChannelLimits) -> List[Tuple[ChannelizedInput, ChannelizedInput]]:
    return [encode_channels(e, provider.get(e.query), provider.get(e.title), vocab, limits) for e in examples]


# Matcher training and evaluation

@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_accuracy: float
    valid_loss: float
    valid_accuracy: float


@dataclass
class TrainResult:
    matcher: MultiChannelMatcher
    config: TrainConfig
    history: List[EpochStats]
    best_epoch: int
    best_valid_accuracy: float


def _batch_stats(matcher: MultiChannelMatcher, encoded: Sequence[Tuple[ChannelizedInput, ChannelizedInput]],
                 labels: Sequence[int], batch_size: int) -> Tuple[float, float]:
    total_loss = 0.0
    correct = 0
    with no_grad():
        for start in range(0, len(encoded), batch_size):
            chunk = encoded[start:start + batch_size]
            chunk_labels = labels[start:start + batch_size]
            probs = matcher.forward(collate([q for q, _ in chunk]), collate([d for _, d in chunk]))
            picked = probs.data[np.arange(len(chunk)), chunk_labels]
            total_loss += float(-np.log(picked).sum())
            correct += int((probs.data.argmax(axis=1) == np.asarray(chunk_labels)).sum())
    return total_loss / len(encoded), correct / len(encoded)


def train_matcher(train_config: TrainConfig, dataset: Union[DatasetSplits, Sequence[MatchExample]],
                  kg: KnowledgeGraph, ntd: Optional[NtdModel] = None,
                  provider: Optional[AnchorProvider] = None) -> TrainResult:
    """
    Train a multi-channel matcher with minibatch Adam on cross-entropy.

    The parameters with the best valid accuracy are kept (train accuracy
    when the valid split is empty).

    Args:
        train_config: Hyperparameters
        dataset: Splits, or a flat example list split 8:1:1 with the config seed
        kg: Knowledge graph for anchoring
        ntd: NTD model for anchoring; None falls back to RB+KR
        provider: Shared anchor provider (and cache)

    Returns:
        TrainResult with the selected matcher and per-epoch history

    Raises:
        TrainingDivergedError: when the loss becomes NaN or infinite
    """
    splits = dataset if isinstance(dataset, DatasetSplits) else split_dataset(dataset, train_config.seed)
    if not splits.train:
        raise DatasetError("training split is empty")
    provider = provider or AnchorProvider(kg, ntd, train_config.threshold)
    provider.precompute([t for e in list(splits.train) + list(splits.valid) for t in (e.query, e.title)])
    coverage = anchor_coverage(provider.get(t) for e in splits.train for t in (e.query, e.title))
    logger.info(f"Anchor coverage on train texts: entities {coverage['entity_coverage']:.3f}, "
                f"triples {coverage['triple_coverage']:.3f}")

    spec = train_config.matcher_spec()
    vocab = Vocabulary.build([t for e in splits.train for t in (e.query, e.title)], kg)
    matcher = MultiChannelMatcher(spec, vocab, seed=train_config.seed)
    train_inputs = encode_examples(splits.train, provider, vocab, spec.limits)
    train_labels = [e.label for e in splits.train]
    valid_inputs = encode_examples(splits.valid, provider, vocab, spec.limits)
    valid_labels = [e.label for e in splits.valid]

    rng = np.random.RandomState(train_config.seed)
    history: List[EpochStats] = []
    best_accuracy = -1.0
    best_epoch = 0
    best_snapshot = matcher.params.snapshot()
    batch_size = train_config.batch_size
    logger.info(f"Training {spec.architecture} matcher on channels {list(spec.channels)}: "
                f"{len(train_inputs)} train / {len(valid_inputs)} valid examples, {train_config.epochs} epochs")

    for epoch in range(1, train_config.epochs + 1):
        order = rng.permutation(len(train_inputs))
        running_loss = 0.0
        correct = 0
        for batch_no, start in enumerate(range(0, len(order), batch_size), start=1):
            idx = order[start:start + batch_size]
            labels = [train_labels[i] for i in idx]
            reset_tape()
            matcher.params.zero_grad()
            probs = matcher.forward(collate([train_inputs[i][0] for i in idx]),
                                    collate([train_inputs[i][1] for i in idx]))
            batch_loss = matcher_loss(probs, labels)
            value = batch_loss.item()
            if not np.isfinite(value):
                reset_tape()
                raise TrainingDivergedError(
                    f"loss became {value} at epoch {epoch}, batch {batch_no} "
                    f"(learning rate {train_config.learning_rate})")
            backward(batch_loss)
            adam_step(matcher.params, lr=train_config.learning_rate)
            running_loss += value * len(idx)
            correct += int((probs.data.argmax(axis=1) == np.asarray(labels)).sum())

        train_loss = running_loss / len(train_inputs)
        train_accuracy = correct / len(train_inputs)
        if valid_inputs:
            valid_loss, valid_accuracy = _batch_stats(matcher, valid_inputs, valid_labels, batch_size)
            selection = valid_accuracy
        else:
            valid_loss, valid_accuracy = float("nan"), float("nan")
            _, selection = _batch_stats(matcher, train_inputs, train_labels, batch_size)
        history.append(EpochStats(epoch, train_loss, train_accuracy, valid_loss, valid_accuracy))
        marker = ""
        if selection > best_accuracy:
            best_accuracy = selection
            best_epoch = epoch
            best_snapshot = matcher.params.snapshot()
            marker = " *"
        logger.info(f"epoch {epoch}: train loss {train_loss:.4f} acc {train_accuracy:.4f} | "
                    f"valid loss {valid_loss:.4f} acc {valid_accuracy:.4f}{marker}")

    matcher.params.load_snapshot(best_snapshot)
    provider.save()
    logger.info(f"Selected epoch {best_epoch} with selection accuracy {best_accuracy:.4f}")
    return TrainResult(matcher, train_config, history, best_epoch, best_accuracy)


def _load_matcher(matcher: Union[MultiChannelMatcher, str]) -> MultiChannelMatcher:
    return MultiChannelMatcher.load(matcher) if isinstance(matcher, str) else matcher


def predict_examples(matcher: Union[MultiChannelMatcher, str], examples: Sequence[MatchExample],
                     provider: AnchorProvider, batch_size: int = 64) -> List[MatchPrediction]:
    matcher = _load_matcher(matcher)
    encoded = encode_examples(examples, provider, matcher.vocab, matcher.spec.limits)
    predictions: List[MatchPrediction] = []
    for start in range(0, len(encoded), batch_size):
        predictions.extend(matcher.predict(encoded[start:start + batch_size]))
    return predictions


def _count_correct(matcher: MultiChannelMatcher, encoded, labels, batch_size: int) -> int:
    correct = 0
    for start in range(0, len(encoded), batch_size):
        predictions = matcher.predict(encoded[start:start + batch_size])
        correct += sum(p.label == y for p, y in zip(predictions, labels[start:start + batch_size]))
    return correct


def evaluate_accuracy(matcher: Union[MultiChannelMatcher, str], examples: Sequence[MatchExample],
                      provider: AnchorProvider, workers: Optional[int] = None, batch_size: int = 64) -> float:
    """
    Fraction of examples whose argmax label is correct.

    Examples are sharded across `workers` threads and the correct counts merged.

    Raises:
        MetricError: for an empty example set
    """
    if not examples:
        raise MetricError("cannot compute accuracy of an empty example set")
    matcher = _load_matcher(matcher)
    workers = workers or config.EVAL_WORKERS
    encoded = encode_examples(examples, provider, matcher.vocab, matcher.spec.limits)
    labels = [e.label for e in examples]
    shard = -(-len(encoded) // workers)
    counts = Parallel(n_jobs=workers, prefer="threads")(
        delayed(_count_correct)(matcher, encoded[i:i + shard], labels[i:i + shard], batch_size)
        for i in range(0, len(encoded), shard))
    return sum(counts) / len(encoded)


def accuracy_breakdown(matcher: Union[MultiChannelMatcher, str], examples: Sequence[MatchExample],
                       provider: AnchorProvider) -> Dict[str, Any]:
    """Accuracy overall and on queries with at least two triple candidates."""
    matcher = _load_matcher(matcher)
    overall = evaluate_accuracy(matcher, examples, provider)
    multi = [e for e in examples if len(_candidates_of(e.query, provider.kg)) >= 2]
    result = {"all": overall, "examples": len(examples), "multi_candidate_examples": len(multi),
              "multi_candidate": evaluate_accuracy(matcher, multi, provider) if multi else None}
    return result


def _candidates_of(text: str, kg: KnowledgeGraph) -> List[TripleCandidate]:
    tokens = tokenize(text)
    return generate_triple_candidates(extract_entities_fmm(tokens, kg, text=text), kg)


def evaluate_runs(train_config: TrainConfig, splits: DatasetSplits, kg: KnowledgeGraph,
                  ntd: Optional[NtdModel], runs: int, provider: Optional[AnchorProvider] = None) -> float:
    """Mean test accuracy over `runs` seeds starting at the config seed."""
    provider = provider or AnchorProvider(kg, ntd, train_config.threshold)
    accuracies = []
    for run in range(runs):
        run_config = replace(train_config, seed=train_config.seed + run)
        result = train_matcher(run_config, splits, kg, ntd, provider)
        accuracies.append(evaluate_accuracy(result.matcher, splits.test, provider))
        logger.info(f"run {run + 1}/{runs} (seed {run_config.seed}): test accuracy {accuracies[-1]:.4f}")
    return float(np.mean(accuracies))


# Reports

@dataclass
class ReportRow:
    name: str
    accuracy: float
    auc: Optional[float] = None


def format_report(rows: Sequence[ReportRow]) -> str:
    """TSV without header: name \\t accuracy [\\t auc], four decimals."""
    with_auc = any(r.auc is not None for r in rows)
    records = [[r.name, r.accuracy] + ([r.auc] if with_auc else []) for r in rows]
    return pd.DataFrame(records).to_csv(sep="\t", header=False, index=False, float_format="%.4f",
                                        lineterminator="\n")


def write_report(rows: Sequence[ReportRow], path: str) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(format_report(rows))


def channel_subset_name(channels: Sequence[str]) -> str:
    return "+".join(c for c in CHANNELS if c in channels)


def run_ablation(train_config: TrainConfig, splits: DatasetSplits, kg: KnowledgeGraph, ntd: Optional[NtdModel],
                 runs: int = 1, grid: Sequence[Tuple[str, ...]] = ABLATION_GRID,
                 provider: Optional[AnchorProvider] = None) -> List[ReportRow]:
    """
    Train and test one matcher per channel subset with the same seeds.

    Returns:
        One row per subset, named like "token+entity"
    """
    provider = provider or AnchorProvider(kg, ntd, train_config.threshold)
    rows = []
    for channels in grid:
        subset_config = replace(train_config, channels=tuple(channels),
                                name=f"{train_config.name}:{channel_subset_name(channels)}")
        accuracy = evaluate_runs(subset_config, splits, kg, ntd, runs, provider)
        rows.append(ReportRow(channel_subset_name(channels), accuracy))
        logger.info(f"ablation {channel_subset_name(channels)}: test accuracy {accuracy:.4f}")
    return rows


def compare_architectures(train_config: TrainConfig, splits: DatasetSplits, kg: KnowledgeGraph,
                          ntd: Optional[NtdModel], runs: int = 1,
                          architectures: Sequence[str] = ARCHITECTURES,
                          provider: Optional[AnchorProvider] = None) -> List[ReportRow]:
    """Token-only baseline versus all channels for each architecture."""
    provider = provider or AnchorProvider(kg, ntd, train_config.threshold)
    rows = []
    for architecture in architectures:
        for channels, suffix in ((("token",), ""), (CHANNELS, "+anchors")):
            run_config = replace(train_config, architecture=architecture, channels=tuple(channels),
                                 name=f"{architecture}{suffix}")
            rows.append(ReportRow(f"{architecture}{suffix}", evaluate_runs(run_config, splits, kg, ntd, runs,
                                                                           provider)))
    return rows


# Disambiguation

@dataclass
class DisambInstance:
    example: DisambExample
    tokens: list
    candidate: Optional[TripleCandidate]
    candidates: List[TripleCandidate]


def _surface_entity(kg: KnowledgeGraph, surface: str) -> Optional[int]:
    owner = resolve_alias(kg, surface)
    return None if owner is None else normalize_entity(kg, owner)


def locate_candidates(examples: Sequence[DisambExample], kg: KnowledgeGraph) -> List[DisambInstance]:
    """Find each example's candidate among the KR-filtered candidates of its query."""
    instances = []
    missing = 0
    for example in examples:
        tokens = tokenize(example.query)
        candidates = filter_knowledge_reasoning(
            generate_triple_candidates(extract_entities_fmm(tokens, kg, text=example.query), kg), kg)
        head = _surface_entity(kg, example.head_surface)
        tail = _surface_entity(kg, example.tail_surface)
        match = next((c for c in candidates if c.head.entity == head and c.tail.entity == tail
                      and c.relation is example.relation), None)
        if match is None:
            missing += 1
        instances.append(DisambInstance(example, tokens, match, candidates))
    if missing:
        logger.warning(f"{missing} of {len(examples)} disambiguation candidates could not be located")
    return instances


def select_complicated_queries(examples: Sequence[DisambExample], kg: KnowledgeGraph) -> List[DisambExample]:
    """Keep has_operation examples whose query yields at least two has_operation candidates."""
    kept = []
    for instance in locate_candidates(examples, kg):
        operations = [c for c in instance.candidates if c.relation is RelationKind.HAS_OPERATION]
        if instance.example.relation is RelationKind.HAS_OPERATION and len(operations) >= 2:
            kept.append(instance.example)
    logger.info(f"Selected {len(kept)} of {len(examples)} examples with at least two operation candidates")
    return kept


def train_ntd(examples: Sequence[DisambExample], ntd_config: NtdTrainConfig,
              kg: KnowledgeGraph) -> NtdModel:
    """
    Train the NTD model with logistic loss over averaged hashed features.

    A `valid_fraction` of the examples (seeded permutation) selects the
    epoch with the best valid accuracy; with 0 the last epoch is kept.

    Raises:
        DatasetError: if the located examples do not contain both classes
    """
    instances = [i for i in locate_candidates(examples, kg) if i.candidate is not None]
    labels = np.array([i.example.label for i in instances], dtype=np.float64)
    if len(set(labels.tolist())) < 2:
        raise DatasetError("NTD training needs both positive and negative examples")
    model = NtdModel.initialized(ntd_config.n_buckets, ntd_config.dim, ntd_config.seed)
    features = [ntd_features(i.candidate, i.tokens, i.candidates).feature_strings() for i in instances]
    ids, mask = model.encode_batch(features)

    rng = np.random.RandomState(ntd_config.seed)
    order = rng.permutation(len(instances))
    n_valid = int(len(instances) * ntd_config.valid_fraction)
    valid_idx, train_idx = order[:n_valid], order[n_valid:]
    params = model.to_parameters()
    best_snapshot = params.snapshot()
    best_accuracy = -1.0

    for epoch in range(1, ntd_config.epochs + 1):
        epoch_order = rng.permutation(train_idx)
        total = 0.0
        for start in range(0, len(epoch_order), ntd_config.batch_size):
            idx = epoch_order[start:start + ntd_config.batch_size]
            reset_tape()
            params.zero_grad()
            z = batch_logits(params, ids[idx], mask[idx])
            batch_loss = mean(sub(softplus(z), mul(z, labels[idx])))
            if not np.isfinite(batch_loss.item()):
                raise TrainingDivergedError(f"NTD loss became {batch_loss.item()} at epoch {epoch}")
            backward(batch_loss)
            adam_step(params, lr=ntd_config.learning_rate)
            total += batch_loss.item() * len(idx)
        if n_valid:
            with no_grad():
                valid_z = batch_logits(params, ids[valid_idx], mask[valid_idx]).data
            accuracy = float(np.mean((valid_z > 0) == (labels[valid_idx] > 0.5)))
            if accuracy > best_accuracy:
                best_accuracy = accuracy
                best_snapshot = params.snapshot()
            logger.info(f"NTD epoch {epoch}: train loss {total / len(train_idx):.4f}, valid acc {accuracy:.4f}")
        else:
            logger.info(f"NTD epoch {epoch}: train loss {total / len(train_idx):.4f}")
    if n_valid:
        params.load_snapshot(best_snapshot)
    return NtdModel.from_parameters(params)


def auc_score(labels: Sequence[int], scores: Sequence[float]) -> float:
    """
    Rank-statistic AUC with ties counted 0.5.

    Raises:
        MetricError: if there are no positives or no negatives
    """
    labels = np.asarray(labels)
    if labels.size == 0 or labels.min() == labels.max():
        raise MetricError("AUC is undefined without both positive and negative examples")
    return float(roc_auc_score(labels, np.asarray(scores, dtype=np.float64)))


def disambiguation_scores(instances: Sequence[DisambInstance], mode: str, kg: KnowledgeGraph,
                          ntd: Optional[NtdModel] = None,
                          scorer: Optional[RuleBasedScorer] = None) -> np.ndarray:
    """Score every located candidate with one of the RB / RB+KR / RB+KR+NTD configurations."""
    if mode not in SCORER_MODES:
        raise ValueError(f"scorer must be one of {', '.join(SCORER_MODES)}, got {mode!r}")
    if mode == "rb_kr_ntd" and ntd is None:
        raise ValueError("the rb_kr_ntd scorer needs an NTD model")
    scorer = scorer or get_rule_scorer()
    scores = []
    for instance in instances:
        cand = instance.candidate
        if cand is None:
            scores.append(0.0)
            continue
        rb = scorer.score(cand, instance.tokens)
        if mode == "rb":
            scores.append(rb)
        elif mode == "rb_kr":
            scores.append(rb if cand.kr_pass else 0.0)
        else:
            ntd_score = score_neural(ntd_features(cand, instance.tokens, instance.candidates), ntd)
            scores.append(combine_scores(rb, ntd_score, cand.kr_pass))
    return np.array(scores)


@dataclass
class DisambReport:
    accuracy: float
    auc: float
    examples: int


def evaluate_disambiguation(scorer: Union[str, Callable[[DisambInstance], float]],
                            examples: Sequence[DisambExample], kg: KnowledgeGraph,
                            ntd: Optional[NtdModel] = None) -> DisambReport:
    """
    Accuracy at threshold 0.5 and AUC of a disambiguation scorer.

    Args:
        scorer: "rb", "rb_kr", "rb_kr_ntd" or a callable over located instances
        examples: Labeled candidates
        kg: Knowledge graph
        ntd: NTD model, required by "rb_kr_ntd"

    Raises:
        MetricError: if AUC is undefined
    """
    if not examples:
        raise MetricError("cannot evaluate an empty disambiguation set")
    instances = locate_candidates(examples, kg)
    if callable(scorer):
        scores = np.array([0.0 if i.candidate is None else scorer(i) for i in instances])
    else:
        scores = disambiguation_scores(instances, scorer, kg, ntd)
    labels = np.array([e.label for e in examples])
    auc = auc_score(labels, scores)
    accuracy = float(accuracy_score(labels, (scores >= 0.5).astype(int)))
    return DisambReport(accuracy, auc, len(examples))


def disambiguation_report(examples: Sequence[DisambExample], kg: KnowledgeGraph,
                          ntd: Optional[NtdModel]) -> List[ReportRow]:
    """One report row per scorer configuration available."""
    modes = SCORER_MODES if ntd is not None else SCORER_MODES[:2]
    names = {"rb": "RB", "rb_kr": "RB+KR", "rb_kr_ntd": "RB+KR+NTD"}
    rows = []
    for mode in modes:
        result = evaluate_disambiguation(mode, examples, kg, ntd)
        rows.append(ReportRow(names[mode], result.accuracy, result.auc))
    return rows
