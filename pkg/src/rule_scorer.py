"""
Rule-based triple scorer.

Scores a triple candidate with a logistic model over a small fixed set of
syntactic and lexical features. The weights are data: they are read from a
JSON file so a domain can be retuned without touching code.
"""
import json
import logging
import os
from typing import Dict, List, Optional, TYPE_CHECKING

import numpy as np

from src import config

if TYPE_CHECKING:
    from src.anchoring import TokenSpan, TripleCandidate

logger = logging.getLogger(__name__)

FEATURE_NAMES = (
    "bias",
    "distance_le2",
    "distance_le5",
    "distance_gt5",
    "relation_has_operation",
    "relation_component_of",
    "head_precedes_tail",
    "negation_adjacent_tail",
    "mention_length_sum",
)

DEFAULT_RB_WEIGHTS = {
    "bias": -0.2,
    "distance_le2": 1.2,
    "distance_le5": 0.2,
    "distance_gt5": -1.5,
    "relation_has_operation": 0.0,
    "relation_component_of": 0.6,
    "head_precedes_tail": -0.6,
    "negation_adjacent_tail": -0.8,
    "mention_length_sum": 0.1,
}

NEGATION_WORDS = frozenset({
    "not", "no", "never", "cannot", "can't", "cant", "don't", "dont",
    "doesn't", "didn't", "won't", "unable", "without", "neither", "nor",
})


class RuleWeightsError(ValueError):
    """Raised when a weights file names features the scorer does not know."""


class RuleWeightsLoader:
    """Loads RB weights from a JSON file, falling back to the shipped defaults."""

    def __init__(self, path: Optional[str] = None):
        self.path = path or config.RB_WEIGHTS_PATH

    def load_weights(self) -> Dict[str, float]:
        """
        Load weights from the best available source.

        Returns:
            Dictionary with one weight per feature name

        Raises:
            RuleWeightsError: if the file contains unknown or non-numeric weights
        """
        if not os.path.exists(self.path):
            logger.warning(f"RB weights file {self.path} not found, using default weights")
            return dict(DEFAULT_RB_WEIGHTS)

        with open(self.path, "r", encoding="utf-8") as f:
            data = json.load(f)
        weights = data.get("weights", data) if isinstance(data, dict) else None
        if not isinstance(weights, dict):
            raise RuleWeightsError(f"{self.path}: expected a JSON object of feature weights")

        unknown = sorted(set(weights) - set(FEATURE_NAMES))
        if unknown:
            raise RuleWeightsError(f"{self.path}: unknown RB features {', '.join(unknown)}")
        merged = dict(DEFAULT_RB_WEIGHTS)
        for name, value in weights.items():
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise RuleWeightsError(f"{self.path}: weight for {name!r} must be a number")
            merged[name] = float(value)
        logger.info(f"Loaded {len(weights)} RB weights from {self.path}")
        return merged


def token_distance(cand: "TripleCandidate") -> int:
    """Tokens from the end of the earlier mention to the start of the later one, 1 when adjacent."""
    first, second = sorted((cand.head, cand.tail), key=lambda m: m.token_start)
    return max(second.token_start - first.token_end, 0) + 1


class RuleBasedScorer:
    """
    Logistic scorer over hand-designed candidate features.
    """

    def __init__(self, weights: Optional[Dict[str, float]] = None):
        """
        Initialize the scorer.

        Args:
            weights: Feature weights; missing features get weight 0
        """
        self.weights = {name: 0.0 for name in FEATURE_NAMES}
        self.weights.update(weights if weights is not None else DEFAULT_RB_WEIGHTS)
        self._vector = np.array([self.weights[name] for name in FEATURE_NAMES], dtype=np.float64)

    def features(self, cand: "TripleCandidate", tokens: List["TokenSpan"]) -> Dict[str, float]:
        distance = token_distance(cand)
        before = cand.tail.token_start - 1
        after = cand.tail.token_end
        neighbours = [tokens[i].text.casefold() for i in (before, after) if 0 <= i < len(tokens)]
        return {
            "bias": 1.0,
            "distance_le2": float(distance <= 2),
            "distance_le5": float(2 < distance <= 5),
            "distance_gt5": float(distance > 5),
            "relation_has_operation": float(cand.relation.value == "has_operation"),
            "relation_component_of": float(cand.relation.value == "component_of"),
            "head_precedes_tail": float(cand.head.token_start < cand.tail.token_start),
            "negation_adjacent_tail": float(any(w in NEGATION_WORDS for w in neighbours)),
            "mention_length_sum": float((cand.head.token_end - cand.head.token_start)
                                        + (cand.tail.token_end - cand.tail.token_start)),
        }

    def score(self, cand: "TripleCandidate", tokens: List["TokenSpan"]) -> float:
        """
        Score a candidate in [0, 1].

        Args:
            cand: Triple candidate with located head and tail mentions
            tokens: Tokens of the text the candidate came from

        Returns:
            logistic(w . features)
        """
        values = self.features(cand, tokens)
        z = float(self._vector @ np.array([values[name] for name in FEATURE_NAMES]))
        return float(0.5 * (1.0 + np.tanh(0.5 * z)))


def get_rule_scorer(path: Optional[str] = None) -> RuleBasedScorer:
    """Create a RuleBasedScorer with weights from `path` (or the configured file)."""
    return RuleBasedScorer(RuleWeightsLoader(path).load_weights())
