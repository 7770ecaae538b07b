"""
FAQ retrieval service.

Coordinates the components needed to answer a user query from an FAQ index:
1. Loads the knowledge graph, NTD model and matcher checkpoint
2. Anchors every indexed title once
3. Anchors incoming queries and ranks titles by P(similar), ties by P(related)
4. Explains each hit with the anchors it shares with the query
"""
import logging
import sys
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, TextIO, Tuple

from src import config
from src.anchoring import AnchorSet
from src.kg_store import KnowledgeGraph, generalizations, load_kg
from src.matchers import LABELS, MatchPrediction, MultiChannelMatcher, encode_text
from src.ntd_model import NtdModel, load_ntd_model
from src.train_eval import AnchorProvider, load_faq_index

logger = logging.getLogger(__name__)


@dataclass
class RankedTitle:
    title: str
    answer_id: str
    prediction: MatchPrediction
    shared_entities: List[str] = field(default_factory=list)
    shared_triples: List[str] = field(default_factory=list)
    shared_generalizations: List[str] = field(default_factory=list)

    def as_dict(self) -> Dict[str, Any]:
        return {
            "title": self.title,
            "answer_id": self.answer_id,
            "label": self.prediction.label,
            "probabilities": self.prediction.as_dict(),
            "shared_entities": self.shared_entities,
            "shared_triples": self.shared_triples,
            "shared_generalizations": self.shared_generalizations,
        }


class FaqRanker:
    """
    Ranks indexed FAQ titles against a query with a trained matcher.
    """

    def __init__(self, kg: KnowledgeGraph, matcher: MultiChannelMatcher, titles: Sequence[Tuple[str, str]],
                 ntd: Optional[NtdModel] = None, threshold: Optional[float] = None):
        """
        Initialize the ranker and anchor every title.

        Args:
            kg: Knowledge graph used for anchoring
            matcher: Trained matcher
            titles: (title, answer id) pairs of the FAQ index
            ntd: NTD model; None falls back to RB+KR anchoring
            threshold: Anchor acceptance threshold
        """
        self.kg = kg
        self.matcher = matcher
        self.titles = list(titles)
        self.provider = AnchorProvider(kg, ntd, threshold)
        self.limits = matcher.spec.limits
        self._encoded_titles = [encode_text(t, self.provider.get(t), matcher.vocab, self.limits)
                                for t, _ in self.titles]
        logger.info(f"FAQ ranker ready with {len(self.titles)} titles")

    def _explain(self, query_anchors: AnchorSet, title_anchors: AnchorSet) -> Dict[str, List[str]]:
        query_entities = set(query_anchors.entity_ids())
        title_entities = set(title_anchors.entity_ids())
        shared = sorted(query_entities & title_entities)
        triples = sorted({t.key for t in query_anchors.operation_triples()}
                         & {t.key for t in title_anchors.operation_triples()})
        generalized = set()
        for q in query_entities - title_entities:
            for d in title_entities - query_entities:
                generalized |= generalizations(self.kg, q) & generalizations(self.kg, d)
        return {
            "shared_entities": [self.kg.name(e) for e in shared],
            "shared_triples": [f"({self.kg.name(h)}, {r}, {self.kg.name(t)})" for h, r, t in triples],
            "shared_generalizations": [self.kg.name(e) for e in sorted(generalized)],
        }

    def rank(self, query: str, k: Optional[int] = None) -> List[RankedTitle]:
        """
        Rank indexed titles for a query.

        Args:
            query: User query
            k: Number of titles to return; all titles when k exceeds the index

        Returns:
            Titles sorted by P(similar) then P(related), best first
        """
        k = config.REPL_TOP_K if k is None else k
        if not query.strip() or not self.titles:
            return []
        query_anchors = self.provider.get(query)
        encoded_query = encode_text(query, query_anchors, self.matcher.vocab, self.limits)
        predictions = self.matcher.predict([(encoded_query, d) for d in self._encoded_titles])
        order = sorted(range(len(self.titles)),
                       key=lambda i: (-predictions[i].s[2], -predictions[i].s[1], i))
        ranked = []
        for i in order[:max(k, 0)]:
            title, answer_id = self.titles[i]
            ranked.append(RankedTitle(title, answer_id, predictions[i],
                                      **self._explain(query_anchors, self.provider.get(title))))
        return ranked


def get_faq_ranker(kg_paths: Optional[Tuple[str, str]] = None, checkpoint_path: Optional[str] = None,
                   index_path: Optional[str] = None, ntd_path: Optional[str] = None,
                   threshold: Optional[float] = None) -> FaqRanker:
    """Load every artifact from the configured (or given) paths and build a ranker."""
    entities_path, triples_path = kg_paths or (config.KG_ENTITIES_PATH, config.KG_TRIPLES_PATH)
    kg = load_kg(entities_path, triples_path)
    matcher = MultiChannelMatcher.load(checkpoint_path or config.MATCHER_CHECKPOINT_PATH)
    titles = load_faq_index(index_path or config.FAQ_INDEX_PATH)
    return FaqRanker(kg, matcher, titles, load_ntd_model(ntd_path), threshold)


def format_hit(rank: int, hit: RankedTitle) -> str:
    probs = " ".join(f"{name}={p:.3f}" for name, p in zip(LABELS, hit.prediction.s))
    line = f"{rank}. [{hit.prediction.label}] {hit.title} ({hit.answer_id}) {probs}"
    anchors = hit.shared_triples + hit.shared_entities
    if anchors:
        line += f"\n   anchors: {', '.join(anchors)}"
    if hit.shared_generalizations:
        line += f"\n   via: {', '.join(hit.shared_generalizations)}"
    return line


def run_repl(ranker: FaqRanker, k: Optional[int] = None, stdin: TextIO = sys.stdin,
             stdout: TextIO = sys.stdout, prompt: str = "query> ") -> int:
    """
    Read queries line by line and print the top-k titles for each.

    Errors on a single query are reported and the loop continues.

    Returns:
        Number of queries answered
    """
    answered = 0
    while True:
        stdout.write(prompt)
        stdout.flush()
        line = stdin.readline()
        if not line:
            stdout.write("\n")
            return answered
        query = line.strip()
        if not query:
            continue
        try:
            hits = ranker.rank(query, k)
        except Exception as e:
            logger.debug("query failed", exc_info=True)
            stdout.write(f"error: {e}\n")
            continue
        for rank, hit in enumerate(hits, start=1):
            stdout.write(format_hit(rank, hit) + "\n")
        answered += 1
