"""
Query anchoring: turn a query or title into knowledge anchors.

Pipeline: tokenize, forward maximum matching against the KG alias index,
triple candidate generation, knowledge-reasoning filter, rule-based and
neural disambiguation scores, weighted ensemble, threshold.
"""
import dataclasses
import logging
import re
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Set, Tuple, TYPE_CHECKING

from src import config
from src.kg_store import (KnowledgeGraph, RelationKind, alias_key, component_ancestors,
                          normalize_entity)
from src.rule_scorer import RuleBasedScorer, get_rule_scorer

if TYPE_CHECKING:
    from src.ntd_model import NtdModel

logger = logging.getLogger(__name__)

TOKEN_RE = re.compile(r"\w+")

# Relations that can become triple candidates; synonym and hypernym edges only normalize
CANDIDATE_RELATIONS = (RelationKind.HAS_OPERATION, RelationKind.COMPONENT_OF)


@dataclass(frozen=True)
class TokenSpan:
    text: str
    start: int
    end: int


@dataclass(frozen=True)
class EntityMention:
    """
    An entity located in a text.

    `entity` is the normalized id; `alias_entity` is the id that owns the
    matched alias before normalization.
    """

    entity: int
    surface: str
    start: int
    end: int
    token_start: int
    token_end: int
    alias_entity: int

    @property
    def span(self) -> Tuple[int, int]:
        return (self.start, self.end)


@dataclass
class TripleCandidate:
    head: EntityMention
    relation: RelationKind
    tail: EntityMention
    rb_score: float = 0.0
    ntd_score: float = 0.0
    kr_pass: bool = True
    final_score: float = 0.0

    @property
    def key(self) -> Tuple[int, str, int]:
        return (self.head.entity, self.relation.value, self.tail.entity)

    @property
    def position(self) -> Tuple[int, int]:
        return (self.head.start, self.tail.start)

    def shares_entity(self, other: "TripleCandidate") -> bool:
        return bool({self.head.entity, self.tail.entity} & {other.head.entity, other.tail.entity})


@dataclass
class NtdFeatureBag:
    """Features describing one target triple in its sentence."""

    token_features: List[str]
    target_triple: Tuple[int, str, int]
    position_features: List[Tuple[str, str]]
    conflict_entities: List[Tuple[int, int]]
    conflict_triples: List[Tuple[int, str, int]]

    def feature_strings(self) -> List[str]:
        """Flatten the bag into the string features the model hashes."""
        h, r, t = self.target_triple
        features = [f"tt:{h}|{r}|{t}"]
        for tok, (head_bucket, tail_bucket) in zip(self.token_features, self.position_features):
            features.append(f"w:{tok}")
            features.append(f"ph:{head_bucket}:{tok}")
            features.append(f"pt:{tail_bucket}:{tok}")
        features.extend(f"ce:{a}|{b}" for a, b in self.conflict_entities)
        features.extend(f"ct:{a}|{r2}|{b}" for a, r2, b in self.conflict_triples)
        return features


@dataclass
class AnchorSet:
    """Position-ordered entity mentions and accepted triples for one text."""

    entities: List[EntityMention] = field(default_factory=list)
    triples: List[TripleCandidate] = field(default_factory=list)
    candidates: List[TripleCandidate] = field(default_factory=list)

    def operation_triples(self) -> List[TripleCandidate]:
        return [t for t in self.triples if t.relation is RelationKind.HAS_OPERATION]

    def entity_ids(self) -> List[int]:
        return [m.entity for m in self.entities]

    def to_dict(self, explain: bool = False, kg: Optional[KnowledgeGraph] = None) -> Dict[str, Any]:
        """
        Serialize to the anchor JSON format.

        Args:
            explain: Add every candidate with its rb/ntd/kr breakdown
            kg: When given, explanations carry canonical entity names
        """
        data: Dict[str, Any] = {
            "entities": [{"id": m.entity, "surface": m.surface, "start": m.start, "end": m.end}
                         for m in self.entities],
            "triples": [{"head": t.head.entity, "relation": t.relation.value,
                         "tail": t.tail.entity, "score": round(t.final_score, 6)}
                        for t in self.triples],
        }
        if explain:
            accepted = {id(t) for t in self.triples}
            rows = []
            for cand in self.candidates:
                row = {
                    "head": cand.head.entity,
                    "relation": cand.relation.value,
                    "tail": cand.tail.entity,
                    "head_surface": cand.head.surface,
                    "tail_surface": cand.tail.surface,
                    "rb": round(cand.rb_score, 6),
                    "ntd": round(cand.ntd_score, 6),
                    "kr_pass": cand.kr_pass,
                    "final": round(cand.final_score, 6),
                    "accepted": id(cand) in accepted,
                }
                if kg is not None:
                    row["triple"] = f"({kg.name(cand.head.entity)}, {cand.relation.value}, {kg.name(cand.tail.entity)})"
                rows.append(row)
            data["candidates"] = rows
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any], text: str) -> "AnchorSet":
        """
        Rebuild an AnchorSet from anchor JSON (used by the anchor cache).

        Token offsets are recomputed from `text`.
        """
        tokens = tokenize(text)
        starts = {t.start: i for i, t in enumerate(tokens)}
        ends = {t.end: i + 1 for i, t in enumerate(tokens)}
        entities = []
        for e in data.get("entities", []):
            mention = EntityMention(entity=e["id"], surface=e["surface"], start=e["start"], end=e["end"],
                                    token_start=starts.get(e["start"], 0), token_end=ends.get(e["end"], 0),
                                    alias_entity=e["id"])
            entities.append(mention)
        triples = []
        for t in data.get("triples", []):
            head = _find_mention(entities, t["head"])
            tail = _find_mention(entities, t["tail"], exclude=head)
            if head is None or tail is None:
                continue
            triples.append(TripleCandidate(head=head, relation=RelationKind.parse(t["relation"]), tail=tail,
                                           final_score=t.get("score", 0.0)))
        return cls(entities=entities, triples=triples)


def _find_mention(mentions: List[EntityMention], entity_id: int,
                  exclude: Optional[EntityMention] = None) -> Optional[EntityMention]:
    for m in mentions:
        if m.entity == entity_id and m is not exclude:
            return m
    return None


def tokenize(text: str, mode: Optional[str] = None) -> List[TokenSpan]:
    """
    Split text into tokens with character offsets.

    Args:
        text: Raw text
        mode: "whitespace" splits on whitespace and punctuation; "char" emits
            one token per non-space character. Defaults to the configured mode.

    Returns:
        Sorted, non-overlapping token spans
    """
    mode = mode or config.TOKENIZE_MODE
    if mode == "whitespace":
        return [TokenSpan(m.group(0), m.start(), m.end()) for m in TOKEN_RE.finditer(text)]
    if mode == "char":
        return [TokenSpan(ch, i, i + 1) for i, ch in enumerate(text) if not ch.isspace()]
    raise ValueError(f"unknown tokenize mode {mode!r}")


def extract_entities_fmm(tokens: List[TokenSpan], kg: KnowledgeGraph, mode: Optional[str] = None,
                         text: Optional[str] = None) -> List[EntityMention]:
    """
    Forward maximum matching over the alias index.

    At each position the longest token span whose joined surface is an
    alias wins; its tokens are consumed. Unmatched tokens are skipped.

    Args:
        tokens: Sorted tokens
        kg: Graph providing aliases
        mode: Tokenizer mode, decides how tokens are joined into a surface
        text: Original text; when given, mention surfaces are the covered text

    Returns:
        Mentions sorted by start offset, entities normalized
    """
    joiner = "" if (mode or config.TOKENIZE_MODE) == "char" else " "
    mentions = []
    i = 0
    n = len(tokens)
    while i < n:
        best: Optional[Tuple[int, int]] = None
        surface = ""
        for j in range(i, n):
            surface = tokens[j].text if j == i else surface + joiner + tokens[j].text
            key = alias_key(surface)
            if len(key) > kg.max_alias_length:
                break
            owner = kg.alias_index.get(key)
            if owner is not None:
                best = (j, owner)
        if best is None:
            i += 1
            continue
        j, owner = best
        start, end = tokens[i].start, tokens[j].end
        covered = text[start:end] if text is not None else joiner.join(t.text for t in tokens[i:j + 1])
        mentions.append(EntityMention(entity=normalize_entity(kg, owner), surface=covered, start=start,
                                      end=end, token_start=i, token_end=j + 1, alias_entity=owner))
        i = j + 1
    return mentions


def generate_triple_candidates(mentions: List[EntityMention], kg: KnowledgeGraph) -> List[TripleCandidate]:
    """
    Emit a candidate for every ordered mention pair whose normalized triple is in the KG.

    Returns:
        Candidates ordered by (head start, tail start, relation)
    """
    candidates = []
    for head in mentions:
        for tail in mentions:
            if head is tail or head.span == tail.span:
                continue
            for relation in CANDIDATE_RELATIONS:
                if (head.entity, relation.value, tail.entity) in kg.normalized_triples:
                    candidates.append(TripleCandidate(head=head, relation=relation, tail=tail))
    candidates.sort(key=lambda c: (c.head.start, c.tail.start, CANDIDATE_RELATIONS.index(c.relation)))
    return candidates


def score_rule_based(cand: TripleCandidate, tokens: List[TokenSpan], kg: KnowledgeGraph,
                     scorer: Optional[RuleBasedScorer] = None) -> float:
    """Rule-based score of a candidate in [0, 1]."""
    scorer = scorer or _default_scorer()
    return scorer.score(cand, tokens)


_scorer_instance: Optional[RuleBasedScorer] = None


def _default_scorer() -> RuleBasedScorer:
    global _scorer_instance
    if _scorer_instance is None:
        _scorer_instance = get_rule_scorer()
    return _scorer_instance


def normalized_ancestors(kg: KnowledgeGraph, entity_id: int) -> Set[int]:
    """component_of ancestors of a synonym closure, normalized."""
    rep = normalize_entity(kg, entity_id)
    ancestors: Set[int] = set()
    for member in kg.synonym_members.get(rep, (rep,)):
        ancestors.update(kg.synonym_rep[a] for a in component_ancestors(kg, member))
    ancestors.discard(rep)
    return ancestors


def filter_knowledge_reasoning(cands: List[TripleCandidate], kg: KnowledgeGraph) -> List[TripleCandidate]:
    """
    Prefer the most specific component as the head of a shared-tail relation.

    For two candidates with the same relation and the same tail mention, the
    one whose head is a component_of ancestor of the other's head fails.
    Candidates are copied; the count never changes.
    """
    result = [dataclasses.replace(c) for c in cands]
    ancestors: Dict[int, Set[int]] = {}
    for x in result:
        if x.head.entity not in ancestors:
            ancestors[x.head.entity] = normalized_ancestors(kg, x.head.entity)
    for x in result:
        for y in result:
            if x is y or x.relation is not y.relation or x.tail.span != y.tail.span:
                continue
            if x.head.span == y.head.span:
                continue
            if y.head.entity in ancestors[x.head.entity]:
                if y.kr_pass:
                    logger.debug(f"KR filter demotes {y.key} in favour of {x.key}")
                y.kr_pass = False
    return result


def position_bucket(distance: int) -> str:
    """Signed log-style bucket: 0, ±1, ±2, ±3-5, ±6+."""
    if distance == 0:
        return "0"
    sign = "+" if distance > 0 else "-"
    size = abs(distance)
    if size <= 2:
        return f"{sign}{size}"
    if size <= 5:
        return f"{sign}3-5"
    return f"{sign}6+"


def _signed_distance(index: int, mention: EntityMention) -> int:
    if mention.token_start <= index < mention.token_end:
        return 0
    if index < mention.token_start:
        return index - mention.token_start
    return index - mention.token_end + 1


def ntd_features(cand: TripleCandidate, tokens: List[TokenSpan],
                 all_cands: List[TripleCandidate]) -> NtdFeatureBag:
    """
    Build the neural disambiguation features of a target candidate.

    Conflict entity pairs come from other candidates with the same relation
    and the same tail entity; conflict triples are all other candidates that
    share an entity with the target.
    """
    words = [t.text.casefold() for t in tokens]
    positions = [(position_bucket(_signed_distance(i, cand.head)), position_bucket(_signed_distance(i, cand.tail)))
                 for i in range(len(tokens))]
    conflict_entities = []
    conflict_triples = []
    for other in all_cands:
        if other is cand or other.key == cand.key and other.position == cand.position:
            continue
        if (other.relation is cand.relation and other.tail.entity == cand.tail.entity
                and other.head.entity != cand.head.entity):
            conflict_entities.append((other.head.entity, cand.head.entity))
        if other.shares_entity(cand):
            conflict_triples.append(other.key)
    return NtdFeatureBag(token_features=words, target_triple=cand.key, position_features=positions,
                         conflict_entities=conflict_entities, conflict_triples=conflict_triples)


def score_neural(bag: NtdFeatureBag, model: "NtdModel") -> float:
    """Confidence of the neural disambiguator for a feature bag."""
    return model.score(bag.feature_strings())


def combine_scores(rb_score: float, ntd_score: float, kr_pass: bool,
                   rb_weight: Optional[float] = None, ntd_weight: Optional[float] = None) -> float:
    """Weighted ensemble gated by the knowledge-reasoning filter."""
    if not kr_pass:
        return 0.0
    rb_weight = config.RB_WEIGHT if rb_weight is None else rb_weight
    ntd_weight = config.NTD_WEIGHT if ntd_weight is None else ntd_weight
    return rb_weight * rb_score + ntd_weight * ntd_score


def score_candidates(text: str, kg: KnowledgeGraph, ntd: Optional["NtdModel"] = None,
                     scorer: Optional[RuleBasedScorer] = None, mode: Optional[str] = None,
                     rb_weight: Optional[float] = None,
                     ntd_weight: Optional[float] = None) -> Tuple[List[TokenSpan], List[EntityMention], List[TripleCandidate]]:
    """
    Run the anchoring pipeline up to scoring, without thresholding.

    When no NTD model is available the NTD score falls back to the RB score.
    """
    tokens = tokenize(text, mode)
    mentions = extract_entities_fmm(tokens, kg, mode, text)
    candidates = filter_knowledge_reasoning(generate_triple_candidates(mentions, kg), kg)
    for cand in candidates:
        cand.rb_score = score_rule_based(cand, tokens, kg, scorer)
        if ntd is not None:
            cand.ntd_score = score_neural(ntd_features(cand, tokens, candidates), ntd)
        else:
            cand.ntd_score = cand.rb_score
        cand.final_score = combine_scores(cand.rb_score, cand.ntd_score, cand.kr_pass, rb_weight, ntd_weight)
    return tokens, mentions, candidates


def anchor(text: str, kg: KnowledgeGraph, ntd: Optional["NtdModel"] = None,
           threshold: Optional[float] = None, scorer: Optional[RuleBasedScorer] = None,
           mode: Optional[str] = None, rb_weight: Optional[float] = None,
           ntd_weight: Optional[float] = None) -> AnchorSet:
    """
    Extract the knowledge anchors of a text.

    Args:
        text: Query or title
        kg: Knowledge graph
        ntd: Trained neural disambiguator; None falls back to RB + KR
        threshold: Acceptance threshold on the final score, default 0.5
        scorer: Rule-based scorer, defaults to the configured weights
        mode: Tokenizer mode
        rb_weight: Ensemble weight of the RB score
        ntd_weight: Ensemble weight of the NTD score

    Returns:
        AnchorSet with position-ordered entities and accepted triples
    """
    threshold = config.ANCHOR_THRESHOLD if threshold is None else threshold
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    _, mentions, candidates = score_candidates(text, kg, ntd, scorer, mode, rb_weight, ntd_weight)
    accepted = [c for c in candidates if c.kr_pass and c.final_score >= threshold]
    accepted.sort(key=lambda c: c.position)
    return AnchorSet(entities=sorted(mentions, key=lambda m: m.start), triples=accepted,
                     candidates=candidates)


def anchor_coverage(anchor_sets: Iterable[AnchorSet]) -> Dict[str, Any]:
    """
    Coverage statistics over a collection of anchored texts.

    Returns:
        Counts and shares of texts with at least one entity / accepted triple,
        plus the number of distinct entities and triples seen
    """
    total = with_entity = with_triple = 0
    entities: Set[int] = set()
    triples: Set[Tuple[int, str, int]] = set()
    for anchors in anchor_sets:
        total += 1
        if anchors.entities:
            with_entity += 1
        if anchors.triples:
            with_triple += 1
        entities.update(anchors.entity_ids())
        triples.update(t.key for t in anchors.triples)
    return {
        "texts": total,
        "with_entity": with_entity,
        "with_triple": with_triple,
        "entity_coverage": with_entity / total if total else 0.0,
        "triple_coverage": with_triple / total if total else 0.0,
        "distinct_entities": len(entities),
        "distinct_triples": len(triples),
    }
