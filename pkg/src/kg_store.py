"""
Knowledge graph store for the FAQ anchoring pipeline.

Loads entities and typed triples from JSONL files, validates them, and keeps
the indexes anchoring needs: the case-folded alias index, synonym
representatives, the component_of hierarchy and the normalized triple set.
"""
import json
import logging
import re
from collections import Counter, deque
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, FrozenSet, Iterable, List, Optional, Set, Tuple

logger = logging.getLogger(__name__)

ENTITY_FIELDS = {"id", "name", "aliases", "type"}
TRIPLE_FIELDS = {"head", "relation", "tail", "confidence"}

# Slot shorthands accepted in bootstrap patterns, mapped to entity types
SLOT_TYPES = {
    "OP": "operation",
    "OBJ": "object",
    "APP": "app",
    "ANY": None,
    "ENT": None,
}


class KGLoadError(ValueError):
    """Raised when knowledge graph input is malformed or inconsistent."""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        self.reason = message
        location = ""
        if path is not None:
            location = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(f"{location}{message}")


class UnknownEntityError(KeyError):
    """Raised when an entity id is not part of the graph."""

    def __init__(self, entity_id: Any):
        self.entity_id = entity_id
        super().__init__(f"unknown entity {entity_id}")

    def __str__(self) -> str:
        return self.args[0]


class RelationKind(str, Enum):
    """The closed set of relations the graph stores."""

    HAS_OPERATION = "has_operation"
    COMPONENT_OF = "component_of"
    SYNONYM = "synonym"
    HYPERNYM_HYPONYM = "hypernym_hyponym"

    @classmethod
    def parse(cls, value: str) -> "RelationKind":
        try:
            return cls(value)
        except ValueError:
            raise ValueError(f"invalid relation {value!r}") from None

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class Entity:
    """A KG entity with every surface form it can be mentioned by."""

    id: int
    canonical_name: str
    aliases: Tuple[str, ...]
    entity_type: str = ""


@dataclass(frozen=True)
class Triple:
    """A typed fact (head, relation, tail)."""

    head: int
    relation: RelationKind
    tail: int
    confidence: float = 1.0

    @property
    def key(self) -> Tuple[int, str, int]:
        return (self.head, self.relation.value, self.tail)


@dataclass(frozen=True)
class Pattern:
    """
    Two-slot extraction template over entity mentions.

    `left_type`/`right_type` restrict the slot to an entity type (None means
    any entity). The infix is either a literal token sequence or a wildcard
    gap of up to `max_gap` tokens. `head` says which slot becomes the head of
    the emitted triple.
    """

    left_type: Optional[str]
    infix: Tuple[str, ...]
    wildcard: bool
    right_type: Optional[str]
    relation: RelationKind
    head: str = "left"
    max_gap: int = 3

    @classmethod
    def parse(cls, template: str, relation: str, head: str = "left", max_gap: int = 3) -> "Pattern":
        """
        Parse a template such as "<OP> * <OBJ>" or "<OBJ> of <APP>".

        Raises:
            ValueError: if the template does not have exactly two slots
                around a single infix
        """
        match = re.fullmatch(r"\s*<(\w+)>(.*?)<(\w+)>\s*", template)
        if not match:
            raise ValueError(f"pattern must look like '<SLOT> infix <SLOT>': {template!r}")
        if head not in ("left", "right"):
            raise ValueError(f"pattern head must be 'left' or 'right', got {head!r}")
        infix_text = match.group(2).strip()
        wildcard = infix_text == "*"
        infix = () if wildcard else tuple(tok.casefold() for tok in infix_text.split())
        return cls(
            left_type=_slot_type(match.group(1)),
            infix=infix,
            wildcard=wildcard,
            right_type=_slot_type(match.group(3)),
            relation=RelationKind.parse(relation),
            head=head,
            max_gap=int(max_gap),
        )


@dataclass(frozen=True)
class BootstrapResult:
    """A bootstrapped triple with the number of corpus matches supporting it."""

    triple: Triple
    count: int


def _slot_type(slot: str) -> Optional[str]:
    upper = slot.upper()
    if upper in SLOT_TYPES:
        return SLOT_TYPES[upper]
    return slot.lower()


def alias_key(surface: str) -> str:
    """Case-folded, whitespace-collapsed key used by the alias index."""
    return " ".join(surface.casefold().split())


class _SynonymSets:
    """Union-find whose representative is the smallest id in each set."""

    def __init__(self, ids: Iterable[int]):
        self.parent = {i: i for i in ids}

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        if ra < rb:
            self.parent[rb] = ra
        else:
            self.parent[ra] = rb


class KnowledgeGraph:
    """
    Immutable, fully indexed knowledge graph.

    Build instances with `from_records` (or `load_kg`); the constructor
    expects already validated entities and triples.
    """

    def __init__(self, entities: Dict[int, Entity], triples: Iterable[Triple],
                 alias_index: Dict[str, int]):
        self.entities: Dict[int, Entity] = dict(sorted(entities.items()))
        self.triples: Tuple[Triple, ...] = tuple(sorted(triples, key=lambda t: t.key))
        self.alias_index: Dict[str, int] = dict(alias_index)
        self.max_alias_length = max((len(k) for k in self.alias_index), default=0)

        sets = _SynonymSets(self.entities)
        for triple in self.triples:
            if triple.relation is RelationKind.SYNONYM:
                sets.union(triple.head, triple.tail)
        self.synonym_rep: Dict[int, int] = {e: sets.find(e) for e in self.entities}
        members: Dict[int, List[int]] = {}
        for e, rep in self.synonym_rep.items():
            members.setdefault(rep, []).append(e)
        self.synonym_members: Dict[int, Tuple[int, ...]] = {k: tuple(v) for k, v in members.items()}

        component_adjacency: Dict[int, Set[int]] = {}
        hypernyms: Dict[int, Set[int]] = {}
        normalized: Set[Tuple[int, str, int]] = set()
        for triple in self.triples:
            if triple.relation is RelationKind.COMPONENT_OF:
                component_adjacency.setdefault(triple.head, set()).add(triple.tail)
            elif triple.relation is RelationKind.HYPERNYM_HYPONYM:
                hypernyms.setdefault(triple.head, set()).add(triple.tail)
            normalized.add((self.synonym_rep[triple.head], triple.relation.value,
                            self.synonym_rep[triple.tail]))
        self.component_adjacency: Dict[int, FrozenSet[int]] = {
            k: frozenset(v) for k, v in component_adjacency.items()
        }
        self.hypernyms: Dict[int, FrozenSet[int]] = {k: frozenset(v) for k, v in hypernyms.items()}
        self.normalized_triples: FrozenSet[Tuple[int, str, int]] = frozenset(normalized)
        self._triple_keys = {t.key for t in self.triples}

    @classmethod
    def from_records(cls, entity_records: Iterable[Tuple[int, Dict[str, Any]]],
                     triple_records: Iterable[Tuple[int, Dict[str, Any]]],
                     entities_path: str = "<entities>",
                     triples_path: str = "<triples>") -> "KnowledgeGraph":
        """
        Validate raw records and build a graph.

        Args:
            entity_records: (line number, parsed JSON object) pairs
            triple_records: (line number, parsed JSON object) pairs
            entities_path: Name used in error messages for entity records
            triples_path: Name used in error messages for triple records

        Returns:
            The indexed KnowledgeGraph

        Raises:
            KGLoadError: naming the offending file and line
        """
        entities: Dict[int, Entity] = {}
        alias_index: Dict[str, int] = {}
        for line, record in entity_records:
            entity = _parse_entity(record, entities_path, line)
            if entity.id in entities:
                raise KGLoadError(f"duplicate entity id {entity.id}", entities_path, line)
            for alias in entity.aliases:
                key = alias_key(alias)
                owner = alias_index.get(key)
                if owner is not None and owner != entity.id:
                    raise KGLoadError(
                        f"alias {alias!r} mapped to two different entities ({owner} and {entity.id})",
                        entities_path, line)
                alias_index[key] = entity.id
            entities[entity.id] = entity

        triples: List[Triple] = []
        seen: Set[Tuple[int, str, int]] = set()
        component_edges: Dict[int, Set[int]] = {}
        for line, record in triple_records:
            triple = _parse_triple(record, triples_path, line)
            for endpoint in (triple.head, triple.tail):
                if endpoint not in entities:
                    raise KGLoadError(f"unknown entity {endpoint}", triples_path, line)
            if triple.key in seen:
                raise KGLoadError(f"duplicate triple {triple.key}", triples_path, line)
            if triple.relation is RelationKind.COMPONENT_OF:
                if triple.head == triple.tail or triple.head in _reachable(component_edges, triple.tail):
                    raise KGLoadError(
                        f"component_of cycle through {triple.head} -> {triple.tail}",
                        triples_path, line)
                component_edges.setdefault(triple.head, set()).add(triple.tail)
            seen.add(triple.key)
            triples.append(triple)

        return cls(entities, triples, alias_index)

    def with_triples(self, extra: Iterable[Triple]) -> "KnowledgeGraph":
        """Return a new graph with additional triples, validated like file input."""
        entity_records = [(i + 1, entity_to_record(e)) for i, e in enumerate(self.entities.values())]
        all_triples = list(self.triples) + [t for t in extra if t.key not in self._triple_keys]
        triple_records = [(i + 1, triple_to_record(t)) for i, t in enumerate(all_triples)]
        return KnowledgeGraph.from_records(entity_records, triple_records)

    def has_triple(self, head: int, relation: RelationKind, tail: int) -> bool:
        return (head, relation.value, tail) in self._triple_keys

    def has_normalized_triple(self, head: int, relation: RelationKind, tail: int) -> bool:
        """Check a triple after mapping both endpoints to their synonym representatives."""
        return (self.synonym_rep[head], relation.value, self.synonym_rep[tail]) in self.normalized_triples

    def entity(self, entity_id: int) -> Entity:
        try:
            return self.entities[entity_id]
        except KeyError:
            raise UnknownEntityError(entity_id) from None

    def name(self, entity_id: int) -> str:
        return self.entity(entity_id).canonical_name

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, KnowledgeGraph):
            return NotImplemented
        return self.entities == other.entities and self.triples == other.triples

    def __repr__(self) -> str:
        return f"KnowledgeGraph(entities={len(self.entities)}, triples={len(self.triples)})"


def _reachable(edges: Dict[int, Set[int]], start: int) -> Set[int]:
    seen: Set[int] = set()
    queue = deque([start])
    while queue:
        node = queue.popleft()
        for nxt in edges.get(node, ()):
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return seen


def _check_fields(record: Dict[str, Any], allowed: Set[str], path: str, line: int) -> None:
    if not isinstance(record, dict):
        raise KGLoadError("expected a JSON object", path, line)
    for field_name in record:
        if field_name not in allowed:
            raise KGLoadError(f"unknown field {field_name!r}", path, line)


def _parse_entity(record: Dict[str, Any], path: str, line: int) -> Entity:
    _check_fields(record, ENTITY_FIELDS, path, line)
    entity_id = record.get("id")
    if not isinstance(entity_id, int) or isinstance(entity_id, bool):
        raise KGLoadError("entity id must be an integer", path, line)
    name = record.get("name")
    if not isinstance(name, str) or not name.strip():
        raise KGLoadError(f"entity {entity_id} has an empty name", path, line)
    aliases = record.get("aliases", [])
    if not isinstance(aliases, list) or not all(isinstance(a, str) and a.strip() for a in aliases):
        raise KGLoadError(f"entity {entity_id} aliases must be a list of non-empty strings", path, line)
    ordered = [name]
    for alias in aliases:
        if alias not in ordered:
            ordered.append(alias)
    entity_type = record.get("type", "")
    if not isinstance(entity_type, str):
        raise KGLoadError(f"entity {entity_id} type must be a string", path, line)
    return Entity(id=entity_id, canonical_name=name, aliases=tuple(ordered), entity_type=entity_type)


def _parse_triple(record: Dict[str, Any], path: str, line: int) -> Triple:
    _check_fields(record, TRIPLE_FIELDS, path, line)
    for endpoint in ("head", "tail"):
        value = record.get(endpoint)
        if not isinstance(value, int) or isinstance(value, bool):
            raise KGLoadError(f"triple {endpoint} must be an integer entity id", path, line)
    try:
        relation = RelationKind.parse(record.get("relation"))
    except ValueError as e:
        raise KGLoadError(str(e), path, line) from None
    confidence = record.get("confidence", 1.0)
    if not isinstance(confidence, (int, float)) or isinstance(confidence, bool) or not 0.0 <= confidence <= 1.0:
        raise KGLoadError(f"confidence must be a number in [0, 1], got {confidence!r}", path, line)
    return Triple(head=record["head"], relation=relation, tail=record["tail"], confidence=float(confidence))


def _read_jsonl(path: str) -> List[Tuple[int, Dict[str, Any]]]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, raw in enumerate(f, start=1):
            if not raw.strip():
                continue
            try:
                records.append((line_no, json.loads(raw)))
            except json.JSONDecodeError as e:
                raise KGLoadError(f"invalid JSON: {e.msg}", path, line_no) from None
    return records


def load_kg(entities_path: str, triples_path: str) -> KnowledgeGraph:
    """
    Load and validate a knowledge graph from JSONL files.

    Args:
        entities_path: Path to entities.jsonl
        triples_path: Path to triples.jsonl

    Returns:
        Fully indexed KnowledgeGraph

    Raises:
        KGLoadError: on malformed or inconsistent input
    """
    try:
        entity_records = _read_jsonl(entities_path)
        triple_records = _read_jsonl(triples_path)
    except OSError as e:
        raise KGLoadError(f"cannot read file: {e.strerror}", e.filename) from None
    kg = KnowledgeGraph.from_records(entity_records, triple_records, entities_path, triples_path)
    logger.info(f"Loaded knowledge graph with {len(kg.entities)} entities and {len(kg.triples)} triples")
    return kg


def entity_to_record(entity: Entity) -> Dict[str, Any]:
    return {"id": entity.id, "name": entity.canonical_name,
            "aliases": list(entity.aliases), "type": entity.entity_type}


def triple_to_record(triple: Triple) -> Dict[str, Any]:
    return {"head": triple.head, "relation": triple.relation.value,
            "tail": triple.tail, "confidence": triple.confidence}


def save_kg(kg: KnowledgeGraph, entities_path: str, triples_path: str) -> None:
    """Write the graph back in the JSONL formats load_kg reads, sorted by id and triple key."""
    with open(entities_path, "w", encoding="utf-8") as f:
        for entity in kg.entities.values():
            f.write(json.dumps(entity_to_record(entity), ensure_ascii=False) + "\n")
    with open(triples_path, "w", encoding="utf-8") as f:
        for triple in kg.triples:
            f.write(json.dumps(triple_to_record(triple), ensure_ascii=False) + "\n")
    logger.info(f"Saved knowledge graph to {entities_path} and {triples_path}")


def resolve_alias(kg: KnowledgeGraph, surface: str) -> Optional[int]:
    """Return the entity owning `surface` (case-folded exact match), or None."""
    return kg.alias_index.get(alias_key(surface))


def normalize_entity(kg: KnowledgeGraph, entity_id: int) -> int:
    """
    Map an entity to the smallest id in its synonym closure.

    Raises:
        UnknownEntityError: if the id is not in the graph
    """
    try:
        return kg.synonym_rep[entity_id]
    except KeyError:
        raise UnknownEntityError(entity_id) from None


def component_ancestors(kg: KnowledgeGraph, entity_id: int) -> Set[int]:
    """
    Transitive closure of component_of edges leaving `entity_id`, excluding itself.

    Raises:
        UnknownEntityError: if the id is not in the graph
    """
    if entity_id not in kg.entities:
        raise UnknownEntityError(entity_id)
    ancestors = _reachable(kg.component_adjacency, entity_id)
    ancestors.discard(entity_id)
    return ancestors


def generalizations(kg: KnowledgeGraph, entity_id: int) -> Set[int]:
    """
    Normalized targets of hypernym_hyponym edges with `entity_id` as head.

    Edges are used as stored; the data source decides their direction.
    """
    if entity_id not in kg.entities:
        raise UnknownEntityError(entity_id)
    return {kg.synonym_rep[t] for t in kg.hypernyms.get(entity_id, ())}


def kg_stats(kg: KnowledgeGraph, bootstrapped: int = 0) -> Dict[str, Any]:
    """Summary counts in the stats JSON format."""
    relations = Counter(t.relation.value for t in kg.triples)
    return {
        "entities": len(kg.entities),
        "normalized_entities": len(set(kg.synonym_rep.values())),
        "triples": len(kg.triples),
        "relations": {kind.value: relations.get(kind.value, 0) for kind in RelationKind},
        "bootstrapped": bootstrapped,
    }


def load_patterns(path: str) -> List[Pattern]:
    """
    Load bootstrap patterns from JSONL.

    Each line: {"pattern": "<OP> * <OBJ>", "relation": "has_operation",
    "head": "right", "max_gap": 3}; "head" and "max_gap" are optional.
    """
    patterns = []
    for line, record in _read_jsonl(path):
        try:
            patterns.append(Pattern.parse(record["pattern"], record["relation"],
                                          record.get("head", "left"), record.get("max_gap", 3)))
        except (KeyError, ValueError, TypeError) as e:
            raise KGLoadError(f"bad pattern: {e}", path, line) from None
    return patterns


def _slot_matches(kg: KnowledgeGraph, entity_id: int, slot_type: Optional[str]) -> bool:
    return slot_type is None or kg.entities[entity_id].entity_type == slot_type


def bootstrap_triples(corpus: List[str], patterns: List[Pattern], kg: KnowledgeGraph,
                      mode: str = "whitespace") -> List[BootstrapResult]:
    """
    Count pattern instantiations over a corpus.

    Entity mentions are found with forward maximum matching, so both slots
    always resolve to KG entities. A wildcard gap may not contain another
    mention.

    Args:
        corpus: Raw sentences
        patterns: Extraction templates
        kg: Graph supplying aliases and entity types
        mode: Tokenizer mode

    Returns:
        Triples ranked by descending count, ties by (head id, tail id)
    """
    from src.anchoring import extract_entities_fmm, tokenize

    counts: Counter = Counter()
    if not patterns:
        return []
    for sentence in corpus:
        tokens = tokenize(sentence, mode)
        if not tokens:
            continue
        words = [t.text.casefold() for t in tokens]
        mentions = extract_entities_fmm(tokens, kg, mode)
        for i, left in enumerate(mentions):
            for j in range(i + 1, len(mentions)):
                right = mentions[j]
                gap = words[left.token_end:right.token_start]
                adjacent = j == i + 1
                for pattern in patterns:
                    if not (_slot_matches(kg, left.entity, pattern.left_type)
                            and _slot_matches(kg, right.entity, pattern.right_type)):
                        continue
                    if pattern.wildcard:
                        if not adjacent or len(gap) > pattern.max_gap:
                            continue
                    elif tuple(gap) != pattern.infix:
                        continue
                    head, tail = (left.entity, right.entity) if pattern.head == "left" else (right.entity, left.entity)
                    if head == tail:
                        continue
                    counts[(head, pattern.relation, tail)] += 1

    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0][0], kv[0][2], kv[0][1].value))
    results = [BootstrapResult(Triple(h, r, t), n) for (h, r, t), n in ranked]
    logger.info(f"Bootstrapped {len(results)} distinct triples from {len(corpus)} sentences")
    return results
