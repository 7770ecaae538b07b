"""
Synthetic FAQ corpora generated from a knowledge graph.

Produces query-title matching pairs, labeled disambiguation candidates and an
FAQ title index from the (object, operation, app) intents the graph supports.
"""
import logging
import os
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src import config
from src.anchoring import extract_entities_fmm, filter_knowledge_reasoning, generate_triple_candidates, tokenize
from src.kg_store import KnowledgeGraph, RelationKind, component_ancestors
from src.train_eval import (DisambExample, MatchExample, save_disamb_dataset, save_match_dataset)

logger = logging.getLogger(__name__)

Intent = Tuple[int, int, int]

QUERY_TEMPLATES = (
    "how to {op} {app} {obj}",
    "i want to {op} my {obj} in {app}",
    "can i {op} {obj} on {app}",
)

DISTRACTOR_TEMPLATES = (
    "how to {op} {app} {obj} if she has {op2} me",
    "how to {op} {app} {obj} who {op2} me",
)

TITLE_TEMPLATE = "How to {op} {app} {obj}"

SUBSETS = ("plain", "synonym", "distractor")


class SyntheticCorpusGenerator:
    """
    Generates labeled corpora for the anchoring and matching pipelines.
    """

    def __init__(self, kg: KnowledgeGraph, seed: int = config.DEFAULT_SEED):
        """
        Initialize the generator.

        Args:
            kg: Graph supplying objects, operations, apps and their surfaces
            seed: Seed of the generator's random state
        """
        self.kg = kg
        self.rng = np.random.RandomState(seed)
        self.operations: Dict[int, List[int]] = {}
        for triple in kg.triples:
            if (triple.relation is RelationKind.HAS_OPERATION
                    and kg.entities[triple.head].entity_type == "object"):
                self.operations.setdefault(triple.head, []).append(triple.tail)
        self.apps: Dict[int, List[int]] = {}
        for obj in self.operations:
            apps = sorted(a for a in component_ancestors(kg, obj) if kg.entities[a].entity_type == "app")
            if apps:
                self.apps[obj] = apps
        self.objects = sorted(o for o in self.operations if o in self.apps and len(self.operations[o]) >= 2)
        if len(self.objects) < 2:
            raise ValueError("the knowledge graph needs at least two objects with operations and apps")
        self.intents: List[Intent] = [(o, op, app) for o in self.objects
                                      for op in sorted(self.operations[o]) for app in self.apps[o]]
        logger.info(f"Synthetic generator over {len(self.objects)} objects and {len(self.intents)} intents")

    def _choice(self, items: Sequence):
        return items[self.rng.randint(len(items))]

    def surface(self, entity_id: int, vary: bool = False) -> str:
        """Canonical name, or with `vary` another name or alias from the synonym closure."""
        canonical = self.kg.name(entity_id)
        if not vary:
            return canonical
        rep = self.kg.synonym_rep[entity_id]
        options = []
        for member in self.kg.synonym_members.get(rep, (rep,)):
            entity = self.kg.entities[member]
            names = [entity.canonical_name]
            if entity.entity_type != "operation":
                names.extend(entity.aliases[1:])
            options.extend(n for n in names if n.casefold() != canonical.casefold())
        return self._choice(options) if options else canonical

    def past_surface(self, op_id: int) -> str:
        """Past form of an operation: its first alias, by convention of the toy graph."""
        aliases = self.kg.entities[op_id].aliases
        return aliases[1] if len(aliases) > 1 else aliases[0]

    def title(self, intent: Intent) -> str:
        obj, op, app = intent
        return TITLE_TEMPLATE.format(op=self.kg.name(op), app=self.kg.name(app), obj=self.kg.name(obj))

    def faq_titles(self) -> List[Tuple[str, str]]:
        return [(self.title(intent), f"faq-{i + 1:04d}") for i, intent in enumerate(self.intents)]

    def _distractor_op(self, obj: int, op: int) -> int:
        others = [o for o in self.operations[obj] if self.kg.synonym_rep[o] != self.kg.synonym_rep[op]]
        return self._choice(others)

    def query(self, intent: Intent, subset: str) -> str:
        obj, op, app = intent
        vary = subset == "synonym"
        values = {"op": self.surface(op, vary), "app": self.surface(app, vary), "obj": self.surface(obj, vary)}
        if subset == "distractor":
            values["op2"] = self.past_surface(self._distractor_op(obj, op))
            return self._choice(DISTRACTOR_TEMPLATES).format(**values)
        return self._choice(QUERY_TEMPLATES).format(**values)

    def _related_intent(self, intent: Intent) -> Intent:
        obj, op, app = intent
        options = [(obj, o, app) for o in self.operations[obj]
                   if self.kg.synonym_rep[o] != self.kg.synonym_rep[op]]
        options.extend((obj, op, a) for a in self.apps[obj] if a != app)
        return self._choice(options)

    def _unrelated_intent(self, intent: Intent) -> Intent:
        obj = intent[0]
        other = self._choice([o for o in self.objects if o != obj])
        return (other, self._choice(self.operations[other]), self._choice(self.apps[other]))

    def match_examples(self, n: int, subsets: Sequence[str] = SUBSETS) -> List[MatchExample]:
        """
        Balanced query-title pairs.

        Label 2 pairs share the whole intent, label 1 pairs share the object
        with another operation or app, label 0 pairs differ in the object.
        """
        examples = []
        for i in range(n):
            intent = self._choice(self.intents)
            subset = subsets[i % len(subsets)]
            label = int(self.rng.randint(3))
            if label == 2:
                target = intent
            elif label == 1:
                target = self._related_intent(intent)
            else:
                target = self._unrelated_intent(intent)
            examples.append(MatchExample(self.query(intent, subset), self.title(target), label))
        return examples

    def disamb_examples(self, n_queries: int, distractor_share: float = 0.5) -> List[DisambExample]:
        """
        Label every has_operation and component_of candidate of generated queries.

        A candidate is positive when it is one of the query's intended triples:
        (object, has_operation, operation) or (object, component_of, app).
        """
        examples = []
        for _ in range(n_queries):
            intent = self._choice(self.intents)
            subset = "distractor" if self.rng.rand() < distractor_share else self._choice(("plain", "synonym"))
            text = self.query(intent, subset)
            obj, op, app = intent
            rep = self.kg.synonym_rep
            intended = {(rep[obj], RelationKind.HAS_OPERATION.value, rep[op]),
                        (rep[obj], RelationKind.COMPONENT_OF.value, rep[app])}
            tokens = tokenize(text)
            candidates = filter_knowledge_reasoning(
                generate_triple_candidates(extract_entities_fmm(tokens, self.kg, text=text), self.kg), self.kg)
            for cand in candidates:
                examples.append(DisambExample(text, cand.head.surface, cand.relation, cand.tail.surface,
                                              int(cand.key in intended)))
        return examples

    def write_corpus(self, out_dir: str, n_match: int, n_disamb_queries: int) -> Dict[str, str]:
        """Write match.tsv, disamb.tsv and faq_index.tsv into `out_dir`."""
        os.makedirs(out_dir, exist_ok=True)
        paths = {
            "match": os.path.join(out_dir, "match.tsv"),
            "disamb": os.path.join(out_dir, "disamb.tsv"),
            "faq_index": os.path.join(out_dir, "faq_index.tsv"),
        }
        save_match_dataset(self.match_examples(n_match), paths["match"])
        save_disamb_dataset(self.disamb_examples(n_disamb_queries), paths["disamb"])
        with open(paths["faq_index"], "w", encoding="utf-8") as f:
            for title, answer_id in self.faq_titles():
                f.write(f"{title}\t{answer_id}\n")
        logger.info(f"Wrote synthetic corpus to {out_dir}")
        return paths


def get_synthetic_generator(kg: KnowledgeGraph, seed: Optional[int] = None) -> SyntheticCorpusGenerator:
    """
    Get a synthetic corpus generator.

    Args:
        kg: Knowledge graph to generate from
        seed: Random seed, defaults to the configured seed

    Returns:
        SyntheticCorpusGenerator instance
    """
    return SyntheticCorpusGenerator(kg, config.DEFAULT_SEED if seed is None else seed)
