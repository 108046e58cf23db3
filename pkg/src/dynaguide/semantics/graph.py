"""Prompt semantic graphs: entities, per-entity attributes, and edge sets.

A graph over a prompt has entity nodes E_1..E_n, each with an attribute
set A_i. The positive edge set pairs every entity with each of its own
attributes; the negative edge set holds all unordered entity pairs. Nodes
carry token bindings into the prompt's TextEncoding so each node maps to
one or more attention-map indices.

Graphs come from either a pluggable LLM client returning the JSON shape
{"prompt": ..., "Graph": [{entity: [attr, ...]}, ...]} or a deterministic
rule parser over the closed caption grammar.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from ..errors import GraphExtractionError
from ..grammar import Grammar
from ..models.text import TextEncoding, tokenize

GRAPH_SCHEMA_VERSION = 1


def build_edges(
    entities: list[str], attributes: list[list[str]]
) -> tuple[set[tuple[int, int]], set[tuple[int, int]]]:
    """Edge sets by index: s_pos = {(i, j)} over attributes, s_neg = entity pairs."""
    if len(attributes) != len(entities):
        raise ValueError(
            f"attributes indexed by entity: got {len(attributes)} lists "
            f"for {len(entities)} entities"
        )
    s_pos = {(i, j) for i, attrs in enumerate(attributes) for j in range(len(attrs))}
    s_neg = {
        (i, m) for i in range(len(entities)) for m in range(i + 1, len(entities))
    }
    return s_pos, s_neg


@dataclass
class SemanticGraph:
    prompt: str
    entities: list[str]  # word spans, possibly multi-word
    attributes: list[list[str]]  # per-entity attribute spans
    entity_bindings: list[list[int]] = field(default_factory=list)
    attribute_bindings: list[list[list[int]]] = field(default_factory=list)
    events: list[str] = field(default_factory=list)
    source: str = "rules"

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def s_pos(self) -> set[tuple[int, int]]:
        return build_edges(self.entities, self.attributes)[0]

    @property
    def s_neg(self) -> set[tuple[int, int]]:
        return build_edges(self.entities, self.attributes)[1]

    @property
    def bound(self) -> bool:
        return len(self.entity_bindings) == len(self.entities)

    def validate(self, max_entities: int | None = None) -> None:
        if len(self.attributes) != len(self.entities):
            raise GraphExtractionError("attributes not indexed by entity")
        if max_entities is not None and self.n_entities > max_entities:
            raise GraphExtractionError(
                f"{self.n_entities} entities exceeds max_entities {max_entities}"
            )
        assert len(self.s_pos) == sum(len(a) for a in self.attributes)
        n = self.n_entities
        assert len(self.s_neg) == n * (n - 1) // 2
        if self.bound:
            for b in self.entity_bindings:
                assert len(b) >= 1, "entity without bound tokens"
            for per_entity in self.attribute_bindings:
                for b in per_entity:
                    assert len(b) >= 1, "attribute without bound tokens"
            flat = [i for b in self.entity_bindings for i in b]
            assert len(flat) == len(set(flat)), "entity bindings overlap"

    def to_payload(self) -> dict:
        """The serialized form: appendix-shaped plus a bindings extension."""
        payload: dict = {
            "prompt": self.prompt,
            "Graph": [{e: list(a)} for e, a in zip(self.entities, self.attributes)],
        }
        payload["extensions"] = {
            "schema_version": GRAPH_SCHEMA_VERSION,
            "source": self.source,
            "events": list(self.events),
            "entity_bindings": [list(b) for b in self.entity_bindings],
            "attribute_bindings": [
                [list(b) for b in per_e] for per_e in self.attribute_bindings
            ],
        }
        return payload

    def to_json(self) -> str:
        return json.dumps(self.to_payload(), sort_keys=True)


def graph_from_payload(payload: dict, source: str = "file") -> SemanticGraph:
    """Parse and validate the appendix-shaped JSON payload."""
    if not isinstance(payload, dict):
        raise GraphExtractionError(f"graph payload must be an object, got {type(payload).__name__}")
    if "prompt" not in payload or "Graph" not in payload:
        raise GraphExtractionError("graph payload missing 'prompt' or 'Graph'")
    raw = payload["Graph"]
    if not isinstance(raw, list):
        raise GraphExtractionError("'Graph' must be a list of single-entity objects")
    entities: list[str] = []
    attributes: list[list[str]] = []
    for item in raw:
        if not isinstance(item, dict) or len(item) != 1:
            raise GraphExtractionError(f"graph entry must be a single-key object: {item!r}")
        [(entity, attrs)] = item.items()
        if not isinstance(entity, str) or not entity.strip():
            raise GraphExtractionError(f"entity must be a nonempty string: {entity!r}")
        if not isinstance(attrs, list) or not all(isinstance(a, str) for a in attrs):
            raise GraphExtractionError(f"attributes of {entity!r} must be a string list")
        entities.append(entity.strip().lower())
        attributes.append([a.strip().lower() for a in attrs if a.strip()])
    return SemanticGraph(
        prompt=str(payload["prompt"]),
        entities=entities,
        attributes=attributes,
        source=source,
    )


def extract_graph_rules(prompt: str, grammar: Grammar) -> SemanticGraph:
    """Deterministic parser for the closed caption grammar.

    Every grammar-noun occurrence becomes its own entity instance; the
    adjectives between the previous noun/determiner and the noun attach as
    its attributes. Token positions are known exactly at parse time, so
    the graph comes back pre-bound.
    """
    words = tokenize(prompt)
    nouns = set(grammar.nouns)
    adjectives = set(grammar.adjectives)
    boundary = nouns | set(grammar.determiners)

    entities: list[str] = []
    attributes: list[list[str]] = []
    entity_bindings: list[list[int]] = []
    attribute_bindings: list[list[list[int]]] = []
    window_start = 0
    for pos, word in enumerate(words):
        if word in nouns:
            attrs, attr_binds = [], []
            for p in range(window_start, pos):
                if words[p] in adjectives:
                    attrs.append(words[p])
                    attr_binds.append([p])
            entities.append(word)
            attributes.append(attrs)
            entity_bindings.append([pos])
            attribute_bindings.append(attr_binds)
        if word in boundary:
            window_start = pos + 1
    graph = SemanticGraph(
        prompt=prompt,
        entities=entities,
        attributes=attributes,
        entity_bindings=entity_bindings,
        attribute_bindings=attribute_bindings,
        source="rules",
    )
    graph.validate()
    return graph


def _occurrences(word: str, words: tuple[str, ...]) -> list[int]:
    return [i for i, w in enumerate(words) if w == word]


def bind_tokens(graph: SemanticGraph, text: TextEncoding) -> SemanticGraph:
    """Bind every node to token positions in the encoding.

    Entities claim their words' occurrences: a word unique to one entity
    gives that entity all its occurrences; a word shared by several entity
    instances hands each instance one occurrence in order. Attributes bind
    to occurrences outside entity-claimed positions, nearest their entity
    first. Unbindable nodes are dropped with a warning event and the edge
    sets recomputed.
    """
    words = text.words
    events = list(graph.events)

    span_words = [tokenize(e) for e in graph.entities]
    word_claim_count: dict[str, int] = {}
    for span in span_words:
        for w in set(span):
            word_claim_count[w] = word_claim_count.get(w, 0) + 1

    used: set[int] = set()
    kept_idx: list[int] = []
    entity_bindings: list[list[int]] = []
    for i, span in enumerate(span_words):
        positions: list[int] = []
        for w in span:
            free = [p for p in _occurrences(w, words) if p not in used]
            if not free:
                continue
            take = free if word_claim_count[w] == 1 else free[:1]
            positions.extend(take)
            used.update(take)
        if positions:
            kept_idx.append(i)
            entity_bindings.append(sorted(positions))
        else:
            events.append(f"dropped unbindable entity {graph.entities[i]!r}")

    entities = [graph.entities[i] for i in kept_idx]
    attributes = [list(graph.attributes[i]) for i in kept_idx]

    attribute_bindings: list[list[list[int]]] = []
    attr_used: set[int] = set()
    for e_at, i in enumerate(kept_idx):
        anchor = entity_bindings[e_at][0]
        kept_attrs: list[str] = []
        binds: list[list[int]] = []
        for attr in attributes[e_at]:
            take: list[int] = []
            for w in tokenize(attr):
                free = [
                    p
                    for p in _occurrences(w, words)
                    if p not in used and p not in attr_used and p not in take
                ]
                if free:
                    # nearest occurrence to this attribute's entity
                    take.append(min(free, key=lambda p: (abs(p - anchor), p)))
            if not take:
                events.append(
                    f"dropped unbindable attribute {attr!r} of {entities[e_at]!r}"
                )
                continue
            kept_attrs.append(attr)
            binds.append(sorted(take))
            attr_used.update(take)
        attributes[e_at] = kept_attrs
        attribute_bindings.append(binds)

    out = SemanticGraph(
        prompt=graph.prompt,
        entities=entities,
        attributes=attributes,
        entity_bindings=entity_bindings,
        attribute_bindings=attribute_bindings,
        events=events,
        source=graph.source,
    )
    out.validate()
    return out
