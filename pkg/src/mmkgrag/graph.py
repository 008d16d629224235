"""Knowledge-graph data model and the merge algebra over page extractions.

Per-page extraction outputs are folded into a document-level graph.  The
fold is designed so the finished graph depends only on the *set* of page
extractions, never on arrival order: parts are sorted by page identity
before folding, duplicate descriptions collapse exactly once, and relation
endpoints that no page defined become explicit stub entities that any
later real mention repairs in place.
"""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from .diagnostics import DiagnosticsLog
from .errors import (
    DanglingEndpoint,
    EmptyAfterNormalization,
    InvalidGraphFile,
)

logger = logging.getLogger(__name__)

MODALITIES = ("text", "figure", "table")
STUB_TYPE = "unknown"
STUB_DESCRIPTION = "referenced only in a relation"
GRAPH_FORMAT_VERSION = 1

_WS_RUN = re.compile(r"\s+")


def normalize_name(raw: str) -> str:
    """Canonical entity name: trimmed, whitespace runs collapsed, uppercased.

    Idempotent: ``normalize_name(normalize_name(x)) == normalize_name(x)``.

    Raises:
        EmptyAfterNormalization: nothing is left after trimming.
    """
    name = _WS_RUN.sub(" ", raw.strip()).upper()
    if not name:
        raise EmptyAfterNormalization(f"entity name {raw!r} is empty after normalization")
    return name


def count_tokens(text: str) -> int:
    """Token-count proxy used for every budget in the pipeline: whitespace words."""
    return len(text.split())


@dataclass
class Entity:
    """A graph node keyed by normalized name.

    Attributes:
        name: normalized (see :func:`normalize_name`); the merge key.
        entity_type: label from the extraction type vocabulary; on conflict
            the first-seen type wins and the conflict is logged.
        descriptions: accumulated description strings, first-seen order,
            exact-string deduplicated.
        source_pages: ``(doc_id, page_index)`` pairs that mentioned the entity.
        modality: ``text``, ``figure`` or ``table``; figure/table entities
            stand for one visual element and carry its asset reference.
        asset_ref: asset id of the originating visual element, required
            exactly when modality is figure/table.
        stub: True while the entity exists only as a relation endpoint no
            page has described; a later real mention replaces the stub
            content in place, keeping the fold order-independent.
    """

    name: str
    entity_type: str
    descriptions: list[str] = field(default_factory=list)
    source_pages: set[tuple[str, int]] = field(default_factory=set)
    modality: str = "text"
    asset_ref: str | None = None
    stub: bool = False

    def validate(self) -> None:
        if normalize_name(self.name) != self.name:
            raise EmptyAfterNormalization(
                f"entity name {self.name!r} is not in normalized form"
            )
        if self.modality not in MODALITIES:
            raise InvalidGraphFile(f"entity {self.name!r}: bad modality {self.modality!r}")
        if (self.modality in ("figure", "table")) != (self.asset_ref is not None):
            raise InvalidGraphFile(
                f"entity {self.name!r}: figure/table entities carry exactly one "
                "asset reference and text entities carry none"
            )
        if not self.descriptions:
            raise InvalidGraphFile(f"entity {self.name!r} has no descriptions")

    def copy(self) -> "Entity":
        return Entity(
            name=self.name,
            entity_type=self.entity_type,
            descriptions=list(self.descriptions),
            source_pages=set(self.source_pages),
            modality=self.modality,
            asset_ref=self.asset_ref,
            stub=self.stub,
        )

    def to_json_obj(self) -> dict:
        return {
            "name": self.name,
            "entity_type": self.entity_type,
            "descriptions": list(self.descriptions),
            "source_pages": sorted([d, i] for d, i in self.source_pages),
            "modality": self.modality,
            "asset_ref": self.asset_ref,
            "stub": self.stub,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "Entity":
        return cls(
            name=obj["name"],
            entity_type=obj["entity_type"],
            descriptions=list(obj["descriptions"]),
            source_pages={(d, i) for d, i in obj["source_pages"]},
            modality=obj.get("modality", "text"),
            asset_ref=obj.get("asset_ref"),
            stub=obj.get("stub", False),
        )


@dataclass
class Relation:
    """A directed edge keyed by the ordered ``(source, target)`` pair.

    Attributes:
        source: normalized name of the source entity.
        target: normalized name of the target entity.
        descriptions: accumulated, deduplicated like entity descriptions.
        keywords: relation keywords, first-seen order, case-insensitively
            deduplicated.
        source_pages: pages that asserted the relation.
    """

    source: str
    target: str
    descriptions: list[str] = field(default_factory=list)
    keywords: list[str] = field(default_factory=list)
    source_pages: set[tuple[str, int]] = field(default_factory=set)

    @property
    def key(self) -> tuple[str, str]:
        return (self.source, self.target)

    def validate(self) -> None:
        if normalize_name(self.source) != self.source:
            raise EmptyAfterNormalization(f"relation source {self.source!r} not normalized")
        if normalize_name(self.target) != self.target:
            raise EmptyAfterNormalization(f"relation target {self.target!r} not normalized")
        if self.source == self.target:
            raise InvalidGraphFile(f"relation {self.source!r} -> itself is not allowed")

    def copy(self) -> "Relation":
        return Relation(
            source=self.source,
            target=self.target,
            descriptions=list(self.descriptions),
            keywords=list(self.keywords),
            source_pages=set(self.source_pages),
        )

    def to_json_obj(self) -> dict:
        return {
            "source": self.source,
            "target": self.target,
            "descriptions": list(self.descriptions),
            "keywords": list(self.keywords),
            "source_pages": sorted([d, i] for d, i in self.source_pages),
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "Relation":
        return cls(
            source=obj["source"],
            target=obj["target"],
            descriptions=list(obj["descriptions"]),
            keywords=list(obj["keywords"]),
            source_pages={(d, i) for d, i in obj["source_pages"]},
        )


@dataclass
class PageExtraction:
    """Model output for one page, already parsed and normalized."""

    doc_id: str
    page_index: int
    entities: list[Entity] = field(default_factory=list)
    relations: list[Relation] = field(default_factory=list)

    @property
    def page_id(self) -> tuple[str, int]:
        return (self.doc_id, self.page_index)

    def to_json(self) -> str:
        payload = {
            "doc_id": self.doc_id,
            "page_index": self.page_index,
            "entities": [e.to_json_obj() for e in self.entities],
            "relations": [r.to_json_obj() for r in self.relations],
        }
        return json.dumps(payload, sort_keys=True, ensure_ascii=False, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "PageExtraction":
        obj = json.loads(text)
        return cls(
            doc_id=obj["doc_id"],
            page_index=obj["page_index"],
            entities=[Entity.from_json_obj(e) for e in obj["entities"]],
            relations=[Relation.from_json_obj(r) for r in obj["relations"]],
        )


@dataclass
class KnowledgeGraph:
    """Entities keyed by name, relations keyed by ordered endpoint pair.

    ``generation`` is 0 for the freshly merged graph and 1 once the
    refinement pass has run.
    """

    entities: dict[str, Entity] = field(default_factory=dict)
    relations: dict[tuple[str, str], Relation] = field(default_factory=dict)
    generation: int = 0

    @property
    def is_empty(self) -> bool:
        return not self.entities

    def copy(self, generation: int | None = None) -> "KnowledgeGraph":
        return KnowledgeGraph(
            entities={name: e.copy() for name, e in self.entities.items()},
            relations={key: r.copy() for key, r in self.relations.items()},
            generation=self.generation if generation is None else generation,
        )

    def relations_touching(self, name: str) -> Iterator[Relation]:
        """Relations with ``name`` at either end (direction ignored)."""
        for rel in self.relations.values():
            if rel.source == name or rel.target == name:
                yield rel

    def validate(self) -> None:
        for name, entity in self.entities.items():
            if name != entity.name:
                raise InvalidGraphFile(f"entity keyed {name!r} but named {entity.name!r}")
            entity.validate()
        for key, rel in self.relations.items():
            if key != rel.key:
                raise InvalidGraphFile(f"relation keyed {key!r} but is {rel.key!r}")
            rel.validate()
            for endpoint in key:
                if endpoint not in self.entities:
                    raise DanglingEndpoint(
                        f"relation {key[0]!r} -> {key[1]!r}: endpoint {endpoint!r} "
                        "is not an entity of the graph"
                    )


@dataclass
class Subgraph:
    """An endpoint-closed slice of a graph; entities and relations are copies."""

    entities: list[Entity] = field(default_factory=list)
    relations: list[Relation] = field(default_factory=list)
    origin_generation: int = 0

    @property
    def is_empty(self) -> bool:
        return not self.entities and not self.relations

    def entity_names(self) -> list[str]:
        return [e.name for e in self.entities]


# --- merge algebra ----------------------------------------------------------

def _extend_dedup(existing: list[str], new: Iterable[str]) -> None:
    # exact-string dedup over the whole accumulated list
    for item in new:
        if item not in existing:
            existing.append(item)


def _extend_keywords(existing: list[str], new: Iterable[str]) -> None:
    # case-insensitive dedup, first-seen spelling kept
    seen = {k.lower() for k in existing}
    for kw in new:
        if kw.lower() not in seen:
            existing.append(kw)
            seen.add(kw.lower())


def _merge_entity(current: Entity, incoming: Entity, diagnostics: DiagnosticsLog | None) -> None:
    if incoming.stub:
        # a bare endpoint reference adds provenance only
        current.source_pages |= incoming.source_pages
        return
    if current.stub:
        # real content replaces the placeholder outright
        current.entity_type = incoming.entity_type
        current.modality = incoming.modality
        current.asset_ref = incoming.asset_ref
        current.descriptions = []
        _extend_dedup(current.descriptions, incoming.descriptions)
        current.source_pages |= incoming.source_pages
        current.stub = False
        return
    if incoming.entity_type != current.entity_type:
        if diagnostics is not None:
            diagnostics.emit(
                "entity_type_conflict",
                name=current.name,
                kept=current.entity_type,
                dropped=incoming.entity_type,
                pages=sorted([d, i] for d, i in incoming.source_pages),
            )
    if (incoming.modality, incoming.asset_ref) != (current.modality, current.asset_ref):
        if diagnostics is not None:
            diagnostics.emit(
                "entity_modality_conflict",
                name=current.name,
                kept=[current.modality, current.asset_ref],
                dropped=[incoming.modality, incoming.asset_ref],
            )
    _extend_dedup(current.descriptions, incoming.descriptions)
    current.source_pages |= incoming.source_pages


def _merge_relation(current: Relation, incoming: Relation) -> None:
    _extend_dedup(current.descriptions, incoming.descriptions)
    _extend_keywords(current.keywords, incoming.keywords)
    current.source_pages |= incoming.source_pages


def _ensure_endpoint(
    graph: KnowledgeGraph, name: str, pages: set[tuple[str, int]]
) -> None:
    entity = graph.entities.get(name)
    if entity is None:
        graph.entities[name] = Entity(
            name=name,
            entity_type=STUB_TYPE,
            descriptions=[STUB_DESCRIPTION],
            source_pages=set(pages),
            stub=True,
        )
    else:
        entity.source_pages |= pages


def merge_into(
    graph: KnowledgeGraph,
    part: PageExtraction,
    diagnostics: DiagnosticsLog | None = None,
) -> None:
    """Fold one page extraction into ``graph`` in place.

    Entities merge by normalized name, relations by ordered endpoint pair.
    A relation whose endpoint no page has described yet creates a stub
    entity; a later real mention of that name repairs the stub in place,
    so the finished graph does not depend on which page arrived first.
    """
    for entity in part.entities:
        existing = graph.entities.get(entity.name)
        if existing is None:
            graph.entities[entity.name] = entity.copy()
        else:
            _merge_entity(existing, entity, diagnostics)
    for relation in part.relations:
        _ensure_endpoint(graph, relation.source, relation.source_pages)
        _ensure_endpoint(graph, relation.target, relation.source_pages)
        existing = graph.relations.get(relation.key)
        if existing is None:
            graph.relations[relation.key] = relation.copy()
        else:
            _merge_relation(existing, relation)


def join_extractions(
    parts: Iterable[PageExtraction],
    generation: int = 0,
    diagnostics: DiagnosticsLog | None = None,
) -> KnowledgeGraph:
    """Fold page extractions into one graph.

    Parts are sorted by ``(doc_id, page_index)`` before folding, so the
    result depends only on the set of parts, not on the order they were
    produced in.
    """
    graph = KnowledgeGraph(generation=generation)
    for part in sorted(parts, key=lambda p: p.page_id):
        merge_into(graph, part, diagnostics)
    return graph


# --- subgraphs ---------------------------------------------------------------

def one_hop_expand(graph: KnowledgeGraph, seeds: Iterable[str]) -> Subgraph:
    """Seed entities plus every relation touching them, endpoint-closed.

    Seed names are normalized first; names absent from the graph are
    skipped with a warning.  Growing the seed set never shrinks the result.
    """
    known: set[str] = set()
    unknown: set[str] = set()
    for seed in seeds:
        name = normalize_name(seed)
        if name in graph.entities:
            known.add(name)
        else:
            unknown.add(name)
    if unknown:
        logger.warning("expansion skipped unknown seeds: %s", sorted(unknown))

    names = set(known)
    relations: list[Relation] = []
    for key in sorted(graph.relations):
        rel = graph.relations[key]
        if rel.source in known or rel.target in known:
            relations.append(rel.copy())
            names.add(rel.source)
            names.add(rel.target)
    entities = [graph.entities[name].copy() for name in sorted(names)]
    return Subgraph(
        entities=entities, relations=relations, origin_generation=graph.generation
    )


def entity_record(entity: Entity) -> str:
    """One-line textual record of an entity for prompt contexts."""
    return f"{entity.name} | {entity.entity_type} | " + "; ".join(entity.descriptions)


def relation_record(relation: Relation) -> str:
    """One-line textual record of a relation for prompt contexts."""
    return (
        f"{relation.source} -> {relation.target} | "
        + ", ".join(relation.keywords)
        + " | "
        + "; ".join(relation.descriptions)
    )


def serialize_subgraph(subgraph: Subgraph, budget_tokens: int) -> str:
    """Render a subgraph as one record per line within a token budget.

    Entity records come first (sorted by name), then relation records
    (sorted by endpoint pair).  Tokens are counted with the whitespace
    proxy of :func:`count_tokens`; once a record would push the total past
    the budget, it and everything after it are dropped, so the output is
    always a prefix of the full rendering made of whole records.  An empty
    subgraph (or a budget below the first record) yields the empty string.
    """
    lines: list[str] = []
    total = 0
    records = [entity_record(e) for e in sorted(subgraph.entities, key=lambda e: e.name)]
    records += [relation_record(r) for r in sorted(subgraph.relations, key=lambda r: r.key)]
    for record in records:
        cost = count_tokens(record)
        if total + cost > budget_tokens:
            if not lines:
                logger.warning(
                    "subgraph serialization budget %d below first record (%d tokens)",
                    budget_tokens,
                    cost,
                )
            break
        lines.append(record)
        total += cost
    return "\n".join(lines)


# --- comparison helpers ------------------------------------------------------

def content_equal(a: KnowledgeGraph, b: KnowledgeGraph) -> bool:
    """Equality up to ordering: description multisets, page sets, keyword
    sets (case-insensitive) must match; generation is ignored."""
    if set(a.entities) != set(b.entities):
        return False
    for name, ea in a.entities.items():
        eb = b.entities[name]
        if (ea.entity_type, ea.modality, ea.asset_ref, ea.stub) != (
            eb.entity_type,
            eb.modality,
            eb.asset_ref,
            eb.stub,
        ):
            return False
        if Counter(ea.descriptions) != Counter(eb.descriptions):
            return False
        if ea.source_pages != eb.source_pages:
            return False
    if set(a.relations) != set(b.relations):
        return False
    for key, ra in a.relations.items():
        rb = b.relations[key]
        if Counter(ra.descriptions) != Counter(rb.descriptions):
            return False
        if {k.lower() for k in ra.keywords} != {k.lower() for k in rb.keywords}:
            return False
        if ra.source_pages != rb.source_pages:
            return False
    return True


def graph_contains(big: KnowledgeGraph, small: KnowledgeGraph) -> bool:
    """True when ``big`` preserves everything in ``small``.

    Stub placeholders in ``small`` may have been repaired in ``big``, so
    the placeholder description is exempt from the subset check.
    """
    for name, se in small.entities.items():
        be = big.entities.get(name)
        if be is None:
            return False
        if not se.source_pages <= be.source_pages:
            return False
        if se.stub:
            continue
        if se.entity_type != be.entity_type:
            return False
        if not set(se.descriptions) <= set(be.descriptions):
            return False
    for key, sr in small.relations.items():
        br = big.relations.get(key)
        if br is None:
            return False
        if not set(sr.descriptions) <= set(br.descriptions):
            return False
        if not {k.lower() for k in sr.keywords} <= {k.lower() for k in br.keywords}:
            return False
        if not sr.source_pages <= br.source_pages:
            return False
    return True


# --- persistence -------------------------------------------------------------

def save_graph(graph: KnowledgeGraph, path: str | Path) -> None:
    """Write a graph as deterministic JSON (sorted entities and relations)."""
    payload = {
        "format_version": GRAPH_FORMAT_VERSION,
        "generation": graph.generation,
        "entities": [graph.entities[n].to_json_obj() for n in sorted(graph.entities)],
        "relations": [graph.relations[k].to_json_obj() for k in sorted(graph.relations)],
    }
    Path(path).write_text(
        json.dumps(payload, sort_keys=True, ensure_ascii=False, indent=2) + "\n",
        encoding="utf-8",
    )


def load_graph(path: str | Path) -> KnowledgeGraph:
    """Load a graph file and re-validate every invariant.

    Raises:
        InvalidGraphFile: unparseable file or broken structural invariant.
        DanglingEndpoint: a relation endpoint is missing from the file.
    """
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise InvalidGraphFile(f"{path}: {exc}") from exc
    if not isinstance(obj, dict) or obj.get("format_version") != GRAPH_FORMAT_VERSION:
        raise InvalidGraphFile(f"{path}: unsupported graph file format")
    try:
        graph = KnowledgeGraph(
            entities={e["name"]: Entity.from_json_obj(e) for e in obj["entities"]},
            relations={
                (r["source"], r["target"]): Relation.from_json_obj(r)
                for r in obj["relations"]
            },
            generation=obj["generation"],
        )
    except (KeyError, TypeError) as exc:
        raise InvalidGraphFile(f"{path}: {exc}") from exc
    graph.validate()
    return graph
