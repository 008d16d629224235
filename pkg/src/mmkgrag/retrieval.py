"""Query-time retrieval: keyword split, graph context, page context.

A query is first split into low-level keywords (specific entities and
details) and high-level keywords (themes).  Low-level keywords search the
entity store, high-level keywords the relation store; the union of hits
seeds a one-hop expansion over the refined graph, which is serialized
within the context budget.  Independently, the query embedding retrieves
the top pages from the page store.  Both halves are packed into one
RetrievedContext for the generation stage.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

from .config import PipelineConfig
from .gateway import ChatRequest, Gateway, TextPart, parse_json_reply
from .graph import KnowledgeGraph, Subgraph, one_hop_expand, serialize_subgraph
from .prompts import load_template, render_template
from .vectorstore import StoreSet, VectorStore

logger = logging.getLogger(__name__)


def _dedup_keywords(raw: Sequence[str]) -> list[str]:
    out: list[str] = []
    seen: set[str] = set()
    for keyword in raw:
        keyword = keyword.strip()
        if keyword and keyword.lower() not in seen:
            out.append(keyword)
            seen.add(keyword.lower())
    return out


@dataclass
class KeywordSplit:
    """Two-level keywords for one query.

    Each level is deduplicated case-insensitively with first-seen order;
    a keyword present on the low level is dropped from the high level.
    At least one keyword must survive overall.
    """

    low_level: list[str] = field(default_factory=list)
    high_level: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.low_level = _dedup_keywords(self.low_level)
        low_seen = {k.lower() for k in self.low_level}
        self.high_level = [
            k for k in _dedup_keywords(self.high_level) if k.lower() not in low_seen
        ]
        if not self.low_level and not self.high_level:
            raise ValueError("a keyword split needs at least one keyword")

    def combined(self) -> list[str]:
        return self.low_level + self.high_level


@dataclass
class RetrievedContext:
    """Everything retrieval hands to generation for one query."""

    query: str
    keywords: KeywordSplit
    subgraph: Subgraph
    subgraph_text: str
    pages: list[tuple[str, int, float]]
    entity_scores: dict[str, float] = field(default_factory=dict)
    relation_scores: dict[tuple[str, str], float] = field(default_factory=dict)

    def to_json_obj(self) -> dict:
        return {
            "query": self.query,
            "keywords": {
                "low_level": self.keywords.low_level,
                "high_level": self.keywords.high_level,
            },
            "entities": [e.name for e in self.subgraph.entities],
            "relations": [list(r.key) for r in self.subgraph.relations],
            "subgraph_text": self.subgraph_text,
            "pages": [[doc, index, sim] for doc, index, sim in self.pages],
        }


def extract_keywords(
    query: str, gateway: Gateway, config: PipelineConfig
) -> KeywordSplit:
    """Ask the model to split the query into the two keyword levels.

    A reply that cannot be parsed falls back to the whole query as a
    single high-level keyword, with a warning; backend failures propagate.
    """
    if not query.strip():
        raise ValueError("query must be non-empty")
    system = load_template("keywords.txt", config.prompt_dir or None)
    reply = gateway.complete(
        ChatRequest(
            system_prompt=system,
            parts=(TextPart(query),),
            temperature=config.temperature,
            max_output_tokens=config.max_output_tokens,
        )
    )
    try:
        obj = parse_json_reply(reply)
        if not isinstance(obj, dict):
            raise ValueError("keyword reply is not an object")
        low = obj.get("low_level", [])
        high = obj.get("high_level", [])
        if not isinstance(low, list) or not isinstance(high, list):
            raise ValueError("keyword levels must be lists")
        return KeywordSplit(
            low_level=[str(k) for k in low], high_level=[str(k) for k in high]
        )
    except ValueError as exc:
        logger.warning(
            "keyword split unparseable (%s); using whole query as high-level", exc
        )
        return KeywordSplit(low_level=[], high_level=[query])


def _level_queries(keywords: list[str], mode: str) -> list[str]:
    if not keywords:
        return []
    if mode == "joined":
        return [", ".join(keywords)]
    return list(keywords)


def _best_hits(
    queries: list[str], store: VectorStore | None, k: int, gateway: Gateway
) -> dict:
    """Union of per-query top-k, each key scored by its best similarity."""
    best: dict = {}
    if store is None or not len(store):
        return best
    for query in queries:
        vector = gateway.embed_text(query)
        for key, sim in store.top_k(vector, k):
            if sim > best.get(key, float("-inf")):
                best[key] = sim
    return best


def retrieve_graph_context_scored(
    keywords: KeywordSplit,
    graph: KnowledgeGraph,
    stores: StoreSet,
    gateway: Gateway,
    config: PipelineConfig,
) -> tuple[Subgraph, dict[str, float], dict[tuple[str, str], float]]:
    """Dual-level graph retrieval, returning the subgraph and hit scores.

    Low-level keywords query the entity store, high-level keywords the
    relation store, top ``config.k`` each.  Matched entities seed the
    expansion directly; matched relations contribute both endpoints.
    """
    if graph.is_empty:
        return Subgraph(origin_generation=graph.generation), {}, {}
    entity_scores = _best_hits(
        _level_queries(keywords.low_level, config.keyword_query_mode),
        stores.entities,
        config.k,
        gateway,
    )
    relation_scores = _best_hits(
        _level_queries(keywords.high_level, config.keyword_query_mode),
        stores.relations,
        config.k,
        gateway,
    )
    seeds: set[str] = set(entity_scores)
    for source, target in relation_scores:
        seeds.add(source)
        seeds.add(target)
    subgraph = one_hop_expand(graph, sorted(seeds))
    return subgraph, entity_scores, relation_scores


def retrieve_graph_context(
    keywords: KeywordSplit,
    graph: KnowledgeGraph,
    stores: StoreSet,
    gateway: Gateway,
    config: PipelineConfig,
) -> Subgraph:
    """Dual-level graph retrieval (see the scored variant for internals)."""
    subgraph, _, _ = retrieve_graph_context_scored(
        keywords, graph, stores, gateway, config
    )
    return subgraph


def retrieve_pages(
    query: str, page_store: VectorStore, gateway: Gateway, m: int
) -> list[tuple[str, int, float]]:
    """Top ``m`` pages by similarity between the query text embedding and
    the stored page-render embeddings (one shared embedding space)."""
    vector = gateway.embed_text(query)
    hits = page_store.top_k(vector, m)
    return [(doc, index, sim) for (doc, index), sim in hits]


def assemble_context(
    query: str,
    graph: KnowledgeGraph,
    stores: StoreSet,
    gateway: Gateway,
    config: PipelineConfig,
) -> RetrievedContext:
    """Run the full retrieval stage for one query.

    With ``page_only_retrieval`` set, graph retrieval is skipped and the
    subgraph comes back empty; the keyword split still runs so the switch
    isolates exactly one stage.  A missing or empty page store yields an
    empty page list (graph-only operation).
    """
    keywords = extract_keywords(query, gateway, config)
    if config.page_only_retrieval:
        subgraph: Subgraph = Subgraph(origin_generation=graph.generation)
        entity_scores: dict[str, float] = {}
        relation_scores: dict[tuple[str, str], float] = {}
    else:
        subgraph, entity_scores, relation_scores = retrieve_graph_context_scored(
            keywords, graph, stores, gateway, config
        )
    subgraph_text = serialize_subgraph(subgraph, config.context_budget_tokens)
    if stores.pages is not None and len(stores.pages):
        pages = retrieve_pages(query, stores.pages, gateway, config.m)
    else:
        pages = []
    return RetrievedContext(
        query=query,
        keywords=keywords,
        subgraph=subgraph,
        subgraph_text=subgraph_text,
        pages=pages,
        entity_scores=entity_scores,
        relation_scores=relation_scores,
    )
