"""Graph construction: per-page extraction and subgraph-guided refinement.

The initial pass sends every non-empty page to the model independently
and folds the parsed replies into one graph.  The refinement pass then
revisits each page with the slice of that graph most related to it and
asks only for what is missing; its replies are parsed the same way and
merged additively, so refinement never removes anything.

Model replies are line-oriented records using a configurable delimiter::

    ("entity"<|>APEX CORP<|>organization<|>Maker of navigation software.)
    ("entity"<|>REVENUE BY REGION<|>visual_table<|>Quarterly table.<|>deck.p3.table1)
    ("relation"<|>APEX CORP<|>REVENUE BY REGION<|>The table reports Apex revenue.<|>reports, revenue)

Malformed lines are dropped with a diagnostic; a reply with no valid
records at all raises NoValidRecords for the caller's failure policy.
"""

from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .config import PipelineConfig
from .corpus import Corpus, PageBundle, page_bundles
from .diagnostics import DiagnosticsLog
from .errors import (
    BackendError,
    EmptyAfterNormalization,
    EmptyGraph,
    ExtractionFailed,
    NoValidRecords,
)
from .gateway import ChatRequest, Gateway, ImagePart, TextPart
from .graph import (
    Entity,
    KnowledgeGraph,
    PageExtraction,
    Relation,
    join_extractions,
    merge_into,
    normalize_name,
    one_hop_expand,
    serialize_subgraph,
)
from .prompts import load_template, render_template
from .vectorstore import StoreSet, VectorStore, index_graph

logger = logging.getLogger(__name__)

REFINEMENT_EMPTY_REPLY = "NONE"

_UNSAFE_FILENAME = re.compile(r"[^A-Za-z0-9._-]")


@dataclass(frozen=True)
class ExtractionRecord:
    """One parsed reply line, before graph types are built."""

    kind: str  # "entity" | "relation"
    name: str = ""
    entity_type: str = ""
    description: str = ""
    asset_ref: str | None = None
    source: str = ""
    target: str = ""
    keywords: tuple[str, ...] = ()


def entity_record_line(
    name: str,
    entity_type: str,
    description: str,
    asset_ref: str | None = None,
    delimiter: str = "<|>",
) -> str:
    """Render an entity record the way the model is asked to emit it."""
    fields = ["\"entity\"", name, entity_type, description]
    if asset_ref is not None:
        fields.append(asset_ref)
    return "(" + delimiter.join(fields) + ")"


def relation_record_line(
    source: str,
    target: str,
    description: str,
    keywords: Sequence[str],
    delimiter: str = "<|>",
) -> str:
    """Render a relation record the way the model is asked to emit it."""
    fields = ["\"relation\"", source, target, description, ", ".join(keywords)]
    return "(" + delimiter.join(fields) + ")"


def parse_record(line: str, delimiter: str = "<|>") -> ExtractionRecord | None:
    """Parse one reply line; None when the line is not a record at all."""
    line = line.strip()
    if not line:
        return None
    # tolerate missing/extra parentheses around the record
    body = line
    if body.startswith("("):
        body = body[1:]
    if body.endswith(")"):
        body = body[:-1]
    fields = [f.strip() for f in body.split(delimiter)]
    tag = fields[0].strip("\"' ").lower()
    if tag == "entity":
        if len(fields) not in (4, 5):
            raise NoValidRecords(f"entity record needs 4 or 5 fields: {line!r}")
        name, entity_type, description = fields[1], fields[2].lower(), fields[3]
        asset_ref = fields[4] if len(fields) == 5 and fields[4] else None
        if not description:
            raise NoValidRecords(f"entity record has empty description: {line!r}")
        return ExtractionRecord(
            kind="entity",
            name=name,
            entity_type=entity_type,
            description=description,
            asset_ref=asset_ref,
        )
    if tag == "relation":
        if len(fields) != 5:
            raise NoValidRecords(f"relation record needs 5 fields: {line!r}")
        keywords = tuple(k.strip() for k in fields[4].split(",") if k.strip())
        if not fields[3]:
            raise NoValidRecords(f"relation record has empty description: {line!r}")
        return ExtractionRecord(
            kind="relation",
            source=fields[1],
            target=fields[2],
            description=fields[3],
            keywords=keywords,
        )
    return None


def parse_extraction(
    reply: str,
    page: PageBundle,
    delimiter: str = "<|>",
    type_vocabulary: Sequence[str] | None = None,
    diagnostics: DiagnosticsLog | None = None,
) -> PageExtraction:
    """Parse a full model reply for one page into graph parts.

    Invalid lines are dropped and logged, never fatal on their own; a
    reply that yields no valid record raises NoValidRecords so callers
    can apply their page-failure policy.
    """
    vocabulary = set(type_vocabulary or ())
    asset_kinds = {a.asset_id: a.kind for a in page.visual_elements()}
    extraction = PageExtraction(doc_id=page.doc_id, page_index=page.page_index)
    by_name: dict[str, Entity] = {}
    by_key: dict[tuple[str, str], Relation] = {}

    def drop(line: str, reason: str) -> None:
        if diagnostics is not None:
            diagnostics.emit(
                "record_dropped",
                doc_id=page.doc_id,
                page_index=page.page_index,
                reason=reason,
                line=line[:200],
            )
        logger.debug("dropped record (%s): %r", reason, line)

    for line in reply.splitlines():
        if not line.strip():
            continue
        try:
            record = parse_record(line, delimiter)
        except NoValidRecords as exc:
            drop(line, str(exc))
            continue
        if record is None:
            drop(line, "not a record")
            continue
        try:
            if record.kind == "entity":
                if vocabulary and record.entity_type not in vocabulary:
                    drop(line, f"unknown entity type {record.entity_type!r}")
                    continue
                name = normalize_name(record.name)
                asset_ref = record.asset_ref
                modality = "text"
                if asset_ref is not None:
                    kind = asset_kinds.get(asset_ref)
                    if kind in ("figure", "table"):
                        modality = kind
                    else:
                        drop(line, f"unknown asset reference {asset_ref!r}")
                        asset_ref = None
                entity = Entity(
                    name=name,
                    entity_type=record.entity_type,
                    descriptions=[record.description],
                    source_pages={page.page_id},
                    modality=modality,
                    asset_ref=asset_ref,
                )
                if name in by_name:
                    existing = by_name[name]
                    if record.description not in existing.descriptions:
                        existing.descriptions.append(record.description)
                else:
                    by_name[name] = entity
                    extraction.entities.append(entity)
            else:
                source = normalize_name(record.source)
                target = normalize_name(record.target)
                if source == target:
                    drop(line, "self-relation")
                    continue
                relation = Relation(
                    source=source,
                    target=target,
                    descriptions=[record.description],
                    keywords=list(record.keywords),
                    source_pages={page.page_id},
                )
                if relation.key in by_key:
                    existing_rel = by_key[relation.key]
                    if record.description not in existing_rel.descriptions:
                        existing_rel.descriptions.append(record.description)
                    seen = {k.lower() for k in existing_rel.keywords}
                    for kw in record.keywords:
                        if kw.lower() not in seen:
                            existing_rel.keywords.append(kw)
                            seen.add(kw.lower())
                else:
                    by_key[relation.key] = relation
                    extraction.relations.append(relation)
        except EmptyAfterNormalization:
            drop(line, "name empty after normalization")
    if not extraction.entities and not extraction.relations:
        raise NoValidRecords(
            f"page {page.doc_id} #{page.page_index}: reply had no valid records"
        )
    return extraction


# --- prompt assembly ----------------------------------------------------------

def _fallback_name(page: PageBundle, kind: str, ordinal: int) -> str:
    return f"{page.doc_id} page {page.page_index} {kind} {ordinal}"


def _page_parts(page: PageBundle, include_images: bool) -> list:
    """Content parts shared by both extraction prompts."""
    parts: list = [
        TextPart(
            f"Document: {page.doc_id}\nPage: {page.page_index}\n\n"
            f"Page text:\n{page.text if page.text.strip() else '(no text)'}"
        )
    ]
    if not include_images:
        return parts
    visuals = page.visual_elements()
    if visuals:
        counts: dict[str, int] = {}
        lines = ["Attached visual elements:"]
        for asset in visuals:
            counts[asset.kind] = counts.get(asset.kind, 0) + 1
            caption = asset.caption if asset.caption else "none"
            lines.append(
                f"- id {asset.asset_id}: {asset.kind}, caption: {caption}, "
                f"fallback name: {_fallback_name(page, asset.kind, counts[asset.kind])}"
            )
        parts.append(TextPart("\n".join(lines)))
        for asset in visuals:
            parts.append(ImagePart(path=str(asset.path), tag=asset.asset_id))
    render = page.page_render
    if render is not None:
        parts.append(ImagePart(path=str(render.path), tag=render.asset_id))
    return parts


def build_initial_prompt(page: PageBundle, config: PipelineConfig) -> ChatRequest:
    """Extraction request for one page: text, visuals, then the page render.

    With ``text_only_graph`` set, image parts (and the attachment list)
    are omitted and the graph is built from page text alone.
    """
    system = render_template(
        load_template("initial_extraction.txt", config.prompt_dir or None),
        type_vocabulary=", ".join(config.type_vocabulary),
        delimiter=config.record_delimiter,
    )
    return ChatRequest(
        system_prompt=system,
        parts=tuple(_page_parts(page, include_images=not config.text_only_graph)),
        temperature=config.temperature,
        max_output_tokens=config.max_output_tokens,
    )


def build_refinement_prompt(
    page: PageBundle, context_text: str, config: PipelineConfig
) -> ChatRequest:
    """Refinement request: the page again, plus its related known records."""
    system = render_template(
        load_template("refinement.txt", config.prompt_dir or None),
        type_vocabulary=", ".join(config.type_vocabulary),
        delimiter=config.record_delimiter,
    )
    parts = _page_parts(page, include_images=not config.text_only_graph)
    parts.append(
        TextPart("Known graph records:\n" + (context_text if context_text else "(none)"))
    )
    return ChatRequest(
        system_prompt=system,
        parts=tuple(parts),
        temperature=config.temperature,
        max_output_tokens=config.max_output_tokens,
    )


# --- initial pass -------------------------------------------------------------

def _checkpoint_path(
    checkpoint_dir: Path, page: PageBundle, suffix: str
) -> Path:
    doc = _UNSAFE_FILENAME.sub("_", page.doc_id)
    return checkpoint_dir / f"{doc}.{page.page_index}.{suffix}.json"


def _run_pages(
    pages: list[PageBundle],
    worker,
    concurrency: int,
    diagnostics: DiagnosticsLog | None,
    stage: str,
) -> list[PageExtraction]:
    """Run a per-page worker across pages; failures isolate to their page."""
    parts: list[PageExtraction] = []
    failures = 0
    with ThreadPoolExecutor(max_workers=max(1, concurrency)) as pool:
        for page, outcome in zip(pages, pool.map(lambda p: _guard(worker, p), pages)):
            if isinstance(outcome, Exception):
                failures += 1
                logger.warning(
                    "%s failed for page %s #%d: %s",
                    stage, page.doc_id, page.page_index, outcome,
                )
                if diagnostics is not None:
                    diagnostics.emit(
                        "page_failed",
                        stage=stage,
                        doc_id=page.doc_id,
                        page_index=page.page_index,
                        error=type(outcome).__name__,
                        detail=str(outcome)[:200],
                    )
            elif outcome is not None:
                parts.append(outcome)
    if pages and failures == len(pages):
        raise ExtractionFailed(f"{stage}: every page failed ({failures} of {len(pages)})")
    return parts


def _guard(worker, page: PageBundle):
    try:
        return worker(page)
    except (BackendError, NoValidRecords, OSError) as exc:
        return exc


def extract_initial(
    corpus: Corpus,
    gateway: Gateway,
    config: PipelineConfig,
    checkpoint_dir: str | Path | None = None,
    diagnostics: DiagnosticsLog | None = None,
) -> KnowledgeGraph:
    """Build the first-pass graph from every non-empty page of the corpus.

    Pages run concurrently up to ``config.concurrency``; a failed page is
    logged and skipped, and the run aborts only when every page failed.
    With a checkpoint directory, each parsed page is saved as
    ``<doc>.<page>.g0.json`` and found checkpoints are reused without a
    model call, so an interrupted run resumes where it stopped.
    """
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
    if checkpoint_dir:
        checkpoint_dir.mkdir(parents=True, exist_ok=True)

    def worker(page: PageBundle) -> PageExtraction:
        if checkpoint_dir:
            path = _checkpoint_path(checkpoint_dir, page, "g0")
            if path.is_file():
                return PageExtraction.from_json(path.read_text(encoding="utf-8"))
        request = build_initial_prompt(page, config)
        reply = gateway.complete(request)
        extraction = parse_extraction(
            reply,
            page,
            delimiter=config.record_delimiter,
            type_vocabulary=config.type_vocabulary,
            diagnostics=diagnostics,
        )
        if checkpoint_dir:
            _checkpoint_path(checkpoint_dir, page, "g0").write_text(
                extraction.to_json() + "\n", encoding="utf-8"
            )
        return extraction

    pages = list(page_bundles(corpus))
    parts = _run_pages(pages, worker, config.concurrency, diagnostics, "extraction")
    return join_extractions(parts, generation=0, diagnostics=diagnostics)


# --- refinement pass ----------------------------------------------------------

def page_seed_queries(graph: KnowledgeGraph, doc_id: str, page_index: int) -> list[str]:
    """Retrieval queries for a page: its entity names, then its relation
    keywords, deduplicated case-insensitively in that order."""
    page = (doc_id, page_index)
    queries: list[str] = []
    seen: set[str] = set()
    for name in sorted(graph.entities):
        if page in graph.entities[name].source_pages and name.lower() not in seen:
            queries.append(name)
            seen.add(name.lower())
    for key in sorted(graph.relations):
        relation = graph.relations[key]
        if page in relation.source_pages:
            for keyword in relation.keywords:
                if keyword.lower() not in seen:
                    queries.append(keyword)
                    seen.add(keyword.lower())
    return queries


def refinement_candidates(
    queries: Sequence[str],
    entity_store: VectorStore,
    relation_store: VectorStore,
    top: int,
    gateway: Gateway,
) -> tuple[list[tuple[str, float]], list[tuple[tuple[str, str], float]]]:
    """Union of per-query nearest records, scored by best similarity.

    Returns up to ``top`` entity names and ``top`` relation keys, each
    sorted by descending similarity with ties broken by key.
    """
    entity_best: dict[str, float] = {}
    relation_best: dict[tuple[str, str], float] = {}
    for query in queries:
        vector = gateway.embed_text(query)
        if len(entity_store):
            for key, sim in entity_store.top_k(vector, top):
                if sim > entity_best.get(key, float("-inf")):
                    entity_best[key] = sim
        if len(relation_store):
            for key, sim in relation_store.top_k(vector, top):
                if sim > relation_best.get(key, float("-inf")):
                    relation_best[key] = sim
    entities = sorted(entity_best.items(), key=lambda kv: (-kv[1], kv[0]))[:top]
    relations = sorted(relation_best.items(), key=lambda kv: (-kv[1], kv[0]))[:top]
    return entities, relations


def build_refinement_context(
    page: PageBundle,
    graph: KnowledgeGraph,
    stores: StoreSet,
    gateway: Gateway,
    config: PipelineConfig,
) -> str:
    """Serialized graph slice most related to one page.

    The page's own entity names and relation keywords query the entity
    and relation stores; the union of hits seeds a one-hop expansion and
    the result is serialized within the refinement token budget.
    """
    if graph.is_empty:
        raise EmptyGraph("refinement context needs a non-empty graph")
    queries = page_seed_queries(graph, page.doc_id, page.page_index)
    entities, relations = refinement_candidates(
        queries, stores.entities, stores.relations, config.refinement_top, gateway
    )
    seeds: set[str] = {name for name, _ in entities}
    for (source, target), _ in relations:
        seeds.add(source)
        seeds.add(target)
    subgraph = one_hop_expand(graph, sorted(seeds))
    return serialize_subgraph(subgraph, config.refinement_budget_tokens)


def refine_graph(
    corpus: Corpus,
    graph: KnowledgeGraph,
    gateway: Gateway,
    config: PipelineConfig,
    stores: StoreSet | None = None,
    checkpoint_dir: str | Path | None = None,
    diagnostics: DiagnosticsLog | None = None,
) -> KnowledgeGraph:
    """Run the refinement rounds and return the refined graph.

    Each round revisits every page with its related known records and
    asks only for missing items; replies merge additively, so the result
    always contains the input graph.  A reply of ``NONE`` (or one with no
    valid records) is an empty delta, not an error.  With zero rounds the
    result is a content-equal copy of the input.
    """
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
    if checkpoint_dir:
        checkpoint_dir.mkdir(parents=True, exist_ok=True)
    refined = graph.copy(generation=1)
    if graph.is_empty:
        logger.warning("refinement skipped: graph has no entities")
        return refined
    pages = list(page_bundles(corpus))

    for round_no in range(1, config.refinement_rounds + 1):
        round_stores = stores if (round_no == 1 and stores is not None) else None
        if round_stores is None:
            entity_store, relation_store = index_graph(refined, gateway)
            round_stores = StoreSet(entities=entity_store, relations=relation_store)
        suffix = "g1" if round_no == 1 else f"g1r{round_no}"
        current = refined

        def worker(page: PageBundle) -> PageExtraction:
            if checkpoint_dir:
                path = _checkpoint_path(checkpoint_dir, page, suffix)
                if path.is_file():
                    return PageExtraction.from_json(path.read_text(encoding="utf-8"))
            context = build_refinement_context(
                page, current, round_stores, gateway, config
            )
            request = build_refinement_prompt(page, context, config)
            reply = gateway.complete(request)
            delta = PageExtraction(doc_id=page.doc_id, page_index=page.page_index)
            if reply.strip() != REFINEMENT_EMPTY_REPLY:
                try:
                    delta = parse_extraction(
                        reply,
                        page,
                        delimiter=config.record_delimiter,
                        type_vocabulary=config.type_vocabulary,
                        diagnostics=diagnostics,
                    )
                except NoValidRecords:
                    logger.info(
                        "refinement reply for %s #%d had no records; nothing added",
                        page.doc_id, page.page_index,
                    )
                    if diagnostics is not None:
                        diagnostics.emit(
                            "refinement_empty",
                            doc_id=page.doc_id,
                            page_index=page.page_index,
                        )
            if checkpoint_dir:
                _checkpoint_path(checkpoint_dir, page, suffix).write_text(
                    delta.to_json() + "\n", encoding="utf-8"
                )
            return delta

        deltas = _run_pages(
            pages, worker, config.concurrency, diagnostics, f"refinement round {round_no}"
        )
        for delta in sorted(deltas, key=lambda d: d.page_id):
            merge_into(refined, delta, diagnostics)
    return refined
