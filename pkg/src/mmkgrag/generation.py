"""Answer generation: two-stage by default, single-pass as an ablation.

Two-stage runs two intermediate answers in parallel — one grounded in the
retrieved graph records, one in the retrieved page images — then a
synthesis call merges them.  If one intermediate fails or its evidence is
empty, synthesis degrades to the surviving side with a warning.  The
single-pass mode folds graph records and page images into one request.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .config import PipelineConfig
from .corpus import Corpus
from .errors import BackendError, GenerationShortfall
from .gateway import ChatRequest, Gateway, ImagePart, TextPart
from .graph import KnowledgeGraph
from .prompts import load_template, render_template
from .retrieval import RetrievedContext, assemble_context
from .vectorstore import StoreSet

logger = logging.getLogger(__name__)

MODES = ("two_stage", "single_pass")


@dataclass
class Provenance:
    """What the answer was grounded in."""

    entities: list[str] = field(default_factory=list)
    relations: list[tuple[str, str]] = field(default_factory=list)
    pages: list[tuple[str, int]] = field(default_factory=list)

    def to_json_obj(self) -> dict:
        return {
            "entities": list(self.entities),
            "relations": [list(key) for key in self.relations],
            "pages": [list(page) for page in self.pages],
        }


@dataclass
class AnswerBundle:
    """Final answer plus the intermediates and provenance behind it."""

    query: str
    mode: str
    final_answer: str
    graph_answer: str | None = None
    page_answer: str | None = None
    provenance: Provenance = field(default_factory=Provenance)

    def to_json_obj(self) -> dict:
        return {
            "query": self.query,
            "mode": self.mode,
            "final_answer": self.final_answer,
            "graph_answer": self.graph_answer,
            "page_answer": self.page_answer,
            "provenance": self.provenance.to_json_obj(),
        }


def _user_request(text: str, config: PipelineConfig, images: list[ImagePart] | None = None) -> ChatRequest:
    parts: list = [TextPart(text)]
    if images:
        parts.extend(images)
    return ChatRequest(
        system_prompt="",
        parts=tuple(parts),
        temperature=config.temperature,
        max_output_tokens=config.max_output_tokens,
    )


def answer_from_graph(
    query: str, subgraph_text: str, gateway: Gateway, config: PipelineConfig
) -> str:
    """Intermediate answer grounded only in serialized graph records."""
    prompt = render_template(
        load_template("graph_answer.txt", config.prompt_dir or None),
        query=query,
        subgraph=subgraph_text,
    )
    return gateway.complete(_user_request(prompt, config))


def answer_from_pages(
    query: str,
    page_images: list[ImagePart],
    gateway: Gateway,
    config: PipelineConfig,
) -> str:
    """Intermediate answer grounded only in the retrieved page renders."""
    prompt = render_template(
        load_template("page_answer.txt", config.prompt_dir or None),
        query=query,
    )
    return gateway.complete(_user_request(prompt, config, images=page_images))


def synthesize(
    query: str,
    graph_answer: str | None,
    page_answer: str | None,
    gateway: Gateway,
    config: PipelineConfig,
) -> str:
    """Merge the intermediates into the final answer.

    With only one intermediate available the single-source template is
    used; with neither there is nothing to say and GenerationShortfall
    is raised.
    """
    if graph_answer is not None and page_answer is not None:
        prompt = render_template(
            load_template("synthesis.txt", config.prompt_dir or None),
            query=query,
            graph_answer=graph_answer,
            page_answer=page_answer,
        )
    elif graph_answer is not None or page_answer is not None:
        prompt = render_template(
            load_template("synthesis_single.txt", config.prompt_dir or None),
            query=query,
            answer=graph_answer if graph_answer is not None else page_answer,
        )
    else:
        raise GenerationShortfall("no intermediate answer to synthesize from")
    return gateway.complete(_user_request(prompt, config))


def _page_images(context: RetrievedContext, corpus: Corpus) -> list[ImagePart]:
    images: list[ImagePart] = []
    for doc_id, page_index, _sim in context.pages:
        render = corpus.find_page(doc_id, page_index).page_render
        if render is None:
            continue
        images.append(ImagePart(path=str(render.path), tag=f"{doc_id} page {page_index}"))
    return images


def answer_from_context(
    context: RetrievedContext,
    corpus: Corpus,
    gateway: Gateway,
    config: PipelineConfig,
) -> AnswerBundle:
    """Generate the answer for an already-retrieved context."""
    query = context.query
    images = _page_images(context, corpus)
    provenance = Provenance(
        entities=[e.name for e in context.subgraph.entities],
        relations=[r.key for r in context.subgraph.relations],
        pages=[(doc, index) for doc, index, _ in context.pages],
    )
    has_graph = bool(context.subgraph_text)
    has_pages = bool(images)
    if not has_graph and not has_pages:
        raise GenerationShortfall(f"no evidence retrieved for query {query!r}")

    if config.single_pass:
        prompt = render_template(
            load_template("single_pass.txt", config.prompt_dir or None),
            query=query,
            subgraph=context.subgraph_text,
        )
        final = gateway.complete(_user_request(prompt, config, images=images))
        return AnswerBundle(
            query=query, mode="single_pass", final_answer=final, provenance=provenance
        )

    def graph_side() -> str | None:
        if not has_graph:
            return None
        return answer_from_graph(query, context.subgraph_text, gateway, config)

    def page_side() -> str | None:
        if not has_pages:
            return None
        return answer_from_pages(query, images, gateway, config)

    graph_answer: str | None = None
    page_answer: str | None = None
    with ThreadPoolExecutor(max_workers=2) as pool:
        graph_future = pool.submit(graph_side)
        page_future = pool.submit(page_side)
        try:
            graph_answer = graph_future.result()
        except BackendError as exc:
            logger.warning("graph-grounded intermediate failed: %s", exc)
        try:
            page_answer = page_future.result()
        except BackendError as exc:
            logger.warning("page-grounded intermediate failed: %s", exc)

    final = synthesize(query, graph_answer, page_answer, gateway, config)
    return AnswerBundle(
        query=query,
        mode="two_stage",
        final_answer=final,
        graph_answer=graph_answer,
        page_answer=page_answer,
        provenance=provenance,
    )


def answer(
    query: str,
    graph: KnowledgeGraph,
    stores: StoreSet,
    corpus: Corpus,
    gateway: Gateway,
    config: PipelineConfig,
) -> AnswerBundle:
    """Retrieve context for the query and generate the answer."""
    context = assemble_context(query, graph, stores, gateway, config)
    return answer_from_context(context, corpus, gateway, config)
