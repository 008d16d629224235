"""Shared scaffolding for the demo scripts.

Each demo runs completely offline: a tiny corpus is generated on the fly
and every model reply is scripted into the deterministic mock backend, so
the demos show the real pipeline code paths without any API key.  The
staging trick is the same one the test suite uses — build the exact prompt
the pipeline will send, register a reply under its request hash, and run
the pipeline against a strict-mode mock that only answers scripted prompts.
"""

from __future__ import annotations

import logging
import struct
import zlib
from pathlib import Path

# The demos narrate what happens themselves; keep library logging quiet.
logging.basicConfig(level=logging.ERROR)

from mmkgrag.config import PipelineConfig
from mmkgrag.corpus import Corpus, load_manifest, page_bundles
from mmkgrag.extraction import (
    build_initial_prompt,
    build_refinement_context,
    build_refinement_prompt,
    entity_record_line,
    parse_extraction,
    relation_record_line,
)
from mmkgrag.gateway import ChatRequest, Gateway, MockBackend, request_hash
from mmkgrag.graph import KnowledgeGraph, join_extractions, merge_into
from mmkgrag.vectorstore import StoreSet, index_graph

import json


def tiny_png(rgb: tuple[int, int, int], size: tuple[int, int] = (4, 4)) -> bytes:
    """A minimal valid PNG; distinct colors give distinct file bytes."""
    width, height = size

    def chunk(tag: bytes, data: bytes) -> bytes:
        return (
            struct.pack(">I", len(data))
            + tag
            + data
            + struct.pack(">I", zlib.crc32(tag + data) & 0xFFFFFFFF)
        )

    header = struct.pack(">IIBBBBB", width, height, 8, 2, 0, 0, 0)
    row = b"\x00" + bytes(rgb) * width
    body = zlib.compress(row * height)
    return (
        b"\x89PNG\r\n\x1a\n"
        + chunk(b"IHDR", header)
        + chunk(b"IDAT", body)
        + chunk(b"IEND", b"")
    )


def build_demo_corpus(root: Path) -> Corpus:
    """Two short 'documents' about a fictional acquisition, with figures.

    alpha page 0: the acquisition, plus a timeline figure.
    alpha page 1: the buyer's product.
    beta  page 0: the acquired company's labs, plus an output chart.
    beta  page 1: intentionally empty (scanned blank page).
    """
    root.mkdir(parents=True, exist_ok=True)
    color = [0]

    def png(rel: str) -> str:
        color[0] += 1
        path = root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(tiny_png((color[0] * 37 % 251, color[0] * 11 % 249, 60)))
        return rel

    manifest = {
        "corpus_id": "demo",
        "documents": [
            {
                "doc_id": "alpha",
                "pages": [
                    {
                        "index": 0,
                        "text": "Apex acquires Beacon for its research pipeline.",
                        "assets": [
                            {"kind": "figure", "path": png("assets/alpha_0_fig1.png"),
                             "caption": "Deal timeline."},
                            {"kind": "page_render", "path": png("renders/alpha_0.png")},
                        ],
                    },
                    {
                        "index": 1,
                        "text": "Apex sells Atlas, a market mapping product.",
                        "assets": [
                            {"kind": "page_render", "path": png("renders/alpha_1.png")},
                        ],
                    },
                ],
            },
            {
                "doc_id": "beta",
                "pages": [
                    {
                        "index": 0,
                        "text": "Beacon runs three research labs.",
                        "assets": [
                            {"kind": "figure", "path": png("assets/beta_0_fig1.png"),
                             "caption": "Lab output by quarter."},
                            {"kind": "page_render", "path": png("renders/beta_0.png")},
                        ],
                    },
                    {"index": 1, "text": "", "assets": []},
                ],
            },
        ],
    }
    (root / "corpus.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return load_manifest(root)


def demo_config() -> PipelineConfig:
    config = PipelineConfig()
    config.embedding_dim = 16  # small embeddings keep the demo output readable
    config.retry_base_delay = 0.0
    return config


def script_reply(script: dict[str, str], request: ChatRequest, reply: str) -> None:
    """Register a scripted reply under the request's stable hash."""
    script[request_hash(request)] = reply


INITIAL_REPLIES = {
    ("alpha", 0): "\n".join([
        entity_record_line("Apex", "organization", "Buyer in the acquisition."),
        entity_record_line("Beacon", "organization", "Research company bought by Apex."),
        relation_record_line("Apex", "Beacon", "Apex acquired Beacon.", ["acquisition"]),
    ]),
    ("alpha", 1): "\n".join([
        entity_record_line("Atlas", "concept", "Market mapping product."),
        relation_record_line("Apex", "Atlas", "Apex sells Atlas.", ["product line"]),
    ]),
    ("beta", 0): entity_record_line("Beacon", "organization", "Operates three research labs."),
}

REFINEMENT_FIGURE_ASSET = "beta.p0.figure1"
REFINEMENT_REPLIES = {
    ("alpha", 0): "NONE",
    ("alpha", 1): "NONE",
    ("beta", 0): "\n".join([
        entity_record_line("Lab Output Chart", "visual_figure",
                           "Quarterly research output chart.", REFINEMENT_FIGURE_ASSET),
        relation_record_line("Beacon", "Lab Output Chart",
                             "Beacon's lab output is charted by quarter.", ["research output"]),
    ]),
}


def stage_first_pass(corpus: Corpus, config: PipelineConfig,
                     script: dict[str, str]) -> KnowledgeGraph:
    """Script one extraction reply per page and return the merged graph."""
    extractions = []
    for page in page_bundles(corpus):
        reply = INITIAL_REPLIES[page.page_id]
        script_reply(script, build_initial_prompt(page, config), reply)
        extractions.append(
            parse_extraction(reply, page, type_vocabulary=config.type_vocabulary)
        )
    return join_extractions(extractions)


def stage_refinement(corpus: Corpus, first_pass: KnowledgeGraph,
                     config: PipelineConfig, script: dict[str, str],
                     embed_aliases: dict[str, str] | None = None) -> KnowledgeGraph:
    """Script the refinement replies and return the expected refined graph.

    Mirrors what `refine_graph` will do: each page is shown its related
    known records and asked only for what is missing; one page contributes
    a figure entity plus a cross-modal relation, the rest answer NONE.
    """
    stage_gateway = Gateway(
        MockBackend(dim=config.embedding_dim, seed=config.seed, embed_aliases=embed_aliases),
        retry_base_delay=0.0,
    )
    refined = first_pass.copy(generation=1)
    entity_store, relation_store = index_graph(refined, stage_gateway)
    stores = StoreSet(entities=entity_store, relations=relation_store)
    deltas = []
    for page in page_bundles(corpus):
        context = build_refinement_context(page, refined, stores, stage_gateway, config)
        reply = REFINEMENT_REPLIES[page.page_id]
        script_reply(script, build_refinement_prompt(page, context, config), reply)
        if reply != "NONE":
            deltas.append(
                parse_extraction(reply, page, type_vocabulary=config.type_vocabulary)
            )
    for delta in sorted(deltas, key=lambda d: d.page_id):
        merge_into(refined, delta)
    return refined


def strict_gateway(script: dict[str, str], config: PipelineConfig,
                   embed_aliases: dict[str, str] | None = None) -> Gateway:
    """A gateway whose backend only answers scripted prompts."""
    backend = MockBackend(
        dim=config.embedding_dim, seed=config.seed,
        script=dict(script), embed_aliases=embed_aliases, mode="strict",
    )
    return Gateway(backend, retry_base_delay=0.0)


def banner(title: str) -> None:
    print()
    print("=" * 72)
    print(title)
    print("=" * 72)
