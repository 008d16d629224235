"""Multimodal knowledge-graph retrieval-augmented generation.

The pipeline turns a page-structured document corpus (text plus figure,
table, and page-render images) into a knowledge graph, refines the graph
with a second guided pass, indexes graph records and page renders into a
shared embedding space, and answers questions by combining graph
retrieval with direct page evidence.
"""

from .config import PipelineConfig, load_config
from .corpus import Corpus, PageAsset, PageBundle, load_manifest, page_bundles
from .gateway import (
    ChatRequest,
    Gateway,
    HttpBackend,
    ImagePart,
    MockBackend,
    TextPart,
)
from .generation import AnswerBundle, answer
from .graph import (
    Entity,
    KnowledgeGraph,
    PageExtraction,
    Relation,
    Subgraph,
    join_extractions,
    load_graph,
    normalize_name,
    one_hop_expand,
    save_graph,
    serialize_subgraph,
)
from .retrieval import KeywordSplit, RetrievedContext, assemble_context
from .vectorstore import StoreSet, VectorStore, index_graph, index_pages

__version__ = "0.1.0"

__all__ = [
    "AnswerBundle",
    "ChatRequest",
    "Corpus",
    "Entity",
    "Gateway",
    "HttpBackend",
    "ImagePart",
    "KeywordSplit",
    "KnowledgeGraph",
    "MockBackend",
    "PageAsset",
    "PageBundle",
    "PageExtraction",
    "PipelineConfig",
    "Relation",
    "RetrievedContext",
    "StoreSet",
    "Subgraph",
    "TextPart",
    "VectorStore",
    "answer",
    "assemble_context",
    "index_graph",
    "index_pages",
    "join_extractions",
    "load_config",
    "load_graph",
    "load_manifest",
    "normalize_name",
    "one_hop_expand",
    "page_bundles",
    "save_graph",
    "serialize_subgraph",
]
