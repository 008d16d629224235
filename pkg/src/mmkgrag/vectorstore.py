"""Typed dense vector stores for entities, relations, and pages.

All three stores share one embedding space so that text queries retrieve
graph records and page renders alike.  Search is exact brute-force cosine
(vectors are unit-normalized, so a dot product) with a deterministic
tie-break, and persistence is a small binary format that round-trips
float32 vectors exactly.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np

from .corpus import Corpus, page_bundles
from .errors import DanglingEndpoint, EmptyIndex, IndexBuildError, InvalidStoreFile
from .gateway import Gateway
from .graph import Entity, KnowledgeGraph, Relation

logger = logging.getLogger(__name__)

STORE_MAGIC = b"VS1\n"
STORE_KINDS = ("entity", "relation", "page")
STORE_FILENAMES = {"entity": "entities.vs", "relation": "relations.vs", "page": "pages.vs"}


def text_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass
class EmbeddingRecord:
    """One indexed item: key, unit vector, and what produced it.

    ``content_hash`` identifies the embedded content (rendered text, or
    image bytes for pages); incremental re-indexing re-embeds a key only
    when its hash changed.
    """

    key: Hashable
    vector: np.ndarray
    rendered_text: str = ""
    content_hash: str = ""


class VectorStore:
    """Exact cosine top-k over records of one kind."""

    def __init__(self, kind: str, dim: int):
        if kind not in STORE_KINDS:
            raise ValueError(f"unknown store kind {kind!r}")
        if dim < 1:
            raise ValueError("dim must be at least 1")
        self.kind = kind
        self.dim = dim
        self._records: dict[Hashable, EmbeddingRecord] = {}
        self._matrix: np.ndarray | None = None
        self._order: list[Hashable] = []

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, key: Hashable) -> bool:
        return key in self._records

    def keys(self) -> list[Hashable]:
        return sorted(self._records)

    def get(self, key: Hashable) -> EmbeddingRecord:
        return self._records[key]

    def add(self, record: EmbeddingRecord) -> None:
        """Insert or replace the record at its key."""
        vector = np.asarray(record.vector, dtype=np.float32).reshape(-1)
        if vector.size != self.dim:
            raise ValueError(f"vector has dimension {vector.size}, store holds {self.dim}")
        record.vector = vector
        self._records[record.key] = record
        self._matrix = None

    def top_k(self, query: np.ndarray, k: int) -> list[tuple[Hashable, float]]:
        """The ``k`` records most similar to ``query``.

        Exact: every record is scored.  Results are ordered by descending
        similarity, ties broken by ascending key, and fewer than ``k``
        pairs come back only when the store is smaller than ``k``.
        """
        if k < 1:
            raise ValueError("k must be at least 1")
        if not self._records:
            raise EmptyIndex(f"{self.kind} store has no records")
        query = np.asarray(query, dtype=np.float32).reshape(-1)
        if query.size != self.dim:
            raise ValueError(f"query has dimension {query.size}, store holds {self.dim}")
        if self._matrix is None:
            self._order = sorted(self._records)
            self._matrix = np.vstack([self._records[key].vector for key in self._order])
        sims = self._matrix @ query
        ranked = sorted(
            zip(self._order, sims.tolist()), key=lambda pair: (-pair[1], pair[0])
        )
        return ranked[:k]

    # --- persistence ---

    def save(self, path: str | Path) -> None:
        """Write the store; the float32 block round-trips bit-exactly."""
        keys = sorted(self._records)
        header = {
            "kind": self.kind,
            "dim": self.dim,
            "count": len(keys),
        }
        blob = b"".join(
            self._records[key].vector.astype("<f4").tobytes() for key in keys
        )
        tail = {
            "keys": [self._key_to_json(key) for key in keys],
            "texts": [self._records[key].rendered_text for key in keys],
            "hashes": [self._records[key].content_hash for key in keys],
        }
        with Path(path).open("wb") as fh:
            fh.write(STORE_MAGIC)
            fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
            fh.write(blob)
            fh.write(json.dumps(tail, sort_keys=True, ensure_ascii=False).encode("utf-8"))

    @classmethod
    def load(cls, path: str | Path) -> "VectorStore":
        path = Path(path)
        try:
            data = path.read_bytes()
        except OSError as exc:
            raise InvalidStoreFile(f"{path}: {exc}") from exc
        if not data.startswith(STORE_MAGIC):
            raise InvalidStoreFile(f"{path}: not a vector store file")
        try:
            newline = data.index(b"\n", len(STORE_MAGIC))
            header = json.loads(data[len(STORE_MAGIC) : newline])
            kind, dim, count = header["kind"], header["dim"], header["count"]
            blob_start = newline + 1
            blob_end = blob_start + count * dim * 4
            vectors = np.frombuffer(data[blob_start:blob_end], dtype="<f4")
            if vectors.size != count * dim:
                raise InvalidStoreFile(f"{path}: truncated vector block")
            tail = json.loads(data[blob_end:])
            keys, texts, hashes = tail["keys"], tail["texts"], tail["hashes"]
            if not (len(keys) == len(texts) == len(hashes) == count):
                raise InvalidStoreFile(f"{path}: inconsistent record count")
        except InvalidStoreFile:
            raise
        except (KeyError, ValueError, TypeError) as exc:
            raise InvalidStoreFile(f"{path}: {exc}") from exc
        store = cls(kind, dim)
        for i, raw_key in enumerate(keys):
            store.add(
                EmbeddingRecord(
                    key=cls._key_from_json(kind, raw_key),
                    vector=vectors[i * dim : (i + 1) * dim].copy(),
                    rendered_text=texts[i],
                    content_hash=hashes[i],
                )
            )
        return store

    @staticmethod
    def _key_to_json(key: Hashable):
        return list(key) if isinstance(key, tuple) else key

    @staticmethod
    def _key_from_json(kind: str, raw: object) -> Hashable:
        if kind == "entity":
            return raw
        doc_or_source, second = raw
        return (doc_or_source, int(second)) if kind == "page" else (doc_or_source, second)


@dataclass(frozen=True)
class StoreSet:
    """The stores one pipeline run works with; unused ones may stay None."""

    entities: VectorStore | None = None
    relations: VectorStore | None = None
    pages: VectorStore | None = None


# --- graph and page rendering --------------------------------------------------

def render_entity_text(entity: Entity) -> str:
    """Text embedded for an entity: name, then its accumulated descriptions."""
    return f"{entity.name}: " + "; ".join(entity.descriptions)


def render_relation_text(relation: Relation, graph: KnowledgeGraph) -> str:
    """Text embedded for a relation: keywords, endpoints, descriptions."""
    for endpoint in relation.key:
        if endpoint not in graph.entities:
            raise DanglingEndpoint(
                f"relation {relation.source!r} -> {relation.target!r}: "
                f"endpoint {endpoint!r} missing from graph"
            )
    return (
        ", ".join(relation.keywords)
        + f" | {relation.source} -> {relation.target} | "
        + "; ".join(relation.descriptions)
    )


# --- index construction ---------------------------------------------------------

def _reusable(previous: VectorStore | None, key: Hashable, content_hash: str):
    if previous is not None and key in previous:
        old = previous.get(key)
        if old.content_hash == content_hash:
            return old
    return None


def index_graph(
    graph: KnowledgeGraph,
    gateway: Gateway,
    previous: tuple[VectorStore, VectorStore] | None = None,
) -> tuple[VectorStore, VectorStore]:
    """Embed every entity and relation of a graph into two stores.

    With ``previous`` stores given, records whose rendered text is
    unchanged reuse their old vector without a model call.  On a backend
    failure the work done so far is attached to the raised
    IndexBuildError as ``partial``, ready to be passed back as
    ``previous`` to resume.
    """
    dim = gateway.embedding_dim
    entity_store = VectorStore("entity", dim)
    relation_store = VectorStore("relation", dim)
    previous_entities, previous_relations = previous or (None, None)

    def build(store, keys, previous_store, render, describe):
        for key in keys:
            text = render(key)
            content_hash = text_hash(text)
            old = _reusable(previous_store, key, content_hash)
            if old is not None:
                store.add(
                    EmbeddingRecord(
                        key=key, vector=old.vector,
                        rendered_text=text, content_hash=content_hash,
                    )
                )
                continue
            try:
                vector = gateway.embed_text(text)
            except Exception as exc:
                raise IndexBuildError(
                    f"embedding {describe} {key!r} failed: {exc}",
                    partial=(entity_store, relation_store),
                    failed_key=key,
                ) from exc
            store.add(
                EmbeddingRecord(
                    key=key, vector=vector,
                    rendered_text=text, content_hash=content_hash,
                )
            )

    build(
        entity_store,
        sorted(graph.entities),
        previous_entities,
        lambda name: render_entity_text(graph.entities[name]),
        "entity",
    )
    build(
        relation_store,
        sorted(graph.relations),
        previous_relations,
        lambda key: render_relation_text(graph.relations[key], graph),
        "relation",
    )
    return entity_store, relation_store


def index_pages(
    corpus: Corpus,
    gateway: Gateway,
    previous: VectorStore | None = None,
) -> VectorStore:
    """Embed the page render of every non-empty page into a page store.

    A page's content hash is the digest of its render bytes, so unchanged
    pages are never re-embedded on a rebuild.  Failures carry the partial
    store for resumption, like :func:`index_graph`.
    """
    store = VectorStore("page", gateway.embedding_dim)
    for page in page_bundles(corpus):
        render = page.page_render
        data = render.path.read_bytes()
        content_hash = hashlib.sha256(data).hexdigest()
        old = _reusable(previous, page.page_id, content_hash)
        if old is not None:
            store.add(
                EmbeddingRecord(
                    key=page.page_id, vector=old.vector,
                    rendered_text=old.rendered_text, content_hash=content_hash,
                )
            )
            continue
        try:
            vector = gateway.embed_image(render.path)
        except Exception as exc:
            raise IndexBuildError(
                f"embedding page {page.page_id!r} failed: {exc}",
                partial=store,
                failed_key=page.page_id,
            ) from exc
        store.add(
            EmbeddingRecord(
                key=page.page_id, vector=vector,
                rendered_text=render.asset_id, content_hash=content_hash,
            )
        )
    return store
