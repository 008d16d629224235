"""Shared test helpers: tiny real PNGs, corpus builders, scripted mocks."""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import pytest

from mmkgrag.config import PipelineConfig
from mmkgrag.gateway import ChatRequest, Gateway, MockBackend, request_hash


def tiny_png(rgb: tuple[int, int, int] = (200, 30, 30), size: tuple[int, int] = (4, 4)) -> bytes:
    """A minimal valid PNG; distinct rgb values give distinct bytes."""
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


_COLOR_COUNTER = [0]


def fresh_png() -> bytes:
    """A PNG with bytes unseen by any earlier call in this process."""
    _COLOR_COUNTER[0] += 1
    n = _COLOR_COUNTER[0]
    return tiny_png(rgb=(n % 251, (n * 7) % 249, (n * 13) % 247))


def write_corpus(root: Path, docs: dict[str, list[dict]], corpus_id: str = "testcorpus") -> Path:
    """Create a corpus directory from a light page description.

    ``docs`` maps doc_id to a list of page dicts with optional keys:
    ``text`` (str), ``figures`` (list of captions), ``tables`` (list of
    captions), ``empty`` (bool).  Every non-empty page gets a unique
    page-render PNG; figures/tables get unique PNGs of their own.
    Returns the manifest path.
    """
    root.mkdir(parents=True, exist_ok=True)
    documents = []
    for doc_id, pages in docs.items():
        page_entries = []
        for index, page in enumerate(pages):
            if page.get("empty"):
                page_entries.append({"index": index, "text": "", "assets": []})
                continue
            assets = []
            for kind_key, kind in (("figures", "figure"), ("tables", "table")):
                for n, caption in enumerate(page.get(kind_key, []), start=1):
                    rel = f"assets/{doc_id}_{index}_{kind}{n}.png"
                    (root / rel).parent.mkdir(parents=True, exist_ok=True)
                    (root / rel).write_bytes(fresh_png())
                    assets.append({"kind": kind, "path": rel, "caption": caption})
            rel = f"renders/{doc_id}_{index}.png"
            (root / rel).parent.mkdir(parents=True, exist_ok=True)
            (root / rel).write_bytes(fresh_png())
            assets.append({"kind": "page_render", "path": rel})
            page_entries.append(
                {"index": index, "text": page.get("text", ""), "assets": assets}
            )
        documents.append({"doc_id": doc_id, "pages": page_entries})
    manifest = root / "corpus.json"
    manifest.write_text(
        json.dumps({"corpus_id": corpus_id, "documents": documents}, indent=2),
        encoding="utf-8",
    )
    return manifest


def mock_gateway(
    dim: int = 16,
    seed: int = 0,
    script: dict[str, str] | None = None,
    embed_aliases: dict[str, str] | None = None,
    mode: str = "strict",
    **gateway_kwargs,
) -> Gateway:
    """A gateway over a mock backend, retry delays zeroed for tests."""
    backend = MockBackend(
        dim=dim, seed=seed, script=script, embed_aliases=embed_aliases, mode=mode
    )
    gateway_kwargs.setdefault("retry_base_delay", 0.0)
    return Gateway(backend, **gateway_kwargs)


def script_reply(script: dict[str, str], request: ChatRequest, reply: str) -> None:
    """Register a reply for a request in a mock script table."""
    script[request_hash(request)] = reply


@pytest.fixture
def config() -> PipelineConfig:
    cfg = PipelineConfig()
    cfg.embedding_dim = 16
    cfg.retry_base_delay = 0.0
    return cfg
