"""Corpus loading: manifest parsing, page bundles, asset validation.

A corpus is described by a JSON manifest (conventionally ``corpus.json``)
sitting at the corpus root::

    {
      "corpus_id": "demo",
      "documents": [
        {
          "doc_id": "deck-a",
          "pages": [
            {
              "index": 0,
              "text": "inline page text",
              "assets": [
                {"kind": "page_render", "path": "renders/p0.png"},
                {"kind": "figure", "path": "figs/f1.png",
                 "caption": "Quarterly revenue", "id": "deck-a.p0.figure1"}
              ]
            },
            {"index": 1, "text_file": "text/p1.txt", "assets": [...]}
          ]
        }
      ]
    }

Page text is either inlined (``text``) or held in a UTF-8 ``.txt``/``.md``
sidecar (``text_file``).  Asset paths are relative to the manifest's
directory and must stay inside it.  Every non-empty page carries exactly
one ``page_render`` asset (the full-page image); ``figure`` and ``table``
assets are the cropped visual elements of the page.  Pages with no text
and no assets are legal and are skipped downstream with a warning.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

from .errors import MalformedManifest, ManifestNotFound, MissingAsset

logger = logging.getLogger(__name__)

ASSET_KINDS = ("figure", "table", "page_render")
TEXT_SIDECAR_SUFFIXES = (".txt", ".md")
MANIFEST_NAME = "corpus.json"

_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"
_JPEG_MAGIC = b"\xff\xd8\xff"


@dataclass(frozen=True)
class PageAsset:
    """One image belonging to a page.

    Attributes:
        kind: ``figure``, ``table`` or ``page_render``.
        path: absolute path of the image file, resolved under the corpus root.
        asset_id: corpus-unique identifier; derived from the page position
            when the manifest does not supply one.
        caption: optional caption text, passed through as an extraction hint.
    """

    kind: str
    path: Path
    asset_id: str
    caption: str | None = None


@dataclass(frozen=True)
class PageBundle:
    """Everything extracted from one page of one document.

    Attributes:
        doc_id: identifier of the owning document.
        page_index: zero-based position of the page within the document.
        text: page text (may be empty).
        assets: page images in manifest order.
    """

    doc_id: str
    page_index: int
    text: str
    assets: tuple[PageAsset, ...] = ()

    @property
    def page_id(self) -> tuple[str, int]:
        return (self.doc_id, self.page_index)

    @property
    def is_empty(self) -> bool:
        """True when the page carries neither text nor assets."""
        return not self.text.strip() and not self.assets

    @property
    def page_render(self) -> PageAsset | None:
        for asset in self.assets:
            if asset.kind == "page_render":
                return asset
        return None

    def visual_elements(self) -> tuple[PageAsset, ...]:
        """Figure and table assets, excluding the page render."""
        return tuple(a for a in self.assets if a.kind in ("figure", "table"))


@dataclass(frozen=True)
class Corpus:
    """A validated corpus: documents in manifest order.

    Attributes:
        corpus_id: identifier from the manifest.
        root: directory containing the manifest; all asset paths live here.
        documents: ``(doc_id, pages)`` in manifest order; pages keep their
            manifest order and include empty pages.
    """

    corpus_id: str
    root: Path
    documents: tuple[tuple[str, tuple[PageBundle, ...]], ...] = ()

    @property
    def page_count(self) -> int:
        """Total pages including empty ones."""
        return sum(len(pages) for _, pages in self.documents)

    @property
    def doc_ids(self) -> tuple[str, ...]:
        return tuple(doc_id for doc_id, _ in self.documents)

    def find_page(self, doc_id: str, page_index: int) -> PageBundle:
        for did, pages in self.documents:
            if did == doc_id:
                for page in pages:
                    if page.page_index == page_index:
                        return page
        raise KeyError((doc_id, page_index))

    def to_json(self) -> str:
        """Canonical serialization; two loads of one manifest are byte-equal."""
        payload = {
            "corpus_id": self.corpus_id,
            "documents": [
                {
                    "doc_id": doc_id,
                    "pages": [
                        {
                            "index": page.page_index,
                            "text": page.text,
                            "assets": [
                                {
                                    "kind": a.kind,
                                    "path": a.path.relative_to(self.root).as_posix(),
                                    "id": a.asset_id,
                                    "caption": a.caption,
                                }
                                for a in page.assets
                            ],
                        }
                        for page in pages
                    ],
                }
                for doc_id, pages in self.documents
            ],
        }
        return json.dumps(payload, sort_keys=True, ensure_ascii=False, indent=2)


def page_bundles(corpus: Corpus) -> Iterator[PageBundle]:
    """Yield every non-empty page once, ordered by ``(doc_id, page_index)``.

    Empty pages are skipped with a warning; they stay part of the corpus
    (and its page count) but contribute nothing downstream.
    """
    all_pages = [page for _, pages in corpus.documents for page in pages]
    for page in sorted(all_pages, key=lambda p: p.page_id):
        if page.is_empty:
            logger.warning(
                "skipping empty page %s #%d", page.doc_id, page.page_index
            )
            continue
        yield page


def load_manifest(manifest_path: str | Path) -> Corpus:
    """Load and validate a corpus manifest.

    Raises:
        ManifestNotFound: the path does not exist.
        MalformedManifest: invalid JSON or a schema violation; the message
            names the offending entry.
        MissingAsset: an asset or text sidecar file does not exist.
    """
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    if not manifest_path.exists():
        raise ManifestNotFound(str(manifest_path))
    root = manifest_path.parent.resolve()

    try:
        raw = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedManifest(f"{manifest_path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise MalformedManifest(f"{manifest_path}: top level must be an object")

    corpus_id = raw.get("corpus_id")
    if not isinstance(corpus_id, str) or not corpus_id:
        raise MalformedManifest("corpus_id must be a non-empty string")
    docs_raw = raw.get("documents")
    if not isinstance(docs_raw, list):
        raise MalformedManifest("documents must be a list")

    seen_asset_ids: set[str] = set()
    documents: list[tuple[str, tuple[PageBundle, ...]]] = []
    seen_docs: set[str] = set()
    for di, doc in enumerate(docs_raw):
        if not isinstance(doc, dict):
            raise MalformedManifest(f"documents[{di}] must be an object")
        doc_id = doc.get("doc_id")
        if not isinstance(doc_id, str) or not doc_id:
            raise MalformedManifest(f"documents[{di}]: doc_id must be a non-empty string")
        if doc_id in seen_docs:
            raise MalformedManifest(f"duplicate doc_id {doc_id!r}")
        seen_docs.add(doc_id)
        pages_raw = doc.get("pages")
        if not isinstance(pages_raw, list):
            raise MalformedManifest(f"document {doc_id!r}: pages must be a list")
        pages: list[PageBundle] = []
        seen_indices: set[int] = set()
        for pi, page_raw in enumerate(pages_raw):
            page = _load_page(page_raw, doc_id, pi, root, seen_asset_ids)
            if page.page_index in seen_indices:
                raise MalformedManifest(
                    f"document {doc_id!r}: duplicate page index {page.page_index}"
                )
            seen_indices.add(page.page_index)
            pages.append(page)
        documents.append((doc_id, tuple(pages)))

    return Corpus(corpus_id=corpus_id, root=root, documents=tuple(documents))


def _load_page(
    page_raw: object,
    doc_id: str,
    position: int,
    root: Path,
    seen_asset_ids: set[str],
) -> PageBundle:
    where = f"document {doc_id!r} pages[{position}]"
    if not isinstance(page_raw, dict):
        raise MalformedManifest(f"{where}: must be an object")
    index = page_raw.get("index", position)
    if not isinstance(index, int) or isinstance(index, bool) or index < 0:
        raise MalformedManifest(f"{where}: index must be a non-negative integer")

    text = page_raw.get("text")
    text_file = page_raw.get("text_file")
    if text is not None and text_file is not None:
        raise MalformedManifest(f"{where}: give text or text_file, not both")
    if text is None and text_file is None:
        text = ""
    if text_file is not None:
        if not isinstance(text_file, str):
            raise MalformedManifest(f"{where}: text_file must be a string")
        sidecar = _resolve_under_root(text_file, root, where)
        if sidecar.suffix.lower() not in TEXT_SIDECAR_SUFFIXES:
            raise MalformedManifest(
                f"{where}: text sidecar must be one of {TEXT_SIDECAR_SUFFIXES}"
            )
        if not sidecar.is_file():
            raise MissingAsset(f"{where}: text sidecar {text_file!r} not found")
        try:
            text = sidecar.read_text(encoding="utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedManifest(f"{where}: sidecar {text_file!r} is not UTF-8") from exc
    if not isinstance(text, str):
        raise MalformedManifest(f"{where}: text must be a string")

    assets_raw = page_raw.get("assets", [])
    if not isinstance(assets_raw, list):
        raise MalformedManifest(f"{where}: assets must be a list")
    assets: list[PageAsset] = []
    kind_counts = {kind: 0 for kind in ASSET_KINDS}
    for ai, asset_raw in enumerate(assets_raw):
        if not isinstance(asset_raw, dict):
            raise MalformedManifest(f"{where} assets[{ai}]: must be an object")
        kind = asset_raw.get("kind")
        if kind not in ASSET_KINDS:
            raise MalformedManifest(
                f"{where} assets[{ai}]: kind must be one of {ASSET_KINDS}, got {kind!r}"
            )
        rel = asset_raw.get("path")
        if not isinstance(rel, str) or not rel:
            raise MalformedManifest(f"{where} assets[{ai}]: path must be a non-empty string")
        path = _resolve_under_root(rel, root, f"{where} assets[{ai}]")
        if not path.is_file():
            raise MissingAsset(f"{where} assets[{ai}]: {rel!r} not found")
        _check_image_magic(path, f"{where} assets[{ai}]")
        caption = asset_raw.get("caption")
        if caption is not None and not isinstance(caption, str):
            raise MalformedManifest(f"{where} assets[{ai}]: caption must be a string")
        kind_counts[kind] += 1
        asset_id = asset_raw.get("id")
        if asset_id is None:
            asset_id = f"{doc_id}.p{index}.{kind}{kind_counts[kind]}"
        elif not isinstance(asset_id, str) or not asset_id:
            raise MalformedManifest(f"{where} assets[{ai}]: id must be a non-empty string")
        if asset_id in seen_asset_ids:
            raise MalformedManifest(f"{where} assets[{ai}]: duplicate asset id {asset_id!r}")
        seen_asset_ids.add(asset_id)
        assets.append(PageAsset(kind=kind, path=path, asset_id=asset_id, caption=caption))

    page = PageBundle(doc_id=doc_id, page_index=index, text=text, assets=tuple(assets))
    if not page.is_empty and kind_counts["page_render"] != 1:
        raise MalformedManifest(
            f"{where}: non-empty page needs exactly one page_render asset, "
            f"found {kind_counts['page_render']}"
        )
    return page


def _resolve_under_root(rel: str, root: Path, where: str) -> Path:
    path = (root / rel).resolve()
    if root != path and root not in path.parents:
        raise MalformedManifest(f"{where}: path {rel!r} escapes the corpus root")
    return path


def _check_image_magic(path: Path, where: str) -> None:
    # cheap format check: PNG/JPEG signature only, no image decode
    try:
        with path.open("rb") as fh:
            head = fh.read(8)
    except OSError as exc:
        raise MissingAsset(f"{where}: {path} unreadable: {exc}") from exc
    if not (head.startswith(_PNG_MAGIC) or head.startswith(_JPEG_MAGIC)):
        raise MalformedManifest(f"{where}: {path.name} is not a PNG or JPEG image")
