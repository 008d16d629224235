"""Demo 1: from a page corpus to a merged knowledge graph.

Every non-empty page is sent to the model as one multimodal prompt (page
text, attached figure/table captions, the images themselves, and the page
render last) and must come back as delimited records, one per line.  The
per-page extractions are then merged into a single graph: entities are
keyed by normalized name, relations by their directed endpoint pair, and
descriptions accumulate — so two pages mentioning the same company become
one node that remembers both sources.

Run:  python3 demos/01_build_graph.py
"""

from __future__ import annotations

import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))
from common import banner, build_demo_corpus, demo_config, stage_first_pass, strict_gateway

from mmkgrag.extraction import extract_initial
from mmkgrag.graph import save_graph


def main() -> None:
    workspace = Path(tempfile.mkdtemp(prefix="demo1_"))
    corpus = build_demo_corpus(workspace / "corpus")
    config = demo_config()

    banner("The corpus: two documents, four pages, one of them blank")
    for doc_id, pages in corpus.documents:
        for page in pages:
            label = page.text.strip() or "(empty page, skipped)"
            extras = ", ".join(a.kind for a in page.assets) or "no assets"
            print(f"  {doc_id} page {page.page_index}: {label!r}  [{extras}]")

    # Script one reply per page.  A real deployment points the gateway at an
    # HTTP backend instead; the pipeline code is identical either way.
    script: dict[str, str] = {}
    stage_first_pass(corpus, config, script)
    gateway = strict_gateway(script, config)

    banner("Extracting every page concurrently, then merging")
    graph = extract_initial(
        corpus, gateway, config, checkpoint_dir=workspace / "checkpoints"
    )
    print(f"  model calls: {gateway.backend.chat_calls} (one per non-empty page)")
    print(f"  merged graph: {len(graph.entities)} entities, {len(graph.relations)} relations")

    banner("Entities (note BEACON: two pages merged into one node)")
    for name in sorted(graph.entities):
        entity = graph.entities[name]
        print(f"  {name} [{entity.entity_type}]")
        for description in entity.descriptions:
            print(f"      - {description}")
        print(f"      seen on: {sorted(entity.source_pages)}")

    banner("Relations")
    for key in sorted(graph.relations):
        relation = graph.relations[key]
        print(f"  {relation.source} -> {relation.target}  keywords={relation.keywords}")

    out = workspace / "graph.g0.json"
    save_graph(graph, out)
    banner("Saved")
    print(f"  {out}")
    print("  Checkpoints were written per page; rerunning resumes without model calls.")


if __name__ == "__main__":
    main()
