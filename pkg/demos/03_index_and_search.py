"""Demo 3: typed vector stores and dual-level retrieval.

Three stores share one embedding space: entity records ("NAME: descriptions"),
relation records ("keywords | SOURCE -> TARGET | descriptions"), and page
renders (embedded as images).  A question is first split by the model into
low-level keywords (things) and high-level keywords (themes); low-level
keywords query the entity store, high-level ones the relation store, and the
union of hits seeds a one-hop expansion of the graph.  The question text
itself also ranks the page renders, so the answer stage can look at the most
relevant page images.

The mock backend hashes text into vectors, so raw similarities are noise;
`embed_aliases` plants the similarities this demo needs, which is exactly how
the test suite stages retrieval offline.

Run:  python3 demos/03_index_and_search.py
"""

from __future__ import annotations

import hashlib
import json
import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))
from common import (
    banner,
    build_demo_corpus,
    demo_config,
    script_reply,
    stage_first_pass,
    stage_refinement,
    strict_gateway,
)

from mmkgrag.prompts import load_template
from mmkgrag.gateway import ChatRequest, TextPart
from mmkgrag.retrieval import assemble_context
from mmkgrag.vectorstore import STORE_FILENAMES, VectorStore, index_graph, index_pages

QUESTION = "How is Beacon's research output tracked?"


def main() -> None:
    workspace = Path(tempfile.mkdtemp(prefix="demo3_"))
    corpus = build_demo_corpus(workspace / "corpus")
    config = demo_config()

    # Replay demos 1 and 2 silently to get the refined graph.
    script: dict[str, str] = {}
    first_pass = stage_first_pass(corpus, config, script)

    # Plant similarities: the question should hit the BEACON entity, the
    # cross-modal relation, and beta page 0's render.
    beta_render = Path(corpus.find_page("beta", 0).page_render.path)
    digest = hashlib.sha256(beta_render.read_bytes()).hexdigest()
    aliases = {
        "Beacon": "HIT-ENTITY",
        "BEACON: Research company bought by Apex.; Operates three research labs.":
            "HIT-ENTITY",
        "research tracking": "HIT-RELATION",
        "research output | BEACON -> LAB OUTPUT CHART | "
        "Beacon's lab output is charted by quarter.": "HIT-RELATION",
        QUESTION: "HIT-PAGE",
        f"img:{digest}": "HIT-PAGE",
    }
    graph = stage_refinement(corpus, first_pass, config, script, embed_aliases=aliases)

    # The keyword split is itself a model call, so it is scripted too.
    script_reply(
        script,
        ChatRequest(system_prompt=load_template("keywords.txt"),
                    parts=(TextPart(QUESTION),),
                    temperature=config.temperature,
                    max_output_tokens=config.max_output_tokens),
        json.dumps({"low_level": ["Beacon"], "high_level": ["research tracking"]}),
    )
    gateway = strict_gateway(script, config, embed_aliases=aliases)

    banner("Indexing the graph and the page renders")
    entity_store, relation_store = index_graph(graph, gateway)
    page_store = index_pages(corpus, gateway)
    for store in (entity_store, relation_store, page_store):
        path = workspace / STORE_FILENAMES[store.kind]
        store.save(path)
        print(f"  {store.kind:<8} store: {len(store)} records -> {path.name}")
    reloaded = VectorStore.load(workspace / "entities.vs")
    print(f"  reload check: entities round-trip with {len(reloaded)} records")

    banner(f"Question: {QUESTION!r}")
    from mmkgrag.vectorstore import StoreSet

    stores = StoreSet(entities=entity_store, relations=relation_store, pages=page_store)
    context = assemble_context(QUESTION, graph, stores, gateway, config)
    print(f"  low-level keywords:  {context.keywords.low_level}")
    print(f"  high-level keywords: {context.keywords.high_level}")

    banner("Retrieved subgraph (seeds + one hop)")
    for line in context.subgraph_text.splitlines():
        print(f"  {line}")

    banner("Page ranking (planted: beta page 0 on top)")
    for doc, index, sim in context.pages:
        print(f"  {doc} page {index}: similarity {sim:.3f}")

    print()
    print("The graph slice and the page list both feed the answer stage (demo 4).")


if __name__ == "__main__":
    main()
