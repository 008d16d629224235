"""Demo 4: answering a question in two stages (and in one, for contrast).

Two-stage generation runs two intermediate answers in parallel — one
grounded in the retrieved graph records, one grounded in the retrieved
page images — then synthesizes them into the final answer.  If one side
fails, the other still produces an answer ("graceful degradation").  The
single-pass mode skips the intermediates and sends graph text plus page
images in one call: cheaper, less structured, kept as a switch so the two
designs can be compared on the same corpus.

Run:  python3 demos/04_ask.py
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

from mmkgrag.gateway import ChatRequest, ImagePart, TextPart
from mmkgrag.generation import answer
from mmkgrag.prompts import load_template, render_template
from mmkgrag.retrieval import assemble_context
from mmkgrag.vectorstore import StoreSet, index_graph, index_pages

QUESTION = "How is Beacon's research output tracked?"
GRAPH_VIEW = ("The graph links BEACON to the LAB OUTPUT CHART figure via a "
              "research-output relation.")
PAGE_VIEW = "The beta page shows a quarterly chart of lab output."
FINAL = "Beacon's research output is tracked in a quarterly lab-output chart."
ONE_PASS = "It is tracked in a quarterly chart (single-pass reading)."


def user_request(text, config, images=()):
    return ChatRequest(
        system_prompt="",
        parts=(TextPart(text), *images),
        temperature=config.temperature,
        max_output_tokens=config.max_output_tokens,
    )


def main() -> None:
    workspace = Path(tempfile.mkdtemp(prefix="demo4_"))
    corpus = build_demo_corpus(workspace / "corpus")
    config = demo_config()

    # Stage the corpus, graph, and planted retrieval exactly as in demo 3.
    script: dict[str, str] = {}
    first_pass = stage_first_pass(corpus, config, script)
    beta_render = Path(corpus.find_page("beta", 0).page_render.path)
    digest = hashlib.sha256(beta_render.read_bytes()).hexdigest()
    aliases = {QUESTION: "HIT-PAGE", f"img:{digest}": "HIT-PAGE"}
    graph = stage_refinement(corpus, first_pass, config, script, embed_aliases=aliases)
    script_reply(
        script,
        ChatRequest(system_prompt=load_template("keywords.txt"),
                    parts=(TextPart(QUESTION),),
                    temperature=config.temperature,
                    max_output_tokens=config.max_output_tokens),
        json.dumps({"low_level": ["Beacon"], "high_level": ["research tracking"]}),
    )

    # Build the stores and the retrieved context once, so the generation
    # prompts (which embed the retrieved records and page images) can be
    # scripted before the real run.
    staging = strict_gateway(script, config, embed_aliases=aliases)
    entity_store, relation_store = index_graph(graph, staging)
    page_store = index_pages(corpus, staging)
    stores = StoreSet(entities=entity_store, relations=relation_store, pages=page_store)
    context = assemble_context(QUESTION, graph, stores, staging, config)
    images = [
        ImagePart(path=str(corpus.find_page(doc, index).page_render.path),
                  tag=f"{doc} page {index}")
        for doc, index, _ in context.pages
    ]
    graph_prompt = render_template(load_template("graph_answer.txt"),
                                   query=QUESTION, subgraph=context.subgraph_text)
    script_reply(script, user_request(graph_prompt, config), GRAPH_VIEW)
    page_prompt = render_template(load_template("page_answer.txt"), query=QUESTION)
    script_reply(script, user_request(page_prompt, config, images=images), PAGE_VIEW)
    synthesis_prompt = render_template(load_template("synthesis.txt"), query=QUESTION,
                                       graph_answer=GRAPH_VIEW, page_answer=PAGE_VIEW)
    script_reply(script, user_request(synthesis_prompt, config), FINAL)
    single_prompt = render_template(load_template("single_pass.txt"),
                                    query=QUESTION, subgraph=context.subgraph_text)
    script_reply(script, user_request(single_prompt, config, images=images), ONE_PASS)

    banner(f"Question: {QUESTION!r}")

    gateway = strict_gateway(script, config, embed_aliases=aliases)
    bundle = answer(QUESTION, graph, stores, corpus, gateway, config)
    banner("Two-stage answer")
    print(f"  graph intermediate: {bundle.graph_answer}")
    print(f"  page intermediate:  {bundle.page_answer}")
    print(f"  final answer:       {bundle.final_answer}")
    print(f"  model calls:        {gateway.backend.chat_calls} "
          "(keywords + graph + pages + synthesis)")

    banner("Provenance (what the answer was grounded in)")
    print(f"  entities:  {bundle.provenance.entities}")
    print(f"  relations: {bundle.provenance.relations}")
    print(f"  pages:     {bundle.provenance.pages}")

    one_pass_config = demo_config()
    one_pass_config.single_pass = True
    gateway_single = strict_gateway(script, config, embed_aliases=aliases)
    single = answer(QUESTION, graph, stores, corpus, gateway_single, one_pass_config)
    banner("Single-pass answer (ablation switch)")
    print(f"  final answer: {single.final_answer}")
    print(f"  model calls:  {gateway_single.backend.chat_calls} (keywords + one answer call)")
    print(f"  intermediates recorded: graph={single.graph_answer} page={single.page_answer}")

    banner("Serialized bundle (what `ask --json` prints)")
    print(json.dumps(bundle.to_json_obj(), indent=2, sort_keys=True)[:600] + " ...")


if __name__ == "__main__":
    main()
