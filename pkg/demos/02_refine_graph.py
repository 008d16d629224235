"""Demo 2: a refinement pass that adds what the first pass missed.

Refinement revisits every page, shows the model the already-known graph
records most related to that page (found by embedding the page's own
entity names and relation keywords), and asks only for missing records.
Replies merge additively — the refined graph always contains the first
pass — and a page with nothing to add answers the literal word NONE.

Here the pass recovers a cross-modal link the text pass could not see:
the lab-output figure on beta page 0 becomes a visual entity, related to
the company it charts.

Run:  python3 demos/02_refine_graph.py
"""

from __future__ import annotations

import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))
from common import (
    banner,
    build_demo_corpus,
    demo_config,
    stage_first_pass,
    stage_refinement,
    strict_gateway,
)

from mmkgrag.extraction import extract_initial, refine_graph
from mmkgrag.graph import content_equal, graph_contains


def main() -> None:
    workspace = Path(tempfile.mkdtemp(prefix="demo2_"))
    corpus = build_demo_corpus(workspace / "corpus")
    config = demo_config()

    script: dict[str, str] = {}
    first_pass_expected = stage_first_pass(corpus, config, script)
    refined_expected = stage_refinement(corpus, first_pass_expected, config, script)
    gateway = strict_gateway(script, config)

    banner("First pass")
    first_pass = extract_initial(corpus, gateway, config)
    print(f"  {len(first_pass.entities)} entities, {len(first_pass.relations)} relations")
    print(f"  'LAB OUTPUT CHART' known yet? {'LAB OUTPUT CHART' in first_pass.entities}")

    banner("Refinement pass (one round, additive)")
    refined = refine_graph(
        corpus, first_pass, gateway, config, checkpoint_dir=workspace / "checkpoints"
    )
    print(f"  {len(refined.entities)} entities, {len(refined.relations)} relations")
    print(f"  generation: {first_pass.generation} -> {refined.generation}")

    banner("What the pass added")
    for name in sorted(set(refined.entities) - set(first_pass.entities)):
        entity = refined.entities[name]
        print(f"  entity  {name} [{entity.entity_type}] modality={entity.modality}")
        print(f"          asset: {entity.asset_ref}")
    for key in sorted(set(refined.relations) - set(first_pass.relations)):
        relation = refined.relations[key]
        print(f"  relation {relation.source} -> {relation.target} "
              f"keywords={relation.keywords}")

    banner("Guarantees")
    print(f"  refined contains the first pass element-wise: "
          f"{graph_contains(refined, first_pass)}")
    print(f"  matches the independently staged expectation: "
          f"{content_equal(refined, refined_expected)}")
    print("  pages with nothing to add answered NONE and contributed nothing.")


if __name__ == "__main__":
    main()
