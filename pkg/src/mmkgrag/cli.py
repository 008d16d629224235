"""Command-line interface over the pipeline stages.

Stages read and write artifacts in a working directory so each command
can run (and re-run) independently::

    mmkgrag ingest --corpus corpus/            # validate a manifest
    mmkgrag build --corpus corpus/ -w work     # pages -> graph.g0.json
    mmkgrag refine --corpus corpus/ -w work    # -> graph.g1.json
    mmkgrag index --corpus corpus/ -w work     # -> entities/relations/pages.vs
    mmkgrag ask --corpus corpus/ -w work "..." # retrieval + generation
    mmkgrag query -w work "..."                # retrieval only
    mmkgrag gen-questions --corpus corpus/ -w work
    mmkgrag eval-global --questions q.json --answers-a a.jsonl --answers-b b.jsonl
    mmkgrag eval-local --references r.jsonl --answers a.jsonl
    mmkgrag config show

Exit codes: 0 success, 2 configuration or input-format error, 3 missing
prerequisite artifact, 4 backend failure, 5 completed with partial
failures.  Errors print one machine-parseable line on stderr:
``error: <ErrorType>: <message>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import evaluation
from .config import PipelineConfig, dumps_config, load_config
from .corpus import load_manifest, page_bundles
from .diagnostics import DiagnosticsLog
from .errors import (
    BackendError,
    ConfigInvalid,
    EmptyGraph,
    EmptyIndex,
    ExtractionFailed,
    GenerationShortfall,
    InvalidAnswerFile,
    InvalidGraphFile,
    InvalidStoreFile,
    IndexBuildError,
    MalformedManifest,
    ManifestNotFound,
    MissingAsset,
    MissingPrerequisite,
    PipelineError,
    UnparseableVerdict,
    UnreadableImage,
)
from .extraction import extract_initial, refine_graph
from .gateway import Gateway, HttpBackend, MockBackend
from .graph import load_graph, save_graph
from .retrieval import assemble_context
from .vectorstore import STORE_FILENAMES, StoreSet, VectorStore, index_graph, index_pages

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_BACKEND = 4
EXIT_PARTIAL = 5

GRAPH_G0 = "graph.g0.json"
GRAPH_G1 = "graph.g1.json"
CHECKPOINT_DIR = "checkpoints"
DIAGNOSTICS_FILE = "diagnostics.jsonl"
QUESTIONS_FILE = "questions.json"

_CONFIG_ERRORS = (ConfigInvalid, MalformedManifest, InvalidAnswerFile)
_MISSING_ERRORS = (
    ManifestNotFound,
    MissingPrerequisite,
    MissingAsset,
    InvalidGraphFile,
    InvalidStoreFile,
    EmptyGraph,
    EmptyIndex,
    UnreadableImage,
)
_BACKEND_ERRORS = (
    BackendError,
    IndexBuildError,
    ExtractionFailed,
    GenerationShortfall,
    UnparseableVerdict,
)


def make_gateway(
    config: PipelineConfig, role: str = "generator", record_path: str | None = None
) -> Gateway:
    """Build the gateway for one pipeline role (extractor/generator/judge)."""
    if config.backend == "mock":
        if config.mock_script:
            backend = MockBackend.from_script_file(config.mock_script)
        else:
            backend = MockBackend(
                dim=config.embedding_dim, seed=config.seed, mode=config.mock_mode
            )
    else:
        models = {
            "extractor": config.extractor_model,
            "generator": config.generator_model,
            "judge": config.judge_model or config.generator_model,
        }
        endpoint = config.chat_endpoint
        if role == "judge" and config.judge_chat_endpoint:
            endpoint = config.judge_chat_endpoint
        backend = HttpBackend(
            chat_endpoint=endpoint,
            embed_endpoint=config.embed_endpoint,
            chat_model=models[role],
            embed_model=config.embedder_model,
            api_key=os.environ.get(config.api_key_env, ""),
            embedding_dim=config.embedding_dim,
            timeout=config.request_timeout,
        )
    return Gateway(
        backend,
        max_in_flight=config.concurrency,
        max_retries=config.max_retries,
        retry_base_delay=config.retry_base_delay,
        record_path=record_path,
    )


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingPrerequisite(f"{path} not found; run `mmkgrag {hint}` first")
    return path


def _load_stores(workdir: Path, with_pages: bool = True) -> StoreSet:
    entities = VectorStore.load(_require(workdir / STORE_FILENAMES["entity"], "index"))
    relations = VectorStore.load(_require(workdir / STORE_FILENAMES["relation"], "index"))
    pages = None
    if with_pages:
        pages = VectorStore.load(_require(workdir / STORE_FILENAMES["page"], "index"))
    return StoreSet(entities=entities, relations=relations, pages=pages)


def _print_json(obj) -> None:
    print(json.dumps(obj, sort_keys=True, ensure_ascii=False, indent=2))


# --- commands -------------------------------------------------------------------

def cmd_ingest(args, config: PipelineConfig) -> int:
    corpus = load_manifest(args.corpus)
    non_empty = sum(1 for _ in page_bundles(corpus))
    assets = sum(len(p.assets) for _, pages in corpus.documents for p in pages)
    summary = {
        "corpus_id": corpus.corpus_id,
        "documents": len(corpus.documents),
        "pages": corpus.page_count,
        "non_empty_pages": non_empty,
        "empty_pages": corpus.page_count - non_empty,
        "assets": assets,
    }
    if args.json:
        _print_json(summary)
    else:
        print(
            f"corpus {summary['corpus_id']}: {summary['documents']} documents, "
            f"{summary['pages']} pages ({summary['empty_pages']} empty), "
            f"{summary['assets']} assets"
        )
    return EXIT_OK


def cmd_build(args, config: PipelineConfig) -> int:
    corpus = load_manifest(args.corpus)
    workdir = Path(args.workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    diagnostics = DiagnosticsLog(workdir / DIAGNOSTICS_FILE)
    gateway = make_gateway(config, role="extractor", record_path=args.record)
    graph = extract_initial(
        corpus,
        gateway,
        config,
        checkpoint_dir=workdir / CHECKPOINT_DIR,
        diagnostics=diagnostics,
    )
    save_graph(graph, workdir / GRAPH_G0)
    failed = diagnostics.count("page_failed")
    print(
        f"built {workdir / GRAPH_G0}: {len(graph.entities)} entities, "
        f"{len(graph.relations)} relations"
        + (f" ({failed} page(s) failed)" if failed else "")
    )
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_refine(args, config: PipelineConfig) -> int:
    corpus = load_manifest(args.corpus)
    workdir = Path(args.workdir)
    graph = load_graph(_require(workdir / GRAPH_G0, "build"))
    diagnostics = DiagnosticsLog(workdir / DIAGNOSTICS_FILE)
    gateway = make_gateway(config, role="extractor", record_path=args.record)
    refined = refine_graph(
        corpus,
        graph,
        gateway,
        config,
        checkpoint_dir=workdir / CHECKPOINT_DIR,
        diagnostics=diagnostics,
    )
    save_graph(refined, workdir / GRAPH_G1)
    failed = diagnostics.count("page_failed")
    print(
        f"refined {workdir / GRAPH_G1}: {len(refined.entities)} entities "
        f"(+{len(refined.entities) - len(graph.entities)}), "
        f"{len(refined.relations)} relations (+{len(refined.relations) - len(graph.relations)})"
        + (f" ({failed} page(s) failed)" if failed else "")
    )
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_index(args, config: PipelineConfig) -> int:
    corpus = load_manifest(args.corpus)
    workdir = Path(args.workdir)
    graph = load_graph(_require(workdir / GRAPH_G1, "refine"))
    gateway = make_gateway(config, role="extractor", record_path=args.record)

    previous = None
    entity_path = workdir / STORE_FILENAMES["entity"]
    relation_path = workdir / STORE_FILENAMES["relation"]
    if entity_path.exists() and relation_path.exists():
        previous = (VectorStore.load(entity_path), VectorStore.load(relation_path))
    entity_store, relation_store = index_graph(graph, gateway, previous=previous)
    entity_store.save(entity_path)
    relation_store.save(relation_path)

    page_path = workdir / STORE_FILENAMES["page"]
    previous_pages = VectorStore.load(page_path) if page_path.exists() else None
    page_store = index_pages(corpus, gateway, previous=previous_pages)
    page_store.save(page_path)

    print(
        f"indexed {len(entity_store)} entities, {len(relation_store)} relations, "
        f"{len(page_store)} pages into {workdir}"
    )
    return EXIT_OK


def _apply_ask_flags(args, config: PipelineConfig) -> PipelineConfig:
    if getattr(args, "mode", None):
        config.single_pass = args.mode == "single-pass"
    if getattr(args, "no_graph", False):
        config.page_only_retrieval = True
    return config


def cmd_query(args, config: PipelineConfig) -> int:
    config = _apply_ask_flags(args, config)
    workdir = Path(args.workdir)
    graph = load_graph(_require(workdir / GRAPH_G1, "refine"))
    stores = _load_stores(workdir)
    gateway = make_gateway(config, role="generator", record_path=args.record)
    context = assemble_context(args.question, graph, stores, gateway, config)
    if args.json:
        _print_json(context.to_json_obj())
    else:
        print(f"keywords (low): {', '.join(context.keywords.low_level) or '-'}")
        print(f"keywords (high): {', '.join(context.keywords.high_level) or '-'}")
        print(
            f"subgraph: {len(context.subgraph.entities)} entities, "
            f"{len(context.subgraph.relations)} relations"
        )
        print("pages: " + (", ".join(f"{d}#{i} ({s:.3f})" for d, i, s in context.pages) or "-"))
        if context.subgraph_text:
            print("\ngraph records:\n" + context.subgraph_text)
    return EXIT_OK


def cmd_ask(args, config: PipelineConfig) -> int:
    config = _apply_ask_flags(args, config)
    corpus = load_manifest(args.corpus)
    workdir = Path(args.workdir)
    graph = load_graph(_require(workdir / GRAPH_G1, "refine"))
    stores = _load_stores(workdir)
    gateway = make_gateway(config, role="generator", record_path=args.record)
    context = assemble_context(args.question, graph, stores, gateway, config)
    from .generation import answer_from_context

    bundle = answer_from_context(context, corpus, gateway, config)
    if args.json:
        payload = bundle.to_json_obj()
        if args.show_context:
            payload["context"] = context.to_json_obj()
        _print_json(payload)
    else:
        if args.show_context:
            print("--- retrieved context ---")
            print(json.dumps(context.to_json_obj(), sort_keys=True, ensure_ascii=False, indent=2))
            print("--- answer ---")
        print(bundle.final_answer)
    return EXIT_OK


def cmd_gen_questions(args, config: PipelineConfig) -> int:
    corpus = load_manifest(args.corpus)
    gateway = make_gateway(config, role="generator", record_path=args.record)
    outline = evaluation.corpus_outline(corpus)
    question_set = evaluation.generate_global_questions(
        outline,
        gateway,
        config,
        corpus_id=corpus.corpus_id,
        personas_count=args.count,
        tasks_per_persona=args.count,
        questions_per_task=args.count,
    )
    out = Path(args.out) if args.out else Path(args.workdir) / QUESTIONS_FILE
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(question_set.to_json() + "\n", encoding="utf-8")
    print(
        f"wrote {out}: {len(question_set.personas)} personas, "
        f"{sum(len(t) for t in question_set.tasks)} tasks, "
        f"{len(question_set.questions)} questions"
    )
    return EXIT_OK


def cmd_eval_global(args, config: PipelineConfig) -> int:
    questions_path = Path(args.questions)
    if not questions_path.exists():
        raise MissingPrerequisite(f"{questions_path} not found; run `mmkgrag gen-questions` first")
    question_set = evaluation.GlobalQuestionSet.from_json(
        questions_path.read_text(encoding="utf-8")
    )
    answers_a = {k: str(v["answer"]) for k, v in evaluation.read_answers(args.answers_a).items()}
    answers_b = {k: str(v["answer"]) for k, v in evaluation.read_answers(args.answers_b).items()}
    gateway = make_gateway(config, role="judge", record_path=args.record)
    seed = config.seed if args.seed is None else args.seed
    verdicts, excluded = evaluation.run_pairwise_eval(
        [(q.question_id, q.question) for q in question_set.questions],
        answers_a,
        answers_b,
        gateway,
        config,
        seed=seed,
    )
    report = evaluation.winrate_report(verdicts, excluded=excluded)
    if args.out:
        with Path(args.out).open("w", encoding="utf-8") as fh:
            for verdict in verdicts:
                fh.write(json.dumps(verdict.to_json_obj(), sort_keys=True, ensure_ascii=False) + "\n")
    if args.json:
        _print_json(report.to_json_obj())
    else:
        print(report.render())
    return EXIT_PARTIAL if excluded else EXIT_OK


def cmd_eval_local(args, config: PipelineConfig) -> int:
    references = evaluation.read_answers(args.references)
    answers = {k: str(v["answer"]) for k, v in evaluation.read_answers(args.answers).items()}
    items = [
        (question_id, str(row.get("question", "")), str(row["answer"]))
        for question_id, row in sorted(references.items())
    ]
    gateway = make_gateway(config, role="judge", record_path=args.record)
    verdicts, excluded = evaluation.run_local_eval(items, answers, gateway, config)
    accuracy = evaluation.local_accuracy(verdicts)
    if args.out:
        with Path(args.out).open("w", encoding="utf-8") as fh:
            for verdict in verdicts:
                fh.write(json.dumps(verdict.to_json_obj(), sort_keys=True, ensure_ascii=False) + "\n")
    if args.json:
        _print_json(
            {
                "accuracy": accuracy,
                "correct": sum(1 for v in verdicts if v.correct),
                "judged": len(verdicts),
                "excluded": excluded,
            }
        )
    else:
        print(
            f"local accuracy: {accuracy:.3f} "
            f"({sum(1 for v in verdicts if v.correct)}/{len(verdicts)} correct"
            + (f", {excluded} excluded" if excluded else "")
            + ")"
        )
    return EXIT_PARTIAL if excluded else EXIT_OK


def cmd_config(args, config: PipelineConfig) -> int:
    if args.action == "show":
        if args.json:
            _print_json(config.to_dict())
        else:
            print(dumps_config(config), end="")
        return EXIT_OK
    raise ConfigInvalid(f"unknown config action {args.action!r}")


# --- argument parsing -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmkgrag",
        description="Multimodal knowledge-graph retrieval-augmented generation.",
    )
    parser.add_argument("--config", help="path to a TOML-style config file")
    parser.add_argument(
        "-v", "--verbose", action="count", default=0,
        help="-v for progress, -vv for debug logging",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--record", help="record chat replies into this mock script file")
        return p

    p = add("ingest", cmd_ingest, "validate a corpus manifest and report totals")
    p.add_argument("--corpus", required=True, help="manifest file or corpus directory")
    p.add_argument("--json", action="store_true")

    p = add("build", cmd_build, "extract the first-pass graph from every page")
    p.add_argument("--corpus", required=True)
    p.add_argument("-w", "--workdir", default="work")

    p = add("refine", cmd_refine, "run the refinement pass over the built graph")
    p.add_argument("--corpus", required=True)
    p.add_argument("-w", "--workdir", default="work")

    p = add("index", cmd_index, "embed graph records and page renders into stores")
    p.add_argument("--corpus", required=True)
    p.add_argument("-w", "--workdir", default="work")

    p = add("query", cmd_query, "retrieve context for a question (no generation)")
    p.add_argument("question")
    p.add_argument("-w", "--workdir", default="work")
    p.add_argument("--no-graph", action="store_true", help="page retrieval only")
    p.add_argument("--json", action="store_true")

    p = add("ask", cmd_ask, "answer a question over the indexed corpus")
    p.add_argument("question")
    p.add_argument("--corpus", required=True)
    p.add_argument("-w", "--workdir", default="work")
    p.add_argument(
        "--mode", choices=("two-stage", "single-pass"),
        help="generation mode (default: two-stage unless configured otherwise)",
    )
    p.add_argument("--no-graph", action="store_true", help="page retrieval only")
    p.add_argument("--show-context", action="store_true")
    p.add_argument("--json", action="store_true")

    p = add("gen-questions", cmd_gen_questions, "synthesize the evaluation question set")
    p.add_argument("--corpus", required=True)
    p.add_argument("-w", "--workdir", default="work")
    p.add_argument("--count", type=int, default=5, help="personas, tasks, and questions per level")
    p.add_argument("--out", help="output path (default: <workdir>/questions.json)")

    p = add("eval-global", cmd_eval_global, "pairwise-judge two answer files")
    p.add_argument("--questions", required=True, help="question set JSON")
    p.add_argument("--answers-a", required=True, help="answers JSONL for system A")
    p.add_argument("--answers-b", required=True, help="answers JSONL for system B")
    p.add_argument("--seed", type=int, default=None, help="side-randomization seed")
    p.add_argument("--out", help="write verdicts JSONL here")
    p.add_argument("--json", action="store_true")

    p = add("eval-local", cmd_eval_local, "judge answers against references")
    p.add_argument("--references", required=True, help="reference answers JSONL")
    p.add_argument("--answers", required=True, help="generated answers JSONL")
    p.add_argument("--out", help="write verdicts JSONL here")
    p.add_argument("--json", action="store_true")

    p = add("config", cmd_config, "configuration utilities")
    p.add_argument("action", choices=("show",))
    p.add_argument("--json", action="store_true")

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING
    if args.verbose == 1:
        level = logging.INFO
    elif args.verbose >= 2:
        level = logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config)
        return args.func(args, config)
    except _CONFIG_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _MISSING_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except _BACKEND_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except PipelineError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
