"""Demo 5: synthesizing evaluation questions and judging answers.

Global evaluation has no gold answers: the model first invents personas
for the corpus, then tasks for each persona, then questions for each task
(count x count x count, validated at every step).  Two systems' answers
are then judged pairwise under blind labels — per question, a seeded hash
decides which side is presented first, so the judge cannot favor a slot —
across four dimensions, and win rates are rounded with the largest-
remainder rule so each dimension's percentages sum to exactly 100.0.

Local evaluation is the classic kind: a judge compares each generated
answer with a reference and accuracy is the share judged correct.

Run:  python3 demos/05_evaluate.py
"""

from __future__ import annotations

import json
import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))
from common import banner, build_demo_corpus, demo_config, script_reply, strict_gateway

from mmkgrag.evaluation import (
    DIMENSIONS,
    corpus_outline,
    generate_global_questions,
    local_accuracy,
    presentation_swapped,
    run_local_eval,
    run_pairwise_eval,
    winrate_report,
)
from mmkgrag.gateway import ChatRequest, TextPart
from mmkgrag.prompts import load_template, render_template

PERSONAS = [
    {"name": "Analyst", "background": "Covers acquisitions."},
    {"name": "Researcher", "background": "Tracks lab output."},
]
TASKS = [
    {"persona": 1, "task": "Assess the acquisition."},
    {"persona": 1, "task": "Map the product line."},
    {"persona": 2, "task": "Summarize lab output."},
    {"persona": 2, "task": "Compare research focus."},
]


def template_request(template, config, **slots):
    prompt = render_template(load_template(template), **slots)
    return ChatRequest(
        system_prompt="",
        parts=(TextPart(prompt),),
        temperature=config.temperature,
        max_output_tokens=config.max_output_tokens,
    )


def main() -> None:
    workspace = Path(tempfile.mkdtemp(prefix="demo5_"))
    corpus = build_demo_corpus(workspace / "corpus")
    config = demo_config()
    outline = corpus_outline(corpus)

    banner("Corpus outline shown to the question writer")
    print(outline)

    # --- stage the three synthesis calls (2 personas x 2 tasks x 2 questions)
    script: dict[str, str] = {}
    script_reply(script, template_request("personas.txt", config, outline=outline, count=2),
                 json.dumps(PERSONAS))
    personas_text = "\n".join(
        f"{i}. {p['name']}: {p['background']}" for i, p in enumerate(PERSONAS, start=1)
    )
    script_reply(
        script,
        template_request("tasks.txt", config, outline=outline,
                         personas=personas_text, count=2),
        json.dumps(TASKS),
    )
    personas_tasks_text = "\n".join(
        f"{i}. {p['name']}: {p['background']}\n" + "\n".join(
            f"  {i}.{j}. {t['task']}"
            for j, t in enumerate([t for t in TASKS if t["persona"] == i], start=1)
        )
        for i, p in enumerate(PERSONAS, start=1)
    )
    questions = [
        {"persona": i, "task": j, "question": f"Question {i}.{j}.{q} about the corpus?"}
        for i in (1, 2) for j in (1, 2) for q in (1, 2)
    ]
    script_reply(
        script,
        template_request("questions.txt", config, outline=outline,
                         personas_tasks=personas_tasks_text, count=2),
        json.dumps(questions),
    )

    gateway = strict_gateway(script, config)
    question_set = generate_global_questions(
        outline, gateway, config, corpus_id=corpus.corpus_id,
        personas_count=2, tasks_per_persona=2, questions_per_task=2,
    )
    banner("Synthesized question set (2 x 2 x 2 = 8)")
    for q in question_set.questions[:4]:
        print(f"  {q.question_id}: {q.question}")
    print(f"  ... {len(question_set.questions)} questions total")

    # --- stage the pairwise judging: system A wins three dimensions, one tie.
    answers_a = {q.question_id: f"A's thorough answer to {q.question_id}"
                 for q in question_set.questions}
    answers_b = {q.question_id: f"B's short answer to {q.question_id}"
                 for q in question_set.questions}
    del answers_b[question_set.questions[-1].question_id]  # one missing answer

    for q in question_set.questions[:-1]:
        swapped = presentation_swapped(config.seed, q.question_id)
        first, second = (
            (answers_b[q.question_id], answers_a[q.question_id]) if swapped
            else (answers_a[q.question_id], answers_b[q.question_id])
        )
        side_a_label = "2" if swapped else "1"  # the blind label side A carries
        winners = [side_a_label, side_a_label, "tie", side_a_label]
        reply = json.dumps({
            dim: {"winner": winners[i], "justification": f"judged on {dim}"}
            for i, dim in enumerate(DIMENSIONS)
        })
        script_reply(
            script,
            template_request("judge_pairwise.txt", config, question=q.question,
                             answer_1=first, answer_2=second),
            reply,
        )

    judge = strict_gateway(script, config)
    verdicts, excluded = run_pairwise_eval(
        [(q.question_id, q.question) for q in question_set.questions],
        answers_a, answers_b, judge, config, seed=config.seed,
    )
    banner("Pairwise win rates (blind, presentation order hashed per question)")
    print(winrate_report(verdicts, excluded=excluded).render())

    # --- local judging against references
    references = [
        ("loc-1", "Who bought Beacon?", "Apex."),
        ("loc-2", "What does Apex sell?", "Atlas."),
        ("loc-3", "How many labs does Beacon run?", "Three."),
    ]
    generated = {"loc-1": "Apex did.", "loc-2": "Atlas.", "loc-3": "Five."}
    judgements = {"loc-1": True, "loc-2": True, "loc-3": False}
    for question_id, question, reference in references:
        script_reply(
            script,
            template_request("judge_local.txt", config, question=question,
                             generated=generated[question_id], reference=reference),
            json.dumps({"correct": judgements[question_id],
                        "justification": "checked against the reference"}),
        )
    local_judge = strict_gateway(script, config)
    local_verdicts, local_excluded = run_local_eval(references, generated, local_judge, config)
    banner("Local accuracy against references")
    for verdict in local_verdicts:
        print(f"  {verdict.question_id}: correct={verdict.correct}")
    print(f"  accuracy: {local_accuracy(local_verdicts):.3f} "
          f"({local_excluded} excluded)")


if __name__ == "__main__":
    main()
