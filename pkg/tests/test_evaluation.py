"""Question synthesis, blind pairwise judging, win rates, local accuracy."""

from __future__ import annotations

import json
import random

import pytest

from conftest import mock_gateway, script_reply, write_corpus

from mmkgrag.config import PipelineConfig
from mmkgrag.corpus import load_manifest
from mmkgrag.errors import GenerationShortfall, InvalidAnswerFile, UnparseableVerdict
from mmkgrag.evaluation import (
    DIMENSIONS,
    GlobalQuestionSet,
    LocalVerdict,
    PairwiseVerdict,
    corpus_outline,
    generate_global_questions,
    judge_local,
    judge_pairwise,
    largest_remainder_percentages,
    local_accuracy,
    presentation_swapped,
    read_answers,
    run_local_eval,
    run_pairwise_eval,
    winrate_report,
    write_answers,
)
from mmkgrag.gateway import ChatRequest, Gateway, TextPart
from mmkgrag.prompts import load_template, render_template


def plain_request(prompt, config):
    return ChatRequest(
        system_prompt="",
        parts=(TextPart(prompt),),
        temperature=config.temperature,
        max_output_tokens=config.max_output_tokens,
    )


def template_request(template, config, **slots):
    prompt = render_template(load_template(template, None), **slots)
    return plain_request(prompt, config)


class SequencedBackend:
    """Chat backend replying from a list, one reply per call, in order."""

    def __init__(self, replies, dim=16):
        self.replies = list(replies)
        self.embedding_dim = dim
        self.chat_calls = 0

    def complete(self, request):
        self.chat_calls += 1
        return self.replies.pop(0)

    def embed_text(self, text):
        raise NotImplementedError

    def embed_image(self, path):
        raise NotImplementedError


def sequenced_gateway(*replies):
    backend = SequencedBackend(replies)
    return Gateway(backend, retry_base_delay=0), backend


# --- corpus outline ---------------------------------------------------------------

def test_corpus_outline_previews_first_text(tmp_path):
    corpus = load_manifest(
        write_corpus(
            tmp_path / "c",
            {
                "alpha": [{"empty": True}, {"text": "  Solar   output doubled. "}],
                "beta": [{"text": "Wind turbines spread."}],
            },
        )
    )
    outline = corpus_outline(corpus)
    lines = outline.splitlines()
    assert lines[0] == "Collection: testcorpus"
    assert lines[1] == "- alpha (2 pages): Solar output doubled."
    assert lines[2] == "- beta (1 pages): Wind turbines spread."


# --- question synthesis -------------------------------------------------------------

def persona_objs(n):
    return [
        {"name": f"Persona {i}", "background": f"Background {i}"}
        for i in range(1, n + 1)
    ]


def staged_question_script(outline, config, n=2):
    """Scripted replies for all three synthesis stages, n of each thing."""
    script = {}
    script_reply(
        script,
        template_request("personas.txt", config, outline=outline, count=n),
        json.dumps(persona_objs(n)),
    )
    personas_text = "\n".join(
        f"{i}. Persona {i}: Background {i}" for i in range(1, n + 1)
    )
    tasks = [
        {"persona": i, "task": f"Task {i}.{j}"}
        for i in range(1, n + 1)
        for j in range(1, n + 1)
    ]
    script_reply(
        script,
        template_request(
            "tasks.txt", config, outline=outline, personas=personas_text, count=n
        ),
        json.dumps(tasks),
    )
    personas_tasks_text = "\n".join(
        f"{i}. Persona {i}: Background {i}\n"
        + "\n".join(f"  {i}.{j}. Task {i}.{j}" for j in range(1, n + 1))
        for i in range(1, n + 1)
    )
    questions = [
        {"persona": i, "task": j, "question": f"Question {i}.{j}.{q}"}
        for i in range(1, n + 1)
        for j in range(1, n + 1)
        for q in range(1, n + 1)
    ]
    script_reply(
        script,
        template_request(
            "questions.txt",
            config,
            outline=outline,
            personas_tasks=personas_tasks_text,
            count=n,
        ),
        json.dumps(questions),
    )
    return script


def test_generate_global_questions_counts_and_ids(config):
    outline = "Collection: c\n- doc (1 pages): text"
    gw = mock_gateway(script=staged_question_script(outline, config, n=2))
    question_set = generate_global_questions(
        outline, gw, config, corpus_id="c",
        personas_count=2, tasks_per_persona=2, questions_per_task=2,
    )
    assert len(question_set.personas) == 2
    assert [len(t) for t in question_set.tasks] == [2, 2]
    assert len(question_set.questions) == 2 * 2 * 2
    assert question_set.questions[0].question_id == "p1-t1-q1"
    assert question_set.questions[-1].question_id == "p2-t2-q2"
    ids = [q.question_id for q in question_set.questions]
    assert len(set(ids)) == len(ids)
    assert question_set.questions[0].question == "Question 1.1.1"
    assert gw.backend.chat_calls == 3


def test_question_set_json_round_trip(config):
    outline = "o"
    gw = mock_gateway(script=staged_question_script(outline, config, n=2))
    question_set = generate_global_questions(
        outline, gw, config, corpus_id="c",
        personas_count=2, tasks_per_persona=2, questions_per_task=2,
    )
    loaded = GlobalQuestionSet.from_json(question_set.to_json())
    assert loaded == question_set


def test_question_synthesis_shortfall_after_retry(config):
    outline = "o"
    script = {}
    script_reply(
        script,
        template_request("personas.txt", config, outline=outline, count=2),
        json.dumps({"not": "a list"}),
    )
    gw = mock_gateway(script=script)
    with pytest.raises(GenerationShortfall) as info:
        generate_global_questions(outline, gw, config, personas_count=2)
    assert "persona synthesis" in str(info.value)
    assert gw.backend.chat_calls == 2  # first try + one retry of the same request


def test_question_synthesis_wrong_count_is_invalid(config):
    outline = "o"
    script = {}
    script_reply(
        script,
        template_request("personas.txt", config, outline=outline, count=3),
        json.dumps(persona_objs(2)),  # asked for 3
    )
    gw = mock_gateway(script=script)
    with pytest.raises(GenerationShortfall):
        generate_global_questions(outline, gw, config, personas_count=3)


def test_question_synthesis_recovers_on_retry(config):
    good = [
        json.dumps(persona_objs(1)),
        json.dumps([{"persona": 1, "task": "Task 1.1"}]),
        json.dumps([{"persona": 1, "task": 1, "question": "Q?"}]),
    ]
    gw, backend = sequenced_gateway("garbage first", *good)
    question_set = generate_global_questions(
        "o", gw, config, personas_count=1, tasks_per_persona=1, questions_per_task=1
    )
    assert backend.chat_calls == 4
    assert question_set.questions[0].question_id == "p1-t1-q1"


# --- pairwise judging ----------------------------------------------------------------

def pick_question_ids(seed=0):
    """One id judged in given order, one judged with sides flipped."""
    plain = next(f"q{i}" for i in range(100) if not presentation_swapped(seed, f"q{i}"))
    flipped = next(f"q{i}" for i in range(100) if presentation_swapped(seed, f"q{i}"))
    return plain, flipped


def judge_reply(winners):
    return json.dumps(
        {
            dim: {"winner": winners[i], "justification": f"because {dim}"}
            for i, dim in enumerate(DIMENSIONS)
        }
    )


def judge_request(question, first, second, config):
    return template_request(
        "judge_pairwise.txt", config, question=question, answer_1=first, answer_2=second
    )


def test_judge_pairwise_maps_winners_back_through_swap(config):
    plain, flipped = pick_question_ids()
    script = {}
    # unswapped presentation: answer_1 is side A
    script_reply(
        script, judge_request("Q?", "alpha answer", "beta answer", config),
        judge_reply(["1", "2", "tie", "1"]),
    )
    # swapped presentation: answer_1 is side B
    script_reply(
        script, judge_request("Q?", "beta answer", "alpha answer", config),
        judge_reply(["1", "2", "tie", "1"]),
    )
    gw = mock_gateway(script=script)

    verdicts = judge_pairwise(plain, "Q?", "alpha answer", "beta answer", gw, config)
    assert [v.dimension for v in verdicts] == list(DIMENSIONS)
    assert [v.winner for v in verdicts] == ["A", "B", "tie", "A"]
    assert all(not v.swapped for v in verdicts)

    verdicts = judge_pairwise(flipped, "Q?", "alpha answer", "beta answer", gw, config)
    assert [v.winner for v in verdicts] == ["B", "A", "tie", "B"]
    assert all(v.swapped for v in verdicts)
    assert verdicts[0].justification == "because comprehensiveness"


def test_judge_pairwise_unparseable_after_retry(config):
    plain, _ = pick_question_ids()
    script = {}
    script_reply(
        script, judge_request("Q?", "a", "b", config), "I refuse to answer in JSON."
    )
    gw = mock_gateway(script=script)
    with pytest.raises(UnparseableVerdict):
        judge_pairwise(plain, "Q?", "a", "b", gw, config)
    assert gw.backend.chat_calls == 2


def test_judge_pairwise_recovers_on_retry(config):
    plain, _ = pick_question_ids()
    gw, backend = sequenced_gateway("garbage", judge_reply(["tie"] * 4))
    verdicts = judge_pairwise(plain, "Q?", "a", "b", gw, config)
    assert [v.winner for v in verdicts] == ["tie"] * 4
    assert backend.chat_calls == 2


def test_run_pairwise_eval_excludes_missing_and_unparseable(config):
    plain, flipped = pick_question_ids()
    script = {}
    script_reply(
        script, judge_request("Q1?", "a1", "b1", config), judge_reply(["1"] * 4)
    )
    # flipped question scripted with garbage: stays unparseable on retry
    script_reply(script, judge_request("Q2?", "b2", "a2", config), "garbage")
    gw = mock_gateway(script=script)
    questions = [(plain, "Q1?"), (flipped, "Q2?"), ("q-missing", "Q3?")]
    answers_a = {plain: "a1", flipped: "a2"}
    answers_b = {plain: "b1", flipped: "b2", "q-missing": "b3"}
    verdicts, excluded = run_pairwise_eval(
        questions, answers_a, answers_b, gw, config
    )
    assert excluded == 2
    assert {v.question_id for v in verdicts} == {plain}
    assert len(verdicts) == 4


# --- win rates -------------------------------------------------------------------

def test_largest_remainder_examples():
    assert largest_remainder_percentages([1, 1, 1]) == [33.4, 33.3, 33.3]
    assert largest_remainder_percentages([2, 1]) == [66.7, 33.3]
    assert largest_remainder_percentages([0, 0, 0]) == [0.0, 0.0, 0.0]
    assert largest_remainder_percentages([5]) == [100.0]
    assert largest_remainder_percentages([1, 0, 0]) == [100.0, 0.0, 0.0]


def test_largest_remainder_fuzz_sums_to_one_hundred():
    rng = random.Random(9)
    for _ in range(300):
        counts = [rng.randint(0, 40) for _ in range(rng.randint(1, 6))]
        pcts = largest_remainder_percentages(counts)
        assert len(pcts) == len(counts)
        if sum(counts) == 0:
            assert pcts == [0.0] * len(counts)
            continue
        # one-decimal values; their tenths reconcile to exactly 100.0
        assert all(round(p * 10) == pytest.approx(p * 10) for p in pcts)
        assert sum(round(p * 10) for p in pcts) == 1000
        assert round(sum(pcts), 6) == 100.0


def make_verdict(qid, dim, winner):
    return PairwiseVerdict(qid, dim, winner, "", False)


def test_winrate_report_counts_and_render():
    verdicts = []
    for qid, winner in (("q1", "A"), ("q2", "A"), ("q3", "tie")):
        for dim in DIMENSIONS:
            verdicts.append(make_verdict(qid, dim, winner))
    verdicts[1] = make_verdict("q1", "diversity", "B")  # one dissenting cell
    report = winrate_report(verdicts, excluded=2)
    assert report.questions_judged == 3
    assert report.excluded == 2
    assert [r.dimension for r in report.rows] == list(DIMENSIONS)
    first = report.rows[0]
    assert (first.wins_a, first.wins_b, first.ties) == (2, 0, 1)
    assert [first.pct_a, first.pct_b, first.pct_tie] == largest_remainder_percentages(
        [2, 0, 1]
    )
    diversity = report.rows[1]
    assert (diversity.wins_a, diversity.wins_b, diversity.ties) == (1, 1, 1)
    text = report.render()
    assert "questions judged: 3 (excluded: 2)" in text
    assert "comprehensiveness" in text
    obj = report.to_json_obj()
    assert obj["rows"][0]["wins_a"] == 2


# --- local judging ----------------------------------------------------------------

def test_judge_local_empty_answer_short_circuits(config):
    gw = mock_gateway()  # strict: any call would raise
    verdict = judge_local("Q?", "   ", "ref", gw, config, question_id="q1")
    assert verdict.correct is False
    assert gw.backend.chat_calls == 0


def test_judge_local_accepts_string_booleans(config):
    gw, backend = sequenced_gateway(json.dumps({"correct": "true", "justification": "ok"}))
    verdict = judge_local("Q?", "generated", "ref", gw, config)
    assert verdict.correct is True
    gw, backend = sequenced_gateway(json.dumps({"correct": "False"}))
    assert judge_local("Q?", "generated", "ref", gw, config).correct is False


def test_judge_local_retry_then_error(config):
    gw, backend = sequenced_gateway("garbage", json.dumps({"correct": False}))
    verdict = judge_local("Q?", "generated", "ref", gw, config)
    assert verdict.correct is False
    assert backend.chat_calls == 2

    gw, backend = sequenced_gateway("garbage", json.dumps({"correct": 3}))
    with pytest.raises(UnparseableVerdict):
        judge_local("Q?", "generated", "ref", gw, config)


def test_run_local_eval_missing_answer_counts_incorrect(config):
    gw, backend = sequenced_gateway(json.dumps({"correct": True}))
    items = [("q1", "Q1?", "ref1"), ("q2", "Q2?", "ref2")]
    verdicts, excluded = run_local_eval(items, {"q1": "an answer"}, gw, config)
    assert excluded == 0
    assert backend.chat_calls == 1  # q2 never reached the model
    by_id = {v.question_id: v for v in verdicts}
    assert by_id["q1"].correct is True
    assert by_id["q2"].correct is False
    assert local_accuracy(verdicts) == 0.5
    assert local_accuracy([]) == 0.0


def test_run_local_eval_excludes_unparseable(config):
    gw, backend = sequenced_gateway("garbage", "more garbage")
    verdicts, excluded = run_local_eval([("q1", "Q?", "r")], {"q1": "a"}, gw, config)
    assert verdicts == []
    assert excluded == 1


# --- answer files ----------------------------------------------------------------

def test_answers_file_round_trip(tmp_path):
    path = tmp_path / "answers.jsonl"
    rows = [
        {"question_id": "q1", "question": "Q1?", "answer": "A1"},
        {"question_id": "q2", "question": "Q2?", "answer": "A2"},
    ]
    write_answers(path, rows)
    loaded = read_answers(path)
    assert loaded["q1"]["answer"] == "A1"
    assert loaded["q2"]["question"] == "Q2?"


def test_read_answers_errors(tmp_path):
    with pytest.raises(InvalidAnswerFile):
        read_answers(tmp_path / "missing.jsonl")
    bad_json = tmp_path / "bad.jsonl"
    bad_json.write_text('{"question_id": "q1"\n', encoding="utf-8")
    with pytest.raises(InvalidAnswerFile):
        read_answers(bad_json)
    bad_fields = tmp_path / "fields.jsonl"
    bad_fields.write_text('{"question_id": "q1"}\n', encoding="utf-8")
    with pytest.raises(InvalidAnswerFile):
        read_answers(bad_fields)
