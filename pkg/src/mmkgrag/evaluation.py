"""Evaluation harness: question synthesis, pairwise judging, local judging.

Global evaluation builds a persona/task/question hierarchy over a corpus
outline (5 x 5 x 5 by default), judges two systems' answers pairwise on
four dimensions with blind labels and seed-derived side randomization,
and reports win rates with largest-remainder rounding so every row sums
to exactly 100.0.  Local evaluation is a binary correct/incorrect check
of a generated answer against a reference.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

from .config import PipelineConfig
from .corpus import Corpus
from .errors import GenerationShortfall, InvalidAnswerFile, UnparseableVerdict
from .gateway import ChatRequest, Gateway, TextPart, parse_json_reply
from .prompts import load_template, render_template

logger = logging.getLogger(__name__)

DIMENSIONS = ("comprehensiveness", "diversity", "empowerment", "overall")


# --- question set ---------------------------------------------------------------

@dataclass
class Persona:
    name: str
    background: str


@dataclass
class GlobalQuestion:
    """One corpus-level question, tied to its persona and task by index (1-based)."""

    question_id: str
    persona_index: int
    task_index: int
    question: str


@dataclass
class GlobalQuestionSet:
    """The full question hierarchy for one corpus."""

    corpus_id: str
    personas: list[Persona] = field(default_factory=list)
    tasks: list[list[str]] = field(default_factory=list)  # tasks[i] belongs to personas[i]
    questions: list[GlobalQuestion] = field(default_factory=list)

    def to_json(self) -> str:
        payload = {
            "corpus_id": self.corpus_id,
            "personas": [{"name": p.name, "background": p.background} for p in self.personas],
            "tasks": self.tasks,
            "questions": [
                {
                    "question_id": q.question_id,
                    "persona": q.persona_index,
                    "task": q.task_index,
                    "question": q.question,
                }
                for q in self.questions
            ],
        }
        return json.dumps(payload, sort_keys=True, ensure_ascii=False, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "GlobalQuestionSet":
        obj = json.loads(text)
        return cls(
            corpus_id=obj["corpus_id"],
            personas=[Persona(p["name"], p["background"]) for p in obj["personas"]],
            tasks=[list(t) for t in obj["tasks"]],
            questions=[
                GlobalQuestion(q["question_id"], q["persona"], q["task"], q["question"])
                for q in obj["questions"]
            ],
        )


def corpus_outline(corpus: Corpus, preview_chars: int = 300) -> str:
    """Compact description of a corpus for the question-synthesis prompts."""
    lines = [f"Collection: {corpus.corpus_id}"]
    for doc_id, pages in corpus.documents:
        preview = ""
        for page in pages:
            if page.text.strip():
                preview = " ".join(page.text.split())[:preview_chars]
                break
        lines.append(f"- {doc_id} ({len(pages)} pages): {preview}")
    return "\n".join(lines)


def _call_with_one_retry(gateway: Gateway, request: ChatRequest, parse: Callable, stage: str):
    last_error: Exception | None = None
    for attempt in range(2):
        reply = gateway.complete(request)
        try:
            return parse(reply)
        except ValueError as exc:
            last_error = exc
            if attempt == 0:
                logger.warning("%s reply invalid (%s); retrying once", stage, exc)
    raise GenerationShortfall(f"{stage}: {last_error}")


def generate_global_questions(
    outline: str,
    gateway: Gateway,
    config: PipelineConfig,
    corpus_id: str = "",
    personas_count: int = 5,
    tasks_per_persona: int = 5,
    questions_per_task: int = 5,
) -> GlobalQuestionSet:
    """Three chained synthesis calls: personas, then tasks, then questions.

    Each stage validates shape and exact counts, retries once on an
    invalid reply, and raises GenerationShortfall naming the stage when
    the retry also falls short.  Question ids are ``p<i>-t<j>-q<n>``.
    """

    def request(template: str, **slots) -> ChatRequest:
        prompt = render_template(
            load_template(template, config.prompt_dir or None), **slots
        )
        return ChatRequest(
            system_prompt="",
            parts=(TextPart(prompt),),
            temperature=config.temperature,
            max_output_tokens=config.max_output_tokens,
        )

    def parse_personas(reply: str) -> list[Persona]:
        obj = parse_json_reply(reply)
        if not isinstance(obj, list):
            raise ValueError("personas reply is not a list")
        personas = []
        for item in obj:
            if not isinstance(item, dict) or not item.get("name") or not item.get("background"):
                raise ValueError(f"bad persona entry: {item!r}")
            personas.append(Persona(str(item["name"]), str(item["background"])))
        if len(personas) != personas_count:
            raise ValueError(f"expected {personas_count} personas, got {len(personas)}")
        return personas

    personas = _call_with_one_retry(
        gateway,
        request("personas.txt", outline=outline, count=personas_count),
        parse_personas,
        "persona synthesis",
    )
    personas_text = "\n".join(
        f"{i}. {p.name}: {p.background}" for i, p in enumerate(personas, start=1)
    )

    def parse_tasks(reply: str) -> list[list[str]]:
        obj = parse_json_reply(reply)
        if not isinstance(obj, list):
            raise ValueError("tasks reply is not a list")
        per_persona: list[list[str]] = [[] for _ in personas]
        for item in obj:
            if not isinstance(item, dict) or not item.get("task"):
                raise ValueError(f"bad task entry: {item!r}")
            index = item.get("persona")
            if not isinstance(index, int) or not (1 <= index <= len(personas)):
                raise ValueError(f"task entry has bad persona index: {item!r}")
            per_persona[index - 1].append(str(item["task"]))
        for i, tasks in enumerate(per_persona, start=1):
            if len(tasks) != tasks_per_persona:
                raise ValueError(
                    f"persona {i}: expected {tasks_per_persona} tasks, got {len(tasks)}"
                )
        return per_persona

    tasks = _call_with_one_retry(
        gateway,
        request(
            "tasks.txt",
            outline=outline,
            personas=personas_text,
            count=tasks_per_persona,
        ),
        parse_tasks,
        "task synthesis",
    )
    personas_tasks_text = "\n".join(
        f"{i}. {p.name}: {p.background}\n"
        + "\n".join(f"  {i}.{j}. {task}" for j, task in enumerate(tasks[i - 1], start=1))
        for i, p in enumerate(personas, start=1)
    )

    def parse_questions(reply: str) -> list[GlobalQuestion]:
        obj = parse_json_reply(reply)
        if not isinstance(obj, list):
            raise ValueError("questions reply is not a list")
        buckets: dict[tuple[int, int], list[str]] = {
            (i, j): []
            for i in range(1, len(personas) + 1)
            for j in range(1, tasks_per_persona + 1)
        }
        for item in obj:
            if not isinstance(item, dict) or not item.get("question"):
                raise ValueError(f"bad question entry: {item!r}")
            key = (item.get("persona"), item.get("task"))
            if key not in buckets:
                raise ValueError(f"question entry has bad indices: {item!r}")
            buckets[key].append(str(item["question"]))
        questions: list[GlobalQuestion] = []
        for (i, j), bucket in sorted(buckets.items()):
            if len(bucket) != questions_per_task:
                raise ValueError(
                    f"persona {i} task {j}: expected {questions_per_task} "
                    f"questions, got {len(bucket)}"
                )
            for n, question in enumerate(bucket, start=1):
                questions.append(GlobalQuestion(f"p{i}-t{j}-q{n}", i, j, question))
        return questions

    questions = _call_with_one_retry(
        gateway,
        request(
            "questions.txt",
            outline=outline,
            personas_tasks=personas_tasks_text,
            count=questions_per_task,
        ),
        parse_questions,
        "question synthesis",
    )
    return GlobalQuestionSet(
        corpus_id=corpus_id, personas=personas, tasks=tasks, questions=questions
    )


# --- pairwise judging -----------------------------------------------------------

@dataclass
class PairwiseVerdict:
    """One dimension's outcome for one question.

    ``winner`` names the logical side (A is always the first answer the
    caller passed in), regardless of presentation order; ``swapped``
    records whether sides were flipped in the prompt.
    """

    question_id: str
    dimension: str
    winner: str  # "A" | "B" | "tie"
    justification: str
    swapped: bool

    def to_json_obj(self) -> dict:
        return {
            "question_id": self.question_id,
            "dimension": self.dimension,
            "winner": self.winner,
            "justification": self.justification,
            "swapped": self.swapped,
        }


def presentation_swapped(seed: int, question_id: str) -> bool:
    """Deterministic side-flip decision for one question under one seed."""
    digest = hashlib.sha256(f"{seed}:{question_id}".encode("utf-8")).digest()
    return bool(digest[0] & 1)


def judge_pairwise(
    question_id: str,
    question: str,
    answer_a: str,
    answer_b: str,
    gateway: Gateway,
    config: PipelineConfig,
    seed: int = 0,
) -> list[PairwiseVerdict]:
    """Judge one question pair on all four dimensions in one call.

    Answers are presented under blind labels, with presentation order
    flipped per question by :func:`presentation_swapped`; verdicts are
    mapped back to the caller's sides.  An unparseable reply is retried
    once, then UnparseableVerdict is raised.
    """
    swapped = presentation_swapped(seed, question_id)
    first, second = (answer_b, answer_a) if swapped else (answer_a, answer_b)
    prompt = render_template(
        load_template("judge_pairwise.txt", config.prompt_dir or None),
        question=question,
        answer_1=first,
        answer_2=second,
    )
    request = ChatRequest(
        system_prompt="",
        parts=(TextPart(prompt),),
        temperature=config.temperature,
        max_output_tokens=config.max_output_tokens,
    )

    def parse(reply: str) -> list[PairwiseVerdict]:
        obj = parse_json_reply(reply)
        if not isinstance(obj, dict):
            raise ValueError("judge reply is not an object")
        verdicts = []
        for dimension in DIMENSIONS:
            cell = obj.get(dimension)
            if not isinstance(cell, dict):
                raise ValueError(f"missing dimension {dimension!r}")
            raw_winner = str(cell.get("winner", "")).strip().lower()
            if raw_winner not in ("1", "2", "tie"):
                raise ValueError(f"{dimension}: bad winner {cell.get('winner')!r}")
            if raw_winner == "tie":
                winner = "tie"
            elif raw_winner == "1":
                winner = "B" if swapped else "A"
            else:
                winner = "A" if swapped else "B"
            verdicts.append(
                PairwiseVerdict(
                    question_id=question_id,
                    dimension=dimension,
                    winner=winner,
                    justification=str(cell.get("justification", "")),
                    swapped=swapped,
                )
            )
        return verdicts

    last_error: Exception | None = None
    for attempt in range(2):
        reply = gateway.complete(request)
        try:
            return parse(reply)
        except ValueError as exc:
            last_error = exc
            if attempt == 0:
                logger.warning("judge reply invalid for %s (%s); retrying", question_id, exc)
    raise UnparseableVerdict(f"{question_id}: {last_error}")


def run_pairwise_eval(
    questions: Sequence[tuple[str, str]],
    answers_a: dict[str, str],
    answers_b: dict[str, str],
    gateway: Gateway,
    config: PipelineConfig,
    seed: int = 0,
) -> tuple[list[PairwiseVerdict], int]:
    """Judge every question present in both answer sets.

    Questions whose judgement stays unparseable after the retry are
    excluded; the exclusion count is returned and logged.
    """
    verdicts: list[PairwiseVerdict] = []
    excluded = 0
    for question_id, question in questions:
        if question_id not in answers_a or question_id not in answers_b:
            logger.warning("question %s missing from an answer file; excluded", question_id)
            excluded += 1
            continue
        try:
            verdicts.extend(
                judge_pairwise(
                    question_id,
                    question,
                    answers_a[question_id],
                    answers_b[question_id],
                    gateway,
                    config,
                    seed=seed,
                )
            )
        except UnparseableVerdict as exc:
            logger.warning("excluding %s: %s", question_id, exc)
            excluded += 1
    if excluded:
        logger.warning("%d question(s) excluded from the pairwise report", excluded)
    return verdicts, excluded


# --- win-rate report ------------------------------------------------------------

def largest_remainder_percentages(counts: Sequence[int]) -> list[float]:
    """Counts as one-decimal percentages that sum to exactly 100.0.

    Exact shares are computed in tenths of a percent with rational
    arithmetic; leftover tenths go to the largest remainders (earlier
    entries win exact remainder ties), so the rounded values always sum
    to 1000 tenths.  All-zero counts round to all-zero percentages.
    """
    total = sum(counts)
    if total == 0:
        return [0.0 for _ in counts]
    exact = [Fraction(count * 1000, total) for count in counts]
    tenths = [int(share) for share in exact]
    leftover = 1000 - sum(tenths)
    by_remainder = sorted(
        range(len(counts)), key=lambda i: (-(exact[i] - tenths[i]), i)
    )
    for i in by_remainder[:leftover]:
        tenths[i] += 1
    return [t / 10 for t in tenths]


@dataclass
class WinRateRow:
    dimension: str
    wins_a: int
    wins_b: int
    ties: int
    pct_a: float
    pct_b: float
    pct_tie: float

    def to_json_obj(self) -> dict:
        return {
            "dimension": self.dimension,
            "wins_a": self.wins_a,
            "wins_b": self.wins_b,
            "ties": self.ties,
            "pct_a": self.pct_a,
            "pct_b": self.pct_b,
            "pct_tie": self.pct_tie,
        }


@dataclass
class WinRateReport:
    rows: list[WinRateRow]
    questions_judged: int
    excluded: int = 0

    def to_json_obj(self) -> dict:
        return {
            "rows": [row.to_json_obj() for row in self.rows],
            "questions_judged": self.questions_judged,
            "excluded": self.excluded,
        }

    def render(self) -> str:
        lines = [
            f"questions judged: {self.questions_judged}"
            + (f" (excluded: {self.excluded})" if self.excluded else ""),
            f"{'dimension':<18} {'A wins':>7} {'B wins':>7} {'ties':>7}"
            f" {'A %':>7} {'B %':>7} {'tie %':>7}",
        ]
        for row in self.rows:
            lines.append(
                f"{row.dimension:<18} {row.wins_a:>7} {row.wins_b:>7} {row.ties:>7}"
                f" {row.pct_a:>7.1f} {row.pct_b:>7.1f} {row.pct_tie:>7.1f}"
            )
        return "\n".join(lines)


def winrate_report(verdicts: Sequence[PairwiseVerdict], excluded: int = 0) -> WinRateReport:
    """Aggregate verdicts into one row per dimension."""
    rows = []
    for dimension in DIMENSIONS:
        relevant = [v for v in verdicts if v.dimension == dimension]
        wins_a = sum(1 for v in relevant if v.winner == "A")
        wins_b = sum(1 for v in relevant if v.winner == "B")
        ties = sum(1 for v in relevant if v.winner == "tie")
        pct_a, pct_b, pct_tie = largest_remainder_percentages([wins_a, wins_b, ties])
        rows.append(WinRateRow(dimension, wins_a, wins_b, ties, pct_a, pct_b, pct_tie))
    return WinRateReport(
        rows=rows,
        questions_judged=len({v.question_id for v in verdicts}),
        excluded=excluded,
    )


# --- local judging ----------------------------------------------------------------

@dataclass
class LocalVerdict:
    question_id: str
    correct: bool
    justification: str

    def to_json_obj(self) -> dict:
        return {
            "question_id": self.question_id,
            "correct": self.correct,
            "justification": self.justification,
        }


def judge_local(
    question: str,
    generated: str,
    reference: str,
    gateway: Gateway,
    config: PipelineConfig,
    question_id: str = "",
) -> LocalVerdict:
    """Binary check of a generated answer against a reference.

    An empty generated answer is incorrect without a model call.  An
    unparseable judge reply is retried once, then UnparseableVerdict.
    """
    if not generated.strip():
        return LocalVerdict(question_id, False, "generated answer is empty")
    prompt = render_template(
        load_template("judge_local.txt", config.prompt_dir or None),
        question=question,
        generated=generated,
        reference=reference,
    )
    request = ChatRequest(
        system_prompt="",
        parts=(TextPart(prompt),),
        temperature=config.temperature,
        max_output_tokens=config.max_output_tokens,
    )

    def parse(reply: str) -> LocalVerdict:
        obj = parse_json_reply(reply)
        if not isinstance(obj, dict):
            raise ValueError("local judge reply is not an object")
        correct = obj.get("correct")
        if isinstance(correct, str):
            lowered = correct.strip().lower()
            if lowered in ("true", "false"):
                correct = lowered == "true"
        if not isinstance(correct, bool):
            raise ValueError(f"bad 'correct' value: {obj.get('correct')!r}")
        return LocalVerdict(question_id, correct, str(obj.get("justification", "")))

    last_error: Exception | None = None
    for attempt in range(2):
        reply = gateway.complete(request)
        try:
            return parse(reply)
        except ValueError as exc:
            last_error = exc
            if attempt == 0:
                logger.warning("local judge reply invalid for %s (%s); retrying", question_id, exc)
    raise UnparseableVerdict(f"{question_id}: {last_error}")


def run_local_eval(
    items: Sequence[tuple[str, str, str]],
    answers: dict[str, str],
    gateway: Gateway,
    config: PipelineConfig,
) -> tuple[list[LocalVerdict], int]:
    """Judge ``(question_id, question, reference)`` items against answers.

    A missing answer counts as empty (incorrect, no model call); verdicts
    unparseable after retry are excluded and counted.
    """
    verdicts: list[LocalVerdict] = []
    excluded = 0
    for question_id, question, reference in items:
        generated = answers.get(question_id, "")
        try:
            verdicts.append(
                judge_local(
                    question, generated, reference, gateway, config,
                    question_id=question_id,
                )
            )
        except UnparseableVerdict as exc:
            logger.warning("excluding %s: %s", question_id, exc)
            excluded += 1
    if excluded:
        logger.warning("%d question(s) excluded from the local report", excluded)
    return verdicts, excluded


def local_accuracy(verdicts: Sequence[LocalVerdict]) -> float:
    """Fraction of verdicts judged correct; 0.0 when there are none."""
    if not verdicts:
        return 0.0
    return sum(1 for v in verdicts if v.correct) / len(verdicts)


# --- answer files ----------------------------------------------------------------

def write_answers(path: str | Path, rows: Sequence[dict]) -> None:
    """Write answers as JSONL rows of question_id / question / answer."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")


def read_answers(path: str | Path) -> dict[str, dict]:
    """Read a JSONL answers file into ``{question_id: row}``.

    Raises:
        InvalidAnswerFile: unreadable file, bad JSON line, or a row
            without the required fields.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise InvalidAnswerFile(f"{path}: {exc}") from exc
    rows: dict[str, dict] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise InvalidAnswerFile(f"{path}:{lineno}: {exc}") from exc
        if not isinstance(row, dict) or "question_id" not in row or "answer" not in row:
            raise InvalidAnswerFile(
                f"{path}:{lineno}: rows need question_id and answer fields"
            )
        rows[str(row["question_id"])] = row
    return rows
