"""Format/correctness scoring of generated outputs.

Two judges share one interface: :class:`LLMJudge` asks a judge model through a
:class:`~taskvec.clients.GeneratorClient`, :class:`OracleJudge` applies fixed rules
and exists so experiments can run offline and deterministically.
"""

from __future__ import annotations

import json
import re
import threading
from dataclasses import asdict, dataclass, field
from typing import Protocol

from .clients import GeneratorClient


class ScoreParseError(ValueError):
    pass


class JudgingError(RuntimeError):
    def __init__(self, message: str, responses: list[str]):
        super().__init__(message)
        self.responses = list(responses)


@dataclass(frozen=True)
class ScorePair:
    format_score: int
    correctness_score: int

    def __post_init__(self) -> None:
        for name in ("format_score", "correctness_score"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or not 0 <= v <= 10:
                raise ValueError(f"{name} must be an integer in [0, 10], got {v!r}")


@dataclass(frozen=True)
class JudgeRequest:
    instruction: str
    sample_input: str
    expected_output: str
    submission: str


JUDGE_SYSTEM_PROMPT = """\
You are a judge evaluating responses to tasks. You must provide exactly two scores:

1. Format score (0-10): How well the response matches the semantic type required by the task
- Score 10: Response provides exactly the type of answer requested (e.g., classification label for classification tasks, Yes/No for yes/no questions)
- Score 7-9: Provides the right type of answer with minor formatting issues
- Score 4-6: Partially attempts to provide the required type (e.g., some classifications missing in classification task)
- Score 1-3: Attempts to answer but mostly missing required type markers
.

2. Correctness score (0-10): How accurate/correct the actual answer is within its task domain
- Score 10: Completely correct task completion
- Score 7-9: Mostly correct task completion with minor issues
- Score 4-6: Partial task completion with significant issues
- Score 1-3: Minimal correct task completion
- Score 0: No actual task completion (e.g., just repeating input, missing classifications)

Important: Simply repeating input or providing incomplete answers does not count as task completion. The response must actually perform the requested operation (classify, summarize, etc.) to receive any correctness points.

For classification tasks, any classification label gets a high format score even if wrong (e.g., answering "Opinion" for a fact still gets a high format score). For Yes/No tasks, any Yes/No answer gets a high format score regardless of correctness.

You must output your scores in exactly this format (without quotation marks):
FORMAT_SCORE,CORRECTNESS_SCORE

For example, the output might be:
8,3

Do not provide any explanations or additional text. Only output two numbers separated by a comma."""

JUDGE_USER_TEMPLATE = '''\
You are a judge evaluating responses to tasks. You must provide exactly two scores:
1. Instruction: """{instruction}"""
2. Sample Input: """{example_input}"""
3. Expected Output: """{example_output}"""
4. Submission to evaluate: """{output_to_evaluate}"""'''

_SLOT = re.compile(r"\{(instruction|example_input|example_output|output_to_evaluate)\}")


def build_judge_prompts(req: JudgeRequest) -> tuple[str, str]:
    values = {"instruction": req.instruction, "example_input": req.sample_input,
              "example_output": req.expected_output, "output_to_evaluate": req.submission}
    # one pass so braces inside field values are never re-substituted
    user = _SLOT.sub(lambda m: values[m.group(1)], JUDGE_USER_TEMPLATE)
    return JUDGE_SYSTEM_PROMPT, user


_SCORE_RE = re.compile(r"[ \t\r\n]*(10|[0-9])[ \t\r\n]*,[ \t\r\n]*(10|[0-9])[ \t\r\n]*")


def parse_scores(text: str) -> ScorePair:
    m = _SCORE_RE.fullmatch(text)
    if m is None:
        raise ScoreParseError(f"not a score pair: {text[:60]!r}")
    return ScorePair(int(m.group(1)), int(m.group(2)))


@dataclass
class Transcript:
    request: JudgeRequest
    responses: list[str] = field(default_factory=list)
    scores: ScorePair | None = None
    error: str | None = None

    def to_json(self) -> str:
        return json.dumps({
            "request": asdict(self.request), "responses": self.responses,
            "scores": asdict(self.scores) if self.scores else None, "error": self.error,
        }, ensure_ascii=False)


def judge_output(req: JudgeRequest, client: GeneratorClient, max_retries: int = 2,
                 transcript: Transcript | None = None) -> ScorePair:
    """Ask the judge model; re-ask on unparseable replies, at most ``max_retries`` times."""
    system, user = build_judge_prompts(req)
    record = transcript if transcript is not None else Transcript(req)
    for _ in range(max_retries + 1):
        text = client.complete(user, system=system)
        record.responses.append(text)
        try:
            record.scores = parse_scores(text)
            return record.scores
        except ScoreParseError:
            continue
    record.error = "unparseable judge responses"
    raise JudgingError(f"no parseable scores after {len(record.responses)} responses", record.responses)


# -- oracle ----------------------------------------------------------------------

def normalize(text: str) -> str:
    return " ".join(text.split()).casefold()


_NUMBER = re.compile(r"[-+]?(\d+([.,]\d+)*|\.\d+)%?")
_YESNO = re.compile(r"(yes|no)[.!]?")


def output_type(text: str) -> str:
    """Coarse type of an answer, used to award format credit."""
    t = normalize(text)
    if not t:
        return "empty"
    if _YESNO.fullmatch(t):
        return "yesno"
    if _NUMBER.fullmatch(t):
        return "number"
    if t[0] in "{[":
        try:
            json.loads(text)
            return "json"
        except ValueError:
            pass
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    if len(lines) >= 2:
        return "list"
    if not any(c.isalnum() for c in t):
        return "other"
    return "short" if len(t.split()) <= 3 else "text"


def oracle_scores(req: JudgeRequest) -> ScorePair:
    sub, exp = normalize(req.submission), normalize(req.expected_output)
    if sub == exp:
        return ScorePair(10, 10)
    fmt = 10 if output_type(req.submission) == output_type(req.expected_output) else 0
    return ScorePair(fmt, 0)


def oracle_judge(req: JudgeRequest) -> ScorePair:
    return oracle_scores(req)


class Judge(Protocol):
    kind: str
    judge_id: str

    def score(self, req: JudgeRequest) -> ScorePair: ...


class OracleJudge:
    kind = "oracle"
    judge_id = "oracle-rules-v1"

    def score(self, req: JudgeRequest) -> ScorePair:
        return oracle_scores(req)


class LLMJudge:
    kind = "llm"

    def __init__(self, client: GeneratorClient, max_retries: int = 2):
        self.client = client
        self.max_retries = max_retries
        self.judge_id = f"llm:{client.label}"
        self.transcripts: list[Transcript] = []
        self._lock = threading.Lock()

    def score(self, req: JudgeRequest) -> ScorePair:
        record = Transcript(req)
        try:
            return judge_output(req, self.client, self.max_retries, record)
        finally:
            with self._lock:
                self.transcripts.append(record)


__all__ = [
    "JUDGE_SYSTEM_PROMPT", "JUDGE_USER_TEMPLATE", "Judge", "JudgeRequest", "JudgingError", "LLMJudge",
    "OracleJudge", "ScoreParseError", "ScorePair", "Transcript", "build_judge_prompts", "judge_output",
    "normalize", "oracle_judge", "output_type", "parse_scores",
]
