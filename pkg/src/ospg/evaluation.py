"""Instruction-following rate, task metrics, and the fixed-vs-natural instruction harness."""

from __future__ import annotations

import json
import re
import urllib.error
import urllib.request
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Sequence

from .grammar import Form, GrammarError, Instruction, StructuredOutput, TaskTag, parse_output


@dataclass(frozen=True)
class JudgeVerdict:
    correct: bool
    rationale: str = ""

    def __post_init__(self):
        if not self.correct and not self.rationale:
            raise ValueError("an incorrect verdict needs a rationale")


@dataclass(frozen=True)
class IfrReport:
    n_correct: int
    n_total: int
    ifr_percent: float

    def summary(self) -> str:
        return f"IFR: {self.ifr_percent:.1f}% ({self.n_correct}/{self.n_total})"


@dataclass(frozen=True)
class FiNlRow:
    task: TaskTag
    test_name: str
    metric_fi: float
    metric_nl: float
    delta: float

    @classmethod
    def make(cls, task: TaskTag, test_name: str, fi: float, nl: float) -> FiNlRow:
        return cls(task, test_name, fi, nl, nl - fi)


def _names(tasks: Iterable[TaskTag]) -> str:
    return ",".join(sorted(t.name for t in tasks)) or "none"


def rule_judge(instr: Instruction, out_text: str) -> JudgeVerdict:
    """Correct iff the output parses and names exactly the intended task set."""
    try:
        parsed = parse_output(out_text)
    except GrammarError as e:
        return JudgeVerdict(False, f"unparseable output: {e}")
    got = frozenset(parsed.tasks)
    if got != instr.intended_tasks:
        return JudgeVerdict(False, f"task mismatch: intended {_names(instr.intended_tasks)}, got {_names(got)}")
    return JudgeVerdict(True, "task set matches")


def compute_ifr(verdicts: Sequence[JudgeVerdict]) -> IfrReport:
    if not verdicts:
        raise ValueError("cannot compute IFR over zero verdicts")
    n = sum(1 for v in verdicts if v.correct)
    return IfrReport(n, len(verdicts), 100.0 * n / len(verdicts))


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def compute_wer(ref_tokens: Sequence, hyp_tokens: Sequence) -> float:
    """100 * (S + D + I) / |ref|.  Character error rate is this over characters."""
    if len(ref_tokens) == 0:
        raise ValueError("WER is undefined for an empty reference")
    return 100.0 * edit_distance(ref_tokens, hyp_tokens) / len(ref_tokens)


def corpus_wer(pairs: Sequence[tuple[Sequence, Sequence]]) -> float:
    """Total edits over total reference length."""
    if not pairs:
        raise ValueError("no pairs to score")
    ref_len = sum(len(r) for r, _ in pairs)
    if ref_len == 0:
        raise ValueError("WER is undefined for an empty reference")
    return 100.0 * sum(edit_distance(r, h) for r, h in pairs) / ref_len


def token_accuracy(pairs: Sequence[tuple[Sequence, Sequence]]) -> float:
    """Corpus-level 100 - WER, floored at zero."""
    return max(0.0, 100.0 - corpus_wer(pairs))


def task_accuracy(samples: Sequence[tuple[Iterable[str], Iterable[str]]]) -> float:
    if not samples:
        raise ValueError("no samples to score")
    hits = sum(1 for tgt, pred in samples if set(tgt) == set(pred))
    return 100.0 * hits / len(samples)


# -- per-task scoring of model outputs ----------------------------------------

def metric_name(task: TaskTag) -> str:
    return "WER" if task in (TaskTag.ASR, TaskTag.SRWT) else "ACC"


def _content_tokens(task: TaskTag, o: StructuredOutput | None) -> list[str]:
    if o is None:
        return []
    return o.content.split()


def safe_parse(text: str) -> StructuredOutput | None:
    try:
        return parse_output(text)
    except GrammarError:
        return None


def task_metric(task: TaskTag, targets: Sequence[str], outputs: Sequence[str]) -> float:
    """WER (ASR/SRWT, word tokens of the content) or attribute-set accuracy."""
    if len(targets) != len(outputs):
        raise ValueError("targets and outputs differ in length")
    parsed_t = [parse_output(t) for t in targets]
    parsed_o = [safe_parse(o) for o in outputs]
    if metric_name(task) == "WER":
        return corpus_wer([(_content_tokens(task, t), _content_tokens(task, o)) for t, o in zip(parsed_t, parsed_o)])
    return task_accuracy([(t.attributes, () if o is None else o.attributes) for t, o in zip(parsed_t, parsed_o)])


@dataclass
class EvalItem:
    """A single test prompt plus what the model produced."""

    id: str
    task: TaskTag
    instruction: Instruction
    target: str
    output: str = ""


def fi_vs_nl_report(items: Sequence[EvalItem], test_name: str = "synthetic") -> list[FiNlRow]:
    """One row per task; ``items`` already carry model outputs for both forms."""
    by_task: dict[TaskTag, dict[Form, list[EvalItem]]] = {}
    for it in items:
        by_task.setdefault(it.task, {}).setdefault(it.instruction.form, []).append(it)
    rows = []
    for task in sorted(by_task, key=lambda t: list(TaskTag).index(t)):
        forms = by_task[task]
        missing = [f.value for f in Form if not forms.get(f)]
        if missing:
            raise ValueError(f"task {task.name} has no {' or '.join(missing)} items")
        fi = task_metric(task, [i.target for i in forms[Form.FIXED]], [i.output for i in forms[Form.FIXED]])
        nl = task_metric(task, [i.target for i in forms[Form.NATURAL]], [i.output for i in forms[Form.NATURAL]])
        rows.append(FiNlRow.make(task, test_name, fi, nl))
    return rows


def format_finl_table(rows: Sequence[FiNlRow]) -> str:
    header = ("Task", "Test", "Metric", "FI", "NL", "Delta")
    body = [(r.task.name, r.test_name, metric_name(r.task), f"{r.metric_fi:.2f}", f"{r.metric_nl:.2f}",
             f"{r.delta:+.2f}") for r in rows]
    widths = [max(len(str(x)) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(line, widths)).rstrip() for line in (header, *body)]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def finl_records(rows: Sequence[FiNlRow]) -> list[str]:
    out = []
    for r in rows:
        d = asdict(r)
        d["task"] = r.task.name
        d["metric"] = metric_name(r.task)
        out.append(json.dumps(d, sort_keys=True))
    return out


# -- external judge -----------------------------------------------------------

PROMPT_TEMPLATE = (
    "instruction: {instruction}\n"
    "model_output: {output}\n"
    "question: Does the output fulfill the instruction? Answer YES or NO with a reason.\n"
)


class JudgeError(RuntimeError):
    """Transport failure or an unusable response from the judge endpoint."""


@dataclass(frozen=True)
class JudgeEndpoint:
    url: str
    timeout_ms: int = 10000


_VERDICT = re.compile(r"^\W*(YES|NO)\b[\s:,.\-]*(.*)", re.IGNORECASE | re.DOTALL)


def parse_judge_response(body: str) -> JudgeVerdict:
    m = _VERDICT.match(body)
    if not m:
        raise JudgeError(f"judge response has no leading YES/NO: {body[:80]!r}")
    yes = m.group(1).upper() == "YES"
    reason = m.group(2).strip()
    return JudgeVerdict(yes, reason or ("judge said YES" if yes else "judge said NO"))


def llm_judge_request(instr: Instruction, out_text: str, endpoint: JudgeEndpoint,
                      opener: Callable = urllib.request.urlopen) -> JudgeVerdict:
    body = PROMPT_TEMPLATE.format(instruction=instr.text, output=out_text).encode("utf-8")
    req = urllib.request.Request(endpoint.url, data=body, method="POST",
                                 headers={"Content-Type": "text/plain; charset=utf-8"})
    try:
        with opener(req, timeout=endpoint.timeout_ms / 1000) as resp:
            raw = resp.read()
    except (urllib.error.URLError, OSError) as e:
        raise JudgeError(f"judge endpoint {endpoint.url} unreachable: {e}") from e
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise JudgeError(f"judge response is not UTF-8: {e}") from e
    return parse_judge_response(text)


def judge_all(pairs: Sequence[tuple[Instruction, str]], judge: Callable[[Instruction, str], JudgeVerdict],
              workers: int = 1) -> list[JudgeVerdict]:
    """Apply ``judge`` to each pair; results keep input order regardless of ``workers``."""
    if workers <= 1:
        return [judge(i, o) for i, o in pairs]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(lambda p: judge(*p), pairs))
