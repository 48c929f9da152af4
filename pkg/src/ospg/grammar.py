"""Task tags, attribute tags, the structured-output grammar, and the tokenizer.

Grammar: ``task_tag+ content? attribute_tag*`` -- for example
``<asr><sap>hello world<ADULT>``.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence


class TaskTag(enum.Enum):
    ASR = "<asr>"
    SRWT = "<srwt>"
    VED = "<ved>"
    SER = "<ser>"
    SSR = "<ssr>"
    SGC = "<sgc>"
    SAP = "<sap>"
    STTC = "<sttc>"

    @property
    def surface(self) -> str:
        return self.value

    @classmethod
    def from_name(cls, name: str) -> TaskTag:
        try:
            return cls[name.upper()]
        except KeyError:
            raise ValueError(f"unknown task name {name!r}") from None


SPEECH_TASKS = (TaskTag.ASR, TaskTag.SRWT, TaskTag.VED, TaskTag.SER, TaskTag.SSR, TaskTag.SGC, TaskTag.SAP)

ATTRIBUTES: dict[TaskTag, tuple[str, ...]] = {
    TaskTag.SAP: ("<CHILD>", "<ADULT>", "<OLD>"),
    TaskTag.SGC: ("<MALE>", "<FEMALE>"),
    TaskTag.SER: ("<HAPPY>", "<SAD>", "<ANGRY>", "<NEUTRAL>", "<SURPRISE>"),
    TaskTag.SSR: ("<NEWS>", "<CHAT>", "<STORY>"),
    TaskTag.VED: ("<LAUGH>", "<COUGH>", "<NOISE>", "<NONE>"),
}

ATTRIBUTE_OWNER: dict[str, TaskTag] = {a: t for t, labels in ATTRIBUTES.items() for a in labels}
TASK_BY_SURFACE: dict[str, TaskTag] = {t.surface: t for t in TaskTag}
TASK_ALIASES: dict[str, TaskTag] = {"<age>": TaskTag.SAP}

CHARSET = "abcdefghijklmnopqrstuvwxyz0123456789 .,-|?"
PAD, BOS, EOS = "<|pad|>", "<|bos|>", "<|eos|>"

_TAG_RE = re.compile(r"<[A-Za-z]+>")


class GrammarError(ValueError):
    pass


class MissingTaskTag(GrammarError):
    pass


class UnknownTag(GrammarError):
    pass


class OrphanAttribute(GrammarError):
    pass


class MisplacedTag(GrammarError):
    pass


@dataclass(frozen=True)
class StructuredOutput:
    tasks: tuple[TaskTag, ...]
    content: str = ""
    attributes: tuple[str, ...] = ()

    def validate(self) -> None:
        if not self.tasks:
            raise MissingTaskTag("structured output needs at least one task tag")
        if len(set(self.tasks)) != len(self.tasks):
            raise GrammarError(f"duplicate task tags: {[t.name for t in self.tasks]}")
        for a in self.attributes:
            owner = ATTRIBUTE_OWNER.get(a)
            if owner is None:
                raise UnknownTag(f"unknown attribute tag {a}")
            if owner not in self.tasks:
                raise OrphanAttribute(f"{a} belongs to {owner.name}, which is not among the task tags")
        if _TAG_RE.search(self.content):
            raise MisplacedTag(f"content contains a tag: {self.content!r}")


class Form(enum.Enum):
    FIXED = "fixed"
    NATURAL = "natural"


@dataclass(frozen=True)
class Instruction:
    text: str
    form: Form
    intended_tasks: frozenset[TaskTag]

    def __post_init__(self):
        if not self.intended_tasks:
            raise ValueError("instruction needs at least one intended task")
        if self.form is Form.FIXED:
            rest = _TAG_RE.sub(lambda m: "" if m.group(0) in TASK_BY_SURFACE else m.group(0), self.text)
            if rest:
                raise ValueError(f"fixed instruction must contain only task tags: {self.text!r}")


def fixed_instruction(tasks: Sequence[TaskTag]) -> Instruction:
    return Instruction("".join(t.surface for t in tasks), Form.FIXED, frozenset(tasks))


def _split(text: str) -> list[tuple[bool, str]]:
    """Split text into (is_tag, piece) items."""
    items, pos = [], 0
    for m in _TAG_RE.finditer(text):
        if m.start() > pos:
            items.append((False, text[pos:m.start()]))
        items.append((True, m.group(0)))
        pos = m.end()
    if pos < len(text):
        items.append((False, text[pos:]))
    return items


def parse_output(text: str) -> StructuredOutput:
    items = _split(text)
    for is_tag, piece in items:
        if is_tag and piece not in TASK_BY_SURFACE and piece not in TASK_ALIASES and piece not in ATTRIBUTE_OWNER:
            raise UnknownTag(f"unknown tag {piece}")
    tasks: list[TaskTag] = []
    i = 0
    while i < len(items) and items[i][0]:
        tag = TASK_BY_SURFACE.get(items[i][1]) or TASK_ALIASES.get(items[i][1])
        if tag is None:
            break
        if tag in tasks:
            raise GrammarError(f"duplicate task tag {items[i][1]}")
        tasks.append(tag)
        i += 1
    if not tasks:
        raise MissingTaskTag(f"output does not start with a task tag: {text[:40]!r}")
    j = len(items)
    while j > i and items[j - 1][0] and items[j - 1][1] in ATTRIBUTE_OWNER:
        j -= 1
    middle = items[i:j]
    for is_tag, piece in middle:
        if is_tag:
            raise MisplacedTag(f"tag {piece} inside content")
    out = StructuredOutput(tuple(tasks), "".join(p for _, p in middle), tuple(p for _, p in items[j:]))
    out.validate()
    return out


def render_target(o: StructuredOutput) -> str:
    o.validate()
    return "".join(t.surface for t in o.tasks) + o.content + "".join(o.attributes)


# -- tokenizer --------------------------------------------------------------

@dataclass
class Vocabulary:
    tokens: list[str]
    _ids: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self._ids = {t: i for i, t in enumerate(self.tokens)}
        if len(self._ids) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        self._tags = sorted((t for t in self.tokens if len(t) > 1), key=len, reverse=True)
        self.task_ids = frozenset(self._ids[t.surface] for t in TaskTag if t.surface in self._ids)

    def __len__(self):
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self._ids[token]

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    @property
    def pad_id(self) -> int:
        return self._ids[PAD]

    @property
    def bos_id(self) -> int:
        return self._ids[BOS]

    @property
    def eos_id(self) -> int:
        return self._ids[EOS]

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> Vocabulary:
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


def default_vocab() -> Vocabulary:
    tokens = [PAD, BOS, EOS]
    tokens += [t.surface for t in TaskTag]
    tokens += [a for labels in ATTRIBUTES.values() for a in labels]
    tokens += list(CHARSET)
    return Vocabulary(tokens)


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    ids, i = [], 0
    bad = set()
    while i < len(text):
        if text[i] == "<":
            for tag in vocab._tags:
                if text.startswith(tag, i):
                    ids.append(vocab.id(tag))
                    i += len(tag)
                    break
            else:
                if "<" in vocab:
                    ids.append(vocab.id("<"))
                else:
                    bad.add("<")
                i += 1
            continue
        ch = text[i]
        if ch in vocab:
            ids.append(vocab.id(ch))
        else:
            bad.add(ch)
        i += 1
    if bad:
        raise ValueError(f"unrepresentable characters: {sorted(bad)!r}")
    return ids


def detokenize(ids: Iterable[int], vocab: Vocabulary) -> str:
    return "".join(vocab.tokens[i] for i in ids)


def task_identifier_positions(ids: Sequence[int], vocab: Vocabulary) -> list[bool]:
    return [i in vocab.task_ids for i in ids]
