"""Tag grammars for the three output layouts, plus prompt templates.

Layouts (tags are ASCII and case-sensitive, only whitespace allowed between
and around them):

    rea-ans   <reasoning>R</reasoning> <answer>A</answer>
    ans-rea   <answer>A</answer> <reasoning>R</reasoning>
    sandwich  <answer>A</answer> <reasoning>R</reasoning> <answer>A'</answer>
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

ANSWER_OPEN = "<answer>"
ANSWER_CLOSE = "</answer>"
REASONING_OPEN = "<reasoning>"
REASONING_CLOSE = "</reasoning>"
_TAGS = (ANSWER_OPEN, ANSWER_CLOSE, REASONING_OPEN, REASONING_CLOSE)

PLACEHOLDER = "[original query]"


class FormatError(ValueError):
    pass


class OutputFormat(str, enum.Enum):
    REA_ANS = "rea-ans"
    ANS_REA = "ans-rea"
    SANDWICH = "sandwich"

    @classmethod
    def parse(cls, value) -> "OutputFormat":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        aliases = {"reaans": "rea-ans", "ansrea": "ans-rea", "sandwichr": "sandwich"}
        key = aliases.get(key.replace("-", ""), key)
        try:
            return cls(key)
        except ValueError:
            raise FormatError(f"unknown output format {value!r}") from None


_LAYOUT = {
    OutputFormat.REA_ANS: ("reasoning", "answer"),
    OutputFormat.ANS_REA: ("answer", "reasoning"),
    OutputFormat.SANDWICH: ("answer", "reasoning", "answer"),
}


class Outcome(str, enum.Enum):
    STRICT_OK = "strict_ok"
    PARTIAL_ANSWER = "partial_answer"
    NO_ANSWER = "no_answer"


@dataclass(frozen=True)
class SandwichOutput:
    c_init: str
    reasoning: str
    c_final: str


@dataclass(frozen=True)
class ParseResult:
    outcome: Outcome
    fmt: OutputFormat
    raw: str
    answer: str | None = None  # first answer in text order (C_init for sandwich)
    reasoning: str | None = None
    final_answer: str | None = None  # sandwich only

    @property
    def ok(self) -> bool:
        return self.outcome is Outcome.STRICT_OK

    @property
    def sandwich(self) -> SandwichOutput | None:
        if self.ok and self.fmt is OutputFormat.SANDWICH:
            return SandwichOutput(self.answer, self.reasoning, self.final_answer)
        return None


def _scan(text: str):
    """Yield (tag, start, end) for every tag occurrence, left to right.

    Tags cannot overlap: each starts with '<' and contains no other '<'.
    """
    pos = text.find("<")
    while pos != -1:
        for tag in _TAGS:
            if text.startswith(tag, pos):
                yield tag, pos, pos + len(tag)
                break
        pos = text.find("<", pos + 1)


def _strict_fields(text: str, fmt: OutputFormat) -> list[str] | None:
    layout = _LAYOUT[fmt]
    tags = list(_scan(text))
    if len(tags) != 2 * len(layout):
        return None
    fields = []
    cursor = 0
    for k, name in enumerate(layout):
        (t_open, o_start, o_end), (t_close, c_start, c_end) = tags[2 * k], tags[2 * k + 1]
        want_open, want_close = (
            (ANSWER_OPEN, ANSWER_CLOSE) if name == "answer" else (REASONING_OPEN, REASONING_CLOSE)
        )
        if t_open != want_open or t_close != want_close:
            return None
        if text[cursor:o_start].strip():
            return None
        fields.append(text[o_end:c_start].strip())
        cursor = c_end
    if text[cursor:].strip():
        return None
    return fields


def first_answer(text: str) -> str | None:
    """Content of the earliest complete answer span, trimmed."""
    open_end = None
    for tag, start, end in _scan(text):
        if tag == ANSWER_OPEN:
            open_end = end
        elif tag == ANSWER_CLOSE:
            if open_end is not None:
                return text[open_end:start].strip()
            open_end = None
    return None


def parse(text: str, fmt) -> ParseResult:
    fmt = OutputFormat.parse(fmt)
    fields = _strict_fields(text, fmt)
    if fields is not None:
        named = dict(zip(_LAYOUT[fmt], fields))
        final = fields[2] if fmt is OutputFormat.SANDWICH else None
        return ParseResult(Outcome.STRICT_OK, fmt, text, fields[_LAYOUT[fmt].index("answer")],
                           named["reasoning"], final)
    ans = first_answer(text)
    if ans is not None:
        return ParseResult(Outcome.PARTIAL_ANSWER, fmt, text, ans)
    return ParseResult(Outcome.NO_ANSWER, fmt, text)


def render(fmt, answer: str, reasoning: str, final_answer: str | None = None) -> str:
    fmt = OutputFormat.parse(fmt)
    parts = {
        "answer": f"{ANSWER_OPEN}{answer}{ANSWER_CLOSE}",
        "reasoning": f"{REASONING_OPEN}{reasoning}{REASONING_CLOSE}",
    }
    if fmt is OutputFormat.SANDWICH:
        final = answer if final_answer is None else final_answer
        return "\n".join([parts["answer"], parts["reasoning"], f"{ANSWER_OPEN}{final}{ANSWER_CLOSE}"])
    return "\n".join(parts[name] for name in _LAYOUT[fmt])


def serialize(result: ParseResult) -> str:
    if not result.ok:
        raise FormatError(f"cannot serialize a {result.outcome.value} parse")
    return render(result.fmt, result.answer, result.reasoning, result.final_answer)


def restructure_to_sandwich(trace: ParseResult) -> str:
    """Turn a strict reasoning-first trace into sandwich text with C_init = C_final."""
    if not trace.ok or trace.fmt is not OutputFormat.REA_ANS:
        raise FormatError(
            f"restructuring needs a strict rea-ans trace, got {trace.fmt.value}/{trace.outcome.value}"
        )
    return render(OutputFormat.SANDWICH, trace.answer, trace.reasoning, trace.answer)


# Prompt templates. The literal "\n" is two characters, as written in the
# published templates; override via `templates=` when driving a model that
# expects a real newline or another language.
_INTRO = (
    "You are a Chinese text error correction tool that can detect and correct errors in the "
    "text. Please check the errors in the following text, correct them, modify only the "
    "erroneous parts while keeping the original sentence structure as much as possible, "
)
_REASON_SLOT = "<reasoning> (briefly analyze the location, type, and basis of the error) </reasoning>"

DEFAULT_TEMPLATES = {
    OutputFormat.REA_ANS: (
        _INTRO
        + "provide your reasoning process, and output the corrected version. Please strictly use "
        "the following format for your reply: "
        + _REASON_SLOT
        + " \\n <answer> (output the corrected full text) </answer>. "
        + PLACEHOLDER
    ),
    OutputFormat.ANS_REA: (
        _INTRO
        + "first output the corrected version, and then provide your reasoning process. Please "
        "strictly use the following format for your reply: <answer> (output the corrected full "
        "text) </answer> \\n "
        + _REASON_SLOT
        + ". "
        + PLACEHOLDER
    ),
    OutputFormat.SANDWICH: (
        _INTRO
        + "first output the corrected version, then provide your reasoning process, and finally "
        "output the corrected version again. Please strictly use the following format for your "
        "reply: <answer> (first output the corrected full text) </answer> \\n "
        + _REASON_SLOT
        + " \\n <answer> (output the corrected full text again) </answer>. "
        + PLACEHOLDER
    ),
}


def _template(fmt: OutputFormat, templates=None) -> str:
    if templates:
        for key, value in templates.items():
            if OutputFormat.parse(key) is fmt:
                return value
    return DEFAULT_TEMPLATES[fmt]


def render_prompt(q_noise: str, fmt, templates=None) -> str:
    fmt = OutputFormat.parse(fmt)
    template = _template(fmt, templates)
    head, sep, tail = template.partition(PLACEHOLDER)
    if not sep or PLACEHOLDER in tail:
        raise FormatError(f"template for {fmt.value} must contain {PLACEHOLDER!r} exactly once")
    return head + q_noise + tail


def split_prompt(prompt: str, templates=None) -> tuple[OutputFormat, str] | None:
    """Inverse of render_prompt: recover (format, query), or None if no template fits."""
    for fmt in OutputFormat:
        head, _, tail = _template(fmt, templates).partition(PLACEHOLDER)
        if (
            prompt.startswith(head)
            and prompt.endswith(tail)
            and len(prompt) >= len(head) + len(tail)
        ):
            return fmt, prompt[len(head):len(prompt) - len(tail)]
    return None
