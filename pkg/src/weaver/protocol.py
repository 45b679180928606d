"""Response grammar: reasoning text, <tool_call> payloads and <answer> spans."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Optional

from .core import Question, ToolCall, ToolResult

TOOL_OPEN, TOOL_CLOSE = "<tool_call>", "</tool_call>"
ANSWER_OPEN, ANSWER_CLOSE = "<answer>", "</answer>"
VISUAL_PLACEHOLDER = "<clip/>"

_TOOL_RE = re.compile(re.escape(TOOL_OPEN) + r"(.*?)" + re.escape(TOOL_CLOSE), re.DOTALL)
_ANSWER_RE = re.compile(re.escape(ANSWER_OPEN) + r"(.*?)" + re.escape(ANSWER_CLOSE), re.DOTALL)


@dataclass
class ParsedResponse:
    reasoning_text: str
    tool_call: Optional[ToolCall] = None
    answer_span: Optional[str] = None
    format_ok: bool = False
    diagnostics: list[str] = field(default_factory=list)
    # a well-formed tool block was present, even if superseded by an answer
    tool_block_ok: bool = False
    tool_superseded: bool = False

    @property
    def action(self) -> str:
        if self.format_ok:
            return "answer"
        if self.tool_call is not None:
            return "tool"
        return "text"


def decode_payload(raw: str) -> tuple[Optional[ToolCall], Optional[str]]:
    try:
        data = json.loads(raw)
    except (ValueError, RecursionError):
        return None, "unparseable payload"
    if not isinstance(data, dict):
        return None, "payload is not an object"
    name, args = data.get("name"), data.get("arguments")
    if not isinstance(name, str) or not name:
        return None, "payload missing string 'name'"
    if not isinstance(args, dict):
        return None, "payload missing object 'arguments'"
    extra = set(data) - {"name", "arguments"}
    if extra:
        return None, f"payload has unexpected fields {sorted(extra)}"
    return ToolCall(name, args), None


def parse_response(text: str) -> ParsedResponse:
    """Parse one model response. Never raises; defects become diagnostics."""
    if not isinstance(text, str):
        return ParsedResponse("", diagnostics=["response is not text"])
    diags: list[str] = []

    ans = _ANSWER_RE.search(text)
    tools = list(_TOOL_RE.finditer(text))

    call = None
    tool_ok = False
    if tools:
        call, err = decode_payload(tools[0].group(1))
        if err:
            diags.append(err)
        else:
            tool_ok = True
        if len(tools) > 1:
            diags.append(f"{len(tools) - 1} extra tool_call block(s) ignored")
    elif TOOL_OPEN in text:
        diags.append("unterminated tool_call block")

    if ans is None and ANSWER_OPEN in text:
        diags.append("unterminated answer block")

    reasoning = _ANSWER_RE.sub("", _TOOL_RE.sub("", text)).strip()
    parsed = ParsedResponse(reasoning, call, ans.group(1) if ans else None, ans is not None, diags, tool_ok)
    if ans is not None and call is not None:
        parsed.tool_superseded = True
        parsed.diagnostics.append("tool_call superseded by answer")
    return parsed


def _json_payload(obj) -> str:
    # '<' only occurs inside JSON strings, so escaping it keeps tag scanning safe
    return json.dumps(obj, ensure_ascii=False, sort_keys=True).replace("<", "\\u003c")


def render_tool_call(call: ToolCall) -> str:
    return TOOL_OPEN + _json_payload({"name": call.name, "arguments": call.arguments}) + TOOL_CLOSE


def render_answer(answer: str) -> str:
    return ANSWER_OPEN + answer + ANSWER_CLOSE


def _fmt_span(a: float, b: float) -> str:
    return f"[{a:.2f},{b:.2f}]"


def render_tool_result(result: ToolResult) -> str:
    """Byte-stable textual envelope for a tool result."""
    lines = [f'<tool_response name="{result.tool_name}" status="{result.status}">']
    if result.spans:
        lines.append("span=" + ",".join(_fmt_span(a, b) for a, b in result.spans))
    elif result.clip is not None:
        lines.append("span=" + _fmt_span(result.clip.start_s, result.clip.end_s))
    if result.note:
        lines.append("note: " + result.note)
    clip = result.clip
    if clip is not None:
        lines.append(f"frames={clip.n_frames}")
        for t, anns in sorted((clip.annotations or {}).items()):
            boxes = " ".join(
                (f"{a.label}#{a.instance_id}" if a.instance_id is not None else a.label)
                + "[" + ",".join(str(v) for v in a.box) + "]"
                for a in anns
            )
            lines.append(f"t={t:.2f} {boxes}")
        lines.append(VISUAL_PLACEHOLDER)
    lines.append("</tool_response>")
    return "\n".join(lines)


def extract_answer(answer_span: str, question: Question) -> str:
    """Normalize an answer span against the question type.

    Multiple choice yields the first Latin letter, uppercased, whether or not
    it names a valid option (out-of-range letters are judged wrong later).
    Open-ended answers are trimmed, whitespace-collapsed and case-folded.
    """
    if question.qtype == "multiple_choice":
        for ch in answer_span.strip().upper():
            if "A" <= ch <= "Z":
                return ch
        return ""
    return " ".join(answer_span.split()).casefold()


def normalize_gold(question: Question) -> str:
    if question.qtype == "multiple_choice":
        return question.gold.strip().upper()
    return " ".join(question.gold.split()).casefold()
