"""Domain types and interleaved context assembly.

A history state is an append-only list of segments in construction order:
question text, initial clip, response text, tool clip, response text, ...
Token counts are computed once when a segment is created, so assembling a
context view only re-prices the segments appended since the last call.
"""

from __future__ import annotations

import math
import string
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Literal, Optional, Union

DEFAULT_TOKENS_PER_FRAME = 32
DEFAULT_PROMPT_BUDGET = 8192
OPTION_LETTERS = string.ascii_uppercase

Box = tuple[int, int, int, int]


class ValidationError(ValueError):
    """Raised when a domain value violates its invariants."""


class ContextOverflow(RuntimeError):
    """The pinned question and initial clip alone exceed the prompt budget."""


@dataclass(frozen=True)
class VideoMeta:
    video_id: str
    duration_s: float
    fps: float
    width: int
    height: int

    def validate(self) -> "VideoMeta":
        if not self.video_id:
            raise ValidationError("video_id must be nonempty")
        if not (self.duration_s > 0 and self.fps > 0):
            raise ValidationError(
                f"video {self.video_id}: duration_s and fps must be positive "
                f"(got {self.duration_s}, {self.fps})"
            )
        if self.n_frames < 1:
            raise ValidationError(f"video {self.video_id}: duration_s*fps < 1")
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(f"video {self.video_id}: bad frame size")
        return self

    @property
    def n_frames(self) -> int:
        return int(math.floor(self.duration_s * self.fps + 1e-9))

    def to_dict(self) -> dict:
        return {
            "video_id": self.video_id,
            "duration_s": self.duration_s,
            "fps": self.fps,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VideoMeta":
        return cls(d["video_id"], float(d["duration_s"]), float(d["fps"]), int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class BoxAnnotation:
    """One object box on one frame; instance_id is None for per-frame grounding."""

    label: str
    box: Box
    instance_id: Optional[int] = None

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"label": self.label, "box": list(self.box)}
        if self.instance_id is not None:
            d["instance_id"] = self.instance_id
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BoxAnnotation":
        return cls(d["label"], tuple(d["box"]), d.get("instance_id"))


@dataclass(frozen=True)
class Clip:
    video_id: str
    start_s: float
    end_s: float
    frame_times: tuple[float, ...]
    # frame_time -> boxes on that frame
    annotations: Optional[dict[float, tuple[BoxAnnotation, ...]]] = None

    def validate(self, duration_s: Optional[float] = None) -> "Clip":
        if not (0 <= self.start_s < self.end_s):
            raise ValidationError(f"bad clip span [{self.start_s}, {self.end_s}]")
        if duration_s is not None and self.end_s > duration_s + 1e-9:
            raise ValidationError("clip extends past the end of the video")
        prev = -math.inf
        for t in self.frame_times:
            if t <= prev or t < self.start_s - 1e-9 or t > self.end_s + 1e-9:
                raise ValidationError(f"frame time {t} out of order or outside clip span")
            prev = t
        if self.annotations:
            ft = set(self.frame_times)
            for t in self.annotations:
                if t not in ft:
                    raise ValidationError(f"annotation at {t} has no frame")
        return self

    @property
    def n_frames(self) -> int:
        return len(self.frame_times)

    def to_dict(self) -> dict:
        boxes = None
        if self.annotations is not None:
            boxes = [
                {"t": t, "boxes": [b.to_dict() for b in anns]}
                for t, anns in sorted(self.annotations.items())
            ]
        return {
            "video_id": self.video_id,
            "span": [self.start_s, self.end_s],
            "frame_times": list(self.frame_times),
            "boxes": boxes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Clip":
        ann = None
        if d.get("boxes") is not None:
            ann = {
                float(e["t"]): tuple(BoxAnnotation.from_dict(b) for b in e["boxes"])
                for e in d["boxes"]
            }
        start, end = d["span"]
        return cls(d["video_id"], float(start), float(end), tuple(float(t) for t in d["frame_times"]), ann)


@dataclass(frozen=True)
class Question:
    text: str
    qtype: Literal["multiple_choice", "open_ended"]
    options: tuple[str, ...] = ()
    gold: str = ""
    # task family that generated the question; empty for external data
    template: str = ""

    def validate(self) -> "Question":
        if self.qtype == "multiple_choice":
            if not 2 <= len(self.options) <= 26:
                raise ValidationError("multiple_choice needs 2-26 options")
            if self.gold not in self.option_letters:
                raise ValidationError(f"gold {self.gold!r} is not an option letter")
        elif self.qtype == "open_ended":
            if not self.gold.strip():
                raise ValidationError("open_ended gold must be nonempty")
        else:
            raise ValidationError(f"unknown qtype {self.qtype!r}")
        return self

    @property
    def option_letters(self) -> str:
        return OPTION_LETTERS[: len(self.options)]

    def render(self) -> str:
        lines = [self.text]
        for letter, opt in zip(self.option_letters, self.options):
            lines.append(f"({letter}) {opt}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "text": self.text,
            "qtype": self.qtype,
            "options": list(self.options),
            "gold": self.gold,
            "template": self.template,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Question":
        return cls(d["text"], d["qtype"], tuple(d.get("options", ())), d["gold"], d.get("template", ""))


@dataclass(frozen=True)
class ToolCall:
    name: str
    arguments: dict

    def to_dict(self) -> dict:
        return {"name": self.name, "arguments": self.arguments}


@dataclass(frozen=True)
class ToolResult:
    tool_name: str
    status: Literal["ok", "not_found", "invalid_args"]
    clip: Optional[Clip] = None
    note: str = ""
    # resolved spans; several for spliced temporal_count output
    spans: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        if self.status == "ok" and self.clip is None:
            raise ValidationError("ok tool result needs a clip")
        if self.status != "ok" and self.clip is not None:
            raise ValidationError("failed tool result must not carry a clip")

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def note_fields(self) -> dict[str, str]:
        """Parse the ``key=value; key=value`` note into a dict."""
        out = {}
        for part in self.note.split("; "):
            if "=" in part:
                k, v = part.split("=", 1)
                out[k.strip()] = v.strip()
        return out

    def to_dict(self) -> dict:
        return {
            "tool_name": self.tool_name,
            "status": self.status,
            "clip": self.clip.to_dict() if self.clip else None,
            "note": self.note,
            "spans": [list(s) for s in self.spans],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ToolResult":
        clip = Clip.from_dict(d["clip"]) if d.get("clip") else None
        return cls(d["tool_name"], d["status"], clip, d.get("note", ""),
                   tuple((float(a), float(b)) for a, b in d.get("spans", ())))


@dataclass(frozen=True)
class StepRecord:
    response_text: str
    tool_call: Optional[ToolCall] = None
    tool_result: Optional[ToolResult] = None
    answer: Optional[str] = None
    protocol_flags: tuple[str, ...] = ()

    def validate(self) -> "StepRecord":
        if self.answer is not None and self.tool_result is not None:
            raise ValidationError("an answering step cannot carry a tool result")
        if self.tool_result is not None and self.tool_call is None:
            raise ValidationError("tool result without a tool call")
        return self

    def to_dict(self) -> dict:
        return {
            "response_text": self.response_text,
            "tool_call": self.tool_call.to_dict() if self.tool_call else None,
            "tool_result": self.tool_result.to_dict() if self.tool_result else None,
            "answer": self.answer,
            "protocol_flags": list(self.protocol_flags),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StepRecord":
        tc = d.get("tool_call")
        tr = d.get("tool_result")
        return cls(
            d["response_text"],
            ToolCall(tc["name"], tc["arguments"]) if tc else None,
            ToolResult.from_dict(tr) if tr else None,
            d.get("answer"),
            tuple(d.get("protocol_flags", ())),
        )


# -- segments -----------------------------------------------------------------

@dataclass(frozen=True)
class TextSegment:
    text: str
    token_count: int
    role: Literal["question", "assistant", "tool"]
    # failed tool calls are fed back as text; the result rides along
    result: Optional[ToolResult] = None

    kind = "text"


@dataclass(frozen=True)
class VisualSegment:
    clip: Clip
    token_count: int
    # textual envelope shown alongside the frames (empty for v_0)
    caption: str = ""
    result: Optional[ToolResult] = None

    kind = "visual"


Segment = Union[TextSegment, VisualSegment]


def text_tokens(text: str) -> int:
    return -(-len(text.encode("utf-8")) // 4)


def token_cost(segment: Union[Segment, Clip], tokens_per_frame: int = DEFAULT_TOKENS_PER_FRAME,
               reported: Optional[int] = None) -> int:
    """Token cost of a segment.

    Text costs ceil(utf8_bytes / 4) unless the backend reported an exact
    count. A clip costs frames * tokens_per_frame; a visual segment adds the
    cost of its caption.
    """
    if reported is not None:
        return int(reported)
    if isinstance(segment, Clip):
        return segment.n_frames * tokens_per_frame
    if isinstance(segment, TextSegment):
        return text_tokens(segment.text)
    return segment.clip.n_frames * tokens_per_frame + (text_tokens(segment.caption) if segment.caption else 0)


def uniform_frame_times(duration_s: float, fps: float, n_frames: int) -> tuple[float, ...]:
    """Centered uniform grid t_k = (k + 0.5) * D / n, n clamped to available frames."""
    if n_frames < 1:
        raise ValidationError("n_frames must be >= 1")
    available = int(math.floor(duration_s * fps + 1e-9))
    n = min(n_frames, available)
    step = duration_s / n
    return tuple((k + 0.5) * step for k in range(n))


@dataclass(frozen=True)
class HistoryState:
    segments: tuple[Segment, ...]
    cached_prefix_len: int = 0
    video: Optional[VideoMeta] = None
    tokens_per_frame: int = DEFAULT_TOKENS_PER_FRAME
    _views: dict = field(default_factory=dict, compare=False, repr=False)

    def __len__(self) -> int:
        return len(self.segments)

    @property
    def total_tokens(self) -> int:
        return sum(s.token_count for s in self.segments)


def make_text_segment(text: str, role: str, result: Optional[ToolResult] = None,
                      reported: Optional[int] = None) -> TextSegment:
    return TextSegment(text, text_tokens(text) if reported is None else int(reported), role, result)


def make_visual_segment(clip: Clip, tokens_per_frame: int = DEFAULT_TOKENS_PER_FRAME,
                        caption: str = "", result: Optional[ToolResult] = None) -> VisualSegment:
    seg = VisualSegment(clip, 0, caption, result)
    return replace(seg, token_count=token_cost(seg, tokens_per_frame))


def init_state(question: Question, video: VideoMeta, n_frames: int, system_prompt: str = "",
               tokens_per_frame: int = DEFAULT_TOKENS_PER_FRAME) -> HistoryState:
    """Build H_0: the question segment (system prompt prepended) followed by v_0."""
    video.validate()
    times = uniform_frame_times(video.duration_s, video.fps, n_frames)
    v0 = Clip(video.video_id, 0.0, video.duration_s, times)
    qtext = question.render()
    if system_prompt:
        qtext = system_prompt.rstrip("\n") + "\n\n" + qtext
    segs = (make_text_segment(qtext, "question"), make_visual_segment(v0, tokens_per_frame))
    return HistoryState(segs, 0, video, tokens_per_frame)


def append_step(state: HistoryState, step: StepRecord, render: Optional[Callable[[ToolResult], str]] = None) -> HistoryState:
    """Return the successor state; the predecessor's segments are kept as-is.

    A tool result with a clip becomes a visual segment captioned by its
    rendered envelope; a failed result becomes a tool-role text segment.
    """
    if render is None:
        from .protocol import render_tool_result as render
    new = [make_text_segment(step.response_text, "assistant")]
    res = step.tool_result
    if res is not None:
        envelope = render(res)
        if res.clip is not None:
            new.append(make_visual_segment(res.clip, state.tokens_per_frame, envelope, res))
        else:
            new.append(make_text_segment(envelope, "tool", res))
    return HistoryState(state.segments + tuple(new), len(state.segments), state.video, state.tokens_per_frame)


@dataclass(frozen=True)
class ContextView:
    """Budgeted view of a history state.

    ``segments`` are (original_index, segment) pairs in order; truncated text
    segments appear with their shortened text and cost.
    """

    segments: tuple[tuple[int, Segment], ...]
    evicted: tuple[int, ...]
    truncated: tuple[int, ...]
    total_tokens: int
    budget: int
    newly_encoded: int

    def tool_results(self) -> list[ToolResult]:
        return [s.result for _, s in self.segments if getattr(s, "result", None) is not None]

    @property
    def question_text(self) -> str:
        return self.segments[0][1].text


def _truncate_text(seg: TextSegment, max_tokens: int) -> TextSegment:
    raw = seg.text.encode("utf-8")[: max_tokens * 4]
    text = raw.decode("utf-8", errors="ignore")
    return TextSegment(text, text_tokens(text), seg.role, seg.result)


def assemble_context(state: HistoryState, budget: int = DEFAULT_PROMPT_BUDGET) -> ContextView:
    """Interleaved view within ``budget`` tokens.

    Overflow policy: drop whole visual segments oldest-first (v_0 at index 1
    is pinned), then cut the oldest non-question text. The question and v_0
    exceeding the budget on their own raises ContextOverflow.
    """
    if budget <= 0:
        raise ValidationError("budget must be positive")
    cached = state._views.get(budget)
    if cached is not None:
        return cached

    segs = list(state.segments)
    pinned = segs[0].token_count + (segs[1].token_count if len(segs) > 1 else 0)
    if pinned > budget:
        raise ContextOverflow(f"question + initial clip need {pinned} tokens, budget is {budget}")

    total = sum(s.token_count for s in segs)
    evicted: list[int] = []
    truncated: list[int] = []
    kept: dict[int, Segment] = dict(enumerate(segs))
    if total > budget:
        for i in range(2, len(segs)):
            if total <= budget:
                break
            if isinstance(segs[i], VisualSegment):
                total -= segs[i].token_count
                evicted.append(i)
                del kept[i]
        for i in range(2, len(segs)):
            if total <= budget:
                break
            seg = kept.get(i)
            if not isinstance(seg, TextSegment):
                continue
            excess = total - budget
            if seg.token_count <= excess:
                total -= seg.token_count
                evicted.append(i)
                del kept[i]
            else:
                short = _truncate_text(seg, seg.token_count - excess)
                total -= seg.token_count - short.token_count
                kept[i] = short
                truncated.append(i)

    view = ContextView(
        segments=tuple(sorted(kept.items(), key=lambda kv: kv[0])),
        evicted=tuple(sorted(evicted)),
        truncated=tuple(truncated),
        total_tokens=total,
        budget=budget,
        newly_encoded=len(segs) - state.cached_prefix_len,
    )
    state._views[budget] = view
    return view
