"""Policy backends: given an assembled context, produce the next response text.

Backends only ever see a ``PolicyRequest`` (the budgeted context plus
sampling parameters). Oracle policies are built from a question before the
episode starts and afterwards read nothing but the tool results that come
back through the context.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol, Union

from .core import OPTION_LETTERS, ContextView, Question, TextSegment, ToolCall, ToolResult
from .protocol import ANSWER_OPEN, render_answer, render_tool_call
from .synthworld import fmt_span, quadrant

log = logging.getLogger(__name__)

MAX_RESPONSE_LENGTH = 20480


class PolicyError(RuntimeError):
    """Backend could not produce a response (transport failure, replay miss)."""


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 1.0
    top_p: float = 1.0
    max_new_tokens: int = MAX_RESPONSE_LENGTH
    seed: int = 0


@dataclass(frozen=True)
class PolicyRequest:
    context: ContextView
    sampling: SamplingParams = SamplingParams()
    turn: int = 0
    system_prompt: str = ""

    def __post_init__(self):
        if self.sampling.max_new_tokens > MAX_RESPONSE_LENGTH:
            raise ValueError(f"max_new_tokens exceeds {MAX_RESPONSE_LENGTH}")
        if self.context.total_tokens > self.context.budget:
            raise ValueError("context exceeds its budget")

    def tool_results(self) -> list[ToolResult]:
        return self.context.tool_results()


class PolicyBackend(Protocol):
    def next_response(self, request: PolicyRequest) -> str: ...


def next_response(backend: PolicyBackend, request: PolicyRequest) -> str:
    return backend.next_response(request)


# -- scripted -------------------------------------------------------------------

_FIELD_RE = re.compile(r"\{tool\[(-?\d+)\]\.([A-Za-z_][\w.]*)\}")


def _resolve_field(result: ToolResult, path: str) -> str:
    head, _, rest = path.partition(".")
    if head == "note":
        return result.note_fields()[rest] if rest else result.note
    if head == "status":
        return result.status
    if head == "tool_name":
        return result.tool_name
    if head == "span":
        a, b = result.spans[0]
        return f"{a:g},{b:g}"
    if head == "frames":
        return str(result.clip.n_frames if result.clip else 0)
    raise KeyError(path)


def interpolate(template: str, results: list[ToolResult]) -> str:
    """Fill ``{tool[i].field}`` placeholders; i is 1-based, negative counts from the end."""

    def sub(m: re.Match) -> str:
        i = int(m.group(1))
        try:
            res = results[i - 1] if i > 0 else results[i]
            return _resolve_field(res, m.group(2))
        except (IndexError, KeyError) as exc:
            raise PolicyError(f"template field {m.group(0)} unavailable") from exc

    return _FIELD_RE.sub(sub, template)


PlanEntry = Union[str, Callable[[PolicyRequest], str]]


@dataclass(frozen=True)
class ScriptedPolicy:
    """Replays a fixed plan; turns past the end reuse the last entry."""

    plan: tuple[PlanEntry, ...]
    require_answer: bool = True

    def __post_init__(self):
        if not self.plan:
            raise ValueError("plan must be nonempty")
        last = self.plan[-1]
        if self.require_answer and isinstance(last, str) and ANSWER_OPEN not in last:
            raise ValueError("final plan entry must contain an <answer> block")

    def next_response(self, request: PolicyRequest) -> str:
        entry = self.plan[min(request.turn, len(self.plan) - 1)]
        if callable(entry):
            return entry(request)
        return interpolate(entry, request.tool_results())


@dataclass(frozen=True)
class FunctionPolicy:
    fn: Callable[[PolicyRequest], str]

    def next_response(self, request: PolicyRequest) -> str:
        return self.fn(request)


# -- record / replay ---------------------------------------------------------------

def context_digest(view: ContextView, seed: Optional[int] = None) -> str:
    """Stable hash of segment texts and clip spans (no pixels).

    The sampling seed is folded in so stochastic group members replay
    distinctly from identical contexts.
    """
    h = hashlib.sha256()
    for idx, seg in view.segments:
        if isinstance(seg, TextSegment):
            h.update(f"T{idx}:{seg.role}:".encode() + seg.text.encode("utf-8") + b"\x00")
        else:
            c = seg.clip
            h.update(f"V{idx}:{c.video_id}:{c.start_s!r}:{c.end_s!r}:{len(c.frame_times)}:".encode()
                     + seg.caption.encode("utf-8") + b"\x00")
    if seed is not None:
        h.update(f"seed:{seed}".encode())
    return h.hexdigest()


@dataclass
class RecordingPolicy:
    inner: PolicyBackend
    records: dict = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def next_response(self, request: PolicyRequest) -> str:
        text = self.inner.next_response(request)
        with self._lock:
            self.records[context_digest(request.context, request.sampling.seed)] = text
        return text

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.records, sort_keys=True, indent=1) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class ReplayPolicy:
    records: dict

    @classmethod
    def load(cls, path) -> "ReplayPolicy":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    def next_response(self, request: PolicyRequest) -> str:
        digest = context_digest(request.context, request.sampling.seed)
        try:
            return self.records[digest]
        except KeyError:
            raise PolicyError(f"replay miss for context digest {digest}") from None


# -- remote chat-completion backend ----------------------------------------------

def frame_url(video_id: str, t: float) -> str:
    return f"frame://{video_id}?t={t:.3f}"


def build_messages(view: ContextView, system_prompt: str = "") -> list[dict]:
    """Chat messages with interleaved text and frame-reference items.

    Model turns map to ``assistant``; the question, clips and tool envelopes
    map to ``user``; adjacent same-role items are merged so roles alternate.
    """
    messages: list[dict] = []
    if system_prompt:
        messages.append({"role": "system", "content": system_prompt})

    def push(role: str, items: list[dict]):
        if messages and messages[-1]["role"] == role and isinstance(messages[-1]["content"], list):
            messages[-1]["content"].extend(items)
        else:
            messages.append({"role": role, "content": items})

    for _, seg in view.segments:
        if isinstance(seg, TextSegment):
            text = seg.text
            if seg.role == "question" and system_prompt and text.startswith(system_prompt.rstrip("\n")):
                text = text[len(system_prompt.rstrip("\n")):].lstrip("\n")
            push("assistant" if seg.role == "assistant" else "user", [{"type": "text", "text": text}])
        else:
            items = []
            if seg.caption:
                items.append({"type": "text", "text": seg.caption})
            items.extend({"type": "image_url", "image_url": {"url": frame_url(seg.clip.video_id, t)}}
                         for t in seg.clip.frame_times)
            push("user", items)
    return messages


@dataclass
class RemoteChatPolicy:
    url: str
    model: str = "policy"
    timeout_s: float = 30.0
    retries: int = 2
    backoff_s: float = 0.2

    def payload(self, request: PolicyRequest) -> dict:
        s = request.sampling
        return {
            "model": self.model,
            "messages": build_messages(request.context, request.system_prompt),
            "temperature": s.temperature,
            "top_p": s.top_p,
            "max_tokens": s.max_new_tokens,
            "seed": s.seed,
        }

    def next_response(self, request: PolicyRequest) -> str:
        body = json.dumps(self.payload(request)).encode("utf-8")
        last: Optional[Exception] = None
        for attempt in range(self.retries + 1):
            req = urllib.request.Request(self.url, data=body, headers={"Content-Type": "application/json"})
            try:
                with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
                    data = json.loads(resp.read().decode("utf-8"))
                content = data["choices"][0]["message"]["content"]
                if isinstance(content, list):
                    content = "".join(c.get("text", "") for c in content if c.get("type") == "text")
                return str(content)
            except (urllib.error.URLError, TimeoutError, OSError, ValueError, KeyError, IndexError) as exc:
                last = exc
                log.warning("policy backend %s attempt %d failed: %s", self.url, attempt + 1, exc)
                if attempt < self.retries:
                    time.sleep(self.backoff_s * (attempt + 1))
        raise PolicyError(f"policy backend failed after {self.retries + 1} attempts: {last}")


# -- oracle plans ------------------------------------------------------------------

def guess_letter(question: Question, seed: int = 0) -> str:
    """Evidence-free answer: uniform over the options, drawn from the sampling seed."""
    h = int(hashlib.sha256(f"{seed}:{question.text}".encode("utf-8")).hexdigest(), 16)
    return OPTION_LETTERS[h % len(question.options)]


def _call(name: str, **arguments) -> str:
    return render_tool_call(ToolCall(name, arguments))


def _last(request: PolicyRequest, *names: str) -> Optional[ToolResult]:
    for r in reversed(request.tool_results()):
        if r.tool_name in names:
            return r
    return None


def _answer_for(question: Question, option_text: Optional[str], seed: int = 0) -> str:
    if option_text is not None and option_text in question.options:
        letter = question.option_letters[question.options.index(option_text)]
        return f"The evidence points to option {letter}. " + render_answer(letter)
    return "The tools did not give me usable evidence, so I will guess. " + render_answer(guess_letter(question, seed))


def _quoted(text: str) -> list[str]:
    return re.findall(r'"([^"]+)"', text)


def oracle_policy_for(question: Question, template: Optional[str] = None, frame_size: tuple[int, int] = (640, 360),
                      fallback: bool = False) -> ScriptedPolicy:
    """Canonical tool plan for a synthetic task template.

    The final answer is derived from the returned tool results; if the needed
    result is missing or failed, the policy guesses. With ``fallback=True``
    a failed spatial_grounding call is retried with spatial_tracking.
    """
    template = template or question.template
    q = question

    if template == "count_event":
        (label,) = _quoted(q.text)[:1]

        def answer(req: PolicyRequest) -> str:
            r = _last(req, "temporal_count")
            return _answer_for(q, r.note_fields().get("count") if r and r.ok else None, req.sampling.seed)

        return ScriptedPolicy((
            f'I should count every occurrence of "{label}". ' + _call("temporal_count", query=label),
            answer,
        ))

    if template == "span_of_event":
        (label,) = _quoted(q.text)[:1]

        def answer(req: PolicyRequest) -> str:
            r = _last(req, "temporal_grounding")
            return _answer_for(q, fmt_span(*r.spans[0]) if r and r.ok else None, req.sampling.seed)

        return ScriptedPolicy((
            f'Let me locate "{label}" in time. ' + _call("temporal_grounding", query=label),
            answer,
        ))

    if template == "order_events":
        labels = _quoted(q.text)

        def answer(req: PolicyRequest) -> str:
            starts = {}
            for r in req.tool_results():
                if r.tool_name == "temporal_grounding" and r.ok:
                    starts[r.note_fields().get("event")] = r.spans[0][0]
            if all(l in starts for l in labels):
                return _answer_for(q, " -> ".join(sorted(labels, key=lambda l: starts[l])), req.sampling.seed)
            return _answer_for(q, None, req.sampling.seed)

        steps = tuple(f'Next I locate "{l}". ' + _call("temporal_grounding", query=l) for l in labels)
        return ScriptedPolicy(steps + (answer,))

    if template == "event_moment":
        (label,) = _quoted(q.text)[:1]

        def answer(req: PolicyRequest) -> str:
            r = _last(req, "frame_selection")
            return _answer_for(q, f"{r.spans[0][0]:.0f}s" if r and r.ok else None, req.sampling.seed)

        return ScriptedPolicy((
            f'I will pick the frame that best shows "{label}". ' + _call("frame_selection", query=label),
            answer,
        ))

    if template == "object_at_time":
        m = re.match(r"At (\d+)s, in which part of the frame is the (.+)\?", q.text)
        if not m:
            raise ValueError("question does not match object_at_time")
        t, label = float(m.group(1)), m.group(2)
        width, height = frame_size

        def locate(tool: str) -> Callable[[PolicyRequest], str]:
            def step(req: PolicyRequest) -> str:
                r = _last(req, "trim")
                span = list(r.spans[0]) if r and r.ok else [t, t + 1.0]
                return f"Now I box the {label} in that moment. " + _call(tool, objects=[label], span=span)
            return step

        def answer(req: PolicyRequest) -> str:
            r = _last(req, "spatial_grounding", "spatial_tracking")
            opt = None
            if r and r.ok and r.clip.annotations:
                boxes = [a.box for a in r.clip.annotations.get(t, ()) if a.label == label]
                if len(boxes) == 1:
                    opt = quadrant(boxes[0], width, height)
            return _answer_for(q, opt, req.sampling.seed)

        def after_grounding(req: PolicyRequest) -> str:
            r = _last(req, "spatial_grounding")
            if fallback and (r is None or r.status == "invalid_args"):
                return "Spatial grounding is unavailable; tracking gives the same boxes. " + locate("spatial_tracking")(req)
            return answer(req)

        first = f"I need the frame at {t:.0f}s. " + _call("trim", start_s=t, end_s=t + 1.0)
        if fallback:
            return ScriptedPolicy((first, locate("spatial_grounding"), after_grounding, answer))
        return ScriptedPolicy((first, locate("spatial_grounding"), answer))

    if template == "count_instances":
        m = re.match(r"How many distinct (.+) instances", q.text)
        if not m:
            raise ValueError("question does not match count_instances")
        label = m.group(1)

        def answer(req: PolicyRequest) -> str:
            r = _last(req, "spatial_tracking")
            opt = None
            if r and r.ok:
                ids = r.note_fields().get(f"{label}: instances")
                if ids:
                    opt = str(len(ids.split(",")))
            return _answer_for(q, opt, req.sampling.seed)

        return ScriptedPolicy((
            f"Tracking keeps identities apart, so I track every {label}. "
            + _call("spatial_tracking", objects=[label]),
            answer,
        ))

    raise ValueError(f"no oracle plan for template {template!r}")


def never_answer_policy(text: str = "I am still thinking about this.") -> ScriptedPolicy:
    return ScriptedPolicy((text,), require_answer=False)


def direct_answer_policy(letter: str = "A") -> ScriptedPolicy:
    return ScriptedPolicy((render_answer(letter),))


def guessing_policy(question: Question) -> ScriptedPolicy:
    """Answers immediately without tools."""
    return ScriptedPolicy((lambda req: "Answering from the sampled frames alone. "
                           + render_answer(guess_letter(question, req.sampling.seed)),))
