"""Three-stage construction of SFT and RL data from text chain-of-thought items.

1. filter: a direct-answer model answers every item once; correctly answered
   items are discarded.
2. rewrite: a rewriter turns the text chain-of-thought into steps with tool
   calls, and each call is executed now so its result can be stored.
3. refine: an answerer sees the rewritten trajectory without the final
   answer. Items it answers correctly become SFT records; everything else
   goes to the question-answer-only RL pool.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .config import construction_prompt
from .core import (
    HistoryState,
    Question,
    StepRecord,
    TextSegment,
    ToolCall,
    ToolResult,
    append_step,
    assemble_context,
    init_state,
    uniform_frame_times,
)
from .policy import PolicyBackend, PolicyRequest, oracle_policy_for
from .protocol import ANSWER_CLOSE, ANSWER_OPEN, TOOL_CLOSE, TOOL_OPEN, decode_payload, extract_answer, normalize_gold, parse_response
from .synthworld import SyntheticVideo, WorldSpec, _world_cache
from .toolkit import Toolkit

SFT_VERSION = "weaver-sft/1"
RLPOOL_VERSION = "weaver-rlpool/1"
SFT_FRAMES = 64
_UNBOUNDED = 1 << 40

_TOOL_BLOCK = re.compile(re.escape(TOOL_OPEN) + r"(.*?)" + re.escape(TOOL_CLOSE), re.DOTALL)
_ANSWER_BLOCK = re.compile(re.escape(ANSWER_OPEN) + r".*?" + re.escape(ANSWER_CLOSE), re.DOTALL)


@dataclass(frozen=True)
class SourceItem:
    item_id: str
    world_seed: int
    spec: WorldSpec
    question: Question
    textual_cot: str = ""

    def __post_init__(self):
        if not self.question.gold.strip():
            raise ValueError(f"item {self.item_id}: gold must be nonempty")

    @property
    def gold(self) -> str:
        return self.question.gold

    def world(self) -> SyntheticVideo:
        return _world_cache(self.world_seed, self.spec)

    def to_dict(self) -> dict:
        return {
            "item_id": self.item_id,
            "world": {"seed": self.world_seed, "spec": self.spec.to_dict()},
            "question": self.question.to_dict(),
            "textual_cot": self.textual_cot,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SourceItem":
        # also accepts the common QA+CoT layout: problem/options/solution/process
        if "question" in d and isinstance(d["question"], dict):
            q = Question.from_dict(d["question"])
        else:
            options = tuple(d.get("options", ()))
            gold = str(d.get("solution", d.get("answer", d.get("gold", ""))))
            gold = re.sub(r"</?answer>", "", gold).strip()
            q = Question(d.get("problem", d.get("question", "")),
                         "multiple_choice" if options else "open_ended", options, gold, d.get("template", "")).validate()
        world = d.get("world", {})
        return cls(str(d.get("item_id", d.get("id", ""))), int(world.get("seed", 0)),
                   WorldSpec.from_dict(world["spec"]) if "spec" in world else WorldSpec(),
                   q, d.get("textual_cot", d.get("process", "")))


def _direct_request(state: HistoryState, turn: int = 0) -> PolicyRequest:
    return PolicyRequest(assemble_context(state, _UNBOUNDED), turn=turn)


def _judge(text: str, question: Question) -> bool:
    parsed = parse_response(text)
    return parsed.format_ok and extract_answer(parsed.answer_span, question) == normalize_gold(question)


# -- stage 1 -----------------------------------------------------------------------

@dataclass
class FilterResult:
    kept: list[SourceItem] = field(default_factory=list)
    discarded: list[SourceItem] = field(default_factory=list)
    diagnostics: dict[str, str] = field(default_factory=dict)


def stage1_filter(items: Sequence[SourceItem], answer_policy: PolicyBackend, n_frames: int = 128) -> FilterResult:
    """Keep the items the direct-answer policy gets wrong.

    A backend failure keeps the item and records a diagnostic.
    """
    out = FilterResult()
    for item in items:
        state = init_state(item.question, item.world().meta, n_frames)
        try:
            text = answer_policy.next_response(_direct_request(state))
        except Exception as exc:
            out.kept.append(item)
            out.diagnostics[item.item_id] = f"backend failure: {exc}"
            continue
        (out.discarded if _judge(text, item.question) else out.kept).append(item)
    return out


# -- stage 2 -----------------------------------------------------------------------

@dataclass
class TrajectoryDraft:
    item: SourceItem
    steps: list[str]
    calls: list[Optional[ToolCall]]
    results: list[ToolResult]
    final_text: str
    flags: list[str] = field(default_factory=list)

    @property
    def flagged(self) -> bool:
        return bool(self.flags)


def split_rewrite(text: str) -> tuple[list[str], list[str], str]:
    """Split a rewrite into step texts (each ending with a tool block), raw payloads, and the tail."""
    steps, payloads, pos = [], [], 0
    for m in _TOOL_BLOCK.finditer(text):
        steps.append(text[pos:m.end()])
        payloads.append(m.group(1))
        pos = m.end()
    return steps, payloads, text[pos:]


def stage2_rewrite(item: SourceItem, rewriter: PolicyBackend, toolkit: Toolkit, n_frames: int = 128) -> TrajectoryDraft:
    state = init_state(item.question, item.world().meta, n_frames, construction_prompt(item.textual_cot))
    text = rewriter.next_response(_direct_request(state))
    steps, payloads, tail = split_rewrite(text)
    draft = TrajectoryDraft(item, steps, [], [], tail)
    if not steps:
        draft.flags.append("rewrite contains no tool calls")
    for i, raw in enumerate(payloads):
        call, err = decode_payload(raw)
        draft.calls.append(call)
        if call is None:
            draft.results.append(ToolResult("?", "invalid_args", None, f"error={err}"))
            draft.flags.append(f"call {i}: {err}")
            continue
        res = toolkit.dispatch(call, item.world())
        draft.results.append(res)
        if not res.ok:
            draft.flags.append(f"call {i} ({call.name}): {res.status}")
    if not parse_response(tail).format_ok:
        draft.flags.append("rewrite has no final answer block")
    return draft


# -- stage 3 -----------------------------------------------------------------------

@dataclass
class SftRecord:
    record_id: str
    video: dict
    question: Question
    segments: list[dict]
    mask: list[int]

    @property
    def gold(self) -> str:
        return self.question.gold

    def tool_names(self) -> list[str]:
        return [s["tool_name"] for s in self.segments if s["role"] == "tool"]

    def to_dict(self, n_frames: int = SFT_FRAMES) -> dict:
        if len(self.mask) != len(self.segments):
            raise ValueError(f"record {self.record_id}: mask/segment length mismatch")
        for s, m in zip(self.segments, self.mask):
            if m and not (s["kind"] == "text" and s["role"] == "assistant"):
                raise ValueError(f"record {self.record_id}: mask covers a {s['role']} segment")
        segs = [dict(s) for s in self.segments]
        v0 = segs[1]
        v0["clip"] = dict(v0["clip"], frame_times=list(
            uniform_frame_times(self.video["duration_s"], self.video["fps"], n_frames)))
        return {
            "version": SFT_VERSION,
            "id": self.record_id,
            "video": self.video,
            "question": self.question.to_dict(),
            "gold": self.gold,
            "segments": segs,
            "mask": list(self.mask),
        }


@dataclass(frozen=True)
class RlPoolRecord:
    record_id: str
    video: dict
    question: Question

    def to_dict(self) -> dict:
        return {
            "version": RLPOOL_VERSION,
            "id": self.record_id,
            "video": self.video,
            "question": self.question.to_dict(),
            "gold": self.question.gold,
        }


def _segment_dict(seg) -> dict:
    if isinstance(seg, TextSegment):
        d = {"kind": "text", "role": seg.role, "text": seg.text}
        if seg.result is not None:
            d["tool_name"] = seg.result.tool_name
        return d
    d = {"kind": "visual", "role": "tool" if seg.result is not None else "context",
         "clip": seg.clip.to_dict(), "caption": seg.caption}
    if seg.result is not None:
        d["tool_name"] = seg.result.tool_name
    return d


def supervision_mask(segments: Sequence[dict]) -> list[int]:
    """Supervise model-authored text only."""
    return [int(s["kind"] == "text" and s["role"] == "assistant") for s in segments]


def _world_ref(item: SourceItem) -> dict:
    w = item.world()
    return dict(w.meta.to_dict(), world_seed=item.world_seed, spec=item.spec.to_dict())


def _draft_state(draft: TrajectoryDraft, n_frames: int) -> HistoryState:
    state = init_state(draft.item.question, draft.item.world().meta, n_frames)
    for text, call, res in zip(draft.steps, draft.calls, draft.results):
        state = append_step(state, StepRecord(text, call, res if call is not None else None))
    return state


def stage3_refine(draft: TrajectoryDraft, answerer: PolicyBackend, n_frames: int = SFT_FRAMES):
    """Return ("sft", SftRecord) or ("rl_pool", RlPoolRecord)."""
    item = draft.item
    pool = ("rl_pool", RlPoolRecord(item.item_id, _world_ref(item), item.question))
    if draft.flagged:
        return pool
    state = _draft_state(draft, n_frames)
    reasoning = _ANSWER_BLOCK.sub("", draft.final_text).strip()
    hint = append_step(state, StepRecord(reasoning)) if reasoning else state
    try:
        text = answerer.next_response(_direct_request(hint, turn=len(draft.steps) + 1))
    except Exception:
        return pool
    if not _judge(text, item.question):
        return pool
    full = append_step(state, StepRecord(draft.final_text))
    segments = [_segment_dict(s) for s in full.segments]
    return "sft", SftRecord(item.item_id, _world_ref(item), item.question, segments, supervision_mask(segments))


# -- export ---------------------------------------------------------------------------

def export_sft(records: Sequence[SftRecord], path, n_frames: int = SFT_FRAMES) -> int:
    lines = [json.dumps(r.to_dict(n_frames), sort_keys=True, ensure_ascii=False) for r in records]
    Path(path).write_text("".join(l + "\n" for l in lines), encoding="utf-8")
    return len(lines)


def export_rl(pool: Sequence[RlPoolRecord], path) -> int:
    lines = [json.dumps(r.to_dict(), sort_keys=True, ensure_ascii=False) for r in pool]
    Path(path).write_text("".join(l + "\n" for l in lines), encoding="utf-8")
    return len(lines)


def read_sft(path) -> list[dict]:
    return [json.loads(l) for l in Path(path).read_text(encoding="utf-8").splitlines() if l.strip()]


# -- whole pipeline --------------------------------------------------------------------

@dataclass
class PipelineOutput:
    filtered: FilterResult
    drafts: list[TrajectoryDraft]
    sft: list[SftRecord]
    rl_pool: list[RlPoolRecord]


def run_pipeline(items: Sequence[SourceItem], answer_policy: PolicyBackend, rewriter: PolicyBackend,
                 answerer: PolicyBackend, toolkit: Toolkit, n_frames: int = 128,
                 sft_frames: int = SFT_FRAMES) -> PipelineOutput:
    filtered = stage1_filter(items, answer_policy, n_frames)
    drafts, sft, pool = [], [], []
    for item in filtered.kept:
        try:
            draft = stage2_rewrite(item, rewriter, toolkit, n_frames)
        except Exception as exc:
            draft = TrajectoryDraft(item, [], [], [], "", [f"rewriter failure: {exc}"])
        drafts.append(draft)
        kind, rec = stage3_refine(draft, answerer, sft_frames)
        (sft if kind == "sft" else pool).append(rec)
    return PipelineOutput(filtered, drafts, sft, pool)


def pipeline_stats(outputs) -> dict:
    """Per-tool usage frequency and per-sample call-count distribution.

    Accepts drafts, SFT records, or exported SFT dicts.
    """
    per_sample: list[list[str]] = []
    for o in outputs:
        if isinstance(o, TrajectoryDraft):
            per_sample.append([c.name for c in o.calls if c is not None])
        elif isinstance(o, SftRecord):
            per_sample.append(o.tool_names())
        else:
            per_sample.append([s["tool_name"] for s in o["segments"] if s.get("role") == "tool"])
    if not per_sample:
        return {}
    counts = Counter(name for names in per_sample for name in names)
    total = sum(counts.values())
    return {
        "n_samples": len(per_sample),
        "tool_counts": dict(sorted(counts.items())),
        "tool_frequency": {k: v / total for k, v in sorted(counts.items())},
        "calls_per_sample": {str(k): v for k, v in sorted(Counter(len(n) for n in per_sample).items())},
        "mean_calls_per_sample": total / len(per_sample),
    }


def oracle_rewrite(item: SourceItem, toolkit: Optional[Toolkit] = None) -> str:
    """Tool-augmented rewrite produced by running the oracle plan on the item's world."""
    from .rollout import RolloutConfig, run_episode

    world = item.world()
    policy = oracle_policy_for(item.question, frame_size=(world.meta.width, world.meta.height))
    traj = run_episode(item.question, world, policy, toolkit or Toolkit(), RolloutConfig(use_system_prompt=False))
    return "\n".join(s.response_text for s in traj.steps)
