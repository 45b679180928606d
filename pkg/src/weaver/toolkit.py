"""The six perception tools as exact oracles over synthetic worlds.

``Toolkit.dispatch`` validates a parsed call against its schema, fills the
default span, and routes it either to the local oracle implementation or to
a remote backend speaking a small JSON-over-HTTP protocol.
"""

from __future__ import annotations

import json
import logging
import math
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Any, Optional, Union

from .core import BoxAnnotation, Clip, ToolCall, ToolResult, VideoMeta
from .synthworld import SyntheticVideo, matching_events, merge_spans, normalize_label

log = logging.getLogger(__name__)

DEFAULT_MAX_TOOL_FRAMES = 32

TEMPORAL_TOOLS = ("temporal_grounding", "frame_selection", "temporal_count", "trim")
SPATIAL_TOOLS = ("spatial_tracking", "spatial_grounding")
TOOL_NAMES = TEMPORAL_TOOLS + SPATIAL_TOOLS

# short codes used in ablation tables
TOOL_CODES = {
    "temporal_grounding": "TG",
    "frame_selection": "FS",
    "trim": "TR",
    "temporal_count": "TC",
    "spatial_tracking": "ST",
    "spatial_grounding": "SG",
}


@dataclass(frozen=True)
class ArgSpec:
    name: str
    type: str  # "string" | "number" | "span" | "string_list"
    required: bool = True


@dataclass(frozen=True)
class ToolSpec:
    name: str
    args: tuple[ArgSpec, ...]
    doc: str

    def describe(self) -> str:
        parts = []
        for a in self.args:
            parts.append(f'"{a.name}": {a.type}' + ("" if a.required else " (optional)"))
        return f"- {self.name}: {self.doc} Arguments: {{{', '.join(parts)}}}"


_SPAN = ArgSpec("span", "span", required=False)
TOOL_SPECS: dict[str, ToolSpec] = {
    s.name: s
    for s in (
        ToolSpec("temporal_grounding", (ArgSpec("query", "string"), _SPAN),
                 "Ground a video clip temporally according to a text query; returns the matching clip."),
        ToolSpec("frame_selection", (ArgSpec("query", "string"), _SPAN),
                 "Select the single most representative frame for a query."),
        ToolSpec("temporal_count", (ArgSpec("query", "string"), _SPAN),
                 "Find and merge every clip where the query occurs; returns the spliced clips and their count."),
        ToolSpec("trim", (ArgSpec("start_s", "number"), ArgSpec("end_s", "number")),
                 "Cut the clip between start_s and end_s seconds."),
        ToolSpec("spatial_tracking", (ArgSpec("objects", "string_list"), _SPAN),
                 "Track the listed objects through the clip; boxes carry persistent instance ids."),
        ToolSpec("spatial_grounding", (ArgSpec("objects", "string_list"), _SPAN),
                 "Box the listed objects independently on every frame of the clip."),
    )
}


def tool_docs() -> str:
    return "\n".join(TOOL_SPECS[n].describe() for n in TOOL_NAMES)


def _is_number(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def validate_arguments(spec: ToolSpec, args: dict) -> Optional[str]:
    """Return an error message, or None when ``args`` fit the schema."""
    known = {a.name for a in spec.args}
    extra = sorted(set(args) - known)
    if extra:
        return f"unknown argument(s) {extra} for {spec.name}"
    for a in spec.args:
        if a.name not in args:
            if a.required:
                return f"missing required argument '{a.name}'"
            continue
        v = args[a.name]
        if a.type == "string" and not (isinstance(v, str) and v.strip()):
            return f"'{a.name}' must be a nonempty string"
        if a.type == "number" and not _is_number(v):
            return f"'{a.name}' must be a number"
        if a.type == "span" and not (isinstance(v, list) and len(v) == 2 and all(_is_number(x) for x in v)):
            return f"'{a.name}' must be [start_s, end_s]"
        if a.type == "string_list" and not (
            isinstance(v, list) and v and all(isinstance(x, str) and x.strip() for x in v)
        ):
            return f"'{a.name}' must be a nonempty list of strings"
    return None


def grid_times(start: float, end: float) -> list[float]:
    """1 fps grid over [start, end): start, start+1, ..."""
    n = int(math.ceil(end - start - 1e-9))
    return [round(start + k, 6) for k in range(n)]


def downsample(times: list[float], cap: int) -> list[float]:
    if len(times) <= cap:
        return list(times)
    n = len(times)
    return [times[int((k + 0.5) * n / cap)] for k in range(cap)]


def _fail(name: str, status: str, note: str) -> ToolResult:
    return ToolResult(name, status, None, note)


def _clamp(meta: VideoMeta, a: float, b: float) -> tuple[float, float]:
    return max(0.0, float(a)), min(meta.duration_s, float(b))


@dataclass
class RemoteVideoHandle:
    """A video known only by id and metadata; tools run on a remote backend."""

    meta: VideoMeta
    backend: "RemoteToolBackend"

    @property
    def video_id(self) -> str:
        return self.meta.video_id


class ToolBackendError(RuntimeError):
    pass


@dataclass
class RemoteToolBackend:
    """Client for a remote tool server.

    Request body: ``{"tool", "arguments", "video", "span"}``; response body:
    ``{"status", "spans", "boxes", "note"}`` where ``boxes`` is a list of
    ``{"t", "label", "box", "instance_id"?}``.
    """

    url: str
    timeout_s: float = 30.0
    retries: int = 2
    backoff_s: float = 0.2

    def call(self, tool: str, arguments: dict, video_id: str, span: tuple[float, float]) -> dict:
        body = json.dumps({"tool": tool, "arguments": arguments, "video": video_id, "span": list(span)}).encode()
        last: Optional[Exception] = None
        for attempt in range(self.retries + 1):
            req = urllib.request.Request(self.url, data=body, headers={"Content-Type": "application/json"})
            try:
                with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
                    return json.loads(resp.read().decode("utf-8"))
            except (urllib.error.URLError, TimeoutError, ValueError, OSError) as exc:
                last = exc
                log.warning("tool backend %s attempt %d failed: %s", self.url, attempt + 1, exc)
                if attempt < self.retries:
                    time.sleep(self.backoff_s * (attempt + 1))
        raise ToolBackendError(f"tool backend unreachable after {self.retries + 1} attempts: {last}")


@dataclass
class Toolkit:
    """Validated dispatch over the tool library.

    Tools outside ``enabled`` fail soft with ``invalid_args`` so that an
    ablation changes capability without changing the prompt.
    """

    enabled: frozenset = field(default_factory=lambda: frozenset(TOOL_NAMES))
    max_tool_frames: int = DEFAULT_MAX_TOOL_FRAMES
    count_gap_s: float = 0.0

    def __post_init__(self):
        self.enabled = frozenset(self.enabled)
        unknown = self.enabled - set(TOOL_NAMES)
        if unknown:
            raise ValueError(f"unknown tools {sorted(unknown)}")

    def with_tools(self, names) -> "Toolkit":
        return Toolkit(frozenset(names), self.max_tool_frames, self.count_gap_s)

    # -- dispatch -------------------------------------------------------------

    def dispatch(self, call: ToolCall, video: Union[SyntheticVideo, RemoteVideoHandle],
                 default_span: Optional[tuple[float, float]] = None) -> ToolResult:
        name = call.name
        spec = TOOL_SPECS.get(name)
        if spec is None:
            return _fail(name, "invalid_args", f"error=unknown tool '{name}'; available={','.join(TOOL_NAMES)}")
        if name not in self.enabled:
            return _fail(name, "invalid_args", f"error=tool '{name}' is disabled")
        err = validate_arguments(spec, call.arguments)
        if err:
            return _fail(name, "invalid_args", f"error={err}")

        meta = video.meta
        args = dict(call.arguments)
        if name == "trim":
            span = (args["start_s"], args["end_s"])
        else:
            span = tuple(args.get("span") or default_span or (0.0, meta.duration_s))
        a, b = _clamp(meta, *span)
        if a >= b:
            return _fail(name, "invalid_args", f"error=empty span after clamping [{a:.2f},{b:.2f}]")

        if isinstance(video, RemoteVideoHandle):
            return self._remote(video, name, args, (a, b))
        if name == "trim":
            return self.trim(video, a, b)
        if name in SPATIAL_TOOLS:
            return getattr(self, name)(video, args["objects"], (a, b))
        return getattr(self, name)(video, args["query"], (a, b))

    def _clip(self, meta: VideoMeta, spans, annotations=None) -> Clip:
        times: list[float] = []
        for a, b in spans:
            times.extend(grid_times(a, b))
        times = downsample(times, self.max_tool_frames)
        ann = None
        if annotations is not None:
            keep = set(times)
            ann = {t: v for t, v in annotations.items() if t in keep and v}
        return Clip(meta.video_id, spans[0][0], spans[-1][1], tuple(times), ann)

    # -- oracle tools -----------------------------------------------------------

    def temporal_grounding(self, video: SyntheticVideo, query: str, span=None) -> ToolResult:
        a, b = span or (0.0, video.meta.duration_s)
        for e in matching_events(video, query):
            lo, hi = max(a, e.start_s), min(b, e.end_s)
            if lo < hi:
                return ToolResult("temporal_grounding", "ok", self._clip(video.meta, [(lo, hi)]),
                                  f"event={e.label}", ((lo, hi),))
        return _fail("temporal_grounding", "not_found", "error=no matching event")

    def frame_selection(self, video: SyntheticVideo, query: str, span=None) -> ToolResult:
        a, b = span or (0.0, video.meta.duration_s)
        frames = grid_times(a, b)
        if not frames:
            return _fail("frame_selection", "not_found", "error=no frames in span")
        scores = [0.0] * len(frames)
        events = matching_events(video, query)
        if events:
            for e in events:
                mid = (e.start_s + e.end_s) / 2
                if not a <= mid < b:
                    continue
                # nearest grid frame, earlier on ties
                best = min(range(len(frames)), key=lambda i: (abs(frames[i] - mid), i))
                scores[best] = 1.0
        else:
            label = " ".join(normalize_label(query))
            for i, t in enumerate(frames):
                areas = [(bx[2] - bx[0]) * (bx[3] - bx[1]) for _, bx in video.boxes_at(t, label)]
                scores[i] = float(max(areas, default=0))
        top = max(scores)
        if top <= 0:
            return _fail("frame_selection", "not_found", "error=query not visible in span")
        i = scores.index(top)
        t = frames[i]
        clip = Clip(video.video_id, t, min(t + 1.0, b), (t,))
        return ToolResult("frame_selection", "ok", clip, f"frame={t:.2f}; score={top:g}", ((t, min(t + 1.0, b)),))

    def temporal_count(self, video: SyntheticVideo, query: str, span=None) -> ToolResult:
        a, b = span or (0.0, video.meta.duration_s)
        hits = [(max(a, e.start_s), min(b, e.end_s)) for e in matching_events(video, query)]
        hits = [(lo, hi) for lo, hi in hits if lo < hi]
        if not hits:
            return _fail("temporal_count", "not_found", "error=no matching event")
        merged = merge_spans(hits, self.count_gap_s)
        return ToolResult("temporal_count", "ok", self._clip(video.meta, merged), f"count={len(merged)}", tuple(merged))

    def trim(self, video, start_s: float, end_s: float) -> ToolResult:
        a, b = _clamp(video.meta, start_s, end_s)
        if a >= b:
            return _fail("trim", "invalid_args", f"error=empty span after clamping [{a:.2f},{b:.2f}]")
        return ToolResult("trim", "ok", self._clip(video.meta, [(a, b)]), "", ((a, b),))

    def _boxes(self, video: SyntheticVideo, name: str, objects: list, span, with_ids: bool) -> ToolResult:
        a, b = span or (0.0, video.meta.duration_s)
        frames = grid_times(a, b)
        labels = []
        for o in objects:
            lab = " ".join(normalize_label(o))
            if lab not in labels:
                labels.append(lab)
        ann: dict[float, tuple[BoxAnnotation, ...]] = {}
        seen: dict[str, set] = {lab: set() for lab in labels}
        for t in frames:
            row = []
            for lab in labels:
                for tr, box in video.boxes_at(t, lab):
                    seen[lab].add(tr.instance_id)
                    row.append(BoxAnnotation(lab, box, tr.instance_id if with_ids else None))
            if row:
                ann[t] = tuple(row)
        if not ann:
            return _fail(name, "not_found", "error=no listed object in span; " +
                         "; ".join(f"{lab}: not found" for lab in labels))
        parts = []
        for lab in labels:
            if not seen[lab]:
                parts.append(f"{lab}: not found")
            elif with_ids:
                parts.append(f"{lab}: instances=" + ",".join(str(i) for i in sorted(seen[lab])))
            else:
                parts.append(f"{lab}: max_per_frame=" +
                             str(max(sum(1 for x in r if x.label == lab) for r in ann.values())))
        return ToolResult(name, "ok", self._clip(video.meta, [(a, b)], ann), "; ".join(parts), ((a, b),))

    def spatial_tracking(self, video: SyntheticVideo, objects: list, span=None) -> ToolResult:
        return self._boxes(video, "spatial_tracking", objects, span, with_ids=True)

    def spatial_grounding(self, video: SyntheticVideo, objects: list, span=None) -> ToolResult:
        return self._boxes(video, "spatial_grounding", objects, span, with_ids=False)

    # -- remote ---------------------------------------------------------------

    def _remote(self, handle: RemoteVideoHandle, name: str, args: dict, span) -> ToolResult:
        try:
            resp = handle.backend.call(name, args, handle.video_id, span)
        except ToolBackendError as exc:
            return _fail(name, "not_found", f"error=backend failure: {exc}")
        status = resp.get("status", "not_found")
        note = str(resp.get("note", ""))
        if status != "ok":
            return _fail(name, status if status in ("not_found", "invalid_args") else "not_found", note)
        spans = [(float(s0), float(s1)) for s0, s1 in resp.get("spans") or [span]]
        spans = [(max(span[0], s0), min(span[1], s1)) for s0, s1 in spans]
        spans = [s for s in spans if s[0] < s[1]]
        if not spans:
            return _fail(name, "not_found", "error=backend span outside request")
        ann = None
        if resp.get("boxes"):
            ann = {}
            for bx in resp["boxes"]:
                t = round(float(bx["t"]), 6)
                ann.setdefault(t, []).append(BoxAnnotation(bx["label"], tuple(bx["box"]), bx.get("instance_id")))
            ann = {t: tuple(v) for t, v in ann.items()}
        if name == "frame_selection":
            t = spans[0][0]
            clip = Clip(handle.video_id, t, spans[0][1], (t,))
        else:
            clip = self._clip(handle.meta, spans, ann)
        return ToolResult(name, "ok", clip, note, tuple(spans))
