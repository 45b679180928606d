"""Deterministic pixel-free video worlds with ground-truth events and tracks.

A world is a pure function of ``(seed, WorldSpec)``. Every generated task
carries a gold answer computed directly from the ground truth, so the toolkit
oracles can be checked exactly against it.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
import random
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional

from .core import OPTION_LETTERS, Box, Question, ValidationError, VideoMeta

TEMPLATES = (
    "count_event",
    "order_events",
    "span_of_event",
    "event_moment",
    "object_at_time",
    "count_instances",
)
TEMPORAL_TEMPLATES = ("count_event", "order_events", "span_of_event", "event_moment")
SPATIAL_TEMPLATES = ("object_at_time", "count_instances")
QUADRANTS = ("top-left", "top-right", "bottom-left", "bottom-right")

DEFAULT_VOCAB = (
    "man opens door",
    "dog enters",
    "phone rings",
    "woman sits down",
    "car passes",
    "cat jumps",
    "child waves",
)
BACKGROUND_OBJECTS = ("chair", "cup", "lamp", "dog", "ball")


@dataclass(frozen=True)
class EventSpan:
    label: str
    start_s: float
    end_s: float

    @property
    def subject(self) -> str:
        return self.label.split()[0]


@dataclass(frozen=True)
class ObjectTrack:
    object_label: str
    instance_id: int
    boxes: dict  # frame_time (float) -> Box

    @property
    def span(self) -> tuple[float, float]:
        ts = sorted(self.boxes)
        return ts[0], ts[-1]


@dataclass(frozen=True)
class WorldSpec:
    duration_s: float = 120.0
    n_events: int = 6
    n_objects: int = 2
    label_vocab: tuple[str, ...] = DEFAULT_VOCAB
    fps: float = 2.0
    width: int = 640
    height: int = 360
    # fixed event list; when given, only boxes and background objects are random
    pinned_events: tuple[tuple[str, float, float], ...] = ()

    def to_dict(self) -> dict:
        return {
            "duration_s": self.duration_s,
            "n_events": self.n_events,
            "n_objects": self.n_objects,
            "label_vocab": list(self.label_vocab),
            "fps": self.fps,
            "width": self.width,
            "height": self.height,
            "pinned_events": [list(e) for e in self.pinned_events],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        return cls(
            float(d["duration_s"]), int(d["n_events"]), int(d["n_objects"]),
            tuple(d["label_vocab"]), float(d.get("fps", 2.0)), int(d.get("width", 640)),
            int(d.get("height", 360)),
            tuple((e[0], float(e[1]), float(e[2])) for e in d.get("pinned_events", ())),
        )


CANONICAL_SPEC = WorldSpec(
    duration_s=120.0,
    n_events=4,
    n_objects=0,
    label_vocab=("man opens door", "dog enters", "phone rings"),
    pinned_events=(
        ("man opens door", 10.0, 14.0),
        ("dog enters", 30.0, 33.0),
        ("dog enters", 70.0, 74.0),
        ("phone rings", 90.0, 95.0),
    ),
)
CANONICAL_SEED = 7


@dataclass(frozen=True)
class SyntheticVideo:
    meta: VideoMeta
    events: tuple[EventSpan, ...]
    tracks: tuple[ObjectTrack, ...]
    seed: int
    spec: WorldSpec = field(default_factory=WorldSpec)

    @property
    def video_id(self) -> str:
        return self.meta.video_id

    def frame_key(self, t: float) -> float:
        """World frame time holding at time t (sample-and-hold on the native grid)."""
        idx = int(math.floor(t * self.meta.fps + 1e-9))
        return round(idx / self.meta.fps, 6)

    def boxes_at(self, t: float, label: str) -> list[tuple[ObjectTrack, Box]]:
        key = self.frame_key(t)
        return [(tr, tr.boxes[key]) for tr in self.tracks if tr.object_label == label and key in tr.boxes]

    def object_labels(self) -> set[str]:
        return {t.object_label for t in self.tracks}

    # -- serialization --------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "meta": self.meta.to_dict(),
            "events": [{"label": e.label, "start_s": e.start_s, "end_s": e.end_s} for e in self.events],
            "tracks": [
                {
                    "object_label": tr.object_label,
                    "instance_id": tr.instance_id,
                    "boxes": {repr(t): list(b) for t, b in sorted(tr.boxes.items())},
                }
                for tr in self.tracks
            ],
            "seed": self.seed,
            "spec": self.spec.to_dict(),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticVideo":
        return cls(
            VideoMeta.from_dict(d["meta"]),
            tuple(EventSpan(e["label"], float(e["start_s"]), float(e["end_s"])) for e in d["events"]),
            tuple(
                ObjectTrack(t["object_label"], int(t["instance_id"]),
                            {float(k): tuple(v) for k, v in t["boxes"].items()})
                for t in d["tracks"]
            ),
            int(d["seed"]),
            WorldSpec.from_dict(d["spec"]),
        )

    @classmethod
    def loads(cls, text: str) -> "SyntheticVideo":
        return cls.from_dict(json.loads(text))


def _track_boxes(rng: random.Random, start: float, end: float, spec: WorldSpec) -> dict:
    """Box per native frame in [start, end) with a slow random drift."""
    w = rng.randint(spec.width // 10, spec.width // 4)
    h = rng.randint(spec.height // 10, spec.height // 4)
    x = rng.randint(0, spec.width - w)
    y = rng.randint(0, spec.height - h)
    vx, vy = rng.choice((-3, -2, -1, 1, 2, 3)), rng.choice((-2, -1, 1, 2))
    boxes = {}
    i0 = int(math.ceil(start * spec.fps - 1e-9))
    i1 = int(math.ceil(end * spec.fps - 1e-9))
    for i in range(i0, i1):
        boxes[round(i / spec.fps, 6)] = (x, y, x + w, y + h)
        if not 0 <= x + vx <= spec.width - w:
            vx = -vx
        if not 0 <= y + vy <= spec.height - h:
            vy = -vy
        x, y = x + vx, y + vy
    return boxes


def generate(seed: int, spec: WorldSpec = CANONICAL_SPEC) -> SyntheticVideo:
    """Generate a world from a seed and spec.

    Events are non-overlapping with integer-second bounds and at least one
    second apart; labels are drawn with replacement so they may repeat. Each
    event's subject (first word of its label) gets a track over the event,
    plus ``n_objects`` background tracks.
    """
    if spec.duration_s <= 0 or spec.n_events <= 0 or spec.n_objects < 0 or spec.fps <= 0:
        raise ValidationError("world spec fields must be positive")
    if not spec.label_vocab:
        raise ValidationError("label_vocab must be nonempty")
    rng = random.Random(f"weaver-world:{seed}")
    dur = float(spec.duration_s)

    if spec.pinned_events:
        events = [EventSpan(l, float(a), float(b)) for l, a, b in spec.pinned_events]
        for e in events:
            if not 0 <= e.start_s < e.end_s <= dur:
                raise ValidationError(f"pinned event {e} outside the video")
    else:
        lengths = [rng.randint(2, 6) for _ in range(spec.n_events)]
        slack = int(math.floor(dur)) - sum(lengths) - (spec.n_events + 1)
        if slack < 0:
            raise ValidationError(f"{spec.n_events} events do not fit in {dur} s")
        cuts = sorted(rng.randint(0, slack) for _ in range(spec.n_events))
        extra = [b - a for a, b in zip([0] + cuts, cuts)]
        events, t = [], 0
        for n, (ln, ex) in enumerate(zip(lengths, extra)):
            t += 1 + ex
            events.append(EventSpan(rng.choice(spec.label_vocab), float(t), float(t + ln)))
            t += ln
    events.sort(key=lambda e: (e.start_s, e.end_s, e.label))

    raw_tracks: list[tuple[str, dict]] = []
    for e in events:
        raw_tracks.append((e.subject, _track_boxes(rng, e.start_s, e.end_s, spec)))
    for _ in range(spec.n_objects):
        label = rng.choice(BACKGROUND_OBJECTS)
        ln = rng.randint(5, 20)
        start = rng.randint(0, max(0, int(dur) - ln))
        raw_tracks.append((label, _track_boxes(rng, start, min(dur, start + ln), spec)))
    raw_tracks = [(l, b) for l, b in raw_tracks if b]
    raw_tracks.sort(key=lambda lb: (min(lb[1]), lb[0]))
    counters: dict[str, int] = {}
    tracks = []
    for label, boxes in raw_tracks:
        counters[label] = counters.get(label, 0) + 1
        tracks.append(ObjectTrack(label, counters[label], boxes))

    meta = VideoMeta(f"synth-{seed:06d}", dur, spec.fps, spec.width, spec.height).validate()
    return SyntheticVideo(meta, tuple(events), tuple(tracks), seed, spec)


def canonical_world() -> SyntheticVideo:
    return generate(CANONICAL_SEED, CANONICAL_SPEC)


def load_fixture(name: str = "w1.json") -> SyntheticVideo:
    text = resources.files("weaver").joinpath("data", name).read_text(encoding="utf-8")
    return SyntheticVideo.loads(text)


# -- ground truth queries shared with the oracle checks -------------------------

def normalize_label(s: str) -> tuple[str, ...]:
    return tuple(s.casefold().split())


def matching_events(video: SyntheticVideo, query: str) -> list[EventSpan]:
    q = normalize_label(query)
    return [e for e in video.events if normalize_label(e.label) == q]


def merge_spans(spans, gap: float = 0.0) -> list[tuple[float, float]]:
    """Merge spans that overlap or sit within ``gap`` seconds of each other."""
    out: list[list[float]] = []
    for a, b in sorted(spans):
        if out and a - out[-1][1] <= gap:
            out[-1][1] = max(out[-1][1], b)
        else:
            out.append([a, b])
    return [(a, b) for a, b in out]


def quadrant(box: Box, width: int, height: int) -> Optional[str]:
    cx2, cy2 = box[0] + box[2], box[1] + box[3]
    if cx2 == width or cy2 == height:
        return None
    return QUADRANTS[(2 if cy2 > height else 0) + (1 if cx2 > width else 0)]


def fmt_span(a: float, b: float) -> str:
    return f"{a:.1f}s to {b:.1f}s"


# -- task generation -----------------------------------------------------------

class UnsatisfiableTask(ValueError):
    pass


def _letter_of(options: list[str], gold: str) -> str:
    return OPTION_LETTERS[options.index(gold)]


def _shuffled(rng: random.Random, gold: str, distractors: list[str]) -> list[str]:
    opts = [gold] + distractors[:3]
    rng.shuffle(opts)
    return opts


def _count_options(rng: random.Random, count: int) -> list[int]:
    start = max(0, count - rng.randrange(4))
    return list(range(start, start + 4))


def make_task(video: SyntheticVideo, template: str, rng_seed: int = 0, target: Optional[str] = None) -> Question:
    """Build a four-option question answerable from the world's ground truth.

    ``target`` pins the event label (or object label) the question is about;
    otherwise it is drawn from the world with ``rng_seed``.
    """
    rng = random.Random(f"weaver-task:{video.seed}:{template}:{rng_seed}")
    labels = sorted({e.label for e in video.events})

    if template == "count_event":
        label = target or rng.choice(labels)
        count = len(merge_spans((e.start_s, e.end_s) for e in matching_events(video, label)))
        if count == 0:
            raise UnsatisfiableTask(f"no event {label!r}")
        opts = [str(n) for n in _count_options(rng, count)]
        text = f'How many separate times does the event "{label}" occur in the video?'
        return Question(text, "multiple_choice", tuple(opts), _letter_of(opts, str(count)), template).validate()

    if template == "span_of_event":
        label = target or rng.choice(labels)
        evs = matching_events(video, label)
        if not evs:
            raise UnsatisfiableTask(f"no event {label!r}")
        first = evs[0]
        gold = fmt_span(first.start_s, first.end_s)
        others = [fmt_span(e.start_s, e.end_s) for e in video.events if fmt_span(e.start_s, e.end_s) != gold]
        others = sorted(set(others))
        rng.shuffle(others)
        d = int(first.end_s - first.start_s)
        shifted = [fmt_span(first.start_s + k, first.end_s + k) for k in (-2 * d - 3, 2 * d + 3, 4 * d + 7)
                   if 0 <= first.start_s + k and first.end_s + k <= video.meta.duration_s]
        pool = others + [s for s in shifted if s not in others]
        if len(pool) < 3:
            raise UnsatisfiableTask("not enough distractor spans")
        opts = _shuffled(rng, gold, pool)
        text = f'When does "{label}" first happen?'
        return Question(text, "multiple_choice", tuple(opts), _letter_of(opts, gold), template).validate()

    if template == "order_events":
        if len(labels) < 3:
            raise UnsatisfiableTask("need three distinct events")
        picked = rng.sample(labels, 3) if target is None else list(target.split("|"))
        firsts = {l: matching_events(video, l)[0].start_s for l in picked}
        chrono = sorted(picked, key=lambda l: firsts[l])
        gold = " -> ".join(chrono)
        perms = [" -> ".join(p) for p in itertools.permutations(picked)]
        perms.remove(gold)
        rng.shuffle(perms)
        opts = _shuffled(rng, gold, perms)
        text = "In which order do these events first occur? " + "; ".join(f'"{l}"' for l in picked)
        return Question(text, "multiple_choice", tuple(opts), _letter_of(opts, gold), template).validate()

    if template == "event_moment":
        label = target or rng.choice(labels)
        evs = matching_events(video, label)
        if not evs:
            raise UnsatisfiableTask(f"no event {label!r}")
        e = evs[0]
        mid = (e.start_s + e.end_s) / 2
        t = float(math.floor(mid)) if mid - math.floor(mid) <= 0.5 else float(math.ceil(mid))
        gold = f"{t:.0f}s"
        cands = [t + k for k in (-9, -5, -3, 3, 5, 9, 13, -13)]
        cands = [c for c in cands if 0 <= c < video.meta.duration_s]
        rng.shuffle(cands)
        if len(cands) < 3:
            raise UnsatisfiableTask("not enough distractor moments")
        opts = _shuffled(rng, gold, [f"{c:.0f}s" for c in cands])
        text = f'At which second is "{label}" best captured?'
        return Question(text, "multiple_choice", tuple(opts), _letter_of(opts, gold), template).validate()

    if template == "object_at_time":
        candidates = []
        for tr in video.tracks:
            if target is not None and tr.object_label != target:
                continue
            for ft, box in sorted(tr.boxes.items()):
                if ft != math.floor(ft):
                    continue
                if len(video.boxes_at(ft, tr.object_label)) != 1:
                    continue
                q = quadrant(box, video.meta.width, video.meta.height)
                if q is not None:
                    candidates.append((tr.object_label, ft, q))
        if not candidates:
            raise UnsatisfiableTask("no unambiguous object frame")
        label, t, q = rng.choice(candidates)
        opts = list(QUADRANTS)
        text = f"At {t:.0f}s, in which part of the frame is the {label}?"
        return Question(text, "multiple_choice", tuple(opts), _letter_of(opts, q), template).validate()

    if template == "count_instances":
        objs = sorted(video.object_labels())
        if not objs:
            raise UnsatisfiableTask("no objects")
        label = target or rng.choice(objs)
        count = sum(1 for tr in video.tracks if tr.object_label == label)
        if count == 0:
            raise UnsatisfiableTask(f"no object {label!r}")
        opts = [str(n) for n in _count_options(rng, count)]
        text = f"How many distinct {label} instances appear in the video?"
        return Question(text, "multiple_choice", tuple(opts), _letter_of(opts, str(count)), template).validate()

    raise ValueError(f"unknown template {template!r}")


@dataclass(frozen=True)
class Task:
    task_id: str
    question: Question
    world_seed: int
    spec: WorldSpec
    rng_seed: int = 0

    def world(self) -> SyntheticVideo:
        return _world_cache(self.world_seed, self.spec)

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "question": self.question.to_dict(),
            "world": {"seed": self.world_seed, "spec": self.spec.to_dict()},
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Task":
        return cls(d["task_id"], Question.from_dict(d["question"]), int(d["world"]["seed"]),
                   WorldSpec.from_dict(d["world"]["spec"]), int(d.get("rng_seed", 0)))


_WORLDS: dict = {}


def _world_cache(seed: int, spec: WorldSpec) -> SyntheticVideo:
    key = (seed, spec)
    if key not in _WORLDS:
        _WORLDS[key] = generate(seed, spec)
    return _WORLDS[key]


def make_task_set(n: int, seed: int = 0, templates=TEMPLATES, spec: Optional[WorldSpec] = None) -> list[Task]:
    """``n`` tasks cycling through ``templates`` over a stream of seeded worlds."""
    spec = spec or WorldSpec()
    tasks = []
    world_seed = seed * 100_003
    i = 0
    while len(tasks) < n:
        template = templates[i % len(templates)]
        for attempt in range(50):
            w = _world_cache(world_seed + i + attempt * 7919, spec)
            try:
                q = make_task(w, template, rng_seed=i)
            except UnsatisfiableTask:
                continue
            digest = hashlib.sha256(f"{w.seed}:{template}:{i}".encode()).hexdigest()[:8]
            tasks.append(Task(f"t{i:05d}-{digest}", q, w.seed, spec, i))
            break
        else:
            raise UnsatisfiableTask(f"could not satisfy {template} near world seed {world_seed + i}")
        i += 1
    return tasks
