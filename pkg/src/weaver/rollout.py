"""Multi-turn episode loop, grouped rollouts and batch execution."""

from __future__ import annotations

import hashlib
import json
import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, Sequence, Union

from .config import system_prompt as default_system_prompt
from .core import (
    ContextOverflow,
    Question,
    StepRecord,
    append_step,
    assemble_context,
    init_state,
    text_tokens,
)
from .policy import PolicyBackend, PolicyRequest, SamplingParams
from .protocol import extract_answer, parse_response
from .reward import DEFAULT_WEIGHTS, RewardBreakdown, RolloutGroup, compute_reward, score_group
from .toolkit import Toolkit

log = logging.getLogger(__name__)

TRAJ_VERSION = "weaver-traj/1"
STOP_REASONS = ("answered", "max_turns", "context_overflow", "backend_error")

_MASK64 = (1 << 64) - 1


def mix64(seed: int, index: int) -> int:
    """SplitMix64 finalizer over ``seed + (index + 1) * 0x9E3779B97F4A7C15``."""
    z = (seed + (index + 1) * 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


@dataclass(frozen=True)
class RolloutConfig:
    n_init_frames: int = 128
    max_turns: int = 10
    max_prompt_tokens: int = 8192
    max_response_tokens: int = 20480
    group_size: int = 8
    temperature: float = 1.0
    top_p: float = 1.0
    seed: int = 0
    tokens_per_frame: int = 32
    reward_weights: tuple[float, float, float] = DEFAULT_WEIGHTS
    advantage_eps: float = 1e-6
    use_system_prompt: bool = True
    # keys passed through to exports untouched (learning_rate, kl_loss_coef, ...)
    extra: tuple[tuple[str, Any], ...] = ()

    def __post_init__(self):
        for name in ("n_init_frames", "max_turns", "max_prompt_tokens", "max_response_tokens",
                     "group_size", "tokens_per_frame"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    _KEYMAP = {
        "max_num_turns": "max_turns",
        "max_prompt_length": "max_prompt_tokens",
        "max_response_length": "max_response_tokens",
        "group_size": "group_size",
        "n_init_frames": "n_init_frames",
        "temperature": "temperature",
        "top_p": "top_p",
        "seed": "seed",
        "tokens_per_frame": "tokens_per_frame",
        "advantage_eps": "advantage_eps",
    }

    @classmethod
    def from_mapping(cls, cfg: dict) -> "RolloutConfig":
        kwargs: dict[str, Any] = {}
        extra = []
        weights = list(DEFAULT_WEIGHTS)
        for k, v in cfg.items():
            if k in cls._KEYMAP:
                kwargs[cls._KEYMAP[k]] = v
            elif k in ("lambda_corr", "lambda_format", "lambda_tool"):
                weights[("lambda_corr", "lambda_format", "lambda_tool").index(k)] = float(v)
            else:
                extra.append((k, v))
        return cls(**kwargs, reward_weights=tuple(weights), extra=tuple(extra))

    def snapshot(self) -> dict:
        """Flat config echoed into exports, using the training key names."""
        out = {
            "group_size": self.group_size,
            "max_num_turns": self.max_turns,
            "max_prompt_length": self.max_prompt_tokens,
            "max_response_length": self.max_response_tokens,
            "n_init_frames": self.n_init_frames,
            "tokens_per_frame": self.tokens_per_frame,
            "lambda_corr": self.reward_weights[0],
            "lambda_format": self.reward_weights[1],
            "lambda_tool": self.reward_weights[2],
            "seed": self.seed,
        }
        out.update(dict(self.extra))
        return out


@dataclass
class Trajectory:
    question: Question
    video_id: str
    steps: list[StepRecord] = field(default_factory=list)
    final_answer: Optional[str] = None
    stop_reason: str = "max_turns"
    reward: Optional[RewardBreakdown] = None
    stats: dict = field(default_factory=dict)
    seed: int = 0
    task_id: str = ""
    error: str = ""

    def finalize_stats(self, prompt_tokens: Sequence[int]) -> None:
        tools = Counter(s.tool_result.tool_name for s in self.steps if s.tool_result is not None)
        self.stats = {
            "n_tool_calls": sum(tools.values()),
            "per_tool": dict(sorted(tools.items())),
            "n_turns": len(self.steps),
            "prompt_tokens": list(prompt_tokens),
        }

    def to_dict(self) -> dict:
        return {
            "version": TRAJ_VERSION,
            "task_id": self.task_id,
            "question": self.question.to_dict(),
            "video_id": self.video_id,
            "steps": [s.to_dict() for s in self.steps],
            "final_answer": self.final_answer,
            "stop_reason": self.stop_reason,
            "reward": self.reward.to_dict() if self.reward else None,
            "stats": self.stats,
            "seed": self.seed,
            "error": self.error,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)

    def traj_id(self) -> str:
        d = self.to_dict()
        d.pop("reward")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        if d.get("version") != TRAJ_VERSION:
            raise ValueError(f"unsupported trajectory version {d.get('version')!r}")
        return cls(
            Question.from_dict(d["question"]),
            d["video_id"],
            [StepRecord.from_dict(s) for s in d["steps"]],
            d.get("final_answer"),
            d["stop_reason"],
            RewardBreakdown.from_dict(d["reward"]) if d.get("reward") else None,
            d.get("stats", {}),
            d.get("seed", 0),
            d.get("task_id", ""),
            d.get("error", ""),
        )


def run_episode(question: Question, video, policy: PolicyBackend, toolkit: Toolkit,
                config: RolloutConfig = RolloutConfig(), seed: Optional[int] = None,
                task_id: str = "") -> Trajectory:
    """Run one episode: context -> response -> parse -> tool -> state, until an answer or a limit."""
    seed = config.seed if seed is None else seed
    sys_prompt = default_system_prompt() if config.use_system_prompt else ""
    traj = Trajectory(question, video.meta.video_id, seed=seed, task_id=task_id)
    prompt_tokens: list[int] = []
    state = init_state(question, video.meta, config.n_init_frames, sys_prompt, config.tokens_per_frame)

    for turn in range(config.max_turns):
        try:
            view = assemble_context(state, config.max_prompt_tokens)
        except ContextOverflow as exc:
            traj.stop_reason, traj.error = "context_overflow", str(exc)
            break
        prompt_tokens.append(view.total_tokens)
        sampling = SamplingParams(config.temperature, config.top_p, config.max_response_tokens, mix64(seed, turn))
        request = PolicyRequest(view, sampling, turn, sys_prompt)
        try:
            text = policy.next_response(request)
        except Exception as exc:  # any backend failure ends the episode, not the batch
            traj.stop_reason, traj.error = "backend_error", f"{type(exc).__name__}: {exc}"
            break

        flags: list[str] = []
        if text_tokens(text) > config.max_response_tokens:
            text = text.encode("utf-8")[: config.max_response_tokens * 4].decode("utf-8", errors="ignore")
            flags.append("response truncated to max_response_tokens")
        parsed = parse_response(text)
        flags.extend(parsed.diagnostics)

        if parsed.format_ok:
            answer = extract_answer(parsed.answer_span, question)
            step = StepRecord(text, parsed.tool_call, None, answer, tuple(flags))
            traj.steps.append(step.validate())
            traj.final_answer = answer
            traj.stop_reason = "answered"
            break
        if parsed.tool_call is not None:
            result = toolkit.dispatch(parsed.tool_call, video)
            step = StepRecord(text, parsed.tool_call, result, None, tuple(flags))
        else:
            step = StepRecord(text, None, None, None, tuple(flags))
        traj.steps.append(step.validate())
        state = append_step(state, step)
    else:
        traj.stop_reason = "max_turns"

    traj.finalize_stats(prompt_tokens)
    return traj


class GroupFailed(RuntimeError):
    pass


def run_group(question: Question, video, policy: PolicyBackend, toolkit: Toolkit,
              config: RolloutConfig = RolloutConfig(), parallelism: int = 1, task_id: str = "") -> RolloutGroup:
    """``group_size`` episodes with seeds mix64(seed, i), scored and normalized within the group.

    All members share the same uniform initial clip.
    """
    if config.group_size < 2:
        raise ValueError("group_size must be >= 2")

    def one(i: int) -> Trajectory:
        return run_episode(question, video, policy, toolkit, config, mix64(config.seed, i), task_id)

    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        trajs = list(pool.map(one, range(config.group_size)))
    if all(t.stop_reason == "backend_error" for t in trajs):
        raise GroupFailed(f"all {len(trajs)} episodes failed: {trajs[0].error}")
    return score_group(trajs, config.reward_weights, config.advantage_eps)


@dataclass(frozen=True)
class BatchError:
    index: int
    task_id: str
    error: str

    def to_dict(self) -> dict:
        return {"version": TRAJ_VERSION, "index": self.index, "task_id": self.task_id, "error": self.error}


PolicySource = Union[PolicyBackend, Callable[[Any], PolicyBackend]]


def _policy_for(policy: PolicySource, task) -> PolicyBackend:
    return policy if hasattr(policy, "next_response") else policy(task)


def run_batch(tasks: Sequence, policy: PolicySource, toolkit: Toolkit, config: RolloutConfig = RolloutConfig(),
              parallelism: int = 1, mode: str = "episode") -> list:
    """Run every task; results keep input order and do not depend on ``parallelism``.

    ``tasks`` are ``synthworld.Task`` objects; ``policy`` is a backend or a
    factory called with each task. Each task runs with seed mix64(config.seed,
    index). A failing task yields a ``BatchError`` in its slot.
    """
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    if mode not in ("episode", "group"):
        raise ValueError(f"unknown mode {mode!r}")

    def one(item):
        i, task = item
        try:
            backend = _policy_for(policy, task)
            cfg = replace(config, seed=mix64(config.seed, i))
            world = task.world()
            if mode == "group":
                return run_group(task.question, world, backend, toolkit, cfg, task_id=task.task_id)
            trajectory = run_episode(task.question, world, backend, toolkit, cfg, task_id=task.task_id)
            trajectory.reward = compute_reward(trajectory, weights=cfg.reward_weights)
            return trajectory
        except Exception as exc:
            log.warning("task %d (%s) failed: %s", i, getattr(task, "task_id", "?"), exc)
            return BatchError(i, getattr(task, "task_id", ""), f"{type(exc).__name__}: {exc}")

    items = list(enumerate(tasks))
    if parallelism == 1:
        return [one(it) for it in items]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(one, items))


def write_trajectories(results: Iterable, path) -> int:
    lines = []
    for r in results:
        if isinstance(r, RolloutGroup):
            lines.extend(t.dumps() for t in r.trajectories)
        elif isinstance(r, Trajectory):
            lines.append(r.dumps())
        else:
            lines.append(json.dumps(r.to_dict(), sort_keys=True))
    Path(path).write_text("".join(l + "\n" for l in lines), encoding="utf-8")
    return len(lines)


def read_trajectories(path) -> list[Trajectory]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        if "steps" in d:
            out.append(Trajectory.from_dict(d))
    return out
