"""Tool-augmented interleaved video reasoning: rollouts, rewards, datasets, evaluation."""

from .core import Clip, ContextView, HistoryState, Question, StepRecord, ToolCall, ToolResult, VideoMeta
from .protocol import parse_response, render_tool_call, render_tool_result
from .reward import RewardBreakdown, RolloutGroup, compute_reward, group_advantages
from .rollout import RolloutConfig, Trajectory, run_batch, run_episode, run_group
from .synthworld import SyntheticVideo, Task, canonical_world, generate, make_task, make_task_set
from .toolkit import TOOL_NAMES, Toolkit

__version__ = "0.1.0"

__all__ = [
    "Clip",
    "ContextView",
    "HistoryState",
    "Question",
    "StepRecord",
    "ToolCall",
    "ToolResult",
    "VideoMeta",
    "parse_response",
    "render_tool_call",
    "render_tool_result",
    "RewardBreakdown",
    "RolloutGroup",
    "compute_reward",
    "group_advantages",
    "RolloutConfig",
    "Trajectory",
    "run_batch",
    "run_episode",
    "run_group",
    "SyntheticVideo",
    "Task",
    "canonical_world",
    "generate",
    "make_task",
    "make_task_set",
    "TOOL_NAMES",
    "Toolkit",
]
