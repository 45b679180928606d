"""Verifiable rewards and group-relative advantages."""

from __future__ import annotations

import json
from decimal import Decimal
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np

from .config import TRAINING_DEFAULTS
from .protocol import normalize_gold, parse_response

if TYPE_CHECKING:
    from .rollout import Trajectory

DEFAULT_WEIGHTS = (0.7, 0.2, 0.1)
RL_VERSION = "weaver-rl/1"


@dataclass(frozen=True)
class RewardBreakdown:
    r_corr: int
    r_format: int
    r_tool: int
    weights: tuple[float, float, float] = DEFAULT_WEIGHTS
    total: float = 0.0

    def to_dict(self) -> dict:
        return {
            "r_corr": self.r_corr,
            "r_format": self.r_format,
            "r_tool": self.r_tool,
            "weights": list(self.weights),
            "total": self.total,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RewardBreakdown":
        return cls(d["r_corr"], d["r_format"], d["r_tool"], tuple(d["weights"]), d["total"])


def combine(r_corr: int, r_format: int, tool_called: bool, weights=DEFAULT_WEIGHTS) -> RewardBreakdown:
    """Weighted total; the tool reward only counts alongside a correct answer."""
    r_tool = int(bool(tool_called) and r_corr == 1)
    w1, w2, w3 = weights
    # summed in decimal so 0.7 + 0.2 is exactly 0.9, not 0.8999999999999999
    total = float(sum(Decimal(repr(float(w))) * r for w, r in ((w1, r_corr), (w2, r_format), (w3, r_tool))))
    return RewardBreakdown(int(r_corr), int(r_format), r_tool, tuple(weights), total)


def compute_reward(traj: "Trajectory", gold: Optional[str] = None, weights=DEFAULT_WEIGHTS) -> RewardBreakdown:
    gold = normalize_gold(traj.question) if gold is None else gold
    parsed = [parse_response(s.response_text) for s in traj.steps]
    r_format = int(any(p.format_ok for p in parsed))
    tool_called = any(p.tool_block_ok for p in parsed)
    r_corr = int(traj.final_answer is not None and traj.final_answer == gold)
    # correctness is read from a parsed <answer> block, so it implies format
    assert not (r_corr and not r_format), "correct answer without an answer block"
    return combine(r_corr, r_format, tool_called, weights)


def group_advantages(rewards: Sequence[float], eps: float = 1e-6) -> list[float]:
    """(r - mean) / (population std + eps); exact zeros when all rewards are equal."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("group advantages need at least two rewards")
    if np.all(r == r[0]):
        return [0.0] * r.size
    return ((r - r.mean()) / (r.std() + eps)).tolist()


@dataclass
class RolloutGroup:
    trajectories: list
    rewards: list[float] = field(default_factory=list)
    advantages: list[float] = field(default_factory=list)

    def validate(self) -> "RolloutGroup":
        g = len(self.trajectories)
        if not (len(self.rewards) == len(self.advantages) == g):
            raise ValueError("rewards/advantages must match the group size")
        return self

    @property
    def rewarded(self) -> bool:
        return bool(self.trajectories) and len(self.rewards) == len(self.trajectories) and all(
            t.reward is not None for t in self.trajectories)


def score_group(trajectories: list, weights=DEFAULT_WEIGHTS, eps: float = 1e-6) -> RolloutGroup:
    rewards = []
    for t in trajectories:
        t.reward = compute_reward(t, weights=weights)
        rewards.append(t.reward.total)
    return RolloutGroup(list(trajectories), rewards, group_advantages(rewards, eps)).validate()


def export_rl_batch(groups: Sequence[RolloutGroup], path, config: Optional[dict] = None) -> int:
    """One JSONL record per trajectory: reference, reward, advantage, config snapshot."""
    snapshot = dict(TRAINING_DEFAULTS)
    snapshot.update(config or {})
    lines = []
    for gi, g in enumerate(groups):
        if not g.rewarded:
            raise ValueError(f"group {gi} has not been rewarded")
        g.validate()
        for mi, (t, adv) in enumerate(zip(g.trajectories, g.advantages)):
            rec = {
                "version": RL_VERSION,
                "weights": list(t.reward.weights),
                "trajectory_ref": {"group": gi, "member": mi, "traj_id": t.traj_id(),
                                   "video_id": t.video_id},
                "reward": t.reward.to_dict(),
                "advantage": adv,
                "config": snapshot,
            }
            lines.append(json.dumps(rec, sort_keys=True))
    Path(path).write_text("".join(l + "\n" for l in lines), encoding="utf-8")
    return len(lines)
