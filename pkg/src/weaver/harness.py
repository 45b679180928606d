"""Benchmark runs, tool-usage analytics and tool-subset ablations."""

from __future__ import annotations

import csv
import io
import json
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .policy import (
    PolicyBackend,
    ReplayPolicy,
    RemoteChatPolicy,
    guessing_policy,
    never_answer_policy,
    oracle_policy_for,
)
from .rollout import BatchError, RolloutConfig, Trajectory, read_trajectories, run_batch, write_trajectories
from .toolkit import SPATIAL_TOOLS, TOOL_CODES, TOOL_NAMES, Toolkit


@dataclass
class EvalReport:
    n_tasks: int
    accuracy: float
    mean_tool_calls: float
    per_tool_fraction: dict[str, float] = field(default_factory=dict)
    stop_reasons: dict[str, int] = field(default_factory=dict)
    per_template_accuracy: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"


def report_from_trajectories(trajs: Sequence[Trajectory], n_errors: int = 0) -> EvalReport:
    """Fold trajectories into a report. Errored tasks count as wrong under stop reason ``error``."""
    n = len(trajs) + n_errors
    if n == 0:
        return EvalReport(0, 0.0, 0.0)
    correct = 0
    tool_calls = Counter()
    stops = Counter()
    by_tpl: dict[str, list[int]] = defaultdict(list)
    for t in trajs:
        ok = int(t.reward is not None and t.reward.r_corr == 1)
        correct += ok
        by_tpl[t.question.template or "untyped"].append(ok)
        stops[t.stop_reason] += 1
        for s in t.steps:
            if s.tool_result is not None:
                tool_calls[s.tool_result.tool_name] += 1
    if n_errors:
        stops["error"] += n_errors
    total_calls = sum(tool_calls.values())
    return EvalReport(
        n_tasks=n,
        accuracy=correct / n,
        mean_tool_calls=total_calls / n,
        per_tool_fraction={k: v / total_calls for k, v in sorted(tool_calls.items())} if total_calls else {},
        stop_reasons=dict(sorted(stops.items())),
        per_template_accuracy={k: sum(v) / len(v) for k, v in sorted(by_tpl.items())},
    )


def run_benchmark(tasks: Sequence, policy, toolkit: Toolkit, config: RolloutConfig = RolloutConfig(),
                  out_path=None, parallelism: int = 1) -> tuple[EvalReport, list]:
    """One episode per task; the report is a fold over the written trajectory file."""
    if not tasks:
        raise ValueError("task set is empty")
    results = run_batch(tasks, policy, toolkit, config, parallelism)
    trajs = [r for r in results if isinstance(r, Trajectory)]
    n_err = sum(isinstance(r, BatchError) for r in results)
    if out_path is not None:
        write_trajectories(results, out_path)
    return report_from_trajectories(trajs, n_err), results


def report_from_file(path) -> EvalReport:
    lines = [json.loads(l) for l in Path(path).read_text(encoding="utf-8").splitlines() if l.strip()]
    n_err = sum("steps" not in d for d in lines)
    return report_from_trajectories(read_trajectories(path), n_err)


# -- policies by name -------------------------------------------------------------

def oracle_factory(fallback: bool = False) -> Callable:
    def make(task) -> PolicyBackend:
        meta = task.world().meta
        return oracle_policy_for(task.question, frame_size=(meta.width, meta.height), fallback=fallback)
    return make


def resolve_policy(spec: str):
    """Map ``scripted:<name>``, ``remote:<url>`` or ``replay:<file>`` to a backend or per-task factory."""
    kind, _, arg = spec.partition(":")
    if kind == "scripted":
        if arg == "oracle":
            return oracle_factory()
        if arg == "fallback":
            return oracle_factory(fallback=True)
        if arg == "guess":
            return lambda task: guessing_policy(task.question)
        if arg == "noop":
            return never_answer_policy()
        raise ValueError(f"unknown scripted policy {arg!r}")
    if kind == "remote" and arg:
        return RemoteChatPolicy(arg)
    if kind == "replay" and arg:
        return ReplayPolicy.load(arg)
    raise ValueError(f"bad policy spec {spec!r}")


# -- ablation ------------------------------------------------------------------------

# cumulative rows, one tool added per row
ABLATION_ROWS: tuple[tuple[str, ...], ...] = (
    (),
    ("temporal_grounding",),
    ("temporal_grounding", "frame_selection"),
    ("temporal_grounding", "frame_selection", "trim"),
    ("temporal_grounding", "frame_selection", "trim", "temporal_count"),
    ("temporal_grounding", "frame_selection", "trim", "temporal_count", "spatial_tracking"),
    TOOL_NAMES,
)
NO_TEMPORAL = SPATIAL_TOOLS
NO_SPATIAL_GROUNDING = tuple(n for n in TOOL_NAMES if n != "spatial_grounding")


@dataclass
class AblationRow:
    tools: tuple[str, ...]
    report: EvalReport

    @property
    def label(self) -> str:
        return "+".join(TOOL_CODES[t] for t in TOOL_NAMES if t in self.tools) or "none"


def run_ablation(tasks: Sequence, policy, toolkit: Toolkit, tool_subsets: Sequence[Sequence[str]] = ABLATION_ROWS,
                 config: RolloutConfig = RolloutConfig(), parallelism: int = 1) -> list[AblationRow]:
    rows = []
    for subset in tool_subsets:
        unknown = set(subset) - set(TOOL_NAMES)
        if unknown:
            raise ValueError(f"unknown tools {sorted(unknown)}")
        report, _ = run_benchmark(tasks, policy, toolkit.with_tools(subset), config, parallelism=parallelism)
        rows.append(AblationRow(tuple(t for t in TOOL_NAMES if t in subset), report))
    return rows


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    templates = sorted({k for r in rows for k in r.report.per_template_accuracy})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([TOOL_CODES[t] for t in TOOL_NAMES] + ["accuracy", "mean_tool_calls"] + templates)
    for r in rows:
        w.writerow(["x" if t in r.tools else "" for t in TOOL_NAMES]
                   + [f"{r.report.accuracy:.4f}", f"{r.report.mean_tool_calls:.4f}"]
                   + [f"{r.report.per_template_accuracy.get(k, 0.0):.4f}" for k in templates])
    return buf.getvalue()


def report_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "key", "value"])
    w.writerow(["n_tasks", "", report.n_tasks])
    w.writerow(["accuracy", "", f"{report.accuracy:.6f}"])
    w.writerow(["mean_tool_calls", "", f"{report.mean_tool_calls:.6f}"])
    for k, v in report.per_tool_fraction.items():
        w.writerow(["per_tool_fraction", k, f"{v:.6f}"])
    for k, v in report.stop_reasons.items():
        w.writerow(["stop_reason", k, v])
    for k, v in report.per_template_accuracy.items():
        w.writerow(["template_accuracy", k, f"{v:.6f}"])
    return buf.getvalue()
