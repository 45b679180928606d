import csv
import io
import json
from collections import Counter

import pytest

from weaver.core import ToolCall
from weaver.harness import (
    ABLATION_ROWS,
    NO_SPATIAL_GROUNDING,
    NO_TEMPORAL,
    ablation_csv,
    oracle_factory,
    report_csv,
    report_from_file,
    resolve_policy,
    run_ablation,
    run_benchmark,
)
from weaver.policy import ReplayPolicy, RemoteChatPolicy, ScriptedPolicy, direct_answer_policy
from weaver.protocol import render_answer, render_tool_call
from weaver.rollout import RolloutConfig
from weaver.synthworld import SPATIAL_TEMPLATES, TEMPORAL_TEMPLATES, make_task_set


def recount(path):
    """Independent fold over a trajectory file, sharing no code with the harness."""
    rows = [json.loads(l) for l in open(path) if l.strip()]
    trajs = [r for r in rows if "steps" in r]
    n = len(rows)
    correct = sum(1 for r in trajs if r["reward"] and r["reward"]["r_corr"] == 1)
    calls = Counter(s["tool_result"]["tool_name"] for r in trajs for s in r["steps"] if s["tool_result"])
    total = sum(calls.values())
    stops = Counter(r["stop_reason"] for r in trajs)
    if n > len(trajs):
        stops["error"] += n - len(trajs)
    by_t = {}
    for r in trajs:
        by_t.setdefault(r["question"]["template"] or "untyped", []).append(r["reward"]["r_corr"])
    return {
        "n_tasks": n,
        "accuracy": correct / n,
        "mean_tool_calls": total / n,
        "per_tool_fraction": {k: v / total for k, v in calls.items()},
        "stop_reasons": dict(stops),
        "per_template_accuracy": {k: sum(v) / len(v) for k, v in by_t.items()},
    }


def test_oracle_benchmark_and_recount(toolkit, tmp_path):
    tasks = make_task_set(60, seed=12)
    report, _ = run_benchmark(tasks, oracle_factory(), toolkit, RolloutConfig(), tmp_path / "t.jsonl")
    assert report.accuracy == 1.0 and report.stop_reasons == {"answered": 60}
    assert report.to_dict() == recount(tmp_path / "t.jsonl")
    assert report_from_file(tmp_path / "t.jsonl") == report
    assert abs(sum(report.per_tool_fraction.values()) - 1) < 1e-12


def test_no_tool_policy_has_zero_calls(toolkit):
    report, _ = run_benchmark(make_task_set(12, seed=1), direct_answer_policy("A"), toolkit)
    assert report.mean_tool_calls == 0 and report.per_tool_fraction == {}
    assert 0 <= report.accuracy <= 1


def test_per_tool_fraction_hand_count(toolkit, tmp_path):
    tg = render_tool_call(ToolCall("temporal_grounding", {"query": "x"}))
    tr = render_tool_call(ToolCall("trim", {"start_s": 0, "end_s": 4}))
    # 4 tasks x (tg, tg, trim) = 8 TG + 4 TR
    pol = ScriptedPolicy((tg, tg, tr, render_answer("A")))
    report, _ = run_benchmark(make_task_set(4, seed=2), pol, toolkit, out_path=tmp_path / "h.jsonl")
    assert report.per_tool_fraction == {"temporal_grounding": 8 / 12, "trim": 4 / 12}
    assert report.mean_tool_calls == 3.0


def test_errors_counted_under_stop_reason(toolkit, tmp_path):
    tasks = make_task_set(5, seed=3)

    def factory(task):
        if task is tasks[2]:
            raise RuntimeError("no backend")
        return oracle_factory()(task)
    report, _ = run_benchmark(tasks, factory, toolkit, out_path=tmp_path / "e.jsonl")
    assert report.stop_reasons == {"answered": 4, "error": 1} and report.accuracy == 0.8
    assert report.to_dict() == recount(tmp_path / "e.jsonl")


def test_empty_task_set_rejected(toolkit):
    with pytest.raises(ValueError):
        run_benchmark([], oracle_factory(), toolkit)


def test_ablation_rows_and_csv(toolkit):
    tasks = make_task_set(24, seed=6)
    rows = run_ablation(tasks, oracle_factory(), toolkit, ABLATION_ROWS)
    assert rows[0].tools == () and rows[0].label == "none"
    assert rows[-1].report.accuracy == 1.0
    table = list(csv.reader(io.StringIO(ablation_csv(rows))))
    assert table[0][:6] == ["TG", "FS", "TC", "TR", "ST", "SG"] and len(table) == 1 + len(ABLATION_ROWS)
    assert table[-1][:6] == ["x"] * 6
    with pytest.raises(ValueError):
        run_ablation(tasks, oracle_factory(), toolkit, [("zoom",)])


def test_ablation_direction(toolkit):
    tasks = make_task_set(120, seed=8, templates=TEMPORAL_TEMPLATES)
    full, cut = run_ablation(tasks, oracle_factory(), toolkit, [ABLATION_ROWS[-1], NO_TEMPORAL])
    assert full.report.accuracy == 1.0
    assert cut.report.accuracy < full.report.accuracy


def test_no_temporal_is_near_chance_per_template(toolkit):
    # at 900 tasks each temporal template sits near 1/4 without temporal tools
    tasks = make_task_set(900, seed=8, templates=TEMPORAL_TEMPLATES)
    (cut,) = run_ablation(tasks, oracle_factory(), toolkit, [NO_TEMPORAL])
    assert set(cut.report.per_template_accuracy) == set(TEMPORAL_TEMPLATES)
    for tpl, acc in cut.report.per_template_accuracy.items():
        assert acc <= 0.35, tpl


def test_fallback_compensates_for_grounding(toolkit):
    tasks = make_task_set(40, seed=9, templates=SPATIAL_TEMPLATES)
    (plain,) = run_ablation(tasks, oracle_factory(), toolkit, [NO_SPATIAL_GROUNDING])
    (fb,) = run_ablation(tasks, oracle_factory(fallback=True), toolkit, [NO_SPATIAL_GROUNDING])
    assert fb.report.accuracy == 1.0
    assert plain.report.per_template_accuracy["object_at_time"] < 1.0


def test_report_csv():
    from weaver.harness import EvalReport
    text = report_csv(EvalReport(2, 0.5, 1.0, {"trim": 1.0}, {"answered": 2}, {"count_event": 0.5}))
    assert text.splitlines()[0] == "metric,key,value"
    assert "per_tool_fraction,trim,1.000000" in text


def test_resolve_policy(tmp_path):
    assert callable(resolve_policy("scripted:oracle"))
    assert isinstance(resolve_policy("remote:http://h/x"), RemoteChatPolicy)
    (tmp_path / "r.json").write_text("{}")
    assert isinstance(resolve_policy(f"replay:{tmp_path / 'r.json'}"), ReplayPolicy)
    for bad in ("scripted:nope", "remote:", "bogus"):
        with pytest.raises(ValueError):
            resolve_policy(bad)
