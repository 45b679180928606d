import json
from pathlib import Path

import pytest

from weaver.core import ToolCall
from weaver.datapipe import (
    SftRecord,
    SourceItem,
    TrajectoryDraft,
    export_rl,
    export_sft,
    oracle_rewrite,
    pipeline_stats,
    read_sft,
    run_pipeline,
    stage1_filter,
    stage2_rewrite,
    stage3_refine,
    supervision_mask,
)
from weaver.policy import FunctionPolicy, direct_answer_policy, oracle_policy_for
from weaver.protocol import render_answer, render_tool_call
from weaver.synthworld import CANONICAL_SEED, CANONICAL_SPEC, make_task

FIXTURE = Path(__file__).parent / "fixtures" / "items50.jsonl"


def load_items():
    return [SourceItem.from_dict(json.loads(l)) for l in FIXTURE.read_text().splitlines()]


def item_index(items):
    """Map a request back to its item by video id and rendered question."""
    def find(req):
        video = req.context.segments[1][1].clip.video_id
        for i, it in enumerate(items):
            if it.world().meta.video_id == video and req.context.question_text.endswith(it.question.render()):
                return i
        raise KeyError(video)
    return find


def wrong_letter(q):
    return next(l for l in q.option_letters if l != q.gold)


@pytest.fixture
def w1_item(w1):
    q = make_task(w1, "span_of_event", 0, target="phone rings")
    return SourceItem("w1-span", CANONICAL_SEED, CANONICAL_SPEC, q, "The phone rings near the end.")


def test_reader_accepts_qa_cot_layout():
    items = load_items()
    assert len(items) == 50 and items[0].item_id == "item00"
    assert items[0].question.gold == "B" and items[0].textual_cot.startswith("I look")
    with pytest.raises(ValueError):
        SourceItem.from_dict({"problem": "q", "options": [], "solution": ""})


def test_stage1_partition_odd_indexed_aced():
    items = load_items()[:10]
    idx = item_index(items)

    def answer(req):
        i = idx(req)
        q = items[i].question
        return render_answer(q.gold if i % 2 else wrong_letter(q))
    res = stage1_filter(items, FunctionPolicy(answer))
    assert [it.item_id for it in res.kept] == [items[i].item_id for i in range(0, 10, 2)]
    assert [it.item_id for it in res.discarded] == [items[i].item_id for i in range(1, 10, 2)]


def test_stage1_edge_cases():
    items = load_items()[:6]
    res = stage1_filter(items, FunctionPolicy(lambda r: "no idea"))
    assert res.kept == items and not res.discarded
    assert stage1_filter([], direct_answer_policy()).kept == []

    def boom(req):
        raise RuntimeError("offline")
    res = stage1_filter(items, FunctionPolicy(boom))
    assert res.kept == items and all("offline" in d for d in res.diagnostics.values())


def test_stage2_single_grounding_call(w1_item, toolkit):
    text = "Find it. " + render_tool_call(ToolCall("temporal_grounding", {"query": "phone rings"})) + \
        " So it is B. " + render_answer("B")
    draft = stage2_rewrite(w1_item, FunctionPolicy(lambda r: text), toolkit)
    assert len(draft.calls) == len(draft.results) == 1
    assert draft.results[0].status == "ok" and draft.results[0].spans == ((90.0, 95.0),)
    assert not draft.flagged


def test_stage2_sees_construction_prompt(w1_item, toolkit):
    seen = []

    def rewriter(req):
        seen.append(req.context.question_text)
        return render_tool_call(ToolCall("trim", {"start_s": 0, "end_s": 5})) + render_answer("A")
    stage2_rewrite(w1_item, FunctionPolicy(rewriter), toolkit)
    assert "The phone rings near the end." in seen[0] and "temporal_grounding" in seen[0]


def test_stage2_flags(w1_item, toolkit):
    bad = render_tool_call(ToolCall("zoom", {"x": 1})) + render_answer("B")
    assert stage2_rewrite(w1_item, FunctionPolicy(lambda r: bad), toolkit).flagged
    plain = stage2_rewrite(w1_item, FunctionPolicy(lambda r: "It is B. " + render_answer("B")), toolkit)
    assert "rewrite contains no tool calls" in plain.flags
    junk = stage2_rewrite(w1_item, FunctionPolicy(lambda r: "<tool_call>{x</tool_call>" + render_answer("B")),
                          toolkit)
    assert junk.flagged and junk.calls == [None]


def test_stage2_alignment_order(w1_item, toolkit):
    text = (render_tool_call(ToolCall("temporal_grounding", {"query": "dog enters"}))
            + " then " + render_tool_call(ToolCall("trim", {"start_s": 90, "end_s": 95})) + render_answer("B"))
    draft = stage2_rewrite(w1_item, FunctionPolicy(lambda r: text), toolkit)
    assert [r.tool_name for r in draft.results] == ["temporal_grounding", "trim"]
    assert draft.results[0].spans == ((30.0, 33.0),) and draft.results[1].spans == ((90.0, 95.0),)


def _two_call_draft(w1_item, toolkit):
    text = ("First the phone. " + render_tool_call(ToolCall("temporal_grounding", {"query": "phone rings"}))
            + "Now the dog. " + render_tool_call(ToolCall("temporal_count", {"query": "dog enters"}))
            + "The phone span matches. " + render_answer(w1_item.gold))
    return stage2_rewrite(w1_item, FunctionPolicy(lambda r: text), toolkit)


def test_stage3_routes(w1_item, toolkit):
    draft = _two_call_draft(w1_item, toolkit)
    kind, rec = stage3_refine(draft, FunctionPolicy(lambda r: render_answer(w1_item.gold)))
    assert kind == "sft" and isinstance(rec, SftRecord)
    kind, rec = stage3_refine(draft, FunctionPolicy(lambda r: render_answer(wrong_letter(w1_item.question))))
    assert kind == "rl_pool"
    assert set(rec.to_dict()) == {"version", "id", "video", "question", "gold"}
    flagged = TrajectoryDraft(w1_item, [], [], [], "", ["bad"])
    assert stage3_refine(flagged, FunctionPolicy(lambda r: render_answer(w1_item.gold)))[0] == "rl_pool"


def test_stage3_answerer_never_sees_the_answer(w1_item, toolkit):
    draft = _two_call_draft(w1_item, toolkit)
    seen = []

    def answerer(req):
        seen.extend(s.text for _, s in req.context.segments if hasattr(s, "text"))
        return render_answer(w1_item.gold)
    stage3_refine(draft, FunctionPolicy(answerer))
    assert seen and not any("<answer>" in t for t in seen)


def test_mask_walkthrough(w1_item, toolkit):
    _, rec = stage3_refine(_two_call_draft(w1_item, toolkit), FunctionPolicy(lambda r: render_answer(w1_item.gold)))
    roles = [(s["kind"], s["role"]) for s in rec.segments]
    assert roles[:2] == [("text", "question"), ("visual", "context")]
    assert roles[2:] == [("text", "assistant"), ("visual", "tool"), ("text", "assistant"), ("visual", "tool"),
                         ("text", "assistant")]
    assert rec.mask == [0, 0, 1, 0, 1, 0, 1]
    assert rec.mask[2:] == [1, 0, 1, 0, 1]


def test_export_sft(w1_item, toolkit, tmp_path):
    _, rec = stage3_refine(_two_call_draft(w1_item, toolkit), FunctionPolicy(lambda r: render_answer(w1_item.gold)))
    assert export_sft([rec], tmp_path / "a.jsonl") == 1
    (row,) = read_sft(tmp_path / "a.jsonl")
    assert row["version"] == "weaver-sft/1" and row["gold"] == w1_item.gold
    assert len(row["segments"][1]["clip"]["frame_times"]) == 64
    export_sft([rec], tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    bad = SftRecord(rec.record_id, rec.video, rec.question, rec.segments, rec.mask[:-1])
    with pytest.raises(ValueError):
        export_sft([bad], tmp_path / "c.jsonl")
    leaky = SftRecord(rec.record_id, rec.video, rec.question, rec.segments, [1] * len(rec.segments))
    with pytest.raises(ValueError):
        export_sft([leaky], tmp_path / "c.jsonl")


def test_supervision_mask_rule():
    segs = [{"kind": "text", "role": "question"}, {"kind": "visual", "role": "context"},
            {"kind": "text", "role": "assistant"}, {"kind": "text", "role": "tool"}]
    assert supervision_mask(segs) == [0, 0, 1, 0]


def test_pipeline_stats_examples(w1_item):
    call = ToolCall("temporal_grounding", {"query": "x"})
    drafts = [TrajectoryDraft(w1_item, [], [call] * n, [], "") for n in (1, 2, 2)]
    st = pipeline_stats(drafts)
    assert round(st["mean_calls_per_sample"], 2) == 1.67
    assert st["calls_per_sample"] == {"1": 1, "2": 2}
    assert st["tool_frequency"] == {"temporal_grounding": 1.0}
    assert pipeline_stats([]) == {}


def _scripted_backends(items, toolkit):
    idx = item_index(items)

    def direct(req):
        i = idx(req)
        return render_answer(items[i].gold if i % 3 == 0 else wrong_letter(items[i].question))

    def rewriter(req):
        i = idx(req)
        if i % 10 == 1:
            return render_tool_call(ToolCall("zoom", {})) + render_answer(items[i].gold)
        if i % 10 == 5:
            return "No tools needed. " + render_answer(items[i].gold)
        return oracle_rewrite(items[i], toolkit)

    def answerer(req):
        i = idx(req)
        if i % 4 == 2:
            return render_answer(wrong_letter(items[i].question))
        return oracle_policy_for(items[i].question).next_response(req)

    return FunctionPolicy(direct), FunctionPolicy(rewriter), FunctionPolicy(answerer)


def test_pipeline_on_fixture(toolkit, tmp_path):
    items = load_items()
    out = run_pipeline(items, *_scripted_backends(items, toolkit), toolkit)
    kept_ids = [it.item_id for it in out.filtered.kept]
    assert kept_ids == [items[i].item_id for i in range(50) if i % 3 != 0]
    assert len(out.sft) + len(out.rl_pool) == len(kept_ids)
    sft_ids = {r.record_id for r in out.sft}
    expected = {items[i].item_id for i in range(50) if i % 3 and i % 10 not in (1, 5) and i % 4 != 2}
    assert sft_ids == expected
    export_sft(out.sft, tmp_path / "sft.jsonl")
    export_rl(out.rl_pool, tmp_path / "rl.jsonl")
    for row in read_sft(tmp_path / "sft.jsonl"):
        for seg, m in zip(row["segments"], row["mask"]):
            assert not m or (seg["kind"] == "text" and seg["role"] == "assistant")
    for line in (tmp_path / "rl.jsonl").read_text().splitlines():
        row = json.loads(line)
        assert row["version"] == "weaver-rlpool/1" and "steps" not in row and "segments" not in row
