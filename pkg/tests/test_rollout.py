import json
import statistics

import pytest

from weaver.core import ToolCall
from weaver.policy import FunctionPolicy, ScriptedPolicy, direct_answer_policy, guessing_policy, never_answer_policy
from weaver.protocol import render_answer, render_tool_call
from weaver.reward import RolloutGroup
from weaver.rollout import (
    BatchError,
    GroupFailed,
    RolloutConfig,
    Trajectory,
    mix64,
    read_trajectories,
    run_batch,
    run_episode,
    run_group,
    write_trajectories,
)
from weaver.harness import oracle_factory
from weaver.synthworld import make_task, make_task_set


@pytest.fixture(scope="module")
def count_q():
    from weaver.synthworld import canonical_world
    w = canonical_world()
    return next(q for q in (make_task(w, "count_event", s, "dog enters") for s in range(50))
                if q.options == ("1", "2", "3", "4"))


def test_mix64_known_values():
    # SplitMix64 reference: state 0 -> first output 0xe220a8397b1dcdaf
    assert mix64(0, 0) == 0xE220A8397B1DCDAF
    assert mix64(0, 1) == 0x6E789E6AA1B965F4
    assert mix64(5, 3) != mix64(5, 4) != mix64(6, 3)


def test_oracle_episode_on_w1(w1, toolkit, count_q):
    from weaver.policy import oracle_policy_for
    traj = run_episode(count_q, w1, oracle_policy_for(count_q), toolkit)
    assert traj.stop_reason == "answered" and traj.final_answer == "B"
    assert traj.stats["n_turns"] == 2 and traj.stats["n_tool_calls"] == 1
    assert traj.stats["per_tool"] == {"temporal_count": 1}


def test_never_answering_stops_at_ten(w1, toolkit, count_q):
    traj = run_episode(count_q, w1, never_answer_policy(), toolkit)
    assert traj.stop_reason == "max_turns" and len(traj.steps) == 10
    assert traj.final_answer is None


def test_immediate_answer(w1, toolkit, count_q):
    traj = run_episode(count_q, w1, direct_answer_policy("B"), toolkit)
    assert traj.stop_reason == "answered" and traj.stats["n_tool_calls"] == 0 and len(traj.steps) == 1


def test_text_only_and_failed_calls_continue(w1, toolkit, count_q):
    plan = ("just thinking", render_tool_call(ToolCall("zoom", {"x": 1})), "<tool_call>{oops</tool_call>",
            render_answer("A"))
    traj = run_episode(count_q, w1, ScriptedPolicy(plan), toolkit)
    assert [s.tool_result.status if s.tool_result else None for s in traj.steps] == [None, "invalid_args", None, None]
    assert "unparseable payload" in traj.steps[2].protocol_flags
    assert traj.stats["n_tool_calls"] == 1


def test_context_overflow_is_a_stop_reason(w1, toolkit, count_q):
    cfg = RolloutConfig(max_prompt_tokens=1000)
    traj = run_episode(count_q, w1, direct_answer_policy(), toolkit, cfg)
    assert traj.stop_reason == "context_overflow" and traj.steps == [] and traj.error


def test_backend_exception_is_a_stop_reason(w1, toolkit, count_q):
    def boom(req):
        raise RuntimeError("down")
    traj = run_episode(count_q, w1, FunctionPolicy(boom), toolkit)
    assert traj.stop_reason == "backend_error" and "down" in traj.error


def test_long_response_is_truncated(w1, toolkit, count_q):
    cfg = RolloutConfig(max_response_tokens=10)
    traj = run_episode(count_q, w1, ScriptedPolicy(("x" * 100 + render_answer("B"),)), toolkit, cfg)
    assert len(traj.steps[0].response_text) == 40
    # the cut removes the answer block, so the episode runs out of turns
    assert traj.stop_reason == "max_turns"
    assert "response truncated to max_response_tokens" in traj.steps[0].protocol_flags


def test_prompts_stay_within_budget_and_grow(w1, toolkit, count_q):
    # a chatty policy calling wide trims forces eviction in a small budget
    wide = render_tool_call(ToolCall("trim", {"start_s": 0, "end_s": 120}))
    cfg = RolloutConfig(max_prompt_tokens=6000)
    traj = run_episode(count_q, w1, ScriptedPolicy((wide,), require_answer=False), toolkit, cfg)
    toks = traj.stats["prompt_tokens"]
    assert len(toks) == 10 and max(toks) <= 6000
    assert toks[:3] == sorted(toks[:3])


def test_trajectory_roundtrip(w1, toolkit):
    from weaver.policy import oracle_policy_for
    q = make_task(w1, "order_events", 0)
    traj = run_episode(q, w1, oracle_policy_for(q), toolkit)
    d = json.loads(traj.dumps())
    assert d["version"] == "weaver-traj/1"
    clip = d["steps"][0]["tool_result"]["clip"]
    assert set(clip) == {"video_id", "span", "frame_times", "boxes"}
    assert Trajectory.from_dict(d).dumps() == traj.dumps()
    assert list(d) == sorted(d)


def test_group_of_eight_deterministic(w1, toolkit, count_q):
    g = run_group(count_q, w1, direct_answer_policy("B"), toolkit, RolloutConfig())
    assert len(g.trajectories) == 8
    assert len({t.dumps().replace(str(t.seed), "") for t in g.trajectories}) == 1
    assert g.advantages == [0.0] * 8


def test_group_seeds_are_mixed(w1, toolkit, count_q):
    g = run_group(count_q, w1, direct_answer_policy("B"), toolkit, RolloutConfig(seed=9))
    assert [t.seed for t in g.trajectories] == [mix64(9, i) for i in range(8)]


def test_mixed_group_advantage_signs(w1, toolkit, count_q):
    g = run_group(count_q, w1, guessing_policy(count_q), toolkit, RolloutConfig(seed=1))
    rewards = [t.reward.total for t in g.trajectories]
    assert len(set(rewards)) > 1
    mean = statistics.fmean(rewards)
    std = statistics.pstdev(rewards)
    for r, a in zip(rewards, g.advantages):
        assert a == pytest.approx((r - mean) / (std + 1e-6), abs=1e-12)
        assert (a > 0) == (r > mean)


def test_group_fails_only_if_all_fail(w1, toolkit, count_q):
    def flaky(req):
        if req.sampling.seed % 2:
            raise RuntimeError("x")
        return render_answer("B")
    g = run_group(count_q, w1, FunctionPolicy(flaky), toolkit, RolloutConfig())
    assert any(t.stop_reason == "backend_error" for t in g.trajectories)
    with pytest.raises(GroupFailed):
        run_group(count_q, w1, FunctionPolicy(lambda r: 1 / 0), toolkit, RolloutConfig())
    with pytest.raises(ValueError):
        run_group(count_q, w1, direct_answer_policy(), toolkit, RolloutConfig(group_size=1))


def _bytes(results, path):
    write_trajectories(results, path)
    return path.read_bytes()


def test_batch_parallelism_invariance(toolkit, tmp_path):
    tasks = make_task_set(100, seed=4)
    pol = lambda t: guessing_policy(t.question) if t.rng_seed % 3 == 0 else oracle_factory()(t)
    a = run_batch(tasks, pol, toolkit, RolloutConfig(seed=2), parallelism=1)
    b = run_batch(tasks, pol, toolkit, RolloutConfig(seed=2), parallelism=8)
    assert _bytes(a, tmp_path / "a.jsonl") == _bytes(b, tmp_path / "b.jsonl")


def test_batch_empty_and_isolation(toolkit):
    assert run_batch([], direct_answer_policy(), toolkit) == []
    tasks = make_task_set(10, seed=1)
    bad = tasks[4]

    def factory(task):
        if task is bad:
            raise RuntimeError("broken task")
        return oracle_factory()(task)
    out = run_batch(tasks, factory, toolkit, parallelism=3)
    assert sum(isinstance(r, Trajectory) for r in out) == 9
    assert isinstance(out[4], BatchError) and out[4].index == 4 and "broken task" in out[4].error


def test_batch_group_mode(toolkit, tmp_path):
    out = run_batch(make_task_set(3, seed=1), oracle_factory(), toolkit, RolloutConfig(group_size=4), mode="group")
    assert all(isinstance(g, RolloutGroup) and len(g.trajectories) == 4 for g in out)
    assert write_trajectories(out, tmp_path / "g.jsonl") == 12
    assert len(read_trajectories(tmp_path / "g.jsonl")) == 12


def test_stats_recount(toolkit):
    for r in run_batch(make_task_set(30, seed=3), oracle_factory(), toolkit):
        calls = [s for s in r.steps if s.tool_result is not None]
        assert r.stats["n_tool_calls"] == len(calls)
        assert sum(r.stats["per_tool"].values()) == len(calls)
        assert r.stats["n_turns"] == len(r.steps) <= 10
        assert (r.stop_reason == "answered") == (r.final_answer is not None)
        if r.stop_reason == "answered":
            assert r.steps[-1].answer is not None


def test_config_from_mapping():
    cfg = RolloutConfig.from_mapping({"max_num_turns": 4, "lambda_tool": 0.3, "learning_rate": 1e-6})
    assert cfg.max_turns == 4 and cfg.reward_weights == (0.7, 0.2, 0.3)
    assert cfg.snapshot()["learning_rate"] == 1e-6
    with pytest.raises(ValueError):
        RolloutConfig(max_turns=0)
