"""Run one oracle episode per template on the canonical world and print each turn."""

from weaver.harness import oracle_factory
from weaver.rollout import RolloutConfig, run_episode
from weaver.reward import compute_reward
from weaver.synthworld import TEMPLATES, Task, canonical_world, make_task
from weaver.toolkit import Toolkit


def main() -> None:
    world = canonical_world()
    toolkit = Toolkit()
    print(f"world {world.meta.video_id}: {world.meta.duration_s:.0f}s, {len(world.events)} events")
    for tpl in TEMPLATES:
        q = make_task(world, tpl, 0)
        task = Task(tpl, q, world.seed, world.spec)
        traj = run_episode(q, world, oracle_factory()(task), toolkit, RolloutConfig())
        traj.reward = compute_reward(traj)
        print(f"\n[{tpl}] {q.text}")
        for i, s in enumerate(traj.steps):
            if s.tool_result is not None:
                r = s.tool_result
                frames = r.clip.n_frames if r.clip else 0
                print(f"  turn {i}: {s.tool_call.name}({s.tool_call.arguments}) -> {r.status}, {frames} frames")
            else:
                print(f"  turn {i}: answer {s.answer}")
        print(f"  gold {q.gold}, reward {traj.reward.total}, peak prompt {max(traj.stats['prompt_tokens'])} tokens")


if __name__ == "__main__":
    main()
