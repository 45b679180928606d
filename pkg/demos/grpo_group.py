"""Sample a group of eight rollouts for one question and export the RL batch."""

import sys
import tempfile
from pathlib import Path

from weaver.policy import guessing_policy
from weaver.reward import export_rl_batch
from weaver.rollout import RolloutConfig, run_group
from weaver.synthworld import canonical_world, make_task
from weaver.toolkit import Toolkit


def main() -> None:
    world = canonical_world()
    q = make_task(world, "order_events", 3)
    group = run_group(q, world, guessing_policy(q), Toolkit(), RolloutConfig(seed=11, group_size=8))
    print(q.text)
    for t, r, a in zip(group.trajectories, group.rewards, group.advantages):
        print(f"  answer {t.final_answer} (gold {q.gold})  reward {r:.1f}  advantage {a:+.3f}")
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp()) / "rl_batch.jsonl"
    n = export_rl_batch([group], out)
    print(f"wrote {n} records to {out}")


if __name__ == "__main__":
    main()
