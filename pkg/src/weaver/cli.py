"""Command-line entry point.

Machine-readable output goes to stdout as JSON; logs go to stderr. Exit
status is 0 on success, 1 when any task failed, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import datapipe, harness
from .config import load_config
from .rollout import BatchError, RolloutConfig, read_trajectories, run_batch, write_trajectories
from .reward import RolloutGroup, export_rl_batch
from .synthworld import CANONICAL_SEED, CANONICAL_SPEC, TEMPLATES, SyntheticVideo, Task, generate, make_task, make_task_set
from .toolkit import TOOL_NAMES, Toolkit

log = logging.getLogger("weaver")

COMMANDS = ("rollout", "group", "eval", "ablate", "build-dataset", "gen-world", "inspect", "stats")


class UsageError(Exception):
    pass


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _load_tasks(args, seed: int = 0) -> list[Task]:
    try:
        return _read_tasks(args, seed)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"cannot load tasks: {exc}") from None


def _read_tasks(args, seed: int) -> list[Task]:
    if args.tasks:
        lines = Path(args.tasks).read_text(encoding="utf-8").splitlines()
        return [Task.from_dict(json.loads(l)) for l in lines if l.strip()]
    if args.world:
        world = SyntheticVideo.loads(Path(args.world).read_text(encoding="utf-8"))
        tasks = []
        for i in range(args.n_tasks):
            tpl = TEMPLATES[i % len(TEMPLATES)]
            tasks.append(Task(f"w{i:05d}", make_task(world, tpl, i), world.seed, world.spec, i))
        return tasks
    return make_task_set(args.n_tasks, seed=seed)


def _toolkit(args, cfg: dict) -> Toolkit:
    tools = TOOL_NAMES if args.tools in (None, "all") else tuple(t for t in args.tools.split(",") if t)
    unknown = set(tools) - set(TOOL_NAMES)
    if unknown:
        raise UsageError(f"unknown tools: {', '.join(sorted(unknown))}")
    return Toolkit(frozenset(tools), int(cfg.get("max_tool_frames", 32)), float(cfg.get("count_gap_s", 0.0)))


def _config(args) -> tuple[RolloutConfig, dict]:
    try:
        raw = load_config(args.config) if args.config else {}
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot load config: {exc}") from None
    engine_keys = {"max_tool_frames", "count_gap_s"}
    cfg = RolloutConfig.from_mapping({k: v for k, v in raw.items() if k not in engine_keys})
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg, raw


def _policy(args):
    try:
        return harness.resolve_policy(args.policy)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _n_errors(results) -> int:
    """Tasks that failed outright plus episodes ended by a backend failure."""
    n = 0
    for r in results:
        if isinstance(r, BatchError):
            n += 1
        else:
            trajs = r.trajectories if isinstance(r, RolloutGroup) else [r]
            n += sum(t.stop_reason == "backend_error" for t in trajs)
    return n


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_rollout(args) -> int:
    cfg, raw = _config(args)
    policy, toolkit = _policy(args), _toolkit(args, raw)
    results = run_batch(_load_tasks(args, cfg.seed), policy, toolkit, cfg, args.parallelism)
    out = _out_dir(args) / "trajectories.jsonl"
    n = write_trajectories(results, out)
    errors = _n_errors(results)
    _emit({"trajectories": str(out), "records": n, "errors": errors})
    return 1 if errors else 0


def cmd_group(args) -> int:
    cfg, raw = _config(args)
    policy, toolkit = _policy(args), _toolkit(args, raw)
    results = run_batch(_load_tasks(args, cfg.seed), policy, toolkit, cfg, args.parallelism, mode="group")
    groups = [r for r in results if not isinstance(r, BatchError)]
    out = _out_dir(args)
    write_trajectories(results, out / "trajectories.jsonl")
    n = export_rl_batch(groups, out / "rl_batch.jsonl", cfg.snapshot())
    errors = _n_errors(results)
    _emit({"groups": len(groups), "records": n, "errors": errors, "rl_batch": str(out / "rl_batch.jsonl")})
    return 1 if errors else 0


def cmd_eval(args) -> int:
    cfg, raw = _config(args)
    policy, toolkit = _policy(args), _toolkit(args, raw)
    out = _out_dir(args)
    report, results = harness.run_benchmark(_load_tasks(args, cfg.seed), policy, toolkit, cfg,
                                            out / "trajectories.jsonl", args.parallelism)
    (out / "report.json").write_text(report.dumps(), encoding="utf-8")
    (out / "report.csv").write_text(harness.report_csv(report), encoding="utf-8")
    _emit(report.to_dict())
    return 1 if _n_errors(results) else 0


def cmd_ablate(args) -> int:
    cfg, raw = _config(args)
    policy, toolkit = _policy(args), _toolkit(args, raw)
    rows = harness.run_ablation(_load_tasks(args, cfg.seed), policy, toolkit,
                                harness.ABLATION_ROWS, cfg, args.parallelism)
    table = harness.ablation_csv(rows)
    (_out_dir(args) / "ablation.csv").write_text(table, encoding="utf-8")
    _emit([{"tools": r.label, **r.report.to_dict()} for r in rows])
    return 0


def _item_key(view) -> tuple[str, str]:
    video = next(s.clip.video_id for _, s in view.segments if hasattr(s, "clip"))
    return video, view.question_text


class _PerItem:
    """Routes each request to a per-item backend chosen by (video id, question)."""

    def __init__(self, items, make):
        self._items = items
        self._make = make
        self._cache: dict = {}

    def _lookup(self, view):
        video, qtext = _item_key(view)
        for it in self._items:
            if it.world().meta.video_id == video and qtext.endswith(it.question.render()):
                return it
        raise KeyError(f"no dataset item for video {video}")

    def next_response(self, request) -> str:
        it = self._lookup(request.context)
        if it.item_id not in self._cache:
            self._cache[it.item_id] = self._make(it)
        backend = self._cache[it.item_id]
        return backend(request) if callable(backend) else backend.next_response(request)


def cmd_build_dataset(args) -> int:
    cfg, raw = _config(args)
    if args.items:
        try:
            lines = Path(args.items).read_text(encoding="utf-8").splitlines()
            items = [datapipe.SourceItem.from_dict(json.loads(l)) for l in lines if l.strip()]
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise UsageError(f"cannot load items: {exc}") from None
    else:
        items = [datapipe.SourceItem(t.task_id, t.world_seed, t.spec, t.question)
                 for t in make_task_set(args.n_tasks, seed=cfg.seed)]
    toolkit = _toolkit(args, raw)

    def as_task(it):
        return Task(it.item_id, it.question, it.world_seed, it.spec)

    answer_policy = _policy(args)
    if hasattr(answer_policy, "next_response"):
        direct = answer_policy
    else:
        direct = _PerItem(items, lambda it: answer_policy(as_task(it)))
    oracle = harness.oracle_factory()
    rewriter = _PerItem(items, lambda it: (lambda req, text=datapipe.oracle_rewrite(it, toolkit): text))
    answerer = _PerItem(items, lambda it: oracle(as_task(it)))

    res = datapipe.run_pipeline(items, direct, rewriter, answerer, toolkit, cfg.n_init_frames)
    out = _out_dir(args)
    n_sft = datapipe.export_sft(res.sft, out / "sft.jsonl")
    n_rl = datapipe.export_rl(res.rl_pool, out / "rl_pool.jsonl")
    _emit({
        "items": len(items),
        "discarded": len(res.filtered.discarded),
        "sft": n_sft,
        "rl_pool": n_rl,
        "stats": datapipe.pipeline_stats(res.sft),
    })
    return 0


def cmd_gen_world(args) -> int:
    seed = CANONICAL_SEED if args.seed is None else args.seed
    world = generate(seed, CANONICAL_SPEC)
    text = world.dumps()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    if args.tasks_out:
        tasks = make_task_set(args.n_tasks, seed=seed)
        Path(args.tasks_out).write_text("".join(json.dumps(t.to_dict(), sort_keys=True) + "\n" for t in tasks),
                                        encoding="utf-8")
    return 0


def cmd_inspect(args) -> int:
    for t in read_trajectories(args.file):
        _emit({
            "task_id": t.task_id,
            "template": t.question.template,
            "stop_reason": t.stop_reason,
            "final_answer": t.final_answer,
            "gold": t.question.gold,
            "tools": [s.tool_call.name for s in t.steps if s.tool_result is not None],
            "reward": t.reward.total if t.reward else None,
        })
    return 0


def cmd_stats(args) -> int:
    rows = [json.loads(l) for l in Path(args.file).read_text(encoding="utf-8").splitlines() if l.strip()]
    if rows and rows[0].get("version") == datapipe.SFT_VERSION:
        _emit(datapipe.pipeline_stats(rows))
    else:
        _emit(harness.report_from_file(args.file).to_dict())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="weaver", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, policy=True):
        sp.add_argument("--tasks", help="task JSONL file")
        sp.add_argument("--world", help="world JSON file to draw tasks from")
        sp.add_argument("--n-tasks", type=int, default=24, help="tasks to generate when --tasks is absent")
        if policy:
            sp.add_argument("--policy", default="scripted:oracle",
                            help="scripted:<oracle|fallback|guess|noop> | remote:<url> | replay:<file>")
        sp.add_argument("--tools", default="all", help="comma-separated tool subset, or 'all'")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--parallelism", type=int, default=1)

    for name, fn in (("rollout", cmd_rollout), ("group", cmd_group), ("eval", cmd_eval), ("ablate", cmd_ablate)):
        sp = sub.add_parser(name)
        common(sp)
        sp.set_defaults(fn=fn)

    sp = sub.add_parser("build-dataset")
    common(sp)
    sp.add_argument("--items", help="source item JSONL (QA + text chain-of-thought)")
    sp.set_defaults(fn=cmd_build_dataset, policy="scripted:guess")

    sp = sub.add_parser("gen-world")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--out")
    sp.add_argument("--tasks-out", help="also write a generated task set here")
    sp.add_argument("--n-tasks", type=int, default=24)
    sp.set_defaults(fn=cmd_gen_world)

    for name, fn in (("inspect", cmd_inspect), ("stats", cmd_stats)):
        sp = sub.add_parser(name)
        sp.add_argument("file")
        sp.set_defaults(fn=fn)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        sys.stderr.write(f"weaver: error: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
