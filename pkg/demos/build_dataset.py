"""Build SFT and RL-pool files from the bundled 50-item QA fixture."""

import json
import sys
import tempfile
from pathlib import Path

from weaver.datapipe import SourceItem, export_rl, export_sft, oracle_rewrite, pipeline_stats, run_pipeline
from weaver.policy import FunctionPolicy, guess_letter, oracle_policy_for
from weaver.protocol import render_answer
from weaver.toolkit import Toolkit

ITEMS = Path(__file__).resolve().parent.parent / "tests" / "fixtures" / "items50.jsonl"


def main() -> None:
    items = [SourceItem.from_dict(json.loads(l)) for l in ITEMS.read_text().splitlines() if l.strip()]
    toolkit = Toolkit()

    def item_of(request):
        video = request.context.segments[1][1].clip.video_id
        return next(it for it in items if it.world().meta.video_id == video
                    and request.context.question_text.endswith(it.question.render()))

    # the direct answerer guesses, so items it gets right by luck are dropped
    direct = FunctionPolicy(lambda r: render_answer(guess_letter(item_of(r).question)))
    rewriter = FunctionPolicy(lambda r: oracle_rewrite(item_of(r), toolkit))

    # the refining answerer misses on some items; those go to the RL pool instead of SFT
    def answer(request):
        it = item_of(request)
        if it.item_id.endswith(("3", "7")):
            return render_answer(guess_letter(it.question, seed=1))
        return oracle_policy_for(it.question).next_response(request)

    answerer = FunctionPolicy(answer)
    out = run_pipeline(items, direct, rewriter, answerer, toolkit)

    dest = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
    dest.mkdir(parents=True, exist_ok=True)
    export_sft(out.sft, dest / "sft.jsonl")
    export_rl(out.rl_pool, dest / "rl_pool.jsonl")
    print(f"{len(items)} items, {len(out.filtered.discarded)} discarded by the direct answerer")
    print(f"{len(out.sft)} SFT records, {len(out.rl_pool)} RL-pool records in {dest}")
    print(json.dumps(pipeline_stats(out.sft), indent=1))


if __name__ == "__main__":
    main()
