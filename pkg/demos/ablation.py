"""Accuracy as tools are added one at a time, with the oracle policy."""

from weaver.harness import ABLATION_ROWS, NO_SPATIAL_GROUNDING, NO_TEMPORAL, ablation_csv, oracle_factory, run_ablation
from weaver.synthworld import make_task_set
from weaver.toolkit import Toolkit


def main() -> None:
    tasks = make_task_set(240, seed=7)
    toolkit = Toolkit()
    rows = run_ablation(tasks, oracle_factory(), toolkit, ABLATION_ROWS + (NO_TEMPORAL, NO_SPATIAL_GROUNDING))
    print(ablation_csv(rows))
    (fb,) = run_ablation(tasks, oracle_factory(fallback=True), toolkit, [NO_SPATIAL_GROUNDING])
    print(f"without spatial_grounding, fallback policy: accuracy {fb.report.accuracy:.3f}")


if __name__ == "__main__":
    main()
