"""Random sampling against best-so-far mutation, averaged over seeds.

The surrogate evaluator stands in for training, so the numbers only show
how each strategy moves through the space, not real accuracy.

Run: python3 demos/strategy_comparison.py
"""

import statistics

from mcuforge.feasibility import ConstraintSet
from mcuforge.orchestrator import RunConfig, make_report, run
from mcuforge.proposal import KNOWN_TASKS

task = KNOWN_TASKS["cifar10"]
budget = ConstraintSet.from_kb(128, 256, task.input_shape)
seeds = range(10)

for strategy in ("random", "mutation"):
    best, screened = [], []
    for seed in seeds:
        report = make_report(run(RunConfig(task, budget, strategy=strategy, max_iterations=15, seed=seed)))
        if report.best is not None:
            best.append(report.best.performance.accuracy_percent)
        screened.append(report.counts["screened_out"])
    print(f"{strategy:9} best acc mean {statistics.mean(best):6.2f}  "
          f"min {min(best):6.2f}  screened out per run {statistics.mean(screened):.1f}")
