"""A short closed-loop search under tight budgets.

Candidates that do not fit are rejected before training and still land in
the repository, so later proposals can see what failed.

Run: python3 demos/feasibility_first_search.py
"""

from mcuforge.feasibility import ConstraintSet, bytes_to_kb
from mcuforge.orchestrator import RunConfig, make_report, run
from mcuforge.proposal import KNOWN_TASKS

task = KNOWN_TASKS["cifar10"]
budget = ConstraintSet.from_kb(64, 96, task.input_shape)

state = run(RunConfig(task, budget, strategy="random", evaluator="surrogate", max_iterations=12, seed=7))

print(f"{'model_id':20} {'status':6} {'acc':>6} {'RAM KB':>8} {'Flash KB':>9}  reasons")
for rec in state.repo:
    m = rec.measurement
    acc = "-" if rec.performance is None else f"{rec.performance.accuracy_percent:.2f}"
    reasons = ", ".join(str(r) for r in m.reasons)
    print(f"{rec.model_id:20} {m.status:6} {acc:>6} {bytes_to_kb(m.ram_bytes):>8} "
          f"{bytes_to_kb(m.flash_bytes):>9}  {reasons}")

report = make_report(state)
print(f"\ncounts: {report.counts}")
print(f"training runs spent: {report.counts['trained']} of {report.counts['proposed']} proposals")
if report.best is not None:
    print(f"best: {report.best.model_id} at {report.best.performance.accuracy_percent:.2f}%")
