"""How much context each task carries when agents share one transcript.

In isolated mode a task sees its own assignment and turns.  In shared mode
it also sees everything every earlier task produced.

Run: python3 demos/context_growth.py
"""

from mcuforge.feasibility import ConstraintSet
from mcuforge.orchestrator import RunConfig, account_context, run
from mcuforge.proposal import KNOWN_TASKS

task = KNOWN_TASKS["cifar10"]
budget = ConstraintSet.from_kb(256, 512, task.input_shape)

runs = {mode: run(RunConfig(task, budget, max_iterations=5, seed=42, mode=mode))
        for mode in ("isolated", "shared")}
ctx = {mode: account_context(state) for mode, state in runs.items()}

print(f"{'task':32} {'isolated':>9} {'shared':>9}")
for t, iso, shared in zip(runs["isolated"].tasks, ctx["isolated"]["per_task"], ctx["shared"]["per_task"]):
    print(f"{t.assignment.task_id:32} {iso:>9} {shared:>9}")
print(f"{'total':32} {ctx['isolated']['total']:>9} {ctx['shared']['total']:>9}")
print(f"supervisor summaries: {ctx['isolated']['supervisor']} B")
