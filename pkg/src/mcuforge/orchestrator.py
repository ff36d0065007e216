"""Supervisor loop: propose -> screen -> train -> evaluate -> decide.

The supervisor is a single-threaded state machine.  Each stage is a task
handed to one of three agents as a :class:`TaskAssignment`; the agent
answers with a :class:`TaskSummary`.  Agents keep task-local turns only and
never see each other's raw turns, so the supervisor's view of the run is the
sequence of assignments and summaries.

Context accounting has two modes.  ``isolated`` charges each task its own
assignment plus its own turns.  ``shared`` charges each task the whole run
transcript so far, which is what a shared message history would carry.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable

from .arch_spec import ArchitectureSpec, canonicalize, layer_digest, spec_id, to_document
from .evaluator import Evaluator, ExternalTrainer, SurrogateEvaluator, TrainConfig, TrainerConfig
from .feasibility import (
    AdapterConfig,
    BackendProfile,
    ConstraintSet,
    FailReason,
    Measurement,
    bytes_to_kb,
    measure,
)
from .proposal import (
    LlmConfig,
    LlmStrategy,
    MutationStrategy,
    ProposalContext,
    ProposalStrategy,
    RandomStrategy,
    SamplerConfig,
    TaskDescriptor,
)
from .repository import EvalResult, Record, Repository

log = logging.getLogger(__name__)


class AgentRole(str, Enum):
    PROPOSAL = "Proposal"
    TRAINING = "Training"
    EVAL_CONVERSION = "EvalConversion"


class Phase(str, Enum):
    PROPOSE = "Propose"
    SCREEN = "Screen"
    TRAIN = "Train"
    EVALUATE = "Evaluate"
    DECIDE = "Decide"
    DONE = "Done"


class Termination(str, Enum):
    BUDGET_EXHAUSTED = "BudgetExhausted"
    TARGET_MET = "TargetMet"
    ABORTED_ON_FAILURES = "AbortedOnFailures"


class ConfigError(ValueError):
    pass


class TerminalState(RuntimeError):
    pass


class DuplicateCandidate(RuntimeError):
    pass


def _dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _nbytes(text: str) -> int:
    return len(text.encode("utf-8"))


@dataclass
class TaskAssignment:
    task_id: str
    role: AgentRole
    payload: dict
    # payload field -> where it came from: "user", "supervisor",
    # "repository" or "summary:<role>".  Never an agent's raw turns.
    provenance: dict[str, str]
    inputs: tuple = field(default=(), repr=False, compare=False)

    def to_json(self) -> dict:
        return {"task_id": self.task_id, "role": self.role.value, "payload": self.payload}

    def serialized(self) -> str:
        return _dumps(self.to_json())

    def digest(self) -> str:
        return hashlib.sha256(_dumps(self.payload).encode()).hexdigest()[:16]


@dataclass
class TaskSummary:
    task_id: str
    role: AgentRole
    status: str  # "ok" | "failed"
    key_results: dict
    error: str | None = None
    context_bytes: int = 0

    def __post_init__(self):
        if self.status == "failed" and not self.error:
            raise ValueError("a failed summary must carry an error")

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "role": self.role.value,
            "status": self.status,
            "key_results": self.key_results,
            "error": self.error,
            "context_bytes": self.context_bytes,
        }

    def serialized(self) -> str:
        return _dumps(self.to_json())


# ---------------------------------------------------------------------------
# agents


class ProposalAgent:
    role = AgentRole.PROPOSAL

    def __init__(self, strategy: ProposalStrategy):
        self.strategy = strategy

    def run(self, task: TaskAssignment, repo: Repository):
        context, seed = task.inputs
        spec = self.strategy.propose(context, seed)
        model_id = spec_id(spec)
        if model_id in repo:
            raise DuplicateCandidate(f"{model_id} was already explored")
        return spec, {"model_id": model_id, "layers": layer_digest(spec)}

    def turns(self) -> list[str]:
        return list(getattr(self.strategy, "last_turns", []))


class TrainingAgent:
    role = AgentRole.TRAINING

    def __init__(self, evaluator: Evaluator):
        self.evaluator = evaluator
        self._turns: list[str] = []

    def run(self, task: TaskAssignment, repo: Repository):
        spec, config = task.inputs
        self._turns = []
        result = self.evaluator.evaluate(spec, config)
        progress = getattr(self.evaluator, "last_progress", None) or []
        self._turns = [_dumps(p) for p in progress]
        return result, {
            "model_id": task.payload["model_id"],
            "accuracy": result.accuracy_percent,
            "converged": result.converged,
            "epochs_run": result.epochs_run,
            "checkpoint_path": result.checkpoint_path,
            "train_config_digest": config.digest(),
        }

    def turns(self) -> list[str]:
        return list(self._turns)


class EvalConversionAgent:
    role = AgentRole.EVAL_CONVERSION

    def __init__(self, adapter: AdapterConfig | None = None, profile: BackendProfile | None = None):
        self.adapter = adapter
        self.profile = profile
        self._turns: list[str] = []

    def run(self, task: TaskAssignment, repo: Repository):
        spec, constraints = task.inputs
        self._turns = []
        m = measure(spec, constraints, self.adapter, self.profile)
        self._turns = [_dumps(m.to_dict())]
        return m, {"model_id": task.payload["model_id"], **m.to_dict()}

    def turns(self) -> list[str]:
        return list(self._turns)


# ---------------------------------------------------------------------------
# configuration and state


@dataclass
class RunConfig:
    task: TaskDescriptor
    constraints: ConstraintSet
    strategy: str | ProposalStrategy = "random"
    evaluator: str | Evaluator = "surrogate"
    max_iterations: int = 10
    retry_limit: int = 2
    max_consecutive_failures: int = 3
    target_accuracy: float | None = None
    mode: str = "isolated"
    seed: int = 0
    k_best: int = 5
    k_fail: int = 3
    max_epochs: int = 30
    patience: int = 5
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    llm: LlmConfig = field(default_factory=LlmConfig)
    trainer: TrainerConfig | None = None
    backend: AdapterConfig | None = None
    profile: BackendProfile | None = None
    repo_path: str | None = None
    log_path: str | None = None

    def validate(self) -> None:
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if self.retry_limit < 0 or self.max_consecutive_failures < 1:
            raise ConfigError("retry_limit must be >= 0 and max_consecutive_failures >= 1")
        if self.mode not in ("isolated", "shared"):
            raise ConfigError(f"mode must be 'isolated' or 'shared', got {self.mode!r}")
        if self.constraints.input_shape != self.task.input_shape:
            raise ConfigError("constraint input shape differs from the task input shape")
        if self.target_accuracy is not None and not 0 <= self.target_accuracy <= 100:
            raise ConfigError("target accuracy must be within [0, 100]")
        if self.evaluator == "external" and self.trainer is None:
            raise ConfigError("the external evaluator needs a trainer command")
        if isinstance(self.strategy, str) and self.strategy not in ("random", "mutation", "llm"):
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if isinstance(self.evaluator, str) and self.evaluator not in ("surrogate", "external"):
            raise ConfigError(f"unknown evaluator {self.evaluator!r}")

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.task.dataset, self.task.input_shape, self.task.num_classes,
                           self.max_epochs, self.patience, self.seed)


def make_strategy(config: RunConfig) -> ProposalStrategy:
    if not isinstance(config.strategy, str):
        return config.strategy
    if config.strategy == "random":
        return RandomStrategy(config.sampler)
    if config.strategy == "mutation":
        return MutationStrategy(config.sampler)
    return LlmStrategy(config.llm)


def make_evaluator(config: RunConfig) -> Evaluator:
    if not isinstance(config.evaluator, str):
        return config.evaluator
    if config.evaluator == "surrogate":
        return SurrogateEvaluator()
    return ExternalTrainer(config.trainer)


def derive_seed(master: int, iteration: int, attempt: int) -> int:
    """Counter-based sub-seed; retries never shift later iterations."""
    blob = f"{master}:{iteration}:{attempt}".encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "big")


def _describe(obj) -> dict:
    describe = getattr(obj, "describe", None)
    if callable(describe):
        return describe()
    return {"name": getattr(obj, "name", type(obj).__name__)}


@dataclass
class TaskRecord:
    assignment: TaskAssignment
    summary: TaskSummary
    turn_bytes: int


@dataclass
class RunState:
    config: RunConfig
    repo: Repository
    proposal: ProposalAgent
    training: TrainingAgent
    evaluation: EvalConversionAgent
    train_config: TrainConfig
    phase: Phase = Phase.PROPOSE
    iteration: int = 0
    spec: ArchitectureSpec | None = None
    screen: Measurement | None = None
    result: EvalResult | None = None
    last_record: Record | None = None
    iteration_failed: bool = False
    consecutive_failures: int = 0
    termination: Termination | None = None
    counts: dict = field(default_factory=lambda: dict.fromkeys(
        ("proposed", "screened_out", "trained", "proposal_failures",
         "failed_tasks", "failed_iterations"), 0))
    tasks: list[TaskRecord] = field(default_factory=list)
    transcript_bytes: int = 0
    supervisor_bytes: int = 0

    @property
    def done(self) -> bool:
        return self.phase is Phase.DONE


def initial_state(config: RunConfig) -> RunState:
    config.validate()
    repo = Repository(path=config.repo_path)
    return RunState(
        config=config,
        repo=repo,
        proposal=ProposalAgent(make_strategy(config)),
        training=TrainingAgent(make_evaluator(config)),
        evaluation=EvalConversionAgent(config.backend, config.profile),
        train_config=config.train_config(),
    )


# ---------------------------------------------------------------------------
# task execution


def _run_task(state: RunState, agent, make_task: Callable[[int], TaskAssignment]):
    """Run one task with up to ``retry_limit`` retries.

    Returns ``(value, None)`` on success or ``(None, last_error)``.
    """
    last_error = None
    for attempt in range(state.config.retry_limit + 1):
        task = make_task(attempt)
        try:
            value, key_results = agent.run(task, state.repo)
            status, error = "ok", None
        except Exception as exc:  # any agent failure becomes a failed summary
            value, key_results = None, {}
            status, error = "failed", f"{type(exc).__name__}: {exc}"
        turns = agent.turns()
        _account(state, task, turns, TaskSummary(task.task_id, task.role, status, key_results, error))
        if status == "ok":
            return value, None
        state.counts["failed_tasks"] += 1
        last_error = error
        log.info("task %s failed: %s", task.task_id, error)
    return None, last_error


def _account(state: RunState, task: TaskAssignment, turns: list[str], summary: TaskSummary) -> None:
    assignment_bytes = _nbytes(task.serialized())
    turn_bytes = sum(_nbytes(t) for t in turns)
    own = assignment_bytes + turn_bytes
    if state.config.mode == "isolated":
        summary.context_bytes = own
    else:
        summary.context_bytes = state.transcript_bytes + own
    summary_bytes = _nbytes(summary.serialized())
    state.transcript_bytes += own + summary_bytes
    state.supervisor_bytes += summary_bytes
    state.tasks.append(TaskRecord(task, summary, turn_bytes))


def _task_id(state: RunState, role: AgentRole, attempt: int, stage: str = "") -> str:
    suffix = f"-{stage}" if stage else ""
    return f"it{state.iteration:03d}-{role.value}{suffix}-a{attempt}"


def _spec_payload(state: RunState) -> tuple[dict, dict]:
    payload = {"model_id": spec_id(state.spec), "architecture_spec": to_document(state.spec)}
    provenance = {"model_id": "summary:Proposal", "architecture_spec": "summary:Proposal"}
    return payload, provenance


# ---------------------------------------------------------------------------
# transitions


def _end_iteration(state: RunState, failed: bool) -> None:
    if failed:
        state.counts["failed_iterations"] += 1
        state.consecutive_failures += 1
    else:
        state.consecutive_failures = 0
    state.spec = state.screen = state.result = None
    state.iteration_failed = False
    if state.consecutive_failures >= state.config.max_consecutive_failures:
        _finish(state, Termination.ABORTED_ON_FAILURES)
    elif state.iteration >= state.config.max_iterations:
        _finish(state, Termination.BUDGET_EXHAUSTED)
    else:
        state.phase = Phase.PROPOSE


def _finish(state: RunState, reason: Termination) -> None:
    state.phase = Phase.DONE
    state.termination = reason
    if state.config.repo_path:
        state.repo.save(state.config.repo_path)
    if state.config.log_path:
        write_run_log(state, state.config.log_path)


def _append(state: RunState, record: Record) -> None:
    state.repo.append(record)
    state.last_record = record
    if state.config.repo_path:
        state.repo.save(state.config.repo_path)


def _propose(state: RunState) -> None:
    cfg = state.config
    state.iteration += 1
    state.counts["proposed"] += 1
    summary = state.repo.select_context(cfg.k_best, cfg.k_fail)
    parent = state.repo.best_feasible()
    context = ProposalContext(cfg.task, cfg.constraints, summary, parent=parent)

    def make_task(attempt):
        seed = derive_seed(cfg.seed, state.iteration, attempt)
        payload = {
            "task": cfg.task.to_json(),
            "constraints": cfg.constraints.to_dict(),
            "context_summary": summary.to_dict(),
            "parent": None if parent is None else {
                "model_id": parent.model_id, "architecture_spec": to_document(parent.spec)},
            "seed": seed,
        }
        provenance = {"task": "user", "constraints": "user", "context_summary": "repository",
                      "parent": "repository", "seed": "supervisor"}
        return TaskAssignment(_task_id(state, AgentRole.PROPOSAL, attempt), AgentRole.PROPOSAL,
                              payload, provenance, (context, seed))

    spec, error = _run_task(state, state.proposal, make_task)
    if spec is None:
        state.counts["proposal_failures"] += 1
        _end_iteration(state, failed=True)
        return
    state.spec = spec
    state.phase = Phase.SCREEN


def _evaluation_task(state: RunState, stage: str):
    def make_task(attempt):
        payload, provenance = _spec_payload(state)
        payload["constraints"] = state.config.constraints.to_dict()
        payload["stage"] = stage
        provenance.update(constraints="user", stage="supervisor")
        return TaskAssignment(_task_id(state, AgentRole.EVAL_CONVERSION, attempt, stage),
                              AgentRole.EVAL_CONVERSION, payload, provenance,
                              (state.spec, state.config.constraints))
    return make_task


def _screen(state: RunState) -> None:
    measurement, error = _run_task(state, state.evaluation, _evaluation_task(state, "screen"))
    if measurement is None:
        measurement = Measurement(None, None, (FailReason("BackendError", error),))
    if not measurement.passed:
        _append(state, Record(spec_id(state.spec), state.spec, None, measurement))
        state.counts["screened_out"] += 1
        _end_iteration(state, failed=error is not None)
        return
    state.screen = measurement
    state.phase = Phase.TRAIN


def _train(state: RunState) -> None:
    state.counts["trained"] += 1

    def make_task(attempt):
        payload, provenance = _spec_payload(state)
        payload["train_config"] = state.train_config.to_json()
        provenance["train_config"] = "user"
        return TaskAssignment(_task_id(state, AgentRole.TRAINING, attempt), AgentRole.TRAINING,
                              payload, provenance, (state.spec, state.train_config))

    result, error = _run_task(state, state.training, make_task)
    if result is None:
        _append(state, Record(spec_id(state.spec), state.spec, None, state.screen))
        _end_iteration(state, failed=True)
        return
    state.result = result
    state.phase = Phase.EVALUATE


def _evaluate(state: RunState) -> None:
    measurement, error = _run_task(state, state.evaluation, _evaluation_task(state, "final"))
    if measurement is None:
        measurement = state.screen
        state.iteration_failed = True
    _append(state, Record(spec_id(state.spec), state.spec, state.result, measurement))
    state.phase = Phase.DECIDE


def _decide(state: RunState) -> None:
    target = state.config.target_accuracy
    rec = state.last_record
    if (target is not None and rec is not None and rec.feasible
            and rec.performance.accuracy_percent >= target):
        state.consecutive_failures = 0
        _finish(state, Termination.TARGET_MET)
        return
    _end_iteration(state, failed=state.iteration_failed)


_TRANSITIONS = {
    Phase.PROPOSE: _propose,
    Phase.SCREEN: _screen,
    Phase.TRAIN: _train,
    Phase.EVALUATE: _evaluate,
    Phase.DECIDE: _decide,
}


def step(state: RunState) -> RunState:
    """Advance ``state`` by exactly one phase (mutates and returns it)."""
    if state.done:
        raise TerminalState("run already finished")
    _TRANSITIONS[state.phase](state)
    return state


# ---------------------------------------------------------------------------
# reporting


@dataclass
class RunReport:
    best: Record | None
    repo_path: str | None
    iterations: int
    counts: dict
    context: dict
    termination: Termination
    mode: str
    train_config_digest: str

    def to_json(self) -> dict:
        return {
            "best": None if self.best is None else self.best.model_id,
            "repo_path": self.repo_path,
            "iterations": self.iterations,
            "counts": self.counts,
            "context": self.context,
            "termination_reason": self.termination.value,
            "mode": self.mode,
            "train_config_digest": self.train_config_digest,
        }


def account_context(state: RunState) -> dict:
    """Per-role and total context bytes charged so far."""
    per_role = {role.value: 0 for role in AgentRole}
    per_task = []
    for t in state.tasks:
        per_role[t.summary.role.value] += t.summary.context_bytes
        per_task.append(t.summary.context_bytes)
    return {
        "mode": state.config.mode,
        "per_role": per_role,
        "per_task": per_task,
        "total": sum(per_task),
        "supervisor": state.supervisor_bytes,
    }


def make_report(state: RunState) -> RunReport:
    ctx = account_context(state)
    return RunReport(
        best=state.repo.best_feasible(),
        repo_path=state.config.repo_path,
        iterations=state.iteration,
        counts=dict(state.counts),
        context={k: v for k, v in ctx.items() if k != "per_task"},
        termination=state.termination,
        mode=state.config.mode,
        train_config_digest=state.train_config.digest(),
    )


def run(config: RunConfig) -> RunState:
    state = initial_state(config)
    while not state.done:
        step(state)
    return state


def run_customization(config: RunConfig) -> RunReport:
    return make_report(run(config))


def training_tasks(state: RunState) -> list[TaskRecord]:
    return [t for t in state.tasks if t.assignment.role is AgentRole.TRAINING]


def run_log_lines(state: RunState) -> list[str]:
    lines = []
    for t in state.tasks:
        a = t.assignment
        lines.append(_dumps({
            "event": "assignment",
            "task_id": a.task_id,
            "role": a.role.value,
            "payload_digest": a.digest(),
            "assignment_bytes": _nbytes(a.serialized()),
            "turn_bytes": t.turn_bytes,
            "provenance": a.provenance,
        }))
        lines.append(_dumps({"event": "summary", **t.summary.to_json()}))
    return lines


def write_run_log(state: RunState, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(line + "\n" for line in run_log_lines(state)), encoding="utf-8")
    return path


def _metrics(rec: Record) -> dict:
    m = rec.measurement
    return {
        "model_acc": None if rec.performance is None else rec.performance.accuracy_percent,
        "model_ram_KB": None if m.ram_bytes is None else bytes_to_kb(m.ram_bytes),
        "model_flash_KB": None if m.flash_bytes is None else bytes_to_kb(m.flash_bytes),
    }


def emit_report(state: RunState, path: str | os.PathLike) -> Path:
    """Write the deployment report (and the best spec beside it)."""
    if not state.done:
        raise TerminalState("report requested before the run finished")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    report = make_report(state)
    best = report.best
    spec_path = None
    if best is not None:
        spec_path = path.with_name(path.stem + ".best_spec.json")
        spec_path.write_text(canonicalize(best.spec) + "\n", encoding="utf-8")
    cfg = state.config
    doc = {
        "best": None if best is None else {
            "model_id": best.model_id,
            "metrics": _metrics(best),
            "status": best.measurement.status,
            "reasons": [str(r) for r in best.measurement.reasons],
            "operator_compatibility": "ok" if not any(
                r.code == "UnsupportedOperator" for r in best.measurement.reasons) else "unsupported",
        },
        "termination_reason": report.termination.value,
        "iterations": report.iterations,
        "counts": report.counts,
        "constraints": cfg.constraints.to_dict(),
        "task": cfg.task.to_json(),
        "strategy": _describe(state.proposal.strategy),
        "evaluator": _describe(state.training.evaluator),
        "backend": "builtin" if cfg.backend is None else {"command": list(cfg.backend.command)},
        "train_config_digest": report.train_config_digest,
        "context": report.context,
        "paths": {
            "repository": cfg.repo_path,
            "best_spec": None if spec_path is None else str(spec_path),
            "checkpoint": None if best is None or best.performance is None
            else best.performance.checkpoint_path,
        },
    }
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return path
