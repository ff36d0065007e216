"""Candidate evaluation under one fixed training protocol.

:class:`SurrogateEvaluator` is a closed-form, deterministic stand-in for
training that rewards model capacity.  :class:`ExternalTrainer` hands the
candidate to a real training process over newline-delimited JSON on stdio.
"""

from __future__ import annotations

import hashlib
import json
import math
import shlex
import subprocess
from dataclasses import asdict, dataclass
from typing import Protocol

from .arch_spec import ArchitectureSpec, canonicalize, to_document
from .graph import GraphError, TensorShape, build_graph, count_macs, count_params
from .repository import EvalResult


class EvaluationError(RuntimeError):
    pass


class NotConstructible(EvaluationError):
    pass


class TrainerError(EvaluationError):
    pass


class TrainerSpawnFailed(TrainerError):
    pass


class TrainerTimeout(TrainerError):
    pass


class TrainerBadOutput(TrainerError):
    pass


class TrainerReportedFailure(TrainerError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    dataset: str
    input_shape: TensorShape
    num_classes: int
    max_epochs: int = 30
    patience: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be >= 1")

    def to_json(self) -> dict:
        return {
            "dataset": self.dataset,
            "input_shape": self.input_shape.as_list(),
            "num_classes": self.num_classes,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "seed": self.seed,
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class Evaluator(Protocol):
    name: str

    def evaluate(self, spec: ArchitectureSpec, config: TrainConfig) -> EvalResult: ...


# ---------------------------------------------------------------------------
# surrogate


def surrogate_base(params: int, macs: int) -> float:
    capacity = 35.0 * (1.0 - math.exp(-math.log10(1 + params) / 3.0))
    compute = 55.0 * (1.0 - math.exp(-math.log10(1 + macs) / 5.0))
    return capacity + compute


def surrogate_jitter(canonical: str, seed: int) -> float:
    """Deterministic offset in [-1, 1] keyed on the spec and the run seed."""
    blob = canonical.encode("utf-8") + b"\x00" + str(seed).encode("ascii")
    h = int.from_bytes(hashlib.sha256(blob).digest()[:8], "big")
    return ((h % 2001) - 1000) / 1000.0


def surrogate_accuracy(params: int, macs: int, jitter: float) -> float:
    return min(max(surrogate_base(params, macs) + jitter, 0.0), 99.9)


class SurrogateEvaluator:
    name = "surrogate"

    def evaluate(self, spec: ArchitectureSpec, config: TrainConfig) -> EvalResult:
        try:
            graph = build_graph(spec, config.input_shape)
        except (GraphError, ValueError) as exc:
            raise NotConstructible(str(exc)) from None
        params = count_params(graph).total
        macs = count_macs(graph)
        acc = surrogate_accuracy(params, macs, surrogate_jitter(canonicalize(spec), config.seed))
        return EvalResult(acc, converged=True, epochs_run=min(config.max_epochs, 10))

    def describe(self) -> dict:
        return {"name": self.name}


def surrogate_evaluate(spec: ArchitectureSpec, config: TrainConfig) -> EvalResult:
    return SurrogateEvaluator().evaluate(spec, config)


# ---------------------------------------------------------------------------
# external trainer


@dataclass(frozen=True)
class TrainerConfig:
    command: tuple[str, ...]
    timeout: float = 3600.0

    @classmethod
    def from_string(cls, command: str, timeout: float = 3600.0) -> TrainerConfig:
        return cls(tuple(shlex.split(command)), timeout)


def training_request(spec: ArchitectureSpec, config: TrainConfig) -> str:
    return json.dumps({"architecture_spec": to_document(spec), "train_config": config.to_json()})


def parse_trainer_output(stdout: str, returncode: int, config: TrainConfig) -> tuple[EvalResult, list[dict]]:
    """Map the trainer's stdout to an :class:`EvalResult` plus its progress lines."""
    progress, final = [], None
    for n, line in enumerate(stdout.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError:
            raise TrainerBadOutput(f"line {n} is not JSON: {line[:200]!r}") from None
        if not isinstance(doc, dict):
            raise TrainerBadOutput(f"line {n} is not a JSON object")
        if "status" in doc:
            final = doc
            break
        progress.append(doc)
    if final is not None and final["status"] == "error":
        raise TrainerReportedFailure(str(final.get("detail", "trainer reported an error")))
    if returncode != 0:
        raise TrainerSpawnFailed(f"trainer exited with status {returncode}")
    if final is None:
        raise TrainerBadOutput("trainer output ended without a final status document")
    if final["status"] != "ok":
        raise TrainerBadOutput(f"unknown trainer status {final['status']!r}")
    acc, epochs = final.get("val_acc"), final.get("epochs_run")
    if isinstance(acc, bool) or not isinstance(acc, (int, float)) or not 0 <= acc <= 100:
        raise TrainerBadOutput(f"val_acc must be a number in [0, 100], got {acc!r}")
    if isinstance(epochs, bool) or not isinstance(epochs, int) or epochs < 0:
        raise TrainerBadOutput(f"epochs_run must be a non-negative integer, got {epochs!r}")
    converged = final.get("converged")
    if not isinstance(converged, bool):
        # stopping before the epoch cap means the plateau rule fired
        converged = epochs < config.max_epochs
    ckpt = final.get("checkpoint_path")
    return EvalResult(float(acc), converged, epochs, None if ckpt is None else str(ckpt)), progress


class ExternalTrainer:
    name = "external"

    def __init__(self, trainer: TrainerConfig):
        self.trainer = trainer
        self.last_progress: list[dict] = []

    def evaluate(self, spec: ArchitectureSpec, config: TrainConfig) -> EvalResult:
        self.last_progress = []
        try:
            proc = subprocess.run(
                list(self.trainer.command),
                input=training_request(spec, config),
                capture_output=True,
                text=True,
                timeout=self.trainer.timeout,
                check=False,
            )
        except subprocess.TimeoutExpired:
            raise TrainerTimeout(f"trainer exceeded {self.trainer.timeout}s") from None
        except OSError as exc:
            raise TrainerSpawnFailed(f"cannot run trainer: {exc}") from None
        result, self.last_progress = parse_trainer_output(proc.stdout, proc.returncode, config)
        return result

    def describe(self) -> dict:
        return {"name": self.name, **asdict(self.trainer)}


def external_train(spec: ArchitectureSpec, config: TrainConfig, trainer: TrainerConfig) -> EvalResult:
    return ExternalTrainer(trainer).evaluate(spec, config)
