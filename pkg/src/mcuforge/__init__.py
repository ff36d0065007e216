"""Feasibility-first neural network customization for microcontrollers."""

from .arch_spec import (
    ArchitectureSpec,
    HeadSpec,
    LayerSpec,
    ModuleKind,
    ValidationReport,
    canonicalize,
    parse_spec,
    spec_id,
    validate_schema,
)
from .evaluator import ExternalTrainer, SurrogateEvaluator, TrainConfig
from .feasibility import BackendProfile, ConstraintSet, Measurement, analyze, analyze_external
from .graph import ModelGraph, TensorShape, build_graph, count_macs, count_params, expand_blocks, infer_shapes
from .orchestrator import RunConfig, RunReport, emit_report, run, run_customization, step
from .proposal import KNOWN_TASKS, LlmStrategy, MutationStrategy, RandomStrategy, TaskDescriptor
from .repository import EvalResult, Record, Repository

__version__ = "0.1.0"
