"""Deployment feasibility: RAM/Flash measurement and hard-constraint checks.

The builtin backend plans activation memory over the lowered graph's fixed
execution order and sizes Flash with an int8 byte model.  A real vendor
toolchain can be plugged in through :func:`analyze_external`.
"""

from __future__ import annotations

import json
import math
import os
import re
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field

from .arch_spec import ArchitectureSpec, canonicalize, validate_schema
from .graph import (
    INPLACE_OPS,
    OP_KINDS,
    WEIGHTED_OPS,
    EmptyGraph,
    GraphError,
    ModelGraph,
    TensorShape,
    UnshapedGraph,
    expand_blocks,
    infer_shapes,
    op_out_channels,
    op_weights,
)

KB = 1024


def kb_to_bytes(kb: float) -> int:
    return int(round(kb * KB))


def bytes_to_kb(n: int) -> float:
    return round(n / KB, 2)


@dataclass(frozen=True)
class BackendProfile:
    name: str = "default"
    supported_ops: frozenset[str] = frozenset(OP_KINDS)
    activation_bytes_per_element: int = 1
    weight_bytes_per_element: int = 1
    bias_bytes: int = 4
    scale_bytes_per_channel: int = 4
    runtime_flash_overhead: int = 0
    runtime_ram_overhead: int = 0

    def __post_init__(self):
        object.__setattr__(self, "supported_ops", frozenset(self.supported_ops))
        if not self.supported_ops:
            raise ValueError("a backend profile must support at least one op kind")
        sizes = (
            self.activation_bytes_per_element, self.weight_bytes_per_element, self.bias_bytes,
            self.scale_bytes_per_channel, self.runtime_flash_overhead, self.runtime_ram_overhead,
        )
        if min(sizes) < 0:
            raise ValueError("byte sizes must be >= 0")


PROFILES: dict[str, BackendProfile] = {
    "default": BackendProfile(),
    # no depthwise kernels available
    "no-depthwise": BackendProfile(
        name="no-depthwise", supported_ops=frozenset(OP_KINDS) - {"depthwise_conv2d"}
    ),
}


def get_profile(name: str) -> BackendProfile:
    try:
        return PROFILES[name]
    except KeyError:
        raise ValueError(f"unknown backend profile {name!r}; known: {sorted(PROFILES)}") from None


@dataclass(frozen=True)
class ConstraintSet:
    ram_budget: int
    flash_budget: int
    input_shape: TensorShape
    backend_profile: str = "default"

    def __post_init__(self):
        if self.ram_budget <= 0 or self.flash_budget <= 0:
            raise ValueError("budgets must be positive")

    @classmethod
    def from_kb(cls, ram_kb: float, flash_kb: float, input_shape: TensorShape, profile="default"):
        return cls(kb_to_bytes(ram_kb), kb_to_bytes(flash_kb), input_shape, profile)

    def to_dict(self) -> dict:
        return {
            "ram_budget_KB": bytes_to_kb(self.ram_budget),
            "flash_budget_KB": bytes_to_kb(self.flash_budget),
            "input_shape": self.input_shape.as_list(),
            "backend_profile": self.backend_profile,
        }


_REASON = re.compile(r"^(\w+)(?:\((.*)\))?$", re.S)


@dataclass(frozen=True)
class FailReason:
    code: str  # RamOverBudget | FlashOverBudget | UnsupportedOperator | NotConstructible | BackendError
    detail: str | None = None

    def __str__(self) -> str:
        return self.code if self.detail is None else f"{self.code}({self.detail})"

    @classmethod
    def parse(cls, text: str) -> FailReason:
        m = _REASON.match(text)
        if m is None:
            raise ValueError(f"bad failure reason {text!r}")
        return cls(m.group(1), m.group(2))


RAM_OVER = FailReason("RamOverBudget")
FLASH_OVER = FailReason("FlashOverBudget")


@dataclass(frozen=True)
class Measurement:
    """Backend-reported (RAM, Flash, status).  Pass iff ``reasons`` is empty."""

    ram_bytes: int | None
    flash_bytes: int | None
    reasons: tuple[FailReason, ...] = ()

    @property
    def passed(self) -> bool:
        return not self.reasons

    @property
    def status(self) -> str:
        return "Pass" if self.passed else "Fail"

    def reason_codes(self) -> list[str]:
        return [r.code for r in self.reasons]

    def to_dict(self) -> dict:
        return {
            "ram_kb": None if self.ram_bytes is None else bytes_to_kb(self.ram_bytes),
            "flash_kb": None if self.flash_bytes is None else bytes_to_kb(self.flash_bytes),
            "ram_bytes": self.ram_bytes,
            "flash_bytes": self.flash_bytes,
            "status": self.status,
            "reasons": [str(r) for r in self.reasons],
        }


@dataclass(frozen=True)
class MemoryPlan:
    steps: tuple[tuple[int, tuple[str, ...], int], ...]  # (step, live buffers, live bytes)
    peak_bytes: int
    peak_step: int
    buffer_of: dict[str, str] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# memory planning


def plan_memory(graph: ModelGraph, profile: BackendProfile = PROFILES["default"]) -> MemoryPlan:
    """Liveness-based activation RAM over the graph's own op order.

    Each buffer is live from the step that allocates it through the last step
    reading it (or any in-place alias of it).  The graph input is live from
    step 0 and the output stays live to the end.  ``peak_bytes`` includes
    ``profile.runtime_ram_overhead``; the per-step figures do not.
    """
    if not graph.shaped:
        raise UnshapedGraph("shapes have not been inferred")
    n_steps = len(graph.ops)
    buffer_of = {graph.input: graph.input}
    start = {graph.input: 0}
    for step, op in enumerate(graph.ops):
        if op.kind in INPLACE_OPS:
            buffer_of[op.output] = buffer_of[op.inputs[0]]
        else:
            buffer_of[op.output] = op.output
            start[op.output] = step
    end = dict(start)
    for step, op in enumerate(graph.ops):
        for t in op.inputs:
            buf = buffer_of[t]
            end[buf] = max(end[buf], step)
    end[buffer_of[graph.output]] = max(n_steps - 1, 0)

    bpe = profile.activation_bytes_per_element
    size = {buf: graph.shape(buf).numel * bpe for buf in start}
    steps = []
    peak, peak_step = 0, 0
    for step in range(n_steps):
        live = tuple(b for b in start if start[b] <= step <= end[b])
        live_bytes = sum(size[b] for b in live)
        steps.append((step, live, live_bytes))
        if live_bytes > peak:
            peak, peak_step = live_bytes, step
    return MemoryPlan(tuple(steps), peak + profile.runtime_ram_overhead, peak_step, buffer_of)


def estimate_flash(graph: ModelGraph, profile: BackendProfile = PROFILES["default"]) -> int:
    """Quantized weight storage plus per-channel bias and scale tables.

    A batch_norm directly after a weighted op folds into it: the op then
    stores a bias vector even when lowered without one.
    """
    if not graph.ops:
        raise EmptyGraph("graph has no ops")
    if not graph.shaped:
        raise UnshapedGraph("shapes have not been inferred")
    folded = {op.inputs[0] for op in graph.ops if op.kind == "batch_norm"}
    total = profile.runtime_flash_overhead
    for op in graph.ops:
        if op.kind not in WEIGHTED_OPS:
            continue
        cout = op_out_channels(op)
        has_bias = bool(op.attrs.get("bias")) or op.output in folded
        total += op_weights(op) * profile.weight_bytes_per_element
        total += (cout if has_bias else 0) * profile.bias_bytes
        total += cout * profile.scale_bytes_per_channel
    return total


# ---------------------------------------------------------------------------
# analysis


def _budget_reasons(ram: int, flash: int, constraints: ConstraintSet) -> list[FailReason]:
    reasons = []
    if ram > constraints.ram_budget:
        reasons.append(RAM_OVER)
    if flash > constraints.flash_budget:
        reasons.append(FLASH_OVER)
    return reasons


def analyze(
    spec: ArchitectureSpec,
    constraints: ConstraintSet,
    profile: BackendProfile | None = None,
) -> Measurement:
    """Measure ``spec`` with the builtin backend.  Never raises on bad specs."""
    if profile is None:
        profile = get_profile(constraints.backend_profile)
    report = validate_schema(spec)
    if not report.valid:
        return Measurement(None, None, (FailReason("NotConstructible", str(report.issues[0])),))
    try:
        graph = infer_shapes(expand_blocks(spec), constraints.input_shape)
    except GraphError as exc:
        return Measurement(None, None, (FailReason("NotConstructible", str(exc)),))

    reasons = []
    used = sorted({op.kind for op in graph.ops}, key=OP_KINDS.index)
    for kind in used:
        if kind not in profile.supported_ops:
            reasons.append(FailReason("UnsupportedOperator", kind))
    ram = plan_memory(graph, profile).peak_bytes
    flash = estimate_flash(graph, profile)
    reasons.extend(_budget_reasons(ram, flash, constraints))
    return Measurement(ram, flash, tuple(reasons))


# ---------------------------------------------------------------------------
# external backend adapter


class AdapterError(RuntimeError):
    code = "AdapterError"


class AdapterSpawnFailed(AdapterError):
    code = "AdapterSpawnFailed"


class AdapterTimeout(AdapterError):
    code = "AdapterTimeout"


class AdapterBadOutput(AdapterError):
    code = "AdapterBadOutput"


@dataclass(frozen=True)
class AdapterConfig:
    command: tuple[str, ...]
    timeout: float = 300.0

    @classmethod
    def from_string(cls, command: str, timeout: float = 300.0) -> AdapterConfig:
        return cls(tuple(shlex.split(command)), timeout)


def parse_adapter_output(stdout: str) -> dict:
    lines = [ln for ln in stdout.splitlines() if ln.strip()]
    if len(lines) != 1:
        raise AdapterBadOutput(f"expected exactly one JSON line, got {len(lines)}")
    try:
        doc = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise AdapterBadOutput(f"unparseable result: {exc}") from None
    if not isinstance(doc, dict) or doc.get("status") not in ("ok", "error"):
        raise AdapterBadOutput(f"result lacks status ok|error: {lines[0][:200]}")
    if doc["status"] == "ok":
        for key in ("ram_kb", "flash_kb"):
            value = doc.get(key)
            if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value) or value < 0:
                raise AdapterBadOutput(f"{key} must be a non-negative number, got {value!r}")
    return doc


def analyze_external(
    spec: ArchitectureSpec,
    constraints: ConstraintSet,
    adapter: AdapterConfig,
) -> Measurement:
    """Measure ``spec`` through an external backend command.

    The command is run as ``<cmd> <spec-file> --input-shape CxHxW`` and must
    print one JSON line ``{"ram_kb", "flash_kb", "status", "detail"?}``.
    """
    text = canonicalize(spec)
    fd, path = tempfile.mkstemp(prefix="mcuforge-spec-", suffix=".json")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        argv = [*adapter.command, path, "--input-shape", str(constraints.input_shape)]
        try:
            proc = subprocess.run(
                argv, capture_output=True, text=True, timeout=adapter.timeout, check=False
            )
        except subprocess.TimeoutExpired:
            raise AdapterTimeout(f"backend exceeded {adapter.timeout}s") from None
        except OSError as exc:
            raise AdapterSpawnFailed(f"cannot run {argv[0]!r}: {exc}") from None
    finally:
        os.unlink(path)
    if proc.returncode != 0:
        tail = proc.stderr.strip()[-300:]
        raise AdapterSpawnFailed(f"backend exited with status {proc.returncode}: {tail}")
    doc = parse_adapter_output(proc.stdout)
    if doc["status"] == "error":
        detail = doc.get("detail") or "backend reported an error"
        ram = doc.get("ram_kb")
        flash = doc.get("flash_kb")
        return Measurement(
            kb_to_bytes(ram) if isinstance(ram, (int, float)) else None,
            kb_to_bytes(flash) if isinstance(flash, (int, float)) else None,
            (FailReason("BackendError", str(detail)),),
        )
    ram, flash = kb_to_bytes(doc["ram_kb"]), kb_to_bytes(doc["flash_kb"])
    return Measurement(ram, flash, tuple(_budget_reasons(ram, flash, constraints)))


def measure(
    spec: ArchitectureSpec,
    constraints: ConstraintSet,
    adapter: AdapterConfig | None = None,
    profile: BackendProfile | None = None,
) -> Measurement:
    """Dispatch to the external adapter when one is configured."""
    if adapter is None:
        return analyze(spec, constraints, profile)
    return analyze_external(spec, constraints, adapter)
