"""Candidate proposal strategies.

Every strategy returns a spec that is schema-valid and shape-consistent for
the task input.  Three are provided: an LLM-backed generator with
extract/validate/retry, a seeded random sampler over the constructible
space, and a one-step mutation of a parent record.
"""

from __future__ import annotations

import json
import os
import random
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

from .arch_spec import (
    BACKBONE_KINDS,
    REQUIRED_PARAMS,
    ArchitectureSpec,
    HeadSpec,
    LayerSpec,
    SpecError,
    canonicalize,
    spec_from_document,
    validate_schema,
)
from .feasibility import ConstraintSet, bytes_to_kb
from .graph import GraphError, TensorShape, build_graph, conv_extent, is_constructible
from .repository import ContextSummary, Record


@dataclass(frozen=True)
class TaskDescriptor:
    dataset: str
    input_shape: TensorShape
    num_classes: int

    def to_json(self) -> dict:
        return {
            "dataset": self.dataset,
            "input_shape": self.input_shape.as_list(),
            "num_classes": self.num_classes,
        }


KNOWN_TASKS = {
    "cifar10": TaskDescriptor("cifar10", TensorShape(3, 32, 32), 10),
    "cifar100": TaskDescriptor("cifar100", TensorShape(3, 32, 32), 100),
    "mnist": TaskDescriptor("mnist", TensorShape(1, 28, 28), 10),
    "fashionmnist": TaskDescriptor("fashionmnist", TensorShape(1, 28, 28), 10),
}


@dataclass(frozen=True)
class ProposalContext:
    task: TaskDescriptor
    constraints: ConstraintSet
    summary: ContextSummary = field(default_factory=ContextSummary)
    attempt_budget: int = 3
    parent: Record | None = None  # refinement anchor for mutation

    def __post_init__(self):
        if self.attempt_budget < 1:
            raise ValueError("attempt_budget must be >= 1")


class ProposalError(RuntimeError):
    pass


class ProposalFailed(ProposalError):
    def __init__(self, attempts: int, last_error: str, transcript: list | None = None):
        self.attempts = attempts
        self.last_error = last_error
        self.transcript = transcript or []
        super().__init__(f"no constructible candidate after {attempts} attempt(s): {last_error}")


class ExtractionError(ProposalError):
    code = "NoCandidateObject"


class MutationImpossible(ProposalError):
    pass


class TransportError(RuntimeError):
    pass


class CredentialMissing(TransportError):
    def __init__(self, env_var: str):
        self.env_var = env_var
        super().__init__(f"LLM credential not found: environment variable {env_var} is not set")


class ProposalStrategy(Protocol):
    name: str

    def propose(self, context: ProposalContext, seed: int) -> ArchitectureSpec: ...


def _constructibility_error(spec: ArchitectureSpec, input_shape: TensorShape) -> str | None:
    report = validate_schema(spec)
    if not report.valid:
        return "; ".join(str(i) for i in report.issues)
    try:
        build_graph(spec, input_shape)
    except (GraphError, ValueError) as exc:
        return f"DimensionError: {exc}"
    return None


# ---------------------------------------------------------------------------
# random sampling


@dataclass(frozen=True)
class SamplerConfig:
    min_depth: int = 3
    max_depth: int = 8
    widths: tuple[int, ...] = (4, 6, 8, 12, 16, 24, 32, 48, 64)
    max_downsamples: int = 3
    min_spatial: int = 4  # no halving once the map is this small
    conv_kernels: tuple[int, ...] = (1, 3, 5)
    depthwise_kernels: tuple[int, ...] = (3, 5)
    ghost_kernels: tuple[int, ...] = (1, 3)
    ghost_ratios: tuple[int, ...] = (2,)
    ghost_dw_sizes: tuple[int, ...] = (3,)
    expansions: tuple[int, ...] = (1, 2)

    def __post_init__(self):
        if not 1 <= self.min_depth <= self.max_depth:
            raise ValueError("need 1 <= min_depth <= max_depth")
        if not self.widths or min(self.widths) < 1:
            raise ValueError("width set must be non-empty and positive")
        if any(r != 1 and r != 2 for r in self.ghost_ratios):
            # the cheap branch only doubles the primary channels
            raise ValueError("ghost ratios must be 1 or 2")


def _sample_layer(rng: random.Random, kind: str, cin: int, cfg: SamplerConfig) -> LayerSpec:
    def width():
        return rng.choice(cfg.widths)

    if kind == "conv":
        k = rng.choice(cfg.conv_kernels)
        return LayerSpec("conv", dict(in_channels=cin, out_channels=width(), kernel_size=k,
                                      stride=1, padding=k // 2, use_bn=rng.random() < 0.5))
    if kind == "depthwise":
        k = rng.choice(cfg.depthwise_kernels)
        return LayerSpec("depthwise", dict(in_channels=cin, out_channels=cin, kernel_size=k,
                                           stride=1, padding=k // 2))
    if kind == "downsample":
        return LayerSpec("downsample", dict(in_channels=cin, out_channels=width()))
    if kind == "pointwise":
        return LayerSpec("pointwise", dict(in_channels=cin, out_channels=width(),
                                           use_bn=rng.random() < 0.5))
    if kind == "ghost":
        return LayerSpec("ghost", dict(in_channels=cin, out_channels=width(),
                                       kernel_size=rng.choice(cfg.ghost_kernels),
                                       ratio=rng.choice(cfg.ghost_ratios),
                                       dw_size=rng.choice(cfg.ghost_dw_sizes)))
    if kind == "bottleneck":
        return LayerSpec("bottleneck", dict(in_channels=cin, out_channels=width(),
                                            expansion=rng.choice(cfg.expansions)))
    raise ValueError(kind)


def _halvings_allowed(shape: TensorShape, cfg: SamplerConfig) -> int:
    extent, n = min(shape.height, shape.width), 0
    while extent > cfg.min_spatial and n < cfg.max_downsamples:
        extent = conv_extent(extent, 3, 2, 1)
        n += 1
    return n


def sample_spec(task: TaskDescriptor, seed: int, cfg: SamplerConfig = SamplerConfig()) -> ArchitectureSpec:
    rng = random.Random(seed)
    depth = rng.randint(cfg.min_depth, cfg.max_depth)
    downs_left = _halvings_allowed(task.input_shape, cfg)
    kinds = [k.value for k in BACKBONE_KINDS]
    layers = []
    cin = task.input_shape.channels
    for _ in range(depth):
        kind = rng.choice(kinds)
        if kind == "downsample" and downs_left == 0:
            kind = rng.choice([k for k in kinds if k != "downsample"])
        if kind == "downsample":
            downs_left -= 1
        layer = _sample_layer(rng, kind, cin, cfg)
        layers.append(layer)
        cin = layer.out_channels
    return ArchitectureSpec(tuple(layers), HeadSpec(task.num_classes))


def propose_random(context: ProposalContext, seed: int, config: SamplerConfig = SamplerConfig()) -> ArchitectureSpec:
    spec = sample_spec(context.task, seed, config)
    err = _constructibility_error(spec, context.task.input_shape)
    if err is not None:  # pragma: no cover - guarded by the sampler's construction
        raise ProposalFailed(1, err)
    return spec


class RandomStrategy:
    name = "random"

    def __init__(self, config: SamplerConfig = SamplerConfig()):
        self.config = config
        self.last_turns: list[str] = []

    def propose(self, context: ProposalContext, seed: int) -> ArchitectureSpec:
        spec = propose_random(context, seed, self.config)
        self.last_turns = [f"sample seed={seed} -> {canonicalize(spec)}"]
        return spec

    def describe(self) -> dict:
        return {"name": self.name, "sampler": _cfg_json(self.config)}


def _cfg_json(cfg: SamplerConfig) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.__dict__.items()}


# ---------------------------------------------------------------------------
# mutation

MUTATION_ARMS = ("widen", "narrow", "insert_depthwise", "delete")


def rechain(layers: Sequence[LayerSpec], in_channels: int) -> list[LayerSpec]:
    """Make every layer's in_channels match its predecessor's out_channels."""
    out = []
    cin = in_channels
    for layer in layers:
        if layer.kind == "depthwise":
            layer = layer.replace(in_channels=cin, out_channels=cin)
        else:
            layer = layer.replace(in_channels=cin)
        out.append(layer)
        cin = layer.out_channels
    return out


def _step_width(value: int, widths: Sequence[int], up: bool) -> int | None:
    ordered = sorted(set(widths))
    candidates = [w for w in ordered if w > value] if up else [w for w in ordered if w < value]
    if not candidates:
        return None
    return candidates[0] if up else candidates[-1]


def _resize(layers, idx, widths, up):
    if layers[idx].kind == "depthwise":
        return None
    new = _step_width(layers[idx].out_channels, widths, up)
    if new is None:
        return None
    layers = list(layers)
    layers[idx] = layers[idx].replace(out_channels=new)
    return layers


def _apply_arm(arm, layers, rng, cfg):
    n = len(layers)
    if arm in ("widen", "narrow"):
        resizable = [i for i, layer in enumerate(layers) if layer.kind != "depthwise"]
        if not resizable:
            return None
        return _resize(layers, rng.choice(resizable), cfg.widths, arm == "widen")
    if arm == "insert_depthwise":
        pos = rng.randint(1, n)
        layers = list(layers)
        cin = layers[pos - 1].out_channels
        layers.insert(pos, LayerSpec("depthwise", dict(in_channels=cin, out_channels=cin,
                                                       kernel_size=3, stride=1, padding=1)))
        return layers
    if arm == "delete":
        if n < 2:
            return None
        layers = list(layers)
        del layers[rng.randint(1, n - 1)]
        return layers
    raise ValueError(arm)


def propose_mutation(
    context: ProposalContext,
    seed: int,
    parent: Record | ArchitectureSpec,
    config: SamplerConfig = SamplerConfig(),
) -> ArchitectureSpec:
    """Apply one seeded edit to ``parent`` and repair channel chaining.

    An edit that cannot apply (e.g. delete on a one-layer parent) or that
    yields a non-constructible spec falls back to widening, then narrowing,
    then inserting a depthwise layer.
    """
    spec = parent.spec if isinstance(parent, Record) else parent
    shape = context.task.input_shape
    rng = random.Random(seed)
    arm = rng.choice(MUTATION_ARMS)
    base = list(spec.backbone)

    def finish(layers):
        if layers is None:
            return None
        cand = ArchitectureSpec(tuple(rechain(layers, shape.channels)), spec.head)
        return cand if is_constructible(cand, shape) else None

    result = finish(_apply_arm(arm, base, rng, config))
    if result is None:
        order = [i for i, layer in enumerate(base) if layer.kind != "depthwise"]
        rng.shuffle(order)
        for up in (True, False):
            for idx in order:
                result = finish(_resize(base, idx, config.widths, up))
                if result is not None:
                    break
            if result is not None:
                break
    if result is None:
        result = finish(_apply_arm("insert_depthwise", base, rng, config))
    if result is None:
        raise MutationImpossible(f"no applicable mutation for parent with {len(base)} layers")
    return result


class MutationStrategy:
    """Mutate the best record so far; sample at random while there is none."""

    name = "mutation"

    def __init__(self, config: SamplerConfig = SamplerConfig()):
        self.config = config
        self.last_turns: list[str] = []

    def propose(self, context: ProposalContext, seed: int) -> ArchitectureSpec:
        if context.parent is None:
            spec = propose_random(context, seed, self.config)
            self.last_turns = [f"no parent; sample seed={seed} -> {canonicalize(spec)}"]
        else:
            spec = propose_mutation(context, seed, context.parent, self.config)
            self.last_turns = [f"mutate {context.parent.model_id} seed={seed} -> {canonicalize(spec)}"]
        return spec

    def describe(self) -> dict:
        return {"name": self.name, "sampler": _cfg_json(self.config)}


# ---------------------------------------------------------------------------
# LLM proposal


def extract_json(text: str) -> dict:
    """First top-level JSON object in ``text`` that has ``backbone`` and ``head``."""
    decoder = json.JSONDecoder()
    pos = 0
    while True:
        start = text.find("{", pos)
        if start < 0:
            raise ExtractionError("NoCandidateObject: no JSON object with 'backbone' and 'head' found")
        try:
            obj, end = decoder.raw_decode(text, start)
        except json.JSONDecodeError:
            pos = start + 1
            continue
        if isinstance(obj, dict) and "backbone" in obj and "head" in obj:
            return obj
        pos = end


@dataclass(frozen=True)
class LlmConfig:
    base_url: str = "http://localhost:8000/v1"
    model: str = "deepseek-chat"
    api_key_env: str = "AUTOMCU_API_KEY"
    temperature: float = 0.0
    max_retries: int = 3
    timeout: float = 120.0


Transport = Callable[[list], str]

SYSTEM_PROMPT = (
    "You design convolutional neural networks for microcontrollers. "
    "Reply with one JSON architecture document and nothing else."
)


def _kind_lines() -> str:
    return "\n".join(f"- {kind}: {', '.join(params)}" for kind, params in REQUIRED_PARAMS.items())


def render_prompt(context: ProposalContext) -> str:
    task, c = context.task, context.constraints
    example = {
        "backbone": {
            "layer_1": {"type": "conv", "in_channels": task.input_shape.channels, "out_channels": 8,
                        "kernel_size": 3, "stride": 1, "padding": 1, "use_bn": True},
            "layer_2": {"type": "downsample", "in_channels": 8, "out_channels": 16},
        },
        "head": {"type": "classifier", "num_classes": task.num_classes},
    }
    return "\n".join([
        f"Task: {task.dataset}, input {task.input_shape} (CxHxW), {task.num_classes} classes.",
        f"Hard limits: peak RAM <= {bytes_to_kb(c.ram_budget)} KB, Flash <= {bytes_to_kb(c.flash_budget)} KB "
        f"(int8 weights and activations, backend profile {c.backend_profile}).",
        "",
        "Backbone module kinds and their required parameters (no others allowed):",
        _kind_lines(),
        "Head: classifier with num_classes.",
        "Rules: keys layer_1..layer_n in order; each layer's in_channels equals the previous "
        "out_channels; depthwise keeps in_channels == out_channels; downsample halves H and W; "
        "use_bn is a boolean; all other values are positive integers (padding may be 0).",
        "",
        "Document format:",
        json.dumps(example),
        "",
        "History:",
        context.summary.to_text(),
        "",
        "Propose one new architecture that fits the limits and improves accuracy. "
        "Answer with the JSON document only.",
    ])


@dataclass
class LlmProposal:
    spec: ArchitectureSpec
    attempts: int
    transcript: list[dict]


def propose_llm(context: ProposalContext, config: LlmConfig, transport: Transport) -> LlmProposal:
    """Ask the model for a spec; feed back any rejection and retry.

    ``transport`` takes chat messages and returns the reply text.
    :class:`TransportError` propagates unchanged.
    """
    prompt = render_prompt(context)
    transcript: list[dict] = []
    last_error = ""
    attempts = min(config.max_retries, context.attempt_budget) if config.max_retries > 0 else 1
    for attempt in range(1, attempts + 1):
        user = prompt if not last_error else (
            f"{prompt}\n\nYour previous answer was rejected: {last_error}\nFix it and answer again."
        )
        messages = [{"role": "system", "content": SYSTEM_PROMPT}, {"role": "user", "content": user}]
        reply = transport(messages)
        transcript.extend(messages[1:])
        transcript.append({"role": "assistant", "content": reply})
        try:
            spec = spec_from_document(extract_json(reply))
        except (ExtractionError, SpecError) as exc:
            last_error = str(exc)
            continue
        err = _constructibility_error(spec, context.task.input_shape)
        if err is not None:
            last_error = err
            continue
        return LlmProposal(spec, attempt, transcript)
    raise ProposalFailed(attempts, last_error, transcript)


class HttpTransport:
    """POST to ``<base_url>/chat/completions`` and return the first choice."""

    def __init__(self, config: LlmConfig):
        key = os.environ.get(config.api_key_env)
        if not key:
            raise CredentialMissing(config.api_key_env)
        self.config = config
        self._key = key

    def __call__(self, messages: list) -> str:
        body = json.dumps({
            "model": self.config.model,
            "messages": messages,
            "temperature": self.config.temperature,
        }).encode("utf-8")
        req = urllib.request.Request(
            self.config.base_url.rstrip("/") + "/chat/completions",
            data=body,
            headers={"Content-Type": "application/json", "Authorization": f"Bearer {self._key}"},
            method="POST",
        )
        try:
            with urllib.request.urlopen(req, timeout=self.config.timeout) as resp:
                doc = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, OSError, json.JSONDecodeError) as exc:
            raise TransportError(f"chat completion request failed: {exc}") from None
        try:
            return doc["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise TransportError("response has no choices[0].message.content") from None


class LlmStrategy:
    name = "llm"

    def __init__(self, config: LlmConfig = LlmConfig(), transport: Transport | None = None):
        self.config = config
        self.transport = transport if transport is not None else HttpTransport(config)
        self.last_turns: list[str] = []
        self.last_attempts = 0

    def propose(self, context: ProposalContext, seed: int) -> ArchitectureSpec:
        self.last_turns = []
        try:
            result = propose_llm(context, self.config, self.transport)
        except ProposalFailed as exc:
            self.last_attempts = exc.attempts
            self.last_turns = [json.dumps(m) for m in exc.transcript]
            raise
        self.last_turns = [json.dumps(m) for m in result.transcript]
        self.last_attempts = result.attempts
        return result.spec

    def describe(self) -> dict:
        c = self.config
        return {"name": self.name, "model": c.model, "base_url": c.base_url,
                "temperature": c.temperature, "max_retries": c.max_retries}
