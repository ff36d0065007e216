"""Lowering of architecture specs to a primitive-op graph.

Each backbone block expands into a short, fixed sequence of primitive ops
(conv2d, depthwise_conv2d, batch_norm, relu, add, concat, global_avg_pool,
fully_connected).  Shapes are inferred over the lowered graph and parameter
and MAC counts are derived from op attributes.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

from .arch_spec import ArchitectureSpec, LayerSpec, check_valid

OP_KINDS = (
    "conv2d",
    "depthwise_conv2d",
    "batch_norm",
    "relu",
    "add",
    "concat",
    "global_avg_pool",
    "fully_connected",
)
WEIGHTED_OPS = frozenset({"conv2d", "depthwise_conv2d", "fully_connected"})
INPLACE_OPS = frozenset({"batch_norm", "relu"})


class GraphError(ValueError):
    pass


class UnshapedGraph(GraphError):
    pass


class EmptyGraph(GraphError):
    pass


class DimensionError(GraphError):
    """A tensor extent does not line up: the candidate is not constructible."""

    def __init__(self, op_index: int, op: PrimitiveOp, expected: Any, actual: Any, why: str = ""):
        self.op_index = op_index
        self.op = op
        self.expected = expected
        self.actual = actual
        detail = f" ({why})" if why else ""
        super().__init__(
            f"op {op_index} ({op.kind}, layer {op.layer}): expected {expected}, got {actual}{detail}"
        )


@dataclass(frozen=True)
class TensorShape:
    """``C x H x W`` feature map, or a flat vector when ``height is None``."""

    channels: int
    height: int | None = None
    width: int | None = None

    def __post_init__(self):
        if (self.height is None) != (self.width is None):
            raise ValueError("height and width must both be set or both be None")
        for extent in (self.channels, self.height, self.width):
            if extent is not None and extent < 1:
                raise ValueError(f"tensor extents must be >= 1, got {self}")

    @property
    def is_flat(self) -> bool:
        return self.height is None

    @property
    def numel(self) -> int:
        if self.is_flat:
            return self.channels
        return self.channels * self.height * self.width

    @classmethod
    def parse(cls, text: str) -> TensorShape:
        parts = [int(p) for p in text.lower().replace("×", "x").split("x")]
        if len(parts) == 1:
            return cls(parts[0])
        if len(parts) != 3:
            raise ValueError(f"expected CxHxW, got {text!r}")
        return cls(*parts)

    def as_list(self) -> list[int]:
        return [self.channels] if self.is_flat else [self.channels, self.height, self.width]

    def __str__(self) -> str:
        return "x".join(str(v) for v in self.as_list())


@dataclass(frozen=True)
class PrimitiveOp:
    kind: str
    inputs: tuple[str, ...]
    output: str
    attrs: Mapping[str, Any] = field(default_factory=dict)
    layer: int | str = "head"  # originating backbone index, or "head"

    def attr(self, name: str, default: Any = None) -> Any:
        return self.attrs.get(name, default)


@dataclass(frozen=True)
class ModelGraph:
    ops: tuple[PrimitiveOp, ...]
    input: str
    output: str
    tensors: Mapping[str, TensorShape | None]

    @property
    def shaped(self) -> bool:
        names = [self.input, *(op.output for op in self.ops)]
        return all(self.tensors.get(t) is not None for t in names)

    @property
    def provenance(self) -> dict[int, int | str]:
        return {i: op.layer for i, op in enumerate(self.ops)}

    def consumers(self) -> dict[str, list[int]]:
        users: dict[str, list[int]] = {t: [] for t in self.tensors}
        for i, op in enumerate(self.ops):
            for t in op.inputs:
                users[t].append(i)
        return users

    def producer(self) -> dict[str, int]:
        return {op.output: i for i, op in enumerate(self.ops)}

    def shape(self, tensor: str) -> TensorShape:
        shape = self.tensors[tensor]
        if shape is None:
            raise UnshapedGraph(f"tensor {tensor} has no inferred shape")
        return shape


# ---------------------------------------------------------------------------
# lowering


class _Lowering:
    def __init__(self):
        self.ops: list[PrimitiveOp] = []
        self.n = 0
        self.input = self.fresh()

    def fresh(self) -> str:
        name = f"t{self.n}"
        self.n += 1
        return name

    def emit(self, kind: str, inputs: Iterable[str], layer: int | str, **attrs) -> str:
        out = self.fresh()
        self.ops.append(PrimitiveOp(kind, tuple(inputs), out, attrs, layer))
        return out

    def conv(self, x, layer, cin, cout, k, s, p, bias):
        return self.emit(
            "conv2d", [x], layer,
            in_channels=cin, out_channels=cout, kernel_size=k, stride=s, padding=p, bias=bias,
        )

    def dwconv(self, x, layer, c, k, s, p):
        return self.emit(
            "depthwise_conv2d", [x], layer,
            in_channels=c, out_channels=c, kernel_size=k, stride=s, padding=p, bias=False,
        )

    def bn(self, x, layer, c):
        return self.emit("batch_norm", [x], layer, channels=c)

    def relu(self, x, layer):
        return self.emit("relu", [x], layer)


def _lower_layer(g: _Lowering, x: str, idx: int, layer: LayerSpec) -> str:
    p = layer.params
    cin, cout = p["in_channels"], p["out_channels"]
    kind = layer.kind
    if kind == "conv":
        use_bn = p["use_bn"]
        x = g.conv(x, idx, cin, cout, p["kernel_size"], p["stride"], p["padding"], bias=not use_bn)
        if use_bn:
            x = g.bn(x, idx, cout)
        return g.relu(x, idx)
    if kind == "depthwise":
        x = g.dwconv(x, idx, cin, p["kernel_size"], p["stride"], p["padding"])
        x = g.bn(x, idx, cin)
        return g.relu(x, idx)
    if kind == "downsample":
        x = g.conv(x, idx, cin, cout, 3, 2, 1, bias=False)
        x = g.bn(x, idx, cout)
        return g.relu(x, idx)
    if kind == "pointwise":
        use_bn = p["use_bn"]
        x = g.conv(x, idx, cin, cout, 1, 1, 0, bias=not use_bn)
        if use_bn:
            x = g.bn(x, idx, cout)
        return g.relu(x, idx)
    if kind == "ghost":
        k, dw = p["kernel_size"], p["dw_size"]
        primary_c = -(-cout // p["ratio"])
        primary = g.conv(x, idx, cin, primary_c, k, 1, k // 2, bias=False)
        primary = g.relu(g.bn(primary, idx, primary_c), idx)
        cheap = g.dwconv(primary, idx, primary_c, dw, 1, dw // 2)
        cheap = g.relu(g.bn(cheap, idx, primary_c), idx)
        return g.emit("concat", [primary, cheap], idx, out_channels=cout)
    if kind == "bottleneck":
        hidden = cin * p["expansion"]
        h = x
        if p["expansion"] != 1:
            h = g.conv(h, idx, cin, hidden, 1, 1, 0, bias=False)
            h = g.relu(g.bn(h, idx, hidden), idx)
        h = g.dwconv(h, idx, hidden, 3, 1, 1)
        h = g.relu(g.bn(h, idx, hidden), idx)
        h = g.conv(h, idx, hidden, cout, 1, 1, 0, bias=False)
        h = g.bn(h, idx, cout)
        if cin == cout:
            h = g.emit("add", [x, h], idx)
        return h
    raise AssertionError(f"unhandled kind {kind}")


def expand_blocks(spec: ArchitectureSpec) -> ModelGraph:
    """Lower ``spec`` into primitive ops (shapes left unset)."""
    check_valid(spec)
    g = _Lowering()
    x = g.input
    for idx, layer in enumerate(spec.backbone, start=1):
        x = _lower_layer(g, x, idx, layer)
    last_c = spec.backbone[-1].out_channels
    x = g.emit("global_avg_pool", [x], "head")
    x = g.emit(
        "fully_connected", [x], "head",
        in_features=last_c, out_features=spec.head.num_classes, bias=True,
    )
    tensors = {f"t{i}": None for i in range(g.n)}
    return ModelGraph(tuple(g.ops), g.input, x, tensors)


# ---------------------------------------------------------------------------
# shape inference


def conv_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _infer_op(i: int, op: PrimitiveOp, shapes: list[TensorShape]) -> TensorShape:
    kind = op.kind
    x = shapes[0]
    if kind in ("conv2d", "depthwise_conv2d"):
        if x.is_flat:
            raise DimensionError(i, op, "feature map", str(x))
        if x.channels != op.attrs["in_channels"]:
            raise DimensionError(i, op, op.attrs["in_channels"], x.channels, "input channels")
        k, s, p = op.attrs["kernel_size"], op.attrs["stride"], op.attrs["padding"]
        h, w = conv_extent(x.height, k, s, p), conv_extent(x.width, k, s, p)
        if h < 1 or w < 1:
            raise DimensionError(i, op, "positive output extent", f"{h}x{w}", f"input {x}")
        return TensorShape(op.attrs["out_channels"], h, w)
    if kind == "batch_norm":
        if x.channels != op.attrs["channels"]:
            raise DimensionError(i, op, op.attrs["channels"], x.channels, "channels")
        return x
    if kind == "relu":
        return x
    if kind == "add":
        if shapes[0] != shapes[1]:
            raise DimensionError(i, op, str(shapes[0]), str(shapes[1]), "add operands differ")
        return x
    if kind == "concat":
        if any(s.is_flat or (s.height, s.width) != (x.height, x.width) for s in shapes):
            raise DimensionError(
                i, op, f"equal spatial extents", ", ".join(str(s) for s in shapes)
            )
        total = sum(s.channels for s in shapes)
        want = op.attrs.get("out_channels", total)
        if want > total:
            raise DimensionError(i, op, want, total, "concat supplies too few channels")
        return TensorShape(want, x.height, x.width)
    if kind == "global_avg_pool":
        if x.is_flat:
            raise DimensionError(i, op, "feature map", str(x))
        return TensorShape(x.channels)
    if kind == "fully_connected":
        if not x.is_flat:
            raise DimensionError(i, op, "flat vector", str(x))
        if x.channels != op.attrs["in_features"]:
            raise DimensionError(i, op, op.attrs["in_features"], x.channels, "input features")
        return TensorShape(op.attrs["out_features"])
    raise AssertionError(f"unknown op kind {kind}")


def infer_shapes(graph: ModelGraph, input_shape: TensorShape) -> ModelGraph:
    """Return a copy of ``graph`` with every tensor shaped.

    Raises :class:`DimensionError` at the first op whose operands do not fit.
    """
    shapes: dict[str, TensorShape | None] = dict.fromkeys(graph.tensors)
    shapes[graph.input] = input_shape
    for i, op in enumerate(graph.ops):
        operands = []
        for t in op.inputs:
            if shapes.get(t) is None:
                raise DimensionError(i, op, f"shaped input {t}", "unproduced tensor")
            operands.append(shapes[t])
        shapes[op.output] = _infer_op(i, op, operands)
    return dataclasses.replace(graph, tensors=shapes)


def build_graph(spec: ArchitectureSpec, input_shape: TensorShape) -> ModelGraph:
    return infer_shapes(expand_blocks(spec), input_shape)


def is_constructible(spec: ArchitectureSpec, input_shape: TensorShape) -> bool:
    """Schema-valid and every tensor extent consistent for ``input_shape``."""
    try:
        build_graph(spec, input_shape)
    except (GraphError, ValueError):
        return False
    return True


# ---------------------------------------------------------------------------
# counting


@dataclass(frozen=True)
class ParamCount:
    weights: int
    biases: int
    bn_params: int

    @property
    def total(self) -> int:
        return self.weights + self.biases + self.bn_params


def op_weights(op: PrimitiveOp) -> int:
    a = op.attrs
    if op.kind == "conv2d":
        return a["kernel_size"] ** 2 * a["in_channels"] * a["out_channels"]
    if op.kind == "depthwise_conv2d":
        return a["kernel_size"] ** 2 * a["in_channels"]
    if op.kind == "fully_connected":
        return a["in_features"] * a["out_features"]
    return 0


def op_out_channels(op: PrimitiveOp) -> int:
    if op.kind == "fully_connected":
        return op.attrs["out_features"]
    return op.attrs["out_channels"]


def _require_shaped(graph: ModelGraph) -> None:
    if not graph.shaped:
        raise UnshapedGraph("shapes have not been inferred")


def count_params(graph: ModelGraph) -> ParamCount:
    _require_shaped(graph)
    weights = biases = bn = 0
    for op in graph.ops:
        weights += op_weights(op)
        if op.kind in WEIGHTED_OPS and op.attrs.get("bias"):
            biases += op_out_channels(op)
        if op.kind == "batch_norm":
            bn += 2 * op.attrs["channels"]
    return ParamCount(weights, biases, bn)


def count_macs(graph: ModelGraph, input_shape: TensorShape | None = None) -> int:
    """Multiply-accumulates of one forward pass.

    ``input_shape`` is accepted for symmetry with :func:`infer_shapes`; the
    graph must already be shaped.
    """
    _require_shaped(graph)
    macs = 0
    for op in graph.ops:
        if op.kind in ("conv2d", "depthwise_conv2d"):
            out = graph.shape(op.output)
            macs += op_weights(op) * out.height * out.width
        elif op.kind == "fully_connected":
            macs += op_weights(op)
    return macs


def dump_graph(graph: ModelGraph) -> str:
    lines = []
    for i, op in enumerate(graph.ops):
        attrs = ",".join(f"{k}={v}" for k, v in op.attrs.items())
        ins = " ".join(f"{t}[{graph.tensors.get(t) or '?'}]" for t in op.inputs)
        out = f"{op.output}[{graph.tensors.get(op.output) or '?'}]"
        lines.append(f"{i:3d} L{op.layer:<4} {op.kind:<17} ({attrs}) {ins} -> {out}")
    return "\n".join(lines)
