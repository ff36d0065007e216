"""Lower a hand-written architecture and see where its bytes go.

Run: python3 demos/measure_candidate.py
"""

from mcuforge import parse_spec
from mcuforge.feasibility import ConstraintSet, analyze, bytes_to_kb, estimate_flash, plan_memory
from mcuforge.graph import TensorShape, build_graph, count_macs, count_params, dump_graph

SPEC = """
{
  "backbone": {
    "layer_1": {"type": "conv", "in_channels": 3, "out_channels": 6, "kernel_size": 3,
                "stride": 1, "padding": 1, "use_bn": true},
    "layer_2": {"type": "depthwise", "in_channels": 6, "out_channels": 6, "kernel_size": 3,
                "stride": 1, "padding": 1},
    "layer_3": {"type": "downsample", "in_channels": 6, "out_channels": 12},
    "layer_4": {"type": "depthwise", "in_channels": 12, "out_channels": 12, "kernel_size": 3,
                "stride": 1, "padding": 1},
    "layer_5": {"type": "downsample", "in_channels": 12, "out_channels": 24},
    "layer_6": {"type": "pointwise", "in_channels": 24, "out_channels": 24, "use_bn": true}
  },
  "head": {"type": "classifier", "num_classes": 10}
}
"""

spec = parse_spec(SPEC)
shape = TensorShape(3, 32, 32)
graph = build_graph(spec, shape)

print("Lowered graph:")
print(dump_graph(graph))

params = count_params(graph)
print(f"\nparameters: {params.total} (weights {params.weights}, biases {params.biases}, bn {params.bn_params})")
print(f"MACs: {count_macs(graph):,}")

# The peak sits wherever the two largest live buffers overlap.
plan = plan_memory(graph)
step, live, nbytes = plan.steps[plan.peak_step]
op = graph.ops[step]
print(f"\npeak activation RAM {plan.peak_bytes} B at step {step} ({op.kind}, layer {op.layer})")
for buf in live:
    print(f"  live {buf}: {graph.shape(buf)}")
print(f"flash: {estimate_flash(graph)} B")

for ram_kb, flash_kb in [(256, 512), (8, 512), (256, 4)]:
    m = analyze(spec, ConstraintSet.from_kb(ram_kb, flash_kb, shape))
    reasons = ", ".join(str(r) for r in m.reasons) or "-"
    print(f"budget {ram_kb:>3} KB / {flash_kb:>3} KB -> {m.status:4}  "
          f"ram {bytes_to_kb(m.ram_bytes)} KB  flash {bytes_to_kb(m.flash_bytes)} KB  {reasons}")
