"""OPs = BOPs / 64 + FLOPs for the MobileNetV1 ReActNet backbone.

Run: python demos/03_operation_counts.py
"""

from dybnn.config import load_config
from dybnn.cost import CountingConvention, compare_configs, count_ops, dynamic_sign_increment

static = load_config("mobilenet-reactnet-static")
dynamic = load_config("mobilenet-reactnet-dynamic")

for cfg in (static, dynamic):
    total = count_ops(cfg).total
    print(f"{cfg.name:<28} BOPs={total.bops:,}  FLOPs={float(total.flops):,.0f}  OPs={float(total.ops) / 1e8:.4f}e8")

# a single DySign site over C channels costs C + C^2/8 extra FLOPs
print("one DySign site at C=256:", dynamic_sign_increment(256))

delta = compare_configs(static, dynamic)
print(f"dynamic - static: {float(delta.total_delta.ops):,.0f} OPs ({delta.percent_change:+.2f}%)")
for row in [r for r in delta.rows if r.delta.ops][:6]:
    print(f"  {row.name:<22} {float(row.delta.ops):>12,.0f}")

# batch norm at 2 FLOPs per element instead of 1 pushes the static total past 1e8
heavy = count_ops(static, CountingConvention(bn_flops_per_element=2)).total
print(f"with 2-FLOP batch norm: {float(heavy.ops) / 1e8:.4f}e8")
