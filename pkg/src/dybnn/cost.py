"""BOPs / FLOPs / OPs accounting over a :class:`ModelConfig`.

``OPs = BOPs / 64 + FLOPs``.  Counting rules:

* binary convolution: ``cout * cin * kh * kw * hout * wout`` BOPs
* real convolution and linear layers: multiply-accumulates, one FLOP each
* batch norm and PReLU: a fixed number of FLOPs per output element
  (see :class:`CountingConvention`)
* a dynamic sign stage over ``C`` channels adds ``C + C^2/8`` FLOPs, a dynamic
  PReLU stage adds ``2 (C + C^2/8)``; these follow the reduction-16 hyper
  function (two ``C x C/16`` FC layers) and are applied verbatim for any ``C``

Counts are exact: BOPs and FLOPs are integers or :class:`fractions.Fraction`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction

from .config import REAL, ModelConfig


@dataclass(frozen=True)
class CountingConvention:
    """FLOPs charged per output element of batch norm and PReLU layers.

    A folded batch norm is one multiply-add per element.  With one FLOP per
    PReLU element the MobileNetV1 ReActNet backbone comes to 0.97e8 OPs
    (static) and 0.99e8 OPs (dynamic).
    """

    bn_flops_per_element: int = 1
    prelu_flops_per_element: int = 1


DEFAULT_CONVENTION = CountingConvention()


@dataclass(frozen=True)
class OpCount:
    bops: int = 0
    flops: Fraction = Fraction(0)

    @property
    def ops(self) -> Fraction:
        return Fraction(self.bops, 64) + Fraction(self.flops)

    def __add__(self, other):
        return OpCount(self.bops + other.bops, Fraction(self.flops) + Fraction(other.flops))

    def __sub__(self, other):
        return OpCount(self.bops - other.bops, Fraction(self.flops) - Fraction(other.flops))


@dataclass(frozen=True)
class LayerCount:
    name: str
    kind: str
    count: OpCount


@dataclass
class CostReport:
    rows: list = field(default_factory=list)

    @property
    def total(self) -> OpCount:
        out = OpCount()
        for r in self.rows:
            out = out + r.count
        return out

    def by_name(self):
        return {r.name: r for r in self.rows}


def dynamic_sign_increment(channels: int) -> Fraction:
    return channels + Fraction(channels * channels, 8)


def dynamic_prelu_increment(channels: int) -> Fraction:
    return 2 * dynamic_sign_increment(channels)


def count_ops(cfg: ModelConfig, convention: CountingConvention = DEFAULT_CONVENTION) -> CostReport:
    """Per-layer counts; row names match :meth:`Model.layer_sequence`."""
    bn_k = convention.bn_flops_per_element
    pr_k = convention.prelu_flops_per_element
    rows = []

    def add(name, kind, bops=0, flops=0):
        rows.append(LayerCount(name, kind, OpCount(bops, Fraction(flops))))

    cin, h, w = cfg.input_shape
    if cfg.stem is not None:
        s = cfg.stem
        pad = s.kernel // 2
        h = (h + 2 * pad - s.kernel) // s.stride + 1
        w = (w + 2 * pad - s.kernel) // s.stride + 1
        add("stem.conv", "real-conv", flops=s.out_channels * cin * s.kernel**2 * h * w)
        add("stem.bn", "bn", flops=bn_k * s.out_channels * h * w)

    shapes = cfg.spatial_shapes()
    for i, b in enumerate(cfg.blocks):
        p = f"blocks.{i}"
        c, h, w = shapes[i]
        ho, wo = h // b.stride, w // b.stride
        real = b.activation == REAL
        sign_kind = "identity" if real else ("dysign" if b.sign_dynamic else "rsign")
        act_kind = "dyprelu" if b.prelu_dynamic else "rprelu"

        def conv(name, kind, macs):
            if real:
                add(name, "real-" + kind, flops=macs)
            else:
                add(name, "binary-" + kind, bops=macs)

        def sign(name):
            add(name, sign_kind, flops=dynamic_sign_increment(c) if b.sign_dynamic else 0)

        def prelu(name, channels):
            extra = dynamic_prelu_increment(channels) if b.prelu_dynamic else 0
            add(name, act_kind, flops=pr_k * channels * ho * wo + extra)

        sign(f"{p}.sign1")
        conv(f"{p}.conv1", "conv3x3", c * c * 9 * ho * wo)
        add(f"{p}.bn1", "bn", flops=bn_k * c * ho * wo)
        prelu(f"{p}.act1", c)
        sign(f"{p}.sign2")
        for k in range(b.branches):
            conv(f"{p}.conv2_{k}", "conv1x1", c * c * ho * wo)
            add(f"{p}.bn2_{k}", "bn", flops=bn_k * c * ho * wo)
        prelu(f"{p}.act2", b.out_channels)

    if cfg.classifier is not None:
        c = shapes[-1][0]
        add("classifier.fc", "linear", flops=c * cfg.classifier.classes)
    return CostReport(rows)


@dataclass
class DeltaRow:
    name: str
    kind_a: str | None
    kind_b: str | None
    a: OpCount
    b: OpCount

    @property
    def delta(self) -> OpCount:
        return self.b - self.a


@dataclass
class DeltaReport:
    rows: list
    total_a: OpCount
    total_b: OpCount

    @property
    def total_delta(self) -> OpCount:
        return self.total_b - self.total_a

    @property
    def percent_change(self) -> float:
        if self.total_a.ops == 0:
            return 0.0 if self.total_b.ops == 0 else float("inf")
        return float(100 * self.total_delta.ops / self.total_a.ops)


def compare_configs(a: ModelConfig, b: ModelConfig, convention=DEFAULT_CONVENTION) -> DeltaReport:
    """Align the two per-layer reports by layer name and diff them."""
    ra, rb = count_ops(a, convention), count_ops(b, convention)
    ma, mb = ra.by_name(), rb.by_name()
    names = [r.name for r in ra.rows] + [r.name for r in rb.rows if r.name not in ma]
    zero = OpCount()
    rows = [
        DeltaRow(
            n,
            ma[n].kind if n in ma else None,
            mb[n].kind if n in mb else None,
            ma[n].count if n in ma else zero,
            mb[n].count if n in mb else zero,
        )
        for n in names
    ]
    return DeltaReport(rows, ra.total, rb.total)


# ---------------------------------------------------------------------------
# formatting


def _num(x: Fraction):
    x = Fraction(x)
    return int(x) if x.denominator == 1 else float(x)


def _record(name, kind, count: OpCount):
    return {
        "name": name,
        "kind": kind,
        "bops": count.bops,
        "flops": _num(count.flops),
        "ops": float(count.ops),
        "ops_exact": str(count.ops),
    }


def format_report(report: CostReport, style="text") -> str:
    """``style="text"`` gives an aligned table, ``"structured"`` JSON lines."""
    total = report.total
    if style == "structured":
        lines = [json.dumps(_record(r.name, r.kind, r.count)) for r in report.rows]
        lines.append(json.dumps(_record("total", "total", total)))
        return "\n".join(lines) + "\n"
    width = max([len(r.name) for r in report.rows] + [5])
    kw = max([len(r.kind) for r in report.rows] + [4])
    out = [f"{'layer':<{width}}  {'kind':<{kw}}  {'BOPs':>14}  {'FLOPs':>14}  {'OPs':>16}"]
    for r in report.rows:
        c = r.count
        out.append(f"{r.name:<{width}}  {r.kind:<{kw}}  {c.bops:>14,}  {float(c.flops):>14,.0f}  {float(c.ops):>16,.2f}")
    out.append(f"{'total':<{width}}  {'':<{kw}}  {total.bops:>14,}  {float(total.flops):>14,.0f}  {float(total.ops):>16,.2f}")
    out.append(f"OPs = {float(total.ops) / 1e8:.4f} x 10^8")
    return "\n".join(out) + "\n"


def format_delta(report: DeltaReport, style="text") -> str:
    if style == "structured":
        lines = []
        for r in report.rows:
            rec = _record(r.name, r.kind_b or r.kind_a, r.delta)
            rec["ops_a"], rec["ops_b"] = float(r.a.ops), float(r.b.ops)
            lines.append(json.dumps(rec))
        tot = _record("total", "total", report.total_delta)
        tot["ops_a"], tot["ops_b"] = float(report.total_a.ops), float(report.total_b.ops)
        tot["percent_change"] = report.percent_change
        lines.append(json.dumps(tot))
        return "\n".join(lines) + "\n"
    width = max([len(r.name) for r in report.rows] + [5])
    out = [f"{'layer':<{width}}  {'OPs a':>16}  {'OPs b':>16}  {'delta':>14}"]
    for r in report.rows:
        out.append(f"{r.name:<{width}}  {float(r.a.ops):>16,.2f}  {float(r.b.ops):>16,.2f}  {float(r.delta.ops):>+14,.2f}")
    out.append(
        f"{'total':<{width}}  {float(report.total_a.ops):>16,.2f}  {float(report.total_b.ops):>16,.2f}  "
        f"{float(report.total_delta.ops):>+14,.2f}"
    )
    out.append(f"change: {report.percent_change:+.3f}%")
    return "\n".join(out) + "\n"
