"""Static BOPs / FLOPs / OPs accounting.

Counting conventions (single source of truth, all per input sample):

=====================  =========================================
real conv / linear     1 FLOP per multiply-accumulate
binary conv / linear   1 BOP per multiply-accumulate
output scaling         1 FLOP per scaled output element
batch norm             1 FLOP per output element (inference-time
                       affine, one multiply-accumulate)
activation             1 FLOP per output element
average pooling        1 FLOP per input element a window covers
max pooling            0 (comparisons only)
residual add           1 FLOP per output element
=====================  =========================================

OPs = BOPs / 64 + FLOPs, kept as an exact rational.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import counters
from .autograd import Tensor, no_grad
from .recover import RecoveryConfig

CONVENTIONS = {
    "conv_mac_flops": 1,
    "binary_mac_bops": 1,
    "scale_flops_per_element": 1,
    "bn_flops_per_element": 1,
    "act_flops_per_element": 1,
    "avgpool_flops_per_window_element": 1,
    "maxpool_flops_per_window_element": 0,
    "add_flops_per_element": 1,
}


def ops_total(bops: int, flops: int) -> Fraction:
    if bops < 0 or flops < 0:
        raise ValueError("operation counts must be non-negative")
    return Fraction(int(bops), 64) + int(flops)


@dataclass(frozen=True)
class LayerCost:
    layer: str
    kind: str
    bops: int
    flops: int


@dataclass
class ComplexityReport:
    per_layer: list[LayerCost]
    q_scale: int = 0
    q_cirec: int | None = None
    head_macs: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def total_bops(self) -> int:
        return sum(e.bops for e in self.per_layer)

    @property
    def total_flops(self) -> int:
        return sum(e.flops for e in self.per_layer)

    @property
    def total_ops(self) -> Fraction:
        return ops_total(self.total_bops, self.total_flops)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer", "kind", "bops", "flops"])
        for e in self.per_layer:
            writer.writerow([e.layer, e.kind, e.bops, e.flops])
        ops = self.total_ops
        writer.writerow(["#total", "", self.total_bops, self.total_flops])
        writer.writerow(["#ops", f"{ops.numerator}/{ops.denominator}", "", ""])
        writer.writerow(["#q_scale", "", "", self.q_scale])
        writer.writerow(["#q_cirec", "", "", "" if self.q_cirec is None else self.q_cirec])
        return buf.getvalue()

    def to_text(self) -> str:
        width = max([len(e.layer) for e in self.per_layer] + [5])
        lines = [f"{'layer':<{width}}  {'kind':<8}  {'BOPs':>14}  {'FLOPs':>14}"]
        for e in self.per_layer:
            lines.append(f"{e.layer:<{width}}  {e.kind:<8}  {e.bops:>14}  {e.flops:>14}")
        ops = self.total_ops
        lines += [
            "-" * (width + 44),
            f"total BOPs   {self.total_bops}",
            f"total FLOPs  {self.total_flops}",
            f"OPs          {ops.numerator}/{ops.denominator} (= {float(ops):.6e})",
            f"q_scale      {self.q_scale}",
            f"q_cirec      {'n/a' if self.q_cirec is None else self.q_cirec}",
        ]
        return "\n".join(lines) + "\n"


def trace_model(model) -> list[counters.CostEntry]:
    """Run one eval-mode sample through `model` and collect the per-layer cost entries."""
    h, w = model.spec.input_size
    was_training = model.training
    model.eval()
    try:
        with no_grad(), counters.tracing() as entries:
            model(Tensor(np.zeros((1, 3, h, w))))
    finally:
        model.train(was_training)
    return entries


def q_scale_from_entries(entries) -> int:
    return sum(int(np.prod(e.out_shape)) for e in entries if e.interior and e.kind in ("binconv", "conv"))


def q_scale(model) -> int:
    """Sum of C*H*W over interior conv outputs (first and last layers excluded)."""
    return q_scale_from_entries(trace_model(model))


def q_cirec(cfg: RecoveryConfig, c_in: int, c_n: int, h_n: int, w_n: int) -> int:
    """Multiply-accumulates of the fusion head's convolutions for F_cat with `c_in` channels."""
    hw = h_n * w_n
    if cfg.effective_mode in ("irec", "none"):
        return c_n * c_in * hw
    c1, c2, groups, _ = cfg.split(c_n)
    return c1 * c_in * hw * 1 * 1 + c2 * (c1 // groups) * hw * 3 * 3


def count_model(model) -> ComplexityReport:
    entries = trace_model(model)
    per_layer = [LayerCost(e.layer, e.kind, int(e.bops), int(e.flops)) for e in entries]
    head_macs = sum(e.macs for e in entries if e.layer.startswith("head.") and e.kind == "conv")
    cfg = model.spec.recovery
    q_c = None
    if cfg.effective_mode != "none":
        ts = model.tapset
        q_c = q_cirec(cfg, ts.fused_in_channels, *ts.last)
    return ComplexityReport(per_layer, q_scale_from_entries(entries), q_c, head_macs,
                            meta={"backbone": model.spec.name, "input_size": list(model.spec.input_size),
                                  "binarize": model.spec.binarize})
