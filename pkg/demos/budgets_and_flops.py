"""Budget arithmetic: epoch splits, expert allocation, and training cost.

Shows how the three-stage budget is spent at the reference scale used by
the published schedules (1000 / 3000 / 4500 total epochs) and what the
equivalent accounting looks like for a toy encoder, where the cost model
makes the "distillation is cheaper than more pretraining" argument exact.
"""

import numpy as np

from dnc.model import EncoderConfig, HeadConfig, forward_flops
from dnc.schedule import (
    SCHEDULE_PRESETS,
    CostModel,
    ScheduleSpec,
    allocate_expert_budget,
    flops_report,
)


def main():
    for total, split in sorted(SCHEDULE_PRESETS.items(), key=lambda kv: int(kv[0])):
        print(f"preset {total:>5}: n1={split['n1']} n2={split['n2']} n3={split['n3']} "
              f"K={split['k_clusters']}")
    print()

    # Proportional budgets: five equal clusters of a 1500-epoch expert stage.
    equal = allocate_expert_budget(1500.0, [100] * 5)
    print("equal clusters:", equal.tolist())
    skewed = allocate_expert_budget(1500.0, [500, 250, 125, 75, 50], integer=True)
    print("skewed clusters (integer):", skewed.tolist(), "sum", int(skewed.sum()))
    print()

    enc = EncoderConfig(stem_channels=8, stage_channels=(8, 16, 32, 64))
    head = HeadConfig(hidden=128, output=32)
    f = forward_flops(enc, head, (24, 24))
    cost = CostModel(forward_flops=f)
    spec = ScheduleSpec(n1=10, n2=20, n3=30)
    report = flops_report(spec, cost)
    print(f"toy encoder forward cost: {f:,.0f} flops/image")
    for stage in ("base", "experts", "distill"):
        print(f"  {stage:>7}: {report['per_image'][stage]:,.0f} flops/image "
              f"x {report['stage_epochs'][stage]} epochs")
    print(f"  epoch-weighted average: {report['weighted_per_image']:,.0f} flops/image")
    print(f"  total: {report['total']:,.3g} flops at reference size "
          f"{spec.reference_size}")

    # The same budget spent purely on contrastive pretraining costs slightly
    # less per image (one teacher forward instead of two), which is the
    # sense in which a matched-epoch comparison slightly favors the
    # distilling pipeline's opponent.
    flat = flops_report(ScheduleSpec(n1=60, n2=0.0, n3=0.0), cost)
    ratio = report["total"] / flat["total"]
    print(f"  60-epoch three-stage total / 60-epoch flat total: {ratio:.3f}")


if __name__ == "__main__":
    main()
