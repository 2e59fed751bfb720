"""Run every stage end to end at desk scale and probe the results.

Uses the seconds-scale micro preset: pretrain, cluster, train two experts,
distill into a fresh student, then linear-probe both the base model and the
student on the balanced held-out split. Rerunning is free: each stage is
cached by its config digest, so the second call only reruns the probes.
"""

import os

from dnc.evaluation import emit_report, linear_probe
from dnc.pipeline import (
    load_checkpoint,
    materialize_data,
    run_dnc,
    stage1_checkpoint_path,
    student_checkpoint_path,
)
from dnc.presets import load_preset

OUT = os.path.join(os.path.dirname(__file__), "out")


def main():
    cfg = load_preset("micro").with_updates(output_dir=os.path.join(OUT, "micro-run"))
    summary = run_dnc(cfg)
    for stage, info in summary["stages"].items():
        print(f"{stage:>8}: steps={info.get('steps', '-')} cached={info['cached']} "
              f"({info['seconds']}s)")

    data = materialize_data(cfg.data)
    base = load_checkpoint(stage1_checkpoint_path(cfg.output_dir)).state
    student = load_checkpoint(student_checkpoint_path(cfg.output_dir)).state
    for name, state in (("base", base), ("student", student)):
        result = linear_probe(state, data["probe_train"], data["probe_test"], cfg.probe)
        print(f"{name:>8}: probe top1 {result.top1:.3f} (val {result.val_top1:.3f}, "
              f"lr {result.chosen})")

    paths = emit_report(cfg.output_dir, out_dir=os.path.join(OUT, "micro-report"))
    print("report:", paths["summary"])


if __name__ == "__main__":
    main()
