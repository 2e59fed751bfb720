"""Pull the distillation stage apart on a tiny constructed example.

Builds a base teacher and two experts by hand, distills a student against
them, and shows the pieces: per-head regression losses, the effect of
dropping the expert targets, and the fixed-point property (regressors that
already output the normalized teacher projections have zero loss).
"""

import numpy as np

from dnc.config import DataConfig
from dnc.losses import distill_loss
from dnc.model import EncoderConfig, HeadConfig, project
from dnc.pipeline import STAGE1_STREAM, distill, materialize_data, train_contrastive
from dnc.schedule import ScheduleSpec


def main():
    data_cfg = DataConfig(
        kind="uncurated", num_classes=4, total=48, image_size=(12, 12),
        class_separation=0.8, noise_std=0.1, seed=2,
    )
    corpus = materialize_data(data_cfg)["corpus"]
    enc = EncoderConfig(stem_channels=4, stage_channels=(4, 8))
    head = HeadConfig(hidden=16, output=8)
    spec = ScheduleSpec(n1=4, n3=4, batch_size=8, reference_size=48, warmup_epochs=0.5)

    base, _ = train_contrastive(corpus, spec, spec.n1, (2, STAGE1_STREAM),
                                enc_cfg=enc, head_cfg=head, stage="stage1")
    experts = [
        train_contrastive(corpus, spec, spec.n1, (2, 20, k),
                          enc_cfg=enc, head_cfg=head, stage=f"expert-{k}")[0]
        for k in range(2)
    ]
    assignments = (np.arange(len(corpus)) % 2).astype(np.int64)

    for targets in ("both", "base_only", "experts_only"):
        student, history = distill(
            corpus, spec, spec.n3, base, experts, assignments, (2, 30),
            enc_cfg=enc, head_cfg=head, targets=targets,
        )
        print(f"targets={targets:<12} first loss {history[0]['loss']:.4f}  "
              f"last {history[-1]['loss']:.4f}")

    # Fixed point: predictions equal to the normalized teacher outputs score
    # zero, no matter what network produced them.
    _, z_teacher = project(base, [corpus.images[i] for i in range(8)])
    z_hat = z_teacher / np.linalg.norm(z_teacher, axis=1, keepdims=True)
    value = distill_loss(z_hat, z_hat.copy(), z_teacher, z_teacher.copy())
    print(f"fixed-point distill loss: {value:.2e}")


if __name__ == "__main__":
    main()
