"""Pretrain a toy encoder contrastively and watch the loss fall.

With batch size b, embeddings that score every pair identically give a
symmetrized objective of 2*ln(b); the dashed line marks that level. An
untrained network actually starts above it at this scale (the sharp
temperature amplifies whatever view mismatch the random features have) and
training pulls the two views of each image together. Also plots the
optimizer schedules driving the run.
"""

import math
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from dnc.model import EncoderConfig, HeadConfig, tau_schedule
from dnc.pipeline import STAGE1_STREAM, materialize_data, train_contrastive
from dnc.config import DataConfig
from dnc.schedule import ScheduleSpec, lr_at

OUT = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(OUT, exist_ok=True)


def main():
    data_cfg = DataConfig(
        kind="uncurated", num_classes=6, total=96, image_size=(16, 16),
        class_separation=0.6, noise_std=0.2, seed=0,
    )
    corpus = materialize_data(data_cfg)["corpus"]
    spec = ScheduleSpec(
        n1=8, n2=0.0, n3=0.0, batch_size=16, reference_size=96, warmup_epochs=1.0,
    )
    state, history = train_contrastive(
        corpus, spec, spec.n1, (0, STAGE1_STREAM),
        enc_cfg=EncoderConfig(stem_channels=4, stage_channels=(4, 8, 16)),
        head_cfg=HeadConfig(hidden=32, output=16),
        stage="stage1",
    )
    steps = [row["step"] for row in history]
    losses = [row["loss"] for row in history]
    chance = 2.0 * math.log(spec.batch_size)
    print(f"steps: {len(steps)}  first loss {losses[0]:.3f}  last {losses[-1]:.3f}  "
          f"chance level {chance:.3f}")

    total = spec.epochs_to_steps(spec.n1)
    grid = np.arange(1, total + 1)
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.4))
    axes[0].plot(steps, losses)
    axes[0].axhline(chance, color="gray", ls="--", label="2 ln b")
    axes[0].set_title("contrastive loss")
    axes[0].set_xlabel("step")
    axes[0].legend(fontsize=8)
    axes[1].plot(grid, [lr_at(s, total, spec) for s in grid])
    axes[1].set_title("learning rate")
    axes[1].set_xlabel("step")
    axes[2].plot(grid, [tau_schedule(s, total) for s in grid])
    axes[2].set_title("momentum coefficient")
    axes[2].set_xlabel("step")
    fig.tight_layout()
    path = os.path.join(OUT, "pretraining_curves.png")
    fig.savefig(path, dpi=110)
    plt.close(fig)
    print("wrote", path)


if __name__ == "__main__":
    main()
