"""Cluster pretrained representations and inspect what k-means found.

Trains a quick base model, extracts the projector's hidden activations,
runs spherical k-means, and scores the grouping against the (hidden) class
labels with majority-vote accuracy, mutual information, and coherence. A
random grouping of the same sizes is printed for contrast, along with the
per-cluster expert budgets a 12-epoch expert stage would allocate.
"""

import os

import numpy as np

from dnc.cluster import assign, extract_representations, kmeans_cosine
from dnc.config import DataConfig
from dnc.evaluation import class_coherence, cluster_mi, cluster_top1
from dnc.model import EncoderConfig, HeadConfig
from dnc.pipeline import STAGE1_STREAM, derive_rng, materialize_data, train_contrastive
from dnc.schedule import ScheduleSpec, allocate_expert_budget

OUT = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(OUT, exist_ok=True)


def main():
    data_cfg = DataConfig(
        kind="uncurated", num_classes=6, total=120, image_size=(16, 16),
        class_separation=0.7, noise_std=0.15, seed=1,
    )
    corpus = materialize_data(data_cfg)["corpus"]
    spec = ScheduleSpec(n1=10, batch_size=16, reference_size=120, warmup_epochs=1.0)
    state, _ = train_contrastive(
        corpus, spec, spec.n1, (1, STAGE1_STREAM),
        enc_cfg=EncoderConfig(stem_channels=4, stage_channels=(4, 8, 16)),
        head_cfg=HeadConfig(hidden=32, output=16),
        stage="stage1",
    )

    reps = extract_representations(state, corpus, layer="hidden")
    k = 3
    model = kmeans_cosine(reps, k, n_init=8, rng=derive_rng(1, 40, 0))
    labels = assign(model, reps.rows)
    sizes = np.bincount(labels, minlength=k)
    print("cluster sizes:", sizes.tolist(), " objective:", round(model.inertia, 4))

    truth = corpus.labels
    rand = derive_rng(1, 40, 1).integers(0, k, size=len(corpus))
    for name, a in (("clustered", labels), ("random", rand)):
        print(
            f"{name:>9}: top1 {cluster_top1(a, truth):.3f}  "
            f"mi {cluster_mi(a, truth):.3f} nats  "
            f"coherence {class_coherence(a, truth):.3f}"
        )

    budgets = allocate_expert_budget(12.0, sizes)
    print("expert budgets for n2=12:", np.round(budgets, 2).tolist(),
          "(sum", round(float(budgets.sum()), 6), ")")


if __name__ == "__main__":
    main()
