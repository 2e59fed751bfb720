"""Generate the two synthetic corpora and look at what makes them differ.

The curated corpus is class-balanced; the uncurated one draws class sizes
from a Zipf law, so a few head classes dominate and the tail is sparse.
Both kinds share class prototypes when given the same prototype stream,
which is what makes a balanced probe set a fair judge of either corpus.
"""

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from dnc.data import synth_curated, synth_uncurated, zipf_class_sizes

OUT = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(OUT, exist_ok=True)


def main():
    spec = (24, 24, 3)
    class_rng = lambda: np.random.default_rng(7)  # noqa: E731

    curated = synth_curated(
        8, 32, image_spec=spec, class_separation=0.8, noise_std=0.15,
        rng=np.random.default_rng(0), class_rng=class_rng(),
    )
    uncurated = synth_uncurated(
        8, 256, zipf_exponent=1.0, image_spec=spec, class_separation=0.8,
        noise_std=0.15, rng=np.random.default_rng(1), class_rng=class_rng(),
    )

    print("curated class sizes:  ", curated.histogram().tolist())
    print("uncurated class sizes:", uncurated.histogram().tolist())
    print("zipf shares for 8 classes at s=1.0:",
          np.round(zipf_class_sizes(8, 256, 1.0) / 256, 3).tolist())

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    for ax, ds, title in ((axes[0], curated, "curated"), (axes[1], uncurated, "uncurated")):
        ax.bar(np.arange(ds.num_classes), ds.histogram(), color="steelblue")
        ax.set_title(f"{title} (n={len(ds)})")
        ax.set_xlabel("class")
        ax.set_ylabel("items")
    fig.tight_layout()
    fig.savefig(os.path.join(OUT, "class_histograms.png"), dpi=110)
    plt.close(fig)

    # Contact sheet: one row per class, sampled from the uncurated corpus.
    fig, axes = plt.subplots(8, 8, figsize=(8, 8))
    for c in range(8):
        members = [i for i in range(len(uncurated)) if uncurated.labels[i] == c]
        for j in range(8):
            ax = axes[c][j]
            ax.axis("off")
            if j < len(members):
                ax.imshow(np.clip(uncurated.images[members[j]], 0, 1))
    fig.suptitle("uncurated corpus, one row per class (head classes fill rows)")
    fig.savefig(os.path.join(OUT, "contact_sheet.png"), dpi=110)
    plt.close(fig)
    print("wrote", os.path.join(OUT, "class_histograms.png"))
    print("wrote", os.path.join(OUT, "contact_sheet.png"))


if __name__ == "__main__":
    main()
