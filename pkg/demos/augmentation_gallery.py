"""Render the two stochastic view distributions on a single image.

View 1 always blurs and never solarizes; view 2 blurs rarely and solarizes
sometimes. Everything else (crop, flip, jitter, grayscale) is shared. The
bottom row shows the deterministic center crop used for cached-teacher
distillation.
"""

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from dnc.augment import center_crop, make_view, view1_preset, view2_preset
from dnc.data import synth_curated

OUT = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(OUT, exist_ok=True)


def main():
    ds = synth_curated(
        3, 1, image_spec=(48, 48, 3), class_separation=1.2, noise_std=0.05,
        rng=np.random.default_rng(3), class_rng=np.random.default_rng(11),
    )
    image = ds.images[0]
    v1 = view1_preset((32, 32))
    v2 = view2_preset((32, 32))

    cols = 6
    fig, axes = plt.subplots(3, cols, figsize=(1.6 * cols, 5.2))
    for j in range(cols):
        axes[0][j].imshow(np.clip(make_view(image, v1, np.random.default_rng(100 + j)), 0, 1))
        axes[1][j].imshow(np.clip(make_view(image, v2, np.random.default_rng(200 + j)), 0, 1))
        if j == 0:
            axes[2][j].imshow(np.clip(image, 0, 1))
            axes[2][j].set_title("source", fontsize=8)
        elif j == 1:
            axes[2][j].imshow(np.clip(center_crop(image, 36, 32), 0, 1))
            axes[2][j].set_title("center crop", fontsize=8)
    axes[0][0].set_ylabel("view 1", fontsize=9)
    axes[1][0].set_ylabel("view 2", fontsize=9)
    for row in axes:
        for ax in row:
            ax.set_xticks([])
            ax.set_yticks([])
    fig.tight_layout()
    path = os.path.join(OUT, "augmentation_gallery.png")
    fig.savefig(path, dpi=110)
    plt.close(fig)
    print("blur probability: view1", v1.blur_probability, "view2", v2.blur_probability)
    print("solarize probability: view1", v1.solarize_probability, "view2", v2.solarize_probability)
    print("wrote", path)


if __name__ == "__main__":
    main()
