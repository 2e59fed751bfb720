"""Datasets: in-memory container, on-disk formats, synthetic generators.

Images are float32 arrays of shape (H, W, C) with values in [0, 1]. A dataset
directory contains:

  manifest      one line per item: "<ref>\\t<label>" (or just "<ref>")
  meta          JSON: {"num_classes": int, "image_shape": [H, W, C], "name": str}
  images.npz    packed variant: array container with one float32 entry per item
  <ref> files   loose variant: one lossless PNG per item

In the packed variant the manifest ``ref`` column names entries inside
``images.npz``; in the loose variant it holds paths relative to the dataset
directory. Labels must be present for every item or for none.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image as PILImage

from .container import read_container, write_container
from .errors import ConfigError, FormatError

MANIFEST_NAME = "manifest"
META_NAME = "meta"
PACKED_NAME = "images.npz"


def ensure_rng(rng) -> np.random.Generator:
    """Accept a Generator, a seed, or None (fresh entropy) and return a Generator."""
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def validate_image(arr: np.ndarray, what: str = "image") -> None:
    if not isinstance(arr, np.ndarray) or arr.ndim != 3:
        raise FormatError(f"{what} must be an (H, W, C) array")
    if arr.shape[2] not in (1, 3):
        raise FormatError(f"{what} must have 1 or 3 channels, got shape {arr.shape}")
    if arr.dtype != np.float32:
        raise FormatError(f"{what} must be float32, got {arr.dtype}")
    if not np.isfinite(arr).all():
        raise FormatError(f"{what} contains non-finite values")
    lo, hi = float(arr.min(initial=0.0)), float(arr.max(initial=1.0))
    if lo < 0.0 or hi > 1.0:
        raise FormatError(f"{what} has values outside [0, 1]: min {lo}, max {hi}")


@dataclass
class Dataset:
    """An ordered collection of images with optional integer labels."""

    images: list = field(repr=False)
    labels: np.ndarray | None
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.images),):
                raise FormatError("labels length does not match image count")

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int):
        label = None if self.labels is None else int(self.labels[i])
        return self.images[i], label

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    @property
    def image_shape(self) -> tuple:
        return self.images[0].shape if self.images else None

    def validate(self) -> None:
        if not self.images:
            raise FormatError(f"dataset {self.name!r} is empty")
        if self.num_classes < 1:
            raise FormatError("num_classes must be >= 1")
        shape = self.images[0].shape
        for i, img in enumerate(self.images):
            validate_image(img, f"item {i}")
            if img.shape != shape:
                raise FormatError(f"item {i} shape {img.shape} != {shape}")
        if self.labels is not None:
            if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
                raise FormatError("labels outside [0, num_classes)")

    def histogram(self) -> np.ndarray:
        """Per-class item counts, length num_classes."""
        if self.labels is None:
            raise FormatError("histogram requires a labeled dataset")
        return np.bincount(self.labels, minlength=self.num_classes)

    def select(self, indices, name: str | None = None) -> "Dataset":
        """Subset by item index, preserving relative order and num_classes."""
        indices = np.asarray(indices, dtype=np.int64)
        labels = None if self.labels is None else self.labels[indices]
        return Dataset(
            images=[self.images[i] for i in indices],
            labels=labels,
            num_classes=self.num_classes,
            name=name or f"{self.name}/subset",
        )


# ---------------------------------------------------------------------------
# On-disk formats
# ---------------------------------------------------------------------------


def save_dataset(dataset: Dataset, path, fmt: str = "packed") -> None:
    """Write a dataset directory in the packed or loose-image variant."""
    dataset.validate()
    if fmt not in ("packed", "png"):
        raise ConfigError(f"unknown dataset format {fmt!r}")
    os.makedirs(path, exist_ok=True)
    width = max(5, len(str(len(dataset) - 1)))
    refs = [f"item-{i:0{width}d}" for i in range(len(dataset))]
    if fmt == "packed":
        write_container(
            os.path.join(path, PACKED_NAME),
            {ref: img for ref, img in zip(refs, dataset.images)},
            {"kind": "image-pack", "count": len(dataset)},
        )
    else:
        refs = [ref + ".png" for ref in refs]
        for ref, img in zip(refs, dataset.images):
            _write_png(os.path.join(path, ref), img)
    lines = []
    for i, ref in enumerate(refs):
        if dataset.labels is None:
            lines.append(ref)
        else:
            lines.append(f"{ref}\t{int(dataset.labels[i])}")
    with open(os.path.join(path, MANIFEST_NAME), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    meta = {
        "num_classes": dataset.num_classes,
        "image_shape": list(dataset.image_shape),
        "name": dataset.name,
    }
    import json

    with open(os.path.join(path, META_NAME), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_dataset(path) -> Dataset:
    """Read a dataset directory written by :func:`save_dataset` (either variant)."""
    import json

    manifest_path = os.path.join(path, MANIFEST_NAME)
    meta_path = os.path.join(path, META_NAME)
    for p in (manifest_path, meta_path):
        if not os.path.isfile(p):
            raise FormatError(f"dataset {path} is missing {os.path.basename(p)}")
    with open(meta_path, "r", encoding="utf-8") as fh:
        try:
            meta = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"dataset meta is not valid JSON: {exc}") from exc
    for key in ("num_classes", "image_shape", "name"):
        if key not in meta:
            raise FormatError(f"dataset meta is missing {key!r}")
    expected_shape = tuple(meta["image_shape"])

    refs, labels = _parse_manifest(manifest_path)
    packed_path = os.path.join(path, PACKED_NAME)
    if os.path.isfile(packed_path):
        arrays, _ = read_container(packed_path)
        missing = [r for r in refs if r not in arrays]
        if missing:
            raise FormatError(f"packed dataset is missing entries: {missing[:3]}")
        images = [np.asarray(arrays[r], dtype=np.float32) for r in refs]
    else:
        images = []
        for r in refs:
            fp = os.path.join(path, r)
            if not os.path.isfile(fp):
                raise FormatError(f"dataset item file missing: {r}")
            images.append(_read_png(fp))
    for i, img in enumerate(images):
        validate_image(img, f"item {i} ({refs[i]})")
        if img.shape != expected_shape:
            raise FormatError(
                f"item {i} shape {img.shape} disagrees with meta {expected_shape}"
            )
    dataset = Dataset(
        images=images,
        labels=labels,
        num_classes=int(meta["num_classes"]),
        name=str(meta["name"]),
    )
    dataset.validate()
    return dataset


def _parse_manifest(manifest_path):
    refs, labels = [], []
    with open(manifest_path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) == 1:
                refs.append(parts[0])
                labels.append(None)
            elif len(parts) == 2:
                refs.append(parts[0])
                try:
                    labels.append(int(parts[1]))
                except ValueError as exc:
                    raise FormatError(
                        f"manifest line {lineno}: label {parts[1]!r} is not an integer"
                    ) from exc
            else:
                raise FormatError(f"manifest line {lineno} has {len(parts)} columns")
    if not refs:
        raise FormatError("manifest lists no items")
    have = [l is not None for l in labels]
    if any(have) and not all(have):
        raise FormatError("manifest mixes labeled and unlabeled items")
    label_arr = np.asarray(labels, dtype=np.int64) if all(have) else None
    return refs, label_arr


def _write_png(path, img: np.ndarray) -> None:
    arr = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    if arr.shape[2] == 1:
        pil = PILImage.fromarray(arr[:, :, 0], mode="L")
    else:
        pil = PILImage.fromarray(arr, mode="RGB")
    pil.save(path, format="PNG")


def _read_png(path) -> np.ndarray:
    with PILImage.open(path) as pil:
        arr = np.asarray(pil)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.dtype != np.uint8:
        raise FormatError(f"{path}: expected 8-bit image, got {arr.dtype}")
    return (arr.astype(np.float32) / 255.0).astype(np.float32)


# ---------------------------------------------------------------------------
# Synthetic corpora
# ---------------------------------------------------------------------------


def zipf_class_sizes(num_classes: int, total: int, exponent: float = 1.0) -> np.ndarray:
    """Integer class sizes proportional to rank**(-exponent), summing to total.

    Fractional targets are rounded by largest remainder; every class is kept
    nonempty by moving items from the largest classes when necessary.
    """
    if num_classes < 1 or total < num_classes:
        raise ConfigError("need total >= num_classes >= 1")
    ranks = np.arange(1, num_classes + 1, dtype=np.float64)
    weights = ranks ** (-float(exponent))
    target = total * weights / weights.sum()
    sizes = np.floor(target).astype(np.int64)
    remainder = target - sizes
    short = total - int(sizes.sum())
    # Ties broken toward the lower class index for determinism.
    order = np.lexsort((ranks, -remainder))
    sizes[order[:short]] += 1
    for k in range(num_classes - 1, -1, -1):
        if sizes[k] == 0:
            donor = int(np.argmax(sizes))
            sizes[donor] -= 1
            sizes[k] += 1
    assert sizes.sum() == total and (sizes > 0).all()
    return sizes


def _class_prototypes(num_classes: int, channels: int, rng: np.random.Generator):
    """Per-class rendering parameters: a mean color and an oriented wave."""
    return {
        "color": rng.uniform(0.2, 0.8, size=(num_classes, channels)),
        "freq": rng.uniform(1.0, 4.0, size=(num_classes, 2)),
        "phase": rng.uniform(0.0, 2.0 * np.pi, size=num_classes),
        "amp": rng.uniform(0.5, 1.0, size=(num_classes, channels)),
    }


def _render_item(proto, cls: int, shape, separation: float, noise_std: float, rng):
    h, w, c = shape
    yy, xx = np.meshgrid(
        np.linspace(0.0, 1.0, h, dtype=np.float64),
        np.linspace(0.0, 1.0, w, dtype=np.float64),
        indexing="ij",
    )
    phase = proto["phase"][cls] + rng.uniform(-0.5, 0.5)
    wave = np.sin(
        2.0 * np.pi * (proto["freq"][cls, 0] * xx + proto["freq"][cls, 1] * yy) + phase
    )
    img = np.full((h, w, c), 0.5, dtype=np.float64)
    img += separation * (proto["color"][cls] - 0.5)[None, None, :]
    img += separation * 0.25 * wave[:, :, None] * proto["amp"][cls][None, None, :]
    img += rng.normal(0.0, noise_std, size=(h, w, c))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _synthesize(class_sizes, image_spec, class_separation, noise_std, rng, name, class_rng=None):
    h, w, c = image_spec
    if h < 4 or w < 4 or c not in (1, 3):
        raise ConfigError(f"unsupported image_spec {image_spec}")
    if class_separation < 0:
        raise ConfigError("class_separation must be >= 0")
    num_classes = len(class_sizes)
    proto = _class_prototypes(num_classes, c, class_rng if class_rng is not None else rng)
    images, labels = [], []
    for cls, size in enumerate(class_sizes):
        for _ in range(int(size)):
            images.append(
                _render_item(proto, cls, (h, w, c), class_separation, noise_std, rng)
            )
            labels.append(cls)
    ds = Dataset(images=images, labels=np.asarray(labels), num_classes=num_classes, name=name)
    ds.validate()
    return ds


def synth_curated(
    num_classes: int,
    per_class: int,
    image_spec=(32, 32, 3),
    class_separation: float = 1.0,
    rng=None,
    noise_std: float = 0.1,
    class_rng=None,
) -> Dataset:
    """Balanced synthetic corpus: ``per_class`` items for each class.

    ``class_separation`` scales the class signal; at 0 every item is pure
    noise around mid-gray and no probe can beat chance. Passing the same
    ``class_rng`` across calls reuses one set of class prototypes while
    ``rng`` draws independent items, which is how train and probe splits of
    one corpus are made.
    """
    if per_class < 1:
        raise ConfigError("per_class must be >= 1")
    rng = ensure_rng(rng)
    sizes = np.full(num_classes, per_class, dtype=np.int64)
    return _synthesize(
        sizes, image_spec, class_separation, noise_std, rng, "synth-curated", class_rng
    )


def synth_uncurated(
    num_classes: int,
    total: int,
    zipf_exponent: float = 1.0,
    image_spec=(32, 32, 3),
    class_separation: float = 1.0,
    rng=None,
    noise_std: float = 0.1,
    class_rng=None,
) -> Dataset:
    """Long-tailed synthetic corpus with Zipf-distributed class sizes."""
    rng = ensure_rng(rng)
    sizes = zipf_class_sizes(num_classes, total, zipf_exponent)
    return _synthesize(
        sizes, image_spec, class_separation, noise_std, rng, "synth-uncurated", class_rng
    )


def fine_subset(dataset: Dataset, class_list) -> Dataset:
    """Items whose label is in ``class_list``, relabeled to 0..len(class_list)-1.

    Item order follows the source dataset.
    """
    if dataset.labels is None:
        raise ConfigError("fine_subset requires a labeled dataset")
    class_list = list(class_list)
    if not class_list:
        raise ConfigError("class_list is empty")
    if len(set(class_list)) != len(class_list):
        raise ConfigError("class_list has duplicates")
    for cls in class_list:
        if not 0 <= cls < dataset.num_classes:
            raise ConfigError(f"class {cls} outside [0, {dataset.num_classes})")
    remap = {cls: i for i, cls in enumerate(class_list)}
    indices = [i for i, lab in enumerate(dataset.labels) if int(lab) in remap]
    if not indices:
        raise ConfigError("no items match class_list")
    sub = dataset.select(indices, name=f"{dataset.name}/fine")
    sub.labels = np.asarray([remap[int(l)] for l in sub.labels], dtype=np.int64)
    sub.num_classes = len(class_list)
    return sub
