"""Representation clustering: extraction, spherical k-means, partitioning.

Clustering normalizes representations to the unit sphere and minimizes the
summed cosine distance sum_i (1 - cos(x_i, c_{a(i)})). The per-cluster
optimal centroid under this objective is the normalized mean, so Lloyd
iterations never increase the objective; empty clusters are repaired by
re-seeding their centroid on the current farthest point, which leaves the
objective unchanged until the next assignment pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .container import read_container, write_container
from .data import Dataset, ensure_rng
from .errors import ConfigError, FormatError, NumericError

_MIN_NORM = 1e-30
CONVERGE_TOL = 1e-7
_MOVE_TOL = 1e-12


@dataclass
class RepresentationMatrix:
    """Row-per-item features extracted at a named layer."""

    rows: np.ndarray
    layer: str
    indices: np.ndarray  # item positions in the source dataset

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.rows.ndim != 2 or len(self.rows) != len(self.indices):
            raise ConfigError("rows and indices disagree")


@dataclass
class ClusterModel:
    centroids: np.ndarray  # (k, d), unit rows
    layer: str
    inertia: float
    objective_history: list = field(default_factory=list)

    @property
    def k(self) -> int:
        return int(self.centroids.shape[0])


def _unit_rows(rows: np.ndarray, what: str) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    norms = np.linalg.norm(rows, axis=1)
    if np.any(norms < _MIN_NORM):
        raise NumericError(f"{what} has zero-norm rows; cosine clustering undefined")
    return rows / norms[:, None]


def _assign_unit(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # argmax takes the first maximum, so exact ties go to the lowest index.
    return np.argmax(x @ centroids.T, axis=1)


def _cost(x: np.ndarray, labels: np.ndarray, centroids: np.ndarray) -> float:
    return float(np.sum(1.0 - np.einsum("ij,ij->i", x, centroids[labels])))


def _update_centroids(x, labels, k, previous):
    centroids = previous.copy()
    counts = np.bincount(labels, minlength=k)
    onehot = np.zeros((k, len(x)))
    onehot[labels, np.arange(len(x))] = 1.0
    sums = onehot @ x
    norms = np.linalg.norm(sums, axis=1)
    ok = (counts > 0) & (norms >= _MIN_NORM)
    centroids[ok] = sums[ok] / norms[ok, None]
    # A nonempty cluster whose members cancel keeps its previous centroid;
    # every unit vector scores its sum identically, so cost is unaffected.
    empties = np.flatnonzero(counts == 0)
    if len(empties):
        taken: set = set()
        for ke in empties:
            gaps = 1.0 - np.einsum("ij,ij->i", x, centroids[labels])
            for idx in taken:
                gaps[idx] = -np.inf
            far = int(np.argmax(gaps))
            centroids[ke] = x[far]
            taken.add(far)
    return centroids


def _plusplus_init(x: np.ndarray, k: int, rng) -> np.ndarray:
    n = len(x)
    centroids = np.empty((k, x.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = x[first]
    gaps = np.maximum(1.0 - x @ centroids[0], 0.0)
    for j in range(1, k):
        total = gaps.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=gaps / total))
        centroids[j] = x[idx]
        gaps = np.minimum(gaps, np.maximum(1.0 - x @ centroids[j], 0.0))
    return centroids


def _move_sweep(x: np.ndarray, labels: np.ndarray, k: int) -> bool:
    """Greedy single-point reassignment pass (Hartigan style), in place.

    For a fixed labeling the ideal cost is n - sum_k ||s_k|| with s_k the
    member sum, so moving row i from cluster a to b changes the summed norms
    by ||s_a - x_i|| - ||s_a|| + ||s_b + x_i|| - ||s_b||; any positive change
    lowers the cost. Escapes assignment/update fixed points that Lloyd alone
    cannot leave. Returns True when at least one row moved.
    """
    sums = np.zeros((k, x.shape[1]))
    np.add.at(sums, labels, x)
    norms = np.linalg.norm(sums, axis=1)
    moved = False
    for i in range(len(x)):
        a = labels[i]
        stripped = sums[a] - x[i]
        stripped_norm = np.linalg.norm(stripped)
        gains = np.linalg.norm(sums + x[i], axis=1) - norms + (stripped_norm - norms[a])
        gains[a] = 0.0
        b = int(np.argmax(gains))
        if gains[b] > _MOVE_TOL:
            sums[a] = stripped
            norms[a] = stripped_norm
            sums[b] = sums[b] + x[i]
            norms[b] = np.linalg.norm(sums[b])
            labels[i] = b
            moved = True
    return moved


def _lloyd(x: np.ndarray, k: int, max_iters: int, rng):
    centroids = _plusplus_init(x, k, rng)
    labels = None
    history = []
    for _ in range(max_iters):
        new_labels = _assign_unit(x, centroids)
        if labels is not None and np.array_equal(new_labels, labels):
            if not _move_sweep(x, new_labels, k):
                break
        labels = new_labels
        centroids = _update_centroids(x, labels, k, centroids)
        history.append(_cost(x, labels, centroids))
        if len(history) >= 2 and history[-2] - history[-1] < CONVERGE_TOL:
            break
    labels = _assign_unit(x, centroids)
    return centroids, labels, _cost(x, labels, centroids), history


def kmeans_cosine(
    rep: RepresentationMatrix | np.ndarray,
    k: int,
    max_iters: int = 100,
    n_init: int = 4,
    rng=None,
) -> ClusterModel:
    """Spherical k-means, best of ``n_init`` seeded restarts."""
    rows = rep.rows if isinstance(rep, RepresentationMatrix) else np.asarray(rep)
    layer = rep.layer if isinstance(rep, RepresentationMatrix) else "raw"
    if rows.ndim != 2 or len(rows) == 0:
        raise ConfigError(f"need a nonempty 2-d matrix, got shape {rows.shape}")
    if k < 1 or k > len(rows):
        raise ConfigError(f"k must be in [1, {len(rows)}], got {k}")
    if max_iters < 1 or n_init < 1:
        raise ConfigError("max_iters and n_init must be positive")
    x = _unit_rows(rows, "representations")
    rng = ensure_rng(rng)
    best = None
    for _ in range(n_init):
        centroids, labels, inertia, history = _lloyd(x, k, max_iters, rng)
        if best is None or inertia < best[2]:
            best = (centroids, labels, inertia, history)
    centroids, _, inertia, history = best
    return ClusterModel(
        centroids=centroids, layer=layer, inertia=inertia, objective_history=history
    )


def assign(model: ClusterModel, rep: RepresentationMatrix | np.ndarray) -> np.ndarray:
    """Nearest-centroid labels by cosine; exact ties go to the lowest index."""
    rows = rep.rows if isinstance(rep, RepresentationMatrix) else np.asarray(rep)
    if rows.ndim != 2 or rows.shape[1] != model.centroids.shape[1]:
        raise ConfigError(
            f"rows of dim {rows.shape} do not match centroids {model.centroids.shape}"
        )
    return _assign_unit(_unit_rows(rows, "representations"), model.centroids)


def partition(dataset: Dataset, assignments, k: int | None = None) -> list:
    """Split a dataset by cluster label; item order is preserved within each
    part and parts keep the parent's class space. Parts can be empty."""
    assignments = np.asarray(assignments, dtype=np.int64)
    if assignments.shape != (len(dataset),):
        raise ConfigError(
            f"assignments length {assignments.shape} does not match dataset {len(dataset)}"
        )
    if len(assignments) and assignments.min() < 0:
        raise ConfigError("negative cluster labels")
    k = int(assignments.max()) + 1 if k is None else int(k)
    if len(assignments) and assignments.max() >= k:
        raise ConfigError(f"cluster label {assignments.max()} outside [0, {k})")
    parts = []
    for j in range(k):
        idx = np.flatnonzero(assignments == j)
        parts.append(dataset.select(idx, name=f"{dataset.name}/cluster-{j}"))
    return parts


# ---------------------------------------------------------------------------
# Extraction and persistence
# ---------------------------------------------------------------------------


def extract_representations(
    state,
    dataset: Dataset,
    layer: str = "hidden",
    sample_size: int | None = None,
    rng=None,
    network: str | None = None,
    batch_size: int = 256,
) -> RepresentationMatrix:
    """Eval-mode features for clustering. ``layer`` selects the pooled
    encoder output, the projector's hidden activation, or the projection.
    Images are fed at native size; sampling without replacement when
    ``sample_size`` is given, keeping dataset order."""
    from . import model as model_mod

    if layer not in ("pooled", "hidden", "projection"):
        raise ConfigError(f"unknown layer {layer!r}")
    if network is None:
        network = "momentum" if state.has_momentum else "online"
    n = len(dataset)
    if sample_size is not None and sample_size < n:
        if sample_size < 1:
            raise ConfigError("sample_size must be positive")
        rng = ensure_rng(rng)
        indices = np.sort(rng.choice(n, size=sample_size, replace=False))
    else:
        indices = np.arange(n, dtype=np.int64)
    images = [dataset.images[i] for i in indices]
    if layer == "pooled":
        rows = model_mod.encode(state, images, network=network, batch_size=batch_size)
    else:
        hidden, z = model_mod.project(state, images, network=network, batch_size=batch_size)
        rows = hidden if layer == "hidden" else z
    return RepresentationMatrix(rows=rows, layer=layer, indices=indices)


def save_cluster_model(path, model: ClusterModel, assignments=None, indices=None) -> None:
    arrays = {"centroids": model.centroids.astype(np.float64)}
    if assignments is not None:
        arrays["assignments"] = np.asarray(assignments, dtype=np.int64)
    if indices is not None:
        arrays["indices"] = np.asarray(indices, dtype=np.int64)
    write_container(
        path,
        arrays,
        {
            "kind": "cluster-model",
            "version": 1,
            "layer": model.layer,
            "k": model.k,
            "inertia": model.inertia,
            "objective_history": list(map(float, model.objective_history)),
        },
    )


def load_cluster_model(path):
    arrays, meta = read_container(path)
    if meta.get("kind") != "cluster-model":
        raise FormatError(f"{path} is not a cluster model")
    model = ClusterModel(
        centroids=arrays["centroids"],
        layer=str(meta.get("layer", "hidden")),
        inertia=float(meta.get("inertia", 0.0)),
        objective_history=list(meta.get("objective_history", [])),
    )
    assignments = arrays.get("assignments")
    return model, assignments
