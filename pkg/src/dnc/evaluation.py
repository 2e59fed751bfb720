"""Evaluation: linear probes on frozen features, cluster metrics, reports.

The probe fits a multinomial logistic regression on frozen encoder features.
Default protocol: SGD with nesterov momentum and cosine decay, sweeping the
learning rate on a validation split carved out of the probe training set,
then refitting on the full training set at the chosen rate. The alternate
protocol swaps the optimizer for L-BFGS over an l2-regularization grid.

Cluster metrics score an assignment against class labels by brute counting:
majority-vote accuracy, mutual information (nats), and class coherence (the
item-weighted fraction of each class sitting in its modal cluster).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import model as model_mod
from .config import ProbeConfig
from .container import read_container
from .data import Dataset
from .errors import ConfigError, NumericError, PrerequisiteError

_PROBE_VAL, _PROBE_SHUFFLE = 0, 1


@dataclass
class ProbeResult:
    top1: float
    top5: float | None
    per_class: list
    chosen: float  # selected learning rate (sgd) or l2 strength (lbfgs)
    val_top1: float
    mode: str
    layer: str
    network: str

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Feature extraction
# ---------------------------------------------------------------------------


def _features(state, dataset: Dataset, layer: str, network: str, batch_size: int = 256):
    if layer == "pooled":
        rows = model_mod.encode(state, dataset.images, network=network, batch_size=batch_size)
    else:
        hidden, z = model_mod.project(
            state, dataset.images, network=network, batch_size=batch_size
        )
        rows = hidden if layer == "hidden" else z
    return np.asarray(rows, dtype=np.float64)


# ---------------------------------------------------------------------------
# Softmax regression fitters
# ---------------------------------------------------------------------------


def _softmax_stats(logits, y):
    shift = logits.max(axis=1, keepdims=True)
    expd = np.exp(logits - shift)
    probs = expd / expd.sum(axis=1, keepdims=True)
    n = len(y)
    nll = float(-np.mean(np.log(probs[np.arange(n), y] + 1e-300)))
    probs[np.arange(n), y] -= 1.0
    return nll, probs / n


def _fit_sgd(X, y, num_classes, lr, cfg: ProbeConfig, rng):
    n, d = X.shape
    W = np.zeros((d, num_classes))
    b = np.zeros(num_classes)
    vW = np.zeros_like(W)
    vb = np.zeros_like(b)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total = cfg.epochs * steps_per_epoch
    t = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for s in range(steps_per_epoch):
            idx = order[s * cfg.batch_size : (s + 1) * cfg.batch_size]
            if len(idx) == 0:
                continue
            lr_t = lr * (math.cos(math.pi * t / total) + 1.0) / 2.0
            _, g = _softmax_stats(X[idx] @ W + b, y[idx])
            dW = X[idx].T @ g + cfg.weight_decay * W
            db = g.sum(axis=0)
            vW = cfg.momentum * vW + dW
            vb = cfg.momentum * vb + db
            if cfg.nesterov:
                W -= lr_t * (dW + cfg.momentum * vW)
                b -= lr_t * (db + cfg.momentum * vb)
            else:
                W -= lr_t * vW
                b -= lr_t * vb
            t += 1
    return W, b


def _fit_lbfgs(X, y, num_classes, l2, cfg: ProbeConfig):
    from scipy.optimize import minimize

    n, d = X.shape
    onehot_rows = np.arange(n)

    def objective(wb):
        W = wb[: d * num_classes].reshape(d, num_classes)
        b = wb[d * num_classes :]
        logits = X @ W + b
        shift = logits.max(axis=1, keepdims=True)
        expd = np.exp(logits - shift)
        probs = expd / expd.sum(axis=1, keepdims=True)
        nll = float(-np.mean(np.log(probs[onehot_rows, y] + 1e-300)))
        loss = nll + l2 * float((W * W).sum())
        g = probs
        g[onehot_rows, y] -= 1.0
        g /= n
        dW = X.T @ g + 2.0 * l2 * W
        db = g.sum(axis=0)
        return loss, np.concatenate([dW.ravel(), db])

    res = minimize(
        objective,
        np.zeros(d * num_classes + num_classes),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": 500},
    )
    W = res.x[: d * num_classes].reshape(d, num_classes)
    b = res.x[d * num_classes :]
    return W, b


def _accuracy(X, y, W, b):
    pred = np.argmax(X @ W + b, axis=1)
    return float(np.mean(pred == y))


def _stratified_split(y, num_classes, fraction, rng):
    """Per-class holdout of about ``fraction``; at least one item held out
    per class that has two or more items."""
    val_mask = np.zeros(len(y), dtype=bool)
    for c in range(num_classes):
        members = np.flatnonzero(y == c)
        if len(members) < 2:
            continue
        take = max(1, int(round(fraction * len(members))))
        take = min(take, len(members) - 1)
        picked = rng.choice(members, size=take, replace=False)
        val_mask[picked] = True
    if not val_mask.any() or val_mask.all():
        raise ConfigError("validation split degenerate; adjust val_fraction")
    return ~val_mask, val_mask


def linear_probe(
    state,
    train: Dataset,
    test: Dataset,
    cfg: ProbeConfig | None = None,
) -> ProbeResult:
    """Linear evaluation of frozen features; returns test metrics under the
    hyperparameter chosen on the internal validation split."""
    cfg = cfg or ProbeConfig()
    cfg.validate()
    if train.labels is None or test.labels is None:
        raise PrerequisiteError("linear probe needs labeled train and test sets")
    if train.num_classes != test.num_classes:
        raise ConfigError("train/test class spaces differ")
    network = cfg.network
    if network == "momentum" and not state.has_momentum:
        network = "online"
    Xtr = _features(state, train, cfg.layer, network)
    Xte = _features(state, test, cfg.layer, network)
    ytr = train.labels
    yte = test.labels
    if not (np.isfinite(Xtr).all() and np.isfinite(Xte).all()):
        raise NumericError("probe features contain non-finite values")
    num_classes = train.num_classes
    split_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _PROBE_VAL]))
    fit_mask, val_mask = _stratified_split(ytr, num_classes, cfg.val_fraction, split_rng)

    if cfg.mode == "sgd":
        grid = list(cfg.lr_grid)
    else:
        lo, hi = cfg.l2_grid_range
        grid = list(np.logspace(math.log10(lo), math.log10(hi), cfg.l2_grid_points))

    best = None
    for gi, value in enumerate(grid):
        if cfg.mode == "sgd":
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _PROBE_SHUFFLE, gi]))
            W, b = _fit_sgd(Xtr[fit_mask], ytr[fit_mask], num_classes, value, cfg, rng)
        else:
            W, b = _fit_lbfgs(Xtr[fit_mask], ytr[fit_mask], num_classes, value, cfg)
        acc = _accuracy(Xtr[val_mask], ytr[val_mask], W, b)
        if best is None or acc > best[0]:
            best = (acc, gi, value)
    val_top1, gi, chosen = best

    # Refit on the full probe training set at the chosen setting.
    if cfg.mode == "sgd":
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _PROBE_SHUFFLE, 1000 + gi]))
        W, b = _fit_sgd(Xtr, ytr, num_classes, chosen, cfg, rng)
    else:
        W, b = _fit_lbfgs(Xtr, ytr, num_classes, chosen, cfg)

    logits = Xte @ W + b
    pred = np.argmax(logits, axis=1)
    top1 = float(np.mean(pred == yte))
    top5 = None
    if num_classes > 5:
        top5_idx = np.argsort(-logits, axis=1)[:, :5]
        top5 = float(np.mean([yte[i] in top5_idx[i] for i in range(len(yte))]))
    per_class = []
    for c in range(num_classes):
        members = yte == c
        per_class.append(float(np.mean(pred[members] == c)) if members.any() else float("nan"))
    return ProbeResult(
        top1=top1,
        top5=top5,
        per_class=per_class,
        chosen=float(chosen),
        val_top1=float(val_top1),
        mode=cfg.mode,
        layer=cfg.layer,
        network=network,
    )


# ---------------------------------------------------------------------------
# Cluster metrics
# ---------------------------------------------------------------------------


def _joint_counts(assignments, labels):
    assignments = np.asarray(assignments, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if assignments.shape != labels.shape or assignments.ndim != 1 or len(labels) == 0:
        raise ConfigError("assignments and labels must be equal-length nonempty vectors")
    if assignments.min() < 0 or labels.min() < 0:
        raise ConfigError("assignments and labels must be nonnegative")
    k = int(assignments.max()) + 1
    c = int(labels.max()) + 1
    joint = np.zeros((k, c), dtype=np.int64)
    np.add.at(joint, (assignments, labels), 1)
    return joint


def cluster_top1(assignments, labels) -> float:
    """Majority-vote accuracy: each cluster predicts its modal class label
    (ties to the smallest label)."""
    joint = _joint_counts(assignments, labels)
    return float(joint.max(axis=1).sum() / joint.sum())


def cluster_mi(assignments, labels) -> float:
    """Plug-in mutual information between assignment and label, in nats."""
    joint = _joint_counts(assignments, labels).astype(np.float64)
    n = joint.sum()
    p = joint / n
    pk = p.sum(axis=1, keepdims=True)
    pc = p.sum(axis=0, keepdims=True)
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / (pk @ pc)[mask])))


def class_coherence(assignments, labels) -> float:
    """Item-weighted fraction of each class that sits in the class's modal
    cluster (ties to the smallest cluster index)."""
    joint = _joint_counts(assignments, labels)
    return float(joint.max(axis=0).sum() / joint.sum())


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def _read_metrics(path):
    rows = []
    if os.path.isfile(path):
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    rows.append(json.loads(line))
    return rows


def _run_summary(run_dir) -> dict:
    plan_path = os.path.join(run_dir, "plan.json")
    if not os.path.isfile(plan_path):
        raise PrerequisiteError(f"{run_dir} has no plan.json; not a run directory")
    with open(plan_path, "r", encoding="utf-8") as fh:
        plan = json.load(fh)
    out = {"run_dir": str(run_dir), "digest": plan.get("digest"), "stages": {}}
    report_path = os.path.join(run_dir, "report.json")
    if os.path.isfile(report_path):
        with open(report_path, "r", encoding="utf-8") as fh:
            out["stages"] = json.load(fh).get("stages", {})
    clusters_path = os.path.join(run_dir, "clusters", "clusters.npz")
    if os.path.isfile(clusters_path):
        arrays, meta = read_container(clusters_path)
        sizes = np.bincount(arrays["assignments"], minlength=int(meta.get("k", 0)))
        out["cluster_sizes"] = sizes.tolist()
        out["cluster_method"] = meta.get("method")
    probe_path = os.path.join(run_dir, "probe.json")
    if os.path.isfile(probe_path):
        with open(probe_path, "r", encoding="utf-8") as fh:
            out["probe"] = json.load(fh)
    out["curves"] = {
        "stage1": _read_metrics(os.path.join(run_dir, "stage1", "metrics.jsonl")),
        "stage3": _read_metrics(os.path.join(run_dir, "stage3", "metrics.jsonl")),
    }
    return out


def emit_report(run_dirs, out_dir=None) -> dict:
    """Render summary.json plus loss-curve and cluster-size plots for one or
    more run directories. Returns the paths written."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if isinstance(run_dirs, (str, os.PathLike)):
        run_dirs = [run_dirs]
    if not run_dirs:
        raise ConfigError("emit_report needs at least one run directory")
    out_dir = out_dir or os.path.join(run_dirs[0], "report")
    os.makedirs(out_dir, exist_ok=True)
    summaries = [_run_summary(d) for d in run_dirs]

    summary_path = os.path.join(out_dir, "summary.json")
    with open(summary_path, "w", encoding="utf-8") as fh:
        json.dump(
            [{k: v for k, v in s.items() if k != "curves"} for s in summaries],
            fh,
            sort_keys=True,
            indent=2,
        )
        fh.write("\n")

    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for s in summaries:
        name = os.path.basename(os.path.normpath(s["run_dir"]))
        for ax, stage in zip(axes, ("stage1", "stage3")):
            rows = s["curves"][stage]
            if rows:
                ax.plot([r["step"] for r in rows], [r["loss"] for r in rows], label=name)
    for ax, title in zip(axes, ("contrastive pretraining", "distillation")):
        ax.set_title(title)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        if ax.lines:
            ax.legend(fontsize=7)
    fig.tight_layout()
    curves_path = os.path.join(out_dir, "loss_curves.png")
    fig.savefig(curves_path, dpi=110)
    plt.close(fig)

    paths = {"summary": summary_path, "loss_curves": curves_path}
    with_sizes = [s for s in summaries if "cluster_sizes" in s]
    if with_sizes:
        fig, ax = plt.subplots(figsize=(6, 4))
        width = 0.8 / len(with_sizes)
        for i, s in enumerate(with_sizes):
            sizes = s["cluster_sizes"]
            xs = np.arange(len(sizes)) + i * width
            ax.bar(xs, sizes, width=width, label=os.path.basename(os.path.normpath(s["run_dir"])))
        ax.set_xlabel("cluster")
        ax.set_ylabel("items")
        ax.set_title("cluster sizes")
        ax.legend(fontsize=7)
        fig.tight_layout()
        sizes_path = os.path.join(out_dir, "cluster_sizes.png")
        fig.savefig(sizes_path, dpi=110)
        plt.close(fig)
        paths["cluster_sizes"] = sizes_path
    return paths
