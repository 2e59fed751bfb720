"""Three-stage training pipeline with resumable, deterministic artifacts.

Stage layout under the run directory:

  plan.json                     resolved config + digest, written once
  stage1/checkpoint.npz         base model (contrastive)
  clusters/clusters.npz         centroids (if clustered) + assignments
  stage2/expert-<k>/checkpoint.npz
  stage3/checkpoint.npz         student with regression heads
  report.json                   stage summaries; the only file with timings

Every checkpoint is a deterministic array container stamped with the run's
config digest, so identical configs reproduce identical bytes and a resumed
run can verify that existing artifacts belong to it. All randomness is
derived from the run seed through fixed named streams; per-step augmentation
generators are keyed by (seed, stage, step, slot, view), which makes results
independent of how work is split across expert worker processes.
"""

from __future__ import annotations

import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace

import multiprocessing as mp

import numpy as np

from . import model as model_mod
from .augment import make_view, view1_preset, view2_preset
from .cluster import extract_representations, kmeans_cosine, assign as cluster_assign
from .config import RunConfig, config_digest, config_to_dict
from .container import read_container, write_container
from .data import Dataset, load_dataset, synth_curated, synth_uncurated
from .errors import ConfigError, FormatError, NumericError, PrerequisiteError
from .losses import moclr_loss_grad, regression_mse_grad
from .model import EncoderConfig, HeadConfig, ModelState
from .schedule import ScheduleSpec, allocate_expert_budget, init_optimizer, lars_step, lr_at

CHECKPOINT_VERSION = 1

# Named seed streams; fixed constants keep derived generators stable across
# resumes and worker placement.
_S_INIT, _S_BATCH, _S_AUG = 0, 1, 2
STAGE1_STREAM = 10
EXPERT_STREAM = 20
DISTILL_STREAM = 30
CLUSTER_STREAM = 40
PROBE_STREAM = 50
_DATA_CLASSES, _DATA_CORPUS, _DATA_PROBE_TRAIN, _DATA_PROBE_TEST = 0, 1, 2, 3


def derive_rng(*path) -> np.random.Generator:
    flat = []
    for part in path:
        flat.extend(part if isinstance(part, (tuple, list)) else (part,))
    if any(int(p) < 0 for p in flat):
        raise ConfigError(f"seed path must be nonnegative, got {flat}")
    return np.random.default_rng(np.random.SeedSequence([int(p) for p in flat]))


def _seed_tuple(seed) -> tuple:
    return tuple(seed) if isinstance(seed, (tuple, list)) else (int(seed),)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    state: ModelState
    stage: str
    config_digest: str
    version: int = CHECKPOINT_VERSION
    extra: dict | None = None


def save_checkpoint(path, state: ModelState, stage: str, config_digest: str, extra: dict | None = None) -> None:
    meta = {
        "kind": "checkpoint",
        "version": CHECKPOINT_VERSION,
        "stage": stage,
        "config_digest": config_digest,
        "step": int(state.step),
        "encoder_cfg": asdict(state.encoder_cfg),
        "head_cfg": asdict(state.head_cfg),
    }
    if extra:
        meta["extra"] = extra
    tmp = str(path) + ".tmp"
    write_container(tmp, model_mod.state_to_arrays(state), meta)
    os.replace(tmp, path)


def load_checkpoint(path, expect_digest: str | None = None) -> Checkpoint:
    arrays, meta = read_container(path)
    if meta.get("kind") != "checkpoint":
        raise FormatError(f"{path} is not a checkpoint")
    if int(meta.get("version", -1)) != CHECKPOINT_VERSION:
        raise FormatError(
            f"{path}: checkpoint version {meta.get('version')} unsupported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    if expect_digest is not None and meta.get("config_digest") != expect_digest:
        raise PrerequisiteError(
            f"{path} belongs to config {meta.get('config_digest')}, expected {expect_digest}"
        )
    enc_meta = dict(meta["encoder_cfg"])
    enc_meta["stage_channels"] = tuple(enc_meta["stage_channels"])
    encoder_cfg = EncoderConfig(**enc_meta)
    head_cfg = HeadConfig(**meta["head_cfg"])
    state = model_mod.state_from_arrays(arrays, encoder_cfg, head_cfg)
    return Checkpoint(
        state=state,
        stage=str(meta.get("stage", "")),
        config_digest=str(meta.get("config_digest", "")),
        version=int(meta["version"]),
        extra=meta.get("extra"),
    )


def _write_metrics(path, history) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in history:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Data materialization
# ---------------------------------------------------------------------------


def materialize_data(data_cfg) -> dict:
    """Build {corpus, probe_train, probe_test} from a data config.

    Synthetic splits share class prototypes through a common stream so the
    probe measures the same classes the corpus was drawn from.
    """
    data_cfg.validate()
    if data_cfg.kind == "path":
        out = {"corpus": load_dataset(data_cfg.path)}
        out["probe_train"] = (
            load_dataset(data_cfg.probe_train_path) if data_cfg.probe_train_path else None
        )
        out["probe_test"] = (
            load_dataset(data_cfg.probe_test_path) if data_cfg.probe_test_path else None
        )
        return out
    h, w = data_cfg.image_size
    spec = (int(h), int(w), int(data_cfg.channels))
    common = dict(
        image_spec=spec,
        class_separation=data_cfg.class_separation,
        noise_std=data_cfg.noise_std,
    )
    class_rng = lambda: derive_rng(data_cfg.seed, _DATA_CLASSES)  # noqa: E731
    if data_cfg.kind == "curated":
        corpus = synth_curated(
            data_cfg.num_classes,
            data_cfg.per_class,
            rng=derive_rng(data_cfg.seed, _DATA_CORPUS),
            class_rng=class_rng(),
            **common,
        )
    else:
        corpus = synth_uncurated(
            data_cfg.num_classes,
            data_cfg.total,
            zipf_exponent=data_cfg.zipf_exponent,
            rng=derive_rng(data_cfg.seed, _DATA_CORPUS),
            class_rng=class_rng(),
            **common,
        )
    probe_train = synth_curated(
        data_cfg.num_classes,
        data_cfg.probe_per_class,
        rng=derive_rng(data_cfg.seed, _DATA_PROBE_TRAIN),
        class_rng=class_rng(),
        **common,
    )
    probe_test = synth_curated(
        data_cfg.num_classes,
        data_cfg.probe_test_per_class,
        rng=derive_rng(data_cfg.seed, _DATA_PROBE_TEST),
        class_rng=class_rng(),
        **common,
    )
    return {"corpus": corpus, "probe_train": probe_train, "probe_test": probe_test}


# ---------------------------------------------------------------------------
# Contrastive training
# ---------------------------------------------------------------------------


def _effective_spec(spec: ScheduleSpec, epochs: float) -> ScheduleSpec:
    # Short stages clamp warmup to a fifth of their budget so the ramp never
    # swallows the whole run.
    warmup = min(spec.warmup_epochs, 0.2 * epochs)
    return replace(spec, warmup_epochs=warmup)


def _view_batch(dataset, indices, dist, seed_path, step, view_idx, dtype):
    views = [
        make_view(
            dataset.images[item],
            dist,
            derive_rng(seed_path, _S_AUG, step, slot, view_idx),
        )
        for slot, item in enumerate(indices)
    ]
    return model_mod.images_to_batch(views, dtype=dtype)


def _check_finite(loss, stage, step, history):
    if not np.isfinite(loss):
        recent = [round(h["loss"], 6) for h in history[-5:]]
        raise NumericError(f"{stage}: non-finite loss at step {step}; recent {recent}")


def train_contrastive(
    dataset: Dataset,
    spec: ScheduleSpec,
    epochs: float,
    seed,
    init: ModelState | None = None,
    enc_cfg: EncoderConfig | None = None,
    head_cfg: HeadConfig | None = None,
    view1=None,
    view2=None,
    stage: str = "stage1",
    log_path=None,
):
    """Contrastive pretraining for ``epochs`` reference epochs.

    Returns (state, history). With the momentum encoder enabled, each step
    runs both views through both copies, scores online-vs-momentum in both
    directions, updates online parameters with LARS, and moves the momentum
    copy along the cosine tau ramp. Without it, the same two view terms are
    kept and gradients flow through both online passes.
    """
    spec.validate()
    seed_path = _seed_tuple(seed)
    total_steps = spec.epochs_to_steps(epochs)
    eff_spec = _effective_spec(spec, epochs)
    if init is not None:
        state = init
    else:
        state = model_mod.init_model(
            enc_cfg,
            head_cfg,
            rng=derive_rng(seed_path, _S_INIT),
            momentum_copy=spec.use_momentum_encoder,
        )
    if total_steps == 0:
        if log_path:
            _write_metrics(log_path, [])
        return state, []
    if len(dataset) == 0:
        raise ConfigError(f"{stage}: cannot train on an empty dataset")
    if view1 is None or view2 is None:
        h, w, _ = dataset.image_shape
        view1 = view1 or view1_preset((h, w))
        view2 = view2 or view2_preset((h, w))
    dtype = state.online["enc.stem.conv.w"].dtype
    enc_c, head_c = state.encoder_cfg, state.head_cfg
    batch_rng = derive_rng(seed_path, _S_BATCH)
    opt = init_optimizer()
    history = []
    n = len(dataset)
    for step in range(total_steps):
        lr = lr_at(step, total_steps, eff_spec)
        indices = batch_rng.integers(0, n, size=spec.batch_size)
        x1 = _view_batch(dataset, indices, view1, seed_path, step, 0, dtype)
        x2 = _view_batch(dataset, indices, view2, seed_path, step, 1, dtype)
        z1, _, _, cache1 = model_mod.network_forward(
            state.online, state.online_stats, enc_c, head_c, x1, True
        )
        z2, _, _, cache2 = model_mod.network_forward(
            state.online, state.online_stats, enc_c, head_c, x2, True
        )
        if spec.use_momentum_encoder:
            zm1, _, _, _ = model_mod.network_forward(
                state.momentum, state.momentum_stats, enc_c, head_c, x1, True
            )
            zm2, _, _, _ = model_mod.network_forward(
                state.momentum, state.momentum_stats, enc_c, head_c, x2, True
            )
        else:
            zm1, zm2 = z1, z2
        loss, g_z1, g_zm2, g_z2, g_zm1 = moclr_loss_grad(
            z1, zm2, z2, zm1, spec.temperature
        )
        _check_finite(loss, stage, step, history)
        if spec.use_momentum_encoder:
            d1, d2 = g_z1, g_z2
        else:
            d1, d2 = g_z1 + g_zm1, g_z2 + g_zm2
        grads = model_mod.network_backward(d1.astype(dtype), cache1)
        for k, v in model_mod.network_backward(d2.astype(dtype), cache2).items():
            grads[k] += v
        lars_step(state.online, grads, opt, lr, spec)
        row = {"step": state.step, "loss": float(loss), "lr": float(lr)}
        if spec.use_momentum_encoder:
            tau = model_mod.tau_schedule(step, total_steps, spec.tau_base)
            model_mod.ema_update(state, tau)
            row["tau"] = float(tau)
        state.step += 1
        history.append(row)
    if log_path:
        _write_metrics(log_path, history)
    return state, history


# ---------------------------------------------------------------------------
# Distillation
# ---------------------------------------------------------------------------


def _teacher_network(state: ModelState) -> str:
    return "momentum" if state.has_momentum else "online"


def _teacher_project_batch(state: ModelState, x) -> np.ndarray:
    params, stats = (
        (state.momentum, state.momentum_stats)
        if state.has_momentum
        else (state.online, state.online_stats)
    )
    z, _, _, _ = model_mod.network_forward(
        params, stats, state.encoder_cfg, state.head_cfg, x, False
    )
    return z


def _expert_targets_batch(experts, batch_assign, x):
    dims = [e.head_cfg.output for e in experts if e is not None]
    if not dims:
        raise PrerequisiteError("no expert teachers available")
    out = np.zeros((x.shape[0], dims[0]), dtype=np.float64)
    for k in np.unique(batch_assign):
        rows = np.flatnonzero(batch_assign == k)
        teacher = experts[int(k)]
        if teacher is None:
            raise PrerequisiteError(f"items assigned to cluster {k} but expert {k} is missing")
        out[rows] = _teacher_project_batch(teacher, x[rows])
    return out


def distill(
    dataset: Dataset,
    spec: ScheduleSpec,
    epochs: float,
    base_teacher: ModelState,
    expert_teachers: list,
    assignments,
    seed,
    enc_cfg: EncoderConfig | None = None,
    head_cfg: HeadConfig | None = None,
    view1=None,
    view2=None,
    targets: str = "both",
    teacher_view: str = "augmented",
    stage: str = "stage3",
    log_path=None,
):
    """Train a student to regress frozen teacher projections.

    The student carries K+1 regression heads on top of its projection; head
    0 predicts the base teacher and head k+1 the expert for cluster k, where
    each item only exercises the head of its own cluster. Teachers run in
    eval mode on the student's augmented views, or on the fixed unaugmented
    image when ``teacher_view`` is "center_crop" (one cached projection per
    item). Losses of the two views are averaged.
    """
    spec.validate()
    if targets not in ("both", "base_only", "experts_only"):
        raise ConfigError(f"unknown distill targets {targets!r}")
    if teacher_view not in ("augmented", "center_crop"):
        raise ConfigError(f"unknown teacher view {teacher_view!r}")
    assignments = np.asarray(assignments, dtype=np.int64)
    if assignments.shape != (len(dataset),):
        raise ConfigError("assignments do not match the dataset")
    k_clusters = len(expert_teachers)
    if len(assignments) and (assignments.min() < 0 or assignments.max() >= k_clusters):
        raise ConfigError("assignment labels outside the expert range")
    seed_path = _seed_tuple(seed)
    total_steps = spec.epochs_to_steps(epochs)
    eff_spec = _effective_spec(spec, epochs)
    student = model_mod.init_model(
        enc_cfg or base_teacher.encoder_cfg,
        head_cfg or base_teacher.head_cfg,
        num_regressors=k_clusters + 1,
        rng=derive_rng(seed_path, _S_INIT),
        momentum_copy=False,
    )
    if total_steps == 0:
        if log_path:
            _write_metrics(log_path, [])
        return student, []
    if len(dataset) == 0:
        raise ConfigError(f"{stage}: cannot distill on an empty dataset")
    if view1 is None or view2 is None:
        h, w, _ = dataset.image_shape
        view1 = view1 or view1_preset((h, w))
        view2 = view2 or view2_preset((h, w))
    dtype = student.online["enc.stem.conv.w"].dtype
    enc_c, head_c = student.encoder_cfg, student.head_cfg

    use_base = targets in ("both", "base_only")
    use_experts = targets in ("both", "experts_only")
    active_heads = []
    if use_base:
        active_heads.append(0)
    if use_experts:
        active_heads.extend(range(1, k_clusters + 1))

    # Trainable parameters: student network plus active regression heads.
    params = dict(student.online)
    for idx in active_heads:
        for k, v in student.regressors[idx].items():
            params[f"reg{idx}.{k}"] = v

    cached_base = cached_expert = None
    if teacher_view == "center_crop":
        # One deterministic teacher projection per item, computed up front.
        x_all = model_mod.images_to_batch(dataset.images, dtype=dtype)
        chunks = range(0, len(dataset), spec.batch_size)
        if use_base:
            cached_base = np.concatenate(
                [_teacher_project_batch(base_teacher, x_all[i : i + spec.batch_size]) for i in chunks]
            )
        if use_experts:
            cached_expert = np.concatenate(
                [
                    _expert_targets_batch(
                        expert_teachers, assignments[i : i + spec.batch_size], x_all[i : i + spec.batch_size]
                    )
                    for i in chunks
                ]
            )

    batch_rng = derive_rng(seed_path, _S_BATCH)
    opt = init_optimizer()
    history = []
    n = len(dataset)
    for step in range(total_steps):
        lr = lr_at(step, total_steps, eff_spec, peak=eff_spec.peak_distill_lr)
        indices = batch_rng.integers(0, n, size=spec.batch_size)
        batch_assign = assignments[indices]
        loss_total = 0.0
        grads: dict = {}
        for view_idx, dist in ((0, view1), (1, view2)):
            xv = _view_batch(dataset, indices, dist, seed_path, step, view_idx, dtype)
            if teacher_view == "augmented":
                t_base = _teacher_project_batch(base_teacher, xv) if use_base else None
                t_exp = (
                    _expert_targets_batch(expert_teachers, batch_assign, xv)
                    if use_experts
                    else None
                )
            else:
                t_base = cached_base[indices] if use_base else None
                t_exp = cached_expert[indices] if use_experts else None
            z, _, _, net_cache = model_mod.network_forward(
                student.online, student.online_stats, enc_c, head_c, xv, True
            )
            dz = np.zeros_like(z, dtype=np.float64)
            view_loss = 0.0
            if use_base:
                _, pred_b, cache_b = model_mod.mlp_head_forward(
                    student.regressors[0], student.regressor_stats[0], z, True, False
                )
                lb, dpred_b = regression_mse_grad(pred_b, t_base)
                view_loss += lb
                hg, dz_b = model_mod.mlp_head_backward(0.5 * dpred_b.astype(dtype), cache_b)
                dz += dz_b
                for k, v in hg.items():
                    _accum(grads, f"reg0.{k}", v)
            if use_experts:
                for k in np.unique(batch_assign):
                    rows = np.flatnonzero(batch_assign == k)
                    idx = int(k) + 1
                    _, pred_k, cache_k = model_mod.mlp_head_forward(
                        student.regressors[idx], student.regressor_stats[idx], z[rows], True, False
                    )
                    lk, dpred_k = regression_mse_grad(pred_k, t_exp[rows])
                    view_loss += lk * len(rows) / len(indices)
                    hg, dz_k = model_mod.mlp_head_backward(
                        0.5 * (len(rows) / len(indices)) * dpred_k.astype(dtype), cache_k
                    )
                    dz[rows] += dz_k
                    for kk, v in hg.items():
                        _accum(grads, f"reg{idx}.{kk}", v)
            loss_total += 0.5 * view_loss
            for k, v in model_mod.network_backward(dz.astype(dtype), net_cache).items():
                _accum(grads, k, v)
        _check_finite(loss_total, stage, step, history)
        lars_step(params, grads, opt, lr, spec)
        history.append({"step": state_step(student), "loss": float(loss_total), "lr": float(lr)})
        student.step += 1
    if log_path:
        _write_metrics(log_path, history)
    return student, history


def state_step(state: ModelState) -> int:
    return int(state.step)


def _accum(grads: dict, key: str, value) -> None:
    if key in grads:
        grads[key] += value
    else:
        grads[key] = value


# ---------------------------------------------------------------------------
# Stage orchestration
# ---------------------------------------------------------------------------


def _expert_worker(args) -> int:
    (
        k,
        out_dir,
        subset,
        spec,
        budget,
        seed_path,
        enc_cfg,
        head_cfg,
        view_size,
        digest,
    ) = args
    v1, v2 = view1_preset(view_size), view2_preset(view_size)
    state, history = train_contrastive(
        subset,
        spec,
        budget,
        seed_path,
        enc_cfg=enc_cfg,
        head_cfg=head_cfg,
        view1=v1,
        view2=v2,
        stage=f"expert-{k}",
        log_path=os.path.join(out_dir, "metrics.jsonl"),
    )
    save_checkpoint(
        os.path.join(out_dir, "checkpoint.npz"),
        state,
        stage=f"expert-{k}",
        config_digest=digest,
        extra={"cluster": int(k), "budget_epochs": float(budget), "items": len(subset)},
    )
    return int(k)


def _spawn_safe() -> bool:
    """Whether spawned children can rebuild ``__main__``.

    Spawn re-imports the parent's main module; when that module came from
    stdin or an interactive prompt the child would block trying to re-read
    it, so those callers must stay in-process.
    """
    main = sys.modules.get("__main__")
    if main is None or getattr(main, "__spec__", None) is not None:
        return True
    path = sys.argv[0] if sys.argv else ""
    return path not in ("", "-", "-c") and os.path.exists(path)


def _run_expert_jobs(jobs, workers: int):
    """Run expert jobs, in spawned worker processes when parallel.

    Each job derives every generator from its own seed path, so results do
    not depend on process placement: a serial in-process loop and an N-worker
    spawn pool produce identical artifact bytes.
    """
    if not jobs:
        return []
    if workers <= 1 or not _spawn_safe():
        return [_expert_worker(job) for job in jobs]
    ctx = mp.get_context("spawn")
    done = []
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs)), mp_context=ctx) as pool:
        for k in pool.map(_expert_worker, jobs):
            done.append(k)
    return done


# Stage artifact paths inside a run directory.
def stage1_checkpoint_path(run_dir):
    return os.path.join(run_dir, "stage1", "checkpoint.npz")


def clusters_path(run_dir):
    return os.path.join(run_dir, "clusters", "clusters.npz")


def expert_checkpoint_path(run_dir, k: int):
    return os.path.join(run_dir, "stage2", f"expert-{k}", "checkpoint.npz")


def student_checkpoint_path(run_dir):
    return os.path.join(run_dir, "stage3", "checkpoint.npz")


ALL_STAGES = ("stage1", "clusters", "stage2", "stage3")


class _RunContext:
    """Lazily materialized shared inputs for stage execution."""

    def __init__(self, cfg: RunConfig, run_dir: str, workers: int):
        cfg.validate()
        self.cfg = cfg
        self.run_dir = str(run_dir)
        self.workers = workers
        self.digest = config_digest(cfg)
        self._data = None

    @property
    def data(self) -> dict:
        if self._data is None:
            self._data = materialize_data(self.cfg.data)
        return self._data

    @property
    def corpus(self) -> Dataset:
        return self.data["corpus"]

    @property
    def view_size(self):
        if self.cfg.view_size is not None:
            return tuple(self.cfg.view_size)
        h, w, _ = self.corpus.image_shape
        return (h, w)

    def views(self):
        return view1_preset(self.view_size), view2_preset(self.view_size)


def ensure_plan(cfg: RunConfig, run_dir) -> str:
    """Write plan.json on first use; refuse a run dir made for another config."""
    digest = config_digest(cfg)
    os.makedirs(run_dir, exist_ok=True)
    plan_path = os.path.join(run_dir, "plan.json")
    if os.path.isfile(plan_path):
        with open(plan_path, "r", encoding="utf-8") as fh:
            plan = json.load(fh)
        if plan.get("digest") != digest:
            raise ConfigError(
                f"run dir {run_dir} was created for config {plan.get('digest')}, "
                f"this config is {digest}"
            )
    else:
        with open(plan_path, "w", encoding="utf-8") as fh:
            json.dump(
                {"version": 1, "digest": digest, "config": config_to_dict(cfg)},
                fh,
                sort_keys=True,
                indent=2,
            )
            fh.write("\n")
    return digest


def _maybe_checkpoint(path, digest):
    return load_checkpoint(path, expect_digest=digest) if os.path.isfile(path) else None


def _require_checkpoint(path, digest, what: str) -> Checkpoint:
    ckpt = _maybe_checkpoint(path, digest)
    if ckpt is None:
        raise PrerequisiteError(f"{what} missing: {path}")
    return ckpt


def _load_assignments(ctx: _RunContext):
    path = clusters_path(ctx.run_dir)
    if not os.path.isfile(path):
        return None
    arrays, meta = read_container(path)
    if meta.get("config_digest") != ctx.digest:
        raise PrerequisiteError(f"{path} belongs to a different config")
    return np.asarray(arrays["assignments"], dtype=np.int64), meta


def _stage1(ctx: _RunContext) -> dict:
    path = stage1_checkpoint_path(ctx.run_dir)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    t0 = time.monotonic()
    existing = _maybe_checkpoint(path, ctx.digest)
    if existing is not None:
        return {"steps": int(existing.state.step), "cached": True,
                "seconds": round(time.monotonic() - t0, 3), "final_loss": None}
    v1, v2 = ctx.views()
    spec = ctx.cfg.schedule
    state, history = train_contrastive(
        ctx.corpus,
        spec,
        spec.n1,
        (ctx.cfg.seed, STAGE1_STREAM),
        enc_cfg=ctx.cfg.encoder,
        head_cfg=ctx.cfg.head,
        view1=v1,
        view2=v2,
        stage="stage1",
        log_path=os.path.join(os.path.dirname(path), "metrics.jsonl"),
    )
    save_checkpoint(path, state, "base", ctx.digest, extra={"epochs": spec.n1})
    return {"steps": int(state.step), "cached": False,
            "seconds": round(time.monotonic() - t0, 3),
            "final_loss": history[-1]["loss"] if history else None}


def compute_assignments(cfg: RunConfig, base_state: ModelState, corpus: Dataset):
    """Cluster labels for every corpus item under the configured method."""
    k = cfg.schedule.k_clusters
    if cfg.partitioning == "random":
        rng = derive_rng(cfg.seed, CLUSTER_STREAM)
        return rng.integers(0, k, size=len(corpus)).astype(np.int64), None
    reps = extract_representations(base_state, corpus, layer=cfg.cluster_layer)
    fit_rows = reps.rows
    if cfg.cluster_sample is not None and cfg.cluster_sample < len(fit_rows):
        pick = derive_rng(cfg.seed, CLUSTER_STREAM, 1).choice(
            len(fit_rows), size=cfg.cluster_sample, replace=False
        )
        fit_rows = fit_rows[np.sort(pick)]
    cm = kmeans_cosine(
        fit_rows,
        k,
        max_iters=cfg.kmeans_max_iters,
        n_init=cfg.kmeans_n_init,
        rng=derive_rng(cfg.seed, CLUSTER_STREAM, 0),
    )
    return cluster_assign(cm, reps.rows).astype(np.int64), float(cm.inertia)


def _clusters(ctx: _RunContext) -> dict:
    path = clusters_path(ctx.run_dir)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    t0 = time.monotonic()
    loaded = _load_assignments(ctx)
    if loaded is not None:
        assignments, meta = loaded
        sizes = np.bincount(assignments, minlength=ctx.cfg.schedule.k_clusters)
        return {"sizes": sizes.tolist(), "cached": True,
                "seconds": round(time.monotonic() - t0, 3),
                "inertia": meta.get("inertia")}
    base = _require_checkpoint(stage1_checkpoint_path(ctx.run_dir), ctx.digest, "stage1 checkpoint")
    assignments, inertia = compute_assignments(ctx.cfg, base.state, ctx.corpus)
    meta = {
        "kind": "clusters",
        "version": 1,
        "config_digest": ctx.digest,
        "method": ctx.cfg.partitioning,
        "k": ctx.cfg.schedule.k_clusters,
        "layer": ctx.cfg.cluster_layer,
    }
    if inertia is not None:
        meta["inertia"] = inertia
    write_container(path, {"assignments": assignments.astype(np.int64)}, meta)
    sizes = np.bincount(assignments, minlength=ctx.cfg.schedule.k_clusters)
    return {"sizes": sizes.tolist(), "cached": False,
            "seconds": round(time.monotonic() - t0, 3), "inertia": inertia}


def _stage2(ctx: _RunContext) -> dict:
    loaded = _load_assignments(ctx)
    if loaded is None:
        raise PrerequisiteError(f"cluster assignments missing: {clusters_path(ctx.run_dir)}")
    assignments, _ = loaded
    cfg, spec = ctx.cfg, ctx.cfg.schedule
    sizes = np.bincount(assignments, minlength=spec.k_clusters)
    budgets = allocate_expert_budget(spec.n2, sizes)
    t0 = time.monotonic()
    jobs = []
    for k in range(spec.k_clusters):
        path = expert_checkpoint_path(ctx.run_dir, k)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        if _maybe_checkpoint(path, ctx.digest) is not None:
            continue
        if cfg.expert_data == "full":
            subset = ctx.corpus
        else:
            idx = np.flatnonzero(assignments == k)
            subset = ctx.corpus.select(idx, name=f"{ctx.corpus.name}/cluster-{k}")
        jobs.append(
            (
                k,
                os.path.dirname(path),
                subset,
                spec,
                float(budgets[k]),
                (cfg.seed, EXPERT_STREAM, k),
                cfg.encoder,
                cfg.head,
                ctx.view_size,
                ctx.digest,
            )
        )
    ran = _run_expert_jobs(jobs, ctx.workers)
    return {"budgets": [float(b) for b in budgets], "trained": sorted(ran),
            "cached": len(jobs) == 0, "seconds": round(time.monotonic() - t0, 3)}


def _stage3(ctx: _RunContext) -> dict:
    path = student_checkpoint_path(ctx.run_dir)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    t0 = time.monotonic()
    existing = _maybe_checkpoint(path, ctx.digest)
    if existing is not None:
        return {"steps": int(existing.state.step), "cached": True,
                "seconds": round(time.monotonic() - t0, 3), "final_loss": None}
    cfg, spec = ctx.cfg, ctx.cfg.schedule
    base = _require_checkpoint(stage1_checkpoint_path(ctx.run_dir), ctx.digest, "stage1 checkpoint")
    loaded = _load_assignments(ctx)
    if loaded is None:
        raise PrerequisiteError(f"cluster assignments missing: {clusters_path(ctx.run_dir)}")
    assignments, _ = loaded
    experts = [
        _require_checkpoint(
            expert_checkpoint_path(ctx.run_dir, k), ctx.digest, f"expert {k} checkpoint"
        ).state
        for k in range(spec.k_clusters)
    ]
    v1, v2 = ctx.views()
    student, history = distill(
        ctx.corpus,
        spec,
        spec.n3,
        base.state,
        experts,
        assignments,
        (cfg.seed, DISTILL_STREAM),
        enc_cfg=cfg.encoder,
        head_cfg=cfg.head,
        view1=v1,
        view2=v2,
        targets=cfg.distill_targets,
        teacher_view=cfg.teacher_view,
        stage="stage3",
        log_path=os.path.join(os.path.dirname(path), "metrics.jsonl"),
    )
    save_checkpoint(path, student, "student", ctx.digest, extra={"epochs": spec.n3})
    return {"steps": int(student.step), "cached": False,
            "seconds": round(time.monotonic() - t0, 3),
            "final_loss": history[-1]["loss"] if history else None}


_STAGE_FUNCS = {"stage1": _stage1, "clusters": _clusters, "stage2": _stage2, "stage3": _stage3}


def run_stages(cfg: RunConfig, stages, run_dir=None, workers: int | None = None) -> dict:
    """Execute the named stages against a run directory.

    A stage already represented by a digest-matching artifact is skipped;
    a stage whose prerequisites are absent raises PrerequisiteError. Running
    all stages is therefore both a fresh run and a resume.
    """
    run_dir = cfg.output_dir if run_dir is None else run_dir
    workers = cfg.workers if workers is None else workers
    unknown = [s for s in stages if s not in _STAGE_FUNCS]
    if unknown:
        raise ConfigError(f"unknown stages {unknown}; choose from {list(_STAGE_FUNCS)}")
    ctx = _RunContext(cfg, run_dir, workers)
    ensure_plan(cfg, run_dir)
    summary = {"digest": ctx.digest, "run_dir": ctx.run_dir, "stages": {}}
    for stage in ALL_STAGES:
        if stage in stages:
            summary["stages"][stage] = _STAGE_FUNCS[stage](ctx)
    return summary


def run_dnc(cfg: RunConfig, run_dir=None, workers: int | None = None) -> dict:
    """Execute (or resume) the full pipeline; returns a summary dict.

    Completed stages are detected by their digest-stamped checkpoints and
    skipped, so a rerun after an interruption continues where it stopped and
    finishes with byte-identical artifacts.
    """
    run_dir = cfg.output_dir if run_dir is None else run_dir
    summary = run_stages(cfg, ALL_STAGES, run_dir=run_dir, workers=workers)
    summary["final_checkpoint"] = student_checkpoint_path(run_dir)
    with open(os.path.join(run_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return summary


# ---------------------------------------------------------------------------
# Ablation grid
# ---------------------------------------------------------------------------

ABLATION_VARIANTS = {
    "dnc": {},
    "random-partition": {"partitioning": "random"},
    "ensemble": {"expert_data": "full"},
    "base-only": {"distill_targets": "base_only"},
    "experts-only": {"distill_targets": "experts_only"},
    "center-crop": {"teacher_view": "center_crop"},
}


def run_ablation(cfg: RunConfig, variants, seeds, root_dir, workers: int = 1, probe: bool = True):
    """Materialize an ablation grid, sharing stages across variants.

    For each seed, stage 1 runs once; expert banks are computed once per
    distinct (partitioning, expert_data) pair; each variant then distills
    and (optionally) probes. Returns one record per (variant, seed).
    """
    from .evaluation import linear_probe

    unknown = [v for v in variants if v not in ABLATION_VARIANTS]
    if unknown:
        raise ConfigError(f"unknown variants {unknown}; choose from {list(ABLATION_VARIANTS)}")
    records = []
    os.makedirs(root_dir, exist_ok=True)
    for seed in seeds:
        seed_dir = os.path.join(root_dir, f"seed-{seed}")
        variant_cfgs = {}
        bank_dirs = {}
        for name in variants:
            vcfg = cfg.with_updates(
                seed=int(seed),
                data=replace(cfg.data, seed=int(seed)),
                **ABLATION_VARIANTS[name],
            )
            variant_cfgs[name] = vcfg
            bank = (vcfg.partitioning, vcfg.expert_data)
            bank_dirs.setdefault(bank, os.path.join(seed_dir, "bank-" + "-".join(bank)))
        # One expert bank per distinct partitioning/data mode; stage1 within
        # a bank is identical across banks (same seed and schedule), so the
        # first bank trains it and later banks copy the artifact.
        first_bank = None
        for bank, bank_dir in bank_dirs.items():
            bcfg = next(
                v for v in variant_cfgs.values() if (v.partitioning, v.expert_data) == bank
            )
            bcfg = bcfg.with_updates(
                distill_targets="both", teacher_view="augmented", output_dir=bank_dir
            )
            if first_bank is not None:
                _copy_stage1(first_bank, bank_dir, bcfg)
            run_stages(bcfg, ("stage1", "clusters", "stage2"), run_dir=bank_dir, workers=workers)
            if first_bank is None:
                first_bank = bank_dir
        for name in variants:
            vcfg = variant_cfgs[name]
            bank_dir = bank_dirs[(vcfg.partitioning, vcfg.expert_data)]
            vdir = os.path.join(seed_dir, name)
            vcfg = vcfg.with_updates(output_dir=vdir)
            _copy_bank(bank_dir, vdir, vcfg)
            run_stages(vcfg, ("stage3",), run_dir=vdir, workers=workers)
            record = {"variant": name, "seed": int(seed), "run_dir": vdir}
            if probe:
                data = materialize_data(vcfg.data)
                student = load_checkpoint(student_checkpoint_path(vdir)).state
                result = linear_probe(student, data["probe_train"], data["probe_test"], vcfg.probe)
                record["top1"] = result.top1
                record["val_top1"] = result.val_top1
                with open(os.path.join(vdir, "probe.json"), "w", encoding="utf-8") as fh:
                    json.dump(result.to_dict(), fh, sort_keys=True, indent=2)
                    fh.write("\n")
            records.append(record)
    with open(os.path.join(root_dir, "ablation.json"), "w", encoding="utf-8") as fh:
        json.dump(records, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return records


def _restamp(src_path, dst_path, digest):
    """Copy a checkpoint into another run, restamping its config digest."""
    arrays, meta = read_container(src_path)
    meta = dict(meta)
    meta["config_digest"] = digest
    os.makedirs(os.path.dirname(dst_path), exist_ok=True)
    write_container(dst_path, arrays, meta)


def _copy_stage1(src_dir, dst_dir, cfg: RunConfig):
    src = stage1_checkpoint_path(src_dir)
    dst = stage1_checkpoint_path(dst_dir)
    if os.path.isfile(src) and not os.path.isfile(dst):
        ensure_plan(cfg, dst_dir)
        _restamp(src, dst, config_digest(cfg))


def _copy_bank(bank_dir, variant_dir, cfg: RunConfig):
    """Seed a variant run dir with the shared stage1/clusters/stage2 artifacts."""
    ensure_plan(cfg, variant_dir)
    digest = config_digest(cfg)
    pairs = [
        (stage1_checkpoint_path(bank_dir), stage1_checkpoint_path(variant_dir)),
        (clusters_path(bank_dir), clusters_path(variant_dir)),
    ]
    for k in range(cfg.schedule.k_clusters):
        pairs.append(
            (expert_checkpoint_path(bank_dir, k), expert_checkpoint_path(variant_dir, k))
        )
    for src, dst in pairs:
        if os.path.isfile(src) and not os.path.isfile(dst):
            _restamp(src, dst, digest)
